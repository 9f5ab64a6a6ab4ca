"""Command-line harness: data generation, beams, training, baselines, evaluation, prediction and sweeps.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .baselines import PIPELINES, run_pipeline
from .datagen import SyntheticConfig, SyntheticDataset, gen_dataset, load_dataset, save_dataset
from .errors import ConfigError, CsgError, ShapeError
from .lscm import (DEFAULT_FLOOR_MW, BeamPatternMatrix, dbm_to_mw, default_beam_pattern, load_beam_pattern,
                   save_beam_pattern)
from .metrics import evaluate, grid_mae, grid_real_rsrp
from .model import GridCapsSummary, predict_under_beam
from .trainer import TrainConfig, save_model, train

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"pretrain", "kmeans_init", "detached", "asynchronous",
                                                      "seed", "K", "L"}
BEAM_KEYS = ("n_y", "n_z", "n_v", "n_h", "power", "spacing")
CONVENTION_KEYS = ("wasserstein_order", "entropy_base", "floor_dbm")


def conventions():
    """Fixed metric conventions recorded next to every metric payload."""
    return {"wasserstein_order": 1, "entropy_base": "e", "floor_dbm": -120.0, "grid_average": "mW"}


def method_names():
    return list(PIPELINES) + ["csgae_pida", "csgae_naive"] + [
        f"csgae_{i:04b}" for i in range(16)]


def is_valid_method(name):
    if name in PIPELINES or name in ("csgae_pida", "csgae_naive"):
        return True
    flags = name[len("csgae_"):] if name.startswith("csgae_") else ""
    return len(flags) == 4 and set(flags) <= {"0", "1"}


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    dataset_path: str | None = None
    synthetic: dict | None = None
    rounds: list = field(default_factory=lambda: [None])
    resample_per_seed: bool = True
    beam_path: str | None = None
    beam: dict = field(default_factory=dict)
    methods: list = field(default_factory=list)
    seeds: list = field(default_factory=lambda: [0])
    train: dict = field(default_factory=dict)
    metrics: list | None = None
    output_dir: str = "csg_output"
    workers: int = 1

    @classmethod
    def from_dict(cls, doc: dict, base_dir=".") -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config: top level must be a JSON object")
        unknown = set(doc) - {"dataset", "beam", "methods", "seeds", "train", "metrics", "output_dir", "workers"}
        if unknown:
            raise ConfigError(f"config: unknown field(s) {sorted(unknown)}")
        cfg = cls()
        base = Path(base_dir)

        ds = doc.get("dataset")
        if not isinstance(ds, dict) or not ({"path", "synthetic"} & set(ds)):
            raise ConfigError("config.dataset: need an object with 'path' or 'synthetic'")
        if "path" in ds:
            cfg.dataset_path = str(base / ds["path"])
            if not Path(cfg.dataset_path).is_file():
                raise ConfigError(f"config.dataset.path: {cfg.dataset_path} does not exist")
        else:
            syn = dict(ds["synthetic"])
            allowed = {f.name for f in fields(SyntheticConfig)}
            bad = set(syn) - allowed
            if bad:
                raise ConfigError(f"config.dataset.synthetic: unknown field(s) {sorted(bad)}")
            s_values = syn.pop("s", SyntheticConfig.s)
            cfg.rounds = list(s_values) if isinstance(s_values, list) else [s_values]
            if not cfg.rounds:
                raise ConfigError("config.dataset.synthetic.s: empty list")
            for s in cfg.rounds:
                try:
                    SyntheticConfig(**syn, s=s).validate()
                except (TypeError, ConfigError) as exc:
                    raise ConfigError(f"config.dataset.synthetic: {exc}") from None
            cfg.synthetic = syn
            cfg.resample_per_seed = bool(ds.get("resample_per_seed", True))

        beam = doc.get("beam", {})
        if not isinstance(beam, dict):
            raise ConfigError("config.beam: must be an object")
        if "path" in beam:
            cfg.beam_path = str(base / beam["path"])
            if not Path(cfg.beam_path).is_file():
                raise ConfigError(f"config.beam.path: {cfg.beam_path} does not exist")
        else:
            bad = set(beam) - set(BEAM_KEYS)
            if bad:
                raise ConfigError(f"config.beam: unknown field(s) {sorted(bad)}")
            cfg.beam = dict(beam)

        methods = doc.get("methods")
        if not isinstance(methods, list) or not methods:
            raise ConfigError("config.methods: need a nonempty list")
        for i, m in enumerate(methods):
            if not isinstance(m, str) or not is_valid_method(m):
                raise ConfigError(f"config.methods[{i}]: unknown method {m!r}")
        cfg.methods = list(methods)

        seeds = doc.get("seeds", [0])
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
            raise ConfigError("config.seeds: need a nonempty list of nonnegative integers")
        cfg.seeds = list(seeds)

        train_opts = doc.get("train", {})
        bad = set(train_opts) - TRAIN_KEYS
        if bad:
            raise ConfigError(f"config.train: unknown field(s) {sorted(bad)}")
        try:
            TrainConfig(**train_opts).validate()
        except (TypeError, ConfigError) as exc:
            raise ConfigError(f"config.train: {exc}") from None
        cfg.train = dict(train_opts)

        if "metrics" in doc:
            if not isinstance(doc["metrics"], list):
                raise ConfigError("config.metrics: must be a list of metric names")
            cfg.metrics = list(doc["metrics"])
        cfg.output_dir = os.environ.get("CSG_OUTPUT_DIR") or str(doc.get("output_dir", cfg.output_dir))
        workers = os.environ.get("CSG_WORKERS") or doc.get("workers", 1)
        try:
            cfg.workers = max(1, int(workers))
        except ValueError:
            raise ConfigError(f"workers: expected an integer, got {workers!r}") from None
        return cfg


def load_experiment_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return ExperimentConfig.from_dict(doc, Path(path).parent)


# ---------------------------------------------------------------------------
# single runs
# ---------------------------------------------------------------------------

def build_beam(cfg: ExperimentConfig) -> BeamPatternMatrix:
    if cfg.beam_path:
        return load_beam_pattern(cfg.beam_path)
    return default_beam_pattern(**cfg.beam)


def make_dataset(cfg: ExperimentConfig, beam, round_idx, seed) -> SyntheticDataset:
    if cfg.dataset_path:
        return load_dataset(cfg.dataset_path)
    syn = SyntheticConfig(**{"N": beam.N, **cfg.synthetic}, s=cfg.rounds[round_idx])
    if cfg.resample_per_seed:
        syn = replace(syn, seed=syn.seed + seed)
    return gen_dataset(syn.validate(), beam)


def summary_from_centers(centers, labels, K, L, beam, meta) -> GridCapsSummary:
    counts = np.bincount(labels, minlength=K)
    summary = GridCapsSummary(centers.copy(), counts, centers.copy(), L, None, meta)
    summary.train_rsrp_dbm = predict_under_beam(summary, beam)[0]
    return summary


def run_method(method, dataset, beam, seed, train_opts, K=None, L=None):
    """Return ``(labels, centers or None, summary or None, train result or None)``."""
    K = K or dataset.K
    L = L or dataset.L
    if method.startswith("csgae_"):
        tcfg = TrainConfig.for_scheme(method[len("csgae_"):], seed=seed, K=K, L=L, **train_opts)
        result = train(tcfg, dataset, beam)
        return result.labels, result.centers, result.summary, result
    pr = run_pipeline(method, dataset, beam, K, L, seed)
    summary = None
    if pr.centers is not None:
        summary = summary_from_centers(pr.centers, pr.labels, K, L, beam, {"method": method, "seed": seed})
    return pr.labels, pr.centers, summary, None


def score(dataset, beam, labels, centers, summary, K):
    """Metric dictionary for one run; keys absent when undefined."""
    labels = np.asarray(labels).astype(np.int64)
    if dataset.labels is not None:
        with_centers = centers is not None and dataset.centers is not None
        report = evaluate(dataset.labels, labels, K, dataset.centers if with_centers else None,
                          centers if with_centers else None)
    else:
        report = None
    out = report.to_dict() if report else {
        "active_ratio": float(np.count_nonzero(np.bincount(labels, minlength=K)) / K)}
    for key in CONVENTION_KEYS:
        out.pop(key, None)
    if summary is not None:
        y_mw = dbm_to_mw(dataset.rsrp_dbm)
        real, _ = grid_real_rsrp(y_mw, labels, K)
        pred, active = predict_under_beam(summary, beam)
        active_mae, overall = grid_mae(real, pred, active)
        if active_mae is not None:
            out["active_mae"] = active_mae
        out["overall_mae"] = overall
    return out


def run_cell(cfg: ExperimentConfig, method, seed, round_idx):
    """One (method, seed, round) computation; returns a JSON-ready payload and trainlog CSV text."""
    beam = build_beam(cfg)
    dataset = make_dataset(cfg, beam, round_idx, seed)
    labels, centers, summary, result = run_method(method, dataset, beam, seed, cfg.train)
    metrics = score(dataset, beam, labels, centers, summary, dataset.K)
    if cfg.metrics is not None:
        metrics = {k: v for k, v in metrics.items() if k in cfg.metrics}
    payload = {"method": method, "seed": seed, "round": round_idx, "s": cfg.rounds[round_idx],
               "metrics": metrics, "conventions": conventions()}
    log_csv = None
    if result is not None:
        payload["post_init_active_ratio"] = result.post_init_active_ratio
        payload["final_active_ratio"] = result.final_active_ratio
        payload["best_epoch"] = result.best_epoch
        log_csv = result.pretrain_log.to_csv("pretrain") + result.log.to_csv("train").split("\n", 1)[1]
    return payload, log_csv


def _cell_job(args):
    cfg, method, seed, round_idx = args
    t0 = time.time()
    try:
        payload, log_csv = run_cell(cfg, method, seed, round_idx)
        return method, seed, round_idx, payload, log_csv, None, time.time() - t0
    except Exception as exc:  # recorded in the manifest, the sweep continues
        return method, seed, round_idx, None, None, f"{type(exc).__name__}: {exc}", time.time() - t0


def run_name(method, seed, round_idx):
    return f"{method}__seed{seed}__r{round_idx}"


def aggregate_csv(payloads) -> str:
    groups = {}
    for p in payloads:
        for metric, value in p["metrics"].items():
            groups.setdefault((p["method"], p["round"], p["s"], metric), []).append(value)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "round", "s", "metric", "n", "mean", "min", "max", "spread"])
    for (method, rnd, s, metric), vals in sorted(groups.items(), key=lambda kv: tuple(map(str, kv[0]))):
        a = np.asarray(vals, dtype=np.float64)
        w.writerow([method, rnd, "" if s is None else repr(s), metric, a.size, repr(float(a.mean())),
                    repr(float(a.min())), repr(float(a.max())), repr(float(a.max() - a.min()))])
    return buf.getvalue()


def run_experiment(cfg: ExperimentConfig):
    """Execute every (method, seed, round) cell; returns ``(exit_code, payloads)``."""
    out = Path(cfg.output_dir)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    (out / "plots").mkdir(parents=True, exist_ok=True)
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    jobs = [(cfg, m, s, r) for r in range(len(cfg.rounds)) for m in cfg.methods for s in cfg.seeds]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_cell_job, jobs))
    else:
        results = [_cell_job(j) for j in jobs]

    payloads, failures, timings = [], [], {}
    for method, seed, rnd, payload, log_csv, error, wall in results:
        name = run_name(method, seed, rnd)
        timings[name] = wall
        if error is not None:
            failures.append({"run": name, "error": error})
            continue
        payloads.append(payload)
        (out / "runs" / f"{name}.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
        if log_csv is not None:
            (out / "plots" / f"trainlog__{name}.csv").write_text(log_csv)
    (out / "aggregate.csv").write_text(aggregate_csv(payloads))
    manifest = {"started": started, "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
                "runs": sorted(timings), "wall_seconds": timings, "failures": failures}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return (EXIT_RUNTIME if failures else EXIT_OK), payloads


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _beam_from_args(args):
    if getattr(args, "beam", None):
        return load_beam_pattern(args.beam)
    return default_beam_pattern()


def cmd_build_beam(args):
    beam = default_beam_pattern(args.n_y, args.n_z, args.n_v, args.n_h, args.power, args.spacing)
    save_beam_pattern(beam, args.out)
    print(f"wrote {args.out}: M={beam.M} N={beam.N}")
    return EXIT_OK


def cmd_gen_data(args):
    beam = _beam_from_args(args)
    cfg = SyntheticConfig(args.K, beam.N, args.L, args.samples_per_grid, args.p, args.s, args.seed).validate()
    ds = gen_dataset(cfg, beam)
    save_dataset(ds, args.out)
    print(f"wrote {args.out}: I={ds.I} M={ds.M} N={ds.N} K={ds.K}")
    return EXIT_OK


def _write_labels(path, labels):
    Path(path).write_text("".join(f"{int(v)}\n" for v in labels))


def _read_labels(path):
    try:
        return np.array([int(v) for v in Path(path).read_text().split()], dtype=np.int64)
    except ValueError as exc:
        raise CsgError(f"{path}: malformed label file ({exc})") from None


def _finish_run(args, method, dataset, beam, labels, centers, summary):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_labels(out / "labels.txt", labels)
    if summary is not None:
        summary.save(out / "summary.json")
    metrics = score(dataset, beam, labels, centers, summary, args.K or dataset.K)
    payload = {"method": method, "seed": args.seed, "metrics": metrics, "conventions": conventions()}
    (out / "metrics.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    print(json.dumps(metrics, indent=1, sort_keys=True))


def cmd_train(args):
    beam = _beam_from_args(args)
    dataset = load_dataset(args.data)
    opts = {"pretrain_epochs": args.pretrain_epochs, "epochs": args.epochs, "batch_size": args.batch_size,
            "w1": args.w1, "w2": args.w2, "lr": args.lr, "val_fraction": args.val_fraction}
    tcfg = TrainConfig.for_scheme(args.scheme, seed=args.seed, K=args.K, L=args.L, **opts)
    result = train(tcfg, dataset, beam)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "model.ckpt", result)
    (out / "trainlog.csv").write_text(result.pretrain_log.to_csv("pretrain")
                                      + result.log.to_csv("train").split("\n", 1)[1])
    _finish_run(args, f"csgae_{tcfg.scheme}", dataset, beam, result.labels, result.centers, result.summary)
    return EXIT_OK


def cmd_baseline(args):
    beam = _beam_from_args(args)
    dataset = load_dataset(args.data)
    labels, centers, summary, _ = run_method(args.method, dataset, beam, args.seed, {}, args.K, args.L)
    _finish_run(args, args.method, dataset, beam, labels, centers, summary)
    return EXIT_OK


def cmd_eval(args):
    dataset = load_dataset(args.data)
    labels = _read_labels(args.labels)
    if labels.size != dataset.I:
        raise ShapeError(f"label file has {labels.size} entries, dataset has {dataset.I} samples")
    summary = GridCapsSummary.load(args.summary) if args.summary else None
    beam = _beam_from_args(args)
    K = summary.K if summary is not None else int(args.K or dataset.K)
    centers = summary.centers if summary is not None else None
    print(json.dumps(score(dataset, beam, labels, centers, summary, K), indent=1, sort_keys=True))
    return EXIT_OK


def cmd_predict(args):
    summary = GridCapsSummary.load(args.summary)
    beam = load_beam_pattern(args.beam)
    if beam.N != summary.N:
        print(f"error: summary has N={summary.N} angular bins but beam matrix has N={beam.N}", file=sys.stderr)
        return EXIT_RUNTIME
    dbm, active = predict_under_beam(summary, beam, DEFAULT_FLOOR_MW)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["grid", "active"] + [f"beam_{m}" for m in range(beam.M)])
    for k in range(summary.K):
        w.writerow([k, int(active[k])] + [repr(float(v)) for v in dbm[k]])
    Path(args.out).write_text(buf.getvalue())
    print(f"wrote {args.out}: {int(active.sum())}/{summary.K} active grids")
    return EXIT_OK


def cmd_sweep(args):
    cfg = load_experiment_config(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    code, payloads = run_experiment(cfg)
    print(f"{len(payloads)} run(s) written to {cfg.output_dir}")
    if code != EXIT_OK:
        print(f"some runs failed; see {Path(cfg.output_dir) / 'manifest.json'}", file=sys.stderr)
    return code


def build_parser():
    parser = argparse.ArgumentParser(prog="csgrid", description="Channel-space gridization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-beam", help="write a beam pattern matrix for a URA with DFT beams")
    p.add_argument("--n-y", type=int, default=8)
    p.add_argument("--n-z", type=int, default=4)
    p.add_argument("--n-v", type=int, default=16)
    p.add_argument("--n-h", type=int, default=16)
    p.add_argument("--power", type=float, default=1.0)
    p.add_argument("--spacing", type=float, default=0.5, help="element spacing in wavelengths")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_beam)

    p = sub.add_parser("gen-data", help="generate a synthetic clustered CAPS/RSRP dataset")
    p.add_argument("--beam", help="beam file (default: built-in 32x256 pattern)")
    p.add_argument("--K", type=int, default=10)
    p.add_argument("--L", type=int, default=3)
    p.add_argument("--samples-per-grid", type=int, default=200)
    p.add_argument("--p", type=float, default=1e-5)
    p.add_argument("--s", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    def common(p):
        p.add_argument("--data", required=True)
        p.add_argument("--beam")
        p.add_argument("--K", type=int)
        p.add_argument("--L", type=int)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out-dir", required=True)

    p = sub.add_parser("train", help="train a CSG autoencoder")
    common(p)
    p.add_argument("--scheme", default="pida", help="pida, naive or a PIDA flag string like 1010")
    p.add_argument("--pretrain-epochs", type=int, default=300)
    p.add_argument("--epochs", type=int, default=600)
    p.add_argument("--batch-size", type=int, default=0)
    p.add_argument("--w1", type=float, default=1.0)
    p.add_argument("--w2", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("baseline", help="run a classical gridization pipeline")
    common(p)
    p.add_argument("--method", required=True, choices=PIPELINES)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("eval", help="score a label file against a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--summary")
    p.add_argument("--beam")
    p.add_argument("--K", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict per-grid RSRP under a new beam pattern")
    p.add_argument("--summary", required=True)
    p.add_argument("--beam", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sweep", help="run a multi-method, multi-seed experiment from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CsgError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
