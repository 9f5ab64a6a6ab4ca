"""Training schemes for the CSG autoencoder.

Four switches select the scheme:

* ``pretrain`` - fit the encoder on the reconstruction loss alone for
  ``pretrain_epochs`` before the codebook exists;
* ``kmeans_init`` - seed the codebook with k-means centroids of the current
  embeddings instead of small random values;
* ``detached`` - the quantization loss sees gradient-stopped embeddings, so it
  only moves the codebook and the reconstruction loss only moves the encoder;
* ``asynchronous`` - step the encoder first, re-embed and re-assign with the
  new encoder, then step the codebook on those fresh assignments.

All four on is PIDA; all off is the naive joint backpropagation scheme.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff import (EncoderParams, OptimizerState, adamw_step, encoder_backward, encoder_blocks,
                       encoder_forward, encoder_from_blocks, init_encoder, load_checkpoint, optimizer_blocks,
                       optimizer_from_blocks, reconstruction_loss, save_checkpoint)
from .baselines import KMEANS_RESTARTS, kmeans
from .errors import ConfigError, TrainingDivergedError
from .lscm import DEFAULT_FLOOR_MW, BeamPatternMatrix, dbm_to_mw
from .model import Codebook, Losses, active_ratio, quantization_loss, quantize, summarize

SCHEME_FLAGS = ("pretrain", "kmeans_init", "detached", "asynchronous")


@dataclass
class TrainConfig:
    pretrain: bool = True
    kmeans_init: bool = True
    detached: bool = True
    asynchronous: bool = True
    pretrain_epochs: int = 300
    epochs: int = 600
    batch_size: int = 0
    w1: float = 1.0
    w2: float = 1.0
    lr: float = 1e-2
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_fraction: float = 0.1
    seed: int = 0
    width: int = 256
    depth: int = 6
    codebook_init_std: float = 0.01
    include_empty_grids: bool = True
    floor_mw: float = DEFAULT_FLOOR_MW
    K: int | None = None
    L: int | None = None
    trace: bool = False

    @classmethod
    def for_scheme(cls, name, **overrides) -> "TrainConfig":
        """``pida``, ``naive`` or a 4-character flag string such as ``1010`` (P, I, D, A)."""
        if name == "pida":
            flags = "1111"
        elif name == "naive":
            flags = "0000"
        elif len(name) == 4 and set(name) <= {"0", "1"}:
            flags = name
        else:
            raise ConfigError(f"unknown training scheme {name!r}")
        base = {f: c == "1" for f, c in zip(SCHEME_FLAGS, flags)}
        base.update(overrides)
        return cls(**base)

    @property
    def scheme(self) -> str:
        flags = "".join("1" if getattr(self, f) else "0" for f in SCHEME_FLAGS)
        return {"1111": "pida", "0000": "naive"}.get(flags, flags)

    @property
    def effective_pretrain_epochs(self) -> int:
        return self.pretrain_epochs if self.pretrain else 0

    def validate(self):
        if self.pretrain and not 0 <= self.pretrain_epochs <= self.epochs:
            raise ConfigError(f"need 0 <= pretrain_epochs ({self.pretrain_epochs}) <= epochs ({self.epochs})")
        if self.epochs < 0 or self.batch_size < 0:
            raise ConfigError("epochs and batch_size must be nonnegative")
        if not 0.0 <= self.val_fraction <= 0.5:
            raise ConfigError(f"val_fraction {self.val_fraction} outside [0, 0.5]")
        if self.w1 < 0 or self.w2 < 0:
            raise ConfigError("loss weights must be nonnegative")
        return self


@dataclass
class EpochRecord:
    epoch: int
    l1: float
    l2: float
    combined: float
    active_ratio: float
    val_l1: float
    wall_s: float = 0.0


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    trace: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self, phase=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        head = ["epoch", "l1", "l2", "combined", "active_ratio", "val_l1"]
        writer.writerow((["phase"] if phase else []) + head)
        for r in self.records:
            row = [r.epoch] + [repr(float(getattr(r, h))) for h in head[1:]]
            writer.writerow(([phase] if phase else []) + row)
        return buf.getvalue()

    def payload(self):
        """Everything except wall-clock times; equal for identical runs."""
        return [(r.epoch, r.l1, r.l2, r.combined, r.active_ratio, r.val_l1) for r in self.records]


@dataclass
class TrainResult:
    params: EncoderParams
    codebook: Codebook | None
    log: TrainLog
    pretrain_log: TrainLog
    summary: object
    labels: np.ndarray
    embeddings: np.ndarray
    post_init_active_ratio: float
    config: TrainConfig
    encoder_state: OptimizerState | None = None
    codebook_state: OptimizerState | None = None
    best_epoch: int = -1
    unit: float = 1.0

    @property
    def centers(self):
        """Effective grid centers in physical CAPS units."""
        return self.codebook.effective() * self.unit

    @property
    def final_active_ratio(self) -> float:
        return self.log[-1].active_ratio if len(self.log) else float("nan")


def params_digest(params: EncoderParams) -> str:
    h = hashlib.sha256()
    for arr in params.named().values():
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def _matrix(A):
    return A.A if isinstance(A, BeamPatternMatrix) else np.asarray(A, dtype=np.float64)


def encoder_scaling(y_dbm, A):
    """Frozen input standardization and output scale for a dataset.

    The output scale is the flat CAPS level that reproduces the mean received
    power, so a freshly initialized encoder starts at a physically sensible
    magnitude.
    """
    y = np.asarray(y_dbm, dtype=np.float64)
    shift = y.mean(axis=0)
    scale = y.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    out_scale = float(dbm_to_mw(y).mean() / _matrix(A).sum(axis=1).mean())
    return shift, scale, out_scale


def caps_unit(embeddings, L):
    """Codebook unit: mean of each embedding's L largest entries (1.0 if that is zero)."""
    X = np.atleast_2d(embeddings)
    L = min(L, X.shape[1])
    unit = float(np.mean(np.partition(X, X.shape[1] - L, axis=1)[:, -L:]))
    return unit if unit > 0 and math.isfinite(unit) else 1.0


def split_validation(n, fraction, rng):
    n_val = int(round(fraction * n))
    perm = rng.permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def init_codebook(embeddings, K, L, seed=0) -> Codebook:
    """Codewords from k-means centroids of the embeddings."""
    X = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if X.shape[0] < K:
        raise ConfigError(f"k-means codebook init needs at least K={K} samples, got {X.shape[0]}")
    km = kmeans(X, K, seed, n_init=KMEANS_RESTARTS)
    return Codebook(km.centers.copy(), L)


def random_codebook(K, N, L, std, rng) -> Codebook:
    return Codebook(rng.standard_normal((K, N)) * std, L)


def validate(params, cb, y_dbm, A, floor_mw=DEFAULT_FLOOR_MW, unit=1.0):
    """Evaluation-only pass; returns ``(L1, active_ratio)``.

    ``unit`` converts embeddings into the codebook's CAPS unit.
    """
    x, _ = encoder_forward(params, y_dbm)
    l1, _ = reconstruction_loss(x, _matrix(A), y_dbm, floor_mw)
    ratio = active_ratio(quantize(cb, x / unit)) if cb is not None else float("nan")
    return l1, ratio


def _eval_losses(params, cb, unit, y_dbm, A, cfg):
    x, _ = encoder_forward(params, y_dbm)
    u = x / unit
    assignment = quantize(cb, u)
    l1, _ = reconstruction_loss(x, A, y_dbm, cfg.floor_mw)
    l2 = quantization_loss(u, assignment, cb, cfg.include_empty_grids, need_embedding_grad=False).loss
    return Losses(l1, l2, cfg.w1 * l1 + cfg.w2 * l2), active_ratio(assignment)


def _batches(n, batch_size, rng):
    if batch_size <= 0 or batch_size >= n:
        return [np.arange(n)]
    perm = rng.permutation(n)
    return [np.sort(perm[i:i + batch_size]) for i in range(0, n, batch_size)]


def _diagnostics(params, cb=None):
    out = {name: float(np.max(np.abs(a))) if a.size else 0.0 for name, a in params.named().items()}
    if cb is not None:
        out["xi"] = float(np.max(np.abs(cb.xi)))
    return out


def _check_finite(epoch, values, params, cb=None):
    if not all(math.isfinite(v) for v in values):
        raise TrainingDivergedError(f"non-finite loss at epoch {epoch}", epoch, _diagnostics(params, cb))


def _new_optimizer(cfg):
    return OptimizerState(cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps)


def pretrain_encoder(cfg: TrainConfig, y_train, y_val, A, params, rng, opt=None):
    """Fit the encoder on L1 only; returns ``(best_params, log, optimizer_state)``.

    The returned snapshot is the epoch with the lowest validation L1 (training
    L1 when there is no validation split).
    """
    A = _matrix(A)
    opt = opt or _new_optimizer(cfg)
    log = TrainLog()
    best, best_score = params.copy(), math.inf
    for epoch in range(cfg.effective_pretrain_epochs):
        t0 = time.perf_counter()
        total = 0.0
        batches = _batches(len(y_train), cfg.batch_size, rng)
        for idx in batches:
            yb = y_train[idx]
            x, cache = encoder_forward(params, yb)
            l1, g_x = reconstruction_loss(x, A, yb, cfg.floor_mw)
            _check_finite(epoch, [l1], params)
            adamw_step(opt, params.named(), encoder_backward(params, cache, g_x), prefix="encoder.")
            total += l1 * len(idx)
        l1 = total / len(y_train)
        val_l1 = validate(params, None, y_val, A, cfg.floor_mw)[0] if len(y_val) else \
            validate(params, None, y_train, A, cfg.floor_mw)[0]
        _check_finite(epoch, [val_l1], params)
        if val_l1 < best_score:
            best, best_score = params.copy(), val_l1
        log.records.append(EpochRecord(epoch, l1, float("nan"), l1, float("nan"), val_l1,
                                       time.perf_counter() - t0))
    return best, log, opt


def train(cfg: TrainConfig, dataset, A) -> TrainResult:
    """Run the configured scheme end to end and summarize the best model."""
    cfg.validate()
    A_mat = _matrix(A)
    y_all = np.asarray(dataset.rsrp_dbm, dtype=np.float64)
    if y_all.shape[0] == 0:
        raise ConfigError("empty dataset")
    K = cfg.K or dataset.K
    L = cfg.L or dataset.L
    if not K or not L:
        raise ConfigError("grid count K and sparsity L must be given")
    N = A_mat.shape[1]

    split_seq, init_seq, cb_seq, km_seq, batch_seq = np.random.SeedSequence(cfg.seed).spawn(5)
    train_idx, val_idx = split_validation(len(y_all), cfg.val_fraction, np.random.default_rng(split_seq))
    y_train, y_val = y_all[train_idx], y_all[val_idx]
    batch_rng = np.random.default_rng(batch_seq)

    shift, scale, out_scale = encoder_scaling(y_train, A_mat)
    params = init_encoder(A_mat.shape[0], N, np.random.default_rng(init_seq), cfg.width, cfg.depth,
                          shift, scale, out_scale)
    enc_opt = _new_optimizer(cfg)

    # pretraining phase
    pre_log = TrainLog()
    if cfg.effective_pretrain_epochs:
        params, pre_log, _ = pretrain_encoder(cfg, y_train, y_val, A_mat, params, batch_rng)
        enc_opt = _new_optimizer(cfg)

    # codebook initialization
    x_train, _ = encoder_forward(params, y_train)
    unit = caps_unit(x_train, L)
    u_train = x_train / unit
    km_seed = int(np.random.default_rng(km_seq).integers(2 ** 31))
    if cfg.kmeans_init:
        cb = init_codebook(u_train, K, L, km_seed)
    else:
        cb = random_codebook(K, N, L, cfg.codebook_init_std, np.random.default_rng(cb_seq))
    post_init_ratio = active_ratio(quantize(cb, u_train))
    cb_opt = _new_optimizer(cfg)

    log = TrainLog()
    best = (params.copy(), cb.copy(), -1)
    best_score = math.inf
    n_train_epochs = cfg.epochs - cfg.effective_pretrain_epochs
    for epoch in range(n_train_epochs):
        t0 = time.perf_counter()
        l1_sum = l2_sum = 0.0
        used = np.zeros(K, dtype=bool)
        trace = {}
        for idx in _batches(len(y_train), cfg.batch_size, batch_rng):
            yb = y_train[idx]
            x, cache = encoder_forward(params, yb)
            assignment = quantize(cb, x / unit)
            l1, g1 = reconstruction_loss(x, A_mat, yb, cfg.floor_mw)
            q = quantization_loss(x / unit, assignment, cb, cfg.include_empty_grids, need_embedding_grad=not cfg.detached)
            g_x = cfg.w1 * g1
            l2_to_encoder = 0.0
            if not cfg.detached:
                g_x = g_x + (cfg.w2 / unit) * q.grad_embeddings
                l2_to_encoder = float(np.linalg.norm((cfg.w2 / unit) * q.grad_embeddings))
            enc_grads = encoder_backward(params, cache, g_x)
            _check_finite(epoch, [l1, q.loss], params, cb)
            adamw_step(enc_opt, params.named(), enc_grads, prefix="encoder.")
            if cfg.asynchronous:
                u_new = encoder_forward(params, yb)[0] / unit
                assignment = quantize(cb, u_new)
                q = quantization_loss(u_new, assignment, cb, cfg.include_empty_grids, need_embedding_grad=False)
                assign_digest = params_digest(params) if cfg.trace else None
            else:
                assign_digest = None
            if cfg.w2 > 0:
                adamw_step(cb_opt, {"xi": cb.xi}, {"xi": cfg.w2 * q.grad_xi}, prefix="codebook.")
            l1_sum += l1 * len(idx)
            l2_sum += q.loss * len(idx)
            used[np.unique(assignment.labels)] = True
            if cfg.trace:
                trace = {"epoch": epoch, "l2_encoder_grad_norm": l2_to_encoder,
                         "post_step_digest": params_digest(params), "assignment_digest": assign_digest,
                         "max_support": int(np.max((cb.effective() != 0).sum(axis=1))),
                         "min_center": float(cb.effective().min())}
        l1 = l1_sum / len(y_train)
        l2 = l2_sum / len(y_train)
        combined = cfg.w1 * l1 + cfg.w2 * l2
        if len(y_val):
            val_losses, _ = _eval_losses(params, cb, unit, y_val, A_mat, cfg)
        else:
            val_losses, _ = _eval_losses(params, cb, unit, y_train, A_mat, cfg)
        _check_finite(epoch, [val_losses.combined], params, cb)
        if val_losses.combined < best_score:
            best, best_score = (params.copy(), cb.copy(), epoch), val_losses.combined
        log.records.append(EpochRecord(epoch, l1, l2, combined, float(used.mean()), val_losses.l1,
                                       time.perf_counter() - t0))
        if cfg.trace:
            log.trace.append(trace)

    best_params, best_cb, best_epoch = best
    x_all, _ = encoder_forward(best_params, y_all)
    assignment = quantize(best_cb, x_all / unit)
    assignment = replace(assignment, centers=assignment.centers * unit, distances=assignment.distances * unit)
    summary = summarize(assignment, x_all, L, A_mat, cfg.floor_mw,
                        meta={"method": f"csgae_{cfg.scheme}", "seed": cfg.seed, "best_epoch": best_epoch})
    return TrainResult(best_params, best_cb, log, pre_log, summary, assignment.labels, x_all, post_init_ratio, cfg,
                       enc_opt, cb_opt, best_epoch, unit)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_model(path, result: TrainResult):
    blocks = encoder_blocks(result.params)
    if result.codebook is not None:
        blocks["codebook.xi"] = result.codebook.xi
        blocks["codebook.L"] = np.array(result.codebook.L)
        blocks["codebook.unit"] = np.array(result.unit)
    if result.encoder_state is not None:
        blocks.update(optimizer_blocks(result.encoder_state, "opt.encoder."))
    if result.codebook_state is not None:
        blocks.update(optimizer_blocks(result.codebook_state, "opt.codebook."))
    save_checkpoint(path, blocks, result.params.depth)


def load_model(path):
    """Return ``(params, codebook, unit, encoder_state, codebook_state)``."""
    blocks, depth = load_checkpoint(path)
    params = encoder_from_blocks(blocks, depth)
    cb = None
    if "codebook.xi" in blocks:
        cb = Codebook(blocks["codebook.xi"].copy(), int(np.asarray(blocks["codebook.L"]).item()))
    unit = float(np.asarray(blocks.get("codebook.unit", 1.0)).item())
    enc = optimizer_from_blocks(blocks, "opt.encoder.") if "opt.encoder.hyper" in blocks else None
    cbs = optimizer_from_blocks(blocks, "opt.codebook.") if "opt.codebook.hyper" in blocks else None
    return params, cb, unit, enc, cbs


def assign_samples(params, cb, y_dbm, unit=1.0):
    x, _ = encoder_forward(params, y_dbm)
    return quantize(cb, x / unit), x
