"""Synthetic CSG datasets: sparse grid centers, perturbed CAPS samples, RSRP observations."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (ConfigError, EmptyDatasetError, ShapeError, TruncatedFileError,
                     UnrecognizedFormatError, VersionMismatchError)
from .lscm import DEFAULT_FLOOR_MW, BeamPatternMatrix, forward_rsrp

DATASET_MAGIC = b"CSGD1"
DATASET_VERSION = 1
_HEADER = struct.Struct("<5sI5Q2d")


@dataclass(frozen=True)
class SyntheticConfig:
    K: int = 10
    N: int = 256
    L: int = 3
    samples_per_grid: int = 200
    p: float = 1e-5
    s: float = 0.5
    seed: int = 0

    def validate(self):
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if not 1 <= self.L <= self.N:
            raise ConfigError(f"sparsity L={self.L} must satisfy 1 <= L <= N={self.N}")
        if self.samples_per_grid < 1:
            raise ConfigError("samples_per_grid must be >= 1")
        if not 0.0 <= self.s <= 1.0:
            raise ConfigError(f"scale factor s={self.s} outside [0, 1]")
        if not self.p > 0:
            raise ConfigError(f"Laplace power p={self.p} must be positive")
        return self


@dataclass
class SyntheticDataset:
    """Ground-truth centers and labels plus the observed RSRP.

    ``samples``/``labels``/``perturbations`` may be ``None`` for observation-only
    data; pipelines that need them raise :class:`~csgrid.errors.CapabilityError`.
    """

    centers: np.ndarray | None
    samples: np.ndarray | None
    rsrp_dbm: np.ndarray
    labels: np.ndarray | None
    perturbations: np.ndarray | None
    L: int
    s: float = 0.0
    p: float = 0.0
    locations: np.ndarray | None = None

    @property
    def I(self) -> int:
        return self.rsrp_dbm.shape[0]

    @property
    def M(self) -> int:
        return self.rsrp_dbm.shape[1]

    @property
    def K(self) -> int:
        return 0 if self.centers is None else self.centers.shape[0]

    @property
    def N(self) -> int:
        return 0 if self.centers is None else self.centers.shape[1]

    def subset(self, idx):
        pick = lambda a: None if a is None else a[idx]
        return SyntheticDataset(self.centers, pick(self.samples), self.rsrp_dbm[idx], pick(self.labels),
                                pick(self.perturbations), self.L, self.s, self.p, pick(self.locations))

    def location_coords(self):
        """Per-sample location; synthetic data embeds the grid label as a 1-D coordinate."""
        if self.locations is not None:
            return np.asarray(self.locations, dtype=np.float64).reshape(self.I, -1)
        if self.labels is None:
            return None
        return self.labels.astype(np.float64)[:, None]


def _laplace_abs(rng, size, scale):
    # inverse CDF; u in {0, 0.5} would give an infinite or zero draw, so redraw those
    u = rng.random(size)
    bad = (u == 0.0) | (u == 0.5)
    while np.any(bad):
        u[bad] = rng.random(np.count_nonzero(bad))
        bad = (u == 0.0) | (u == 0.5)
    u = u - 0.5
    x = -scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))
    return np.abs(x)


def truncated_normal(rng, size, low=-1.0, high=1.0):
    """Standard normal restricted to (low, high), by rejection."""
    n = int(np.prod(size))
    out = np.empty(n)
    filled = 0
    while filled < n:
        z = rng.standard_normal(max(2 * (n - filled), 16))
        z = z[(z > low) & (z < high)][: n - filled]
        out[filled:filled + z.size] = z
        filled += z.size
    return out.reshape(size)


def gen_centers(cfg: SyntheticConfig, rng) -> np.ndarray:
    """K x N nonnegative centers, each with exactly L nonzero entries."""
    cfg.validate()
    centers = np.zeros((cfg.K, cfg.N))
    for k in range(cfg.K):
        support = rng.choice(cfg.N, size=cfg.L, replace=False)
        centers[k, support] = _laplace_abs(rng, cfg.L, np.sqrt(cfg.p))
    return centers


def perturb(center, count, s, rng):
    """Draw ``count`` perturbations for one center.

    On-support entries are ``z * s * m``, off-support ``|z| * s * m`` with ``z``
    from TN(0, 1; -1, 1) and ``m`` the smallest nonzero center entry.
    """
    support = center > 0
    if not np.any(support):
        raise ConfigError("center has empty support")
    m = center[support].min()
    z = truncated_normal(rng, (count, center.size))
    return np.where(support[None, :], z, np.abs(z)) * (s * m)


def gen_dataset(cfg: SyntheticConfig, A, floor_mw=DEFAULT_FLOOR_MW) -> SyntheticDataset:
    cfg.validate()
    A_mat = A.A if isinstance(A, BeamPatternMatrix) else np.asarray(A)
    if A_mat.shape[1] != cfg.N:
        raise ShapeError(f"beam matrix has {A_mat.shape[1]} columns, config N={cfg.N}")
    root = np.random.SeedSequence(cfg.seed)
    center_seq, grid_seq = root.spawn(2)
    centers = gen_centers(cfg, np.random.default_rng(center_seq))
    grid_rngs = [np.random.default_rng(s) for s in grid_seq.spawn(cfg.K)]

    per = cfg.samples_per_grid
    labels = np.repeat(np.arange(cfg.K, dtype=np.uint32), per)
    perturbations = np.concatenate([perturb(centers[k], per, cfg.s, grid_rngs[k]) for k in range(cfg.K)])
    samples = centers[labels] + perturbations
    _, rsrp_dbm = forward_rsrp(A_mat, samples, floor_mw)
    return SyntheticDataset(centers, samples, rsrp_dbm, labels, perturbations, cfg.L, cfg.s, cfg.p)


def _f8(a):
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def save_dataset(ds: SyntheticDataset, path):
    if ds.I == 0:
        raise EmptyDatasetError("refusing to save an empty dataset")
    if ds.samples is None or ds.labels is None or ds.perturbations is None or ds.centers is None:
        raise ShapeError("only fully populated datasets can be saved")
    header = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, ds.K, ds.N, ds.L, ds.I, ds.M, ds.s, ds.p)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(_f8(ds.centers))
        fh.write(_f8(ds.samples))
        fh.write(_f8(ds.rsrp_dbm))
        fh.write(np.ascontiguousarray(ds.labels, dtype="<u4").tobytes())
        fh.write(_f8(ds.perturbations))


def load_dataset(path) -> SyntheticDataset:
    raw = Path(path).read_bytes()
    if len(raw) < 5 or raw[:5] != DATASET_MAGIC:
        raise UnrecognizedFormatError(f"{path}: unrecognized format")
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: truncated header")
    _, version, K, N, L, I, M, s, p = _HEADER.unpack_from(raw)
    if version != DATASET_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {DATASET_VERSION}")
    sizes = [("centers", K * N, "<f8"), ("samples", I * N, "<f8"), ("rsrp_dbm", I * M, "<f8"),
             ("labels", I, "<u4"), ("perturbations", I * N, "<f8")]
    need = _HEADER.size + sum(n * np.dtype(dt).itemsize for _, n, dt in sizes)
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: payload has {len(raw)} bytes, header promises {need}")
    out = {}
    offset = _HEADER.size
    for name, n, dt in sizes:
        out[name] = np.frombuffer(raw, dtype=dt, count=n, offset=offset).copy()
        offset += n * np.dtype(dt).itemsize
    return SyntheticDataset(
        centers=out["centers"].astype(np.float64).reshape(K, N),
        samples=out["samples"].astype(np.float64).reshape(I, N),
        rsrp_dbm=out["rsrp_dbm"].astype(np.float64).reshape(I, M),
        labels=out["labels"].astype(np.uint32),
        perturbations=out["perturbations"].astype(np.float64).reshape(I, N),
        L=L, s=s, p=p)
