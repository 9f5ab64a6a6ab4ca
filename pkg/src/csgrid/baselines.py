"""k-means, greedy sparse coding and the classical gridization pipelines."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CapabilityError, ConfigError, ShapeError
from .lscm import DEFAULT_FLOOR_MW, BeamPatternMatrix, dbm_to_mw

KMEANS_RESTARTS = 10


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    inertia: float
    iterations: int
    inertia_history: list = field(default_factory=list)


def _sq_dist(X, C):
    # direct differences: exact ties stay ties, so argmin picks the lowest index
    out = np.empty((X.shape[0], C.shape[0]))
    step = max(1, 4_000_000 // max(1, C.size))
    for lo in range(0, X.shape[0], step):
        out[lo:lo + step] = ((X[lo:lo + step, None, :] - C[None]) ** 2).sum(axis=2)
    return out


def kmeans_plusplus(X, K, rng):
    n = X.shape[0]
    centers = np.empty((K, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for k in range(1, K):
        total = d2.sum()
        i = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers[k] = X[i]
        d2 = np.minimum(d2, ((X - centers[k]) ** 2).sum(axis=1))
    return centers


def _lloyd(X, centers, max_iter, tol):
    d = _sq_dist(X, centers)
    labels = np.argmin(d, axis=1)
    history = [float(d[np.arange(X.shape[0]), labels].sum())]
    it = 0
    for it in range(1, max_iter + 1):
        new = centers.copy()
        counts = np.bincount(labels, minlength=centers.shape[0])
        for k in np.flatnonzero(counts):
            new[k] = X[labels == k].mean(axis=0)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            cost = d[np.arange(X.shape[0]), labels].copy()
            for k in empty:
                far = int(np.argmax(cost))
                new[k] = X[far]
                cost[far] = -np.inf
        shift = float(np.sqrt(((new - centers) ** 2).sum(axis=1)).max())
        centers = new
        d = _sq_dist(X, centers)
        new_labels = np.argmin(d, axis=1)
        history.append(float(d[np.arange(X.shape[0]), new_labels].sum()))
        converged = np.array_equal(new_labels, labels) or shift < tol
        labels = new_labels
        if converged and not empty.size:
            break
    return centers, labels, history, it


def kmeans(data, K, seed=0, max_iter=300, tol=1e-10, n_init=1) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations; best of ``n_init`` restarts.

    Empty clusters adopt the point currently farthest from its center.  The
    returned labels are the nearest-center assignment for the returned centers.
    """
    X = np.asarray(data, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}")
    if X.shape[0] < 1:
        raise ConfigError("k-means needs at least one data point")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        centers, labels, history, it = _lloyd(X, kmeans_plusplus(X, K, rng), max_iter, tol)
        result = KMeansResult(centers, labels, history[-1], it, history)
        if best is None or result.inertia < best.inertia:
            best = result
    return best


# ---------------------------------------------------------------------------
# sparse coding
# ---------------------------------------------------------------------------

def nnls_active_set(A, b, tol=1e-10, max_iter=None):
    """Lawson-Hanson nonnegative least squares for small dense problems."""
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = A.shape[1]
    max_iter = 10 * max(n, 1) if max_iter is None else max_iter
    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    w = A.T @ (b - A @ x)
    it = 0
    while np.any(~passive) and np.max(np.where(passive, -np.inf, w)) > tol and it < max_iter:
        passive[int(np.argmax(np.where(passive, -np.inf, w)))] = True
        while it < max_iter:
            it += 1
            z = np.zeros(n)
            z[passive] = np.linalg.lstsq(A[:, passive], b, rcond=None)[0]
            if np.all(z[passive] > tol):
                break
            bad = passive & (z <= tol)
            alpha = np.min(x[bad] / (x[bad] - z[bad]))
            x = x + alpha * (z - x)
            passive &= x > tol
            x[~passive] = 0.0
        x = z
        w = A.T @ (b - A @ x)
    return np.maximum(x, 0.0)


@dataclass
class SparseCode:
    x: np.ndarray
    support: list
    residual_norm: float
    variant: str
    residual_history: list = field(default_factory=list)


VARIANTS = ("omp", "nomp", "wnomp")


def sparse_code(A, y_mw, L, variant="nomp", weights=None, tol=1e-12) -> SparseCode:
    """Greedy L-sparse fit of ``y_mw`` by columns of ``A``.

    omp selects by |correlation| and solves unconstrained least squares on the
    support; nomp selects the largest positive correlation and solves NNLS,
    stopping early when no positive correlation remains; wnomp is nomp with the
    correlation scaled per atom (default: inverse column norms).
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown sparse coding variant {variant!r}")
    A = A.A if isinstance(A, BeamPatternMatrix) else np.asarray(A, dtype=np.float64)
    y = np.asarray(y_mw, dtype=np.float64).ravel()
    if y.size != A.shape[0]:
        raise ShapeError(f"observation length {y.size} != beam count {A.shape[0]}")
    N = A.shape[1]
    x = np.zeros(N)
    y_norm = float(np.linalg.norm(y))
    if y_norm == 0.0:
        return SparseCode(x, [], 0.0, variant, [0.0])
    if variant == "wnomp":
        if weights is None:
            norms = np.linalg.norm(A, axis=0)
            weights = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
        weights = np.asarray(weights, dtype=np.float64)
    support = []
    r = y.copy()
    history = [y_norm]
    for _ in range(min(L, N)):
        corr = A.T @ r
        if variant == "omp":
            score = np.abs(corr)
        elif variant == "nomp":
            score = corr.copy()
        else:
            score = corr * weights
        score[support] = -np.inf
        j = int(np.argmax(score))
        if not score[j] > 0:
            break
        support.append(j)
        sub = A[:, support]
        if variant == "omp":
            coef = np.linalg.lstsq(sub, y, rcond=None)[0]
        else:
            coef = nnls_active_set(sub, y)
        x = np.zeros(N)
        x[support] = coef
        r = y - A @ x
        history.append(float(np.linalg.norm(r)))
        if history[-1] <= tol * y_norm:
            break
    return SparseCode(x, support, history[-1], variant, history)


def sparse_code_batch(A, Y_mw, L, variant="nomp", weights=None):
    return np.stack([sparse_code(A, y, L, variant, weights).x for y in np.atleast_2d(Y_mw)])


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------

PIPELINES = ("kmeans_x", "kmeans_y", "kmeans_y_omp", "kmeans_y_nomp", "kmeans_y_wnomp",
             "omp_kmeans_x", "nomp_kmeans_x", "wnomp_kmeans_x",
             "gsg_omp", "gsg_nomp", "gsg_wnomp", "bsg_omp", "bsg_nomp", "bsg_wnomp")


@dataclass
class PipelineResult:
    name: str
    labels: np.ndarray
    centers: np.ndarray | None       # K x N CAPS-space centers, None when the method has none
    diagnostics: dict = field(default_factory=dict)

    @property
    def has_caps(self) -> bool:
        return self.centers is not None


def grid_average_mw(y_mw, labels, K):
    """Per-grid mean RSRP in mW (zero rows for empty grids) and member counts."""
    counts = np.bincount(labels, minlength=K)
    sums = np.zeros((K, y_mw.shape[1]))
    np.add.at(sums, labels, y_mw)
    means = np.divide(sums, counts[:, None], out=np.zeros_like(sums), where=counts[:, None] > 0)
    return means, counts


def _code_grids(A, y_mw, labels, K, L, variant):
    means, counts = grid_average_mw(y_mw, labels, K)
    centers = np.zeros((K, A.shape[1]))
    for k in np.flatnonzero(counts):
        centers[k] = sparse_code(A, means[k], L, variant).x
    return centers


def run_pipeline(name, dataset, A, K, L, seed=0, n_init=KMEANS_RESTARTS) -> PipelineResult:
    if name not in PIPELINES:
        raise ConfigError(f"unknown pipeline {name!r}; choose from {', '.join(PIPELINES)}")
    A = A.A if isinstance(A, BeamPatternMatrix) else np.asarray(A, dtype=np.float64)
    y_dbm = np.asarray(dataset.rsrp_dbm, dtype=np.float64)
    y_mw = dbm_to_mw(y_dbm)
    diag = {"pipeline": name, "seed": seed}

    if name == "kmeans_x":
        if dataset.samples is None:
            raise CapabilityError("kmeans_x needs CAPS samples")
        km = kmeans(dataset.samples, K, seed, n_init=n_init)
        diag["inertia"] = km.inertia
        return PipelineResult(name, km.labels, km.centers, diag)

    if name.endswith("_kmeans_x"):
        variant = name.split("_")[0]
        codes = sparse_code_batch(A, y_mw, L, variant)
        km = kmeans(codes, K, seed, n_init=n_init)
        diag["inertia"] = km.inertia
        return PipelineResult(name, km.labels, km.centers, diag)

    if name.startswith("gsg_"):
        coords = dataset.location_coords()
        if coords is None:
            raise CapabilityError(f"{name} needs location measurements")
        km = kmeans(coords, K, seed, n_init=n_init)
    else:
        km = kmeans(y_dbm, K, seed, n_init=n_init)
    diag["inertia"] = km.inertia
    if name == "kmeans_y":
        diag["metrics_limited"] = True
        return PipelineResult(name, km.labels, None, diag)
    variant = name.rsplit("_", 1)[1]
    return PipelineResult(name, km.labels, _code_grids(A, y_mw, km.labels, K, L, variant), diag)
