"""Quantizer, loss terms and grid summaries of the CSG autoencoder.

Array layout: one item per row.  Embeddings are I x N, codebooks and grid
centers are K x N.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import GradCheckReport, block_relative_error, reconstruction_loss
from .errors import ConfigError, FormatError, ShapeError
from .lscm import DEFAULT_FLOOR_MW, BeamPatternMatrix, mw_to_dbm


def top_l_indices(xi, L):
    """Row-wise indices of the L largest values; ties go to the lower index."""
    xi = np.atleast_2d(xi)
    L = min(L, xi.shape[1])
    return np.argsort(-xi, axis=1, kind="stable")[:, :L]


def threshold_rectify(xi, L):
    """relu(delta_L(xi)) applied row-wise; returns ``(effective, mask)``.

    ``mask`` marks the coordinates that pass both the top-L selection and the
    rectifier, i.e. where d(effective)/d(xi) = 1.
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    keep = np.zeros(xi.shape, dtype=bool)
    np.put_along_axis(keep, top_l_indices(xi, L), True, axis=1)
    mask = keep & (xi > 0)
    return np.where(mask, xi, 0.0), mask


@dataclass
class Codebook:
    """K raw codewords (rows of ``xi``) with sparsity level ``L``."""

    xi: np.ndarray
    L: int

    def __post_init__(self):
        self.xi = np.atleast_2d(np.asarray(self.xi, dtype=np.float64))
        if self.xi.shape[0] < 1:
            raise ConfigError("codebook needs at least one codeword")
        if self.L < 1:
            raise ConfigError(f"sparsity L must be >= 1, got {self.L}")

    @property
    def K(self) -> int:
        return self.xi.shape[0]

    @property
    def N(self) -> int:
        return self.xi.shape[1]

    def effective(self):
        return threshold_rectify(self.xi, self.L)[0]

    def copy(self) -> "Codebook":
        return Codebook(self.xi.copy(), self.L)


def effective_codeword(cb: Codebook, k):
    if not 0 <= k < cb.K:
        raise IndexError(f"codeword index {k} outside [0, {cb.K})")
    return threshold_rectify(cb.xi[k], cb.L)[0][0]


@dataclass
class GridAssignment:
    labels: np.ndarray
    centers: np.ndarray          # K x N effective codewords used for the assignment
    distances: np.ndarray        # Euclidean distance of each sample to its assigned center

    @property
    def K(self) -> int:
        return self.centers.shape[0]

    @property
    def counts(self):
        return np.bincount(self.labels, minlength=self.K)

    def members(self, k):
        return np.flatnonzero(self.labels == k)

    def support(self, k):
        return np.flatnonzero(self.centers[k] != 0)

    @property
    def support_mask(self):
        return self.centers != 0


def nearest_center(embeddings, centers, L=None):
    """Index of the closest row of ``centers`` for every embedding (ties -> lowest index).

    With ``L`` given, each center is known to be nonzero only within its L
    largest entries, so the squared distance is evaluated as the exact shift
    ``sum_{n in top-L}((x_n - c_n)**2 - x_n**2)`` of the full one; the common
    ``|x|**2`` term cannot change the argmin.
    """
    X = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    C = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if X.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    if X.shape[1] != C.shape[1]:
        raise ShapeError(f"embedding dim {X.shape[1]} != center dim {C.shape[1]}")
    if L is not None and L < C.shape[1]:
        idx = top_l_indices(C, L)                                  # K x L
        xs = X[:, idx]                                             # I x K x L
        cs = np.take_along_axis(C, idx, axis=1)[None]              # 1 x K x L
        score = ((xs - cs) ** 2 - xs ** 2).sum(axis=2)
        return np.argmin(score, axis=1)
    out = np.empty(X.shape[0], dtype=np.int64)
    step = max(1, 4_000_000 // max(1, C.size))
    for lo in range(0, X.shape[0], step):
        d = ((X[lo:lo + step, None, :] - C[None]) ** 2).sum(axis=2)
        out[lo:lo + step] = np.argmin(d, axis=1)
    return out


def quantize(cb: Codebook, embeddings) -> GridAssignment:
    centers = cb.effective()
    X = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if X.shape[0] == 0:
        return GridAssignment(np.zeros(0, dtype=np.int64), centers, np.zeros(0))
    labels = nearest_center(X, centers, cb.L)
    dist = np.sqrt(((X - centers[labels]) ** 2).sum(axis=1))
    return GridAssignment(labels, centers, dist)


def _member_sums(labels, X, K):
    onehot = np.zeros((K, labels.size))
    onehot[labels, np.arange(labels.size)] = 1.0
    return onehot @ X


def projected_means(assignment: GridAssignment, embeddings):
    """K x N matrix of projected average centers; empty grids give zero rows."""
    X = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    counts = assignment.counts
    sums = _member_sums(assignment.labels, X, assignment.K)
    means = np.divide(sums, counts[:, None], out=np.zeros_like(sums), where=counts[:, None] > 0)
    return np.where(assignment.support_mask, means, 0.0)


def projected_mean(assignment: GridAssignment, embeddings, k):
    if not 0 <= k < assignment.K:
        raise IndexError(f"grid index {k} outside [0, {assignment.K})")
    members = assignment.members(k)
    if members.size == 0:
        return np.zeros(assignment.centers.shape[1])
    X = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    mean = X[members].mean(axis=0)
    return np.where(assignment.support_mask[k], mean, 0.0)


def active_ratio(assignment: GridAssignment) -> float:
    if assignment.labels.size == 0:
        return 0.0
    return float(np.count_nonzero(assignment.counts) / assignment.K)


@dataclass
class QuantizationTerms:
    loss: float
    grad_xi: np.ndarray          # K x N, dL2/d(raw codebook)
    grad_embeddings: np.ndarray  # I x N, dL2/dx through the projected means
    means: np.ndarray


def quantization_loss(embeddings, assignment: GridAssignment, cb: Codebook, include_empty=True,
                      need_embedding_grad=True) -> QuantizationTerms:
    """Mean over grids of MSE(center_k, projected mean_k), with gradients.

    The top-L selection and the assignment are treated as locally constant.
    Empty grids contribute ``MSE(center_k, 0)`` unless ``include_empty`` is off.
    """
    X = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    K, N = cb.K, cb.N
    centers, mask = threshold_rectify(cb.xi, cb.L)
    means = projected_means(assignment, X)
    counts = assignment.counts
    diff = centers - means
    if not include_empty:
        diff = np.where(counts[:, None] > 0, diff, 0.0)
    loss = float(np.sum(diff ** 2) / (K * N))
    g_center = (2.0 / (K * N)) * diff
    grad_xi = np.where(mask, g_center, 0.0)
    grad_x = None
    if need_embedding_grad and X.shape[0]:
        per_grid = np.divide(-g_center, counts[:, None], out=np.zeros_like(g_center), where=counts[:, None] > 0)
        per_grid = np.where(assignment.support_mask, per_grid, 0.0)
        grad_x = per_grid[assignment.labels]
    return QuantizationTerms(loss, grad_xi, grad_x, means)


@dataclass
class Losses:
    l1: float
    l2: float
    combined: float


def compute_losses(embeddings, assignment, cb, A, y_dbm, w1=1.0, w2=1.0, floor_mw=DEFAULT_FLOOR_MW,
                   include_empty=True) -> Losses:
    if w1 < 0 or w2 < 0:
        raise ConfigError(f"loss weights must be nonnegative, got w1={w1}, w2={w2}")
    A = getattr(A, "A", A)
    l1, _ = reconstruction_loss(embeddings, A, y_dbm, floor_mw)
    l2 = quantization_loss(embeddings, assignment, cb, include_empty, need_embedding_grad=False).loss
    return Losses(l1, l2, w1 * l1 + w2 * l2)


def _l2_signature(cb, X):
    centers, mask = threshold_rectify(cb.xi, cb.L)
    keep = np.zeros(cb.xi.shape, dtype=bool)
    np.put_along_axis(keep, top_l_indices(cb.xi, cb.L), True, axis=1)
    return np.concatenate([nearest_center(X, centers, cb.L).astype(float), keep.ravel(), mask.ravel()])


def codebook_gradient_check(cb: Codebook, embeddings, include_empty=True, rel_step=1e-6) -> GradCheckReport:
    """Central differences of L2 w.r.t. the raw codebook, embeddings held fixed.

    Coordinates whose perturbation moves the assignment, the top-L set or the
    rectifier mask are skipped.
    """
    X = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))

    def loss_at(book):
        return quantization_loss(X, quantize(book, X), book, include_empty, need_embedding_grad=False).loss

    grad = quantization_loss(X, quantize(cb, X), cb, include_empty).grad_xi
    work = cb.copy()
    analytic, numeric, skipped = [], [], 0
    for idx in np.ndindex(work.xi.shape):
        orig = work.xi[idx]
        h = rel_step * max(1.0, abs(orig))
        work.xi[idx] = orig + h
        f_plus, s_plus = loss_at(work), _l2_signature(work, X)
        work.xi[idx] = orig - h
        f_minus, s_minus = loss_at(work), _l2_signature(work, X)
        work.xi[idx] = orig
        if not np.array_equal(s_plus, s_minus):
            skipped += 1
            continue
        analytic.append(grad[idx])
        numeric.append((f_plus - f_minus) / (2 * h))
    return GradCheckReport({"xi": block_relative_error(analytic, numeric)}, {"xi": skipped}, {"xi": len(analytic)})


# ---------------------------------------------------------------------------
# grid summaries and cross-beam prediction
# ---------------------------------------------------------------------------

@dataclass
class GridCapsSummary:
    """Per-grid average CAPS (the reusable grid asset) plus grid centers."""

    mean_caps: np.ndarray        # K x N, mean of member CAPS estimates
    counts: np.ndarray
    centers: np.ndarray | None = None
    L: int | None = None
    train_rsrp_dbm: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.mean_caps.shape[0]

    @property
    def N(self) -> int:
        return self.mean_caps.shape[1]

    @property
    def active(self):
        return self.counts > 0

    def to_json(self) -> str:
        grids = []
        for k in range(self.K):
            entry = {"index": k,
                     "support": [] if self.centers is None else np.flatnonzero(self.centers[k]).tolist(),
                     "mean_caps": _pairs(self.mean_caps[k]),
                     "member_count": int(self.counts[k]),
                     "active": bool(self.counts[k] > 0)}
            if self.centers is not None:
                entry["center"] = _pairs(self.centers[k])
            if self.train_rsrp_dbm is not None:
                entry["train_rsrp_dbm"] = [float(v) for v in self.train_rsrp_dbm[k]]
            grids.append(entry)
        doc = {"K": self.K, "N": self.N, "L": self.L, "meta": self.meta, "grids": grids}
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text) -> "GridCapsSummary":
        try:
            doc = json.loads(text)
            K, N = int(doc["K"]), int(doc["N"])
            mean_caps = np.zeros((K, N))
            counts = np.zeros(K, dtype=np.int64)
            centers = None
            train = None
            for g in doc["grids"]:
                k = int(g["index"])
                _fill(mean_caps[k], g["mean_caps"])
                counts[k] = int(g["member_count"])
                if "center" in g:
                    if centers is None:
                        centers = np.zeros((K, N))
                    _fill(centers[k], g["center"])
                if "train_rsrp_dbm" in g:
                    if train is None:
                        train = np.full((K, len(g["train_rsrp_dbm"])), np.nan)
                    train[k] = g["train_rsrp_dbm"]
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise FormatError(f"malformed grid summary: {exc}") from exc
        return cls(mean_caps, counts, centers, doc.get("L"), train, doc.get("meta") or {})

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "GridCapsSummary":
        return cls.from_json(Path(path).read_text())


def _pairs(row):
    nz = np.flatnonzero(row)
    return [[int(i), float(row[i])] for i in nz]


def _fill(row, pairs):
    for i, v in pairs:
        row[int(i)] = float(v)


def summarize(assignment: GridAssignment, embeddings, L=None, beam=None, floor_mw=DEFAULT_FLOOR_MW,
              meta=None) -> GridCapsSummary:
    X = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    counts = assignment.counts
    sums = _member_sums(assignment.labels, X, assignment.K)
    mean_caps = np.divide(sums, counts[:, None], out=np.zeros_like(sums), where=counts[:, None] > 0)
    summary = GridCapsSummary(mean_caps, counts, assignment.centers.copy(), L, None, dict(meta or {}))
    if beam is not None:
        summary.train_rsrp_dbm = predict_under_beam(summary, beam, floor_mw)[0]
    return summary


def predict_under_beam(summary: GridCapsSummary, A_new, floor_mw=DEFAULT_FLOOR_MW):
    """Per-grid predicted dBm under a new beam matrix; returns ``(dbm K x M, active mask)``.

    Grids with no members or an all-zero average CAPS are flagged inactive;
    their rows sit at the floor.
    """
    A = A_new.A if isinstance(A_new, BeamPatternMatrix) else np.asarray(A_new, dtype=np.float64)
    if A.shape[1] != summary.N:
        raise ShapeError(f"beam matrix has {A.shape[1]} angles, summary has N={summary.N}")
    y_mw = summary.mean_caps @ A.T
    active = (summary.counts > 0) & np.any(summary.mean_caps > 0, axis=1)
    return mw_to_dbm(y_mw, floor_mw), active
