"""External clustering metrics, CAPS accuracy metrics and per-grid RSRP errors."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog
from scipy.spatial.distance import cdist

from .errors import ShapeError
from .lscm import DEFAULT_FLOOR_MW, mw_to_dbm


@dataclass
class ContingencyTable:
    counts: np.ndarray       # classes x clusters
    classes: np.ndarray
    clusters: np.ndarray

    @classmethod
    def from_labels(cls, labels_true, labels_pred) -> "ContingencyTable":
        t = np.asarray(labels_true).ravel()
        p = np.asarray(labels_pred).ravel()
        if t.size != p.size:
            raise ShapeError(f"label arrays differ in length: {t.size} vs {p.size}")
        if t.size == 0:
            raise ShapeError("label arrays are empty")
        classes, ti = np.unique(t, return_inverse=True)
        clusters, pi = np.unique(p, return_inverse=True)
        counts = np.zeros((classes.size, clusters.size), dtype=np.int64)
        np.add.at(counts, (ti, pi), 1)
        return cls(counts, classes, clusters)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def class_totals(self):
        return self.counts.sum(axis=1)

    @property
    def cluster_totals(self):
        return self.counts.sum(axis=0)


def _entropy(totals, n):
    p = totals[totals > 0] / n
    return float(-np.sum(p * np.log(p)))


def _conditional_entropy(counts, given_totals, n, axis):
    # H(A | B) with B indexed along ``axis`` of the table
    nz = counts > 0
    denom = np.broadcast_to(given_totals[None, :] if axis == 1 else given_totals[:, None], counts.shape)
    return float(-np.sum(counts[nz] / n * np.log(counts[nz] / denom[nz])))


def _icomb2(values):
    return sum(int(v) * (int(v) - 1) // 2 for v in np.asarray(values).ravel())


def adjusted_rand_index(table: ContingencyTable) -> float:
    # pair counts are integers; scaling numerator and denominator by 2*C(n,2)
    # keeps the whole evaluation in exact integer arithmetic
    pairs = _icomb2([table.total])
    sum_ck = _icomb2(table.counts)
    sum_c = _icomb2(table.class_totals)
    sum_k = _icomb2(table.cluster_totals)
    num = 2 * (sum_ck * pairs - sum_c * sum_k)
    den = (sum_c + sum_k) * pairs - 2 * sum_c * sum_k
    if den == 0:
        # both partitions are all-singletons or single-block: they coincide
        return 1.0
    return num / den


def clustering_metrics(labels_true, labels_pred):
    """Return ``(ari, nmi, homogeneity, completeness, v_measure)`` with natural logs."""
    table = ContingencyTable.from_labels(labels_true, labels_pred)
    n = table.total
    nc, nk = table.class_totals, table.cluster_totals
    h_c, h_k = _entropy(nc, n), _entropy(nk, n)
    nz = table.counts > 0
    outer = np.outer(nc, nk)
    mi = float(np.sum(table.counts[nz] / n * np.log(n * table.counts[nz] / outer[nz])))
    mi = max(mi, 0.0)
    if h_c == 0.0 and h_k == 0.0:
        nmi = 1.0
    elif h_c == 0.0 or h_k == 0.0:
        nmi = 0.0
    else:
        nmi = mi / np.sqrt(h_c * h_k)
    h_c_given_k = _conditional_entropy(table.counts, nk, n, axis=1)
    h_k_given_c = _conditional_entropy(table.counts, nc, n, axis=0)
    homogeneity = 1.0 if h_c == 0.0 else 1.0 - h_c_given_k / h_c
    completeness = 1.0 if h_k == 0.0 else 1.0 - h_k_given_c / h_k
    if homogeneity + completeness == 0.0:
        v = 0.0
    else:
        v = 2.0 * homogeneity * completeness / (homogeneity + completeness)
    return (adjusted_rand_index(table), float(min(nmi, 1.0)), float(homogeneity), float(completeness),
            float(v))


# ---------------------------------------------------------------------------
# CAPS estimation accuracy
# ---------------------------------------------------------------------------

def sample_mean_nmse(true_centers, true_labels, pred_centers, pred_labels, return_diagnostics=False):
    """Mean over samples of ||x_true - x_pred|| / ||x_true|| using each sample's assigned centers.

    Samples whose true center has zero norm are skipped and counted.
    """
    tc = np.asarray(true_centers, dtype=np.float64)
    pc = np.asarray(pred_centers, dtype=np.float64)
    tl = np.asarray(true_labels).astype(np.int64)
    pl = np.asarray(pred_labels).astype(np.int64)
    if tl.size != pl.size:
        raise ShapeError("true and predicted label arrays differ in length")
    truth = tc[tl]
    num = np.linalg.norm(truth - pc[pl], axis=1)
    den = np.linalg.norm(truth, axis=1)
    ok = den > 0
    value = float(np.mean(num[ok] / den[ok])) if np.any(ok) else float("nan")
    if return_diagnostics:
        return value, {"skipped_zero_norm": int(np.count_nonzero(~ok))}
    return value


def matched_sample_mean_nmse(true_centers, true_labels, pred_centers):
    """Variant that pairs true and predicted centers by optimal assignment first."""
    tc = np.asarray(true_centers, dtype=np.float64)
    pc = np.asarray(pred_centers, dtype=np.float64)
    rows, cols = linear_sum_assignment(cdist(tc, pc))
    match = np.full(tc.shape[0], -1)
    match[rows] = cols
    tl = np.asarray(true_labels).astype(np.int64)
    keep = match[tl] >= 0
    return sample_mean_nmse(tc, tl[keep], pc, match[tl[keep]])


def center_wasserstein(true_centers, pred_centers) -> float:
    """1-Wasserstein distance between uniform measures on two point sets (Euclidean cost)."""
    a = np.atleast_2d(np.asarray(true_centers, dtype=np.float64))
    b = np.atleast_2d(np.asarray(pred_centers, dtype=np.float64))
    cost = cdist(a, b)
    n, m = cost.shape
    if n == m:
        rows, cols = linear_sum_assignment(cost)
        return float(cost[rows, cols].mean())
    # exact transportation problem for unequal cardinalities
    A_eq = np.zeros((n + m, n * m))
    for i in range(n):
        A_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        A_eq[n + j, j::m] = 1.0
    b_eq = np.concatenate([np.full(n, 1.0 / n), np.full(m, 1.0 / m)])
    res = linprog(cost.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    return float(res.fun)


# ---------------------------------------------------------------------------
# RSRP prediction accuracy
# ---------------------------------------------------------------------------

def grid_real_rsrp(y_mw, labels, K, floor_mw=DEFAULT_FLOOR_MW):
    """Per-grid surrogate truth: mean in mW, converted to dBm; empty grids pinned to the floor.

    Returns ``(dbm K x M, active mask)``.
    """
    y_mw = np.atleast_2d(np.asarray(y_mw, dtype=np.float64))
    labels = np.asarray(labels).astype(np.int64)
    counts = np.bincount(labels, minlength=K)
    sums = np.zeros((K, y_mw.shape[1]))
    np.add.at(sums, labels, y_mw)
    means = np.divide(sums, counts[:, None], out=np.zeros_like(sums), where=counts[:, None] > 0)
    active = np.any(means > 0, axis=1)
    return mw_to_dbm(means, floor_mw), active


def grid_mae(real_dbm, pred_dbm, active_mask):
    """Return ``(active_mae, overall_mae)``; active_mae is None without active grids."""
    real = np.atleast_2d(np.asarray(real_dbm, dtype=np.float64))
    pred = np.atleast_2d(np.asarray(pred_dbm, dtype=np.float64))
    if real.shape != pred.shape:
        raise ShapeError(f"real {real.shape} and predicted {pred.shape} grids differ")
    per_grid = np.mean(np.abs(real - pred), axis=1)
    mask = np.asarray(active_mask, dtype=bool)
    active = float(per_grid[mask].mean()) if np.any(mask) else None
    return active, float(per_grid.mean())


@dataclass
class MetricsReport:
    ari: float
    nmi: float
    homogeneity: float
    completeness: float
    v_measure: float
    active_ratio: float
    sample_mean_nmse: float | None = None
    center_wasserstein: float | None = None
    active_mae: float | None = None
    overall_mae: float | None = None
    wasserstein_order: int = 1
    entropy_base: str = "e"
    floor_dbm: float = float(mw_to_dbm(DEFAULT_FLOOR_MW))

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def evaluate(true_labels, pred_labels, K, true_centers=None, pred_centers=None) -> MetricsReport:
    ari, nmi, hom, comp, v = clustering_metrics(true_labels, pred_labels)
    pred_labels = np.asarray(pred_labels).astype(np.int64)
    ratio = float(np.count_nonzero(np.bincount(pred_labels, minlength=K)) / K)
    report = MetricsReport(ari, nmi, hom, comp, v, ratio)
    if true_centers is not None and pred_centers is not None:
        report.sample_mean_nmse = sample_mean_nmse(true_centers, true_labels, pred_centers, pred_labels)
        report.center_wasserstein = center_wasserstein(true_centers, pred_centers)
    return report
