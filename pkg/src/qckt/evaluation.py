"""Metrics, significance testing, and per-step interpretability exports.

All metric functions are pure.  The paired t-test evaluates its own
t-distribution tail by Gauss-Legendre integration so the package does not
depend on scipy at runtime; the test suite cross-checks against scipy.
"""

import math

import numpy as np

from . import model as qmodel
from .autodiff import sigmoid
from .errors import MetricError, ShapeError


class PredictionSet:
    """Aligned predicted probabilities and 0/1 labels."""

    def __init__(self, preds, labels):
        self.preds = np.asarray(preds, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.float64)
        if self.preds.shape != self.labels.shape or self.preds.ndim != 1:
            raise ShapeError(
                f"preds {self.preds.shape} and labels {self.labels.shape} must be aligned vectors"
            )
        if self.preds.size and (self.preds.min() < 0.0 or self.preds.max() > 1.0):
            raise MetricError("predictions must lie in [0, 1]")
        if not np.all((self.labels == 0.0) | (self.labels == 1.0)):
            raise MetricError("labels must be 0 or 1")

    def __len__(self):
        return self.preds.size


def _midranks(x):
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average of ranks i+1..j+1
        i = j + 1
    return ranks


def auc(ps):
    """Probability that a random positive outranks a random negative
    (rank-statistic form, ties counted half)."""
    pos = ps.labels == 1.0
    n_pos = int(pos.sum())
    n_neg = len(ps) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError(f"AUC undefined: {n_pos} positives and {n_neg} negatives")
    ranks = _midranks(ps.preds)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_bruteforce(ps):
    """O(P*N) pairwise definition; retained as the oracle for :func:`auc`."""
    pos = ps.preds[ps.labels == 1.0]
    neg = ps.preds[ps.labels == 0.0]
    if pos.size == 0 or neg.size == 0:
        raise MetricError("AUC undefined for single-class labels")
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (pos.size * neg.size))


def accuracy(ps, threshold=0.5):
    """Fraction predicted on the correct side; a prediction exactly at the
    threshold counts as positive."""
    if len(ps) == 0:
        raise MetricError("accuracy of an empty prediction set")
    calls = ps.preds >= threshold
    return float((calls == (ps.labels == 1.0)).mean())


def _t_tail(x, df):
    """P(T >= x) for x >= 0 under Student's t with ``df`` degrees of freedom.

    Maps [x, inf) onto [0, 1) via t = x + u/(1-u) and integrates the pdf with
    composite Gauss-Legendre panels.
    """
    log_norm = (
        math.lgamma((df + 1.0) / 2.0)
        - math.lgamma(df / 2.0)
        - 0.5 * math.log(df * math.pi)
    )

    def pdf(t):
        return np.exp(log_norm - (df + 1.0) / 2.0 * np.log1p(t * t / df))

    nodes, weights = np.polynomial.legendre.leggauss(48)
    total = 0.0
    panels = np.linspace(0.0, 1.0, 9)
    for lo, hi in zip(panels[:-1], panels[1:]):
        mid, half = 0.5 * (hi + lo), 0.5 * (hi - lo)
        u = mid + half * nodes
        t = x + u / (1.0 - u)
        total += half * np.sum(weights * pdf(t) / (1.0 - u) ** 2)
    return float(total)


def paired_t_test(a, b):
    """Two-sided p-value of the paired t statistic.

    Degenerate conventions: all-zero differences give p = 1 (indistinguishable),
    zero-variance nonzero differences give p = 0 (deterministic gap).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"paired samples must align, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise MetricError(f"paired t-test needs n >= 2, got {n}")
    d = a - b
    if np.all(d == 0.0):
        return 1.0
    sd = d.std(ddof=1)
    if sd == 0.0:
        return 0.0
    t = d.mean() / (sd / math.sqrt(n))
    return float(min(1.0, 2.0 * _t_tail(abs(t), n - 1)))


def pairwise_t_matrix(metric_rows):
    """Symmetric p-value matrix over named runs.

    ``metric_rows`` is an ordered mapping name -> per-fold metric list; the
    diagonal is 1 by convention.
    """
    names = list(metric_rows)
    k = len(names)
    mat = np.ones((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            p = paired_t_test(metric_rows[names[i]], metric_rows[names[j]])
            mat[i, j] = mat[j, i] = p
    return names, mat


def export_module_outputs(params, seq, config=None):
    """Per-step module outputs: one row per prediction with the overall
    probability and the per-module sigmoid scores."""
    outs = qmodel.forward_sequence(seq, params, config)
    interactions = getattr(seq, "interactions", seq)
    rows = []
    for t, out in enumerate(outs, start=1):
        target = interactions[t]
        rows.append(
            {
                "step": t,
                "question": int(target.question),
                "response": int(target.response),
                "r_hat": out.r_hat,
                "sigma_alpha": float(sigmoid(out.alpha)),
                "sigma_beta": float(sigmoid(out.beta)),
                "sigma_zeta": float(sigmoid(out.zeta)),
            }
        )
    return rows


def export_knowledge_states(params, seq, kc_subset, config=None):
    """(L-1) x |kc_subset| matrix of per-KC mastery values in (0,1)."""
    kc_subset = list(kc_subset)
    if not kc_subset:
        raise MetricError("kc_subset must be non-empty")
    m = params["K"].shape[0]
    for k in kc_subset:
        if not (0 <= k < m):
            raise IndexError(f"KC id {k} out of range (m={m})")
    outs = qmodel.forward_sequence(seq, params, config)
    return np.array([[out.kc_mastery[k] for k in kc_subset] for out in outs])
