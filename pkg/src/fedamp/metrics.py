"""Objective and gradient diagnostics, accuracy metrics, convergence reports,
significance testing and metric/heatmap serialization."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .attention import AttentionFunction, CollabMatrix
from .core import frobenius_norm, pairwise_sq_distances
from .errors import DimensionError, DomainError, InsufficientDataError
from .models import ClientDataset, LossModel
from .optim import ConstantTheory

EXACT_WILCOXON_MAX_N = 12
METRICS_COLUMNS = ("round", "alpha", "G", "grad_norm", "mean_test_acc", "dropped_count")


def _unpack(client):
    model, data = client
    if isinstance(data, ClientDataset):
        return model, data.train, data.test
    return model, data, None


def _check_dims(W, clients):
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise DimensionError(f"W must be a d x m matrix, got shape {W.shape}")
    if W.shape[1] != len(clients):
        raise DimensionError(f"W has {W.shape[1]} columns but there are {len(clients)} clients")
    for i, (model, _) in enumerate(clients):
        if model.param_dim != W.shape[0]:
            raise DimensionError(f"client {i} expects d={model.param_dim}, W has d={W.shape[0]}")
    return W


def objective_G(W, clients, A: AttentionFunction, lam: float) -> float:
    """``sum_i F_i(w_i) + lam * sum_{i<j} A(||w_i - w_j||^2)``."""
    W = _check_dims(W, clients)
    total = 0.0
    for i, client in enumerate(clients):
        model, train, _ = _unpack(client)
        total += model.loss(W[:, i], train)
    D = pairwise_sq_distances(W)
    m = W.shape[1]
    penalty = 0.0
    for i in range(m):
        for j in range(i + 1, m):
            penalty += A.value(D[i, j])
    return total + lam * penalty


def penalty_grad(W, A: AttentionFunction, factor: float = 2.0) -> np.ndarray:
    """Gradient of ``sum_{i<j} A(||w_i - w_j||^2)``.

    Column ``i`` is ``factor * sum_{j != i} A'(||w_i - w_j||^2) (w_i - w_j)``.
    ``factor=2`` is the true derivative; ``factor=1`` is the coefficient the
    message-passing weights use.
    """
    W = np.asarray(W, dtype=np.float64)
    m = W.shape[1]
    D = pairwise_sq_distances(W)
    G = np.zeros_like(W)
    for i in range(m):
        for j in range(m):
            if j != i:
                G[:, i] += factor * A.deriv(D[i, j]) * (W[:, i] - W[:, j])
    return G


def loss_grad_matrix(W, clients) -> np.ndarray:
    W = _check_dims(W, clients)
    G = np.empty_like(W)
    for i, client in enumerate(clients):
        model, train, _ = _unpack(client)
        G[:, i] = model.grad(W[:, i], train)
    return G


def grad_G(W, clients, A: AttentionFunction, lam: float) -> np.ndarray:
    return loss_grad_matrix(W, clients) + lam * penalty_grad(W, A)


def grad_norm_G(W, clients, A: AttentionFunction, lam: float) -> float:
    return frobenius_norm(grad_G(W, clients, A, lam))


def assumption_norm(W, clients, A: AttentionFunction, lam: float) -> float:
    """Smallest ``B`` consistent with the boundedness assumption at ``W``:
    ``max(||grad F(W)||, lam * ||grad A(W)||)``."""
    return max(
        frobenius_norm(loss_grad_matrix(W, clients)),
        lam * frobenius_norm(penalty_grad(W, A)),
    )


def quadratic_linear_optimum(centers, lam: float) -> np.ndarray:
    """Minimizer of ``sum_i 0.5||w_i - c_i||^2 + lam sum_{i<j} ||w_i - w_j||^2``.

    Stationarity gives ``(I + 2 lam L) W^T = C^T`` with ``L = m I - 1 1^T``
    the Laplacian of the complete graph on the clients.
    """
    C = np.asarray(centers, dtype=np.float64)
    m = C.shape[1]
    L = m * np.eye(m) - np.ones((m, m))
    return np.linalg.solve(np.eye(m) + 2.0 * lam * L, C.T).T


def mean_test_accuracy(W, clients) -> float:
    W = _check_dims(W, clients)
    accs = []
    for i, client in enumerate(clients):
        model, _, test = _unpack(client)
        if test is None:
            raise DimensionError(f"client {i} has no test split")
        accs.append(model.accuracy(W[:, i], test))
    return float(np.mean(accs))


def bmta(history) -> float:
    """Best mean test accuracy: maximum over rounds of the mean per-client accuracy.

    ``history`` holds round records (with ``mean_test_acc``) or plain numbers.
    """
    values = [getattr(h, "mean_test_acc", h) for h in history]
    values = [v for v in values if v is not None]
    if not values:
        raise DomainError("BMTA of an empty history is undefined")
    return float(max(values))


def _signed_ranks(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"paired samples must have equal lengths, got {a.shape} and {b.shape}")
    d = a - b
    d = d[d != 0]
    if d.size < 6:
        raise InsufficientDataError(f"need at least 6 nonzero differences, got {d.size}")
    return d, rankdata(np.abs(d))


def wilcoxon_exact_counts(doubled_ranks) -> list[int]:
    """Number of sign assignments giving each value of the doubled positive-rank sum."""
    total = int(sum(doubled_ranks))
    counts = [0] * (total + 1)
    counts[0] = 1
    hi = 0
    for r in doubled_ranks:
        r = int(r)
        for s in range(hi, -1, -1):
            if counts[s]:
                counts[s + r] += counts[s]
        hi += r
    return counts


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-sided p-value of the Wilcoxon signed-rank test.

    Zero differences are dropped.  For at most 12 remaining pairs the null
    distribution of the positive-rank sum is counted exactly (midranks are
    doubled to stay integral); otherwise a normal approximation with tie
    correction and no continuity correction is used.
    """
    d, ranks = _signed_ranks(a, b)
    n = d.size
    if n <= EXACT_WILCOXON_MAX_N:
        doubled = np.rint(2 * ranks).astype(int)
        t = int(doubled[d > 0].sum())
        counts = wilcoxon_exact_counts(doubled)
        lower = sum(counts[: t + 1])
        upper = sum(counts[t:])
        return min(1.0, 2 * min(lower, upper) / 2**n)
    t = float(ranks[d > 0].sum())
    mean = n * (n + 1) / 4.0
    _, tie_sizes = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_sizes**3 - tie_sizes)) / 48.0
    z = (t - mean) / math.sqrt(var)
    return min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))


@dataclass(frozen=True)
class OptimumInfo:
    G_star: float
    W_star: np.ndarray
    W0: np.ndarray


@dataclass(frozen=True, eq=False)
class ConvergenceReport:
    objective: np.ndarray
    running_min_objective: np.ndarray
    grad_norm_sq: np.ndarray
    running_min_grad_norm_sq: np.ndarray
    B: float
    bound: np.ndarray | None = None
    gap: np.ndarray | None = None

    @property
    def final_gap(self) -> float | None:
        return None if self.gap is None else float(self.gap[-1])

    @property
    def final_bound(self) -> float | None:
        return None if self.bound is None else float(self.bound[-1])


def convergence_report(history, schedule=None, optimum: OptimumInfo | None = None, initial=None) -> ConvergenceReport:
    """Summarize a trajectory against the convex-rate bound.

    ``history`` holds round records with ``objective``, ``grad_norm`` and
    ``bound_norm``; ``initial`` is the optional record of the starting point
    and is prepended.  When ``optimum`` is given the running gap
    ``min_k G(W^k) - G*`` is reported together with the bound
    ``(||W0 - W*||^2 + 5 B^2) / sqrt(k)`` evaluated at every horizon ``k``
    (the rate is stated for constant steps, so the curve is only produced
    for :class:`ConstantTheory` schedules).
    """
    recs = ([initial] if initial is not None else []) + list(history)
    G = np.array([r.objective for r in recs], dtype=np.float64)
    g2 = np.array([r.grad_norm for r in recs], dtype=np.float64) ** 2
    Bs = [r.bound_norm for r in recs if getattr(r, "bound_norm", None) is not None]
    B = float(max(Bs)) if Bs else 0.0
    run_G = np.minimum.accumulate(G) if G.size else G
    run_g2 = np.minimum.accumulate(g2) if g2.size else g2
    bound = gap = None
    if optimum is not None and G.size:
        gap = run_G - optimum.G_star
        if isinstance(schedule, ConstantTheory) and len(history):
            r0 = frobenius_norm(np.asarray(optimum.W0) - np.asarray(optimum.W_star)) ** 2
            offset = 0 if initial is None else 1
            ks = np.maximum(np.arange(G.size) + 1 - offset, 1)
            bound = (r0 + 5.0 * B * B) / np.sqrt(ks)
    return ConvergenceReport(G, run_G, g2, run_g2, B, bound, gap)


def collab_to_dict(Xi: CollabMatrix, groups=None) -> dict:
    W = Xi.weights if isinstance(Xi, CollabMatrix) else np.asarray(Xi, dtype=np.float64)
    out = {
        "m": int(W.shape[0]),
        "mode": getattr(Xi, "mode", None),
        "weights": [[float(x) for x in row] for row in W],
    }
    if groups is not None:
        out["groups"] = [int(g) for g in groups]
    return out


def export_collab_matrix(Xi: CollabMatrix, sink=None, groups=None) -> str:
    """Serialize ``Xi`` as a row-major JSON heatmap; ``sink`` is a path or text stream."""
    text = json.dumps(collab_to_dict(Xi, groups), indent=1) + "\n"
    if sink is None:
        return text
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sink.write(text)
    return text


def load_collab_matrix(source) -> tuple[CollabMatrix, list[int] | None]:
    if isinstance(source, (str, os.PathLike)) and os.path.exists(source):
        with open(source, encoding="utf-8") as fh:
            doc = json.load(fh)
    elif isinstance(source, str):
        doc = json.loads(source)
    else:
        doc = json.load(source)
    Xi = CollabMatrix(np.array(doc["weights"], dtype=np.float64), doc.get("mode") or "clamped")
    return Xi, doc.get("groups")


def block_means(Xi, groups) -> tuple[float, float]:
    """Mean off-diagonal weight within ground-truth groups and across groups."""
    X = Xi.weights if isinstance(Xi, CollabMatrix) else np.asarray(Xi, dtype=np.float64)
    g = np.asarray(groups)
    same = g[:, None] == g[None, :]
    off = ~np.eye(len(g), dtype=bool)
    intra = X[same & off]
    inter = X[~same]
    return float(intra.mean()), float(inter.mean())


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_metrics_csv(history, sink=None) -> str:
    """One row per round: round, alpha, G, grad_norm, mean_test_acc, dropped_count."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for r in history:
        w.writerow([
            r.round,
            _fmt(r.alpha),
            _fmt(r.objective),
            _fmt(r.grad_norm),
            _fmt(r.mean_test_acc),
            len(r.dropped),
        ])
    text = buf.getvalue()
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    elif sink is not None:
        sink.write(text)
    return text
