import io
import itertools
import json

import numpy as np
import pytest
from scipy import stats

from fedamp.attention import CollabMatrix, Linear, NegExp, SCAD, fedamp_weights
from fedamp.errors import DimensionError, DomainError, InsufficientDataError
from fedamp.federation import FedAMP, ObjectiveSpec, RoundRecord, run_experiment
from fedamp.metrics import (
    METRICS_COLUMNS,
    OptimumInfo,
    block_means,
    bmta,
    convergence_report,
    export_collab_matrix,
    grad_G,
    grad_norm_G,
    load_collab_matrix,
    mean_test_accuracy,
    objective_G,
    penalty_grad,
    quadratic_linear_optimum,
    wilcoxon_signed_rank,
    write_metrics_csv,
)
from fedamp.models import MLP, ClientDataset, LabeledDataset, LogisticRegression, Quadratic
from fedamp.optim import ConstantTheory, SolverConfig


def quad_clients(C):
    return [(Quadratic(C[:, i]), None) for i in range(C.shape[1])]


def record(k, acc, G=1.0):
    return RoundRecord(k, G, 0.5, 0.5, 0.1, (0.0,), (acc,), acc)


def test_objective_examples():
    c = np.array([1.0, -1.0])
    q = Quadratic(c)
    assert objective_G(np.array([[3.0], [0.0]]), [(q, None)], NegExp(1), 10.0) == q.loss([3.0, 0.0])
    W = np.tile(c[:, None] + 1.0, (1, 3))
    clients = [(q, None)] * 3
    assert objective_G(W, clients, NegExp(1), 5.0) == pytest.approx(3 * q.loss(W[:, 0]))
    clients = quad_clients(np.array([[0.0, 2.0]]))
    assert objective_G(np.array([[0.0, 2.0]]), clients, Linear(), 0.5) == 2.0
    with pytest.raises(DimensionError):
        objective_G(np.zeros((1, 3)), clients, Linear(), 0.5)


def test_grad_vanishes_at_linear_system_optimum():
    r = np.random.default_rng(4)
    C = r.standard_normal((3, 5))
    for lam in (0.1, 0.25, 2.0):
        Wstar = quadratic_linear_optimum(C, lam)
        assert grad_norm_G(Wstar, quad_clients(C), Linear(), lam) < 1e-8


def test_grad_zero_at_shared_center():
    w = np.array([0.4, -0.1])
    clients = [(Quadratic(w), None)] * 4
    assert grad_norm_G(np.tile(w[:, None], (1, 4)), clients, SCAD(1.0), 3.0) == 0.0


def central_diff(f, W, h=1e-5):
    G = np.zeros_like(W)
    for idx in np.ndindex(W.shape):
        E = np.zeros_like(W)
        E[idx] = h
        G[idx] = (f(W + E) - f(W - E)) / (2 * h)
    return G


@pytest.mark.parametrize("seed", range(4))
def test_grad_G_matches_finite_differences(seed):
    r = np.random.default_rng(seed)
    model = MLP(2, 3, 2)
    clients = []
    for _ in range(3):
        data = LabeledDataset(r.standard_normal((12, 2)), r.integers(0, 2, 12), 2)
        clients.append((model, data))
    W = 0.5 * r.standard_normal((model.param_dim, 3))
    A = NegExp(2.0)
    fd = central_diff(lambda V: objective_G(V, clients, A, 0.7), W)
    g = grad_G(W, clients, A, 0.7)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-5


def test_penalty_grad_factor():
    W = np.array([[0.0, 2.0]])
    assert penalty_grad(W, Linear()).tolist() == [[-4.0, 4.0]]
    assert penalty_grad(W, Linear(), factor=1.0).tolist() == [[-2.0, 2.0]]


def test_bmta_examples():
    assert bmta([record(1, 0.42)]) == 0.42
    assert bmta([0.5, 0.7, 0.6]) == 0.7
    with pytest.raises(DomainError):
        bmta([])


def test_mean_test_accuracy_perfect():
    X = np.array([[1.0], [-1.0]])
    data = LabeledDataset(X, [1, 0], 2)
    model = LogisticRegression(1, 2)
    w = np.array([-1.0, 1.0, 0.0, 0.0])
    clients = [(model, ClientDataset(data, data))] * 2
    assert mean_test_accuracy(np.tile(w[:, None], (1, 2)), clients) == 1.0


def brute_force_p(d):
    """Two-sided p by enumerating every sign pattern of the ranked |d|."""
    d = np.asarray(d, dtype=float)
    d = d[d != 0]
    ranks = stats.rankdata(np.abs(d))
    t = ranks[d > 0].sum()
    n = d.size
    lower = upper = 0
    for signs in itertools.product((0, 1), repeat=n):
        s = float(np.dot(signs, ranks))
        lower += s <= t + 1e-9
        upper += s >= t - 1e-9
    return min(1.0, 2 * min(lower, upper) / 2**n)


def test_wilcoxon_all_dominating_twelve():
    a = np.arange(1.0, 13.0) + 0.5
    b = np.arange(1.0, 13.0)
    assert wilcoxon_signed_rank(a, b) == 2 / 2**12
    assert wilcoxon_signed_rank(a, b) == pytest.approx(0.000488, abs=1e-6)


def test_wilcoxon_errors_and_symmetry():
    a = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0])
    with pytest.raises(InsufficientDataError):
        wilcoxon_signed_rank(a, a)
    with pytest.raises(DimensionError):
        wilcoxon_signed_rank(a, a[:-1])
    b = a + np.array([0.3, -0.1, 0.7, 0.2, -0.9, 0.4, 0.05])
    assert wilcoxon_signed_rank(a, b) == wilcoxon_signed_rank(b, a)


@pytest.mark.parametrize("seed", range(10))
def test_wilcoxon_exact_with_ties_matches_enumeration(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(6, 11))
    d = r.integers(-3, 4, n).astype(float)
    d[d == 0] = 1.0
    assert wilcoxon_signed_rank(d, np.zeros(n)) == brute_force_p(d)


@pytest.mark.parametrize("seed", range(5))
def test_wilcoxon_matches_scipy(seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal(10), r.standard_normal(10)
    ref = stats.wilcoxon(a, b, method="exact").pvalue
    assert wilcoxon_signed_rank(a, b) == pytest.approx(ref, rel=1e-12)
    a, b = r.standard_normal(40), r.standard_normal(40)
    ref = stats.wilcoxon(a, b, method="approx", correction=False).pvalue
    assert wilcoxon_signed_rank(a, b) == pytest.approx(ref, rel=1e-9)


def test_convergence_report_constant_and_running_min():
    recs = [RoundRecord(k, 2.0, 1.0, 1.0, 0.1, (), None, None) for k in range(1, 6)]
    rep = convergence_report(recs)
    assert rep.running_min_objective.tolist() == [2.0] * 5
    recs = [RoundRecord(k, g, g, 1.0, 0.1, (), None, None) for k, g in enumerate([3.0, 1.0, 2.0, 0.5], 1)]
    rep = convergence_report(recs)
    assert rep.running_min_grad_norm_sq.tolist() == [9.0, 1.0, 1.0, 0.25]
    assert np.all(np.diff(rep.running_min_grad_norm_sq) <= 0)


def test_convex_gap_within_bound_at_256():
    C = np.random.default_rng(1).standard_normal((3, 5))
    clients = quad_clients(C)
    lam, K = 0.5, 256
    mu = lam / 2  # the objective the attentive iteration descends
    W0 = np.zeros((3, 5))
    Wstar = quadratic_linear_optimum(C, mu)
    spec = ObjectiveSpec(Linear(), mu)
    sched = ConstantTheory(lam, K)
    hist, state = run_experiment(
        FedAMP(Linear(), sched, "strict", lam), clients, K, SolverConfig(method="exact"), W0=W0, objective=spec
    )
    opt = OptimumInfo(objective_G(Wstar, clients, Linear(), mu), Wstar, W0)
    rep = convergence_report(hist, sched, opt, state.initial)
    bound16 = (np.linalg.norm(W0 - Wstar) ** 2 + 5 * rep.B**2) / 16
    assert rep.final_gap <= bound16
    assert rep.final_bound == pytest.approx(bound16)


def test_collab_json_round_trip_and_identity():
    text = export_collab_matrix(CollabMatrix.identity(3))
    doc = json.loads(text)
    assert doc["weights"] == [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    X = fedamp_weights(np.random.default_rng(0).standard_normal((2, 4)), NegExp(1.0), 0.123456789)
    buf = io.StringIO()
    export_collab_matrix(X, buf, groups=[0, 0, 1, 1])
    back, groups = load_collab_matrix(buf.getvalue())
    assert back == X
    assert groups == [0, 0, 1, 1]


def test_block_means_three_blocks():
    groups = [0, 0, 1, 1, 2, 2]
    X = np.full((6, 6), 0.02)
    for i in range(6):
        X[i, i ^ 1] = 0.5
    np.fill_diagonal(X, 0.0)
    X[np.arange(6), np.arange(6)] = 1 - X.sum(axis=1)
    intra, inter = block_means(CollabMatrix(X), groups)
    assert intra == pytest.approx(0.5)
    assert inter == pytest.approx(0.02)


def test_metrics_csv_layout():
    recs = [record(1, 0.5), RoundRecord(2, 1.5, 0.25, 0.3, None, (), None, None, dropped=(1, 3))]
    text = write_metrics_csv(recs)
    lines = text.splitlines()
    assert lines[0] == ",".join(METRICS_COLUMNS)
    assert lines[1] == "1,0.1,1.0,0.5,0.5,0"
    assert lines[2] == "2,,1.5,0.25,,2"
