"""Round-based orchestration of FedAMP, HeurFedAMP and the baselines.

A round is a serial server step over the current parameter matrix ``W``
(the only thing the server ever sees) followed by independent client
steps.  Every random draw comes from a stream keyed by
``(master_seed, purpose, round, client)``, so results do not depend on how
client solves are scheduled across threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import metrics
from .attention import (
    CLAMPED,
    MODES,
    AttentionFunction,
    CollabMatrix,
    NegExp,
    aggregate,
    fedamp_weights,
    heur_weights,
)
from .errors import InvalidInputError, UnsupportedOperationError
from .models import ClientDataset, LossModel, Quadratic
from .optim import (
    EXACT,
    ProxProblem,
    SolverConfig,
    StepSchedule,
    local_train,
    prox_solve_iterative,
    prox_solve_quadratic,
    step_size,
)

INIT_SCALE = 0.05

_STREAM_INIT = 0
_STREAM_FAULTS = 1
_STREAM_CLIENT = 2
_STREAM_FINETUNE = 3


def stream(seed: int, purpose: int, round: int = 0, client: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), purpose, int(round), int(client)])


# -- algorithms ---------------------------------------------------------------


@dataclass(frozen=True)
class FedAMP:
    attention: AttentionFunction
    schedule: StepSchedule
    mode: str = CLAMPED
    lam: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidInputError(f"mode must be one of {MODES}")
        if not self.lam > 0:
            raise InvalidInputError("lam must be > 0")


@dataclass(frozen=True)
class HeurFedAMP:
    sigma: float
    self_weights: float | tuple[float, ...]
    schedule: StepSchedule
    lam: float = 1.0

    def __post_init__(self):
        if self.sigma < 0 or not self.lam > 0:
            raise InvalidInputError("HeurFedAMP needs sigma >= 0 and lam > 0")
        sw = np.atleast_1d(np.asarray(self.self_weights, dtype=np.float64))
        if np.any(sw < 0) or np.any(sw >= 1):
            raise InvalidInputError("self weights must lie in [0, 1)")


@dataclass(frozen=True)
class FedAvg:
    pass


@dataclass(frozen=True)
class FedProx:
    mu: float = 0.01

    def __post_init__(self):
        if not self.mu > 0:
            raise InvalidInputError("FedProx needs mu > 0")


@dataclass(frozen=True)
class FedAvgFT:
    finetune_epochs: int = 1

    def __post_init__(self):
        if self.finetune_epochs < 1:
            raise InvalidInputError("finetune_epochs must be >= 1")


@dataclass(frozen=True)
class FedProxFT:
    mu: float = 0.01
    finetune_epochs: int = 1

    def __post_init__(self):
        if not self.mu > 0:
            raise InvalidInputError("FedProxFT needs mu > 0")
        if self.finetune_epochs < 1:
            raise InvalidInputError("finetune_epochs must be >= 1")


@dataclass(frozen=True)
class Separate:
    pass


Algorithm = FedAMP | HeurFedAMP | FedAvg | FedProx | FedAvgFT | FedProxFT | Separate
_ATTENTIVE = (FedAMP, HeurFedAMP)
_GLOBAL = (FedAvg, FedProx, FedAvgFT, FedProxFT)


@dataclass(frozen=True)
class FaultModel:
    """Per-round client faults.

    ``epoch_jitter=(lo, hi)`` replaces each client's epoch count with a
    uniform draw from ``{lo, ..., hi}`` (mean ``(lo + hi) / 2``).  With
    ``exclude_dropped`` the server builds weights over online clients only;
    otherwise dropped clients' stale models still take part.
    """

    drop_rate: float = 0.0
    epoch_jitter: tuple[int, int] | None = None
    exclude_dropped: bool = False

    def __post_init__(self):
        if not 0.0 <= self.drop_rate <= 1.0:
            raise InvalidInputError("drop_rate must lie in [0, 1]")
        if self.epoch_jitter is not None:
            lo, hi = self.epoch_jitter
            if lo < 1 or hi < lo:
                raise InvalidInputError("epoch_jitter must satisfy 1 <= lo <= hi")
            object.__setattr__(self, "epoch_jitter", (int(lo), int(hi)))


@dataclass(frozen=True, eq=False)
class RoundRecord:
    round: int
    objective: float
    grad_norm: float
    bound_norm: float
    alpha: float | None
    train_loss: tuple[float, ...]
    test_acc: tuple[float, ...] | None
    mean_test_acc: float | None
    dropped: tuple[int, ...] = ()
    epochs: tuple[int, ...] = ()
    collab: CollabMatrix | None = None

    def same_as(self, other: "RoundRecord") -> bool:
        """Bitwise equality, including the collaboration snapshot."""
        fields_equal = (
            self.round == other.round
            and _same_float(self.objective, other.objective)
            and _same_float(self.grad_norm, other.grad_norm)
            and _same_float(self.bound_norm, other.bound_norm)
            and _same_float(self.alpha, other.alpha)
            and self.train_loss == other.train_loss
            and self.test_acc == other.test_acc
            and _same_float(self.mean_test_acc, other.mean_test_acc)
            and self.dropped == other.dropped
            and self.epochs == other.epochs
        )
        if not fields_equal:
            return False
        if (self.collab is None) != (other.collab is None):
            return False
        return self.collab is None or self.collab == other.collab


def _same_float(a, b):
    if a is None or b is None:
        return a is b
    return a == b or (math.isnan(a) and math.isnan(b))


@dataclass(frozen=True, eq=False)
class FederationState:
    round: int
    W: np.ndarray
    U: np.ndarray
    global_model: np.ndarray | None = None
    history: tuple[RoundRecord, ...] = ()
    initial: RoundRecord | None = None

    def __post_init__(self):
        if self.W.shape != self.U.shape:
            raise InvalidInputError("W and U must have the same shape")


@dataclass(frozen=True)
class ObjectiveSpec:
    """Attention function and lambda used to score trajectories with G.

    The message-passing weights carry ``alpha * A'`` without the factor 2 of
    the pairwise derivative, so an attentive run with regularization
    ``lam`` descends ``G`` at ``lam / 2``; that is the default score.
    """

    attention: AttentionFunction = field(default_factory=lambda: NegExp(1.0))
    lam: float = 1.0


def descent_lambda(lam: float) -> float:
    """Regularization of the objective that a run with ``lam`` actually descends."""
    return 0.5 * lam


def objective_for(algorithm, objective: ObjectiveSpec | None) -> ObjectiveSpec:
    if objective is not None:
        return objective
    if isinstance(algorithm, FedAMP):
        return ObjectiveSpec(algorithm.attention, descent_lambda(algorithm.lam))
    if isinstance(algorithm, HeurFedAMP):
        return ObjectiveSpec(NegExp(1.0), descent_lambda(algorithm.lam))
    return ObjectiveSpec()


# -- faults ---------------------------------------------------------------------


def sample_faults(faults: FaultModel, m: int, round: int, rng: np.random.Generator, default_epochs: int):
    """Draw the dropped set and per-client epoch counts for one round."""
    u = rng.random(m)
    jitter = None
    if faults.epoch_jitter is not None:
        lo, hi = faults.epoch_jitter
        jitter = rng.integers(lo, hi + 1, size=m)
    dropped = tuple(int(i) for i in np.flatnonzero(u < faults.drop_rate))
    epochs = tuple(int(e) for e in jitter) if jitter is not None else (int(default_epochs),) * m
    return dropped, epochs


# -- server step ---------------------------------------------------------------


def _embed(sub: CollabMatrix, online: Sequence[int], m: int) -> CollabMatrix:
    X = np.eye(m)
    idx = np.asarray(online)
    X[np.ix_(idx, idx)] = sub.weights
    return CollabMatrix(X, sub.mode)


def _heur_self_weights(algorithm: HeurFedAMP, m: int) -> np.ndarray:
    sw = np.asarray(algorithm.self_weights, dtype=np.float64)
    if sw.ndim == 0:
        return np.full(m, float(sw))
    if sw.shape != (m,):
        raise InvalidInputError(f"expected {m} self weights, got {sw.shape[0]}")
    return sw


def server_step(
    W: np.ndarray,
    algorithm,
    k: int,
    sizes: Sequence[int] | None = None,
    online: Sequence[int] | None = None,
) -> tuple[CollabMatrix, np.ndarray, float | None]:
    """Compute the collaboration matrix and cloud models from ``W`` alone.

    ``sizes`` are client train-set sizes (FedAvg weighting); ``online``
    restricts the weights to a subset of clients, the rest keep
    ``u_i = w_i``.  Returns ``(Xi, U, alpha_k)``.
    """
    W = np.asarray(W, dtype=np.float64)
    m = W.shape[1]
    online = list(range(m)) if online is None else list(online)
    alpha = None
    if isinstance(algorithm, FedAMP):
        alpha = step_size(algorithm.schedule, k)
        if len(online) == 0:
            Xi = CollabMatrix.identity(m, algorithm.mode)
        else:
            sub = fedamp_weights(W[:, online], algorithm.attention, alpha, algorithm.mode)
            Xi = sub if len(online) == m else _embed(sub, online, m)
    elif isinstance(algorithm, HeurFedAMP):
        alpha = step_size(algorithm.schedule, k)
        sw = _heur_self_weights(algorithm, m)
        if len(online) < 2:
            Xi = CollabMatrix.identity(m)
        else:
            sub = heur_weights(W[:, online], algorithm.sigma, sw[online])
            Xi = sub if len(online) == m else _embed(sub, online, m)
    elif isinstance(algorithm, _GLOBAL):
        p = np.zeros(m)
        n = np.ones(m) if sizes is None else np.asarray(sizes, dtype=np.float64)
        if len(online):
            p[online] = n[online] / n[online].sum()
        else:
            p = n / n.sum()
        Xi = CollabMatrix(np.tile(p, (m, 1)))
    elif isinstance(algorithm, Separate):
        Xi = CollabMatrix.identity(m)
    else:
        raise InvalidInputError(f"unknown algorithm {algorithm!r}")
    return Xi, aggregate(W, Xi), alpha


# -- client step ---------------------------------------------------------------


def _client_update(i, algorithm, client, W, U, alpha, epochs, cfg, seed, k):
    model, data = client
    train = data.train if isinstance(data, ClientDataset) else data
    rng = stream(seed, _STREAM_CLIENT, k, i)
    if isinstance(algorithm, _ATTENTIVE):
        rho = algorithm.lam / alpha
        if cfg.method == EXACT:
            if not isinstance(model, Quadratic):
                raise UnsupportedOperationError("exact prox solves need Quadratic clients")
            return prox_solve_quadratic(model.center, U[:, i], rho)
        # round 1 starts from the client's own initial model, later rounds from the cloud model
        start = W[:, i] if k == 1 else None
        return prox_solve_iterative(ProxProblem(model, train, U[:, i], rho), cfg, rng, epochs, client=i, round=k, start=start)
    if isinstance(algorithm, (FedAvg, FedAvgFT)):
        return local_train(model, train, U[:, i], cfg, rng, epochs, client=i, round=k)
    if isinstance(algorithm, (FedProx, FedProxFT)):
        return local_train(model, train, U[:, i], cfg, rng, epochs, anchor=U[:, i], mu=algorithm.mu, client=i, round=k)
    return local_train(model, train, W[:, i], cfg, rng, epochs, client=i, round=k)


def _map(fn, items, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _train_sizes(clients):
    out = []
    for _, data in clients:
        train = data.train if isinstance(data, ClientDataset) else data
        out.append(1 if train is None else len(train))
    return out


def deployed_models(W, algorithm, clients, cfg, seed, k, sizes, threads=1) -> np.ndarray:
    """The models each client would use for prediction after round ``k``.

    Personalized methods use ``W`` directly.  Global methods deploy the
    size-weighted average; fine-tuning variants additionally run
    ``finetune_epochs`` of local training from it (evaluation only, the
    fine-tuned models are never sent back).
    """
    if not isinstance(algorithm, _GLOBAL):
        return W
    p = np.asarray(sizes, dtype=np.float64)
    g = W @ (p / p.sum())
    if not isinstance(algorithm, (FedAvgFT, FedProxFT)):
        return np.tile(g[:, None], (1, W.shape[1]))

    def tune(i):
        model, data = clients[i]
        train = data.train if isinstance(data, ClientDataset) else data
        return local_train(
            model, train, g, cfg, stream(seed, _STREAM_FINETUNE, k, i), algorithm.finetune_epochs, client=i, round=k
        )

    return np.stack(_map(tune, range(W.shape[1]), threads), axis=1)


def evaluate(W, clients, objective: ObjectiveSpec):
    """Objective, gradient norm, assumption norm, per-client losses and accuracies."""
    A, lam = objective.attention, objective.lam
    G = metrics.objective_G(W, clients, A, lam)
    gF = metrics.loss_grad_matrix(W, clients)
    gA = metrics.penalty_grad(W, A)
    grad_norm = float(np.linalg.norm(gF + lam * gA))
    bound_norm = max(float(np.linalg.norm(gF)), lam * float(np.linalg.norm(gA)))
    losses, accs = [], []
    for i, (model, data) in enumerate(clients):
        train = data.train if isinstance(data, ClientDataset) else data
        losses.append(float(model.loss(W[:, i], train)))
        if model.classifies and isinstance(data, ClientDataset):
            accs.append(float(model.accuracy(W[:, i], data.test)))
    test_acc = tuple(accs) if len(accs) == len(clients) else None
    mean = float(np.mean(accs)) if test_acc else None
    return G, grad_norm, bound_norm, tuple(losses), test_acc, mean


def run_round(
    state: FederationState,
    algorithm,
    clients: Sequence[tuple[LossModel, ClientDataset]],
    faults: FaultModel,
    solver_cfg: SolverConfig,
    seed: int,
    objective: ObjectiveSpec | None = None,
    threads: int = 1,
    record_collab: bool = True,
) -> FederationState:
    k = state.round + 1
    m = state.W.shape[1]
    if len(clients) != m:
        raise InvalidInputError(f"state has {m} clients, got {len(clients)}")
    dropped, epochs = sample_faults(faults, m, k, stream(seed, _STREAM_FAULTS, k), solver_cfg.epochs)
    drop_set = set(dropped)
    online = [i for i in range(m) if i not in drop_set] if faults.exclude_dropped else None
    sizes = _train_sizes(clients)

    Xi, U, alpha = server_step(state.W, algorithm, k, sizes, online)

    active = [i for i in range(m) if i not in drop_set]
    updates = _map(
        lambda i: _client_update(i, algorithm, clients[i], state.W, U, alpha, epochs[i], solver_cfg, seed, k),
        active,
        threads,
    )
    W = np.array(state.W, dtype=np.float64, copy=True)
    for i, w in zip(active, updates):
        W[:, i] = w
    W.flags.writeable = False
    U.flags.writeable = False

    deployed = deployed_models(W, algorithm, clients, solver_cfg, seed, k, sizes, threads)
    G, gn, bn, losses, accs, mean = evaluate(deployed, clients, objective_for(algorithm, objective))
    record = RoundRecord(
        round=k,
        objective=G,
        grad_norm=gn,
        bound_norm=bn,
        alpha=alpha,
        train_loss=losses,
        test_acc=accs,
        mean_test_acc=mean,
        dropped=dropped,
        epochs=tuple(epochs[i] if i not in drop_set else 0 for i in range(m)),
        collab=Xi if record_collab else None,
    )
    global_model = U[:, 0].copy() if isinstance(algorithm, _GLOBAL) else None
    return replace(state, round=k, W=W, U=U, global_model=global_model, history=state.history + (record,))


def init_params(d: int, m: int, seed: int) -> np.ndarray:
    """i.i.d. uniform(-0.05, 0.05) entries drawn from the master seed."""
    W = stream(seed, _STREAM_INIT).uniform(-INIT_SCALE, INIT_SCALE, size=(d, m))
    W.flags.writeable = False
    return W


def initial_state(clients, seed: int, objective: ObjectiveSpec, W0=None) -> FederationState:
    d = clients[0][0].param_dim
    W0 = init_params(d, len(clients), seed) if W0 is None else np.array(W0, dtype=np.float64)
    W0.flags.writeable = False
    G, gn, bn, losses, accs, mean = evaluate(W0, clients, objective)
    rec = RoundRecord(0, G, gn, bn, None, losses, accs, mean)
    return FederationState(round=0, W=W0, U=W0.copy(), initial=rec)


def run_experiment(
    algorithm,
    clients: Sequence[tuple[LossModel, ClientDataset]],
    rounds: int,
    solver_cfg: SolverConfig,
    faults: FaultModel | None = None,
    seed: int = 0,
    W0=None,
    objective: ObjectiveSpec | None = None,
    threads: int = 1,
    record_collab: bool = True,
    on_round: Callable[[RoundRecord], None] | None = None,
) -> tuple[tuple[RoundRecord, ...], FederationState]:
    """Run ``rounds`` rounds from a seeded initialization; returns ``(history, final_state)``."""
    if rounds < 0:
        raise InvalidInputError("rounds must be >= 0")
    if not clients:
        raise InvalidInputError("need at least one client")
    faults = faults or FaultModel()
    obj = objective_for(algorithm, objective)
    state = initial_state(clients, seed, obj, W0)
    for _ in range(rounds):
        state = run_round(state, algorithm, clients, faults, solver_cfg, seed, obj, threads, record_collab)
        if on_round is not None:
            on_round(state.history[-1])
    return state.history, state


def general_method_oracle(W0, clients, A: AttentionFunction, lam: float, schedule: StepSchedule, K: int) -> list[np.ndarray]:
    """Dense reference trajectory ``[W^0, ..., W^K]`` for Quadratic clients.

    Each iteration takes a gradient step on the pairwise penalty (with the
    message-passing coefficient, no factor 2) and then solves every
    column's prox subproblem in closed form.
    """
    models = [c[0] if isinstance(c, tuple) else c for c in clients]
    for mdl in models:
        if not isinstance(mdl, Quadratic):
            raise UnsupportedOperationError("the dense oracle needs Quadratic clients")
    C = np.stack([mdl.center for mdl in models], axis=1)
    W = np.array(W0, dtype=np.float64)
    traj = [W.copy()]
    for k in range(1, K + 1):
        alpha = step_size(schedule, k)
        U = W - alpha * metrics.penalty_grad(W, A, factor=1.0)
        rho = lam / alpha
        W = (C + rho * U) / (1.0 + rho)
        traj.append(W.copy())
    return traj
