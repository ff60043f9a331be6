"""Local training: the proximal subproblem, its solvers and step-size schedules.

Client ``i`` in round ``k`` minimizes

    F_i(w) + (rho / 2) * ||w - u_i||^2,     rho = lambda / alpha_k

starting from its cloud model ``u_i``.  Iterative solves run a fixed epoch
budget of mini-batch SGD or Adam and are guarded so the returned iterate
never has a larger objective than the starting point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError, InvalidInputError, NumericalDivergenceError
from .models import LabeledDataset, LossModel, Quadratic

SGD = "sgd"
ADAM = "adam"
EXACT = "exact"
SOLVER_METHODS = (SGD, ADAM, EXACT)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
MAX_HALVINGS = 5


@dataclass(frozen=True)
class ConstantTheory:
    """``alpha_k = lambda / sqrt(K)`` for every round ``k <= K``."""

    lam: float
    K: int

    def __post_init__(self):
        if not self.lam > 0 or self.K < 1:
            raise InvalidInputError("ConstantTheory needs lam > 0 and K >= 1")


@dataclass(frozen=True)
class StepDecay:
    """``alpha0 * factor ** floor((k - 1) / period)``."""

    alpha0: float = 1e4
    factor: float = 0.1
    period: int = 30

    def __post_init__(self):
        if not self.alpha0 > 0 or not 0 < self.factor <= 1 or self.period < 1:
            raise InvalidInputError("StepDecay needs alpha0 > 0, factor in (0, 1], period >= 1")


@dataclass(frozen=True)
class Diminishing:
    """``alpha_k = a / k``; the sum diverges while the sum of squares converges."""

    a: float

    def __post_init__(self):
        if not self.a > 0:
            raise InvalidInputError("Diminishing needs a > 0")


StepSchedule = ConstantTheory | StepDecay | Diminishing


def step_size(s: StepSchedule, k: int) -> float:
    if k < 1:
        raise DomainError(f"round index must be >= 1, got {k}")
    if isinstance(s, ConstantTheory):
        if k > s.K:
            raise DomainError(f"round {k} is beyond the horizon K={s.K}")
        return s.lam / math.sqrt(s.K)
    if isinstance(s, StepDecay):
        return s.alpha0 * s.factor ** ((k - 1) // s.period)
    if isinstance(s, Diminishing):
        return s.a / k
    raise InvalidInputError(f"unknown schedule {s!r}")


@dataclass(frozen=True)
class SolverConfig:
    epochs: int = 10
    batch_size: int = 100
    learning_rate: float = 1e-3
    method: str = ADAM

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise InvalidInputError("epochs, batch_size and learning_rate must be positive")
        if self.method not in SOLVER_METHODS:
            raise InvalidInputError(f"method must be one of {SOLVER_METHODS}")


@dataclass(frozen=True, eq=False)
class ProxProblem:
    model: LossModel
    data: LabeledDataset | None
    center: np.ndarray
    rho: float

    def __post_init__(self):
        c = np.array(self.center, dtype=np.float64)
        if c.shape != (self.model.param_dim,):
            raise DimensionError(f"center has shape {c.shape}, model needs ({self.model.param_dim},)")
        if not self.rho > 0:
            raise DomainError("rho must be > 0")
        c.flags.writeable = False
        object.__setattr__(self, "center", c)


def _penalized(model, data, center, rho, w):
    f, g = model.loss_and_grad(w, data)
    diff = w - center
    return f + 0.5 * rho * float(np.dot(diff, diff)), g + rho * diff


def prox_objective(p: ProxProblem, w) -> float:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != p.center.shape:
        raise DimensionError(f"w has shape {w.shape}, expected {p.center.shape}")
    return _penalized(p.model, p.data, p.center, p.rho, w)[0]


def prox_solve_quadratic(c, center, rho: float) -> np.ndarray:
    """Closed-form minimizer ``(c + rho * center) / (1 + rho)`` of the quadratic prox."""
    c = np.asarray(c, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    if c.shape != center.shape:
        raise DimensionError(f"length mismatch: {c.shape} vs {center.shape}")
    if not rho > 0:
        raise DomainError("rho must be > 0")
    return (c + rho * center) / (1.0 + rho)


def _batches(data, batched: bool, cfg: SolverConfig, epochs: int, rng: np.random.Generator):
    """Pre-draw every epoch's mini-batches so retries replay the same sample order."""
    if not batched:
        return [[data] for _ in range(epochs)]
    n = len(data)
    if cfg.batch_size >= n:
        return [[data] for _ in range(epochs)]
    out = []
    for _ in range(epochs):
        perm = rng.permutation(n)
        out.append([data.subset(perm[s : s + cfg.batch_size]) for s in range(0, n, cfg.batch_size)])
    return out


def _run_epochs(model, data, center, rho, start, cfg, plan, lr, trace):
    w = start.copy()
    m1 = np.zeros_like(w)
    m2 = np.zeros_like(w)
    step = 0
    for epoch in plan:
        for batch in epoch:
            _, g = model.loss_and_grad(w, batch)
            if rho:
                g = g + rho * (w - center)
            step += 1
            if cfg.method == ADAM:
                m1 = ADAM_BETA1 * m1 + (1 - ADAM_BETA1) * g
                m2 = ADAM_BETA2 * m2 + (1 - ADAM_BETA2) * g * g
                mhat = m1 / (1 - ADAM_BETA1**step)
                vhat = m2 / (1 - ADAM_BETA2**step)
                w = w - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
            else:
                w = w - lr * g
        if not np.all(np.isfinite(w)):
            return None
        if trace is not None:
            trace.append(_penalized(model, data, center, rho, w)[0])
    return w


def _guarded_descent(model, data, center, rho, start, cfg, rng, epochs, trace, client, round):
    epochs = cfg.epochs if epochs is None else int(epochs)
    if epochs < 1:
        raise InvalidInputError("epochs must be >= 1")
    start = np.asarray(start, dtype=np.float64)
    f0 = _penalized(model, data, center, rho, start)[0]
    if not math.isfinite(f0):
        raise NumericalDivergenceError("objective is not finite at the starting point", client, round)
    batched = not (isinstance(model, Quadratic) or data is None)
    plan = _batches(data, batched, cfg, epochs, rng)
    lr = cfg.learning_rate
    w = None
    for _ in range(MAX_HALVINGS + 1):
        attempt = [] if trace is not None else None
        with np.errstate(over="ignore", invalid="ignore"):
            w = _run_epochs(model, data, center, rho, start, cfg, plan, lr, attempt)
        if w is not None:
            f = _penalized(model, data, center, rho, w)[0]
            if math.isfinite(f) and f <= f0:
                if trace is not None:
                    trace.extend(attempt)
                return w
        lr *= 0.5
    if w is None:
        raise NumericalDivergenceError("local solver produced non-finite iterates", client, round)
    if trace is not None:
        trace.append(f0)
    return start.copy()


def prox_solve_iterative(
    p: ProxProblem,
    cfg: SolverConfig,
    rng: np.random.Generator,
    epochs: int | None = None,
    trace: list | None = None,
    client: int | None = None,
    round: int | None = None,
    start=None,
) -> np.ndarray:
    """Inexact prox solve, started at the prox center unless ``start`` is given.

    ``epochs`` overrides ``cfg.epochs`` (heterogeneous-epoch runs).  When
    ``trace`` is a list, the prox objective after each epoch of the accepted
    attempt is appended to it.  ``method="exact"`` uses the closed form and
    is only available for :class:`Quadratic` models.
    """
    if cfg.method == EXACT:
        if not isinstance(p.model, Quadratic):
            raise InvalidInputError("exact prox solves are only available for Quadratic models")
        return prox_solve_quadratic(p.model.center, p.center, p.rho)
    w0 = p.center if start is None else np.asarray(start, dtype=np.float64)
    if w0.shape != p.center.shape:
        raise DimensionError(f"start has shape {w0.shape}, expected {p.center.shape}")
    return _guarded_descent(p.model, p.data, p.center, p.rho, w0, cfg, rng, epochs, trace, client, round)


def local_train(
    model: LossModel,
    data: LabeledDataset | None,
    start,
    cfg: SolverConfig,
    rng: np.random.Generator,
    epochs: int | None = None,
    anchor=None,
    mu: float = 0.0,
    client: int | None = None,
    round: int | None = None,
) -> np.ndarray:
    """Plain local training from ``start``, optionally with a ``mu/2 ||w - anchor||^2`` term."""
    start = np.asarray(start, dtype=np.float64)
    center = start if anchor is None else np.asarray(anchor, dtype=np.float64)
    if cfg.method == EXACT:
        raise InvalidInputError("exact solves apply to prox steps only")
    return _guarded_descent(model, data, center, mu, start, cfg, rng, epochs, None, client, round)
