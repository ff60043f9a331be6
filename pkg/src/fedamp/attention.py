"""Attention-inducing functions and the collaboration (message-passing) weights.

An attention-inducing function ``A`` on ``[0, inf)`` is nondecreasing and
concave with ``A(0) = 0`` and a finite right-derivative at zero.  Its
derivative ``A'`` acts as a similarity kernel on squared parameter distance:
the weight client ``j``'s model receives in client ``i``'s cloud model is
``alpha * A'(||w_i - w_j||^2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import pairwise_sq_distances
from .errors import (
    DegenerateInputError,
    DimensionError,
    DomainError,
    InvalidInputError,
    StepSizeTooLargeError,
    UnsupportedOperationError,
)

STRICT = "strict"
CLAMPED = "clamped"
MODES = (STRICT, CLAMPED)


def _nonneg(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(np.isnan(t)):
        raise DomainError("attention functions are defined on t >= 0")
    return t


def _out(x, scalar):
    return float(x) if scalar else x


class AttentionFunction:
    """Base class.  Subclasses implement ``_value`` and ``_deriv`` on arrays."""

    kind: str = ""

    def value(self, t):
        scalar = np.ndim(t) == 0
        return _out(self._value(_nonneg(t)), scalar)

    def deriv(self, t):
        """``A'(t)``; at ``t = 0`` this is the right limit."""
        scalar = np.ndim(t) == 0
        return _out(self._deriv(_nonneg(t)), scalar)

    def params(self) -> dict:
        return {}

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params()}

    def __eq__(self, other):
        return type(self) is type(other) and self.params() == other.params()

    def __hash__(self):
        return hash((self.kind, tuple(sorted(self.params().items()))))

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.params().items())
        return f"{type(self).__name__}({args})"


class NegExp(AttentionFunction):
    """``A(t) = 1 - exp(-t / sigma)``."""

    kind = "negexp"

    def __init__(self, sigma: float):
        if not sigma > 0:
            raise InvalidInputError("NegExp requires sigma > 0")
        self.sigma = float(sigma)

    def params(self):
        return {"sigma": self.sigma}

    def _value(self, t):
        return -np.expm1(-t / self.sigma)

    def _deriv(self, t):
        return np.exp(-t / self.sigma) / self.sigma


class Linear(AttentionFunction):
    """``A(t) = t``: plain squared-distance coupling (convex objective for convex losses)."""

    kind = "linear"

    def _value(self, t):
        return t * 1.0

    def _deriv(self, t):
        return np.ones_like(t)


class TamedSqrt(AttentionFunction):
    """``A(t) = sqrt(t + sigma) - sqrt(sigma)``, a square root with finite slope at 0."""

    kind = "tamed_sqrt"

    def __init__(self, sigma: float):
        if not sigma > 0:
            raise InvalidInputError("TamedSqrt requires sigma > 0")
        self.sigma = float(sigma)

    def params(self):
        return {"sigma": self.sigma}

    def _value(self, t):
        # difference of square roots without cancellation
        return t / (np.sqrt(t + self.sigma) + math.sqrt(self.sigma))

    def _deriv(self, t):
        return 0.5 / np.sqrt(t + self.sigma)


class MCP(AttentionFunction):
    """Minimax concave penalty with level ``sigma`` and concavity ``theta``.

    ``A(t) = sigma*t - t^2/(2 theta)`` for ``t <= theta*sigma``, then constant
    ``theta*sigma^2/2``.
    """

    kind = "mcp"

    def __init__(self, sigma: float, theta: float = 3.0):
        if not sigma > 0:
            raise InvalidInputError("MCP requires sigma > 0")
        if not theta > 2:
            raise InvalidInputError("MCP requires theta > 2")
        self.sigma = float(sigma)
        self.theta = float(theta)

    def params(self):
        return {"sigma": self.sigma, "theta": self.theta}

    def _value(self, t):
        s, th = self.sigma, self.theta
        return np.where(t <= th * s, s * t - t * t / (2 * th), 0.5 * th * s * s)

    def _deriv(self, t):
        s, th = self.sigma, self.theta
        return np.where(t <= th * s, s - t / th, 0.0)


class SCAD(AttentionFunction):
    """Smoothly clipped absolute deviation with level ``sigma`` and knee ``theta``.

    Linear with slope ``sigma`` up to ``sigma``, quadratic blend up to
    ``theta*sigma``, then constant ``(theta+1) sigma^2 / 2``.
    """

    kind = "scad"

    def __init__(self, sigma: float, theta: float = 3.7):
        if not sigma > 0:
            raise InvalidInputError("SCAD requires sigma > 0")
        if not theta > 2:
            raise InvalidInputError("SCAD requires theta > 2")
        self.sigma = float(sigma)
        self.theta = float(theta)

    def params(self):
        return {"sigma": self.sigma, "theta": self.theta}

    def _value(self, t):
        s, th = self.sigma, self.theta
        mid = (2 * th * s * t - t * t - s * s) / (2 * (th - 1))
        return np.where(t <= s, s * t, np.where(t <= th * s, mid, 0.5 * (th + 1) * s * s))

    def _deriv(self, t):
        s, th = self.sigma, self.theta
        return np.where(t <= s, s, np.where(t <= th * s, (th * s - t) / (th - 1), 0.0))


ATTENTION_KINDS = {
    "negexp": NegExp,
    "linear": Linear,
    "tamed_sqrt": TamedSqrt,
    "mcp": MCP,
    "scad": SCAD,
}


def make_attention(kind: str, sigma: float | None = None, theta: float | None = None) -> AttentionFunction:
    try:
        cls = ATTENTION_KINDS[kind]
    except KeyError:
        raise InvalidInputError(f"unknown attention function {kind!r}") from None
    if cls is Linear:
        return Linear()
    kwargs = {"sigma": sigma}
    if theta is not None and cls in (MCP, SCAD):
        kwargs["theta"] = theta
    return cls(**kwargs)


def value(A: AttentionFunction, t):
    return A.value(t)


def deriv(A: AttentionFunction, t):
    return A.deriv(t)


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_attention_function(A, grid, h: float = 1e-6, tol: float = 1e-6) -> ValidationReport:
    """Check the defining properties of an attention-inducing function on ``grid``.

    ``A`` only needs ``value`` and ``deriv`` methods, so deliberately broken
    functions can be probed.  Nothing is raised; violations are collected.
    """
    t = np.asarray(grid, dtype=np.float64)
    report = ValidationReport()
    if t.ndim != 1 or t.size < 2 or np.any(t < 0) or np.any(np.diff(t) <= 0):
        report.violations.append("grid must be sorted, strictly increasing, nonnegative, length >= 2")
        return report
    v = np.array([A.value(x) for x in t])
    dv = np.array([A.deriv(x) for x in t])
    if t[0] == 0 and abs(v[0]) > tol:
        report.violations.append(f"A(0) = {v[0]!r}, expected 0")
    if not np.all(np.isfinite(dv)):
        report.violations.append("derivative is not finite on the grid")
    if np.any(np.diff(v) < -tol):
        i = int(np.argmax(np.diff(v) < -tol))
        report.violations.append(f"not nondecreasing between t={t[i]} and t={t[i + 1]}")
    slopes = np.diff(v) / np.diff(t)
    bad = np.diff(slopes) > tol
    if np.any(bad):
        i = int(np.argmax(bad))
        report.violations.append(f"not concave around t={t[i + 1]}")
    if np.any(dv < -tol):
        report.violations.append(f"negative derivative at t={t[int(np.argmax(dv < -tol))]}")
    if np.any(np.diff(dv) > tol):
        i = int(np.argmax(np.diff(dv) > tol))
        report.violations.append(f"derivative increases between t={t[i]} and t={t[i + 1]}")
    for x, d in zip(t[1:-1], dv[1:-1]):
        lo = max(x - h, 0.0)
        fd = (A.value(x + h) - A.value(lo)) / (x + h - lo)
        if abs(fd - d) > tol * max(1.0, abs(d)):
            report.violations.append(f"derivative mismatch at t={x}: analytic {d!r}, numeric {fd!r}")
            break
    return report


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"length mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateInputError("cosine similarity of a zero vector is undefined")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass(frozen=True, eq=False)
class CollabMatrix:
    """Row-stochastic ``m x m`` weights; row ``i`` builds client ``i``'s cloud model."""

    weights: np.ndarray
    mode: str = CLAMPED

    def __post_init__(self):
        X = np.array(self.weights, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] != X.shape[1] or X.shape[0] < 1:
            raise DimensionError(f"collaboration matrix must be square, got {X.shape}")
        if self.mode not in MODES:
            raise InvalidInputError(f"mode must be one of {MODES}")
        if np.any(np.abs(X.sum(axis=1) - 1.0) > 1e-9):
            raise InvalidInputError("collaboration rows must sum to 1")
        off = X[~np.eye(X.shape[0], dtype=bool)]
        if np.any(off < 0):
            raise InvalidInputError("off-diagonal collaboration weights must be >= 0")
        if self.mode == STRICT and np.any(np.diag(X) < 0):
            raise InvalidInputError("strict mode requires nonnegative self weights")
        X.flags.writeable = False
        object.__setattr__(self, "weights", X)

    @property
    def m(self) -> int:
        return self.weights.shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, CollabMatrix)
            and self.mode == other.mode
            and np.array_equal(self.weights, other.weights)
        )

    @classmethod
    def identity(cls, m: int, mode: str = CLAMPED) -> "CollabMatrix":
        return cls(np.eye(m), mode)


def fedamp_weights(W, A: AttentionFunction, alpha: float, mode: str = CLAMPED) -> CollabMatrix:
    """Distance-kernel weights ``xi_ij = alpha * A'(||w_i - w_j||^2)``, ``xi_ii = 1 - sum``.

    In clamped mode a negative self weight is set to zero and the row is
    renormalized; strict mode raises :class:`StepSizeTooLargeError` instead.
    """
    if mode not in MODES:
        raise InvalidInputError(f"mode must be one of {MODES}")
    if not alpha > 0:
        raise DomainError("alpha must be > 0")
    W = np.asarray(W, dtype=np.float64)
    m = W.shape[1]
    if m == 1:
        return CollabMatrix(np.ones((1, 1)), mode)
    D = pairwise_sq_distances(W)
    Xi = np.zeros((m, m))
    for i in range(m):
        total = 0.0
        for j in range(m):
            if j != i:
                Xi[i, j] = alpha * float(A.deriv(D[i, j]))
                total += Xi[i, j]
        self_w = 1.0 - total
        if self_w < 0:
            if mode == STRICT:
                raise StepSizeTooLargeError(i, self_w)
            Xi[i] /= total
            self_w = 0.0
        Xi[i, i] = self_w
    return CollabMatrix(Xi, mode)


def heur_weights(W, sigma: float, self_weight) -> CollabMatrix:
    """Cosine-similarity softmax weights with fixed self weights.

    ``self_weight`` is a scalar or one value per client, each in ``[0, 1)``.
    """
    W = np.asarray(W, dtype=np.float64)
    m = W.shape[1]
    if m < 2:
        raise UnsupportedOperationError("heuristic weights need at least two clients")
    if sigma < 0:
        raise DomainError("sigma must be >= 0")
    sw = np.broadcast_to(np.asarray(self_weight, dtype=np.float64), (m,))
    if np.any(sw < 0) or np.any(sw >= 1):
        raise InvalidInputError("self weights must lie in [0, 1)")
    norms = np.linalg.norm(W, axis=0)
    if np.any(norms == 0):
        raise DegenerateInputError(f"client {int(np.argmin(norms))} has a zero parameter vector")
    Wn = W / norms
    cos = np.clip(Wn.T @ Wn, -1.0, 1.0)
    Xi = np.zeros((m, m))
    for i in range(m):
        others = [j for j in range(m) if j != i]
        logits = sigma * cos[i, others]
        e = np.exp(logits - logits.max())
        Xi[i, others] = e / e.sum() * (1.0 - sw[i])
        Xi[i, i] = sw[i]
    return CollabMatrix(Xi, CLAMPED)


def aggregate(W, Xi) -> np.ndarray:
    """Cloud models ``U = W Xi^T``: column ``i`` is ``sum_j xi_ij w_j``."""
    W = np.asarray(W, dtype=np.float64)
    X = Xi.weights if isinstance(Xi, CollabMatrix) else np.asarray(Xi, dtype=np.float64)
    if X.shape != (W.shape[1], W.shape[1]):
        raise DimensionError(f"collaboration matrix {X.shape} does not match {W.shape[1]} clients")
    return W @ X.T
