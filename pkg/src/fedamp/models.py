"""Per-client differentiable losses with exact gradients.

Parameters are flat vectors.  Layouts (layer-major, row-major inside a layer):

* ``LinearRegression``: ``[coef (r), bias]``
* ``LogisticRegression``: ``[weights (C x r), bias (C)]``
* ``MLP``: ``[W1 (h x r), b1 (h), W2 (C x h), b2 (C)]`` with a tanh hidden layer
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InvalidInputError, UnsupportedOperationError


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __init__(self, features, labels, num_classes: int | None = None):
        X = np.array(features, dtype=np.float64)
        y = np.array(labels)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[0] < 1:
            raise DimensionError(f"features must be an n x r matrix with n >= 1, got {X.shape}")
        if y.shape != (X.shape[0],):
            raise DimensionError(f"expected {X.shape[0]} labels, got shape {y.shape}")
        if not np.all(np.isfinite(X)):
            raise InvalidInputError("features contain non-finite values")
        if np.issubdtype(y.dtype, np.integer):
            y = y.astype(np.int64)
            if np.any(y < 0):
                raise InvalidInputError("labels must be non-negative")
            C = int(y.max()) + 1 if num_classes is None else int(num_classes)
            if np.any(y >= C):
                raise InvalidInputError(f"labels must be < num_classes={C}")
        else:
            # real-valued targets (regression)
            y = y.astype(np.float64)
            C = 0 if num_classes is None else int(num_classes)
        X.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "num_classes", C)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        # rows of an already validated dataset need no re-validation
        out = object.__new__(LabeledDataset)
        X, y = self.features[idx], self.labels[idx]
        X.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(out, "features", X)
        object.__setattr__(out, "labels", y)
        object.__setattr__(out, "num_classes", self.num_classes)
        return out

    def __eq__(self, other):
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class ClientDataset:
    train: LabeledDataset
    test: LabeledDataset
    group_id: int = 0

    def __post_init__(self):
        if self.train.num_features != self.test.num_features:
            raise DimensionError("train and test feature dimensions differ")
        if self.train.num_classes != self.test.num_classes:
            raise DimensionError("train and test class counts differ")
        if self.group_id < 0:
            raise InvalidInputError("group_id must be >= 0")


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _xent_and_dlogits(logits: np.ndarray, labels: np.ndarray):
    n = logits.shape[0]
    logp = _log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return float(loss), dlogits


class LossModel:
    """Base class: a loss ``F(w)`` over a dataset, its gradient and predictions."""

    param_dim: int
    classifies = True

    def _check(self, w, data) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.param_dim,):
            raise DimensionError(f"expected parameter vector of length {self.param_dim}, got {w.shape}")
        if data is not None and hasattr(self, "num_features") and data.num_features != self.num_features:
            raise DimensionError(
                f"model expects {self.num_features} features, dataset has {data.num_features}"
            )
        return w

    def loss(self, w, data: LabeledDataset | None = None) -> float:
        return self.loss_and_grad(w, data)[0]

    def grad(self, w, data: LabeledDataset | None = None) -> np.ndarray:
        return self.loss_and_grad(w, data)[1]

    def loss_and_grad(self, w, data: LabeledDataset) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def scores(self, w, X: np.ndarray) -> np.ndarray:
        raise UnsupportedOperationError(f"{type(self).__name__} does not produce class scores")

    def accuracy(self, w, data: LabeledDataset) -> float:
        if not self.classifies:
            raise UnsupportedOperationError(f"accuracy is undefined for {type(self).__name__}")
        w = self._check(w, data)
        pred = np.argmax(self.scores(w, data.features), axis=1)
        return float(np.mean(pred == data.labels))


class Quadratic(LossModel):
    """``F(w) = 0.5 * ||w - c||^2``; the dataset argument is ignored."""

    classifies = False

    def __init__(self, center):
        c = np.array(center, dtype=np.float64)
        if c.ndim != 1 or c.size < 1:
            raise DimensionError("center must be a non-empty vector")
        c.flags.writeable = False
        self.center = c
        self.param_dim = c.size

    def _check(self, w, data):
        return LossModel._check(self, w, None)

    def loss_and_grad(self, w, data=None):
        w = self._check(w, None)
        diff = w - self.center
        return 0.5 * float(np.dot(diff, diff)), diff

    def __repr__(self):
        return f"Quadratic(center={self.center.tolist()})"


class LinearRegression(LossModel):
    """Mean squared error of an affine predictor."""

    classifies = False

    def __init__(self, num_features: int):
        self.num_features = int(num_features)
        self.param_dim = self.num_features + 1

    def loss_and_grad(self, w, data):
        w = self._check(w, data)
        X, y = data.features, data.labels
        resid = X @ w[:-1] + w[-1] - y
        n = len(y)
        g = np.empty_like(w)
        g[:-1] = 2.0 * (X.T @ resid) / n
        g[-1] = 2.0 * resid.sum() / n
        return float(np.mean(resid**2)), g


class LogisticRegression(LossModel):
    """Multinomial logistic regression with mean cross-entropy."""

    def __init__(self, num_features: int, num_classes: int):
        if num_classes < 2:
            raise InvalidInputError("need at least 2 classes")
        self.num_features = int(num_features)
        self.num_classes = int(num_classes)
        self.param_dim = self.num_classes * (self.num_features + 1)

    def unpack(self, w):
        C, r = self.num_classes, self.num_features
        return w[: C * r].reshape(C, r), w[C * r :]

    def scores(self, w, X):
        Wc, b = self.unpack(w)
        return X @ Wc.T + b

    def loss_and_grad(self, w, data):
        w = self._check(w, data)
        loss, dlog = _xent_and_dlogits(self.scores(w, data.features), data.labels)
        gW = dlog.T @ data.features
        gb = dlog.sum(axis=0)
        return loss, np.concatenate([gW.ravel(), gb])


class MLP(LossModel):
    """One tanh hidden layer followed by a softmax output layer."""

    def __init__(self, num_features: int, hidden: int, num_classes: int):
        if num_classes < 2:
            raise InvalidInputError("need at least 2 classes")
        if hidden < 1:
            raise InvalidInputError("hidden width must be >= 1")
        self.num_features = int(num_features)
        self.hidden = int(hidden)
        self.num_classes = int(num_classes)
        r, h, C = self.num_features, self.hidden, self.num_classes
        self.param_dim = h * (r + 1) + C * (h + 1)

    def unpack(self, w):
        r, h, C = self.num_features, self.hidden, self.num_classes
        o = 0
        W1 = w[o : o + h * r].reshape(h, r); o += h * r
        b1 = w[o : o + h]; o += h
        W2 = w[o : o + C * h].reshape(C, h); o += C * h
        b2 = w[o : o + C]
        return W1, b1, W2, b2

    def scores(self, w, X):
        W1, b1, W2, b2 = self.unpack(w)
        return np.tanh(X @ W1.T + b1) @ W2.T + b2

    def loss_and_grad(self, w, data):
        w = self._check(w, data)
        W1, b1, W2, b2 = self.unpack(w)
        X = data.features
        H = np.tanh(X @ W1.T + b1)
        loss, dlog = _xent_and_dlogits(H @ W2.T + b2, data.labels)
        gW2 = dlog.T @ H
        gb2 = dlog.sum(axis=0)
        dpre = (dlog @ W2) * (1.0 - H**2)
        gW1 = dpre.T @ X
        gb1 = dpre.sum(axis=0)
        return loss, np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])


def loss(model: LossModel, w, data: LabeledDataset | None) -> float:
    return model.loss(w, data)


def grad(model: LossModel, w, data: LabeledDataset | None) -> np.ndarray:
    return model.grad(w, data)


def accuracy(model: LossModel, w, data: LabeledDataset) -> float:
    """Fraction of samples whose argmax score equals the label (ties go to the lowest class)."""
    return model.accuracy(w, data)
