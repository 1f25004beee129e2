"""Multinomial logistic regression on a synthetic Gaussian-mixture task.

This is the desk-scale stand-in for the image models: convex, cheap, and its
gradient is easy to check against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NonFiniteGradient


@dataclass(frozen=True)
class SyntheticTaskParams:
    """Class ``c`` is centred at ``c * spacing * u`` with ``u`` the normalised all-ones vector."""

    num_classes: int = 4
    feature_dim: int = 8
    spacing: float = 1.0
    noise_std: float = 1.0
    test_set_size: int = 2000
    probe_set_size: int = 1000
    class_means: tuple | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"task.num_classes must be >= 2, got {self.num_classes!r}")
        if self.feature_dim < 1:
            raise ConfigError(f"task.feature_dim must be >= 1, got {self.feature_dim!r}")
        if not self.noise_std > 0:
            raise ConfigError(f"task.noise_std must be > 0, got {self.noise_std!r}")
        means = self.means()
        if means.shape != (self.num_classes, self.feature_dim):
            raise ConfigError("task.class_means must be num_classes x feature_dim")
        diffs = means[:, None, :] - means[None, :, :]
        dist = np.sqrt((diffs ** 2).sum(-1)) + np.eye(self.num_classes)
        if np.any(dist <= 0):
            raise ConfigError("task.class_means must be pairwise distinct")

    def means(self) -> np.ndarray:
        if self.class_means is not None:
            return np.asarray(self.class_means, dtype=float)
        u = np.ones(self.feature_dim) / np.sqrt(self.feature_dim)
        return self.spacing * np.arange(self.num_classes)[:, None] * u[None, :]


class SyntheticTask:
    """Balanced Gaussian mixture with isotropic noise."""

    def __init__(self, params: SyntheticTaskParams | None = None):
        self.params = params or SyntheticTaskParams()
        self._means = self.params.means()

    @property
    def num_classes(self):
        return self.params.num_classes

    @property
    def feature_dim(self):
        return self.params.feature_dim

    def sample(self, size: int, rng: np.random.Generator):
        y = rng.integers(self.num_classes, size=size)
        X = self._means[y] + self.params.noise_std * rng.standard_normal((size, self.feature_dim))
        return X, y


def _with_bias(X):
    return np.hstack([X, np.ones((X.shape[0], 1))])


def _softmax_rows(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def regularized_loss_and_grad(W, X, y, anchor=None, lam=0.0):
    """Mean cross-entropy plus ``lam/2 ||W - anchor||^2`` and its gradient in ``W``."""
    Xb = _with_bias(X)
    logits = Xb @ W.T
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(y))
    loss = float(np.mean(log_norm - shifted[rows, y]))
    P = np.exp(shifted - log_norm[:, None])
    P[rows, y] -= 1.0
    grad = P.T @ Xb / len(y)
    if lam:
        diff = W - anchor
        loss += 0.5 * lam * float(np.sum(diff * diff))
        grad = grad + lam * diff
    return loss, grad


def local_sgd(W, anchor, X, y, *, lam, lr, epochs, batch, rng):
    """Minibatch SGD on the proximal-regularised loss.

    Returns ``(W_end, W_start - W_end, steps)``.
    """
    W_start = np.array(W, dtype=float)
    Wc = W_start.copy()
    n = len(y)
    Xb = _with_bias(X)
    steps = 0
    # overflow shows up as inf/nan in Wc and is reported below
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(epochs):
            order = rng.permutation(n)
            for lo in range(0, n, batch):
                idx = order[lo:lo + batch]
                xb = Xb[idx]
                P = _softmax_rows(xb @ Wc.T)
                P[np.arange(len(idx)), y[idx]] -= 1.0
                g = P.T @ xb / len(idx)
                if lam:
                    g += lam * (Wc - anchor)
                Wc -= lr * g
                steps += 1
    if not np.all(np.isfinite(Wc)):
        raise NonFiniteGradient("local SGD diverged; lower eta_sgd or lambda")
    return Wc, W_start - Wc, steps


def evaluate(W, X, y):
    """Mean cross-entropy and top-1 accuracy of ``W`` on ``(X, y)``."""
    if len(y) == 0:
        raise ValueError("evaluate needs a nonempty dataset")
    logits = _with_bias(X) @ W.T
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(y))
    loss = float(np.mean(log_norm - shifted[rows, y]))
    # argmax on the shifted logits; ties go to the lowest class index
    acc = float(np.mean(np.argmax(shifted, axis=1) == y))
    return loss, acc


class SoftmaxRegression:
    """Learner used by the FL engine.

    ``local_gradient`` returns the accumulated SGD displacement divided by the
    total step size ``eta_sgd * steps``, which is the plain gradient when only
    one step is taken.
    """

    def __init__(self, task: SyntheticTask):
        self.task = task
        self.shape = (task.num_classes, task.feature_dim + 1)

    def init_params(self):
        return np.zeros(self.shape)

    def local_gradient(self, w_central, X, y, hyper, rng):
        if X is None or len(y) == 0:
            return np.zeros(self.shape)
        _, displacement, steps = local_sgd(
            w_central, w_central, X, y, lam=hyper.lam, lr=hyper.eta_sgd,
            epochs=hyper.local_epochs, batch=hyper.local_batch, rng=rng)
        if steps == 0:
            return np.zeros(self.shape)
        return displacement / (hyper.eta_sgd * steps)

    def evaluate(self, w, X, y):
        return evaluate(w, X, y)
