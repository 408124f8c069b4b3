"""Model-agnostic predictors, distillation losses and the consistency regularizer.

Every backend only has to provide a forward pass returning logits plus a
cache, and a backward pass mapping a logit gradient to parameter gradients.
Losses, the neighbourhood regularizer and the optimizer are shared.
"""

from __future__ import annotations

import copy
import logging
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .errors import EmptyDatasetError, ParameterError, ValidationError

logger = logging.getLogger(__name__)

TARGET_FLOOR = 1e-12
SIMPLEX_TOL = 1e-6

DEFAULT_LR_HARD = 1e-3
DEFAULT_LR_SOFT = 1e-4


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def apply_temperature(logits: np.ndarray, temperature: float) -> np.ndarray:
    """Temperature-scaled softmax; ``temperature == 0`` gives one-hot argmax rows."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if temperature < 0:
        raise ParameterError("temperature must be >= 0")
    if temperature == 0:
        out = np.zeros_like(logits)
        out[np.arange(logits.shape[0]), kernels.argmax_rows(logits)] = 1.0
        return out
    return softmax(logits / temperature)


def rescale_probs(probs: np.ndarray, temperature: float) -> np.ndarray:
    """Temperature-scale rows that are already probabilities."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if temperature == 0:
        return apply_temperature(probs, 0)
    return apply_temperature(np.log(np.maximum(probs, TARGET_FLOOR)), temperature)


def margin(row) -> float:
    """Top-1 minus top-2 probability of a single simplex row."""
    row = np.asarray(row, dtype=np.float64).reshape(1, -1)
    if row.shape[1] < 2:
        raise ParameterError("margin is undefined for fewer than two classes")
    return float(kernels.top2_margin(row)[0])


def check_simplex(probs: np.ndarray, tol: float = SIMPLEX_TOL) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValidationError(f"expected a 2-D matrix, got shape {probs.shape}")
    if not np.isfinite(probs).all() or (probs < 0).any():
        raise ValidationError("pseudo-label entries must be finite and nonnegative")
    bad = np.abs(probs.sum(axis=1) - 1.0) > tol
    if bad.any():
        raise ValidationError(f"row {int(np.flatnonzero(bad)[0])} does not sum to 1")
    return probs


def kl_loss(logits: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row KL(target || softmax(logits)) and its gradient w.r.t. the logits."""
    logp = log_softmax(logits)
    logt = np.log(np.maximum(targets, TARGET_FLOOR))
    loss = (targets * (logt - logp)).sum(axis=1)
    grad = np.exp(logp) * targets.sum(axis=1, keepdims=True) - targets
    return loss, grad


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    logp = log_softmax(logits)
    rows = np.arange(labels.shape[0])
    loss = -logp[rows, labels]
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return loss, grad


def pair_kl(anchor_logits: np.ndarray, moved_logits: np.ndarray):
    """KL(g(x) || g(x')) with gradients for both sides.

    Returns (loss per pair, grad w.r.t. anchor logits, grad w.r.t. moved logits).
    The anchor is not treated as a constant.
    """
    loga = log_softmax(anchor_logits)
    logb = log_softmax(moved_logits)
    pa = np.exp(loga)
    gap = loga - logb
    loss = (pa * gap).sum(axis=1)
    grad_anchor = pa * (gap - loss[:, None])
    grad_moved = np.exp(logb) - pa
    return loss, grad_anchor, grad_moved


@dataclass(frozen=True)
class RegConfig:
    """Neighbourhood sampling for the consistency regularizer.

    Neighbours are ``x + r * u`` with ``u`` a uniformly random unit direction
    and ``r ~ Uniform(0, radius]``, so every sample lies in the radius ball.
    """

    radius: float = 0.0
    num_neighbors: int = 2
    kind: str = "gaussian_ball"
    seed: int = 0

    def __post_init__(self):
        if self.radius < 0:
            raise ParameterError("radius must be >= 0")
        if self.num_neighbors < 0:
            raise ParameterError("num_neighbors must be >= 0")
        if self.kind not in ("gaussian_ball", "none"):
            raise ParameterError(f"unknown transform kind {self.kind!r}")

    @property
    def active(self) -> bool:
        return self.kind != "none" and self.num_neighbors > 0


def sample_neighbors(x: np.ndarray, cfg: RegConfig, rng: np.random.Generator) -> np.ndarray:
    """(n, F) -> (n, S, F) perturbed copies inside the radius ball."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, f = x.shape
    s = cfg.num_neighbors if cfg.active else 0
    direction = rng.standard_normal((n, s, f))
    norms = np.linalg.norm(direction, axis=2, keepdims=True)
    norms[norms == 0] = 1.0
    radius = cfg.radius * (1.0 - rng.random((n, s, 1)))
    return x[:, None, :] + direction / norms * radius


class Adam:
    def __init__(self, params: Sequence[np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class Predictor:
    """Anything that maps feature rows to class distributions and can be trained.

    Subclasses implement ``_forward``, ``_backward`` and ``params``.
    """

    num_classes: int
    feature_dim: int

    # -- backend hooks -------------------------------------------------
    def params(self) -> list[np.ndarray]:
        raise NotImplementedError

    def _forward(self, x: np.ndarray):
        raise NotImplementedError

    def _backward(self, cache, dlogits: np.ndarray) -> list[np.ndarray]:
        raise NotImplementedError

    # -- shared behaviour ----------------------------------------------
    def logits(self, x) -> np.ndarray:
        return self._forward(np.atleast_2d(np.asarray(x, dtype=np.float64)))[0]

    def predict_proba(self, x, temperature: float = 1.0) -> np.ndarray:
        return apply_temperature(self.logits(x), temperature)

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params()))

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, flat: np.ndarray):
        flat = np.asarray(flat, dtype=np.float64)
        offset = 0
        for p in self.params():
            p[...] = flat[offset : offset + p.size].reshape(p.shape)
            offset += p.size

    def copy(self) -> Predictor:
        return copy.deepcopy(self)

    def state_bytes(self) -> bytes:
        return self.get_flat().tobytes()

    # -- objectives ----------------------------------------------------
    def hard_objective(self, x, y, with_grad=True):
        logits, cache = self._forward(x)
        loss, dlogits = cross_entropy(logits, y)
        value = float(loss.mean())
        if not with_grad:
            return value, None
        return value, self._backward(cache, dlogits / x.shape[0])

    def soft_objective(self, x, targets, weights, lam, neighbors=None, with_grad=True):
        """Weighted mean of KL(target || model(x)) + lam * sum_s KL(model(x) || model(x_s)).

        ``neighbors`` has shape (n, S, F) or is None/empty for no regularizer.
        """
        n = x.shape[0]
        logits, cache = self._forward(x)
        kl, dlogits = kl_loss(logits, targets)
        w = weights / n
        total = float((weights * kl).sum() / n)
        dlogits = dlogits * w[:, None]
        grads = None
        if lam > 0 and neighbors is not None and neighbors.shape[1] > 0:
            s = neighbors.shape[1]
            moved_logits, moved_cache = self._forward(neighbors.reshape(n * s, -1))
            anchor = np.repeat(logits, s, axis=0)
            pair, g_anchor, g_moved = pair_kl(anchor, moved_logits)
            w_pair = np.repeat(w, s) * lam
            total += float((w_pair * pair).sum())
            dlogits = dlogits + (g_anchor * w_pair[:, None]).reshape(n, s, -1).sum(axis=1)
            if with_grad:
                grads = self._backward(moved_cache, g_moved * w_pair[:, None])
        if not with_grad:
            return total, None
        main = self._backward(cache, dlogits)
        if grads is not None:
            main = [a + b for a, b in zip(main, grads)]
        return total, main

    # -- training ------------------------------------------------------
    def fit_hard(self, x, y, epochs: int, lr: float = DEFAULT_LR_HARD, batch_size: int = 32,
                 rng: np.random.Generator | None = None) -> list[float]:
        """Mini-batch Adam on mean cross-entropy. Returns the full-data loss after each epoch."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = np.asarray(y, dtype=np.int64)
        if x.shape[0] == 0:
            raise EmptyDatasetError("fit_hard needs at least one example")
        if epochs <= 0:
            return []
        rng = rng if rng is not None else np.random.default_rng(0)
        err_before = self._train_error(x, y)
        opt = Adam(self.params(), lr)
        trace = []
        for _ in range(epochs):
            for idx in _batches(x.shape[0], batch_size, rng):
                _, grads = self.hard_objective(x[idx], y[idx])
                opt.step(grads)
            trace.append(self.hard_objective(x, y, with_grad=False)[0])
        err_after = self._train_error(x, y)
        if err_after > err_before:
            # only the empirical proxy of classification safety is observable
            logger.warning(
                "local update increased training error %.4f -> %.4f", err_before, err_after
            )
        return trace

    def fit_soft(self, x, targets, weights=None, lam: float = 0.0, reg: RegConfig | None = None,
                 epochs: int = 1, lr: float = DEFAULT_LR_SOFT, batch_size: int = 32,
                 rng: np.random.Generator | None = None) -> list[float]:
        """Mini-batch Adam on the distillation objective.

        Fresh neighbours are drawn every epoch from ``rng``. Returns the
        full-data objective after each epoch, evaluated on that epoch's
        neighbours.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
        if targets.shape != (x.shape[0], self.num_classes):
            raise ValidationError(
                f"targets shape {targets.shape} does not match pool ({x.shape[0]}, {self.num_classes})"
            )
        if lam < 0:
            raise ParameterError("lambda must be >= 0")
        weights = np.ones(x.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
        if weights.shape != (x.shape[0],):
            raise ValidationError("one weight per pool row is required")
        if epochs <= 0:
            return []
        reg = reg if reg is not None else RegConfig(kind="none")
        use_reg = lam > 0 and reg.active
        rng = rng if rng is not None else np.random.default_rng(reg.seed)
        opt = Adam(self.params(), lr)
        trace = []
        for _ in range(epochs):
            neighbors = sample_neighbors(x, reg, rng) if use_reg else None
            for idx in _batches(x.shape[0], batch_size, rng):
                nb = neighbors[idx] if neighbors is not None else None
                _, grads = self.soft_objective(x[idx], targets[idx], weights[idx], lam, nb)
                opt.step(grads)
            trace.append(self.soft_objective(x, targets, weights, lam, neighbors, with_grad=False)[0])
        return trace

    def _train_error(self, x, y) -> float:
        return float((kernels.argmax_rows(self.logits(x)) != y).mean())


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    step = n if batch_size <= 0 else batch_size
    for start in range(0, n, step):
        yield order[start : start + step]


def _he(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class SoftmaxRegression(Predictor):
    """Multinomial logistic regression: ``logits = x @ W.T + b``."""

    def __init__(self, feature_dim: int, num_classes: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.feature_dim, self.num_classes = feature_dim, num_classes
        self.weights = _he(rng, feature_dim, (num_classes, feature_dim))
        self.bias = np.zeros(num_classes)

    def params(self):
        return [self.weights, self.bias]

    def _forward(self, x):
        return x @ self.weights.T + self.bias, x

    def _backward(self, x, dlogits):
        return [dlogits.T @ x, dlogits.sum(axis=0)]


class MLP(Predictor):
    """One hidden ReLU layer, softmax output."""

    def __init__(self, feature_dim: int, num_classes: int, hidden: int = 32,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.feature_dim, self.num_classes, self.hidden = feature_dim, num_classes, hidden
        self.w1 = _he(rng, feature_dim, (feature_dim, hidden))
        self.b1 = np.zeros(hidden)
        self.w2 = _he(rng, hidden, (hidden, num_classes))
        self.b2 = np.zeros(num_classes)

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def _forward(self, x):
        pre = x @ self.w1 + self.b1
        h = np.maximum(pre, 0.0)
        return h @ self.w2 + self.b2, (x, pre, h)

    def _backward(self, cache, dlogits):
        x, pre, h = cache
        dh = dlogits @ self.w2.T
        dh[pre <= 0] = 0.0
        return [x.T @ dh, dh.sum(axis=0), h.T @ dlogits, dlogits.sum(axis=0)]


def build_model(kind: str, feature_dim: int, num_classes: int, rng: np.random.Generator) -> Predictor:
    """``"softmax"`` or ``"mlp"`` / ``"mlp:<hidden>"``."""
    name, _, arg = kind.partition(":")
    if name == "softmax":
        return SoftmaxRegression(feature_dim, num_classes, rng)
    if name == "mlp":
        return MLP(feature_dim, num_classes, int(arg) if arg else 32, rng)
    raise ParameterError(f"unknown model kind {kind!r}")


def predict_pseudolabels(model: Predictor, pool, temperature: float = 1.0) -> np.ndarray:
    pool = np.atleast_2d(np.asarray(pool, dtype=np.float64))
    if pool.shape[0] == 0:
        raise EmptyDatasetError("public pool is empty")
    return model.predict_proba(pool, temperature)


def regularizer_rb(model: Predictor, x, cfg: RegConfig, rng: np.random.Generator | None = None) -> float:
    """Sum over sampled neighbours x' of KL(model(x) || model(x'))."""
    if not cfg.active:
        return 0.0
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    neighbors = sample_neighbors(x, cfg, rng)
    n, s, f = neighbors.shape
    anchor = np.repeat(model.logits(x), s, axis=0)
    loss, _, _ = pair_kl(anchor, model.logits(neighbors.reshape(n * s, f)))
    return float(np.maximum(loss, 0.0).sum())


def dump_params(model: Predictor) -> bytes:
    """Shape header (u32 LE counts) followed by float32 LE parameter data."""
    arrays = model.params()
    header = struct.pack("<I", len(arrays))
    for a in arrays:
        header += struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    body = b"".join(np.asarray(a, dtype="<f4").tobytes() for a in arrays)
    return header + body


def load_params(model: Predictor, blob: bytes):
    (count,) = struct.unpack_from("<I", blob, 0)
    offset = 4
    shapes = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shapes.append(struct.unpack_from(f"<{ndim}I", blob, offset))
        offset += 4 * ndim
    params = model.params()
    if [tuple(p.shape) for p in params] != [tuple(s) for s in shapes]:
        raise ValidationError("parameter dump does not match model shapes")
    for p, shape in zip(params, shapes):
        size = int(np.prod(shape))
        p[...] = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).reshape(shape)
        offset += 4 * size
