"""Global-model families with closed-form loss and gradient.

Three kinds are supported:

* ``logreg``: L2-regularized multinomial logistic regression. With l2 > 0
  the loss is l2-strongly convex and L-smooth, which the convergence-bound
  checks rely on.
* ``mlp``: one ReLU hidden layer with softmax output (non-convex).
* ``ridge``: one-hot least squares. Its loss is quadratic, so each
  client's Hessian is a constant matrix; this is the model used when the
  recovery engine needs exact Hessian-vector products.

Parameters are flat float64 vectors. Layouts:
  logreg/ridge: [W.ravel() (C x F), b (C)]
  mlp:          [W1.ravel() (H x F), b1 (H), W2.ravel() (C x H), b2 (C)]
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import RngStream, as_vector

KINDS = ("logreg", "mlp", "ridge")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int
    hidden: int = 0
    l2: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1 or self.num_classes < 2:
            raise ValueError("need input_dim >= 1 and num_classes >= 2")
        if self.kind == "mlp" and self.hidden < 1:
            raise ValueError("mlp needs hidden >= 1")
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")

    @property
    def param_dim(self) -> int:
        f, c, h = self.input_dim, self.num_classes, self.hidden
        if self.kind == "mlp":
            return (f + 1) * h + (h + 1) * c
        return (f + 1) * c

    @property
    def is_quadratic(self) -> bool:
        return self.kind == "ridge"


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError("batch inputs must be a nonempty 2-D array")
        if y.shape != (x.shape[0],):
            raise ValueError("labels must be 1-D and match the batch size")
        if not np.all(np.isfinite(x)):
            raise ValueError("batch inputs contain non-finite values")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


def _check_batch(spec: ModelSpec, batch: Batch) -> None:
    if batch.inputs.shape[1] != spec.input_dim:
        raise ValueError(
            f"batch feature dim {batch.inputs.shape[1]} != spec input_dim {spec.input_dim}"
        )
    if np.any(batch.labels < 0) or np.any(batch.labels >= spec.num_classes):
        raise ValueError("labels out of range")


def _check_params(spec: ModelSpec, w: np.ndarray) -> np.ndarray:
    w = as_vector(w, name="params")
    if w.size != spec.param_dim:
        raise ValueError(f"param dim {w.size} != expected {spec.param_dim}")
    return w


def _split_linear(spec: ModelSpec, w: np.ndarray):
    f, c = spec.input_dim, spec.num_classes
    W = w[: c * f].reshape(c, f)
    b = w[c * f :]
    return W, b


def _split_mlp(spec: ModelSpec, w: np.ndarray):
    f, c, h = spec.input_dim, spec.num_classes, spec.hidden
    o = 0
    W1 = w[o : o + h * f].reshape(h, f)
    o += h * f
    b1 = w[o : o + h]
    o += h
    W2 = w[o : o + c * h].reshape(c, h)
    o += c * h
    b2 = w[o : o + c]
    return W1, b1, W2, b2


def scores(spec: ModelSpec, w, inputs: np.ndarray) -> np.ndarray:
    """Class scores (logits) for a 2-D input array."""
    w = _check_params(spec, w)
    x = np.asarray(inputs, dtype=np.float64)
    if spec.kind == "mlp":
        W1, b1, W2, b2 = _split_mlp(spec, w)
        a1 = np.maximum(x @ W1.T + b1, 0.0)
        return a1 @ W2.T + b2
    W, b = _split_linear(spec, w)
    return x @ W.T + b


def _log_softmax(s: np.ndarray) -> np.ndarray:
    shifted = s - s.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss(spec: ModelSpec, w, batch: Batch) -> float:
    """Mean per-example loss plus (l2/2) * ||w||^2."""
    w = _check_params(spec, w)
    _check_batch(spec, batch)
    s = scores(spec, w, batch.inputs)
    n = batch.size
    if spec.kind == "ridge":
        target = np.zeros_like(s)
        target[np.arange(n), batch.labels] = 1.0
        data_term = 0.5 * float(np.sum((s - target) ** 2)) / n
    else:
        logp = _log_softmax(s)
        data_term = -float(logp[np.arange(n), batch.labels].mean())
    return data_term + 0.5 * spec.l2 * float(w @ w)


def gradient(spec: ModelSpec, w, batch: Batch) -> np.ndarray:
    """Analytic gradient of :func:`loss` with respect to w."""
    w = _check_params(spec, w)
    _check_batch(spec, batch)
    x = batch.inputs
    n = batch.size
    s = scores(spec, w, x)
    if spec.kind == "ridge":
        err = s.copy()
        err[np.arange(n), batch.labels] -= 1.0
        err /= n
    else:
        shifted = s - s.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        err = e / e.sum(axis=1, keepdims=True)
        err[np.arange(n), batch.labels] -= 1.0
        err /= n

    if spec.kind == "mlp":
        W1, b1, W2, b2 = _split_mlp(spec, w)
        z1 = x @ W1.T + b1
        a1 = np.maximum(z1, 0.0)
        gW2 = err.T @ a1
        gb2 = err.sum(axis=0)
        back = (err @ W2) * (z1 > 0.0)
        gW1 = back.T @ x
        gb1 = back.sum(axis=0)
        g = np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])
    else:
        gW = err.T @ x
        gb = err.sum(axis=0)
        g = np.concatenate([gW.ravel(), gb])
    return g + spec.l2 * w


def predict(spec: ModelSpec, w, inputs) -> np.ndarray | int:
    """Argmax class per input; ties break toward the lowest class index.

    Accepts a single 1-D input (returns an int) or a 2-D batch (returns an
    int64 array).
    """
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != spec.input_dim:
        raise ValueError(f"input dim {x.shape[1]} != spec input_dim {spec.input_dim}")
    labels = np.argmax(scores(spec, w, x), axis=1).astype(np.int64)
    return int(labels[0]) if single else labels


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Initial parameter vector.

    Linear models start at zero. The MLP uses per-layer uniform(-a, a)
    with a = sqrt(6 / (fan_in + fan_out)) for weights and zero biases,
    drawn from RngStream(seed).
    """
    if spec.kind != "mlp":
        return np.zeros(spec.param_dim)
    f, c, h = spec.input_dim, spec.num_classes, spec.hidden
    rng = RngStream(seed)
    a1 = np.sqrt(6.0 / (f + h))
    a2 = np.sqrt(6.0 / (h + c))
    W1 = (rng.uniforms(h * f) * 2.0 - 1.0) * a1
    W2 = (rng.uniforms(c * h) * 2.0 - 1.0) * a2
    return np.concatenate([W1, np.zeros(h), W2, np.zeros(c)])


def glorot_bound(spec: ModelSpec, layer: int) -> float:
    """Uniform-init bound a for the given mlp layer (1 or 2)."""
    if spec.kind != "mlp":
        raise ValueError("glorot_bound applies to mlp specs only")
    if layer == 1:
        return float(np.sqrt(6.0 / (spec.input_dim + spec.hidden)))
    if layer == 2:
        return float(np.sqrt(6.0 / (spec.hidden + spec.num_classes)))
    raise ValueError("layer must be 1 or 2")


def smoothness_bound(spec: ModelSpec, inputs: np.ndarray) -> float:
    """Upper bound on the smoothness constant L of the loss over the given
    inputs (bias feature included). Only meaningful for the convex kinds.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if spec.kind == "logreg":
        # softmax Jacobian has spectral norm <= 1/2
        max_sq = float(np.max(np.sum(x * x, axis=1))) + 1.0
        return spec.l2 + 0.5 * max_sq
    if spec.kind == "ridge":
        xt = np.hstack([x, np.ones((x.shape[0], 1))])
        m = xt.T @ xt / x.shape[0]
        return spec.l2 + float(np.linalg.eigvalsh(m)[-1])
    raise ValueError("smoothness bound is not available for non-convex kinds")


def quadratic_hessian(spec: ModelSpec, inputs: np.ndarray) -> np.ndarray:
    """Explicit (d x d) Hessian of the ridge loss on the given inputs.

    The ridge loss is quadratic, so this matrix is exact and constant in w.
    Raises for non-quadratic specs.
    """
    if not spec.is_quadratic:
        raise ValueError("explicit Hessian is only defined for the quadratic (ridge) kind")
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError("inputs must be 2-D with spec.input_dim columns")
    n, f = x.shape
    c = spec.num_classes
    xt = np.hstack([x, np.ones((n, 1))])
    m = xt.T @ xt / n  # (f+1) x (f+1)
    d = spec.param_dim
    h = np.zeros((d, d))
    for cls in range(c):
        wsl = slice(cls * f, (cls + 1) * f)
        bix = c * f + cls
        h[wsl, wsl] = m[:f, :f]
        h[wsl, bix] = m[:f, f]
        h[bix, wsl] = m[f, :f]
        h[bix, bix] = m[f, f]
    h += spec.l2 * np.eye(d)
    return h
