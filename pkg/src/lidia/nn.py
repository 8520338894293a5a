"""Dense numerics with hand-scheduled reverse-mode gradients.

Only the vocabulary the denoiser needs: separable linear (SL) layers, fully
connected layers, ReLU, batch normalisation, Adam and SGD.  Layers operate on
batches with a leading location axis, e.g. ``(L, rows, cols)``; parameter
gradients are summed over that axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    pass


class Tensor:
    """A parameter array with a gradient slot of the same shape."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class SLParams(NamedTuple):
    W1: np.ndarray  # (out_rows, in_rows)
    W2: np.ndarray  # (in_cols, out_cols)
    B: np.ndarray  # (out_rows, out_cols)


# ------------------------------------------------------------ functional ops


def sl_forward(Z, p: SLParams):
    """W1 Z W2 + B; ``Z`` may carry leading batch axes."""
    W1, W2, B = p
    if Z.shape[-2] != W1.shape[1] or Z.shape[-1] != W2.shape[0] or B.shape != (W1.shape[0], W2.shape[1]):
        raise ValueError(
            f"SL shape mismatch: Z {Z.shape}, W1 {W1.shape}, W2 {W2.shape}, B {B.shape}"
        )
    return np.matmul(np.matmul(W1, Z), W2) + B


def sl_backward(upstream, Z, p: SLParams):
    """Gradients ``(dZ, dW1, dW2, dB)`` of W1 Z W2 + B, summed over batch axes."""
    W1, W2, _ = p
    G = np.matmul(upstream, W2.T)  # d(W1 Z)
    dZ = np.matmul(W1.T, G)
    lead = tuple(range(upstream.ndim - 2))
    dW1 = np.tensordot(G, Z, axes=(lead + (upstream.ndim - 1,), lead + (Z.ndim - 1,)))
    A = np.matmul(W1, Z)
    dW2 = np.tensordot(A, upstream, axes=(lead + (A.ndim - 2,), lead + (upstream.ndim - 2,)))
    dB = upstream.sum(axis=lead) if lead else upstream.copy()
    return dZ, dW1, dW2, dB


def relu(x):
    return np.maximum(x, 0)


def relu_backward(upstream, x):
    return upstream * (x > 0)


def fc_forward(x, W, b):
    """y = W x + b over the last axis of ``x``."""
    if x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ValueError(f"FC shape mismatch: x {x.shape}, W {W.shape}, b {b.shape}")
    return x @ W.T + b


def fc_backward(upstream, x, W):
    lead = tuple(range(x.ndim - 1))
    dx = upstream @ W
    dW = np.tensordot(upstream, x, axes=(lead, lead))
    db = upstream.sum(axis=lead) if lead else upstream.copy()
    return dx, dW, db


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64):
        return cls(
            np.ones(channels, dtype), np.zeros(channels, dtype), np.zeros(channels, dtype), np.ones(channels, dtype)
        )


def _bn_axes(x):
    return (0,) + tuple(range(2, x.ndim))


def _bn_shape(x):
    return (1, -1) + (1,) * (x.ndim - 2)


def batchnorm_forward(x, state: BatchNormState, training: bool, *, update: bool = True):
    """Per-channel normalisation; channel axis 1, statistics pooled over all other axes.

    Returns ``(y, cache)``.  In training mode the running statistics are
    updated in place (unbiased batch variance) unless ``update`` is False.
    """
    axes, shp = _bn_axes(x), _bn_shape(x)
    count = x.size // x.shape[1]
    if training:
        if count < 2:
            raise ValueError("batch norm in training mode needs at least 2 columns per channel")
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        if update:
            m = state.momentum
            state.running_mean[...] = (1 - m) * state.running_mean + m * mu
            state.running_var[...] = (1 - m) * state.running_var + m * var * count / (count - 1)
    else:
        mu, var = state.running_mean, state.running_var
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x - mu.reshape(shp)) * inv.reshape(shp)
    y = xhat * state.gamma.reshape(shp) + state.beta.reshape(shp)
    return y, (xhat, inv, training)


def batchnorm_backward(upstream, cache, state: BatchNormState):
    """Returns ``(dx, dgamma, dbeta)``; the batch-statistics coupling is included in training mode."""
    xhat, inv, training = cache
    axes, shp = _bn_axes(xhat), _bn_shape(xhat)
    dgamma = (upstream * xhat).sum(axis=axes)
    dbeta = upstream.sum(axis=axes)
    g = state.gamma.reshape(shp) * inv.reshape(shp)
    if not training:
        return upstream * g, dgamma, dbeta
    count = xhat.size // xhat.shape[1]
    dx = g / count * (count * upstream - dbeta.reshape(shp) - xhat * dgamma.reshape(shp))
    return dx, dgamma, dbeta


# -------------------------------------------------------------------- layers


class SeparableLinear:
    def __init__(self, W1: Tensor, W2: Tensor, B: Tensor):
        self.W1, self.W2, self.B = W1, W2, B
        self._Z = None

    @property
    def params(self) -> SLParams:
        return SLParams(self.W1.data, self.W2.data, self.B.data)

    def forward(self, Z, cache: bool = True):
        if cache:
            self._Z = Z
        return sl_forward(Z, self.params)

    def backward(self, upstream):
        if self._Z is None:
            raise RuntimeError("SL backward called without a cached forward")
        dZ, dW1, dW2, dB = sl_backward(upstream, self._Z, self.params)
        self.W1.grad += dW1
        self.W2.grad += dW2
        self.B.grad += dB
        return dZ


class FullyConnected:
    def __init__(self, W: Tensor, b: Tensor):
        self.W, self.b = W, b
        self._x = None

    def forward(self, x, cache: bool = True):
        if cache:
            self._x = x
        return fc_forward(x, self.W.data, self.b.data)

    def backward(self, upstream):
        dx, dW, db = fc_backward(upstream, self._x, self.W.data)
        self.W.grad += dW
        self.b.grad += db
        return dx


class BatchNorm:
    """Batch norm whose affine parameters are Tensors and running stats plain buffers."""

    def __init__(self, gamma: Tensor, beta: Tensor, running_mean, running_var, eps=1e-5, momentum=0.1):
        self.gamma, self.beta = gamma, beta
        self.running_mean, self.running_var = running_mean, running_var
        self.eps, self.momentum = eps, momentum
        self._cache = None

    def _state(self):
        return BatchNormState(self.gamma.data, self.beta.data, self.running_mean, self.running_var, self.eps, self.momentum)

    def forward(self, x, training: bool, cache: bool = True, update: bool = True):
        y, c = batchnorm_forward(x, self._state(), training, update=update)
        if cache:
            self._cache = c
        return y

    def backward(self, upstream):
        dx, dg, db = batchnorm_backward(upstream, self._cache, self._state())
        self.gamma.grad += dg
        self.beta.grad += db
        return dx


# ---------------------------------------------------------------- optimizers


@dataclass
class OptimizerState:
    kind: str  # "adam" or "sgd"
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")


def optimizer_step(params: dict, grads: dict, state: OptimizerState) -> tuple[dict, OptimizerState]:
    """One Adam (bias-corrected) or SGD+momentum step.

    Pure: returns new parameter arrays and a new state; inputs are untouched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteGradientError(f"gradient of {name!r} has {bad} non-finite entries")
    t = state.step + 1
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        if state.kind == "adam":
            m = state.beta1 * state.m.get(name, 0.0) + (1 - state.beta1) * g
            v = state.beta2 * state.v.get(name, 0.0) + (1 - state.beta2) * g * g
            mhat = m / (1 - state.beta1**t)
            vhat = v / (1 - state.beta2**t)
            new_params[name] = (p - state.learning_rate * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)
            m_new[name], v_new[name] = m, v
        else:
            buf = state.momentum * state.m.get(name, 0.0) + g
            new_params[name] = (p - state.learning_rate * buf).astype(p.dtype)
            m_new[name] = buf
    new_state = OptimizerState(
        state.kind, state.learning_rate, state.beta1, state.beta2, state.eps, state.momentum, t, m_new, v_new
    )
    return new_params, new_state


# ---------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict  # tensor name -> relative error
    max_error: float = 0.0
    failures: list = field(default_factory=list)
    skipped: int = 0  # coordinates whose perturbation crossed a ReLU kink

    @property
    def passed(self) -> bool:
        return not self.failures

    def __str__(self):
        status = "PASS" if self.passed else "FAIL " + ", ".join(self.failures)
        return f"max rel err {self.max_error:.3e} (tol {self.tolerance:g}, {self.skipped} kink coords skipped) {status}"


def relative_error(analytic, numeric, zero_atol: float = 1e-8) -> float:
    """||a - n|| / max(||a||, ||n||).

    Gradients that are structurally zero (a bias feeding batch norm) have no
    meaningful relative error; when both norms are below ``zero_atol`` the
    pair counts as agreeing and 0 is returned.
    """
    a = np.asarray(analytic, np.float64).ravel()
    n = np.asarray(numeric, np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < zero_atol:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def grad_check(
    loss_fn: Callable[[], float],
    grad_fn: Callable[[], dict],
    params: dict,
    tolerance: float,
    *,
    h: float = 1e-5,
    max_coords: int | None = 200,
    seed: int = 0,
    signature_fn: Callable[[], bytes] | None = None,
) -> GradCheckReport:
    """Central-difference check of ``grad_fn`` against ``loss_fn``.

    ``params`` maps names to float64 arrays that ``loss_fn`` reads; they are
    perturbed in place and restored.  Tensors larger than ``max_coords`` are
    checked on a random coordinate subset.  ``signature_fn``, called after a
    ``loss_fn`` evaluation, identifies the active piece of a piecewise-smooth
    function (e.g. ReLU masks); coordinates whose +-h perturbation changes it
    are skipped, since central differences are meaningless across a kink.
    """
    analytic = grad_fn()
    base = None
    if signature_fn is not None:
        loss_fn()
        base = signature_fn()
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance, {})
    for name, arr in params.items():
        if arr.dtype != np.float64:
            raise TypeError(f"gradient checking needs float64, {name!r} is {arr.dtype}")
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ValueError(f"parameter {name!r} must be contiguous")
        order = np.arange(flat.size)
        limit = flat.size
        if max_coords is not None and flat.size > max_coords:
            order = rng.permutation(flat.size)
            limit = max_coords
        coords, numeric = [], []
        for c in order:
            if len(coords) == limit:
                break
            old = flat[c]
            flat[c] = old + h
            fp = loss_fn()
            smooth = base is None or signature_fn() == base
            flat[c] = old - h
            fm = loss_fn()
            smooth = smooth and (base is None or signature_fn() == base)
            flat[c] = old
            if not smooth:
                report.skipped += 1
                continue
            coords.append(c)
            numeric.append((fp - fm) / (2 * h))
        if not coords:
            report.errors[name] = float("nan")
            report.failures.append(name)
            continue
        err = relative_error(np.asarray(analytic[name]).reshape(-1)[coords], np.asarray(numeric))
        report.errors[name] = err
        report.max_error = max(report.max_error, err)
        if not err < tolerance:
            report.failures.append(name)
    return report
