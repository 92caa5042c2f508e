"""Differentiable numeric core shared by the segmentation and prediction nets.

Tensors are plain ``numpy.ndarray`` objects laid out channel-first: the last
three axes are always ``(C, H, W)`` and any leading axes are batch/time.  Every
differentiable op comes as a forward function plus an explicit ``*_backward``
that takes the upstream gradient and whatever the forward saved.  There is no
graph tracing; the two networks wire their own backward passes.

Ops preserve the dtype of their inputs, so float32 is used for training and
float64 for gradient checking.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CE_CLAMP = 1e-7


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


class NumericError(ArithmeticError):
    """Raised when a computation produces a non-finite value."""


class RngStream:
    """Seeded random stream backed by numpy's PCG64 bit generator.

    PCG64 yields the same bit stream on every platform for a given seed, so
    draws made through this wrapper are reproducible across machines.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low, high, shape, dtype=np.float64) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(dtype, copy=False)

    def normal(self, shape, scale=1.0, dtype=np.float64) -> np.ndarray:
        return (self._gen.standard_normal(size=shape) * scale).astype(dtype, copy=False)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def random(self, shape=None) -> np.ndarray:
        return self._gen.random(size=shape)

    def choice(self, a, size, replace=False):
        return self._gen.choice(a, size=size, replace=replace)

    def child(self, key: int) -> "RngStream":
        """Derive an independent stream, e.g. one per tile or per layer."""
        seq = np.random.SeedSequence([self.seed, int(key)])
        return RngStream(int(seq.generate_state(1, dtype=np.uint64)[0]))


@dataclass
class Parameter:
    """A learnable tensor with its gradient and optimizer state."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    m: np.ndarray = field(init=False)  # first moment / velocity
    v: np.ndarray = field(init=False)  # second moment
    t: int = field(init=False, default=0)

    def __post_init__(self):
        self.value = np.asarray(self.value)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0

    def astype(self, dtype) -> None:
        self.value = self.value.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.m = self.m.astype(dtype)
        self.v = self.v.astype(dtype)


# ----------------------------------------------------------------------------
# convolution


def _as4d(x: np.ndarray) -> tuple[np.ndarray, tuple]:
    lead = x.shape[:-3]
    return x.reshape((-1,) + x.shape[-3:]), lead


def conv2d(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Same-padded 2D cross-correlation (no kernel flip).

    ``x`` is ``[..., Cin, H, W]``, ``kernels`` is ``[Cout, Cin, kh, kw]`` with odd
    kh, kw, ``bias`` is ``[Cout]``.  Output is ``[..., Cout, H, W]``.
    """
    if kernels.ndim != 4:
        raise ShapeError(f"kernels must be [Cout, Cin, kh, kw], got {kernels.shape}")
    cout, cin, kh, kw = kernels.shape
    if x.ndim < 3 or x.shape[-3] != cin:
        raise ShapeError(f"input {x.shape} does not match kernels {kernels.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel spatial size must be odd, got {kernels.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias {bias.shape} does not match kernels {kernels.shape}")
    x4, lead = _as4d(x)
    ph, pw = kh // 2, kw // 2
    if kh == 1 and kw == 1:
        out = np.einsum("nchw,oc->nohw", x4, kernels[:, :, 0, 0], optimize=True)
    else:
        xp = np.pad(x4, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # n c h w i j
        out = np.tensordot(cols, kernels, axes=([1, 4, 5], [1, 2, 3]))  # n h w o
        out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=np.result_type(x, kernels))
    return out.reshape(lead + out.shape[1:])


def conv2d_backward(upstream: np.ndarray, x: np.ndarray, kernels: np.ndarray):
    """Gradients of :func:`conv2d` w.r.t. input, kernels and bias."""
    cout, cin, kh, kw = kernels.shape
    expected = x.shape[:-3] + (cout,) + x.shape[-2:]
    if upstream.shape != expected:
        raise ShapeError(f"upstream {upstream.shape} does not match forward output {expected}")
    g4, _ = _as4d(upstream)
    x4, _ = _as4d(x)
    ph, pw = kh // 2, kw // 2
    grad_bias = g4.sum(axis=(0, 2, 3))
    if kh == 1 and kw == 1:
        grad_k = np.einsum("nohw,nchw->oc", g4, x4, optimize=True)[:, :, None, None]
    else:
        xp = np.pad(x4, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))
        grad_k = np.tensordot(g4, cols, axes=([0, 2, 3], [0, 2, 3]))  # o c i j
    # input gradient is a same-padded correlation with the flipped, transposed kernel
    flipped = np.ascontiguousarray(kernels[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    grad_x = conv2d(upstream, flipped)
    return grad_x, grad_k.astype(kernels.dtype, copy=False), grad_bias


# ----------------------------------------------------------------------------
# activations


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


_FORWARD = {"sigmoid": sigmoid, "tanh": np.tanh, "relu": relu}


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    try:
        return _FORWARD[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


def activation_backward(upstream: np.ndarray, x: np.ndarray, y: np.ndarray, kind: str) -> np.ndarray:
    """Backward of :func:`activation`; ``x`` is the input, ``y`` the output."""
    if kind == "sigmoid":
        return upstream * y * (1 - y)
    if kind == "tanh":
        return upstream * (1 - y * y)
    if kind == "relu":
        return upstream * (x > 0)
    raise ValueError(f"unknown activation {kind!r}")


# ----------------------------------------------------------------------------
# batch normalization


@dataclass
class BNCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    mean: np.ndarray
    var: np.ndarray


def _bn_axes(x: np.ndarray) -> tuple[int, ...]:
    return tuple(i for i in range(x.ndim) if i != x.ndim - 3)


def _bcast(v: np.ndarray) -> np.ndarray:
    # channel axis is always -3, so [C] -> [C, 1, 1] broadcasts against [..., C, H, W]
    return v.reshape((-1, 1, 1))


def batch_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5,
               stats: tuple[np.ndarray, np.ndarray] | None = None):
    """Per-channel normalization over every axis except the channel axis (-3).

    Uses the batch statistics unless ``stats=(mean, var)`` is given.  Returns
    ``(y, cache)``.
    """
    if x.ndim < 3:
        raise ShapeError(f"batch_norm expects [..., C, H, W], got {x.shape}")
    c = x.shape[-3]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma {gamma.shape} / beta {beta.shape} do not match {c} channels of {x.shape}")
    axes = _bn_axes(x)
    if stats is None:
        mean = x.mean(axis=axes)
        var = ((x - _bcast(mean)) ** 2).mean(axis=axes)
    else:
        mean, var = stats
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - _bcast(mean)) * _bcast(inv_std)
    y = _bcast(gamma) * xhat + _bcast(beta)
    return y.astype(x.dtype, copy=False), BNCache(xhat, inv_std, gamma, mean, var)


def batch_norm_backward(upstream: np.ndarray, cache: BNCache):
    """Returns ``(grad_x, grad_gamma, grad_beta)`` for batch-statistics mode."""
    axes = _bn_axes(upstream)
    n = upstream.size // upstream.shape[-3]
    xhat = cache.xhat
    grad_gamma = (upstream * xhat).sum(axis=axes)
    grad_beta = upstream.sum(axis=axes)
    g = upstream * _bcast(cache.gamma)
    grad_x = _bcast(cache.inv_std) * (
        g - _bcast(g.sum(axis=axes) / n)
        - xhat * _bcast((g * xhat).sum(axis=axes) / n))
    return grad_x.astype(upstream.dtype, copy=False), grad_gamma, grad_beta


# ----------------------------------------------------------------------------
# losses


def cross_entropy_loss(pred: np.ndarray, target: np.ndarray, delta: float = CE_CLAMP) -> float:
    """Mean per-pixel Bernoulli cross-entropy; ``pred`` is clamped to [delta, 1-delta]."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} and target {target.shape} differ")
    p = np.clip(pred.astype(np.float64), delta, 1 - delta)
    t = target.astype(np.float64)
    return float(-np.mean(t * np.log(p) + (1 - t) * np.log1p(-p)))


def cross_entropy_backward(pred: np.ndarray, target: np.ndarray, delta: float = CE_CLAMP) -> np.ndarray:
    """Gradient of :func:`cross_entropy_loss` w.r.t. ``pred`` (zero where clamped)."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} and target {target.shape} differ")
    inside = (pred > delta) & (pred < 1 - delta)
    p = np.clip(pred, delta, 1 - delta)
    g = (p - target) / (p * (1 - p)) / pred.size
    return np.where(inside, g, 0).astype(pred.dtype, copy=False)


def sigmoid_cross_entropy_backward(prob: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Gradient of the mean cross-entropy w.r.t. the logits behind ``prob``.

    Equals ``cross_entropy_backward * sigmoid'`` wherever the clamp is inactive
    but stays well conditioned when the sigmoid saturates.
    """
    return ((prob - target) / prob.size).astype(prob.dtype, copy=False)


# ----------------------------------------------------------------------------
# init and optimizers


def xavier_init(shape: Sequence[int], fan_in: int, fan_out: int, rng: RngStream,
                dtype=np.float32) -> np.ndarray:
    """Uniform Glorot init on ``[-a, a]`` with ``a = sqrt(6 / (fan_in + fan_out))``."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fan_in and fan_out must be >= 1, got {fan_in}, {fan_out}")
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, tuple(shape)).astype(dtype)


def conv_fans(shape: Sequence[int]) -> tuple[int, int]:
    cout, cin, kh, kw = shape
    return cin * kh * kw, cout * kh * kw


def sgd_momentum_step(p: Parameter, lr: float = 0.1, momentum: float = 0.9) -> None:
    """Heavy-ball update: ``v <- momentum*v + grad``; ``value <- value - lr*v``."""
    p.m *= momentum
    p.m += p.grad
    p.value -= lr * p.m


def adam_step(p: Parameter, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, t: int | None = None) -> None:
    """Bias-corrected Adam update.  ``t`` defaults to the parameter's own step count."""
    if t is None:
        p.t += 1
        t = p.t
    if t < 1:
        raise ValueError("adam step index must be >= 1")
    g = p.grad
    p.m *= beta1
    p.m += (1 - beta1) * g
    p.v *= beta2
    p.v += (1 - beta2) * g * g
    m_hat = p.m / (1 - beta1 ** t)
    v_hat = p.v / (1 - beta2 ** t)
    p.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.dtype, copy=False)


class SGDMomentum:
    def __init__(self, params: Iterable[Parameter], lr: float = 0.1, momentum: float = 0.9):
        if lr <= 0 or not 0 <= momentum < 1:
            raise ValueError(f"invalid SGD settings lr={lr} momentum={momentum}")
        self.params = list(params)
        self.lr, self.momentum = lr, momentum

    def step(self):
        for p in self.params:
            sgd_momentum_step(p, self.lr, self.momentum)


class Adam:
    def __init__(self, params: Iterable[Parameter], lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0

    def step(self):
        self.t += 1
        for p in self.params:
            adam_step(p, self.lr, self.beta1, self.beta2, self.eps, self.t)


# ----------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f: Callable[[], float], params: Sequence[Parameter], h: float = 1e-5,
                      floor: float | None = None, loss: Callable[[], float] | None = None) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``f`` must run forward and backward, leaving analytic gradients in each
    ``Parameter.grad``, and return the scalar loss.  Parameters should be
    float64.  The relative error of each element is
    ``|a - n| / max(|a|, |n|, floor)``.

    By default ``floor = 1e-5 * max(|loss|, 1)``: the ratio is then unchanged
    when the loss is rescaled, and gradients that are exactly zero (e.g. a
    bias feeding a normalization) are compared in absolute terms instead of
    turning the difference quotient's rounding noise into a 100% error.

    ``loss``, if given, is a forward-only version of ``f`` used for the
    perturbed evaluations; it must return the same value as ``f``.
    """
    for p in params:
        p.zero_grad()
    base = f()
    if not np.isfinite(base):
        raise NumericError(f"loss is not finite: {base}")
    analytic = [p.grad.copy() for p in params]
    if floor is None:
        floor = 1e-5 * max(abs(float(base)), 1.0)
    probe = loss or f
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = probe()
            flat[i] = old - h
            fm = probe()
            flat[i] = old
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"loss is not finite near {p.name}[{i}]")
            num = (fp - fm) / (2 * h)
            ana = a.reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    # leave the analytic gradient at the unperturbed point
    for p, a in zip(params, analytic):
        p.grad[...] = a
    return worst
