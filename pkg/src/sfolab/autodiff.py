"""Minimal reverse-mode differentiation over dense float64 arrays.

Only the operations the operator model needs are provided.  Fields carry the
layout ``(batch, channels, *grid)``; channel-wise ops act on axis 1.

Recording happens only inside an active :class:`Tape`::

    with Tape() as tape:
        loss = rel_l2_loss(forward(x), y)
    grads = backward(loss)

Parameters are leaf tensors created with ``requires_grad=True``.  Anything
computed from them with no tape active is marked detached and may not be fed
back into a recorded graph.
"""
from __future__ import annotations

import threading

import numpy as np
from scipy.special import erf

from . import fft as _fft

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "parameter",
    "constant",
    "add",
    "scale",
    "mul",
    "channel_mix",
    "gelu",
    "sigmoid",
    "layer_norm",
    "circular_conv",
    "spectral_conv",
    "sum_all",
    "rel_l2_loss",
    "backward",
    "grad_check",
    "LN_EPS",
]

LN_EPS = 1e-5
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("value", "requires_grad", "grad", "name", "_tape", "_node", "_detached")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._tape = None
        self._node = None
        self._detached = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return self._tape is None and not self._detached

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def constant(value) -> Tensor:
    return Tensor(value)


class _Node:
    __slots__ = ("op", "parents", "backward_fn", "out")

    def __init__(self, op, parents, backward_fn, out):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.out = out


_local = threading.local()


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered list of recorded nodes; appending in execution order keeps it topological."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.closed = False

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def release(self):
        """Drop saved activations; tensors from this tape become unusable."""
        self.nodes = []
        self.closed = True


def _record(op, value, parents, backward_fn) -> Tensor:
    out = Tensor(value)
    if not any(p.requires_grad for p in parents):
        return out
    tapes = {id(p._tape): p._tape for p in parents if p._tape is not None}
    active = _active_tape()
    if len(tapes) > 1:
        raise TapeError(f"{op}: inputs come from different tapes")
    tape = next(iter(tapes.values())) if tapes else active
    if tape is None:
        out.requires_grad = True
        out._detached = True
        return out
    for p in parents:
        if p._detached:
            raise TapeError(f"{op}: input computed outside any tape (detached tensor)")
    if tape.closed:
        raise TapeError(f"{op}: input belongs to a released tape")
    if active is not None and active is not tape:
        raise TapeError(f"{op}: inputs recorded on a tape other than the active one")
    out.requires_grad = True
    out._tape = tape
    out._node = len(tape.nodes)
    tape.nodes.append(_Node(op, parents, backward_fn, out))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _shape_error(op, *shapes):
    raise ValueError(f"{op}: incompatible shapes " + ", ".join(str(tuple(s)) for s in shapes))


# ---------------------------------------------------------------- primitives

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        _shape_error("add", a.shape, b.shape)
    return _record("add", a.value + b.value, (a, b), lambda g: (g, g))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _record("scale", c * a.value, (a,), lambda g: (c * g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        _shape_error("mul", a.shape, b.shape)
    av, bv = a.value, b.value
    return _record("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def _expand(vec, ndim):
    return vec.reshape((1, -1) + (1,) * (ndim - 2))


def channel_mix(W, x, bias=None) -> Tensor:
    """Pointwise linear map over the channel axis: ``y[b,o,...] = sum_c W[o,c] x[b,c,...] + bias[o]``."""
    W, x = _as_tensor(W), _as_tensor(x)
    if W.value.ndim != 2 or x.value.ndim < 2 or W.shape[1] != x.shape[1]:
        _shape_error("channel_mix", W.shape, x.shape)
    Wv, xv = W.value, x.value
    y = np.einsum("oc,bc...->bo...", Wv, xv, optimize=True)
    parents = [W, x]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (W.shape[0],):
            _shape_error("channel_mix", W.shape, bias.shape)
        y = y + _expand(bias.value, y.ndim)
        parents.append(bias)

    def back(g):
        # BLAS packs its operands, so this long reduction does not depend on
        # array alignment the way einsum's summation loop does
        g2 = np.ascontiguousarray(np.moveaxis(g, 1, 0)).reshape(g.shape[1], -1)
        x2 = np.ascontiguousarray(np.moveaxis(xv, 1, 0)).reshape(xv.shape[1], -1)
        gW = g2 @ x2.T
        gx = np.einsum("oc,bo...->bc...", Wv, g, optimize=True)
        if bias is None:
            return gW, gx
        return gW, gx, g.sum(axis=(0,) + tuple(range(2, g.ndim)))

    return _record("channel_mix", y, tuple(parents), back)


def gelu(x) -> Tensor:
    """Exact gelu ``x * Phi(x)`` with the Gaussian CDF written via erf."""
    x = _as_tensor(x)
    xv = x.value
    cdf = 0.5 * (1.0 + erf(xv / _SQRT2))

    def back(g):
        return (g * (cdf + xv * _INV_SQRT_2PI * np.exp(-0.5 * xv * xv)),)

    return _record("gelu", xv * cdf, (x,), back)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    """Normalize over the channel axis at every grid point, then scale and shift."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    C = x.shape[1] if x.value.ndim >= 2 else -1
    if gain.shape != (C,) or bias.shape != (C,):
        _shape_error("layer_norm", x.shape, gain.shape, bias.shape)
    xv = x.value
    mu = xv.mean(axis=1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    gv = _expand(gain.value, xv.ndim)
    y = gv * xhat + _expand(bias.value, xv.ndim)
    red = (0,) + tuple(range(2, xv.ndim))

    def back(g):
        dxhat = g * gv
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _record("layer_norm", y, (x, gain, bias), back)


def _grid_axes(ndim: int, M: int) -> tuple[int, ...]:
    return tuple(range(ndim - M, ndim))


def circular_conv(x, kernel) -> Tensor:
    """Convolve every channel with one fixed real filter over the trailing grid axes.

    ``kernel`` has the grid shape; offsets wrap periodically.  The kernel is a
    constant, so only ``x`` receives a gradient (circular correlation).
    """
    x = _as_tensor(x)
    k = np.asarray(kernel.value if isinstance(kernel, Tensor) else kernel, dtype=np.float64)
    M = k.ndim
    if x.value.ndim < M or x.shape[-M:] != k.shape:
        _shape_error("circular_conv", x.shape, k.shape)
    axes = _grid_axes(x.value.ndim, M)
    khat = _fft.fft_nd(k)
    y = np.real(_fft.ifft_nd(_fft.fft_nd(x.value, axes) * khat, axes))

    def back(g):
        return (np.real(_fft.ifft_nd(_fft.fft_nd(g, axes) * np.conj(khat), axes)),)

    return _record("circular_conv", y, (x,), back)


SPECTRAL_TILE = 1 << 13   # kernel-spectrum entries per frequency tile


def spectral_conv(x, theta, spectra, weight: float = 1.0) -> Tensor:
    """Fused mode-summed convolution ``weight * sum_k theta[k] @ (phi_k * x)``.

    ``x``: (B, d_in, *grid); ``theta``: (K, d_out, d_in); ``spectra``: (K, *grid)
    complex transforms of the fixed filters.  The mode sum is formed once per
    frequency so only one forward and one inverse transform are needed.
    """
    x, theta = _as_tensor(x), _as_tensor(theta)
    spectra = np.asarray(spectra)
    M = spectra.ndim - 1
    xv, tv = x.value, theta.value
    if (tv.ndim != 3 or xv.ndim != M + 2 or spectra.shape[0] != tv.shape[0]
            or xv.shape[2:] != spectra.shape[1:] or tv.shape[2] != xv.shape[1]):
        _shape_error("spectral_conv", xv.shape, tv.shape, spectra.shape)
    B, din = xv.shape[:2]
    K, dout = tv.shape[:2]
    grid = xv.shape[2:]
    P = int(np.prod(grid))
    axes = _grid_axes(xv.ndim, M)
    S = spectra.reshape(K, P)
    T = tv.reshape(K, dout * din)
    xhat = _fft.fft_nd(xv, axes).reshape(B, din, P)
    # Frequencies are handled in tiles: the kernel spectrum of a tile,
    # khat[p] = sum_k S[k, p] theta[k], is built and used while it is in cache.
    tile = max(1, SPECTRAL_TILE // (dout * din))

    def tiles():
        for p0 in range(0, P, tile):
            sl = slice(p0, min(P, p0 + tile))
            khat = (S[:, sl].T @ T).reshape(-1, dout, din)
            xw = np.ascontiguousarray(xhat[:, :, sl].transpose(2, 1, 0))    # (t, din, B)
            yield sl, khat, xw

    yhat = np.empty((B, dout, P), dtype=np.complex128)
    for sl, khat, xw in tiles():
        yhat[:, :, sl] = np.matmul(khat, xw).transpose(2, 1, 0)
    y = weight * np.real(_fft.ifft_nd(yhat.reshape((B, dout) + grid), axes))

    def back(g):
        ghat = _fft.fft_nd(g, axes).reshape(B, dout, P)
        dxhat = np.empty((B, din, P), dtype=np.complex128)
        dT = np.zeros((K, dout * din))
        for sl, khat, xw in tiles():
            gw = np.ascontiguousarray(ghat[:, :, sl].transpose(2, 1, 0))     # (t, dout, B)
            dxhat[:, :, sl] = np.matmul(np.conj(khat.transpose(0, 2, 1)), gw).transpose(2, 1, 0)
            # A[p, o, i] = sum_b conj(ghat[b,o,p]) xhat[b,i,p]
            A = np.matmul(np.conj(gw), xw.transpose(0, 2, 1)).reshape(-1, dout * din)
            dT += np.real(S[:, sl] @ A)
        dx = weight * np.real(_fft.ifft_nd(dxhat.reshape((B, din) + grid), axes))
        return dx, (weight / P) * dT.reshape(K, dout, din)

    return _record("spectral_conv", y, (x, theta), back)


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _record("sum", np.array(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def rel_l2_loss(pred, target) -> Tensor:
    """Mean over the batch of ``||pred_i - target_i||_2 / ||target_i||_2`` (a fraction, not percent)."""
    pred = _as_tensor(pred)
    t = target.value if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        _shape_error("rel_l2_loss", pred.shape, t.shape)
    B = t.shape[0]
    diff = (pred.value - t).reshape(B, -1)
    tn = np.linalg.norm(t.reshape(B, -1), axis=1)
    if np.any(tn == 0.0):
        raise ValueError("rel_l2_loss: target with zero norm")
    dn = np.linalg.norm(diff, axis=1)
    loss = float(np.mean(dn / tn))

    def back(g):
        safe = np.where(dn > 0.0, dn, 1.0)
        coef = np.where(dn > 0.0, 1.0 / (safe * tn * B), 0.0)
        return ((g * coef[:, None] * diff).reshape(pred.shape),)

    return _record("rel_l2_loss", np.array(loss), (pred,), back)


# ---------------------------------------------------------------- reverse pass

def backward(loss: Tensor, accumulate: bool = False) -> dict:
    """Propagate d(loss) to every leaf that requires a gradient.

    Returns ``{leaf: gradient}`` and also stores the result in ``leaf.grad``
    (added to an existing gradient when ``accumulate`` is true).
    """
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._detached:
        raise TapeError("loss was computed outside any tape")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss is not attached to a tape")
    if tape.closed:
        raise TapeError("loss belongs to a released tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes[: loss._node + 1]):
        gout = grads.pop(id(node.out), None)
        if gout is None:
            continue
        gins = node.backward_fn(gout)
        for p, gp in zip(node.parents, gins):
            if not p.requires_grad:
                continue
            if p._tape is not None and p._tape is not tape:
                raise TapeError(f"{node.op}: parent from a different tape")
            if p._tape is None:
                if p._detached:
                    raise TapeError(f"{node.op}: detached tensor in graph")
                leaves[id(p)] = p
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = np.array(gp, dtype=np.float64)
    out = {}
    for key, leaf in leaves.items():
        g = grads.get(key, np.zeros_like(leaf.value))
        if accumulate and leaf.grad is not None:
            leaf.grad = leaf.grad + g
        else:
            leaf.grad = g
        out[leaf] = leaf.grad
    return out


def grad_check(op, inputs, step: float = 1e-5, seed: int = 0) -> float:
    """Compare reverse-mode gradients of ``op`` with central differences.

    ``op`` maps a list of Tensors to a Tensor.  Non-scalar outputs are reduced
    with a fixed random weighting.  Returns the largest
    ``|analytic - fd| / (|analytic| + 1e-8)`` over all input entries.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    params = [parameter(a) for a in arrays]
    with Tape():
        out = op(params)
        w = np.random.default_rng(seed).standard_normal(out.shape) if out.value.size > 1 else None
        loss = out if w is None else sum_all(mul(out, constant(w)))
    grads = backward(loss)

    def evaluate(vals):
        return op([Tensor(v) for v in vals]).value

    worst = 0.0
    for i, a in enumerate(arrays):
        analytic = grads.get(params[i], np.zeros_like(a))
        flat = a.reshape(-1)
        for j in range(flat.size):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i].reshape(-1)[j] += step
            minus[i].reshape(-1)[j] -= step
            delta = evaluate(plus) - evaluate(minus)
            fd = (delta if w is None else np.sum(w * delta)) / (2.0 * step)
            an = analytic.reshape(-1)[j]
            worst = max(worst, abs(an - fd) / (abs(an) + 1e-8))
    return float(worst)
