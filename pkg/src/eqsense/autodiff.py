"""Rank-4 tensor engine with reverse-mode differentiation.

Every array in the toolkit lives in a float64 Tensor laid out as
(batch, channel, height, width); vectors, matrices and scalars are
stored with leading extents of 1. Operations link results to their
inputs through parent references, so a forward pass leaves behind an
implicit graph whose reverse creation order is a valid reverse
topological order. ``backward`` walks exactly that order.

The primitive set is deliberately small: just what the reconstruction
block and its training loop need. No GPU, no general broadcasting.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "no_grad",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose2d",
    "conv2d",
    "soft_threshold",
    "relu",
    "sigmoid",
    "softplus",
    "global_avg_pool",
    "tensor_sum",
    "backward",
    "backward_from",
    "zero_grads",
    "collect_grads",
    "AdamState",
    "adam_step",
]


class ShapeError(ValueError):
    """Raised when tensor shapes do not conform."""


_seq_counter = itertools.count()


class _GradMode:
    enabled = True


class no_grad:
    """Context manager that disables graph recording inside its body."""

    def __enter__(self):
        self._prev = _GradMode.enabled
        _GradMode.enabled = False
        return self

    def __exit__(self, *exc):
        _GradMode.enabled = self._prev
        return False


class Tensor:
    """A dense (batch, channel, height, width) array of float64.

    Inputs of lower rank are promoted by prepending unit extents.
    ``grad`` stays None until a backward pass writes into it.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 4:
            raise ShapeError(f"tensors are at most rank 4, got shape {arr.shape}")
        if arr.ndim < 4:
            arr = arr.reshape((1,) * (4 - arr.ndim) + arr.shape)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None
        self._seq = next(_seq_counter)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a one-element tensor, shape is {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same data, no gradient tracking. The buffer is shared."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._vjp = None
        t._seq = next(_seq_counter)
        return t

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    track = _GradMode.enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting on unit axes."""
    if g.shape == shape:
        return g
    axes = tuple(i for i in range(4) if shape[i] == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    if g.shape != shape:
        raise ShapeError(f"cannot reduce gradient of shape {g.shape} to {shape}")
    return g


# ---------------------------------------------------------------------------
# elementwise / structural primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from e

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from e

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with unit-axis broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from e

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return _result(data, (a, b), vjp)


def scale(t: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(g):
        return (g * c,)

    return _result(t.data * c, (t,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Contraction over the last two axes, broadcasting batch/channel."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    return _result(data, (a, b), vjp)


def transpose2d(t: Tensor) -> Tensor:
    """Swap the two spatial (matrix) axes."""

    def vjp(g):
        return (g.swapaxes(-1, -2),)

    return _result(t.data.swapaxes(-1, -2), (t,), vjp)


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0

    def vjp(g):
        return (g * mask,)

    return _result(np.where(mask, t.data, 0.0), (t,), vjp)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(t: Tensor) -> Tensor:
    s = _sigmoid(t.data)

    def vjp(g):
        return (g * s * (1.0 - s),)

    return _result(s, (t,), vjp)


def softplus(t: Tensor) -> Tensor:
    """log(1 + exp(x)), the smooth non-negative reparameterization."""
    data = np.logaddexp(0.0, t.data)

    def vjp(g):
        return (g * _sigmoid(t.data),)

    return _result(data, (t,), vjp)


def global_avg_pool(t: Tensor) -> Tensor:
    """Mean over the spatial axes, keeping (batch, channel, 1, 1)."""
    h, w = t.shape[2], t.shape[3]
    data = t.data.mean(axis=(2, 3), keepdims=True)

    def vjp(g):
        return (np.broadcast_to(g / (h * w), t.shape),)

    return _result(data, (t,), vjp)


def tensor_sum(t: Tensor) -> Tensor:
    """Full reduction to a (1, 1, 1, 1) scalar."""
    data = np.array(t.data.sum()).reshape(1, 1, 1, 1)

    def vjp(g):
        return (np.broadcast_to(g, t.shape),)

    return _result(data, (t,), vjp)


def soft_threshold(v: Tensor, lam: Union[Tensor, float]) -> Tensor:
    """Shrink toward zero: sgn(v) * max(|v| - lam, 0).

    The subgradient is taken as 0 on |v| <= lam, including the kink.
    `lam` may be a learnable tensor (broadcast, e.g. per channel) or a
    plain non-negative float.
    """
    v = _as_tensor(v)
    if isinstance(lam, Tensor):
        thr = lam.data
        if np.any(thr < 0):
            raise ValueError("soft_threshold needs a non-negative threshold")
        absv = np.abs(v.data)
        mask = absv > thr
        sgn = np.sign(v.data)
        data = np.where(mask, sgn * (absv - thr), 0.0)

        def vjp(g):
            gv = g * mask
            gl = _unbroadcast(-(sgn * g) * mask, lam.shape)
            return gv, gl

        return _result(data, (v, lam), vjp)

    thr = float(lam)
    if thr < 0:
        raise ValueError("soft_threshold needs a non-negative threshold")
    absv = np.abs(v.data)
    mask = absv > thr
    sgn = np.sign(v.data)
    data = np.where(mask, sgn * (absv - thr), 0.0)

    def vjp(g):
        return (g * mask,)

    return _result(data, (v,), vjp)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, dil: int) -> np.ndarray:
    """Patch matrix of shape (C*kh*kw, B*h*w) for 'same' zero padding.

    Built shift by shift directly from the unpadded input, so every
    copied run is a full image row and no padded intermediate exists;
    out-of-range taps stay at the zero fill.
    """
    b, c, h, w = x.shape
    ph = dil * (kh - 1) // 2
    pw = dil * (kw - 1) // 2
    col = np.empty((c, kh * kw, b, h, w))
    for i in range(kh):
        for j in range(kw):
            dy = i * dil - ph
            dx = j * dil - pw
            ylo, yhi = max(0, -dy), min(h, h - dy)
            xlo, xhi = max(0, -dx), min(w, w - dx)
            plane = col[:, i * kw + j]
            if ylo >= yhi or xlo >= xhi:
                plane[:] = 0.0
                continue
            if ylo > 0:
                plane[:, :, :ylo, :] = 0.0
            if yhi < h:
                plane[:, :, yhi:, :] = 0.0
            if xlo > 0:
                plane[:, :, ylo:yhi, :xlo] = 0.0
            if xhi < w:
                plane[:, :, ylo:yhi, xhi:] = 0.0
            seg = x[:, :, ylo + dy : yhi + dy, xlo + dx : xhi + dx]
            plane[:, :, ylo:yhi, xlo:xhi] = seg.transpose(1, 0, 2, 3)
    return col.reshape(c * kh * kw, b * h * w)


def _conv_raw(x: np.ndarray, k: np.ndarray, dil: int) -> np.ndarray:
    b, c, h, w = x.shape
    oc, _, kh, kw = k.shape
    col = _im2col(x, kh, kw, dil)
    out = k.reshape(oc, -1) @ col
    # transposed view; consumers materialize lazily, skipping one copy
    return out.reshape(oc, b, h, w).transpose(1, 0, 2, 3)


def conv2d(
    x: Tensor,
    kernel: Tensor,
    dilation: int = 1,
    bias: Optional[Tensor] = None,
) -> Tensor:
    """'Same' zero-padded 2-D convolution with a dilation factor.

    Padding is dilation*(k-1)/2 per axis, so spatial size is preserved
    and the receptive field per axis is k + (k-1)*(dilation-1).
    """
    x = _as_tensor(x)
    if not isinstance(dilation, (int, np.integer)) or dilation < 1:
        raise ValueError(f"dilation must be a positive int, got {dilation!r}")
    dilation = int(dilation)
    b, c, h, w = x.shape
    oc, ic, kh, kw = kernel.shape
    if ic != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ic}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernel spatial extent must be odd, got {kh}x{kw}")
    if bias is not None and bias.data.size != oc:
        raise ShapeError(f"conv2d: bias size {bias.data.size} != out channels {oc}")

    data = _conv_raw(x.data, kernel.data, dilation)
    if bias is not None:
        data = data + bias.data.reshape(1, oc, 1, 1)

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def vjp(g):
        gx = gk = gb = None
        if x.requires_grad:
            # grad wrt input of a same-padded stride-1 dilated conv is the
            # conv of g with the spatially flipped, channel-swapped kernel
            kb = np.ascontiguousarray(np.flip(kernel.data, axis=(2, 3)).swapaxes(0, 1))
            gx = _conv_raw(g, kb, dilation)
        if kernel.requires_grad:
            col = _im2col(x.data, kh, kw, dilation)
            go = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(oc, b * h * w)
            gk = (go @ col.T).reshape(oc, ic, kh, kw)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3)).reshape(bias.shape)
        if bias is None:
            return gx, gk
        return gx, gk, gb

    return _result(data, parents, vjp)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Reverse-mode accumulation from a scalar loss.

    Writes (accumulates) gradients into every reachable tensor that has
    requires_grad set.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    backward_from(loss, np.ones_like(loss.data))


def backward_from(out: Tensor, seed: np.ndarray) -> None:
    """Seed reverse-mode accumulation at an arbitrary graph node."""
    if not out.requires_grad:
        return
    seed = np.asarray(seed, dtype=np.float64).reshape(out.data.shape)

    nodes = []
    seen = set()
    stack = [out]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        for p in t._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append(p)
    # creation order is a topological order, so its reverse is valid here
    nodes.sort(key=lambda t: t._seq, reverse=True)

    adjoint = {id(out): seed}
    for t in nodes:
        g = adjoint.pop(id(t), None)
        if g is None:
            continue
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g
        if t._vjp is None:
            continue
        for p, pg in zip(t._parents, t._vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = adjoint.get(id(p))
            adjoint[id(p)] = pg if prev is None else prev + pg


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def collect_grads(loss: Tensor, leaves: Mapping[str, Tensor]) -> dict:
    """Run one backward pass and return copies of the leaf gradients.

    Leaf grads are zeroed before and after, so repeated passes over
    shared graphs never cross-contaminate.
    """
    zero_grads(leaves.values())
    backward(loss)
    out = {
        name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
        for name, t in leaves.items()
    }
    zero_grads(leaves.values())
    return out


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Moment buffers and step counter for the Adam update."""

    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Optional[Mapping[str, np.ndarray]],
    state: AdamState,
) -> Mapping[str, Tensor]:
    """One bias-corrected Adam update, in place on the parameter data.

    When `grads` is None the gradients stored on the tensors are used;
    missing entries count as zero.
    """
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        if grads is None:
            g = p.grad
        else:
            g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param {p.data.shape} for {name!r}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params
