"""Minimal dense-tensor engine with tape-based reverse-mode differentiation.

Every value is a float64 :class:`Tensor`. Operations executed while a
:class:`Tape` is active and with at least one input that requires gradients
are recorded on that tape; :func:`backward` then replays the recorded adjoints
in reverse execution order.

Only the handful of operations the miniature U-Net and the weighted losses
need are provided. Broadcasting is limited to multiplying by constant weight
arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DivergenceError, ShapeError, ValidationError

PROB_FLOOR = 1e-12


class Tensor:
    """An n-dimensional float64 array that may take part in differentiation.

    Leaf tensors created with ``requires_grad=True`` start with a zero
    gradient buffer; :func:`backward` accumulates into it.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class Node:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: BackwardFn
    op: str


@dataclass
class Tape:
    """Ordered record of executed operations.

    Use as a context manager; operations run inside the ``with`` block are
    appended to :attr:`nodes`.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE: list[Tape] = []


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    track = bool(_ACTIVE) and any(t.requires_grad for t in inputs)
    out.requires_grad = track
    if track:
        _ACTIVE[-1].nodes.append(Node(out, inputs, backward_fn, op))
    return out


def backward(scalar: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` of every leaf reachable from ``scalar`` on ``tape``.

    Leaves accumulate (``+=``); intermediate adjoints are discarded once used.
    """
    if scalar.size != 1:
        raise ShapeError(f"backward() needs a scalar, got shape {scalar.shape}")
    if not tape.nodes or tape.nodes[-1].output is not scalar:
        raise ValidationError("backward() scalar must be the final node of the tape")
    produced = {id(node.output) for node in tape.nodes}
    adjoints: dict[int, np.ndarray] = {id(scalar): np.ones_like(scalar.data)}
    for node in reversed(tape.nodes):
        g = adjoints.pop(id(node.output), None)
        if g is None:
            continue
        grads = node.backward(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in produced:
                if key in adjoints:
                    adjoints[key] = adjoints[key] + gi
                else:
                    adjoints[key] = gi
            else:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += gi


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data

    def bw(g):
        return (g * bd if a.requires_grad else None, g * ad if b.requires_grad else None)

    return _result(ad * bd, (a, b), bw, "mul")


def scale(x: Tensor, weights) -> Tensor:
    """Multiply by a constant array broadcastable to ``x.shape``."""
    w = np.asarray(weights, dtype=np.float64)
    try:
        out = x.data * w
    except ValueError as exc:
        raise ShapeError(f"scale: weights {w.shape} do not broadcast to {x.shape}") from exc
    if out.shape != x.shape:
        raise ShapeError(f"scale: weights {w.shape} would change shape {x.shape}")
    return _result(out, (x,), lambda g: (g * w,), "scale")


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, g.item()),), "sum")


def mean(x: Tensor) -> Tensor:
    return div_const(tsum(x), float(x.size))


def div_const(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data / c, (x,), lambda g: (g / c,), "div")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


# ------------------------------------------------------------------- spatial


def _check_nchw(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op}: expected [N,C,H,W], got shape {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding."""
    _check_nchw(x, "conv2d")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be [Cout,Cin,kh,kw], got {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has Cin={cin} but kernel {kernel.shape} expects Cin={kcin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if stride < 1 or padding < 0:
        raise ValidationError(f"conv2d: stride={stride} must be >= 1 and padding={padding} >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if stride == 1:
        return _conv2d_shifted(x, kernel, bias, padding)
    return _conv2d_im2col(x, kernel, bias, stride, padding)


def _shifted_corr(src: np.ndarray, kern: np.ndarray, offsets: list[int], m: int) -> np.ndarray:
    """``out[n, o, q] = sum_t kern[t, o, :] @ src[n, :, q + offsets[t]]`` for q < m.

    Stacks whichever side has fewer channels so a single GEMM covers all taps.
    """
    n = src.shape[0]
    taps, cout, cin = kern.shape
    if cout <= cin:
        y = np.matmul(kern.reshape(taps * cout, cin), src).reshape(n, taps, cout, -1)
        out = y[:, 0, :, offsets[0] : offsets[0] + m].copy()
        for t in range(1, taps):
            out += y[:, t, :, offsets[t] : offsets[t] + m]
        return out
    stack = np.empty((n, taps, cin, m))
    for t, o in enumerate(offsets):
        stack[:, t] = src[:, :, o : o + m]
    return np.matmul(kern.transpose(1, 0, 2).reshape(cout, taps * cin), stack.reshape(n, taps * cin, m))


def _conv2d_shifted(x: Tensor, kernel: Tensor, bias: Tensor, padding: int) -> Tensor:
    # Works on the zero-padded image flattened to hp*wp: tap (a, b) is a shift
    # by a*wp + b, and outputs land on an ho x wp grid whose last kw-1 columns
    # are junk and dropped. One spare zero row absorbs the overrun.
    n, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = hp - kh + 1, wp - kw + 1
    m = ho * wp
    xp = np.zeros((n, cin, hp + 1, wp))
    xp[:, :, padding : padding + h, padding : padding + w] = x.data
    xf = xp.reshape(n, cin, -1)
    offsets = [a * wp + b for a in range(kh) for b in range(kw)]
    kd = kernel.data
    taps = kd.transpose(2, 3, 0, 1).reshape(kh * kw, cout, cin)
    full = _shifted_corr(xf, taps, offsets, m)
    full += bias.data[:, None]
    out = full.reshape(n, cout, ho, wp)[:, :, :, :wo]

    def bw(g):
        gf = np.zeros((n, cout, ho, wp))
        gf[:, :, :, :wo] = g
        gf = gf.reshape(n, cout, m)
        gk = gb = gx = None
        if kernel.requires_grad:
            gk = np.empty(kernel.shape)
            for t, o in enumerate(offsets):
                a, b = divmod(t, kw)
                gk[:, :, a, b] = np.matmul(gf, xf[:, :, o : o + m].transpose(0, 2, 1)).sum(axis=0)
        if bias.requires_grad:
            gb = gf.sum(axis=(0, 2))
        if x.requires_grad:
            # full correlation with the transposed taps over a front-padded adjoint
            span = offsets[-1]
            length = xf.shape[2]
            gpad = np.zeros((n, cout, length + span))
            gpad[:, :, span : span + m] = gf
            dxf = _shifted_corr(gpad, taps.transpose(0, 2, 1), [span - o for o in offsets], length)
            gx = dxf.reshape(n, cin, hp + 1, wp)[:, :, padding : padding + h, padding : padding + w]
        return gx, gk, gb

    return _result(out, (x, kernel, bias), bw, "conv2d")


def _conv2d_im2col(x: Tensor, kernel: Tensor, bias: Tensor, stride: int, padding: int) -> Tensor:
    n, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    kmat = kernel.data.reshape(cout, -1)
    out = (cols @ kmat.T + bias.data).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ kmat).reshape(n, ho, wo, cin, kh, kw)
            dxp = np.zeros((n, cin, hp, wp))
            for a in range(kh):
                for b in range(kw):
                    dxp[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride] += dcols[
                        :, :, :, :, a, b
                    ].transpose(0, 3, 1, 2)
            gx = dxp[:, :, padding : padding + h, padding : padding + w]
        return gx, gk, gb

    return _result(out, (x, kernel, bias), bw, "conv2d")


def max_pool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pool; ties route the gradient to the first
    row-major cell of the window."""
    _check_nchw(x, "max_pool2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2: spatial extent {h}x{w} must be even")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return (gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _result(out, (x,), bw, "max_pool2")


def upsample_nn2(x: Tensor) -> Tensor:
    _check_nchw(x, "upsample_nn2")
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result(out, (x,), bw, "upsample_nn2")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_nchw(a, "concat_channels")
    _check_nchw(b, "concat_channels")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: {a.shape} and {b.shape} disagree outside the channel axis")
    ca = a.shape[1]
    return _result(
        np.concatenate([a.data, b.data], axis=1),
        (a, b),
        lambda g: (g[:, :ca] if a.requires_grad else None, g[:, ca:] if b.requires_grad else None),
        "concat",
    )


# ------------------------------------------------------------ probabilities


def softmax_array(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def channel_softmax(logits: Tensor) -> Tensor:
    _check_nchw(logits, "channel_softmax")
    s = softmax_array(logits.data)

    def bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _result(s, (logits,), bw, "channel_softmax")


def _check_labels(labels: np.ndarray, n: int, c: int, h: int, w: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} != {(n, h, w)}")
    bad = (labels < 0) | (labels >= c)
    if bad.any():
        i, j, k = (int(v) for v in np.argwhere(bad)[0])
        raise ValidationError(f"label {labels[i, j, k]} at (image {i}, row {j}, col {k}) outside [0, {c})")
    return labels.astype(np.intp, copy=False)


def cross_entropy_map(logits: Tensor, labels) -> Tensor:
    """Unreduced per-pixel ``-log p[label]`` with probabilities floored at 1e-12."""
    _check_nchw(logits, "cross_entropy_map")
    n, c, h, w = logits.shape
    lab = _check_labels(labels, n, c, h, w)
    p = softmax_array(logits.data)
    py = np.take_along_axis(p, lab[:, None], axis=1)[:, 0]
    live = py > PROB_FLOOR
    out = -np.log(np.maximum(py, PROB_FLOOR))

    def bw(g):
        d = p.copy()
        np.put_along_axis(d, lab[:, None], np.take_along_axis(d, lab[:, None], axis=1) - 1.0, axis=1)
        return (d * (g * live)[:, None],)

    return _result(out, (logits,), bw, "cross_entropy_map")


# --------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    """Per-parameter Adam moments plus hyperparameters."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def hyperparameters(self) -> dict[str, float]:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    trainable: Mapping[str, bool] | None = None,
) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    Parameters whose ``trainable`` flag is false are skipped entirely and
    never acquire moment buffers.
    """
    live = [k for k in params if trainable is None or trainable.get(k, True)]
    for k in live:
        g = grads.get(k)
        if g is None:
            raise ValidationError(f"adam_step: no gradient for trainable parameter {k!r}")
        if g.shape != params[k].shape:
            raise ShapeError(f"adam_step: gradient for {k!r} has shape {g.shape}, parameter {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"adam_step: non-finite gradient for {k!r}", state.t)
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for k in live:
        g = grads[k]
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        v = state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[k].data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
