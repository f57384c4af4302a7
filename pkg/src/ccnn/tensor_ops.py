"""Numeric kernels: valid convolution, pooling, activations and their gradients.

Arrays are channels-last, ``(H, W, C)`` or batched ``(N, H, W, C)``.  Every
kernel accepts an optional dilation ``l`` that spaces the taps ``l`` cells
apart; ``l = 1`` is the ordinary operation.  Nothing here pads: output size is
``in - (k - 1) * l`` for stride 1.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class SizingError(ValueError):
    """Raised when array dimensions do not fit an operation."""


PRECISIONS = {"single": np.float32, "double": np.float64}


def dtype_for(precision):
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; use 'single' or 'double'") from None


@dataclass
class ConvKernel:
    """3-D convolution filter bank.

    ``weights`` has shape ``(kh, kw, in_channels, out_channels)``; ``bias`` has
    one entry per output channel.
    """

    weights: np.ndarray
    bias: np.ndarray
    dilation: int = 1

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise SizingError(f"kernel weights must be 4-D, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[3],):
            raise SizingError(
                f"bias shape {self.bias.shape} does not match {self.weights.shape[3]} output channels"
            )
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")

    @property
    def kh(self):
        return self.weights.shape[0]

    @property
    def kw(self):
        return self.weights.shape[1]

    @property
    def in_channels(self):
        return self.weights.shape[2]

    @property
    def out_channels(self):
        return self.weights.shape[3]

    def with_dilation(self, dilation):
        """Same weights (shared, not copied), different tap spacing."""
        return ConvKernel(self.weights, self.bias, dilation)

    def astype(self, dtype):
        return ConvKernel(self.weights.astype(dtype), self.bias.astype(dtype), self.dilation)


@dataclass(frozen=True)
class PoolSpec:
    kind: str  # "max" | "average"
    kh: int
    kw: int
    stride: int = 1
    dilation: int = 1

    def __post_init__(self):
        if self.kind not in ("max", "average"):
            raise ValueError(f"pool kind must be 'max' or 'average', got {self.kind!r}")
        if min(self.kh, self.kw, self.stride, self.dilation) < 1:
            raise ValueError(f"pool window, stride and dilation must be positive: {self}")


@dataclass
class PoolRouting:
    """What pool_backward needs from the forward call."""

    spec: PoolSpec
    input_shape: tuple
    argmax: np.ndarray = None  # tap index per output cell, max pooling only


def out_size(n, k, dilation=1, stride=1):
    span = (k - 1) * dilation + 1
    if span > n:
        return 0
    return (n - span) // stride + 1


def _check_span(x, kh, kw, dilation, stride, what):
    h, w = x.shape[-3], x.shape[-2]
    for axis, n, k in (("height", h, kh), ("width", w, kw)):
        span = (k - 1) * dilation + 1
        if span > n:
            raise SizingError(
                f"{what}: effective {axis} span {span} exceeds input {axis} {n}"
            )
    return out_size(h, kh, dilation, stride), out_size(w, kw, dilation, stride)


def im2col(x, kh, kw, dilation=1):
    """Unfold valid windows into rows ordered (kh, kw, C), matching kernel layout."""
    span_h = (kh - 1) * dilation + 1
    span_w = (kw - 1) * dilation + 1
    v = sliding_window_view(x, (span_h, span_w), axis=(-3, -2))
    v = v[..., ::dilation, ::dilation]  # (..., oh, ow, C, kh, kw)
    nd = v.ndim
    order = tuple(range(nd - 3)) + (nd - 2, nd - 1, nd - 3)
    v = v.transpose(order)
    return np.ascontiguousarray(v).reshape(v.shape[:-3] + (kh * kw * x.shape[-1],))


def conv_forward(x, k, keep_cols=False):
    """Valid cross-correlation of ``x`` with kernel ``k`` at dilation ``k.dilation``.

    With ``keep_cols`` returns ``(y, cols)`` so the backward pass can reuse
    the unfolded input.
    """
    if x.shape[-1] != k.in_channels:
        raise SizingError(
            f"conv: input channels {x.shape[-1]} != kernel in_channels {k.in_channels}"
        )
    _check_span(x, k.kh, k.kw, k.dilation, 1, "conv")
    cols = im2col(x, k.kh, k.kw, k.dilation)
    y = cols @ k.weights.reshape(-1, k.out_channels) + k.bias
    return (y, cols) if keep_cols else y


def conv_backward(x, k, d_out, input_grad=True, cols=None):
    """Gradients of conv_forward with respect to input, weights and bias.

    With ``input_grad=False`` the (costly) input gradient is skipped and
    returned as None.  ``cols`` may pass in ``im2col`` of ``x`` from the
    forward pass.
    """
    oh, ow = _check_span(x, k.kh, k.kw, k.dilation, 1, "conv")
    expected = x.shape[:-3] + (oh, ow, k.out_channels)
    if d_out.shape != expected:
        raise SizingError(f"conv backward: d_out shape {d_out.shape}, expected {expected}")
    if cols is None:
        cols = im2col(x, k.kh, k.kw, k.dilation)
    g = d_out.reshape(-1, k.out_channels)
    d_w = (cols.reshape(-1, cols.shape[-1]).T @ g).reshape(k.weights.shape)
    d_b = g.sum(axis=0)
    if not input_grad:
        return None, d_w, d_b
    d_cols = (g @ k.weights.reshape(-1, k.out_channels).T).reshape(
        x.shape[:-3] + (oh, ow, k.kh, k.kw, k.in_channels)
    )
    d_x = np.zeros_like(x)
    l = k.dilation
    for i in range(k.kh):
        for j in range(k.kw):
            d_x[..., i * l:i * l + oh, j * l:j * l + ow, :] += d_cols[..., i, j, :]
    return d_x, d_w, d_b


def conv_global_average_backward(x, k, d_y):
    """Backward of a valid conv followed by a mean over its whole output map.

    ``d_y`` is the gradient of the pooled ``(..., out_channels)`` result.  The
    upstream gradient is constant over the map, so the weight gradient only
    needs window sums of ``x`` and the input gradient is a sum of shifted
    constants.  Returns ``(dX, dW, dB)``.
    """
    oh, ow = _check_span(x, k.kh, k.kw, k.dilation, 1, "conv")
    if d_y.shape != x.shape[:-3] + (k.out_channels,):
        raise SizingError(f"conv/average backward: d_y shape {d_y.shape} does not match input {x.shape}")
    u = d_y / (oh * ow)
    u2 = u.reshape(-1, k.out_channels)
    l = k.dilation
    d_x = np.zeros_like(x)
    d_w = np.empty_like(k.weights)
    for i in range(k.kh):
        for j in range(k.kw):
            window = x[..., i * l:i * l + oh, j * l:j * l + ow, :]
            sums = window.sum(axis=(-3, -2)).reshape(-1, k.in_channels)
            d_w[i, j] = sums.T @ u2
            v = u @ k.weights[i, j].T
            d_x[..., i * l:i * l + oh, j * l:j * l + ow, :] += v[..., None, None, :]
    d_b = u2.sum(axis=0) * (oh * ow)
    return d_x, d_w, d_b


def _tap(x, i, j, p, oh, ow):
    l, s = p.dilation, p.stride
    return x[..., i * l:i * l + (oh - 1) * s + 1:s, j * l:j * l + (ow - 1) * s + 1:s, :]


def pool_forward(x, p, record=True):
    """Valid max or average pooling; returns ``(y, routing)``.

    ``record=False`` skips the argmax bookkeeping (inference only).
    """
    oh, ow = _check_span(x, p.kh, p.kw, p.dilation, p.stride, f"{p.kind} pool")
    routing = PoolRouting(p, x.shape)
    if p.kind == "max":
        # strict comparison: the first maximum in row-major tap order wins
        y = _tap(x, 0, 0, p, oh, ow).copy()
        arg = np.zeros(y.shape, dtype=np.int16) if record else None
        t = 0
        for i in range(p.kh):
            for j in range(p.kw):
                if t:
                    tap = _tap(x, i, j, p, oh, ow)
                    if record:
                        better = tap > y
                        arg += better * (np.int16(t) - arg)
                    np.maximum(y, tap, out=y)
                t += 1
        routing.argmax = arg
        return y, routing
    # separable sum: along width first, then height; tap order is fixed
    l, s = p.dilation, p.stride
    rows = None
    for j in range(p.kw):
        t = x[..., :, j * l:j * l + (ow - 1) * s + 1:s, :]
        rows = t.copy() if rows is None else rows + t
    acc = None
    for i in range(p.kh):
        t = rows[..., i * l:i * l + (oh - 1) * s + 1:s, :, :]
        acc = t.copy() if acc is None else acc + t
    return acc / (p.kh * p.kw), routing


def pool_backward(routing, d_out, p):
    if routing.spec != p:
        raise ValueError(f"routing was produced for {routing.spec}, not {p}")
    h, w = routing.input_shape[-3], routing.input_shape[-2]
    oh, ow = out_size(h, p.kh, p.dilation, p.stride), out_size(w, p.kw, p.dilation, p.stride)
    expected = tuple(routing.input_shape[:-3]) + (oh, ow, routing.input_shape[-1])
    if d_out.shape != expected:
        raise SizingError(f"pool backward: d_out shape {d_out.shape}, expected {expected}")
    if p.kind == "max":
        return _max_pool_scatter(routing, d_out, p, oh, ow)
    d_x = np.zeros(routing.input_shape, dtype=d_out.dtype)
    share = d_out / (p.kh * p.kw)
    for i in range(p.kh):
        for j in range(p.kw):
            _tap(d_x, i, j, p, oh, ow)[...] += share
    return d_x


def _max_pool_scatter(routing, d_out, p, oh, ow):
    """Send each output gradient to its argmax input cell (overlaps add up)."""
    shape = routing.input_shape
    h, w, c = shape[-3], shape[-2], shape[-1]
    n = int(np.prod(shape[:-3], dtype=np.int64))
    arg = routing.argmax.reshape(n, oh, ow, c).astype(np.int64)
    iy = np.arange(oh).reshape(1, oh, 1, 1) * p.stride + (arg // p.kw) * p.dilation
    ix = np.arange(ow).reshape(1, 1, ow, 1) * p.stride + (arg % p.kw) * p.dilation
    flat = ((np.arange(n).reshape(n, 1, 1, 1) * h + iy) * w + ix) * c + np.arange(c)
    d_x = np.bincount(flat.ravel(), weights=d_out.ravel(), minlength=n * h * w * c)
    return d_x.astype(d_out.dtype, copy=False).reshape(shape)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, d_out):
    return d_out * (x > 0)


def softmax2(logits):
    """Two-way softmax over the last axis (player / non-player)."""
    if logits.shape[-1] != 2:
        raise SizingError(f"softmax2 expects 2 channels, got {logits.shape[-1]}")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax2_backward(probs, d_probs):
    """Chain rule through softmax2 given its output ``probs``."""
    inner = (probs * d_probs).sum(axis=-1, keepdims=True)
    return probs * (d_probs - inner)
