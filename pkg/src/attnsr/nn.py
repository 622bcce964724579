"""Neural layers on top of :mod:`attnsr.tensor`.

Functional forms (``conv2d``, ``maxpool2x2`` ...) operate on tensors and
record backward rules; the module classes own parameters and buffers.
"""

from __future__ import annotations

from typing import Dict, Iterator, Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Parameter, ShapeError, Tensor, record

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _resolve_padding(padding: Union[str, int], k: int) -> int:
    if padding == "same":
        return k // 2
    return int(padding)


def _im2col(xp: np.ndarray, k: int, stride: int) -> Tuple[np.ndarray, int, int]:
    """Columns of shape (N, C*k*k, Ho*Wo) from an already padded input."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)
    return cols, ho, wo


def _col2im(gcols: np.ndarray, padded_shape, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = padded_shape[:2]
    g = gcols.reshape(n, c, k, k, ho, wo)
    out = np.zeros(padded_shape, dtype=gcols.dtype)
    for ky in range(k):
        for kx in range(k):
            out[:, :, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride] += g[:, :, ky, kx]
    return out


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: Union[str, int] = "same",
) -> Tensor:
    """2-D cross-correlation of ``x`` (N,C,H,W) with ``weight`` (O,C,k,k).

    Padding is zero padding; ``"same"`` keeps H and W unchanged at stride 1.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects (N,C,H,W), got {x.shape}")
    o, c, k, k2 = weight.shape
    if k != k2:
        raise ShapeError("conv2d supports square kernels only")
    if x.shape[1] != c:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {c}")
    pad = _resolve_padding(padding, k)
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols, ho, wo = _im2col(xp, k, stride)
    w2 = weight.data.reshape(o, c * k * k)
    out = np.matmul(w2, cols).reshape(x.shape[0], o, ho, wo)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)
    padded_shape = xp.shape

    def bw(g):
        g2 = g.reshape(g.shape[0], o, ho * wo)
        # recomputed rather than stored: keeps peak memory at one layer
        cols_b, _, _ = _im2col(xp, k, stride)
        gw = np.tensordot(g2, cols_b, axes=([0, 2], [0, 2])).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)
            gxp = _col2im(gcols, padded_shape, k, stride, ho, wo)
            gx = gxp[:, :, pad : pad + xd.shape[2], pad : pad + xd.shape[3]] if pad else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record("conv2d", out, inputs, bw)


def conv2d_transposed(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Stride-2 transposed convolution with a 2x2 kernel ``weight`` (C_in, C_out, 2, 2).

    Output is exactly (N, C_out, 2H, 2W): each input pixel spreads into its own
    2x2 output cell, so there is no overlap.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d_transposed expects (N,C,H,W), got {x.shape}")
    ci, co, kh, kw = weight.shape
    if (kh, kw) != (2, 2):
        raise ShapeError("conv2d_transposed supports 2x2 kernels only")
    if x.shape[1] != ci:
        raise ShapeError(f"conv2d_transposed: input has {x.shape[1]} channels, kernel expects {ci}")
    n, _, h, w = x.shape
    xd, wd = x.data, weight.data
    # (N, Co, H, ky, W, kx)
    out = np.einsum("nihw,iokl->nohkwl", xd, wd, optimize=True)
    out = np.ascontiguousarray(out).reshape(n, co, 2 * h, 2 * w)
    if bias is not None:
        out += bias.data.reshape(1, co, 1, 1)

    def bw(g):
        g6 = g.reshape(n, co, h, 2, w, 2)
        gx = np.einsum("nohkwl,iokl->nihw", g6, wd, optimize=True) if x.requires_grad else None
        gw = np.einsum("nihw,nohkwl->iokl", xd, g6, optimize=True) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record("conv2d_transposed", out, inputs, bw)


# ---------------------------------------------------------------------------
# pooling, normalization, shuffling
# ---------------------------------------------------------------------------


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties resolve to the first window entry in row-major order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even extents, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        return (gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return record("maxpool2x2", np.ascontiguousarray(out), (x,), bw)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the running buffers are updated in place with
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    n, c, h, w = x.shape
    xd = x.data
    g_ = gamma.data.reshape(1, c, 1, 1)
    b_ = beta.data.reshape(1, c, 1, 1)
    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        scale_ = (gamma.data * inv).astype(xd.dtype).reshape(1, c, 1, 1)
        xhat = (xd - running_mean.reshape(1, c, 1, 1).astype(xd.dtype)) * inv.reshape(1, c, 1, 1).astype(xd.dtype)
        out = xhat * g_ + b_

        def bw_eval(gr):
            return (
                gr * scale_ if x.requires_grad else None,
                (gr * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None,
                gr.sum(axis=(0, 2, 3)) if beta.requires_grad else None,
            )

        return record("batchnorm", out.astype(xd.dtype), (x, gamma, beta), bw_eval)

    m = n * h * w
    if m < 2:
        raise ValueError("batchnorm in training mode needs at least two values per channel")
    mu = xd.mean(axis=(0, 2, 3), keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * g_ + b_
    running_mean *= momentum
    running_mean += (1 - momentum) * mu.reshape(c).astype(running_mean.dtype)
    running_var *= momentum
    running_var += (1 - momentum) * var.reshape(c).astype(running_var.dtype)

    def bw(gr):
        gx = None
        if x.requires_grad:
            dxhat = gr * g_
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = (inv / m) * (m * dxhat - s1 - xhat * s2)
        return (
            gx,
            (gr * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None,
            gr.sum(axis=(0, 2, 3)) if beta.requires_grad else None,
        )

    return record("batchnorm", out, (x, gamma, beta), bw)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange (N, C*r^2, H, W) into (N, C, rH, rW).

    ``out[n, c, y, x] = in[n, c*r*r + (y % r)*r + (x % r), y // r, x // r]``.
    """
    n, cr, h, w = x.shape
    if cr % (r * r):
        raise ShapeError(f"pixel_shuffle: {cr} channels not divisible by {r * r}")
    c = cr // (r * r)
    out = x.data.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)

    def bw(g):
        return (g.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, cr, h, w),)

    return record("pixel_shuffle", np.ascontiguousarray(out), (x,), bw)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    n, c, hr, wr = x.shape
    if hr % r or wr % r:
        raise ShapeError(f"pixel_unshuffle: extents {hr}x{wr} not divisible by {r}")
    h, w = hr // r, wr // r
    out = x.data.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)

    def bw(g):
        return (g.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, hr, wr),)

    return record("pixel_unshuffle", np.ascontiguousarray(out), (x,), bw)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def xavier_init(shape, fan_in: int, fan_out: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Uniform Glorot samples in [-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]."""
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError("fans must be positive")
    bound = xavier_bound(fan_in, fan_out)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------


class Module:
    """Minimal container tracking parameters, buffers and submodules by attribute name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = name
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> None:
        setattr(self, name, module)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def assign_names(self) -> None:
        """Stamp every parameter with its dotted path."""
        for name, p in self.named_parameters():
            p.name = name

    def astype(self, dtype) -> "Module":
        """Convert parameters and buffers in place (e.g. to float64 for gradient checks)."""
        for m in self.modules():
            for p in m._params.values():
                p.data = p.data.astype(dtype)
                p.grad = None
            for b in m._buffers:
                object.__setattr__(m, b, getattr(m, b).astype(dtype))
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        missing = expected - set(state)
        if missing:
            raise KeyError(f"missing entries in state: {sorted(missing)[:5]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for name, buf in buffers.items():
            buf[...] = state[name]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator, stride: int = 1, padding="same"):
        super().__init__()
        if k not in (1, 3):
            raise ValueError("kernel size must be 1 or 3")
        self.in_ch, self.out_ch, self.k = in_ch, out_ch, k
        self.stride, self.padding = stride, padding
        self.weight = Parameter(xavier_init((out_ch, in_ch, k, k), in_ch * k * k, out_ch * k * k, rng))
        self.bias = Parameter(np.zeros(out_ch, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2x2(Module):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.weight = Parameter(xavier_init((in_ch, out_ch, 2, 2), in_ch * 4, out_ch * 4, rng))
        self.bias = Parameter(np.zeros(out_ch, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return conv2d_transposed(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        super().__init__()
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(channels, dtype=np.float32))
        self.beta = Parameter(np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )


class ConvBNReLU(Module):
    """conv -> batch norm -> ReLU, the unit used for fusers, transitions and dense layers."""

    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, k, rng)
        self.bn = BatchNorm2d(out_ch)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x)).relu()
