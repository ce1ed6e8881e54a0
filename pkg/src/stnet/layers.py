"""Neural layers: linear, 2-D convolution, transposed convolution, layer norm.

Convolution is cross-correlation (no kernel flip), evaluated through an
im2col lowering so the heavy work runs as one BLAS matmul per layer. The
transposed convolution is the exact adjoint of a convolution with the same
geometry, which the tests pin down through the inner-product identity.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import (ShapeMismatchError, Tensor, _count_macs, _record,
                     add, matmul, parameter, transpose)


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                    fan_in: int, dtype=np.float32) -> np.ndarray:
    """Kaiming-uniform at the mainstream frameworks' default gain
    (leaky-ReLU a = sqrt(5)), i.e. bound 1/sqrt(fan_in); keeps deep
    pre-sigmoid activations out of saturation at init."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _pad_pair(padding: int | tuple[int, int]) -> tuple[int, int]:
    return (padding, padding) if isinstance(padding, int) else tuple(padding)


def _conv_out_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: tuple[int, int]):
    """Lower [b,c,h,w] to patches [b, oh*ow, c*kh*kw]."""
    b, c, h, w = x.shape
    ph, pw = padding
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    oh = _conv_out_extent(h, kh, stride, ph)
    ow = _conv_out_extent(w, kw, stride, pw)
    sb, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (b, c, oh, ow, kh, kw), (sb, sc, sh * stride, sw * stride, sh, sw))
    cols = np.ascontiguousarray(view.transpose(0, 2, 3, 1, 4, 5)).reshape(b, oh * ow, c * kh * kw)
    return cols, oh, ow


def _col2im(cols: np.ndarray, out_shape: tuple[int, int, int, int],
            kh: int, kw: int, stride: int, padding: tuple[int, int],
            oh: int, ow: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back onto the image."""
    b, c, h, w = out_shape
    ph, pw = padding
    canvas = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    patches = cols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            canvas[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += patches[:, :, :, :, i, j]
    if ph or pw:
        return canvas[:, :, ph:ph + h, pw:pw + w]
    return canvas


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None,
           stride: int = 1, padding: int | tuple[int, int] = 0,
           tag: str = "conv") -> Tensor:
    """Cross-correlation of [b,ci,h,w] with kernel [co,ci,kh,kw]."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeMismatchError(f"conv2d: need 4-d input/kernel, got {x.shape}, {kernel.shape}")
    padding = _pad_pair(padding)
    b, ci, h, w = x.shape
    co, kci, kh, kw = kernel.shape
    if ci != kci:
        raise ShapeMismatchError(f"conv2d: input channels {ci} != kernel channels {kci}")
    if h + 2 * padding[0] < kh or w + 2 * padding[1] < kw:
        raise ShapeMismatchError(f"conv2d: kernel {kernel.shape} exceeds padded input {x.shape}")

    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    w_mat = kernel.data.reshape(co, ci * kh * kw)
    out_flat = cols @ w_mat.T
    _count_macs(tag, b * oh * ow * co * ci * kh * kw)
    out_data = out_flat.transpose(0, 2, 1).reshape(b, co, oh, ow)
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, co, 1, 1)
    out = Tensor(out_data)

    def grad_fn(g):
        g_flat = g.reshape(b, co, oh * ow).transpose(0, 2, 1)
        g_kernel = np.einsum("bnc,bnk->ck", g_flat, cols).reshape(kernel.shape)
        g_cols = g_flat @ w_mat
        g_x = _col2im(g_cols, x.shape, kh, kw, stride, padding, oh, ow)
        g_bias = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (g_x, g_kernel, g_bias) if bias is not None else (g_x, g_kernel)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return _record(out, inputs, grad_fn)


def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Tensor | None,
                     stride: int = 1, padding: int | tuple[int, int] = 0,
                     tag: str = "conv") -> Tensor:
    """Transposed convolution of [b,ci,h,w] with kernel [ci,co,kh,kw].

    Exactly the adjoint of ``conv2d`` run with the same kernel tensor,
    stride, and padding; output extent is ``(in-1)*stride - 2*padding + k``.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeMismatchError(f"conv_transpose2d: need 4-d input/kernel, got {x.shape}, {kernel.shape}")
    padding = _pad_pair(padding)
    b, ci, h, w = x.shape
    kci, co, kh, kw = kernel.shape
    if ci != kci:
        raise ShapeMismatchError(f"conv_transpose2d: input channels {ci} != kernel channels {kci}")
    out_h = (h - 1) * stride - 2 * padding[0] + kh
    out_w = (w - 1) * stride - 2 * padding[1] + kw
    if out_h <= 0 or out_w <= 0:
        raise ShapeMismatchError(f"conv_transpose2d: non-positive output extent for {x.shape}")

    k_mat = kernel.data.reshape(ci, co * kh * kw)
    x_flat = x.data.reshape(b, ci, h * w).transpose(0, 2, 1)
    cols = x_flat @ k_mat
    _count_macs(tag, b * h * w * ci * co * kh * kw)
    out_data = _col2im(cols, (b, co, out_h, out_w), kh, kw, stride, padding, h, w)
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, co, 1, 1)
    out = Tensor(out_data)

    def grad_fn(g):
        g_cols, _, _ = _im2col(g, kh, kw, stride, padding)
        g_x = (g_cols @ k_mat.T).transpose(0, 2, 1).reshape(x.shape)
        g_kernel = np.einsum("bni,bnk->ik", x_flat, g_cols).reshape(kernel.shape)
        g_bias = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (g_x, g_kernel, g_bias) if bias is not None else (g_x, g_kernel)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return _record(out, inputs, grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, epsilon: float = 1e-5) -> Tensor:
    """Normalize the last axis per token, then apply the affine (gamma, beta)."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatchError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} != ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.square(centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(epsilon, dtype=x.data.dtype))
    x_hat = centered * inv_std
    out = Tensor(gamma.data * x_hat + beta.data)

    def grad_fn(g):
        g_hat = g * gamma.data
        mean_g = g_hat.mean(axis=-1, keepdims=True)
        mean_gx = (g_hat * x_hat).mean(axis=-1, keepdims=True)
        g_x = inv_std * (g_hat - mean_g - x_hat * mean_gx)
        g_gamma = (g * x_hat).reshape(-1, d).sum(axis=0)
        g_beta = g.reshape(-1, d).sum(axis=0)
        return g_x, g_gamma, g_beta

    return _record(out, (x, gamma, beta), grad_fn)


class Linear:
    """Affine map y = x W^T + b with weight [out, in]."""

    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = weight
        self.bias = bias

    @classmethod
    def create(cls, rng: np.random.Generator, n_in: int, n_out: int,
               name: str, dtype=np.float32) -> "Linear":
        w = kaiming_uniform(rng, (n_out, n_in), fan_in=n_in, dtype=dtype)
        return cls(parameter(w, f"{name}.weight"),
                   parameter(np.zeros(n_out, dtype=dtype), f"{name}.bias"))

    def __call__(self, x: Tensor, tag: str = "matmul") -> Tensor:
        return add(matmul(x, transpose(self.weight, (1, 0)), tag=tag), self.bias)

    def named_params(self):
        return [(self.weight.name, self.weight), (self.bias.name, self.bias)]


class Conv2d:
    """Convolution layer; kernel [out_ch, in_ch, kh, kw]."""

    def __init__(self, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0):
        self.kernel = kernel
        self.bias = bias
        self.stride = stride
        self.padding = padding

    @classmethod
    def create(cls, rng: np.random.Generator, in_ch: int, out_ch: int,
               kernel_size: int | tuple[int, int], name: str,
               stride: int = 1, padding: int = 0, dtype=np.float32) -> "Conv2d":
        kh, kw = (kernel_size, kernel_size) if isinstance(kernel_size, int) else kernel_size
        k = kaiming_uniform(rng, (out_ch, in_ch, kh, kw), fan_in=in_ch * kh * kw, dtype=dtype)
        return cls(parameter(k, f"{name}.kernel"),
                   parameter(np.zeros(out_ch, dtype=dtype), f"{name}.bias"),
                   stride=stride, padding=padding)

    def __call__(self, x: Tensor, tag: str = "conv") -> Tensor:
        return conv2d(x, self.kernel, self.bias, self.stride, self.padding, tag=tag)

    def named_params(self):
        return [(self.kernel.name, self.kernel), (self.bias.name, self.bias)]


class ConvTranspose2d:
    """Transposed convolution layer; kernel [in_ch, out_ch, kh, kw]."""

    def __init__(self, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0):
        self.kernel = kernel
        self.bias = bias
        self.stride = stride
        self.padding = padding

    @classmethod
    def create(cls, rng: np.random.Generator, in_ch: int, out_ch: int,
               kernel_size: int | tuple[int, int], name: str,
               stride: int = 1, padding: int = 0, dtype=np.float32) -> "ConvTranspose2d":
        kh, kw = (kernel_size, kernel_size) if isinstance(kernel_size, int) else kernel_size
        k = kaiming_uniform(rng, (in_ch, out_ch, kh, kw), fan_in=in_ch * kh * kw, dtype=dtype)
        return cls(parameter(k, f"{name}.kernel"),
                   parameter(np.zeros(out_ch, dtype=dtype), f"{name}.bias"),
                   stride=stride, padding=padding)

    def __call__(self, x: Tensor, tag: str = "conv") -> Tensor:
        return conv_transpose2d(x, self.kernel, self.bias, self.stride, self.padding, tag=tag)

    def named_params(self):
        return [(self.kernel.name, self.kernel), (self.bias.name, self.bias)]


class LayerNorm:
    def __init__(self, gamma: Tensor, beta: Tensor, epsilon: float = 1e-5):
        self.gamma = gamma
        self.beta = beta
        self.epsilon = epsilon

    @classmethod
    def create(cls, dim: int, name: str, dtype=np.float32) -> "LayerNorm":
        return cls(parameter(np.ones(dim, dtype=dtype), f"{name}.gamma"),
                   parameter(np.zeros(dim, dtype=dtype), f"{name}.beta"))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.epsilon)

    def named_params(self):
        return [(self.gamma.name, self.gamma), (self.beta.name, self.beta)]
