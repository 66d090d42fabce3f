"""Volumetric convolution and its transpose on the autodiff tape.

Kernels use the [out, in, kd, kh, kw] layout for ``conv3d``. The transposed
convolution takes the *same* kernel tensor and is the exact adjoint of
``conv3d`` with matching geometry, so its input has ``out`` channels and its
output ``in`` channels.

Stride and padding may be an int or a per-axis triple. Forward and weight
gradients gather patches with a strided view (im2col); input gradients
scatter them back one kernel offset at a time (col2im).
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import DTYPE, DimensionError, Tensor, _record, as_tensor


def _triple(v, name):
    t = (v, v, v) if np.isscalar(v) else tuple(v)
    if len(t) != 3:
        raise DimensionError(f"{name} must be an int or a triple, got {v!r}")
    return tuple(int(a) for a in t)


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def transpose_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n - 1) * stride - 2 * padding + k


def _pad(x, padding):
    if not any(padding):
        return x
    return np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in padding])


def _patches(xp, ksize, stride, out_sp):
    """[N, C, D', H', W', kd, kh, kw] strided view of a padded input."""
    win = sliding_window_view(xp, ksize, axis=(2, 3, 4))
    sd, sh, sw = stride
    od, oh, ow = out_sp
    return win[:, :, : (od - 1) * sd + 1: sd, : (oh - 1) * sh + 1: sh, : (ow - 1) * sw + 1: sw]


def _conv_fwd(x, w, stride, padding):
    n, c, *sp = x.shape
    o, cw, *ks = w.shape
    out_sp = [conv_output_size(s, k, st, p) for s, k, st, p in zip(sp, ks, stride, padding)]
    cols = _patches(_pad(x, padding), ks, stride, out_sp)
    y = np.tensordot(cols, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))  # N, D', H', W', O
    return np.ascontiguousarray(y.transpose(0, 4, 1, 2, 3), dtype=DTYPE)


def _conv_grad_weight(x, gy, wshape, stride, padding):
    ks = wshape[2:]
    cols = _patches(_pad(x, padding), ks, stride, gy.shape[2:])
    gw = np.tensordot(gy, cols, axes=([0, 2, 3, 4], [0, 2, 3, 4]))  # O, C, kd, kh, kw
    return gw.astype(DTYPE, copy=False)


def _conv_grad_input(gy, w, stride, padding, xshape):
    """Adjoint of ``_conv_fwd`` with respect to its input (col2im)."""
    n, c, *sp = xshape
    ks = w.shape[2:]
    od, oh, ow = gy.shape[2:]
    sd, sh, sw = stride
    cols = np.tensordot(gy, w, axes=([1], [0]))  # N, D', H', W', C, kd, kh, kw
    padded = [s + 2 * p for s, p in zip(sp, padding)]
    gxp = np.zeros([n, c] + padded, dtype=DTYPE)
    for a in range(ks[0]):
        for b in range(ks[1]):
            for e in range(ks[2]):
                gxp[:, :, a: a + (od - 1) * sd + 1: sd, b: b + (oh - 1) * sh + 1: sh,
                    e: e + (ow - 1) * sw + 1: sw] += cols[..., a, b, e].transpose(0, 4, 1, 2, 3)
    pd, ph, pw = padding
    return np.ascontiguousarray(gxp[:, :, pd: pd + sp[0], ph: ph + sp[1], pw: pw + sp[2]])


def _add_bias(y, bias):
    if bias is None:
        return y
    return y + bias.data.reshape(1, -1, 1, 1, 1)


def _check(x, w, bias, stride, padding, in_axis):
    if x.ndim != 5 or w.ndim != 5:
        raise DimensionError(f"expected 5-D input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[in_axis]:
        raise DimensionError(
            f"input has {x.shape[1]} channels but kernel {w.shape} expects {w.shape[in_axis]}")
    if min(stride) < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    if min(padding) < 0:
        raise DimensionError(f"padding must be >= 0, got {padding}")
    out_axis = 1 - in_axis
    if bias is not None and bias.shape != (w.shape[out_axis],):
        raise DimensionError(f"bias shape {bias.shape} does not match {w.shape[out_axis]} outputs")


def conv3d(x, w, bias=None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of [N,C,D,H,W] with an [O,C,kd,kh,kw] kernel."""
    x, w = as_tensor(x), as_tensor(w)
    bias = None if bias is None else as_tensor(bias)
    stride, padding = _triple(stride, "stride"), _triple(padding, "padding")
    _check(x, w, bias, stride, padding, in_axis=1)
    for s, k, p in zip(x.shape[2:], w.shape[2:], padding):
        if s + 2 * p < k:
            raise DimensionError(f"kernel {w.shape[2:]} larger than padded input {x.shape[2:]}")
    xd, wd = x.data, w.data
    y = _add_bias(_conv_fwd(xd, wd, stride, padding), bias)

    def backward(g):
        gx = _conv_grad_input(g, wd, stride, padding, xd.shape) if x.requires_grad else None
        gw = _conv_grad_weight(xd, g, wd.shape, stride, padding) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return _record(y, parents, backward)


def conv_transpose3d(y, w, bias=None, stride=1, padding=0) -> Tensor:
    """Adjoint of ``conv3d(., w)``: [N,O,d,h,w] -> [N,C,D,H,W].

    Output size per axis is ``(in - 1) * stride - 2 * padding + k``.
    """
    y, w = as_tensor(y), as_tensor(w)
    bias = None if bias is None else as_tensor(bias)
    stride, padding = _triple(stride, "stride"), _triple(padding, "padding")
    _check(y, w, bias, stride, padding, in_axis=0)
    n = y.shape[0]
    out_sp = [transpose_output_size(s, k, st, p)
              for s, k, st, p in zip(y.shape[2:], w.shape[2:], stride, padding)]
    if min(out_sp) < 1:
        raise DimensionError(f"transposed conv output would be empty: {out_sp}")
    xshape = (n, w.shape[1], *out_sp)
    yd, wd = y.data, w.data
    out = _add_bias(_conv_grad_input(yd, wd, stride, padding, xshape), bias)

    def backward(g):
        gy = _conv_fwd(g, wd, stride, padding) if y.requires_grad else None
        gw = _conv_grad_weight(g, yd, wd.shape, stride, padding) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return gy, gw, gb

    parents = (y, w) if bias is None else (y, w, bias)
    return _record(out, parents, backward)
