"""Differentiable volumetric operators on ``C x W x H x D`` tensors.

All spatial tensors carry channels first, followed by the x, y and z axes.
Displacements are in voxel units with channel order (dx, dy, dz).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, UsageError
from .tensor import Tensor, _lift, make_node


def _triple(value) -> tuple[int, int, int]:
    if np.isscalar(value):
        return (int(value),) * 3
    value = tuple(int(v) for v in value)
    if len(value) != 3:
        raise UsageError(f"expected a scalar or 3 values, got {value}")
    return value


def _check_volume(t: Tensor, what: str) -> None:
    if t.ndim != 4:
        raise ShapeError(f"{what} must be C x W x H x D, got shape {t.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding: str = "same") -> Tensor:
    """3-D cross-correlation.

    Args:
        x: input of shape ``(C_in, W, H, D)``.
        weight: kernel of shape ``(C_out, C_in, kw, kh, kd)``.
        bias: optional ``(C_out,)`` offsets.
        stride: scalar or per-axis stride.
        padding: ``"same"`` (zero padding of ``k // 2``; odd kernels only) or
            ``"valid"``.

    Returns:
        Tensor of shape ``(C_out, W', H', D')`` with
        ``n' = (n + 2 * pad - k) // stride + 1``.
    """
    _check_volume(x, "conv3d input")
    if weight.ndim != 5:
        raise ShapeError(f"conv3d kernel must be 5-D, got {weight.shape}")
    c_in, *spatial = x.shape
    c_out, c_in_w, *ksize = weight.shape
    if c_in != c_in_w:
        raise ShapeError(f"conv3d channel mismatch: input has {c_in}, kernel expects {c_in_w}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv3d bias must have shape ({c_out},), got {bias.shape}")
    strides = _triple(stride)
    if padding == "same":
        if any(k % 2 == 0 for k in ksize):
            raise ShapeError(f"same padding needs odd kernel extents, got {tuple(ksize)}")
        pads = [k // 2 for k in ksize]
    elif padding == "valid":
        pads = [0, 0, 0]
    else:
        raise UsageError(f"padding must be 'same' or 'valid', got {padding!r}")
    out_sp = [(n + 2 * p - k) // s + 1 for n, p, k, s in zip(spatial, pads, ksize, strides)]
    if min(out_sp) < 1:
        raise ShapeError(f"conv3d kernel {tuple(ksize)} does not fit input {tuple(spatial)}")

    ktotal = int(np.prod(ksize))
    npos = int(np.prod(out_sp))
    w2 = weight.data.reshape(c_out, c_in * ktotal)
    if ktotal == 1 and strides == (1, 1, 1):
        cols = x.data.reshape(c_in, npos)
        xp_shape = None
    else:
        xp = np.pad(x.data, [(0, 0)] + [(p, p) for p in pads])
        xp_shape = xp.shape
        win = sliding_window_view(xp, ksize, axis=(1, 2, 3))
        win = win[:, :: strides[0], :: strides[1], :: strides[2]][:, : out_sp[0], : out_sp[1], : out_sp[2]]
        cols = np.ascontiguousarray(win.transpose(0, 4, 5, 6, 1, 2, 3)).reshape(c_in * ktotal, npos)
    out = (w2 @ cols).reshape(c_out, *out_sp)
    if bias is not None:
        out += bias.data[:, None, None, None]

    def backward(g):
        g2 = g.reshape(c_out, npos)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gcols = w2.T @ g2
        if xp_shape is None:
            gx = gcols.reshape(x.shape)
        else:
            gcols = gcols.reshape(c_in, *ksize, *out_sp)
            gxp = np.zeros(xp_shape, dtype=g.dtype)
            sw, sh, sd = strides
            ow, oh, od = out_sp
            for i in range(ksize[0]):
                for j in range(ksize[1]):
                    for k in range(ksize[2]):
                        gxp[:, i : i + sw * ow : sw, j : j + sh * oh : sh, k : k + sd * od : sd] += gcols[:, i, j, k]
            gx = gxp[:, pads[0] : pads[0] + spatial[0], pads[1] : pads[1] + spatial[1], pads[2] : pads[2] + spatial[2]]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward, "conv3d")


def conv_transpose3d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Transposed convolution whose stride equals its kernel size (no overlap).

    Args:
        x: ``(C_in, W, H, D)``.
        weight: ``(C_in, C_out, kw, kh, kd)``; a ``2 x 2 x 2`` kernel doubles
            every spatial extent.
        bias: optional ``(C_out,)``.
    """
    _check_volume(x, "conv_transpose3d input")
    if weight.ndim != 5 or weight.shape[0] != x.shape[0]:
        raise ShapeError(f"conv_transpose3d kernel {weight.shape} incompatible with input {x.shape}")
    c_in, w_, h_, d_ = x.shape
    _, c_out, kw, kh, kd = weight.shape
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv_transpose3d bias must have shape ({c_out},), got {bias.shape}")
    t = np.tensordot(weight.data, x.data, axes=([0], [0]))  # (C_out, kw, kh, kd, W, H, D)
    out = t.transpose(0, 4, 1, 5, 2, 6, 3).reshape(c_out, w_ * kw, h_ * kh, d_ * kd)
    if bias is not None:
        out = out + bias.data[:, None, None, None]

    def backward(g):
        gt = g.reshape(c_out, w_, kw, h_, kh, d_, kd).transpose(0, 2, 4, 6, 1, 3, 5)
        gx = np.tensordot(weight.data, gt, axes=([1, 2, 3, 4], [0, 1, 2, 3]))
        gw = np.tensordot(x.data, gt, axes=([1, 2, 3], [4, 5, 6]))
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(np.ascontiguousarray(out), parents, backward, "conv_transpose3d")


# ---------------------------------------------------------------------------
# trilinear sampling
# ---------------------------------------------------------------------------

def _axis_weights(coords: np.ndarray, n: int):
    """Clamp sample coordinates to ``[0, n-1]`` and split into lattice index/fraction."""
    clamped = np.clip(coords, 0.0, n - 1.0)
    inside = (coords > 0.0) & (coords < n - 1.0)
    i0 = np.minimum(np.floor(clamped).astype(np.int64), max(n - 2, 0))
    frac = clamped - i0
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, frac.astype(coords.dtype, copy=False), inside


def grid_sample(volume: Tensor, displacement: Tensor) -> Tensor:
    """Pull-warp ``volume`` by a voxel displacement field.

    Output voxel ``p`` takes the trilinearly interpolated value of ``volume``
    at ``p + displacement[:, p]``. Sample coordinates outside the grid are
    clamped to the border, so out-of-range samples repeat the edge value and
    contribute no displacement gradient.

    Args:
        volume: ``(C, W, H, D)``.
        displacement: ``(3, W, H, D)`` in voxels, channels (dx, dy, dz).
    """
    volume, displacement = _lift(volume), _lift(displacement)
    _check_volume(volume, "grid_sample volume")
    if displacement.shape != (3,) + volume.shape[1:]:
        raise ShapeError(f"displacement shape {displacement.shape} does not match volume grid {volume.shape[1:]}")
    c = volume.shape[0]
    dims = volume.shape[1:]
    nvox = int(np.prod(dims))
    dtype = volume.dtype
    base = np.indices(dims, dtype=dtype)
    coords = base + displacement.data.astype(dtype, copy=False)

    idx0, idx1, frac, inside = [], [], [], []
    for axis in range(3):
        a0, a1, f, m = _axis_weights(coords[axis], dims[axis])
        idx0.append(a0)
        idx1.append(a1)
        frac.append(f)
        inside.append(m)

    strides = (dims[1] * dims[2], dims[2], 1)
    flat_vol = volume.data.reshape(c, nvox)
    corners = []
    for bx in (0, 1):
        for by in (0, 1):
            for bz in (0, 1):
                ix = idx1[0] if bx else idx0[0]
                iy = idx1[1] if by else idx0[1]
                iz = idx1[2] if bz else idx0[2]
                flat = (ix * strides[0] + iy * strides[1] + iz).reshape(-1)
                wx = frac[0] if bx else 1.0 - frac[0]
                wy = frac[1] if by else 1.0 - frac[1]
                wz = frac[2] if bz else 1.0 - frac[2]
                corners.append((flat, (bx, by, bz), (wx, wy, wz)))

    out = np.zeros((c, nvox), dtype=dtype)
    for flat, _, (wx, wy, wz) in corners:
        out += flat_vol[:, flat] * (wx * wy * wz).reshape(1, -1)
    out = out.reshape(volume.shape)

    def backward(g):
        g2 = g.reshape(c, nvox)
        grad_vol = None
        grad_disp = None
        if volume.requires_grad:
            offsets = (np.arange(c) * nvox)[:, None]
            index = np.concatenate([(offsets + flat[None, :]).reshape(-1) for flat, _, _ in corners])
            weights = np.concatenate([(g2 * (wx * wy * wz).reshape(1, -1)).reshape(-1) for _, _, (wx, wy, wz) in corners])
            grad_vol = np.bincount(index, weights=weights, minlength=c * nvox).astype(dtype).reshape(volume.shape)
        if displacement.requires_grad:
            grad_disp = np.zeros((3, nvox), dtype=dtype)
            for flat, bits, w in corners:
                vals = (g2 * flat_vol[:, flat]).sum(axis=0)
                for axis in range(3):
                    dw = 1.0 if bits[axis] else -1.0
                    others = [w[o] for o in range(3) if o != axis]
                    grad_disp[axis] += vals * dw * (others[0] * others[1]).reshape(-1)
            for axis in range(3):
                grad_disp[axis] *= inside[axis].reshape(-1)
            grad_disp = grad_disp.reshape(displacement.shape)
        return grad_vol, grad_disp

    return make_node(out, (volume, displacement), backward, "grid_sample")


# ---------------------------------------------------------------------------
# resizing
# ---------------------------------------------------------------------------

def interpolation_matrix(n_in: int, factor: float, dtype=np.float64) -> np.ndarray:
    """Linear resampling matrix for one axis (half-pixel-centre convention).

    Output sample ``o`` reads input coordinate ``(o + 0.5) / factor - 0.5``,
    clamped to ``[0, n_in - 1]``.
    """
    if factor == 1:
        return np.eye(n_in, dtype=dtype)
    if factor == 0.5:
        if n_in % 2:
            raise ShapeError(f"cannot halve odd extent {n_in}")
        n_out = n_in // 2
    elif factor == 2:
        n_out = n_in * 2
    else:
        raise UsageError(f"resize factor must be 2, 1 or 1/2, got {factor}")
    src = np.clip((np.arange(n_out) + 0.5) / factor - 0.5, 0.0, n_in - 1.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), max(n_in - 2, 0))
    frac = src - i0
    i1 = np.minimum(i0 + 1, n_in - 1)
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), 1.0 - frac)
    np.add.at(mat, (rows, i1), frac)
    return mat.astype(dtype)


def _apply_axis(arr: np.ndarray, mat: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(mat, arr, axes=([1], [axis])), 0, axis)


def resize_trilinear(x: Tensor, factor) -> Tensor:
    """Resample every channel of ``x`` by 2 or 1/2 (scalar or per spatial axis)."""
    _check_volume(x, "resize_trilinear input")
    factors = (factor,) * 3 if np.isscalar(factor) else tuple(factor)
    if len(factors) != 3:
        raise UsageError(f"expected 3 per-axis factors, got {factors}")
    mats = [interpolation_matrix(n, f, x.dtype) for n, f in zip(x.shape[1:], factors)]
    out = x.data
    for axis, (f, mat) in enumerate(zip(factors, mats), start=1):
        if f != 1:
            out = _apply_axis(out, mat, axis)

    def backward(g):
        for axis, (f, mat) in enumerate(zip(factors, mats), start=1):
            if f != 1:
                g = _apply_axis(g, mat.T, axis)
        return (g,)

    return make_node(np.ascontiguousarray(out), (x,), backward, "resize_trilinear")
