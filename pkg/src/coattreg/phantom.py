"""Synthetic cardiac-like phantoms with known diffeomorphic deformations.

All randomness comes from numpy's PCG64 ``default_rng`` seeded with the
case seed, so a seed fully determines a case within one build.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import UsageError
from .metrics import LabelVolume, warp_labels
from .network import DeformationField, integrate_svf, upsample_flow
from .functional import grid_sample
from .tensor import Tensor, no_grad, precision
from .volio import Volume

DEFAULT_SHAPE = (32, 32, 16)
DEFAULT_SPACING = (1.5, 1.5, 3.15)
INTENSITY = {1: 0.9, 2: 0.7, 3: 0.45}
MIN_INPLANE = 16


@dataclass
class SynthCase:
    moving: Volume
    fixed: Volume
    moving_labels: LabelVolume
    fixed_labels: LabelVolume
    gt_flow: DeformationField
    seed: int


def _ellipsoid(grid, center, axes) -> np.ndarray:
    r2 = sum(((g - c) / a) ** 2 for g, c, a in zip(grid, center, axes))
    return r2 <= 1.0


def generate_phantom(seed: int, shape=DEFAULT_SHAPE, spacing=DEFAULT_SPACING,
                     rng: np.random.Generator | None = None) -> tuple[Volume, LabelVolume]:
    """Blood pool inside a myocardial shell with a right-ventricle crescent beside it.

    Labels: 1 = LVBP (0.9), 2 = LVM (0.7), 3 = RV (0.45), background 0. The
    image is blurred (sigma 1 voxel) and gets N(0, 0.02) noise; labels are
    left exact.
    """
    w, h, d = (int(n) for n in shape)
    if w < MIN_INPLANE or h < MIN_INPLANE:
        raise UsageError(f"phantom needs at least {MIN_INPLANE} voxels in x and y, got {w}x{h}")
    if d < 8:
        raise UsageError(f"phantom needs at least 8 slices, got {d}")
    rng = np.random.default_rng(seed) if rng is None else rng
    s = min(w, h) / 32.0
    grid = np.indices((w, h, d), dtype=np.float64)

    center = np.array([w / 2 + rng.uniform(-1.5, 1.5) * s + 2 * s,
                       h / 2 + rng.uniform(-1.5, 1.5) * s,
                       (d - 1) / 2 + rng.uniform(-0.5, 0.5)])
    pool_axes = np.array([rng.uniform(3.5, 5.0) * s, rng.uniform(3.5, 5.0) * s, rng.uniform(0.22, 0.28) * d])
    wall = rng.uniform(2.0, 3.0) * s
    wall_axes = pool_axes + np.array([wall, wall, 1.5])

    lvbp = _ellipsoid(grid, center, pool_axes)
    outer = _ellipsoid(grid, center, wall_axes)
    six = ndimage.generate_binary_structure(3, 1)
    outer |= ndimage.binary_dilation(lvbp, structure=six)
    lvm = outer & ~lvbp

    rv_axes = np.array([rng.uniform(3.5, 4.5) * s, rng.uniform(6.5, 8.0) * s, pool_axes[2] + 1.0])
    rv_center = center.copy()
    rv_center[0] -= wall_axes[0] + 0.35 * rv_axes[0]
    rv_center[1] += rng.uniform(-1.0, 1.0) * s
    rv = _ellipsoid(grid, rv_center, rv_axes) & ~ndimage.binary_dilation(outer, structure=six)

    labels = np.zeros((w, h, d), dtype=np.int16)
    labels[rv] = 3
    labels[lvm] = 2
    labels[lvbp] = 1

    image = np.zeros((w, h, d))
    for lab, value in INTENSITY.items():
        image[labels == lab] = value
    image = ndimage.gaussian_filter(image, sigma=1.0, mode="nearest")
    image += rng.normal(0.0, 0.02, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return Volume(image[None], spacing), LabelVolume(labels, spacing)


def random_smooth_velocity(rng: np.random.Generator, shape, max_norm: float, sigma: float = 2.0) -> np.ndarray:
    """Gaussian-smoothed white noise rescaled so the largest vector norm is ``max_norm``."""
    noise = rng.standard_normal((3,) + tuple(shape))
    field = np.stack([ndimage.gaussian_filter(c, sigma=sigma, mode="nearest") for c in noise])
    peak = np.sqrt((field**2).sum(axis=0)).max()
    if max_norm == 0 or peak == 0:
        return np.zeros_like(field)
    return field * (max_norm / peak)


def generate_gt_pair(seed: int, shape=DEFAULT_SHAPE, spacing=DEFAULT_SPACING, max_disp_voxels: float = 3.0,
                     steps: int = 7, sigma: float = 2.0) -> SynthCase:
    """Phantom plus a ground-truth SVF warp of it.

    Half-resolution white noise is smoothed, scaled so its peak vector
    magnitude is ``max_disp_voxels`` (half-resolution voxels), integrated and
    upsampled (which doubles the values). The fixed image and labels are the
    moving ones pulled through that field.
    """
    if max_disp_voxels < 0:
        raise UsageError("max_disp_voxels must be non-negative")
    rng = np.random.default_rng(seed)
    moving, moving_labels = generate_phantom(seed, shape, spacing, rng=rng)
    half = tuple(n // 2 for n in moving.shape)
    z = random_smooth_velocity(rng, half, max_disp_voxels, sigma)
    with precision("float64"), no_grad():
        half_field = DeformationField(integrate_svf(Tensor(z), steps), "half")
        flow = upsample_flow(half_field).disp.data.astype(np.float32)
        fixed = grid_sample(Tensor(moving.data), Tensor(flow)).data
    gt = DeformationField(Tensor(flow, dtype=np.float32), "full")
    fixed_labels = warp_labels(moving_labels, gt)
    return SynthCase(moving, Volume(fixed, spacing), moving_labels, fixed_labels, gt, seed)
