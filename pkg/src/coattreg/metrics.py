"""Evaluation metrics: Dice, Hausdorff distance, Jacobian folding analysis."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import DataError, ShapeError, UsageError

STRUCTURES = {1: "lvbp", 2: "lvm", 3: "rv"}


@dataclass
class LabelVolume:
    labels: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise ShapeError(f"label volume must be W x H x D, got shape {self.labels.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            rounded = np.rint(self.labels)
            if not np.array_equal(rounded, self.labels):
                raise DataError("label volume contains non-integer values")
            self.labels = rounded.astype(np.int16)
        bad = np.setdiff1d(np.unique(self.labels), [0, *STRUCTURES])
        if bad.size:
            raise DataError(f"label volume contains undeclared labels {bad.tolist()}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape


@dataclass
class JacobianReport:
    det_map: np.ndarray  # interior voxels only
    foldings: int
    jacobian_min: float


@dataclass
class EvalReport:
    dice: dict[str, float]
    avg_dice: float
    hd_mm: float  # whole-foreground mask
    hd_structure_mm: dict[str, float] = field(default_factory=dict)
    foldings: int = 0
    jacobian_min: float = 1.0

    def as_record(self) -> dict:
        rec = {f"{name}_dice": self.dice[name] for name in STRUCTURES.values()}
        rec["avg_dice"] = self.avg_dice
        rec["hd_mm"] = self.hd_mm
        rec["foldings"] = self.foldings
        rec["jacobian_min"] = self.jacobian_min
        for name, value in self.hd_structure_mm.items():
            rec[f"{name}_hd_mm"] = value
        return rec


def _disp_array(flow) -> np.ndarray:
    disp = getattr(flow, "disp", flow)
    disp = np.asarray(getattr(disp, "data", disp), dtype=np.float64)
    if disp.ndim != 4 or disp.shape[0] != 3:
        raise ShapeError(f"flow must be 3 x W x H x D, got {disp.shape}")
    return disp


def warp_labels(labels: LabelVolume, flow) -> LabelVolume:
    """Nearest-neighbour pull warp: output(p) = labels(round(p + disp(p))), border-clamped."""
    disp = _disp_array(flow)
    if disp.shape[1:] != labels.shape:
        raise ShapeError(f"flow grid {disp.shape[1:]} does not match labels {labels.shape}")
    coords = np.indices(labels.shape, dtype=np.float64) + disp
    idx = [np.clip(np.floor(coords[a] + 0.5), 0, labels.shape[a] - 1).astype(np.int64) for a in range(3)]
    return LabelVolume(labels.labels[idx[0], idx[1], idx[2]], labels.spacing_mm)


def _check_pair(a: LabelVolume, b: LabelVolume) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"label volumes differ in shape: {a.shape} vs {b.shape}")


def _structure_id(structure) -> int:
    if isinstance(structure, str):
        lookup = {v: k for k, v in STRUCTURES.items()}
        if structure.lower() not in lookup:
            raise UsageError(f"unknown structure {structure!r}")
        return lookup[structure.lower()]
    if structure not in STRUCTURES:
        raise UsageError(f"unknown structure id {structure!r}; expected one of {sorted(STRUCTURES)}")
    return int(structure)


def dice(a: LabelVolume, b: LabelVolume, structure) -> float:
    """2|A n B| / (|A| + |B|); 1 when both masks are empty."""
    _check_pair(a, b)
    sid = _structure_id(structure)
    ma, mb = a.labels == sid, b.labels == sid
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one 6-neighbour outside the mask (or the grid)."""
    eroded = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(3, 1), border_value=0)
    return mask & ~eroded


def hausdorff_masks(ma: np.ndarray, mb: np.ndarray, spacing_mm, what: str = "mask") -> float:
    if not ma.any() or not mb.any():
        raise DataError(f"Hausdorff distance undefined: {what} is empty in {'first' if not ma.any() else 'second'} volume")
    scale = np.asarray(spacing_mm, dtype=np.float64)
    pa = np.argwhere(boundary(ma)) * scale
    pb = np.argwhere(boundary(mb)) * scale
    d_ab = cKDTree(pb).query(pa)[0].max()
    d_ba = cKDTree(pa).query(pb)[0].max()
    return float(max(d_ab, d_ba))


def hausdorff(a: LabelVolume, b: LabelVolume, structure=None) -> float:
    """Symmetric Hausdorff distance (mm) between boundary voxel centres.

    ``structure=None`` compares the whole foreground (all labels > 0).
    """
    _check_pair(a, b)
    if structure is None:
        return hausdorff_masks(a.labels > 0, b.labels > 0, a.spacing_mm, "foreground")
    sid = _structure_id(structure)
    return hausdorff_masks(a.labels == sid, b.labels == sid, a.spacing_mm, STRUCTURES[sid])


def jacobian_determinant(disp: np.ndarray) -> np.ndarray:
    """det(I + grad u) on interior voxels, central differences in voxel units."""
    disp = _disp_array(disp)
    if min(disp.shape[1:]) < 3:
        return np.zeros((0, 0, 0))
    # jac[c][a] = d u_c / d x_a
    jac = [[None] * 3 for _ in range(3)]
    for c in range(3):
        for a in range(3):
            hi = [slice(1, -1)] * 3
            lo = [slice(1, -1)] * 3
            hi[a] = slice(2, None)
            lo[a] = slice(None, -2)
            jac[c][a] = (disp[c][tuple(hi)] - disp[c][tuple(lo)]) / 2.0
        jac[c][c] = jac[c][c] + 1.0
    (a, b, c), (d, e, f), (g, h, i) = jac
    return a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)


def jacobian_analysis(flow) -> JacobianReport:
    det = jacobian_determinant(_disp_array(flow))
    if det.size == 0:
        return JacobianReport(det, 0, float("nan"))
    return JacobianReport(det, int(np.count_nonzero(det <= 0)), float(det.min()))


def evaluate_registration(moving_labels: LabelVolume, fixed_labels: LabelVolume, flow) -> EvalReport:
    """Warp the moving labels by ``flow`` and score them against the fixed labels."""
    _check_pair(moving_labels, fixed_labels)
    warped = warp_labels(moving_labels, flow)
    scores = {name: dice(warped, fixed_labels, sid) for sid, name in STRUCTURES.items()}
    hd_struct = {name: hausdorff(warped, fixed_labels, sid) for sid, name in STRUCTURES.items()}
    jac = jacobian_analysis(flow)
    return EvalReport(
        dice=scores,
        avg_dice=float(np.mean(list(scores.values()))),
        hd_mm=hausdorff(warped, fixed_labels, None),
        hd_structure_mm=hd_struct,
        foldings=jac.foldings,
        jacobian_min=jac.jacobian_min,
    )
