"""Training objective: global NCC, Laplacian-prior KL, and their weighted sum."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import NumericError, ShapeError, UsageError
from .network import LOG_VAR_MAX, LOG_VAR_MIN, FlowDistribution
from .tensor import Tensor

logger = logging.getLogger(__name__)

NCC_EPS = 1e-8
KL_REDUCTIONS = ("sum", "voxel_mean")
# centred energy below this fraction of the raw energy counts as a constant image
_CONSTANT_RTOL = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_sim: float = 20.0
    lambda_kl: float = 0.1
    prior_lambda: float = 10.0
    kl_reduction: str = "sum"

    def __post_init__(self):
        if self.lambda_sim < 0 or self.lambda_kl < 0:
            raise UsageError("loss weights must be non-negative")
        if self.prior_lambda <= 0:
            raise UsageError("prior_lambda must be strictly positive")
        if self.kl_reduction not in KL_REDUCTIONS:
            raise UsageError(f"kl_reduction must be one of {KL_REDUCTIONS}, got {self.kl_reduction!r}")


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(getattr(x, "data", x)))


def ncc_loss(warped, fixed, eps: float = NCC_EPS, diagnostics: dict | None = None) -> Tensor:
    """One minus the Pearson correlation of two images over all voxels.

    A constant (zero-variance) input yields exactly 1 with zero gradient;
    ``diagnostics["constant_input"]`` is set when that happens.
    """
    x, y = _as_tensor(warped), _as_tensor(fixed)
    if x.shape != y.shape:
        raise ShapeError(f"ncc_loss shapes differ: {x.shape} vs {y.shape}")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = (xc * xc).sum()
    syy = (yc * yc).sum()
    constant = [
        name for name, s, raw in (("warped", sxx, x), ("fixed", syy, y))
        if s.item() <= _CONSTANT_RTOL * float(np.sum(np.square(raw.data, dtype=np.float64)))
    ]
    if diagnostics is not None:
        diagnostics["constant_input"] = constant
    if constant:
        logger.warning("ncc_loss: constant %s image, correlation undefined; returning 1", " and ".join(constant))
        return (x.sum() + y.sum()) * 0.0 + 1.0
    num = (xc * yc).sum()
    return 1.0 - num / (T.sqrt(sxx) * T.sqrt(syy) + eps)


def laplacian_degree(shape: tuple[int, ...]) -> np.ndarray:
    """Number of 6-neighbours of every voxel of a ``W x H x D`` grid."""
    deg = np.zeros(shape)
    for axis, n in enumerate(shape):
        if n < 2:
            continue
        count = np.full(n, 2.0)
        count[0] = count[-1] = 1.0
        view = [1, 1, 1]
        view[axis] = n
        deg = deg + count.reshape(view)
    return deg


def kl_loss(dist: FlowDistribution, prior_lambda: float = 10.0, reduction: str = "sum") -> Tensor:
    """KL divergence of the diagonal velocity posterior from a Laplacian prior.

    The prior precision is ``prior_lambda * L`` with ``L`` the 6-neighbour
    graph Laplacian of the grid, applied per displacement channel. Terms that
    do not depend on the network outputs are dropped:

        0.5 * (lam * sum_j d_j var_j + lam * sum_edges (mu_i - mu_j)^2 - sum_j log var_j)

    ``reduction="voxel_mean"`` divides that sum by the number of grid voxels,
    the per-voxel normalization of common Keras implementations.
    """
    if reduction not in KL_REDUCTIONS:
        raise UsageError(f"reduction must be one of {KL_REDUCTIONS}, got {reduction!r}")
    mu, log_var = dist.mu, dist.log_var
    if mu.shape != log_var.shape or mu.ndim != 4 or mu.shape[0] != 3:
        raise ShapeError(f"flow distribution tensors must both be 3 x W x H x D, got {mu.shape} / {log_var.shape}")
    if not np.all(np.isfinite(log_var.data)):
        raise NumericError("kl_loss: log-variance contains non-finite values")
    lv = T.clip(log_var, LOG_VAR_MIN, LOG_VAR_MAX)
    deg = laplacian_degree(mu.shape[1:]).astype(mu.dtype)
    var_term = (T.exp(lv) * deg).sum()
    smooth = None
    for axis in range(1, 4):
        if mu.shape[axis] < 2:
            continue
        hi = [slice(None)] * 4
        lo = [slice(None)] * 4
        hi[axis] = slice(1, None)
        lo[axis] = slice(None, -1)
        diff = mu[tuple(hi)] - mu[tuple(lo)]
        term = (diff * diff).sum()
        smooth = term if smooth is None else smooth + term
    total = var_term * prior_lambda - lv.sum()
    if smooth is not None:
        total = total + smooth * prior_lambda
    scale = 0.5 if reduction == "sum" else 0.5 / float(np.prod(mu.shape[1:]))
    return total * scale


def total_loss(warped, fixed, dist: FlowDistribution, weights: LossWeights = LossWeights()) -> tuple[Tensor, dict[str, Tensor]]:
    """``lambda_sim * ncc + lambda_kl * kl`` plus the separate terms."""
    ncc = ncc_loss(warped, fixed)
    kl = kl_loss(dist, weights.prior_lambda, weights.kl_reduction)
    total = ncc * weights.lambda_sim + kl * weights.lambda_kl
    return total, {"ncc": ncc, "kl": kl}
