"""Cross-image co-attention between moving and fixed feature maps.

Both inputs are projected by 1x1x1 convolutions and flattened to ``N x C``
(``N = W*H*D``). Their product gives the ``N x N`` similarity matrix ``S``;
row-normalised ``S`` pulls fixed-image features to every moving position and
row-normalised ``S^T`` does the converse. Each attention map passes through a
1x1x1 convolution and a sigmoid and gates its own projection, scaled by a
learned weight:

    O_mov = h1(F_mov) + alpha_mov * gate_mov(ATT_mov) * h1(F_mov)
    O_fix = h2(F_fix) + alpha_fix * gate_fix(ATT_fix) * h2(F_fix)
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .errors import ResourceError, ShapeError
from .functional import conv3d
from .tensor import Tensor

DEFAULT_MAX_POSITIONS = 8192


@dataclass
class CoAttentionParams:
    f_weight: Tensor
    f_bias: Tensor
    g_weight: Tensor
    g_bias: Tensor
    h1_weight: Tensor
    h1_bias: Tensor
    h2_weight: Tensor
    h2_bias: Tensor
    gate_mov_weight: Tensor
    gate_mov_bias: Tensor
    gate_fix_weight: Tensor
    gate_fix_bias: Tensor
    alpha_mov: Tensor
    alpha_fix: Tensor

    def __post_init__(self):
        c_att, c_in = self.f_weight.shape[:2]
        for name in ("f", "g", "h1", "h2"):
            w = getattr(self, f"{name}_weight")
            if w.shape != (c_att, c_in, 1, 1, 1):
                raise ShapeError(f"projection {name} has shape {w.shape}, expected {(c_att, c_in, 1, 1, 1)}")
        for name in ("gate_mov", "gate_fix"):
            w = getattr(self, f"{name}_weight")
            if w.shape != (c_att, c_att, 1, 1, 1):
                raise ShapeError(f"{name} has shape {w.shape}, expected {(c_att, c_att, 1, 1, 1)}")

    @property
    def in_channels(self) -> int:
        return self.f_weight.shape[1]

    @property
    def att_channels(self) -> int:
        return self.f_weight.shape[0]

    def named(self, prefix: str = "coatt.") -> dict[str, Tensor]:
        return {prefix + f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_named(cls, params: dict[str, Tensor], prefix: str = "coatt.") -> "CoAttentionParams":
        return cls(**{f.name: params[prefix + f.name] for f in fields(cls)})


def init_coattention(c_in: int, c_att: int, rng: np.random.Generator, alpha: float = 0.0,
                     requires_grad: bool = True) -> CoAttentionParams:
    """He-normal 1x1x1 projections, zero biases and constant alpha."""

    def conv(c_out, c_inp):
        std = np.sqrt(2.0 / c_inp)
        w = Tensor(rng.normal(0.0, std, size=(c_out, c_inp, 1, 1, 1)), requires_grad=requires_grad)
        b = Tensor(np.zeros(c_out), requires_grad=requires_grad)
        return w, b

    f = conv(c_att, c_in)
    g = conv(c_att, c_in)
    h1 = conv(c_att, c_in)
    h2 = conv(c_att, c_in)
    gm = conv(c_att, c_att)
    gf = conv(c_att, c_att)
    return CoAttentionParams(
        *f, *g, *h1, *h2, *gm, *gf,
        alpha_mov=Tensor([alpha], requires_grad=requires_grad),
        alpha_fix=Tensor([alpha], requires_grad=requires_grad),
    )


@dataclass
class CoAttentionOutput:
    similarity: Tensor  # S, N x N
    att_mov: Tensor
    att_fix: Tensor
    gate_mov: Tensor  # sigmoid(conv(ATT_mov))
    gate_fix: Tensor
    o_mov: Tensor
    o_fix: Tensor


def _flatten(t: Tensor) -> Tensor:
    """C x W x H x D -> N x C."""
    return T.transpose(T.reshape(t, (t.shape[0], -1)), (1, 0))


def _unflatten(t: Tensor, spatial: tuple[int, ...]) -> Tensor:
    """N x C -> C x W x H x D."""
    return T.reshape(T.transpose(t, (1, 0)), (t.shape[1],) + tuple(spatial))


def co_attention_forward(f_mov: Tensor, f_fix: Tensor, params: CoAttentionParams,
                         max_positions: int = DEFAULT_MAX_POSITIONS) -> CoAttentionOutput:
    """Run the co-attention block on one pair of ``C x W x H x D`` feature maps."""
    if f_mov.shape != f_fix.shape:
        raise ShapeError(f"moving features {f_mov.shape} and fixed features {f_fix.shape} differ")
    if f_mov.ndim != 4 or f_mov.shape[0] != params.in_channels:
        raise ShapeError(f"features must be {params.in_channels} x W x H x D, got {f_mov.shape}")
    spatial = f_mov.shape[1:]
    n = int(np.prod(spatial))
    if n > max_positions:
        raise ResourceError(
            f"co-attention over {n} positions exceeds the budget of {max_positions} "
            f"(the similarity matrix alone needs {n * n * f_mov.dtype.itemsize / 2**20:.0f} MiB); "
            "downsample the features further or raise max_positions"
        )

    p = params
    h1 = conv3d(f_mov, p.h1_weight, p.h1_bias)
    h2 = conv3d(f_fix, p.h2_weight, p.h2_bias)
    s = T.matmul(_flatten(conv3d(f_mov, p.f_weight, p.f_bias)),
                 T.transpose(_flatten(conv3d(f_fix, p.g_weight, p.g_bias)), (1, 0)))
    att_mov = _unflatten(T.matmul(T.softmax(s, axis=1), _flatten(h2)), spatial)
    att_fix = _unflatten(T.matmul(T.softmax(T.transpose(s, (1, 0)), axis=1), _flatten(h1)), spatial)
    gate_mov = T.sigmoid(conv3d(att_mov, p.gate_mov_weight, p.gate_mov_bias))
    gate_fix = T.sigmoid(conv3d(att_fix, p.gate_fix_weight, p.gate_fix_bias))
    o_mov = h1 + p.alpha_mov * gate_mov * h1
    o_fix = h2 + p.alpha_fix * gate_fix * h2
    return CoAttentionOutput(s, att_mov, att_fix, gate_mov, gate_fix, o_mov, o_fix)


def plain_projection_forward(f_mov: Tensor, f_fix: Tensor, params: CoAttentionParams) -> tuple[Tensor, Tensor]:
    """Ablated block: only the h1/h2 projections, no attention path."""
    return (conv3d(f_mov, params.h1_weight, params.h1_bias),
            conv3d(f_fix, params.h2_weight, params.h2_bias))
