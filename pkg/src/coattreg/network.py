"""Co-attention guided probabilistic registration network.

Pipeline for one (moving, fixed) pair of ``W x H x D`` images:

1. a shared two-layer stride-2 stem gives 16-channel quarter-resolution
   features for each image;
2. the co-attention block produces ``O_mov``, ``O_fix``;
3. ``[F_mov, F_fix, O_mov, O_fix]`` is upsampled once by a transposed
   convolution and passed through a U-Net at half resolution;
4. two 3x3x3 heads emit the mean and log-variance of a diagonal Gaussian
   over the stationary velocity field;
5. a velocity sample is integrated by scaling and squaring, upsampled to
   full resolution and used to pull-warp the moving image.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .coattention import (
    DEFAULT_MAX_POSITIONS,
    CoAttentionOutput,
    CoAttentionParams,
    co_attention_forward,
    plain_projection_forward,
)
from .errors import ShapeError, UsageError
from .functional import conv3d, conv_transpose3d, grid_sample, resize_trilinear
from .tensor import Tensor

logger = logging.getLogger(__name__)

LOG_VAR_MIN = -20.0
LOG_VAR_MAX = 5.0
LEAKY_SLOPE = 0.2
DEFAULT_LOG_VAR = -10.0
INIT_SCHEMES = ("default", "zeros", "random")


@dataclass(frozen=True)
class NetworkConfig:
    in_shape: tuple[int, int, int] = (32, 32, 16)
    stem_channels: tuple[int, int] = (8, 16)
    att_channels: int = 16
    unet_depth: int = 3
    unet_channels: tuple[int, ...] = (16, 32, 32, 32)
    integration_steps: int = 7
    seed: int = 0
    max_attention_positions: int = DEFAULT_MAX_POSITIONS

    def __post_init__(self):
        for name in ("in_shape", "stem_channels", "unet_channels"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        w, h, d = self.in_shape
        if len(self.stem_channels) != 2:
            raise ShapeError(f"stem_channels needs two entries, got {self.stem_channels}")
        if self.unet_depth < 1:
            raise ShapeError("unet_depth must be >= 1")
        if len(self.unet_channels) != self.unet_depth + 1:
            raise ShapeError(
                f"unet_channels needs unet_depth + 1 = {self.unet_depth + 1} entries, got {self.unet_channels}"
            )
        if self.integration_steps < 1:
            raise UsageError("integration_steps must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise UsageError("seed must be an unsigned 64-bit integer")
        step = 4 * 2**self.unet_depth
        if w % step or h % step:
            raise ShapeError(f"in-plane extents {w}x{h} must be divisible by 4*2^unet_depth = {step}")
        if d % 4:
            raise ShapeError(f"depth {d} must be divisible by 4")
        if self.depth_per_axis[2] < self.unet_depth:
            logger.info("U-Net depth along z clamped from %d to %d for D=%d",
                        self.unet_depth, self.depth_per_axis[2], d)

    @property
    def depth_per_axis(self) -> tuple[int, int, int]:
        d = self.in_shape[2]
        dz = 0
        while dz < self.unet_depth and d % (4 * 2 ** (dz + 1)) == 0:
            dz += 1
        return (self.unet_depth, self.unet_depth, dz)

    def level_strides(self, level: int) -> tuple[int, int, int]:
        """Per-axis stride of U-Net encoder level ``level`` (1-based)."""
        return tuple(2 if level <= depth else 1 for depth in self.depth_per_axis)

    @property
    def quarter_shape(self) -> tuple[int, int, int]:
        return tuple(n // 4 for n in self.in_shape)

    @property
    def half_shape(self) -> tuple[int, int, int]:
        return tuple(n // 2 for n in self.in_shape)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ShapeError(f"unknown network config fields: {sorted(unknown)}")
        return cls(**data)

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass
class FlowDistribution:
    mu: Tensor
    log_var: Tensor


@dataclass
class DeformationField:
    disp: Tensor
    resolution: str = "full"

    def __post_init__(self):
        if self.resolution not in ("half", "full"):
            raise UsageError(f"resolution must be 'half' or 'full', got {self.resolution!r}")
        if self.disp.ndim != 4 or self.disp.shape[0] != 3:
            raise ShapeError(f"deformation field must be 3 x W x H x D, got {self.disp.shape}")


@dataclass
class Registration:
    warped: Tensor
    flow: DeformationField
    dist: FlowDistribution
    attention: CoAttentionOutput | None
    features: tuple[Tensor, Tensor] = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def parameter_shapes(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map of every trainable tensor."""
    s0, s1 = config.stem_channels
    ca = config.att_channels
    ch = config.unet_channels
    shapes: dict[str, tuple[int, ...]] = {
        "stem.0.weight": (s0, 1, 3, 3, 3),
        "stem.0.bias": (s0,),
        "stem.1.weight": (s1, s0, 3, 3, 3),
        "stem.1.bias": (s1,),
    }
    for name in ("f", "g", "h1", "h2"):
        shapes[f"coatt.{name}_weight"] = (ca, s1, 1, 1, 1)
        shapes[f"coatt.{name}_bias"] = (ca,)
    for name in ("gate_mov", "gate_fix"):
        shapes[f"coatt.{name}_weight"] = (ca, ca, 1, 1, 1)
        shapes[f"coatt.{name}_bias"] = (ca,)
    shapes["coatt.alpha_mov"] = (1,)
    shapes["coatt.alpha_fix"] = (1,)
    shapes["up.weight"] = (2 * s1 + 2 * ca, ch[0], 2, 2, 2)
    shapes["up.bias"] = (ch[0],)
    shapes["unet.enc0.weight"] = (ch[0], ch[0], 3, 3, 3)
    shapes["unet.enc0.bias"] = (ch[0],)
    for level in range(1, config.unet_depth + 1):
        shapes[f"unet.enc{level}.weight"] = (ch[level], ch[level - 1], 3, 3, 3)
        shapes[f"unet.enc{level}.bias"] = (ch[level],)
    for level in range(config.unet_depth, 0, -1):
        shapes[f"unet.dec{level}.weight"] = (ch[level - 1], ch[level] + ch[level - 1], 3, 3, 3)
        shapes[f"unet.dec{level}.bias"] = (ch[level - 1],)
    for head in ("mu", "log_var"):
        shapes[f"head.{head}.weight"] = (3, ch[0], 3, 3, 3)
        shapes[f"head.{head}.bias"] = (3,)
    return shapes


def init_params(config: NetworkConfig, scheme: str = "default", dtype=None) -> dict[str, Tensor]:
    """Create the parameter registry for ``config``.

    Schemes:
        ``default``: He-normal convolutions (leaky-ReLU gain), zero biases,
            zero alphas, zero mean head and log-variance bias -10, so the
            untrained network predicts the identity transform.
        ``zeros``: every tensor zero except the log-variance bias, which sits
            at the clamp floor (-20) so sampled flows stay at the identity.
        ``random``: like ``default`` but with random heads, small random
            biases and nonzero alphas; used for gradient checks.
    """
    if scheme not in INIT_SCHEMES:
        raise UsageError(f"unknown init scheme {scheme!r}; choose from {INIT_SCHEMES}")
    rng = np.random.default_rng(config.seed)
    gain = np.sqrt(2.0 / (1.0 + LEAKY_SLOPE**2))
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        if scheme == "zeros":
            value = np.zeros(shape)
            if name == "head.log_var.bias":
                value[:] = LOG_VAR_MIN
        elif name.startswith("coatt.alpha"):
            value = np.full(shape, 0.0) if scheme == "default" else rng.normal(0.5, 0.25, size=shape)
        elif name.startswith("head."):
            if scheme == "default":
                value = np.full(shape, DEFAULT_LOG_VAR) if name == "head.log_var.bias" else np.zeros(shape)
            elif name.endswith("bias"):
                value = rng.normal(-4.0 if "log_var" in name else 0.0, 0.1, size=shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                value = rng.normal(0.0, 0.3 / np.sqrt(fan_in), size=shape)
        elif name.endswith("bias"):
            value = np.zeros(shape) if scheme == "default" else rng.normal(0.0, 0.1, size=shape)
        else:
            fan_in = shape[0] * 8 if name == "up.weight" else int(np.prod(shape[1:]))
            value = rng.normal(0.0, gain / np.sqrt(fan_in), size=shape)
        params[name] = Tensor(value, requires_grad=True, dtype=dtype, name=name)
    return params


# ---------------------------------------------------------------------------
# standalone stages
# ---------------------------------------------------------------------------

def _lrelu(x: Tensor) -> Tensor:
    return T.leaky_relu(x, LEAKY_SLOPE)


def sample_velocity(dist: FlowDistribution, mode: str = "sample", rng: np.random.Generator | None = None) -> Tensor:
    """Draw ``z = mu + exp(log_var / 2) * eps`` (reparameterised) or return ``mu``."""
    if mode == "mean":
        return dist.mu
    if mode != "sample":
        raise UsageError(f"mode must be 'sample' or 'mean', got {mode!r}")
    if rng is None:
        raise UsageError("sampling needs a seeded numpy Generator")
    eps = rng.standard_normal(dist.mu.shape).astype(dist.mu.dtype)
    std = T.exp(T.clip(dist.log_var, LOG_VAR_MIN, LOG_VAR_MAX) * 0.5)
    return dist.mu + std * eps


def integrate_svf(z: Tensor, steps: int = 7) -> Tensor:
    """Exponentiate a stationary velocity field by scaling and squaring.

    ``u_0 = z / 2^steps`` and ``u_{k+1} = u_k + u_k(x + u_k(x))``; returns the
    displacement of ``exp(z)`` on the same grid.
    """
    if steps < 1:
        raise UsageError(f"integration needs at least one step, got {steps}")
    if z.ndim != 4 or z.shape[0] != 3:
        raise ShapeError(f"velocity field must be 3 x W x H x D, got {z.shape}")
    u = z * (1.0 / 2**steps)
    for _ in range(steps):
        u = u + grid_sample(u, u)
    return u


def upsample_flow(field_half: DeformationField) -> DeformationField:
    """Half- to full-resolution field: trilinear x2 resize, values doubled."""
    if field_half.resolution != "half":
        raise UsageError("upsample_flow expects a half-resolution field")
    return DeformationField(resize_trilinear(field_half.disp, 2) * 2.0, "full")


def as_image(image) -> Tensor:
    """Accept a Volume, ``W x H x D`` / ``1 x W x H x D`` array, or Tensor."""
    data = getattr(image, "data", image)
    if isinstance(image, Tensor):
        t = image
    else:
        t = Tensor(np.asarray(data))
    if t.ndim == 3:
        t = T.reshape(t, (1,) + t.shape)
    if t.ndim != 4 or t.shape[0] != 1:
        raise ShapeError(f"images must be single-channel W x H x D volumes, got shape {t.shape}")
    return t


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

class RegistrationNet:
    """Forward model over a parameter registry.

    Args:
        config: architecture/shape configuration.
        params: name -> Tensor registry (see :func:`parameter_shapes`);
            created with ``init_params(config)`` when omitted.
        attention: ``"coattention"`` (full model) or ``"plain"`` (attention
            path replaced by the h1/h2 projections; an ablation).
    """

    def __init__(self, config: NetworkConfig, params: dict[str, Tensor] | None = None,
                 attention: str = "coattention"):
        if attention not in ("coattention", "plain"):
            raise UsageError(f"attention must be 'coattention' or 'plain', got {attention!r}")
        self.config = config
        self.params = init_params(config) if params is None else params
        self.attention = attention
        expected = parameter_shapes(config)
        missing = [k for k in expected if k not in self.params]
        if missing:
            raise ShapeError(f"parameter registry lacks {missing}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"parameter {name} has shape {self.params[name].shape}, config expects {shape}")

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def _conv(self, x: Tensor, name: str, stride=1) -> Tensor:
        return conv3d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], stride=stride)

    def _check_input(self, image: Tensor, what: str) -> None:
        if image.shape[1:] != self.config.in_shape:
            raise ShapeError(f"{what} image has shape {image.shape[1:]}, network expects {self.config.in_shape}")

    def extract_features(self, moving, fixed) -> tuple[Tensor, Tensor]:
        """Shared stem applied to both images; returns quarter-resolution maps."""
        moving, fixed = as_image(moving), as_image(fixed)
        self._check_input(moving, "moving")
        self._check_input(fixed, "fixed")

        def stem(x):
            x = _lrelu(self._conv(x, "stem.0", stride=2))
            return _lrelu(self._conv(x, "stem.1", stride=2))

        return stem(moving), stem(fixed)

    def co_attention(self, f_mov: Tensor, f_fix: Tensor) -> CoAttentionOutput | tuple[Tensor, Tensor]:
        params = CoAttentionParams.from_named(self.params)
        if self.attention == "plain":
            return plain_projection_forward(f_mov, f_fix, params)
        return co_attention_forward(f_mov, f_fix, params, self.config.max_attention_positions)

    def predict_flow_distribution(self, f_mov, f_fix, o_mov, o_fix) -> FlowDistribution:
        cfg = self.config
        shapes = {t.shape[1:] for t in (f_mov, f_fix, o_mov, o_fix)}
        if shapes != {cfg.quarter_shape}:
            raise ShapeError(f"flow predictor inputs must share quarter-resolution shape {cfg.quarter_shape}")
        x = T.concat([f_mov, f_fix, o_mov, o_fix], axis=0)
        x = _lrelu(conv_transpose3d(x, self.params["up.weight"], self.params["up.bias"]))
        x = _lrelu(self._conv(x, "unet.enc0"))
        skips = [x]
        for level in range(1, cfg.unet_depth + 1):
            x = _lrelu(self._conv(x, f"unet.enc{level}", stride=cfg.level_strides(level)))
            skips.append(x)
        for level in range(cfg.unet_depth, 0, -1):
            x = resize_trilinear(x, cfg.level_strides(level))
            x = T.concat([x, skips[level - 1]], axis=0)
            x = _lrelu(self._conv(x, f"unet.dec{level}"))
        return FlowDistribution(self._conv(x, "head.mu"), self._conv(x, "head.log_var"))

    def forward(self, moving, fixed, mode: str = "mean", rng: np.random.Generator | None = None) -> Registration:
        """Register ``moving`` onto ``fixed`` (``I_F ~ I_M o phi``)."""
        moving_t = as_image(moving)
        f_mov, f_fix = self.extract_features(moving_t, fixed)
        att = self.co_attention(f_mov, f_fix)
        if isinstance(att, CoAttentionOutput):
            o_mov, o_fix = att.o_mov, att.o_fix
        else:
            (o_mov, o_fix), att = att, None
        dist = self.predict_flow_distribution(f_mov, f_fix, o_mov, o_fix)
        z = sample_velocity(dist, mode, rng)
        half = DeformationField(integrate_svf(z, self.config.integration_steps), "half")
        flow = upsample_flow(half)
        warped = grid_sample(moving_t, flow.disp)
        return Registration(warped, flow, dist, att, (f_mov, f_fix))

    __call__ = forward


def register_pair(moving, fixed, net: RegistrationNet, mode: str = "mean",
                  rng: np.random.Generator | None = None) -> Registration:
    return net.forward(moving, fixed, mode, rng)
