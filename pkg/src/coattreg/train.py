"""Adam training loop, checkpoint round-trips and dataset handling.

Determinism: the batch composition of iteration ``t`` and the velocity
noise of batch member ``j`` are drawn from generators seeded with
``(seed, epoch)`` and ``(seed, t, j)`` respectively, so resuming from a
checkpoint at iteration ``n`` replays exactly what an uninterrupted run
would have done.
"""

from __future__ import annotations

import logging
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DataError, NumericError, ShapeError
from .losses import LossWeights, ncc_loss, total_loss
from .metrics import STRUCTURES, EvalReport, LabelVolume, evaluate_registration
from .network import NetworkConfig, RegistrationNet, init_params
from .tensor import Tensor, no_grad
from .volio import Volume, checkpoint_load, checkpoint_save, read_volume

logger = logging.getLogger(__name__)

_BATCH_TAG = 0xBA7C


class Adam:
    """Adam with bias correction; moments are kept per parameter name."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{k}": v for k, v in self.m.items()}
        out.update({f"opt.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, tensors: dict[str, np.ndarray], step_count: int) -> None:
        for name, p in self.params.items():
            for kind, store in (("m", self.m), ("v", self.v)):
                key = f"opt.{kind}.{name}"
                if key not in tensors:
                    raise DataError(f"checkpoint lacks optimizer tensor '{key}'")
                if tensors[key].shape != p.shape:
                    raise ShapeError(f"optimizer tensor '{key}' has shape {tensors[key].shape}, expected {p.shape}")
                store[name] = tensors[key].astype(p.dtype).copy()
        self.step_count = int(step_count)


@dataclass(frozen=True)
class TrainConfig:
    iters: int = 500
    lr: float = 1e-4
    batch: int = 2
    lambda_sim: float = 20.0
    lambda_kl: float = 0.1
    prior_lambda: float = 10.0
    kl_reduction: str = "sum"
    seed: int = 0
    save_every: int = 0

    def __post_init__(self):
        from .errors import UsageError

        if self.iters < 1 or self.batch < 1:
            raise UsageError("iters and batch must be >= 1")
        if self.lr <= 0:
            raise UsageError("learning rate must be positive")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_sim, self.lambda_kl, self.prior_lambda, self.kl_reduction)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class Case:
    name: str
    moving: Volume
    fixed: Volume
    moving_labels: LabelVolume | None = None
    fixed_labels: LabelVolume | None = None


def _case_key(path: Path):
    match = re.search(r"(\d+)$", path.name)
    return (int(match.group(1)) if match else -1, path.name)


def load_cases(data_dir, with_labels: bool = False) -> list[Case]:
    """Read every ``case_<k>`` directory under ``data_dir`` in numeric order."""
    root = Path(data_dir)
    if not root.is_dir():
        raise DataError(f"data directory {root} does not exist")
    dirs = sorted((p for p in root.iterdir() if p.is_dir() and p.name.startswith("case_")), key=_case_key)
    cases = []
    for d in dirs:
        try:
            moving, fixed = read_volume(d / "moving"), read_volume(d / "fixed")
        except FileNotFoundError as exc:
            raise DataError(f"{d.name}: missing image file {Path(exc.filename).name}") from exc
        case = Case(d.name, moving, fixed)
        if with_labels:
            try:
                labels = read_volume(d / "labels")
            except FileNotFoundError as exc:
                raise DataError(f"{d.name}: missing labels ({Path(exc.filename).name})") from exc
            if labels.channels != 2:
                raise DataError(f"{d.name}: labels volume must have 2 channels (moving, fixed)")
            case.moving_labels = LabelVolume(labels.data[0], labels.spacing_mm)
            case.fixed_labels = LabelVolume(labels.data[1], labels.spacing_mm)
        cases.append(case)
    if not cases:
        raise DataError(f"no case_<k> directories found in {root}")
    return cases


def training_samples(cases: Sequence) -> list[tuple[np.ndarray, np.ndarray]]:
    """Both registration directions of every case, in case order."""
    samples = []
    for case in cases:
        m, f = case.moving.data, case.fixed.data
        samples.append((m, f))
        samples.append((f, m))
    return samples


def batch_indices(iteration: int, n_samples: int, batch: int, seed: int) -> list[int]:
    """Sample indices of 0-based ``iteration``: consecutive slices of per-epoch permutations."""
    out = []
    for pos in range(iteration * batch, (iteration + 1) * batch):
        epoch, offset = divmod(pos, n_samples)
        perm = np.random.default_rng([seed, epoch, _BATCH_TAG]).permutation(n_samples)
        out.append(int(perm[offset]))
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, net: RegistrationNet, adam: Adam | None, meta: dict) -> None:
    tensors = {name: p.data for name, p in net.params.items()}
    if adam is not None:
        tensors.update(adam.state_tensors())
    full_meta = {
        "iteration": int(meta.get("iteration", 0)),
        "seed": int(net.config.seed),
        "config_hash": net.config.digest(),
        "config": net.config.to_dict(),
    }
    full_meta.update({k: v for k, v in meta.items() if k not in full_meta})
    checkpoint_save(path, tensors, full_meta)


def load_checkpoint(path, expect_config: NetworkConfig | None = None):
    """Rebuild ``(net, tensors, meta)`` from a checkpoint."""
    tensors, meta = checkpoint_load(path)
    if "config" not in meta:
        raise DataError(f"checkpoint {path} lacks field 'config' in meta")
    config = NetworkConfig.from_dict(meta["config"])
    if meta.get("config_hash") not in (None, config.digest()):
        raise DataError(f"checkpoint {path}: config_hash does not match stored config")
    if expect_config is not None and config.in_shape != expect_config.in_shape:
        raise ShapeError(f"checkpoint was built for {config.in_shape}, data is {expect_config.in_shape}")
    params = init_params(config, "zeros", dtype=np.float32)
    for name, p in params.items():
        if name not in tensors:
            raise DataError(f"checkpoint lacks tensor '{name}'")
        if tensors[name].shape != p.shape:
            raise ShapeError(f"checkpoint tensor '{name}' has shape {tensors[name].shape}, config expects {p.shape}")
        p.data = tensors[name].copy()
    return RegistrationNet(config, params), tensors, meta


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train_step(net: RegistrationNet, adam: Adam, batch: Sequence[tuple[np.ndarray, np.ndarray]],
               weights: LossWeights, iteration: int, seed: int) -> dict:
    """One Adam update on the mean loss of ``batch`` (members in fixed order)."""
    net.zero_grad()
    scale = 1.0 / len(batch)
    sums = {"loss": 0.0, "ncc": 0.0, "kl": 0.0}
    for j, (moving, fixed) in enumerate(batch):
        rng = np.random.default_rng([seed, iteration, j])
        reg = net.forward(moving, fixed, mode="sample", rng=rng)
        total, terms = total_loss(reg.warped, Tensor(fixed), reg.dist, weights)
        if not np.isfinite(total.item()):
            raise NumericError(f"non-finite loss at iteration {iteration + 1}")
        (total * scale).backward()
        sums["loss"] += total.item() * scale
        sums["ncc"] += terms["ncc"].item() * scale
        sums["kl"] += terms["kl"].item() * scale
    for name, p in net.params.items():
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient for '{name}' at iteration {iteration + 1}")
    adam.step()
    return {"iter": iteration + 1, **sums}


def train(net: RegistrationNet, samples: Sequence, cfg: TrainConfig, adam: Adam | None = None,
          start_iter: int = 0, on_record: Callable[[dict], None] | None = None,
          checkpoint_path=None) -> Iterator[dict]:
    """Run iterations ``start_iter .. cfg.iters - 1``; yields one record per iteration.

    When ``checkpoint_path`` is given the state is saved every
    ``cfg.save_every`` iterations and after the last one.
    """
    if len(samples) < cfg.batch:
        raise DataError(f"need at least {cfg.batch} training samples, have {len(samples)}")
    adam = adam or Adam(net.params, cfg.lr)
    meta = {"lr": cfg.lr, "batch": cfg.batch, "weights": asdict(cfg.weights)}
    for it in range(start_iter, cfg.iters):
        idx = batch_indices(it, len(samples), cfg.batch, cfg.seed)
        record = train_step(net, adam, [samples[i] for i in idx], cfg.weights, it, cfg.seed)
        if on_record is not None:
            on_record(record)
        done = it + 1
        if checkpoint_path is not None and (done == cfg.iters or (cfg.save_every and done % cfg.save_every == 0)):
            save_checkpoint(checkpoint_path, net, adam, {**meta, "iteration": done})
        yield record


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

REPORT_FIELDS = ("lvbp_dice", "lvm_dice", "rv_dice", "avg_dice", "hd_mm", "foldings", "jacobian_min")


def evaluate_case(net: RegistrationNet, moving, fixed, moving_labels: LabelVolume,
                  fixed_labels: LabelVolume) -> EvalReport:
    with no_grad():
        reg = net.forward(moving, fixed, mode="mean")
    return evaluate_registration(moving_labels, fixed_labels, reg.flow)


def mean_ncc(net: RegistrationNet, pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> float:
    """Average NCC loss of deterministic (mean-mode) registrations."""
    values = []
    with no_grad():
        for moving, fixed in pairs:
            reg = net.forward(moving, fixed, mode="mean")
            values.append(ncc_loss(reg.warped, Tensor(fixed)).item())
    return float(np.mean(values))


def aggregate(records: Sequence[dict]) -> dict:
    """Mean and population standard deviation of every report field."""
    out = {}
    for key in REPORT_FIELDS:
        vals = np.array([r[key] for r in records], dtype=np.float64)
        out[key] = {"mean": float(vals.mean()), "sd": float(vals.std())}
    return out


__all__ = [
    "Adam", "TrainConfig", "Case", "load_cases", "training_samples", "batch_indices",
    "save_checkpoint", "load_checkpoint", "train_step", "train", "evaluate_case", "mean_ncc",
    "aggregate", "REPORT_FIELDS", "STRUCTURES",
]
