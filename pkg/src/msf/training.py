"""Rectified-flow objective with teacher forcing and the two-stage schedule.

Each example interpolates straight between a ground-truth residual and
Gaussian noise, z_t = t*z1 + (1-t)*z0, and the field regresses the
constant velocity z1 - z0. Conditioning priors always come from the
ground-truth accumulation (teacher forcing), never from model output, so
every scale can train in parallel. Stage 0 trains the base scale alone;
stage 1 draws a batch per scale, sums the weighted per-scale losses and
takes one optimizer step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, DivergenceError
from .factorize import (
    Codec,
    PriorSet,
    ResidualPyramid,
    ScaleSchedule,
    extract_priors,
    extract_residuals,
)
from .grid import LatentGrid
from .velocity import ConditionBundle, VelocityField, _to_tensor

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    stage: int
    steps: int
    batch_sizes: tuple[int, ...] = (64, 32)
    learning_rate: float = 1e-4
    cfg_dropout_prob: float = 0.1
    seed: int = 0
    loss_weights: tuple[float, ...] = ()
    joint_from_scratch: bool = False

    def __post_init__(self):
        if self.stage not in (0, 1):
            raise ConfigError(f"stage must be 0 or 1, got {self.stage}")
        if self.steps < 1:
            raise ConfigError("steps must be positive")
        if any(b < 1 for b in self.batch_sizes):
            raise ConfigError("batch sizes must be positive")
        if not 0.0 <= self.cfg_dropout_prob <= 1.0:
            raise ConfigError("cfg_dropout_prob must lie in [0, 1]")

    def weight(self, scale_index: int) -> float:
        if scale_index < len(self.loss_weights):
            return self.loss_weights[scale_index]
        return 1.0

    def batch_size(self, scale_index: int) -> int:
        if scale_index < len(self.batch_sizes):
            return self.batch_sizes[scale_index]
        return self.batch_sizes[-1]


@dataclass(frozen=True)
class TrainingExample:
    scale_index: int
    z0: LatentGrid
    z1: LatentGrid
    t: float
    z_t: LatentGrid
    target: LatentGrid
    cond: ConditionBundle


@dataclass(frozen=True)
class TrainingItem:
    """One teacher-forced training record: factorization of a single signal."""

    pyramid: ResidualPyramid
    priors: PriorSet
    class_id: int


def make_example(
    pyramid: ResidualPyramid,
    priors: PriorSet,
    class_id: int,
    scale_index: int,
    rng: np.random.Generator,
    cfg_dropout_prob: float = 0.0,
    null_class: int | None = None,
    t: float | None = None,
) -> TrainingExample:
    """Draw one rectified-flow example for a scale.

    t ~ Uniform[0,1] and z1 ~ N(0, I) unless t is forced; the class label
    is replaced by the null class with probability cfg_dropout_prob.
    """
    z0 = pyramid.residuals[scale_index]
    if t is None:
        t = float(rng.uniform())
    z1 = LatentGrid(rng.standard_normal(z0.shape).astype(np.float32))
    tf = np.float32(t)
    z_t = LatentGrid(tf * z1.data + (np.float32(1.0) - tf) * z0.data)
    target = LatentGrid(z1.data - z0.data)
    label = class_id
    if cfg_dropout_prob > 0.0:
        if null_class is None:
            raise ValueError("cfg dropout requires a null class id")
        if rng.uniform() < cfg_dropout_prob:
            label = null_class
    cond = ConditionBundle(label, t, scale_index, priors.for_scale(scale_index))
    return TrainingExample(scale_index, z0, z1, t, z_t, target, cond)


def _collate(examples, dtype):
    z_t = torch.stack([_to_tensor(e.z_t, dtype) for e in examples])
    target = torch.stack([_to_tensor(e.target, dtype) for e in examples])
    t = torch.tensor([e.t for e in examples], dtype=dtype)
    class_ids = torch.tensor([e.cond.class_id for e in examples], dtype=torch.long)
    if examples[0].scale_index == 0:
        prior = None
    else:
        prior = torch.stack([_to_tensor(e.cond.prior, dtype) for e in examples])
    return z_t, t, class_ids, prior, target


def _scale_losses(
    params: VelocityField,
    examples,
    loss_weights: tuple[float, ...] = (),
) -> dict[int, torch.Tensor]:
    """Weighted per-scale mean squared velocity errors.

    Zero-weight scales are skipped, so their parameters receive no
    gradient.
    """
    examples = list(examples)
    if not examples:
        raise ValueError("empty batch")
    dtype = params.dtype
    by_scale: dict[int, list] = {}
    for e in examples:
        by_scale.setdefault(e.scale_index, []).append(e)
    terms = {}
    for scale_index in sorted(by_scale):
        w = loss_weights[scale_index] if scale_index < len(loss_weights) else 1.0
        if w == 0.0:
            continue
        z_t, t, class_ids, prior, target = _collate(by_scale[scale_index], dtype)
        v = params(z_t, t, class_ids, scale_index, prior)
        terms[scale_index] = w * torch.mean((v - target) ** 2)
    if not terms:
        raise ValueError("all scales in the batch have zero loss weight")
    return terms


def rf_loss(
    params: VelocityField,
    examples,
    loss_weights: tuple[float, ...] = (),
) -> torch.Tensor:
    """Sum over scales of weighted mean squared velocity error.

    A single-scale batch with default weights reduces to the plain mean
    over batch and elements.
    """
    return sum(_scale_losses(params, examples, loss_weights).values())


def rf_loss_and_grads(
    params: VelocityField,
    examples,
    loss_weights: tuple[float, ...] = (),
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss value plus per-parameter gradients as numpy arrays."""
    loss = rf_loss(params, examples, loss_weights)
    names, tensors = zip(*params.named_parameters())
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    out = {}
    for name, p, g in zip(names, tensors, grads):
        out[name] = (
            np.zeros(p.shape, dtype=np.float64)
            if g is None
            else g.detach().double().numpy().copy()
        )
    return float(loss.detach()), out


@dataclass
class TrainResult:
    params: VelocityField
    loss_curve: list[float]
    scale_curves: dict[int, list[float]] = field(default_factory=dict)
    converged: bool = False


def plateau_reached(
    curve, window_frac: float = 0.2, rel_improvement: float = 0.01
) -> bool:
    """Convergence heuristic: < 1% relative improvement over the last

    window_frac of steps compared to the window before it.
    """
    n = len(curve)
    w = max(1, int(n * window_frac))
    if n < 2 * w:
        return False
    prev = sum(curve[-2 * w : -w]) / w
    last = sum(curve[-w:]) / w
    if prev <= 0.0:
        return True
    return (prev - last) / abs(prev) < rel_improvement


def train_stage(
    params: VelocityField,
    dataset,
    config: TrainConfig,
    stage0_checkpoint: bool = False,
) -> TrainResult:
    """Run one training stage over a teacher-forced dataset.

    Stage 0 draws examples from the base scale only; stage 1 draws a batch
    per scale, sums the weighted losses and applies a single optimizer
    step per iteration. Aborts with a diagnostic record if the loss goes
    non-finite.
    """
    if config.stage == 1 and not stage0_checkpoint and not config.joint_from_scratch:
        raise ConfigError(
            "stage 1 requires a stage-0 checkpoint or joint_from_scratch"
        )
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty training dataset")
    num_scales = params.config.num_scales
    scales = [0] if config.stage == 0 else list(range(num_scales))
    null_class = params.config.null_class
    rng = np.random.default_rng([config.seed, config.stage])
    opt = torch.optim.Adam(
        params.parameters(),
        lr=config.learning_rate,
        betas=ADAM_BETAS,
        eps=ADAM_EPS,
    )
    curve: list[float] = []
    scale_curves: dict[int, list[float]] = {s: [] for s in scales}
    weights = tuple(config.weight(s) for s in range(num_scales))
    for step in range(config.steps):
        batch = []
        for s in scales:
            if weights[s] == 0.0:
                scale_curves[s].append(0.0)
                continue
            idx = rng.integers(0, len(dataset), size=config.batch_size(s))
            for i in idx:
                item = dataset[int(i)]
                batch.append(
                    make_example(
                        item.pyramid,
                        item.priors,
                        item.class_id,
                        s,
                        rng,
                        cfg_dropout_prob=config.cfg_dropout_prob,
                        null_class=null_class,
                    )
                )
        terms = _scale_losses(params, batch, weights)
        loss = sum(terms.values())
        value = float(loss.detach())
        if not math.isfinite(value):
            raise DivergenceError(step, curve)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        curve.append(value)
        for s in scales:
            if weights[s] != 0.0:
                scale_curves[s].append(float(terms[s].detach()))
    return TrainResult(params, curve, scale_curves, converged=plateau_reached(curve))


def prepare_training_set(
    labeled_images,
    schedule: ScaleSchedule,
    codec: Codec = Codec(),
) -> list[TrainingItem]:
    """Factorize (image, class) pairs into teacher-forced training items."""
    items = []
    for image, class_id in labeled_images:
        pyramid = extract_residuals(image, None, schedule, codec)
        items.append(TrainingItem(pyramid, extract_priors(pyramid), int(class_id)))
    return items
