"""Euler ODE sampling per scale and autoregressive residual accumulation.

Generation walks the schedule coarse-to-fine: sample a residual at the
current scale (the base scale from the class label alone, later scales
conditioned on the accumulated prior), upsample it into the running
full-resolution latent, and downsample that to form the next scale's
prior. The integration state is kept in float64 and rounded to float32
once at the end of each scale, so the closed-form solver oracles hold to
tight tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .errors import ConfigError
from .factorize import Codec, ResidualPyramid, ScaleSchedule
from .grid import LatentGrid, resize
from .velocity import (
    ConditionBundle,
    VelocityField,
    forward_cfg,
    guided_velocity,
)

DEFAULT_CHUNK = 512


@dataclass(frozen=True)
class SampleConfig:
    steps: tuple[int, ...]
    guidance: tuple[float, ...]
    seed: int
    schedule: ScaleSchedule
    codec: Codec = Codec()

    def __post_init__(self):
        n = len(self.schedule)
        if len(self.steps) != n or len(self.guidance) != n:
            raise ConfigError(
                f"need one (steps, guidance) pair per scale: got "
                f"{len(self.steps)} steps and {len(self.guidance)} guidance "
                f"values for {n} scales"
            )
        if any(s < 1 for s in self.steps):
            raise ConfigError("step counts must be >= 1")
        if any(g < 1.0 for g in self.guidance):
            raise ConfigError("guidance scales must be >= 1")


def expected_evaluations(config: SampleConfig) -> int:
    """Network evaluations one sample costs: guided scales pay double."""
    return sum(s * (2 if g > 1.0 else 1) for s, g in zip(config.steps, config.guidance))


@dataclass
class GenerationResult:
    latent: LatentGrid
    image: LatentGrid
    residuals: list[LatentGrid]
    priors: list[LatentGrid]
    evaluations: int


def euler_integrate(velocity_fn, z1: LatentGrid, steps: int) -> LatentGrid:
    """Integrate dz = v dt from t=1 (noise) to t=0 with uniform Euler steps.

    velocity_fn(z, t) is evaluated at the entry edge of each interval,
    t = k/steps for k = steps..1.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    z = z1.data.astype(np.float64)
    for k in range(steps, 0, -1):
        v = velocity_fn(LatentGrid(z.astype(np.float32)), k / steps)
        z = z - v.data.astype(np.float64) / steps
    return LatentGrid(z.astype(np.float32))


def euler_solve(
    params: VelocityField,
    cond_template: ConditionBundle,
    shape: tuple[int, int, int],
    steps: int,
    guidance: float,
    rng: np.random.Generator,
) -> LatentGrid:
    """Sample one residual grid: draw z1 ~ N(0, I) and integrate the field."""
    z1 = LatentGrid(rng.standard_normal(shape, dtype=np.float32))

    def field(z, t):
        return forward_cfg(params, z, replace(cond_template, t=t), guidance)

    return euler_integrate(field, z1, steps)


def sample_scale(
    params: VelocityField,
    class_ids: torch.Tensor,
    scale_index: int,
    prior: torch.Tensor | None,
    steps: int,
    guidance: float,
    noise: torch.Tensor,
) -> torch.Tensor:
    """Batched Euler integration at one scale, float64 state internally."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    dtype = params.dtype
    z = noise.double()
    with torch.no_grad():
        for k in range(steps, 0, -1):
            t = torch.full((noise.shape[0],), k / steps, dtype=dtype)
            v = guided_velocity(
                params, z.to(dtype), t, class_ids, scale_index, prior, guidance
            )
            z = z - v.double() / steps
    return z.to(dtype)


def _resize_batch(arr: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Resize (B, h, w, C) by packing the batch into the channel axis."""
    b, h, w, c = arr.shape
    flat = np.ascontiguousarray(np.moveaxis(arr, 0, 2)).reshape(h, w, b * c)
    out = resize(LatentGrid(flat), target_h, target_w).data
    return np.moveaxis(out.reshape(target_h, target_w, b, c), 2, 0)


def _decode_batch(arr: np.ndarray, codec: Codec) -> np.ndarray:
    if codec.kind == "identity":
        return arr
    b, h, w, c = arr.shape
    flat = np.ascontiguousarray(np.moveaxis(arr, 0, 2)).reshape(h, w, b * c)
    out = codec.decode(LatentGrid(flat)).data
    return np.moveaxis(out.reshape(out.shape[0], out.shape[1], b, c), 2, 0)


def _accumulate(schedule: ScaleSchedule, channels: int, batch: int, sample_fn):
    """The shared accumulate-sampling loop over (B, h, w, C) arrays.

    sample_fn(scale_index, prior_or_none) returns that scale's residual
    batch. The running latent mirrors the prior-extraction arithmetic
    exactly, so teacher-forced replay reproduces the training priors
    bitwise.
    """
    h_n, w_n = schedule.full_size
    f_hat = np.zeros((batch, h_n, w_n, channels), dtype=np.float32)
    residuals, priors = [], []
    prior = None
    for i in range(len(schedule)):
        res = sample_fn(i, prior)
        residuals.append(res)
        up = _resize_batch(res, h_n, w_n)
        f_hat = (f_hat.astype(np.float64) + up.astype(np.float64)).astype(np.float32)
        if i < len(schedule) - 1:
            h_next, w_next = schedule[i + 1]
            prior = _resize_batch(f_hat, h_next, w_next)
            priors.append(prior)
    return f_hat, residuals, priors


@dataclass
class GenerationBatch:
    latents: np.ndarray
    images: np.ndarray
    residuals: list[np.ndarray]
    priors: list[np.ndarray]
    evaluations: int


def generate_batch(
    params: VelocityField,
    class_ids,
    config: SampleConfig,
    chunk: int = DEFAULT_CHUNK,
) -> GenerationBatch:
    """Sample a batch of latents autoregressively across scales.

    Noise for scale i comes from the seed's per-scale substream, so
    changing one scale's step count leaves every other scale's noise
    untouched. Work is chunked through the network to bound memory.
    """
    cfg = params.config
    if config.schedule.sizes != cfg.scale_sizes:
        raise ConfigError(
            f"sample schedule {config.schedule.sizes} != field scales {cfg.scale_sizes}"
        )
    class_arr = np.asarray(class_ids, dtype=np.int64)
    if class_arr.ndim != 1 or class_arr.size == 0:
        raise ValueError("class_ids must be a non-empty 1-d sequence")
    if np.any(class_arr < 0) or np.any(class_arr >= cfg.num_classes):
        raise ValueError(f"class ids must lie in [0, {cfg.num_classes})")
    b = class_arr.size
    channels = cfg.channels
    start_evals = params.eval_count

    def sample_fn(i, prior):
        h, w = config.schedule[i]
        if (prior is None) != (i == 0):
            raise RuntimeError("prior must be present exactly at scales >= 1")
        rng = np.random.default_rng([config.seed, i])
        noise = rng.standard_normal((b, h, w, channels), dtype=np.float32)
        out = np.empty_like(noise)
        for lo in range(0, b, chunk):
            hi = min(lo + chunk, b)
            noise_t = torch.from_numpy(noise[lo:hi].transpose(0, 3, 1, 2).copy())
            prior_t = None
            if prior is not None:
                prior_t = torch.from_numpy(prior[lo:hi].transpose(0, 3, 1, 2).copy())
            ids = torch.from_numpy(class_arr[lo:hi])
            res = sample_scale(
                params, ids, i, prior_t, config.steps[i], config.guidance[i], noise_t
            )
            out[lo:hi] = res.numpy().transpose(0, 2, 3, 1)
        return out

    f_hat, residuals, priors = _accumulate(config.schedule, channels, b, sample_fn)
    images = _decode_batch(f_hat, config.codec)
    return GenerationBatch(
        f_hat, images, residuals, priors, params.eval_count - start_evals
    )


def generate(
    params: VelocityField, class_id: int, config: SampleConfig
) -> GenerationResult:
    """Sample a single latent and decode it, returning all intermediates."""
    batch = generate_batch(params, [class_id], config, chunk=1)
    return GenerationResult(
        latent=LatentGrid(batch.latents[0]),
        image=LatentGrid(batch.images[0]),
        residuals=[LatentGrid(r[0]) for r in batch.residuals],
        priors=[LatentGrid(p[0]) for p in batch.priors],
        evaluations=batch.evaluations,
    )


def replay(pyramid: ResidualPyramid, codec: Codec = Codec()) -> GenerationResult:
    """Run the accumulate-sampling loop with ground-truth residuals.

    The oracle mode for teacher-forcing consistency: the produced priors
    match prior extraction and the final latent reconstructs the source.
    """

    def sample_fn(i, prior):
        if (prior is None) != (i == 0):
            raise RuntimeError("prior must be present exactly at scales >= 1")
        return pyramid.residuals[i].data[None]

    f_hat, residuals, priors = _accumulate(
        pyramid.schedule, pyramid.channels, 1, sample_fn
    )
    return GenerationResult(
        latent=LatentGrid(f_hat[0]),
        image=codec.decode(LatentGrid(f_hat[0])),
        residuals=[LatentGrid(r[0]) for r in residuals],
        priors=[LatentGrid(p[0]) for p in priors],
        evaluations=0,
    )
