"""Analytic transformer FLOP model for sampling schedules.

Per layer and token, dense work costs a = 24 d^2 (qkv + output
projection + MLP at expansion 4); attention mixing costs b = 4 d per
ordered token pair (scores and value aggregation). Everything stays in
exact integer arithmetic so ratios are reproducible to the last digit.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .errors import ConfigError


@dataclass(frozen=True)
class CostModelParams:
    depth: int
    hidden_width: int

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.hidden_width < 1:
            raise ConfigError(f"hidden_width must be >= 1, got {self.hidden_width}")

    @property
    def linear_coeff(self) -> int:
        return 24 * self.hidden_width * self.hidden_width

    @property
    def attention_coeff(self) -> int:
        return 4 * self.hidden_width


@dataclass(frozen=True)
class StageCost:
    tokens: int
    steps: int
    cfg_doubled: bool

    def __post_init__(self):
        if self.tokens < 1:
            raise ConfigError(f"tokens must be >= 1, got {self.tokens}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")


def flops_cost(cost: CostModelParams, stages: list[StageCost]) -> int:
    """Total FLOPs of an Euler sampling schedule, summed over stages."""
    a, b = cost.linear_coeff, cost.attention_coeff
    total = 0
    for stage in stages:
        per_pass = cost.depth * (a * stage.tokens + b * stage.tokens * stage.tokens)
        passes = stage.steps * (2 if stage.cfg_doubled else 1)
        total += passes * per_pass
    return total


def speedup_ratio(
    cost: CostModelParams, baseline: list[StageCost], candidate: list[StageCost]
) -> Fraction:
    """Exact baseline/candidate FLOP ratio."""
    return Fraction(flops_cost(cost, baseline), flops_cost(cost, candidate))


def token_count(image_size: int, codec_ratio: int, patch_size: int) -> int:
    """Tokens for a square image after codec downsampling and patchify."""
    if image_size < 1 or codec_ratio < 1 or patch_size < 1:
        raise ConfigError("image_size, codec_ratio, patch_size must be >= 1")
    latent = image_size // codec_ratio
    if latent * codec_ratio != image_size:
        raise ConfigError(f"codec ratio {codec_ratio} does not divide {image_size}")
    side = latent // patch_size
    if side * patch_size != latent:
        raise ConfigError(f"patch size {patch_size} does not divide latent {latent}")
    return side * side
