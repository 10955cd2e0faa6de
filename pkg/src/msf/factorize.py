"""Multi-scale residual factorization of a latent grid.

The decomposition walks the scale schedule coarse-to-fine: the base scale
encodes a genuinely low-resolution view of the signal, and each later
scale stores what the accumulated coarser scales still miss. Because the
final scale's downsample is the identity, upsampling every residual to
full resolution and summing reconstructs the source exactly (up to
float32 rounding).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .grid import LatentGrid, combine, pack_grid, resize, unpack_grid

MSFP_MAGIC = b"MSFP"
MSFP_VERSION = 1

CODEC_KINDS = ("identity", "average-pool")


@dataclass(frozen=True)
class ScaleSchedule:
    """Ordered per-scale spatial sizes; the last entry is full resolution."""

    sizes: tuple[tuple[int, int], ...]

    def __post_init__(self):
        sizes = tuple((int(h), int(w)) for h, w in self.sizes)
        if not sizes:
            raise ValueError("schedule needs at least one scale")
        for h, w in sizes:
            if h < 1 or w < 1:
                raise ValueError(f"scale dims must be positive, got ({h}, {w})")
        for (h0, w0), (h1, w1) in zip(sizes, sizes[1:]):
            if h1 < h0 or w1 < w0:
                raise ValueError(f"schedule must be non-decreasing, got {sizes}")
        object.__setattr__(self, "sizes", sizes)

    def __len__(self) -> int:
        return len(self.sizes)

    def __getitem__(self, i) -> tuple[int, int]:
        return self.sizes[i]

    @property
    def full_size(self) -> tuple[int, int]:
        return self.sizes[-1]

    @classmethod
    def parse(cls, text: str) -> "ScaleSchedule":
        """Parse 'h0xw0,h1xw1,...' as used on the CLI."""
        sizes = []
        for part in text.split(","):
            h, _, w = part.strip().partition("x")
            sizes.append((int(h), int(w)))
        return cls(tuple(sizes))


@dataclass(frozen=True)
class Codec:
    """Stand-in for the latent encoder/decoder pair.

    identity: encode/decode are the identity, ratio 1.
    average-pool: encode takes k x k block means, decode is nearest upsample.
    """

    kind: str = "identity"
    downsample_ratio: int = 1

    def __post_init__(self):
        if self.kind not in CODEC_KINDS:
            raise ValueError(f"unknown codec kind {self.kind!r}")
        if self.kind == "identity" and self.downsample_ratio != 1:
            raise ValueError("identity codec must have ratio 1")
        if self.downsample_ratio < 1:
            raise ValueError("downsample ratio must be positive")

    @classmethod
    def parse(cls, text: str) -> "Codec":
        """Parse 'identity' or 'average-pool-<k>'."""
        text = text.strip()
        if text == "identity":
            return cls("identity", 1)
        if text.startswith("average-pool-"):
            return cls("average-pool", int(text[len("average-pool-"):]))
        raise ValueError(f"unknown codec spec {text!r}")

    @property
    def name(self) -> str:
        if self.kind == "identity":
            return "identity"
        return f"average-pool-{self.downsample_ratio}"

    def encode(self, image: LatentGrid) -> LatentGrid:
        if self.kind == "identity":
            return image
        k = self.downsample_ratio
        if image.height % k or image.width % k:
            raise ValueError(
                f"image dims {image.height}x{image.width} not divisible by pool size {k}"
            )
        h, w = image.height // k, image.width // k
        blocks = image.data.astype(np.float64).reshape(h, k, w, k, image.channels)
        return LatentGrid(blocks.mean(axis=(1, 3)).astype(np.float32))

    def decode(self, latent: LatentGrid) -> LatentGrid:
        if self.kind == "identity":
            return latent
        k = self.downsample_ratio
        return LatentGrid(np.repeat(np.repeat(latent.data, k, axis=0), k, axis=1))


@dataclass(frozen=True)
class ResidualPyramid:
    """Ground-truth per-scale residual latents, residuals[i] at size schedule[i]."""

    schedule: ScaleSchedule
    residuals: tuple[LatentGrid, ...]

    def __post_init__(self):
        residuals = tuple(self.residuals)
        if len(residuals) != len(self.schedule):
            raise ShapeError(
                f"{len(residuals)} residuals for {len(self.schedule)} scales"
            )
        channels = residuals[0].channels
        for r, (h, w) in zip(residuals, self.schedule.sizes):
            if r.shape != (h, w, channels):
                raise ShapeError(f"residual shape {r.shape} != scale ({h}, {w}, {channels})")
        object.__setattr__(self, "residuals", residuals)

    @property
    def channels(self) -> int:
        return self.residuals[0].channels


@dataclass(frozen=True)
class PriorSet:
    """Accumulated-and-downsampled priors; priors[i-1] conditions scale i.

    Scale 0 has no prior, so there is one entry fewer than scales.
    """

    schedule: ScaleSchedule
    priors: tuple[LatentGrid, ...]

    def __post_init__(self):
        priors = tuple(self.priors)
        if len(priors) != len(self.schedule) - 1:
            raise ShapeError(
                f"{len(priors)} priors for {len(self.schedule)} scales"
            )
        channels = priors[0].channels if priors else 0
        for p, (h, w) in zip(priors, self.schedule.sizes[1:]):
            if p.shape != (h, w, channels):
                raise ShapeError(f"prior shape {p.shape} != scale ({h}, {w}, {channels})")
        object.__setattr__(self, "priors", priors)

    def for_scale(self, scale_index: int) -> LatentGrid | None:
        """Prior conditioning scale `scale_index`, or None for the base scale."""
        if scale_index == 0:
            return None
        return self.priors[scale_index - 1]


def extract_residuals(
    image_high: LatentGrid,
    image_low: LatentGrid | None,
    schedule: ScaleSchedule,
    codec: Codec = Codec(),
) -> ResidualPyramid:
    """Decompose a signal into per-scale residual latents.

    The base residual is the encoding of a genuinely low-resolution view
    of the signal; when no low-resolution pair is supplied, one is
    synthesized by resizing `image_high` in signal space. Each subsequent
    residual is the downsampled remainder after subtracting everything the
    coarser scales explain.
    """
    h_n, w_n = schedule.full_size
    f_hat = codec.encode(image_high)
    if f_hat.shape[:2] != (h_n, w_n):
        raise ShapeError(
            f"encoded input is {f_hat.shape[:2]}, schedule expects ({h_n}, {w_n})"
        )
    if image_low is None:
        h0, w0 = schedule[0]
        r = codec.downsample_ratio
        image_low = resize(image_high, h0 * r, w0 * r)
    base = codec.encode(image_low)
    if base.shape != (schedule[0][0], schedule[0][1], f_hat.channels):
        raise ShapeError(
            f"encoded low-res input is {base.shape}, scale 0 expects "
            f"({schedule[0][0]}, {schedule[0][1]}, {f_hat.channels})"
        )
    residuals = [base]
    for i in range(len(schedule) - 1):
        f_hat = combine(1.0, f_hat, -1.0, resize(residuals[i], h_n, w_n))
        h_next, w_next = schedule[i + 1]
        residuals.append(resize(f_hat, h_next, w_next))
    return ResidualPyramid(schedule, tuple(residuals))


def extract_priors(pyramid: ResidualPyramid) -> PriorSet:
    """Accumulate residuals coarse-to-fine into the per-scale priors."""
    schedule = pyramid.schedule
    h_n, w_n = schedule.full_size
    f_hat = LatentGrid.zeros(h_n, w_n, pyramid.channels)
    priors = []
    for i in range(len(schedule) - 1):
        f_hat = combine(1.0, f_hat, 1.0, resize(pyramid.residuals[i], h_n, w_n))
        h_next, w_next = schedule[i + 1]
        priors.append(resize(f_hat, h_next, w_next))
    return PriorSet(schedule, tuple(priors))


def reconstruct(pyramid: ResidualPyramid) -> LatentGrid:
    """Sum of all residuals upsampled to full resolution."""
    h_n, w_n = pyramid.schedule.full_size
    acc = LatentGrid.zeros(h_n, w_n, pyramid.channels)
    for r in pyramid.residuals:
        acc = combine(1.0, acc, 1.0, resize(r, h_n, w_n))
    return acc


def factorize_scaling_latent(
    latent: LatentGrid, schedule: ScaleSchedule
) -> list[LatentGrid]:
    """Plain per-scale resampling of the latent; no residual structure."""
    return [resize(latent, h, w) for h, w in schedule.sizes]


def factorize_scaling_image(
    image: LatentGrid, schedule: ScaleSchedule, codec: Codec
) -> list[LatentGrid]:
    """Resample in signal space at each scale, then encode."""
    r = codec.downsample_ratio
    if image.height % r or image.width % r:
        raise ValueError(
            f"image dims {image.height}x{image.width} not divisible by codec ratio {r}"
        )
    return [codec.encode(resize(image, h * r, w * r)) for h, w in schedule.sizes]


def save_grid_set(path, grids) -> None:
    """Write an MSFP v1 container: header plus one LGRID record per grid."""
    grids = list(grids)
    with open(path, "wb") as f:
        f.write(MSFP_MAGIC)
        f.write(struct.pack("<II", MSFP_VERSION, len(grids)))
        for g in grids:
            f.write(pack_grid(g))


def load_grid_set(path) -> list[LatentGrid]:
    with open(path, "rb") as f:
        payload = f.read()
    if len(payload) < 12 or payload[:4] != MSFP_MAGIC:
        raise ValueError(f"not an MSFP container: {path}")
    version, count = struct.unpack("<II", payload[4:12])
    if version != MSFP_VERSION:
        raise ValueError(f"unsupported MSFP version {version}")
    rest = payload[12:]
    grids = []
    for _ in range(count):
        grid, rest = unpack_grid(rest)
        grids.append(grid)
    if rest:
        raise ValueError(f"trailing bytes after MSFP records in {path}")
    return grids


def save_pyramid(path, pyramid: ResidualPyramid) -> None:
    save_grid_set(path, pyramid.residuals)


def load_pyramid(path) -> ResidualPyramid:
    residuals = load_grid_set(path)
    schedule = ScaleSchedule(tuple(g.shape[:2] for g in residuals))
    return ResidualPyramid(schedule, tuple(residuals))
