"""Dense latent grids and the deterministic resampling primitives.

Everything downstream (residual extraction, prior accumulation, sampling)
is built from two operations defined here: bilinear `resize` with
half-pixel centers and the linear `combine`. Both accumulate in float64
and store float32, which keeps the telescoping-sum reconstruction exact
to well below test tolerances.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

LGRID_MAGIC = b"MSFG"
LGRID_VERSION = 1


@dataclass(frozen=True)
class LatentGrid:
    """An (height, width, channels) float32 grid in row-major order."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"grid data must be 3-d (H, W, C), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"grid dims must be positive, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("grid contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @classmethod
    def zeros(cls, height: int, width: int, channels: int) -> "LatentGrid":
        return cls(np.zeros((height, width, channels), dtype=np.float32))

    @classmethod
    def full(cls, height: int, width: int, channels: int, value: float) -> "LatentGrid":
        return cls(np.full((height, width, channels), value, dtype=np.float32))


def _axis_weights(src: int, dst: int):
    """Per-output-coordinate source indices and blend weights for one axis.

    Source coordinate of output x is (x + 0.5) * src/dst - 0.5, clamped to
    [0, src - 1] (clamp-to-edge boundary handling).
    """
    out = np.arange(dst, dtype=np.float64)
    coord = np.clip((out + 0.5) * (src / dst) - 0.5, 0.0, float(src - 1))
    lo = np.minimum(np.floor(coord).astype(np.int64), src - 1)
    hi = np.minimum(lo + 1, src - 1)
    w_hi = coord - lo
    w_lo = 1.0 - w_hi
    return lo, hi, w_lo, w_hi


def resize(src: LatentGrid, target_h: int, target_w: int) -> LatentGrid:
    """Bilinear resample with half-pixel centers.

    Same-size resize is the bitwise identity. Output values are convex
    combinations of input values, so the range never grows.
    """
    if target_h < 1 or target_w < 1:
        raise ValueError(f"target dims must be >= 1, got ({target_h}, {target_w})")
    if target_h == src.height and target_w == src.width:
        return LatentGrid(src.data.copy())
    data = src.data.astype(np.float64)
    lo_y, hi_y, wl_y, wh_y = _axis_weights(src.height, target_h)
    lo_x, hi_x, wl_x, wh_x = _axis_weights(src.width, target_w)
    rows = data[lo_y] * wl_y[:, None, None] + data[hi_y] * wh_y[:, None, None]
    out = rows[:, lo_x] * wl_x[None, :, None] + rows[:, hi_x] * wh_x[None, :, None]
    return LatentGrid(out.astype(np.float32))


def combine(a: float, x: LatentGrid, b: float, y: LatentGrid) -> LatentGrid:
    """Elementwise a*x + b*y."""
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {y.shape}")
    out = a * x.data.astype(np.float64) + b * y.data.astype(np.float64)
    return LatentGrid(out.astype(np.float32))


def save_grid(path, grid: LatentGrid) -> None:
    """Write an LGRID v1 record (little-endian, row-major float32)."""
    with open(path, "wb") as f:
        f.write(pack_grid(grid))


def pack_grid(grid: LatentGrid) -> bytes:
    header = LGRID_MAGIC + struct.pack(
        "<IIII", LGRID_VERSION, grid.height, grid.width, grid.channels
    )
    return header + grid.data.astype("<f4").tobytes()


def load_grid(path) -> LatentGrid:
    with open(path, "rb") as f:
        payload = f.read()
    grid, rest = unpack_grid(payload)
    if rest:
        raise ValueError(f"trailing bytes after LGRID record in {path}")
    return grid


def unpack_grid(payload: bytes) -> tuple[LatentGrid, bytes]:
    """Parse one LGRID record from the front of `payload`.

    Returns the grid and any remaining bytes (container formats embed
    several records back to back).
    """
    if len(payload) < 20:
        raise ValueError("truncated LGRID record")
    if payload[:4] != LGRID_MAGIC:
        raise ValueError(f"bad magic {payload[:4]!r}, expected {LGRID_MAGIC!r}")
    version, h, w, c = struct.unpack("<IIII", payload[4:20])
    if version != LGRID_VERSION:
        raise ValueError(f"unsupported LGRID version {version}")
    if h < 1 or w < 1 or c < 1:
        raise ValueError(f"invalid LGRID dims ({h}, {w}, {c})")
    n = h * w * c
    end = 20 + 4 * n
    if len(payload) < end:
        raise ValueError("truncated LGRID data")
    data = np.frombuffer(payload[20:end], dtype="<f4").reshape(h, w, c)
    return LatentGrid(data.astype(np.float32)), payload[end:]
