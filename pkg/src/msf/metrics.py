"""Distribution metrics for sample sets: moment errors and RBF-kernel MMD.

Kernel sums use math.fsum over a fixed flattening, so results are exact
reals independent of summation order and therefore invariant to
permuting either sample set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def _flatten(samples: np.ndarray) -> np.ndarray:
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim < 2 or arr.shape[0] == 0:
        raise ValueError(f"need non-empty (n, ...) samples, got shape {arr.shape}")
    return arr.reshape(arr.shape[0], -1)


def _sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # (a-b)^2 expansion; clip the roundoff negatives
    xx = np.sum(x * x, axis=1)
    yy = np.sum(y * y, axis=1)
    d2 = xx[:, None] + yy[None, :] - 2.0 * (x @ y.T)
    return np.maximum(d2, 0.0)


def rbf_mmd2(samples, reference, bandwidth: float) -> float:
    """Unbiased squared MMD with kernel exp(-d^2 / (2 bw^2)).

    The unbiased estimator drops self-pairs, so identical sets come out
    slightly negative; callers needing a nonnegative value clamp.
    """
    x = _flatten(samples)
    y = _flatten(reference)
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise ValueError("need at least 2 samples per set for the unbiased MMD")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"feature dims differ: {x.shape[1]} != {y.shape[1]}")
    if not bandwidth > 0.0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    m, n = x.shape[0], y.shape[0]
    denom = 2.0 * bandwidth * bandwidth
    kxx = np.exp(-_sq_dists(x, x) / denom)
    kyy = np.exp(-_sq_dists(y, y) / denom)
    kxy = np.exp(-_sq_dists(x, y) / denom)
    np.fill_diagonal(kxx, 0.0)
    np.fill_diagonal(kyy, 0.0)
    # fsum is the exact real sum, so the result cannot depend on pair order
    sx = math.fsum(kxx.ravel())
    sy = math.fsum(kyy.ravel())
    sxy = math.fsum(kxy.ravel())
    return sx / (m * (m - 1)) + sy / (n * (n - 1)) - 2.0 * sxy / (m * n)


def median_bandwidth(samples, reference, cap: int = 512) -> float:
    """Median pairwise distance over the pooled sets, capped for cost."""
    x = _flatten(samples)[:cap]
    y = _flatten(reference)[:cap]
    pooled = np.concatenate([x, y], axis=0)
    d2 = _sq_dists(pooled, pooled)
    upper = d2[np.triu_indices(pooled.shape[0], k=1)]
    med = float(np.median(np.sqrt(upper)))
    if med <= 0.0:
        return 1.0
    return med


def relative_error(value: np.ndarray, target: np.ndarray) -> float:
    diff = np.asarray(value, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    scale = float(np.linalg.norm(np.asarray(target, dtype=np.float64)))
    err = float(np.linalg.norm(diff))
    if scale == 0.0:
        return err
    return err / scale


@dataclass(frozen=True)
class MetricsReport:
    class_mean_error: tuple[float, ...]
    class_cov_error: tuple[float, ...]
    mmd: float
    reconstruction_error: float | None = None

    def __post_init__(self):
        for name in ("class_mean_error", "class_cov_error"):
            if any(v < 0.0 for v in getattr(self, name)):
                raise ValueError(f"{name} entries must be >= 0")
        if self.mmd < 0.0:
            raise ValueError("mmd must be >= 0")
        if self.reconstruction_error is not None and self.reconstruction_error < 0.0:
            raise ValueError("reconstruction_error must be >= 0")

    def as_dict(self) -> dict:
        return {
            "class_mean_error": list(self.class_mean_error),
            "class_cov_error": list(self.class_cov_error),
            "mmd": self.mmd,
            "reconstruction_error": self.reconstruction_error,
        }


def eval_metrics(
    samples,
    reference,
    bandwidth: float,
    sample_labels=None,
    reference_labels=None,
    reconstruction: tuple[np.ndarray, np.ndarray] | None = None,
) -> MetricsReport:
    """Compare a sample set against a reference set.

    Per-class mean error is the mean absolute difference of class means,
    normalized by the pooled reference standard deviation; covariance
    error is the relative Frobenius gap of flattened class covariances.
    Without labels both sets are treated as one class.
    """
    x = _flatten(samples)
    y = _flatten(reference)
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"feature dims differ: {x.shape[1]} != {y.shape[1]}")
    sl = np.zeros(x.shape[0], np.int64) if sample_labels is None else np.asarray(sample_labels)
    rl = np.zeros(y.shape[0], np.int64) if reference_labels is None else np.asarray(reference_labels)
    if sl.shape != (x.shape[0],) or rl.shape != (y.shape[0],):
        raise ValueError("labels must be 1-d and aligned with their sets")
    classes = sorted(set(sl.tolist()) | set(rl.tolist()))
    pooled_std = float(np.std(y))
    norm = pooled_std if pooled_std > 0.0 else 1.0
    mean_errors, cov_errors = [], []
    for k in classes:
        xs, ys = x[sl == k], y[rl == k]
        if xs.shape[0] == 0 or ys.shape[0] == 0:
            raise ValueError(f"class {k} missing from one of the sets")
        mean_gap = float(np.mean(np.abs(xs.mean(axis=0) - ys.mean(axis=0))))
        mean_errors.append(mean_gap / norm)
        cov_x = np.cov(xs, rowvar=False) if xs.shape[0] > 1 else np.zeros((x.shape[1],) * 2)
        cov_y = np.cov(ys, rowvar=False) if ys.shape[0] > 1 else np.zeros((y.shape[1],) * 2)
        gap = float(np.linalg.norm(cov_x - cov_y))
        ref_norm = float(np.linalg.norm(cov_y))
        cov_errors.append(gap / ref_norm if ref_norm > 0.0 else gap)
    mmd2 = rbf_mmd2(x, y, bandwidth)
    recon = None
    if reconstruction is not None:
        recon = relative_error(reconstruction[0], reconstruction[1])
    return MetricsReport(
        class_mean_error=tuple(mean_errors),
        class_cov_error=tuple(cov_errors),
        mmd=math.sqrt(max(mmd2, 0.0)),
        reconstruction_error=recon,
    )
