"""Small statistics helpers shared by evaluation and reporting code."""

from __future__ import annotations

from typing import Sequence

import numpy as np


def bootstrap_mean_ci(
    values: Sequence[float], n_boot: int = 1000, alpha: float = 0.05,
    seed: int = 0,
) -> tuple[float, float, float]:
    """Mean and percentile-bootstrap confidence interval, as (mean, lo, hi).

    Resamples with replacement n_boot times; the interval covers the
    central 1 - alpha mass of the resampled means. A single observation
    yields a zero-width interval.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot bootstrap an empty sample")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    mean = float(arr.mean())
    if arr.size == 1:
        return mean, mean, mean
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    idx = rng.integers(arr.size, size=(n_boot, arr.size))
    boot_means = arr[idx].mean(axis=1)
    lo = float(np.percentile(boot_means, 100.0 * (alpha / 2)))
    hi = float(np.percentile(boot_means, 100.0 * (1 - alpha / 2)))
    return mean, lo, hi
