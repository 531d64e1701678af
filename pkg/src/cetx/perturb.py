"""Label-preserving perturbations of windowed signals.

Four families: additive Gaussian noise, per-channel multiplicative
scaling, cubic-spline time warping, and contiguous segment masking. Each
training example gets one family chosen uniformly from the enabled set,
with randomness keyed by (seed, epoch, example index) so any example's
perturbation can be reproduced in isolation.

All functions operate on plain float arrays of shape (C, L) and preserve
shape and dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

__all__ = [
    "PerturbationConfig",
    "KINDS",
    "additive_noise",
    "multiplicative_scale",
    "time_warp",
    "warp_positions",
    "mask_segment",
    "apply_kind",
    "random_perturb",
]

# Canonical ordering; uniform selection indexes the enabled subset in this
# order, so the order is part of the reproducibility contract.
KINDS = ("additive", "multiplicative", "warp", "mask")

# Floor for warp rate values: keeps the cumulative time curve strictly
# increasing even if a spline segment dips toward zero.
_RATE_FLOOR = 1e-3


@dataclass(frozen=True)
class PerturbationConfig:
    additive_sigma: float = 0.2
    multiplicative_sigma: float = 0.2
    warp_sigma: float = 0.3
    warp_knots: int = 4
    mask_length: int = 100
    enabled: tuple[str, ...] = KINDS

    def __post_init__(self):
        for name, val in (
            ("additive_sigma", self.additive_sigma),
            ("multiplicative_sigma", self.multiplicative_sigma),
            ("warp_sigma", self.warp_sigma),
        ):
            if val < 0:
                raise ValueError(f"{name} must be >= 0, got {val}")
        if self.warp_knots < 2:
            raise ValueError(f"warp_knots must be >= 2, got {self.warp_knots}")
        if self.mask_length < 1:
            raise ValueError(f"mask_length must be >= 1, got {self.mask_length}")
        unknown = [k for k in self.enabled if k not in KINDS]
        if unknown:
            raise ValueError(f"unknown perturbation kinds {unknown}, choose from {list(KINDS)}")
        if len(set(self.enabled)) != len(self.enabled):
            raise ValueError("enabled perturbation kinds must be distinct")
        # Normalize to canonical order regardless of how they were listed.
        object.__setattr__(self, "enabled", tuple(k for k in KINDS if k in self.enabled))


def _check_window(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"expected a (C, L) window, got shape {x.shape}")
    return x


def additive_noise(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """x plus element-wise Gaussian noise of the given std-dev."""
    x = _check_window(x)
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0.0:
        return x
    return x + rng.normal(0.0, sigma, x.shape).astype(x.dtype, copy=False)


def multiplicative_scale(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Each channel scaled by its own draw from Normal(1, sigma)."""
    x = _check_window(x)
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0.0:
        return x
    scales = rng.normal(1.0, sigma, (x.shape[0], 1)).astype(x.dtype, copy=False)
    return x * scales


def warp_positions(length: int, sigma: float, knots: int, rng: np.random.Generator) -> np.ndarray:
    """The warped time positions used by time_warp for one channel.

    Knot values ~ Normal(1, sigma) at knots+2 evenly spaced anchors are
    interpolated with a cubic spline into a per-step rate curve, clamped
    to a small positive floor, cumulatively summed, and rescaled so the
    positions run exactly from 0 to length-1 and strictly increase.
    """
    if knots < 2:
        raise ValueError(f"knots must be >= 2, got {knots}")
    if length < 2:
        raise ValueError(f"length must be >= 2, got {length}")
    anchors = np.linspace(0.0, length - 1.0, knots + 2)
    values = np.maximum(rng.normal(1.0, sigma, knots + 2), _RATE_FLOOR)
    rate = np.maximum(CubicSpline(anchors, values)(np.arange(length, dtype=np.float64)), _RATE_FLOOR)
    cum = np.cumsum(rate)
    pos = (cum - cum[0]) * ((length - 1.0) / (cum[-1] - cum[0]))
    pos[0] = 0.0
    pos[-1] = length - 1.0
    return pos


def time_warp(x: np.ndarray, warp_sigma: float, knots: int, rng: np.random.Generator) -> np.ndarray:
    """Resample each channel along its own randomly warped time axis."""
    x = _check_window(x)
    length = x.shape[1]
    grid = np.arange(length, dtype=np.float64)
    out = np.empty_like(x)
    for c in range(x.shape[0]):
        pos = warp_positions(length, warp_sigma, knots, rng)
        out[c] = np.interp(pos, grid, x[c].astype(np.float64)).astype(x.dtype, copy=False)
    return out


def mask_segment(x: np.ndarray, mask_length: int, rng: np.random.Generator) -> np.ndarray:
    """Zero one contiguous run of mask_length time steps, the same window
    across all channels; everything else is untouched."""
    x = _check_window(x)
    length = x.shape[1]
    if not 0 < mask_length < length:
        raise ValueError(f"mask_length must be in (0, {length}), got {mask_length}")
    start = int(rng.integers(0, length - mask_length + 1))
    out = x.copy()
    out[:, start : start + mask_length] = 0
    return out


def apply_kind(x: np.ndarray, kind: str, config: PerturbationConfig, rng: np.random.Generator) -> np.ndarray:
    if kind == "additive":
        return additive_noise(x, config.additive_sigma, rng)
    if kind == "multiplicative":
        return multiplicative_scale(x, config.multiplicative_sigma, rng)
    if kind == "warp":
        return time_warp(x, config.warp_sigma, config.warp_knots, rng)
    if kind == "mask":
        return mask_segment(x, config.mask_length, rng)
    raise ValueError(f"unknown perturbation kind {kind!r}")


def example_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """The generator that perturbs example `index` in epoch `epoch`."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch, index])))


def random_perturb(
    batch: np.ndarray,
    config: PerturbationConfig,
    seed: int,
    epoch: int = 0,
    indices: np.ndarray | None = None,
) -> np.ndarray:
    """Perturb each example with one uniformly chosen enabled family.

    `indices` are the examples' dataset positions (defaults to 0..N-1);
    each example's randomness comes from SeedSequence([seed, epoch,
    index]), independent of batch composition or order.
    """
    batch = np.asarray(batch)
    if batch.ndim != 3:
        raise ValueError(f"expected a (N, C, L) batch, got shape {batch.shape}")
    if not config.enabled:
        raise ValueError("no perturbation kinds enabled")
    n = batch.shape[0]
    if indices is None:
        indices = np.arange(n)
    else:
        indices = np.asarray(indices)
        if indices.shape != (n,):
            raise ValueError(f"indices must have shape ({n},), got {indices.shape}")
    out = np.empty_like(batch)
    for i in range(n):
        rng = example_rng(seed, epoch, int(indices[i]))
        kind = config.enabled[int(rng.integers(len(config.enabled)))]
        out[i] = apply_kind(batch[i], kind, config, rng)
    return out
