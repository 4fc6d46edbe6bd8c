"""Confidence-adaptive bit-depth reduction of [0, 1] feature vectors.

Features live in [0, 1] and are scaled by 255 into an 8-bit working domain.
A sample's bit depth (8/6/4) is chosen from its uncertainty, then values are
snapped to a grid of width ``2**(8 - bits)`` in the scaled domain with
half-away-from-zero rounding.  The quantizer is idempotent, monotone and
piecewise constant, and every grid cell center is insensitive to
perturbations of scaled magnitude below ``2**(7 - bits)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

VALID_BITS = (4, 6, 8)


@dataclass(frozen=True)
class BitDepthSchedule:
    """Uncertainty thresholds mapping to 8/6/4-bit precision bands."""

    tau_low: float = 0.1
    tau_high: float = 0.3
    bits_low_u: int = 8
    bits_mid_u: int = 6
    bits_high_u: int = 4

    def __post_init__(self):
        if not 0 <= self.tau_low < self.tau_high:
            raise ValueError("need 0 <= tau_low < tau_high")
        for b in (self.bits_low_u, self.bits_mid_u, self.bits_high_u):
            if b not in VALID_BITS:
                raise ValueError(f"bit depth must be one of {VALID_BITS}")


@dataclass(frozen=True)
class QuantDomain:
    """Scaling of the [0, 1] feature box into the 8-bit working range."""

    scale: float = 255.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be > 0")


DEFAULT_SCHEDULE = BitDepthSchedule()
DEFAULT_DOMAIN = QuantDomain()


def bit_depth(u: float, schedule: BitDepthSchedule = DEFAULT_SCHEDULE) -> int:
    """Bit depth for one uncertainty value; boundaries belong to the coarser band."""
    if u < schedule.tau_low:
        return schedule.bits_low_u
    if u < schedule.tau_high:
        return schedule.bits_mid_u
    return schedule.bits_high_u


def bit_depth_batch(u, schedule: BitDepthSchedule = DEFAULT_SCHEDULE) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    bits = np.full(u.shape, schedule.bits_high_u, dtype=np.int64)
    bits[u < schedule.tau_high] = schedule.bits_mid_u
    bits[u < schedule.tau_low] = schedule.bits_low_u
    return bits


def _round_half_away(v: np.ndarray) -> np.ndarray:
    # np.round is banker's rounding; ties here must go away from zero
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def quantize(x, bits: int, domain: QuantDomain = DEFAULT_DOMAIN) -> np.ndarray:
    """Snap values to the bit-depth grid and clamp back into [0, 1]."""
    step = 2.0 ** (8 - bits)
    y = np.asarray(x, dtype=np.float64) * domain.scale
    y_q = _round_half_away(y / step) * step
    return np.clip(y_q / domain.scale, 0.0, 1.0)


def quantize_batch_adaptive(
    batch,
    u_per_sample,
    schedule: BitDepthSchedule = DEFAULT_SCHEDULE,
    domain: QuantDomain = DEFAULT_DOMAIN,
) -> np.ndarray:
    """Quantize each row at the bit depth chosen by its own uncertainty."""
    batch = np.asarray(batch, dtype=np.float64)
    u = np.asarray(u_per_sample, dtype=np.float64)
    if batch.shape[0] != u.shape[0]:
        raise ValueError("need exactly one uncertainty value per batch row")
    out = np.empty_like(batch)
    bits = bit_depth_batch(u, schedule)
    for b in VALID_BITS:
        rows = bits == b
        if rows.any():
            out[rows] = quantize(batch[rows], b, domain)
    return out


def ste_backward(upstream_grad, x, bits: int) -> np.ndarray:
    """Straight-through gradient of the quantize-and-clamp operation.

    Identity wherever the input lies in [0, 1]; zero where the clamp would
    have saturated.  ``bits`` does not affect the estimator but is kept so the
    call mirrors the forward signature.
    """
    upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if upstream_grad.shape != x.shape:
        raise ValueError("gradient and input shapes must match")
    inside = (x >= 0.0) & (x <= 1.0)
    return upstream_grad * inside


class NonSensitivityRadius(NamedTuple):
    scaled: float   # radius in the 0..255 working domain
    feature: float  # same radius in [0, 1] feature units


def non_sensitivity_radius(
    bits: int, domain: QuantDomain = DEFAULT_DOMAIN
) -> NonSensitivityRadius:
    """Half-cell radius around grid centers where the quantized output is constant."""
    if bits not in VALID_BITS:
        raise ValueError(f"bit depth must be one of {VALID_BITS}")
    r = 2.0 ** (7 - bits)
    return NonSensitivityRadius(scaled=r, feature=r / domain.scale)


class BitDepthReducer(BaseEstimator, TransformerMixin):
    """Fixed-bit-depth transformer for pipeline composition."""

    def __init__(self, bits=8, scale=255.0):
        self.bits = bits
        self.scale = scale

    def fit(self, X, y=None):
        if self.bits not in VALID_BITS:
            raise ValueError(f"bit depth must be one of {VALID_BITS}")
        return self

    def transform(self, X):
        return quantize(X, self.bits, QuantDomain(scale=self.scale))
