"""Monte-Carlo-dropout uncertainty and probability calibration metrics.

The per-sample uncertainty is the population variance (divide by T) of the
positive-class probability across T stochastic dropout passes, so it lives in
[0, 0.25] and is exactly 0 whenever the passes agree (e.g. dropout rate 0, or
T = 1).
"""

from __future__ import annotations

import copy
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .nn import MlpParams, forward
from .validation import check_labels

DEFAULT_ECE_BINS = 15

# fixed partition of the T passes into independently-seeded groups; BLAS and
# the mask PRNG release the GIL, so groups parallelize on multicore hosts
# without changing results
MC_PASS_GROUPS = 4

_F32_TINY = np.finfo(np.float32).tiny
_POOL = None
_POOL_READY = False


def _mc_pool():
    """Shared thread pool for MC pass groups; None on single-core hosts."""
    global _POOL, _POOL_READY
    if not _POOL_READY:
        _POOL_READY = True
        cores = os.cpu_count() or 1
        if cores > 1:
            _POOL = ThreadPoolExecutor(
                max_workers=min(MC_PASS_GROUPS, cores), thread_name_prefix="mc-pass"
            )
    return _POOL


def _f32_flushed(a: np.ndarray) -> np.ndarray:
    out = a.astype(np.float32)
    out[np.abs(out) < _F32_TINY] = np.float32(0)
    return out


@dataclass
class UncertaintyEstimate:
    """Variance-based uncertainty per sample plus the raw per-pass probabilities."""

    u: np.ndarray            # (B,) population variance of positive-class prob
    pass_probs: np.ndarray   # (T, B) positive-class probability per pass
    mean_prob: np.ndarray    # (B,) mean positive-class probability


@dataclass
class CalibrationReport:
    ece: float
    brier: float
    bins: list[tuple[float, float, int]]  # (mean confidence, accuracy, count)
    n_bins: int

    def to_dict(self) -> dict:
        return {
            "ece": self.ece,
            "brier": self.brier,
            "n_bins": self.n_bins,
            "bins": [
                {"confidence": c, "accuracy": a, "count": n} for c, a, n in self.bins
            ],
        }


def mc_uncertainty(
    params: MlpParams, batch: np.ndarray, T: int, rng: np.random.Generator
) -> UncertaintyEstimate:
    """T stochastic forward passes with dropout enabled at inference.

    The T passes run as one fused tiled batch on a 32-bit fast path: the
    first-layer matmul precedes any dropout, so it is computed once and tiled;
    dropout masks are drawn as 16-bit uniform integers against a threshold
    (keep probability quantized to 1/65536) and the inverted-dropout rescale
    is folded into the following layer's weights.  With dropout rate 0 (or
    T = 1) the passes agree by construction and U is exactly 0.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    batch = np.asarray(batch, dtype=np.float64)
    B = batch.shape[0]
    if params.dropout_rate == 0.0 or params.n_layers == 1:
        # no hidden activation carries dropout: every pass agrees exactly
        probs, _ = forward(params, batch, mode="eval")
        pass_probs = np.tile(probs[:, 1], (T, 1))
        return UncertaintyEstimate(u=np.zeros(B), pass_probs=pass_probs,
                                   mean_prob=pass_probs[0].copy())

    keep = 1.0 - params.dropout_rate
    thresh = np.uint16(min(round(keep * 65536), 65535))
    # flush sub-normal float32 weights to zero: weight decay drives dead
    # weights to ~1e-40 magnitudes, and denormal sgemm is an order of
    # magnitude slower on x86
    w32 = [_f32_flushed(w) for w in params.weights]
    b32 = [_f32_flushed(b) for b in params.biases]
    scaled_w32 = [w32[l] * np.float32(1.0 / keep) for l in range(1, params.n_layers)]
    h = np.maximum(batch.astype(np.float32) @ w32[0] + b32[0], np.float32(0))
    hidden_widths = params.architecture[1:-1]

    # the T passes are partitioned into a fixed number of groups, each with
    # its own spawned mask stream, so results are identical whether the
    # groups run sequentially or on a thread pool
    children = rng.spawn(MC_PASS_GROUPS)
    group_sizes = [len(g) for g in np.array_split(np.arange(T), MC_PASS_GROUPS)]

    def run_group(g: int) -> np.ndarray:
        tg = group_sizes[g]
        if tg == 0:
            return np.empty(0, dtype=np.float32)
        grng = children[g]
        mask = grng.integers(0, 65536, size=(tg, B, hidden_widths[0]), dtype=np.uint16) < thresh
        H = (h * mask).reshape(tg * B, hidden_widths[0])
        H = H @ scaled_w32[0] + b32[1]
        for l in range(2, params.n_layers):
            np.maximum(H, np.float32(0), out=H)
            width = hidden_widths[l - 1]
            mask = grng.integers(0, 65536, size=(tg * B, width), dtype=np.uint16) < thresh
            np.multiply(H, mask, out=H)
            H = H @ scaled_w32[l - 1] + b32[l]
        # two-logit softmax reduces to a logistic of the logit difference;
        # f32 exp overflow saturates to the correct 0/1 limits
        z = H[:, 0] - H[:, 1]
        with np.errstate(over="ignore"):
            np.exp(z, out=z)
        return 1.0 / (1.0 + z)

    if _mc_pool() is not None:
        parts = list(_mc_pool().map(run_group, range(MC_PASS_GROUPS)))
    else:
        parts = [run_group(g) for g in range(MC_PASS_GROUPS)]
    p = np.concatenate(parts)

    pass_probs = p.reshape(T, B).astype(np.float64)
    mean_prob = pass_probs.mean(axis=0)
    # population variance (ddof=0), computed on pass-0-shifted values so that
    # agreeing passes yield exactly 0 regardless of float rounding in the mean
    u = (pass_probs - pass_probs[0]).var(axis=0)
    return UncertaintyEstimate(u=u, pass_probs=pass_probs, mean_prob=mean_prob)


def _confidence_accuracy(probabilities, labels):
    p = np.asarray(probabilities, dtype=np.float64)
    if p.size == 0:
        raise ValueError("empty input")
    if p.min() < 0.0 or p.max() > 1.0:
        raise ValueError("probabilities must lie in [0, 1]")
    y = check_labels(labels, p.shape[0], "labels")
    confidence = np.maximum(p, 1.0 - p)
    predicted = (p >= 0.5).astype(np.int64)
    correct = (predicted == y).astype(np.float64)
    return confidence, correct


def calibration_report(probabilities, labels, n_bins: int = DEFAULT_ECE_BINS) -> CalibrationReport:
    """Equal-width-bin calibration summary over max-class confidence."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    confidence, correct = _confidence_accuracy(probabilities, labels)
    n = confidence.shape[0]
    idx = np.minimum((confidence * n_bins).astype(np.int64), n_bins - 1)
    ece = 0.0
    bins = []
    for b in range(n_bins):
        mask = idx == b
        count = int(mask.sum())
        if count == 0:
            continue
        conf = float(confidence[mask].mean())
        acc = float(correct[mask].mean())
        ece += (count / n) * abs(acc - conf)
        bins.append((conf, acc, count))
    return CalibrationReport(
        ece=float(ece),
        brier=brier(probabilities, labels),
        bins=bins,
        n_bins=n_bins,
    )


def ece(probabilities, labels, n_bins: int = DEFAULT_ECE_BINS) -> float:
    """Expected calibration error: count-weighted mean |accuracy - confidence|."""
    return calibration_report(probabilities, labels, n_bins).ece


def brier(probabilities, labels) -> float:
    """Mean squared error between positive-class probability and binary label."""
    p = np.asarray(probabilities, dtype=np.float64)
    if p.size == 0:
        raise ValueError("empty input")
    y = check_labels(labels, p.shape[0], "labels")
    return float(np.mean((p - y) ** 2))


class UncertaintyGap(NamedTuple):
    mean_u_clean: float
    mean_u_adv: float
    gap: float


def uncertainty_gap_probe(
    params: MlpParams,
    clean_batch: np.ndarray,
    adv_batch: np.ndarray,
    T: int,
    rng: np.random.Generator,
) -> UncertaintyGap:
    """Mean MC-dropout uncertainty on a clean batch vs a perturbed batch.

    Reports the two means and their difference; no thresholding is applied.
    Both batches see identical dropout draws (paired RNG copies), so equal
    batches give a gap of exactly 0 and the comparison is variance-reduced.
    """
    clean_batch = np.asarray(clean_batch, dtype=np.float64)
    adv_batch = np.asarray(adv_batch, dtype=np.float64)
    if clean_batch.shape != adv_batch.shape:
        raise ValueError("clean and adversarial batches must have equal shape")
    paired = copy.deepcopy(rng)
    u_clean = float(mc_uncertainty(params, clean_batch, T, rng).u.mean())
    u_adv = float(mc_uncertainty(params, adv_batch, T, paired).u.mean())
    return UncertaintyGap(u_clean, u_adv, u_adv - u_clean)
