"""Trust-raw-override pipeline: uncertainty gating, adaptive quantization,
LRU-cached raw-feature override, and online threshold adaptation.

Batch flow (default ``gate_first`` order): score the batch with the main
model, estimate per-sample MC-dropout uncertainty, gate rows with U > tau,
quantize the gated rows at their uncertainty-chosen bit depth and re-score
them, fetch raw-model probabilities for the gated rows (content-addressed LRU
cache over blob bytes, misses run raw feature extraction + the raw model),
and blend main and raw probabilities with a logistic weight in U.  Ungated
rows pass through bit-exactly.

The alternative ``quantize_first`` order (quantize and re-score every row
before gating) is selectable for ablations; it does not preserve the
bit-exact pass-through of ungated rows.

Concurrency: params are immutable at inference time, the cache serializes its
operations with a lock, and each worker passes its own RNG.  Threshold
adaptation is a single-writer loop; workers read ``config.tau`` between
batches.
"""

from __future__ import annotations

import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator

from .nn import MlpParams, forward, input_gradient
from .quantize import (
    BitDepthSchedule,
    bit_depth_batch,
    quantize_batch_adaptive,
)
from .rawpipe import extract_raw, fnv1a64, parse_blob
from .uncertainty import mc_uncertainty
from .validation import as_float_matrix, check_aligned

TAU_MAX = 0.25  # attainable range of a [0,1]-probability variance

ORDERS = ("gate_first", "quantize_first")


class CachePoisonedError(RuntimeError):
    """Raised when key verification finds two blobs sharing a cache key."""


@dataclass
class TroConfig:
    """Tunables of the override pipeline (``lam`` is the overhead weight)."""

    tau: float = 0.1
    T: int = 10
    cache_capacity: int = 10_000
    combine_slope: float = 20.0
    combine_center: float = 0.15
    eta: float = 0.01
    lam: float = 0.5
    schedule: BitDepthSchedule = field(default_factory=BitDepthSchedule)
    probe_delta: float = 0.02
    probe_epsilon: float = 0.1
    window_capacity: int = 512
    order: str = "gate_first"
    verify_cache_keys: bool = False

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be >= 0")
        if self.cache_capacity < 0:
            raise ValueError("cache_capacity must be >= 0")
        if self.eta <= 0:
            raise ValueError("eta must be > 0")
        if self.order not in ORDERS:
            raise ValueError(f"order must be one of {ORDERS}")


class LruCache:
    """Thread-safe fixed-capacity map with least-recently-used eviction.

    ``get`` refreshes recency; ``put`` inserts/overwrites and evicts the
    least-recently-used entry once the capacity is exceeded.
    """

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self._data: OrderedDict = OrderedDict()
        self._lock = threading.Lock()

    def get(self, key, default=None):
        with self._lock:
            if key not in self._data:
                return default
            self._data.move_to_end(key)
            return self._data[key]

    def put(self, key, value) -> None:
        if self.capacity == 0:
            return
        with self._lock:
            if key in self._data:
                self._data.move_to_end(key)
            self._data[key] = value
            while len(self._data) > self.capacity:
                self._data.popitem(last=False)

    def __len__(self) -> int:
        with self._lock:
            return len(self._data)

    def __contains__(self, key) -> bool:
        with self._lock:
            return key in self._data

    def keys(self):
        with self._lock:
            return list(self._data.keys())


@dataclass
class PipelineOutput:
    p_final: np.ndarray       # (B,) positive-class probability
    mask: np.ndarray          # (B,) bool, True where U > tau
    u: np.ndarray             # (B,) uncertainty per sample
    bits: np.ndarray          # (B,) bit depth applied (0 = not quantized)
    cache_hits: int
    cache_misses: int
    wall_time_s: float
    tau: float

    def telemetry(self) -> dict:
        values, counts = np.unique(self.bits, return_counts=True)
        looked_up = self.cache_hits + self.cache_misses
        return {
            "mask_rate": float(self.mask.mean()) if self.mask.size else 0.0,
            "cache_hit_rate": self.cache_hits / looked_up if looked_up else 0.0,
            "tau": self.tau,
            "bits_histogram": {int(v): int(c) for v, c in zip(values, counts)},
            "wall_time_s": self.wall_time_s,
        }


def combine(p_main, p_raw, u, k: float, c: float) -> np.ndarray:
    """Blend main and raw probabilities with weight w = logistic(k*(u - c))."""
    w = expit(k * (np.asarray(u, dtype=np.float64) - c))
    return (1.0 - w) * np.asarray(p_main, dtype=np.float64) + w * np.asarray(
        p_raw, dtype=np.float64
    )


@lru_cache(maxsize=1 << 16)
def cache_key(blob_bytes: bytes) -> int:
    # memoized: repeat-heavy streams would otherwise re-hash every batch
    return fnv1a64(blob_bytes)


def raw_probability(raw_params: MlpParams, blob_bytes_list) -> np.ndarray:
    """Raw-model positive-class probability for a list of serialized blobs."""
    feats = np.stack([extract_raw(parse_blob(b)) for b in blob_bytes_list])
    probs, _ = forward(raw_params, feats, mode="eval")
    return probs[:, 1]


def _raw_with_cache(
    blob_bytes_rows, raw_params: MlpParams, cache: LruCache, verify: bool
) -> tuple[np.ndarray, int, int]:
    p_raw = np.empty(len(blob_bytes_rows))
    miss_idx, miss_blobs = [], []
    hits = 0
    for j, blob in enumerate(blob_bytes_rows):
        key = cache_key(blob)
        cached = cache.get(key)
        if cached is None:
            miss_idx.append(j)
            miss_blobs.append(blob)
        else:
            if verify:
                value, stored_blob = cached
                if stored_blob != blob:
                    raise CachePoisonedError(f"cache key collision on {key:#x}")
            else:
                value = cached
            p_raw[j] = value
            hits += 1
    if miss_idx:
        fresh = raw_probability(raw_params, miss_blobs)
        for j, blob, p in zip(miss_idx, miss_blobs, fresh):
            p_raw[j] = p
            cache.put(cache_key(blob), (p, blob) if verify else p)
    return p_raw, hits, len(miss_idx)


def tro_batch(
    batch,
    blobs,
    main_params: MlpParams,
    raw_params: MlpParams,
    config: TroConfig,
    cache: LruCache,
    rng: np.random.Generator,
) -> PipelineOutput:
    """Run one defended batch; see the module docstring for the flow."""
    t0 = time.perf_counter()
    batch = as_float_matrix(batch, "batch")
    check_aligned(batch.shape[0], len(blobs), "blobs")
    B = batch.shape[0]

    probs, _ = forward(main_params, batch, mode="eval")
    p_final = probs[:, 1].copy()
    est = mc_uncertainty(main_params, batch, config.T, rng)
    u = est.u
    mask = u > config.tau
    bits = np.zeros(B, dtype=np.int64)
    hits = misses = 0

    if config.order == "quantize_first":
        x_q = quantize_batch_adaptive(batch, u, config.schedule)
        probs_q, _ = forward(main_params, x_q, mode="eval")
        p_final = probs_q[:, 1].copy()
        bits = bit_depth_batch(u, config.schedule)

    rows = np.flatnonzero(mask)
    if rows.size:
        if config.order == "gate_first":
            bits[rows] = bit_depth_batch(u[rows], config.schedule)
            x_q = quantize_batch_adaptive(batch[rows], u[rows], config.schedule)
            probs_q, _ = forward(main_params, x_q, mode="eval")
            p_main_gated = probs_q[:, 1]
        else:
            p_main_gated = p_final[rows]
        p_raw, hits, misses = _raw_with_cache(
            [blobs[i] for i in rows], raw_params, cache, config.verify_cache_keys
        )
        p_final[rows] = combine(
            p_main_gated, p_raw, u[rows], config.combine_slope, config.combine_center
        )

    return PipelineOutput(
        p_final=p_final,
        mask=mask,
        u=u,
        bits=bits,
        cache_hits=hits,
        cache_misses=misses,
        wall_time_s=time.perf_counter() - t0,
        tau=config.tau,
    )


def objective_J(robustness_est: float, overhead_est: float, lam: float) -> float:
    """Scalar trade-off objective: robustness minus lam-weighted overhead."""
    if not (np.isfinite(robustness_est) and np.isfinite(overhead_est)):
        raise ValueError("estimates must be finite")
    return robustness_est - lam * overhead_est


def adapt_threshold(
    tau: float, eval_window, eta: float, lam: float, probe_delta: float = 0.02
) -> float:
    """One finite-difference ascent step on J(tau).

    The gradient is estimated symmetrically from the window's robustness and
    override-fraction estimators at tau +/- probe_delta, and the updated
    threshold is clamped to [0, 0.25].
    """
    if len(eval_window) == 0:
        raise ValueError("empty adaptation window")

    def j(t: float) -> float:
        return objective_J(
            eval_window.robustness_at(t), eval_window.override_fraction_at(t), lam
        )

    g = (j(tau + probe_delta) - j(tau - probe_delta)) / (2.0 * probe_delta)
    return float(np.clip(tau + eta * g, 0.0, TAU_MAX))


class ThresholdAdaptationWindow:
    """Sliding window of stream samples supporting J(tau) estimation.

    For each observed sample the window stores everything needed to replay
    the defended decision at an arbitrary threshold: uncertainty, main and
    quantized-rescored probabilities, the raw-model probability, and the same
    quantities for a fixed single-step probe attack on the sample.  The
    robustness estimate at tau is 1 minus the fraction of window samples whose
    defended prediction flips under the probe; the overhead estimate is the
    override fraction at tau.
    """

    def __init__(
        self,
        main_params: MlpParams,
        raw_params: MlpParams,
        config: TroConfig,
    ):
        self.main_params = main_params
        self.raw_params = raw_params
        self.config = config
        self._cols = {
            name: np.empty(0)
            for name in ("u", "p_main", "p_q", "u_adv", "p_main_adv", "p_q_adv", "p_raw")
        }

    def __len__(self) -> int:
        return self._cols["u"].shape[0]

    def _score(self, X, rng):
        probs, _ = forward(self.main_params, X, mode="eval")
        est = mc_uncertainty(self.main_params, X, self.config.T, rng)
        x_q = quantize_batch_adaptive(X, est.u, self.config.schedule)
        probs_q, _ = forward(self.main_params, x_q, mode="eval")
        return est.u, probs[:, 1], probs_q[:, 1]

    def observe(self, X, blobs, rng: np.random.Generator) -> None:
        X = as_float_matrix(X, "X")
        check_aligned(X.shape[0], len(blobs), "blobs")
        u, p_main, p_q = self._score(X, rng)
        # fixed probe: one signed-gradient step against the main model,
        # using predicted labels (the stream is unlabelled)
        y_hat = (p_main > 0.5).astype(np.int64)
        g = input_gradient(self.main_params, X, y_hat, mode="eval")
        X_adv = np.clip(X + self.config.probe_epsilon * np.sign(g), 0.0, 1.0)
        u_adv, p_main_adv, p_q_adv = self._score(X_adv, rng)
        p_raw = raw_probability(self.raw_params, blobs)
        new = {
            "u": u, "p_main": p_main, "p_q": p_q,
            "u_adv": u_adv, "p_main_adv": p_main_adv, "p_q_adv": p_q_adv,
            "p_raw": p_raw,
        }
        cap = self.config.window_capacity
        for name, vals in new.items():
            self._cols[name] = np.concatenate([self._cols[name], vals])[-cap:]

    def _pred(self, u, p_main, p_q, p_raw, tau: float) -> np.ndarray:
        p = np.where(
            u > tau,
            combine(p_q, p_raw, u, self.config.combine_slope, self.config.combine_center),
            p_main,
        )
        return p > 0.5

    def robustness_at(self, tau: float) -> float:
        c = self._cols
        pred_clean = self._pred(c["u"], c["p_main"], c["p_q"], c["p_raw"], tau)
        pred_adv = self._pred(c["u_adv"], c["p_main_adv"], c["p_q_adv"], c["p_raw"], tau)
        return 1.0 - float(np.mean(pred_clean != pred_adv))

    def override_fraction_at(self, tau: float) -> float:
        return float(np.mean(self._cols["u"] > tau))


class TrustRawOverride(BaseEstimator):
    """Estimator-style wrapper bundling both models, config, and the cache."""

    def __init__(
        self,
        main_params: MlpParams,
        raw_params: MlpParams,
        config: TroConfig | None = None,
        cache: LruCache | None = None,
    ):
        self.main_params = main_params
        self.raw_params = raw_params
        self.config = config if config is not None else TroConfig()
        self.cache = cache if cache is not None else LruCache(self.config.cache_capacity)

    def run_batch(self, X, blobs, rng: np.random.Generator | None = None) -> PipelineOutput:
        rng = rng if rng is not None else np.random.default_rng(0)
        return tro_batch(
            X, blobs, self.main_params, self.raw_params, self.config, self.cache, rng
        )

    def predict_proba(self, X, blobs, rng=None) -> np.ndarray:
        p = self.run_batch(X, blobs, rng).p_final
        return np.column_stack([1.0 - p, p])

    def predict(self, X, blobs, rng=None) -> np.ndarray:
        return (self.run_batch(X, blobs, rng).p_final > 0.5).astype(np.int64)

    def new_window(self) -> ThresholdAdaptationWindow:
        return ThresholdAdaptationWindow(self.main_params, self.raw_params, self.config)

    def adapt(self, window: ThresholdAdaptationWindow) -> float:
        """Single-writer threshold update from the current window state."""
        self.config.tau = adapt_threshold(
            self.config.tau, window, self.config.eta, self.config.lam,
            self.config.probe_delta,
        )
        return self.config.tau
