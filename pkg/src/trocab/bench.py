"""Measurement harness: throughput/latency protocol, overhead and cost
models, trade-off scoring, constraint checks, AUC, and a scaling probe.

Timing uses the monotonic wall clock (``time.perf_counter``).  Benchmark runs
are meant to execute exclusively — the harness serializes everything it
measures, and desk results remain sensitive to background load, so reports
carry run-to-run spread (min/median/max) rather than a single number.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .validation import as_float_matrix, check_labels

THROUGHPUT_MIN_SPS = 1000.0
P99_MAX_MS = 100.0
OVERHEAD_MAX = 2.0
CLEAN_ACC_FACTOR = 0.95

DEFAULT_HOURLY_RATE = 5.56


@dataclass(frozen=True)
class BenchProtocol:
    warmup_iters: int = 50
    timed_iters: int = 200
    runs: int = 5


@dataclass
class ThroughputEntry:
    samples_per_sec: float  # median across runs
    run_values: list[float]

    @property
    def spread(self) -> tuple[float, float, float]:
        return (min(self.run_values), self.samples_per_sec, max(self.run_values))


@dataclass
class ThroughputReport:
    per_batch_size: dict[int, ThroughputEntry]
    protocol: BenchProtocol

    def to_dict(self) -> dict:
        return {
            "protocol": {
                "warmup_iters": self.protocol.warmup_iters,
                "timed_iters": self.protocol.timed_iters,
                "runs": self.protocol.runs,
            },
            "per_batch_size": {
                str(n): {
                    "samples_per_sec": e.samples_per_sec,
                    "runs": e.run_values,
                    "spread": dict(zip(("min", "median", "max"), e.spread)),
                }
                for n, e in self.per_batch_size.items()
            },
        }


@dataclass
class LatencyReport:
    p50_ms: float
    p95_ms: float
    p99_ms: float
    n: int
    mode: str

    def to_dict(self) -> dict:
        return {
            "p50_ms": self.p50_ms, "p95_ms": self.p95_ms, "p99_ms": self.p99_ms,
            "n": self.n, "mode": self.mode,
        }


@dataclass
class PerfReport:
    throughput: ThroughputReport
    latency: LatencyReport


@dataclass
class ConstraintReport:
    throughput_ok: bool
    p99_ok: bool
    overhead_ok: bool
    clean_acc_ok: bool
    throughput_sps: float
    p99_ms: float
    overhead: float
    clean_acc: float
    baseline_clean_acc: float

    def all_ok(self) -> bool:
        return self.throughput_ok and self.p99_ok and self.overhead_ok and self.clean_acc_ok

    def to_dict(self) -> dict:
        return self.__dict__.copy()


@dataclass
class CostReport:
    hourly_rate: float
    overhead: float
    daily_cost: float

    def to_dict(self) -> dict:
        return self.__dict__.copy()


def measure_throughput(
    run_batch,
    make_batch,
    batch_sizes=(64, 128, 256),
    protocol: BenchProtocol = BenchProtocol(),
) -> ThroughputReport:
    """Warmup, time, repeat: median samples/sec per batch size across runs.

    ``run_batch(X)`` executes one batch; ``make_batch(n)`` builds the fixed
    input reused for every iteration of a batch size (repeat-heavy streams are
    the deployment pattern the cache exists for).
    """
    per_size = {}
    for n in batch_sizes:
        X = make_batch(n)
        run_values = []
        for _ in range(protocol.runs):
            for _ in range(protocol.warmup_iters):
                run_batch(X)
            t0 = time.perf_counter()
            for _ in range(protocol.timed_iters):
                run_batch(X)
            elapsed = time.perf_counter() - t0
            run_values.append(n * protocol.timed_iters / elapsed)
        per_size[int(n)] = ThroughputEntry(
            samples_per_sec=float(np.median(run_values)), run_values=run_values
        )
    return ThroughputReport(per_batch_size=per_size, protocol=protocol)


def nearest_rank_percentile(values, p: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    values = np.sort(np.asarray(values, dtype=np.float64))
    if values.size == 0:
        raise ValueError("empty input")
    k = max(1, math.ceil(p / 100.0 * values.size))
    return float(values[k - 1])


def measure_latency(run_unit, stream, mode: str = "per_batch") -> LatencyReport:
    """Nearest-rank P50/P95/P99 over per-unit wall times, in milliseconds.

    ``per_batch`` times one call per stream element; ``per_sample`` times each
    row of each element individually.
    """
    if mode not in ("per_batch", "per_sample"):
        raise ValueError("mode must be per_batch or per_sample")
    times_ms = []
    for unit in stream:
        if mode == "per_batch":
            t0 = time.perf_counter()
            run_unit(unit)
            times_ms.append((time.perf_counter() - t0) * 1e3)
        else:
            for row in np.asarray(unit):
                one = row[None, :]
                t0 = time.perf_counter()
                run_unit(one)
                times_ms.append((time.perf_counter() - t0) * 1e3)
    if len(times_ms) < 100:
        raise ValueError(f"need >= 100 timed units, got {len(times_ms)}")
    return LatencyReport(
        p50_ms=nearest_rank_percentile(times_ms, 50),
        p95_ms=nearest_rank_percentile(times_ms, 95),
        p99_ms=nearest_rank_percentile(times_ms, 99),
        n=len(times_ms),
        mode=mode,
    )


def _shared_batch_size(defended: ThroughputReport, baseline: ThroughputReport, batch_size):
    if batch_size is None:
        shared = sorted(set(defended.per_batch_size) & set(baseline.per_batch_size))
        if not shared:
            raise ValueError("reports share no batch size")
        return shared[-1]
    if batch_size not in defended.per_batch_size or batch_size not in baseline.per_batch_size:
        raise ValueError(f"batch size {batch_size} missing from a report")
    return batch_size


def overhead(
    defended: ThroughputReport, baseline: ThroughputReport, batch_size: int | None = None
) -> float:
    """Defense slowdown: baseline samples/sec over defended samples/sec.

    Uses the largest batch size present in both reports unless given one.
    """
    n = _shared_batch_size(defended, baseline, batch_size)
    return baseline.per_batch_size[n].samples_per_sec / defended.per_batch_size[n].samples_per_sec


def efficiency_metric(defended: PerfReport, baseline: PerfReport, batch_size=None) -> float:
    """Throughput ratio times inverse latency ratio (median sps, P50 latency)."""
    n = _shared_batch_size(defended.throughput, baseline.throughput, batch_size)
    thr_d = defended.throughput.per_batch_size[n].samples_per_sec
    thr_b = baseline.throughput.per_batch_size[n].samples_per_sec
    if thr_b == 0 or defended.latency.p50_ms == 0:
        raise ValueError("zero denominator")
    return (thr_d / thr_b) * (baseline.latency.p50_ms / defended.latency.p50_ms)


def robustness_metric(predict_fn, X_adv, labels) -> float:
    """Fraction of adversarial rows still classified to their true label."""
    X_adv = as_float_matrix(X_adv, "X_adv")
    if X_adv.shape[0] == 0:
        raise ValueError("empty evaluation set")
    labels = check_labels(labels, X_adv.shape[0])
    return float(np.mean(np.asarray(predict_fn(X_adv)) == labels))


def combined_objective(robustness: float, efficiency: float, alpha: float) -> float:
    """alpha-weighted sum of robustness and efficiency."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return alpha * robustness + (1.0 - alpha) * efficiency


def check_constraints(
    throughput_sps: float,
    p99_ms: float,
    overhead_ratio: float,
    clean_acc: float,
    baseline_clean_acc: float,
) -> ConstraintReport:
    """Evaluate the four deployment constraints against the fixed thresholds
    (>= 1000 samples/s, P99 <= 100 ms, overhead <= 2.0x, clean accuracy >=
    0.95x baseline)."""
    values = (throughput_sps, p99_ms, overhead_ratio, clean_acc, baseline_clean_acc)
    if any(v is None or not np.isfinite(v) for v in values):
        raise ValueError("missing measurement")
    return ConstraintReport(
        throughput_ok=throughput_sps >= THROUGHPUT_MIN_SPS,
        p99_ok=p99_ms <= P99_MAX_MS,
        overhead_ok=overhead_ratio <= OVERHEAD_MAX,
        clean_acc_ok=clean_acc >= CLEAN_ACC_FACTOR * baseline_clean_acc,
        throughput_sps=throughput_sps,
        p99_ms=p99_ms,
        overhead=overhead_ratio,
        clean_acc=clean_acc,
        baseline_clean_acc=baseline_clean_acc,
    )


def efficiency_score(asr_percent: float, overhead_ratio: float) -> float:
    """Literal (1 - ASR/100) * (1 / overhead) score.

    Note: this is the published footnote formula; it does not reproduce every
    printed score in the source tables and the discrepancy is reported as-is
    rather than reconciled.
    """
    if not 0.0 <= asr_percent <= 100.0:
        raise ValueError("asr_percent must lie in [0, 100]")
    if overhead_ratio <= 0:
        raise ValueError("overhead must be > 0")
    return (1.0 - asr_percent / 100.0) / overhead_ratio


def cost_model(overhead_ratio: float, hourly_rate: float = DEFAULT_HOURLY_RATE) -> CostReport:
    """Daily cost of running the defense: 24h x hourly rate x overhead."""
    if overhead_ratio < 0:
        raise ValueError("overhead must be >= 0")
    return CostReport(
        hourly_rate=hourly_rate,
        overhead=overhead_ratio,
        daily_cost=24.0 * hourly_rate * overhead_ratio,
    )


def auc(scores, labels) -> float:
    """Rank-based (Mann-Whitney) AUC with 0.5 credit for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = check_labels(labels, scores.shape[0])
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need at least one sample of each class")
    ranks = rankdata(scores)  # average ranks on ties
    r_pos = ranks[labels == 1].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class ScalingReport:
    batch_sizes: list[int]
    batch_times_s: list[float]
    slope: float
    intercept: float
    r2: float
    T_values: list[int] = field(default_factory=list)
    T_times_s: list[float] = field(default_factory=list)
    D_values: list[int] = field(default_factory=list)
    D_times_s: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "batch_sizes": self.batch_sizes,
            "batch_times_s": self.batch_times_s,
            "slope": self.slope,
            "intercept": self.intercept,
            "r2": self.r2,
            "T_values": self.T_values,
            "T_times_s": self.T_times_s,
            "D_values": self.D_values,
            "D_times_s": self.D_times_s,
        }


def _time_point(runner, reps: int, warmup: int) -> float:
    for _ in range(warmup):
        runner()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        runner()
        samples.append(time.perf_counter() - t0)
    return float(np.median(samples))


def linear_fit(xs, ys) -> tuple[float, float, float]:
    """Least-squares line plus R^2 (R^2 = 1 when the residuals vanish)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    slope, intercept = np.polyfit(xs, ys, 1)
    pred = slope * xs + intercept
    ss_res = float(((ys - pred) ** 2).sum())
    ss_tot = float(((ys - ys.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), r2


def scaling_probe(
    batch_runner,
    batch_sizes,
    mc_runner=None,
    T_values=(),
    dim_runner=None,
    D_values=(),
    reps: int = 5,
    warmup: int = 2,
) -> ScalingReport:
    """Empirical complexity probe.

    ``batch_runner(n)`` executes one pipeline batch of n rows; its times are
    fitted against n with a straight line.  Optional ``mc_runner(T)`` and
    ``dim_runner(d)`` time the uncertainty portion across T and the pipeline
    across feature dimensionality.
    """
    batch_sizes = [int(n) for n in batch_sizes]
    if len(batch_sizes) < 3:
        raise ValueError("need at least 3 batch sizes for a linearity fit")
    batch_times = [_time_point(lambda n=n: batch_runner(n), reps, warmup) for n in batch_sizes]
    slope, intercept, r2 = linear_fit(batch_sizes, batch_times)
    report = ScalingReport(
        batch_sizes=batch_sizes,
        batch_times_s=batch_times,
        slope=slope,
        intercept=intercept,
        r2=r2,
    )
    if mc_runner is not None and T_values:
        report.T_values = [int(t) for t in T_values]
        report.T_times_s = [
            _time_point(lambda t=t: mc_runner(t), reps, warmup) for t in report.T_values
        ]
    if dim_runner is not None and D_values:
        report.D_values = [int(d) for d in D_values]
        report.D_times_s = [
            _time_point(lambda d=d: dim_runner(d), reps, warmup) for d in report.D_values
        ]
    return report
