"""Command-line orchestration.

Commands: gen-data, train, eval, attack, bench, calibrate, adapt-sim.
Common flags: --config (path or preset name), --seed, --out.

Exit codes: 0 success, 2 configuration/usage error (unknown attack, bad
config key), 3 missing input file, 4 data/shape mismatch or malformed data
file, 5 interrupted benchmark, 1 anything else.

Every command is reproducible bit-for-bit for a fixed config and seed, except
for wall-clock timing fields in the emitted reports.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import attacks as atk
from . import bench as bn
from .config import ConfigError, RunConfig, load_config, load_preset, serialize_config
from .dataio import Dataset, read_dataset, write_dataset
from .nn import (
    MlpParams,
    forward,
    init_mlp,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .rawpipe import extract_raw, parse_blob, serialize_blob, synth_dataset, synth_sample
from .reporting import build_report, render_table, write_report
from .tro import TrustRawOverride
from .uncertainty import calibration_report, mc_uncertainty

MAIN_CKPT = "main.mlp1"
RAW_CKPT = "raw.mlp1"
SPLITS = ("train", "val", "test")

ATTACK_NAMES = ("fgsm", "pgd", "cw", "bpda_eot", "square")


class UnknownAttackError(ValueError):
    pass


def _resolve_config(spec: str | None) -> RunConfig:
    if spec is None:
        return load_preset("desk")
    path = Path(spec)
    if path.exists():
        return load_config(path)
    return load_preset(spec)


def _dataset_path(data_dir, split: str) -> Path:
    return Path(data_dir) / f"{split}.dsv"


def _load_split(data_dir, split: str) -> Dataset:
    path = _dataset_path(data_dir, split)
    if not path.exists():
        raise FileNotFoundError(f"missing dataset file {path}")
    return read_dataset(path)


def _load_models(ckpt_dir) -> tuple[MlpParams, MlpParams]:
    for name in (MAIN_CKPT, RAW_CKPT):
        if not (Path(ckpt_dir) / name).exists():
            raise FileNotFoundError(f"missing checkpoint {Path(ckpt_dir) / name}")
    return (
        load_checkpoint(Path(ckpt_dir) / MAIN_CKPT),
        load_checkpoint(Path(ckpt_dir) / RAW_CKPT),
    )


def _pipeline(cfg: RunConfig, main_params, raw_params) -> TrustRawOverride:
    return TrustRawOverride(main_params, raw_params, cfg.tro_config())


def _raw_features(blobs) -> np.ndarray:
    return np.stack([extract_raw(parse_blob(b)) for b in blobs])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, out_dir, seed: int) -> dict:
    """Write train/val/test dataset files with disjoint sampling seeds.

    The test split draws ``data.test_hard_fraction`` of its samples from the
    weak-signal subpopulation; train and val stay clean."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sizes = {"train": cfg.data.n_train, "val": cfg.data.n_val, "test": cfg.data.n_test}
    stats = None
    results = {}
    for i, split in enumerate(SPLITS):
        # the held-out stream carries the ambiguous subpopulation (drift-like
        # samples the trained model should be uncertain about)
        hard = cfg.data.test_hard_fraction if split == "test" else 0.0
        gen = cfg.generator_config(hard_fraction=hard)
        X, y, blobs = synth_dataset(sizes[split], gen, seed + i)
        if split == "train":
            stats = (X.min(axis=0), X.max(axis=0))
        write_dataset(_dataset_path(out_dir, split), X, y, blobs, stats=stats)
        results[split] = {
            "n": int(sizes[split]),
            "label_balance": float(np.mean(y)),
            "path": str(_dataset_path(out_dir, split)),
        }
    return results


def cmd_train(cfg: RunConfig, data_dir, out_dir, seed: int) -> dict:
    """Train the main (engineered-feature) and raw (368-dim) classifiers."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tr, val = _load_split(data_dir, "train"), _load_split(data_dir, "val")
    if tr.X.shape[1] != cfg.data.feature_dim:
        raise ValueError(
            f"dataset feature dim {tr.X.shape[1]} != configured {cfg.data.feature_dim}"
        )
    tcfg = cfg.train_config(seed)

    main_init = init_mlp([tr.X.shape[1], *cfg.model.hidden, 2], seed)
    main_init.dropout_rate = cfg.model.dropout_rate
    main_params, main_hist = train(main_init, (tr.X, tr.y), (val.X, val.y), tcfg)
    save_checkpoint(out_dir / MAIN_CKPT, main_params)

    raw_tr, raw_val = _raw_features(tr.blobs), _raw_features(val.blobs)
    raw_init = init_mlp([raw_tr.shape[1], *cfg.model.hidden, 2], seed + 1)
    raw_init.dropout_rate = cfg.model.dropout_rate
    raw_params, raw_hist = train(raw_init, (raw_tr, tr.y), (raw_val, val.y), tcfg)
    save_checkpoint(out_dir / RAW_CKPT, raw_params)

    return {
        "main": {
            "checkpoint": str(out_dir / MAIN_CKPT),
            "best_epoch": main_hist["best_epoch"],
            "stopped_epoch": main_hist["stopped_epoch"],
            "val_loss": main_hist["val_loss"],
            "val_acc": main_hist["val_acc"],
        },
        "raw": {
            "checkpoint": str(out_dir / RAW_CKPT),
            "best_epoch": raw_hist["best_epoch"],
            "stopped_epoch": raw_hist["stopped_epoch"],
            "val_loss": raw_hist["val_loss"],
            "val_acc": raw_hist["val_acc"],
        },
    }


def _metric_block(p_pos: np.ndarray, y: np.ndarray) -> dict:
    preds = (p_pos > 0.5).astype(np.int64)
    malware = y == 1
    cal = calibration_report(p_pos, y)
    return {
        "clean_acc": float(np.mean(preds == y)),
        "malware_tpr": float(np.mean(preds[malware] == 1)) if malware.any() else 0.0,
        "auc": bn.auc(p_pos, y),
        "ece": cal.ece,
        "brier": cal.brier,
        "calibration": cal.to_dict(),
    }


def cmd_eval(cfg: RunConfig, data_dir, ckpt_dir, seed: int) -> dict:
    """Clean-test metrics for the undefended model and the defended pipeline."""
    test = _load_split(data_dir, "test")
    main_params, raw_params = _load_models(ckpt_dir)
    probs, _ = forward(main_params, test.X, mode="eval")
    undefended = _metric_block(probs[:, 1], test.y)
    pipeline = _pipeline(cfg, main_params, raw_params)
    out = pipeline.run_batch(test.X, test.blobs, np.random.default_rng(seed))
    defended = _metric_block(out.p_final, test.y)
    defended["override_rate"] = float(out.mask.mean())
    return {"undefended": undefended, "defended": defended}


def _run_attack(
    name: str,
    cfg: RunConfig,
    pipeline: TrustRawOverride,
    main_params: MlpParams,
    X,
    blobs,
    y,
    epsilon: float,
    seed: int,
) -> atk.AttackResult:
    rng = np.random.default_rng(seed)
    a = cfg.attack
    if name == "fgsm":
        return atk.fgsm(main_params, X, y, epsilon)
    if name == "pgd":
        return atk.pgd(
            main_params, X, y, epsilon, steps=a.pgd_steps, random_start=True, rng=rng
        )
    if name == "cw":
        return atk.cw(
            main_params, X, y, kappa=a.kappa, c_init=a.c_init, iters=a.cw_iters, lr=a.cw_lr
        )
    if name == "bpda_eot":
        return atk.bpda_eot(
            pipeline, X, blobs, y, epsilon, steps=a.pgd_steps, t_eot=a.t_eot, rng=rng
        )
    if name == "square":
        def score(Xq, idx):  # score-only black-box access to the defended pipeline
            return pipeline.run_batch(Xq, [blobs[i] for i in idx], rng).p_final

        return atk.square_attack(
            score, X, y, epsilon, max_queries=a.max_queries, rng=rng, p_init=a.square_p_init
        )
    raise UnknownAttackError(f"unknown attack {name!r} (choose from {ATTACK_NAMES})")


def cmd_attack(
    cfg: RunConfig, data_dir, ckpt_dir, attack_names, seed: int, save_adv_dir=None
) -> dict:
    """ASR table: each attack at each epsilon, mean +- std over config seeds.

    Attack randomness varies with the configured seeds; the checkpoints stay
    fixed.  ``cw`` ignores epsilon (minimum-norm attack, single row).  With
    ``save_adv_dir`` the last seed's adversarial batch for each attack row is
    written in the dataset file format for replay.
    """
    for name in attack_names:
        if name not in ATTACK_NAMES:
            raise UnknownAttackError(f"unknown attack {name!r} (choose from {ATTACK_NAMES})")
    test = _load_split(data_dir, "test")
    main_params, raw_params = _load_models(ckpt_dir)
    pipeline = _pipeline(cfg, main_params, raw_params)
    predict_main = atk.model_predictor(main_params)

    def predict_defended(X):
        return pipeline.predict(X, test.blobs, np.random.default_rng(seed))

    rows = []
    results = {}
    for name in attack_names:
        epsilons = [0.0] if name == "cw" else list(cfg.attack.epsilons)
        for eps in epsilons:
            base_vals, def_vals, query_vals = [], [], []
            for s in cfg.seeds:
                res = _run_attack(
                    name, cfg, pipeline, main_params, test.X, test.blobs, test.y, eps, s
                )
                base_vals.append(atk.asr(predict_main, test.X, res.x_adv, test.y))
                def_vals.append(atk.asr(predict_defended, test.X, res.x_adv, test.y))
                query_vals.append(float(res.queries.mean()))
            if save_adv_dir is not None:
                adv_dir = Path(save_adv_dir)
                adv_dir.mkdir(parents=True, exist_ok=True)
                tag = name if name == "cw" else f"{name}_eps{eps}"
                write_dataset(
                    adv_dir / f"{tag}.dsv", res.x_adv, test.y, test.blobs,
                    stats=(np.zeros(res.x_adv.shape[1]), np.ones(res.x_adv.shape[1])),
                )
            base_m, base_s = float(np.mean(base_vals)), float(np.std(base_vals))
            def_m, def_s = float(np.mean(def_vals)), float(np.std(def_vals))
            reduction = (base_m - def_m) / base_m if base_m > 0 else 0.0
            key = name if name == "cw" else f"{name}@eps={eps}"
            results[key] = {
                "epsilon": eps,
                "baseline_asr_mean": base_m,
                "baseline_asr_std": base_s,
                "defended_asr_mean": def_m,
                "defended_asr_std": def_s,
                "relative_reduction": reduction,
                "avg_queries": float(np.mean(query_vals)),
            }
            rows.append(
                [key, base_m, base_s, def_m, def_s, reduction, float(np.mean(query_vals))]
            )
    table = render_table(
        ["attack", "base ASR", "+-", "defended ASR", "+-", "reduction", "avg queries"],
        rows,
    )
    return {"per_attack": results, "table": table}


def _bench_units(test: Dataset, n: int):
    reps = int(np.ceil(n / test.X.shape[0]))
    X = np.tile(test.X, (reps, 1))[:n]
    blobs = (test.blobs * reps)[:n]
    return X, blobs


def cmd_bench(cfg: RunConfig, data_dir, ckpt_dir, seed: int) -> dict:
    """Throughput/latency/overhead/cost/constraint sweep, defended vs baseline."""
    test = _load_split(data_dir, "test")
    main_params, raw_params = _load_models(ckpt_dir)
    pipeline = _pipeline(cfg, main_params, raw_params)
    rng = np.random.default_rng(seed)
    protocol = bn.BenchProtocol(
        warmup_iters=cfg.bench.warmup_iters,
        timed_iters=cfg.bench.timed_iters,
        runs=cfg.bench.runs,
    )

    def make_baseline_batch(n):
        return _bench_units(test, n)[0]

    def run_baseline(X):
        forward(main_params, X, mode="eval")

    def make_defended_batch(n):
        return _bench_units(test, n)

    def run_defended(unit):
        X, blobs = unit
        pipeline.run_batch(X, blobs, rng)

    base_thr = bn.measure_throughput(
        run_baseline, make_baseline_batch, cfg.bench.batch_sizes, protocol
    )
    def_thr = bn.measure_throughput(
        run_defended, make_defended_batch, cfg.bench.batch_sizes, protocol
    )
    unit = _bench_units(test, cfg.bench.latency_batch)
    base_lat = bn.measure_latency(
        run_baseline, [unit[0]] * cfg.bench.latency_units, mode="per_batch"
    )
    def_lat = bn.measure_latency(
        run_defended, [unit] * cfg.bench.latency_units, mode="per_batch"
    )

    ovh = bn.overhead(def_thr, base_thr)
    eff = bn.efficiency_metric(
        bn.PerfReport(def_thr, def_lat), bn.PerfReport(base_thr, base_lat)
    )
    cost = bn.cost_model(ovh)

    # clean accuracies for the constraint check
    probs, _ = forward(main_params, test.X, mode="eval")
    base_acc = float(np.mean((probs[:, 1] > 0.5).astype(int) == test.y))
    out = pipeline.run_batch(test.X, test.blobs, rng)
    def_acc = float(np.mean((out.p_final > 0.5).astype(int) == test.y))
    telemetry = out.telemetry()

    constraints = bn.check_constraints(
        throughput_sps=def_thr.per_batch_size[max(def_thr.per_batch_size)].samples_per_sec,
        p99_ms=def_lat.p99_ms,
        overhead_ratio=ovh,
        clean_acc=def_acc,
        baseline_clean_acc=base_acc,
    )

    # quick attack probe for the ASR-based efficiency score
    n_probe = min(cfg.bench.asr_probe_rows, test.X.shape[0])
    res = atk.pgd(
        main_params, test.X[:n_probe], test.y[:n_probe], 0.3,
        steps=cfg.attack.pgd_steps, rng=np.random.default_rng(seed),
    )
    probe_asr = atk.asr(
        lambda X: pipeline.predict(X, test.blobs[:n_probe], np.random.default_rng(seed)),
        test.X[:n_probe], res.x_adv, test.y[:n_probe],
    )
    score = bn.efficiency_score(100.0 * probe_asr, ovh)

    constraint_rows = [
        ["throughput >= 1000/s", constraints.throughput_sps, constraints.throughput_ok],
        ["P99 <= 100 ms", constraints.p99_ms, constraints.p99_ok],
        ["overhead <= 2.0x", constraints.overhead, constraints.overhead_ok],
        ["clean acc >= 0.95x base", constraints.clean_acc, constraints.clean_acc_ok],
    ]
    table = render_table(["constraint", "measured", "ok"], constraint_rows)
    return {
        "baseline_throughput": base_thr.to_dict(),
        "defended_throughput": def_thr.to_dict(),
        "baseline_latency": base_lat.to_dict(),
        "defended_latency": def_lat.to_dict(),
        "overhead": ovh,
        "efficiency_metric": eff,
        "cost": cost.to_dict(),
        "constraints": constraints.to_dict(),
        "telemetry": telemetry,
        "probe_asr": probe_asr,
        "efficiency_score": score,
        "constraint_table": table,
    }


def cmd_calibrate(
    cfg: RunConfig, data_dir, ckpt_dir, seed: int, T_values=(2, 5, 10, 20)
) -> dict:
    """ECE/Brier/overhead per MC sample count T."""
    test = _load_split(data_dir, "test")
    main_params, raw_params = _load_models(ckpt_dir)
    protocol = bn.BenchProtocol(
        warmup_iters=cfg.bench.warmup_iters,
        timed_iters=cfg.bench.timed_iters,
        runs=cfg.bench.runs,
    )
    batch = max(cfg.bench.batch_sizes)

    def make_baseline_batch(n):
        return _bench_units(test, n)[0]

    base_thr = bn.measure_throughput(
        lambda X: forward(main_params, X, mode="eval"), make_baseline_batch, [batch], protocol
    )
    rows, results = [], {}
    for T in T_values:
        rng = np.random.default_rng(seed)
        mean_prob = mc_uncertainty(main_params, test.X, T, rng).mean_prob
        cal = calibration_report(mean_prob, test.y)

        tro_cfg = cfg.tro_config()
        tro_cfg.T = T
        pipe = TrustRawOverride(main_params, raw_params, tro_cfg)
        bench_rng = np.random.default_rng(seed)

        def run_defended(unit, pipe=pipe):
            X, blobs = unit
            pipe.run_batch(X, blobs, bench_rng)

        def_thr = bn.measure_throughput(
            run_defended, lambda n: _bench_units(test, n), [batch], protocol
        )
        ovh = bn.overhead(def_thr, base_thr)
        results[str(T)] = {"T": T, "ece": cal.ece, "brier": cal.brier, "overhead": ovh}
        rows.append([T, cal.ece, cal.brier, ovh])
    table = render_table(["T", "ECE", "Brier", "overhead"], rows)
    return {"per_T": results, "table": table}


def parse_stream_spec(spec: str) -> list[tuple[str, int]]:
    phases = []
    for part in spec.split(","):
        kind, _, count = part.strip().partition(":")
        if kind not in ("clean", "attacked") or not count.isdigit():
            raise ConfigError(f"bad stream phase {part!r} (want e.g. clean:10,attacked:10)")
        phases.append((kind, int(count)))
    return phases


def cmd_adapt_sim(
    cfg: RunConfig,
    data_dir,
    ckpt_dir,
    stream_spec: str,
    seed: int,
    batch_size: int = 128,
) -> dict:
    """Threshold-adaptation trajectory over a clean/attacked phase stream.

    Attacked phases perturb each batch with PGD at the median configured
    epsilon before it reaches the pipeline.
    """
    phases = parse_stream_spec(stream_spec)
    main_params, raw_params = _load_models(ckpt_dir)
    pipeline = _pipeline(cfg, main_params, raw_params)
    window = pipeline.new_window()
    gen = cfg.generator_config()
    rng = np.random.default_rng(seed)
    eps = float(np.median(cfg.attack.epsilons))

    trajectory = []
    batch_index = 0
    for kind, n_batches in phases:
        for _ in range(n_batches):
            labels = rng.integers(0, 2, size=batch_size)
            X = np.empty((batch_size, gen.feature_dim))
            blobs = []
            for i, label in enumerate(labels):
                blob, x = synth_sample(int(label), gen, rng)
                X[i] = x
                blobs.append(serialize_blob(blob))
            if kind == "attacked":
                res = atk.pgd(
                    main_params, X, labels, eps, steps=cfg.attack.pgd_steps, rng=rng
                )
                X = res.x_adv
            out = pipeline.run_batch(X, blobs, rng)
            window.observe(X, blobs, rng)
            tau = pipeline.adapt(window)
            trajectory.append(
                {
                    "batch": batch_index,
                    "phase": kind,
                    "tau": tau,
                    "override_rate": float(out.mask.mean()),
                }
            )
            batch_index += 1
    table = render_table(
        ["batch", "phase", "tau", "override rate"],
        [[t["batch"], t["phase"], t["tau"], t["override_rate"]] for t in trajectory],
    )
    return {"trajectory": trajectory, "table": table}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _add_common(p, data=False, ckpt=False):
    p.add_argument("--config", help="config file path or preset name (default: desk)")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", help="output file/directory")
    if data:
        p.add_argument("--data", required=True, help="dataset directory")
    if ckpt:
        p.add_argument("--checkpoints", required=True, help="checkpoint directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trocab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic dataset files")
    _add_common(p)

    p = sub.add_parser("train", help="train main and raw classifiers")
    _add_common(p, data=True)

    p = sub.add_parser("eval", help="clean metrics, defended and undefended")
    _add_common(p, data=True, ckpt=True)

    p = sub.add_parser("attack", help="run the attack suite and report ASR")
    _add_common(p, data=True, ckpt=True)
    p.add_argument("--attacks", default="fgsm,pgd", help="comma list of attack names")
    p.add_argument("--save-adv", help="directory for adversarial batches (dataset format)")

    p = sub.add_parser("bench", help="throughput/latency/overhead benchmark")
    _add_common(p, data=True, ckpt=True)

    p = sub.add_parser("calibrate", help="calibration sweep over MC sample counts")
    _add_common(p, data=True, ckpt=True)
    p.add_argument("--T-values", default="2,5,10,20")

    p = sub.add_parser("adapt-sim", help="threshold adaptation over a phase stream")
    _add_common(p, ckpt=True)
    p.add_argument("--stream", default="clean:10,attacked:10")
    p.add_argument("--stream-batch", type=int, default=128)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args.config)
        t0 = time.perf_counter()
        if args.command == "gen-data":
            out = args.out or "data"
            results = cmd_gen_data(cfg, out, args.seed)
        elif args.command == "train":
            out = args.out or "checkpoints"
            results = cmd_train(cfg, args.data, out, args.seed)
        elif args.command == "eval":
            results = cmd_eval(cfg, args.data, args.checkpoints, args.seed)
        elif args.command == "attack":
            names = [n.strip() for n in args.attacks.split(",") if n.strip()]
            results = cmd_attack(cfg, args.data, args.checkpoints, names, args.seed,
                                 save_adv_dir=args.save_adv)
        elif args.command == "bench":
            results = cmd_bench(cfg, args.data, args.checkpoints, args.seed)
        elif args.command == "calibrate":
            T_values = tuple(int(t) for t in args.T_values.split(","))
            results = cmd_calibrate(cfg, args.data, args.checkpoints, args.seed, T_values)
        else:
            results = cmd_adapt_sim(
                cfg, None, args.checkpoints, args.stream, args.seed, args.stream_batch
            )
        wall = time.perf_counter() - t0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except UnknownAttackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 4
    except KeyboardInterrupt:
        print("benchmark interrupted", file=sys.stderr)
        return 5

    report = build_report(
        args.command, args.seed, serialize_config(cfg), results, wall_time_s=wall
    )
    tables = [results[k] for k in ("table", "constraint_table") if k in results]
    if tables:
        print("\n".join(tables))
    else:
        print(json.dumps(results, indent=2, sort_keys=True, default=str))
    if args.out and args.command not in ("gen-data", "train"):
        write_report(args.out, report)
    elif args.command in ("gen-data", "train") and args.out:
        report_path = Path(args.out) / f"{args.command.replace('-', '_')}_report.json"
        write_report(report_path, report)
    return 0


if __name__ == "__main__":
    sys.exit(main())
