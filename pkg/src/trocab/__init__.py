"""Efficiency-aware adversarial defense for feature-vector malware
classifiers: uncertainty-gated raw-feature override, confidence-adaptive
bit-depth reduction, an evasion attack suite, and a measurement harness."""

from .attacks import AttackConfig, AttackResult, asr, bpda_eot, cw, fgsm, pgd, square_attack
from .bench import (
    BenchProtocol,
    ConstraintReport,
    CostReport,
    LatencyReport,
    ThroughputReport,
    auc,
    check_constraints,
    combined_objective,
    cost_model,
    efficiency_metric,
    efficiency_score,
    measure_latency,
    measure_throughput,
    overhead,
    robustness_metric,
    scaling_probe,
)
from .config import RunConfig, load_config, load_preset, parse_config, serialize_config
from .nn import (
    MlpClassifier,
    MlpParams,
    TrainConfig,
    forward,
    init_mlp,
    input_gradient,
    load_checkpoint,
    loss_and_backward,
    save_checkpoint,
    train,
)
from .quantize import (
    BitDepthReducer,
    BitDepthSchedule,
    QuantDomain,
    bit_depth,
    non_sensitivity_radius,
    quantize,
    quantize_batch_adaptive,
    ste_backward,
)
from .rawpipe import (
    GeneratorConfig,
    SampleBlob,
    extract_raw,
    parse_blob,
    serialize_blob,
    synth_dataset,
    synth_sample,
)
from .tro import (
    LruCache,
    PipelineOutput,
    TroConfig,
    TrustRawOverride,
    adapt_threshold,
    combine,
    objective_J,
    tro_batch,
)
from .uncertainty import (
    CalibrationReport,
    UncertaintyEstimate,
    brier,
    calibration_report,
    ece,
    mc_uncertainty,
    uncertainty_gap_probe,
)

__version__ = "0.1.0"
