"""Evasion attacks against the classifier and the defended pipeline.

FGSM/PGD/BPDA/Square respect an l-infinity budget and the [0, 1] feature box;
C&W minimizes an l2 objective and is unbudgeted by construction.  Attacks
target the main classifier unless they take the defended pipeline explicitly
(BPDA+EOT and the score-based Square search are the pipeline-aware ones).
Every attack takes its RNG explicitly and is deterministic for a fixed seed.

Query accounting: ``queries[i]`` counts scoring rounds spent on sample i —
one per gradient/score evaluation round, with early stopping where the attack
monitors success (BPDA, Square).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .nn import MlpParams, forward, input_gradient, logit_input_gradient
from .quantize import quantize_batch_adaptive, ste_backward
from .uncertainty import mc_uncertainty
from .validation import as_float_matrix, check_labels, check_unit_box


@dataclass
class AttackConfig:
    epsilon: float = 0.3
    steps: int = 20
    alpha: float | None = None  # None = epsilon / 10
    kappa: float = 0.0
    c_init: float = 0.1
    max_queries: int = 5000
    t_eot: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be > 0")


@dataclass
class AttackResult:
    x_adv: np.ndarray
    success: np.ndarray
    queries: np.ndarray
    linf: np.ndarray
    l2: np.ndarray


def model_predictor(params: MlpParams):
    """Plain eval-mode argmax classifier as a predict function."""

    def predict(X):
        probs, _ = forward(params, X, mode="eval")
        return probs.argmax(axis=1)

    return predict


def _result(params_or_pred, x, x_adv, y, queries) -> AttackResult:
    predict = params_or_pred if callable(params_or_pred) else model_predictor(params_or_pred)
    delta = x_adv - x
    return AttackResult(
        x_adv=x_adv,
        success=predict(x_adv) != y,
        queries=np.asarray(queries, dtype=np.int64),
        linf=np.abs(delta).max(axis=1),
        l2=np.sqrt((delta**2).sum(axis=1)),
    )


def fgsm(model: MlpParams, x, y, epsilon: float) -> AttackResult:
    """Single signed-gradient step of size epsilon, clamped to the box."""
    x = check_unit_box(as_float_matrix(x))
    y = check_labels(y, x.shape[0])
    g = input_gradient(model, x, y, mode="eval")
    x_adv = np.clip(x + epsilon * np.sign(g), 0.0, 1.0)
    return _result(model, x, x_adv, y, np.full(x.shape[0], 2))


def _project(x, x_adv, epsilon):
    x_adv = np.clip(x_adv, x - epsilon, x + epsilon)
    return np.clip(x_adv, 0.0, 1.0)


def pgd(
    model: MlpParams,
    x,
    y,
    epsilon: float,
    steps: int = 20,
    alpha: float | None = None,
    random_start: bool = True,
    rng: np.random.Generator | None = None,
    feature_mask: np.ndarray | None = None,
) -> AttackResult:
    """Iterated signed-gradient ascent projected onto the epsilon-ball and box.

    ``feature_mask`` freezes coordinates (False = immutable), the box-plus-
    freeze-mask stand-in for format-preserving constraints on real features.
    """
    x = check_unit_box(as_float_matrix(x))
    y = check_labels(y, x.shape[0])
    if alpha is None:
        alpha = epsilon / 10.0
    mutable = np.ones(x.shape[1], dtype=bool) if feature_mask is None else np.asarray(feature_mask, bool)
    x_adv = x.copy()
    if random_start:
        rng = rng if rng is not None else np.random.default_rng(0)
        x_adv = _project(x, x + rng.uniform(-epsilon, epsilon, size=x.shape) * mutable, epsilon)
    for _ in range(steps):
        g = input_gradient(model, x_adv, y, mode="eval")
        x_adv = _project(x, x_adv + alpha * np.sign(g) * mutable, epsilon)
    return _result(model, x, x_adv, y, np.full(x.shape[0], steps + 1))


def cw(
    model: MlpParams,
    x,
    y,
    kappa: float = 0.0,
    c_init: float = 0.1,
    iters: int = 100,
    lr: float = 0.01,
    max_doublings: int = 5,
) -> AttackResult:
    """Minimum-l2 attack: ||delta||^2 + c * max(z_true - z_other + kappa, 0).

    Gradient descent in tanh-reparameterized box space; c doubles (up to
    ``max_doublings`` times) for still-unsuccessful samples.  Returns the
    smallest-norm successful perturbation per sample, or the original row
    where every attempt failed.
    """
    x = check_unit_box(as_float_matrix(x))
    y = check_labels(y, x.shape[0])
    B, D = x.shape
    other = 1 - y
    rows = np.arange(B)

    best_adv = x.copy()
    best_l2 = np.full(B, np.inf)
    probs, _ = forward(model, x, mode="eval")
    succeeded = probs.argmax(axis=1) != y
    best_l2[succeeded] = 0.0  # already misclassified: zero-cost solution

    c = np.full(B, c_init)
    queries = np.zeros(B, dtype=np.int64)
    x_safe = np.clip(x, 1e-6, 1.0 - 1e-6)
    for _ in range(max_doublings + 1):
        active = ~succeeded
        if not active.any():
            break
        w = np.arctanh(2.0 * x_safe - 1.0)
        for _ in range(iters):
            x_adv = 0.5 * (np.tanh(w) + 1.0)
            _, trace = forward(model, x_adv, mode="eval")
            logits = trace.pre_acts[-1]
            margin = logits[rows, y] - logits[rows, other] + kappa
            hinge_on = margin > 0.0
            upstream = np.zeros_like(logits)
            upstream[rows, y] = c * hinge_on
            upstream[rows, other] = -c * hinge_on
            grad = 2.0 * (x_adv - x) + logit_input_gradient(model, trace, upstream)
            w -= lr * grad * (2.0 * x_adv * (1.0 - x_adv))
            queries[active] += 1

            preds = logits.argmax(axis=1)
            flipped = preds != y
            l2 = np.sqrt(((x_adv - x) ** 2).sum(axis=1))
            better = flipped & (l2 < best_l2)
            best_adv[better] = x_adv[better]
            best_l2[better] = l2[better]
            succeeded |= flipped
        c[~succeeded] *= 2.0
    return _result(model, x, best_adv, y, queries)


def bpda_eot(
    pipeline,
    x,
    blobs,
    y,
    epsilon: float,
    steps: int = 20,
    alpha: float | None = None,
    t_eot: int = 10,
    rng: np.random.Generator | None = None,
) -> AttackResult:
    """Adaptive attack on the defended pipeline.

    PGD where each step's gradient is the mean of ``t_eot`` stochastic
    (dropout-enabled) gradients of the main model, evaluated at the pipeline's
    quantized surrogate input (rows the gate would quantize are quantized at
    their uncertainty-chosen bit depth; the quantizer is differentiated with
    the straight-through estimator).  Every iterate is scored against the full
    defended pipeline (with replayed pipeline randomness, so the scores are
    stable) and the best-margin iterate per sample is returned; ``queries``
    counts scoring rounds until the first misclassifying iterate.
    """
    x = check_unit_box(as_float_matrix(x))
    y = check_labels(y, x.shape[0])
    if alpha is None:
        alpha = epsilon / 10.0
    rng = rng if rng is not None else np.random.default_rng(0)
    main = pipeline.main_params
    cfg = pipeline.config
    check_rng = rng.spawn(1)[0]
    sign_y = 2.0 * y - 1.0

    def defended_margin(X):
        # > 0 exactly when the defended pipeline misclassifies
        p = pipeline.predict_proba(X, blobs, copy.deepcopy(check_rng))[:, 1]
        return -sign_y * (p - 0.5)

    def defended_pred(X):
        return pipeline.predict(X, blobs, copy.deepcopy(check_rng))

    x_adv = x.copy()
    x_best = x.copy()
    # best-margin bookkeeping applies to misclassifying iterates only; rows
    # the attack never flips return their final iterate, like plain PGD
    margin_best = np.full(x.shape[0], -np.inf)
    margin0 = defended_margin(x_adv)
    hit0 = margin0 > 0
    x_best[hit0] = x[hit0]
    margin_best[hit0] = margin0[hit0]
    first_hit = np.where(hit0, 0, steps)
    for step in range(1, steps + 1):
        u = mc_uncertainty(main, x_adv, cfg.T, rng).u
        gated = u > cfg.tau
        x_surr = x_adv.copy()
        if gated.any():
            x_surr[gated] = quantize_batch_adaptive(x_adv[gated], u[gated], cfg.schedule)
        g = np.zeros_like(x_adv)
        for _ in range(t_eot):
            g += input_gradient(main, x_surr, y, mode="mc", rng=rng)
        g = ste_backward(g / t_eot, x_adv, 8)
        x_adv = _project(x, x_adv + alpha * np.sign(g), epsilon)
        margin = defended_margin(x_adv)
        better = (margin > 0) & (margin > margin_best)
        x_best[better] = x_adv[better]
        margin_best[better] = margin[better]
        first_hit = np.where((margin > 0) & (first_hit == steps), step, first_hit)
    never = ~np.isfinite(margin_best)
    x_best[never] = x_adv[never]
    queries = first_hit + 1  # the initial scoring round counts too
    return _result(defended_pred, x, x_best, y, queries)


def _block_length(D: int, used_fraction: float, p_init: float) -> int:
    halvings = sum(used_fraction >= t for t in (0.02, 0.1, 0.25, 0.5, 0.75))
    return max(1, int(round(D * p_init * 0.5**halvings)))


def square_attack(
    score_fn,
    x,
    y,
    epsilon: float,
    max_queries: int = 5000,
    rng: np.random.Generator | None = None,
    p_init: float = 0.3,
) -> AttackResult:
    """Score-only random search mutating contiguous coordinate blocks.

    ``score_fn(X, rows) -> positive-class probability per row`` is the only
    access to the target; ``rows`` carries the original row indices so a
    defended pipeline can pair each proposal with its own container blob.
    Each round proposes, per still-active sample, one contiguous block
    (length shrinking with the spent budget) rewritten to x +/- epsilon, and
    keeps the proposal when the misclassification margin improves.  Stops per
    sample at success or when the query budget is exhausted.
    """
    x = check_unit_box(as_float_matrix(x))
    y = check_labels(y, x.shape[0])
    rng = rng if rng is not None else np.random.default_rng(0)
    B, D = x.shape
    sign_y = 2.0 * y - 1.0  # margin = -sign_y * (2p - 1); > 0 once misclassified

    x_best = x.copy()
    queries = np.zeros(B, dtype=np.int64)
    success = np.zeros(B, dtype=bool)
    if max_queries == 0:
        return AttackResult(
            x_adv=x_best, success=success, queries=queries,
            linf=np.zeros(B), l2=np.zeros(B),
        )

    p = np.asarray(score_fn(x_best, np.arange(B)), dtype=np.float64)
    queries += 1
    margin_best = -sign_y * (2.0 * p - 1.0)
    success = (p > 0.5) != (y == 1)
    active = ~success & (queries < max_queries)

    it = 0
    while active.any():
        h = _block_length(D, it / max_queries, p_init)
        it += 1
        starts = rng.integers(0, D - h + 1, size=B)
        signs = np.where(rng.random(B) < 0.5, -epsilon, epsilon)
        proposal = x_best.copy()
        idx = starts[:, None] + np.arange(h)[None, :]
        rows = np.flatnonzero(active)
        proposal[rows[:, None], idx[rows]] = np.clip(
            x[rows[:, None], idx[rows]] + signs[rows, None], 0.0, 1.0
        )
        p = np.asarray(score_fn(proposal[rows], rows), dtype=np.float64)
        queries[rows] += 1
        margin = -sign_y[rows] * (2.0 * p - 1.0)
        better = margin > margin_best[rows]
        take = rows[better]
        x_best[take] = proposal[take]
        margin_best[take] = margin[better]
        success[rows] |= (p > 0.5) != (y[rows] == 1)
        active = ~success & (queries < max_queries)

    delta = x_best - x
    return AttackResult(
        x_adv=x_best,
        success=success,
        queries=queries,
        linf=np.abs(delta).max(axis=1),
        l2=np.sqrt((delta**2).sum(axis=1)),
    )


def asr(predict_fn, originals, adversarials, labels) -> float:
    """Attack success rate: flipped-to-benign fraction of the correctly
    classified malware rows.

    ``predict_fn(X) -> (B,) labels`` is the defended or undefended classifier
    under evaluation; 0 when no malware row was correctly classified.
    """
    originals = as_float_matrix(originals, "originals")
    adversarials = as_float_matrix(adversarials, "adversarials")
    if originals.shape != adversarials.shape:
        raise ValueError("originals and adversarials must align")
    labels = check_labels(labels, originals.shape[0])
    preds_orig = np.asarray(predict_fn(originals))
    eligible = (labels == 1) & (preds_orig == 1)
    if not eligible.any():
        return 0.0
    preds_adv = np.asarray(predict_fn(adversarials))
    flipped = eligible & (preds_adv == 0)
    return float(flipped.sum() / eligible.sum())
