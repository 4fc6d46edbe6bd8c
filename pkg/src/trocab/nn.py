"""Dense feed-forward binary classifier with explicit forward/backward passes.

Everything is plain numpy float64.  The network is a stack of linear layers
with ReLU activations and inverted dropout on every hidden layer, followed by
a 2-way softmax.  Gradients (parameters and inputs) are computed by manual
backpropagation through a recorded :class:`ForwardTrace`, which makes them
checkable against finite differences and reusable by the attack suite.

RNG state is always passed explicitly; eval-mode inference is a pure function
of ``(params, batch)`` and is safe to call from concurrent workers.  Training
is single-writer.

Checkpoint wire format (little-endian):
    magic ``b"MLP1"`` | u32 layer-count L | L x u32 widths |
    per layer: weights row-major f64, then biases f64 | f64 dropout rate
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .validation import as_float_matrix, check_labels

CHECKPOINT_MAGIC = b"MLP1"

MODES = ("train", "eval", "mc")


@dataclass
class MlpParams:
    """Weights/biases of a dense network plus its dropout rate.

    ``architecture`` lists layer widths input..output; ``weights[l]`` has
    shape ``(architecture[l], architecture[l+1])``.
    """

    architecture: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout_rate: float = 0.2

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "MlpParams":
        return MlpParams(
            architecture=list(self.architecture),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            dropout_rate=self.dropout_rate,
        )


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    weight_decay: float = 1e-5
    batch_size: int = 256
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class ForwardTrace:
    """Per-layer tensors recorded during a forward pass, for backprop."""

    inputs: np.ndarray
    pre_acts: list[np.ndarray]
    post_acts: list[np.ndarray]
    masks: list[np.ndarray] | None
    probs: np.ndarray


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]


@dataclass
class AdamState:
    m_w: list[np.ndarray]
    v_w: list[np.ndarray]
    m_b: list[np.ndarray]
    v_b: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: MlpParams) -> "AdamState":
        return cls(
            m_w=[np.zeros_like(w) for w in params.weights],
            v_w=[np.zeros_like(w) for w in params.weights],
            m_b=[np.zeros_like(b) for b in params.biases],
            v_b=[np.zeros_like(b) for b in params.biases],
        )


def init_mlp(architecture, seed: int) -> MlpParams:
    """He fan-in initialization; biases zero; deterministic per seed."""
    architecture = [int(w) for w in architecture]
    if len(architecture) < 2:
        raise ValueError("architecture needs at least input and output widths")
    if any(w < 1 for w in architecture):
        raise ValueError("all layer widths must be >= 1")
    if architecture[-1] != 2:
        raise ValueError("output width must be 2 (binary softmax head)")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(architecture[:-1], architecture[1:]):
        scale = np.sqrt(2.0 / fan_in)
        weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(architecture=architecture, weights=weights, biases=biases)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(
    params: MlpParams,
    batch: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardTrace]:
    """Run the network; returns (softmax probabilities B x 2, trace).

    ``mode`` is one of ``train``/``eval``/``mc``; train and mc sample fresh
    inverted-dropout masks from ``rng`` after each hidden ReLU, eval applies
    none.  Softmax rows sum to 1.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != params.architecture[0]:
        raise ValueError(
            f"batch shape {batch.shape} incompatible with input width "
            f"{params.architecture[0]}"
        )
    use_dropout = mode in ("train", "mc") and params.dropout_rate > 0.0
    if use_dropout and rng is None:
        raise ValueError(f"mode {mode!r} with dropout requires an rng")

    keep = 1.0 - params.dropout_rate
    a = batch
    pre_acts, post_acts = [], []
    masks = [] if use_dropout else None
    n_layers = params.n_layers
    for l in range(n_layers):
        z = a @ params.weights[l] + params.biases[l]
        pre_acts.append(z)
        if l < n_layers - 1:
            a = np.maximum(z, 0.0)
            if use_dropout:
                mask = (rng.random(a.shape) < keep) / keep
                a = a * mask
                masks.append(mask)
        else:
            a = z
        post_acts.append(a)
    probs = _softmax(pre_acts[-1])
    trace = ForwardTrace(
        inputs=batch, pre_acts=pre_acts, post_acts=post_acts, masks=masks, probs=probs
    )
    return probs, trace


def _backprop(
    params: MlpParams, trace: ForwardTrace, delta: np.ndarray
) -> tuple[Gradients, np.ndarray]:
    """Propagate an upstream gradient on the output logits back to parameters
    and inputs.  ``delta`` has shape B x 2."""
    n_layers = params.n_layers
    w_grads = [None] * n_layers
    b_grads = [None] * n_layers
    for l in range(n_layers - 1, -1, -1):
        a_prev = trace.inputs if l == 0 else trace.post_acts[l - 1]
        w_grads[l] = a_prev.T @ delta
        b_grads[l] = delta.sum(axis=0)
        if l > 0:
            delta = delta @ params.weights[l].T
            delta = delta * (trace.pre_acts[l - 1] > 0.0)
            if trace.masks is not None:
                delta = delta * trace.masks[l - 1]
        else:
            delta = delta @ params.weights[l].T
    return Gradients(weights=w_grads, biases=b_grads), delta


def _loss_delta(
    trace: ForwardTrace, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    labels = check_labels(labels, trace.probs.shape[0], "labels")
    n = trace.probs.shape[0]
    picked = trace.probs[np.arange(n), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    onehot = np.zeros_like(trace.probs)
    onehot[np.arange(n), labels] = 1.0
    delta = (trace.probs - onehot) / n
    return loss, delta


def loss_and_backward(
    params: MlpParams, trace: ForwardTrace, labels
) -> tuple[float, Gradients]:
    """Mean cross-entropy over the batch plus parameter gradients computed by
    backprop through the recorded trace (dropout masks included)."""
    loss, delta = _loss_delta(trace, np.asarray(labels))
    grads, _ = _backprop(params, trace, delta)
    return loss, grads


def input_gradient(
    params: MlpParams,
    batch: np.ndarray,
    labels,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Gradient of the mean cross-entropy w.r.t. the inputs (B x D)."""
    _, trace = forward(params, batch, mode=mode, rng=rng)
    _, delta = _loss_delta(trace, np.asarray(labels))
    _, in_grad = _backprop(params, trace, delta)
    return in_grad


def logit_input_gradient(
    params: MlpParams, trace: ForwardTrace, upstream: np.ndarray
) -> np.ndarray:
    """Input gradient for an arbitrary upstream gradient on the logits.

    Used by margin-style attack objectives that need d(logit_i - logit_j)/dx.
    """
    if upstream.shape != trace.pre_acts[-1].shape:
        raise ValueError("upstream gradient must match logit shape")
    _, in_grad = _backprop(params, trace, upstream)
    return in_grad


def adam_step(
    params: MlpParams,
    grads: Gradients,
    state: AdamState,
    config: TrainConfig,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One in-place Adam update with bias correction.

    L2 weight decay is added to the weight gradients (classic Adam+L2, decay
    on weights only, not biases).
    """
    for g in grads.weights + grads.biases:
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient")
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    lr = config.learning_rate
    for l in range(params.n_layers):
        gw = grads.weights[l]
        if config.weight_decay:
            gw = gw + config.weight_decay * params.weights[l]
        state.m_w[l] = beta1 * state.m_w[l] + (1 - beta1) * gw
        state.v_w[l] = beta2 * state.v_w[l] + (1 - beta2) * gw * gw
        params.weights[l] -= lr * (state.m_w[l] / bc1) / (np.sqrt(state.v_w[l] / bc2) + eps)

        gb = grads.biases[l]
        state.m_b[l] = beta1 * state.m_b[l] + (1 - beta1) * gb
        state.v_b[l] = beta2 * state.v_b[l] + (1 - beta2) * gb * gb
        params.biases[l] -= lr * (state.m_b[l] / bc1) / (np.sqrt(state.v_b[l] / bc2) + eps)


def evaluate(params: MlpParams, X: np.ndarray, y) -> tuple[float, float]:
    """Eval-mode mean cross-entropy loss and accuracy on a labelled set."""
    probs, trace = forward(params, X, mode="eval")
    loss, _ = _loss_delta(trace, np.asarray(y))
    acc = float(np.mean(probs.argmax(axis=1) == np.asarray(y)))
    return loss, acc


def train(
    params: MlpParams,
    train_set: tuple[np.ndarray, np.ndarray],
    val_set: tuple[np.ndarray, np.ndarray],
    config: TrainConfig,
) -> tuple[MlpParams, dict]:
    """Mini-batch Adam training with early stopping on validation loss.

    Stops once the validation loss has failed to improve for more than
    ``patience`` consecutive epochs and returns the best-validation-loss
    parameters together with a history dict.
    """
    X_tr, y_tr = train_set
    X_val, y_val = val_set
    X_tr = as_float_matrix(X_tr, "X_train")
    X_val = as_float_matrix(X_val, "X_val")
    y_tr = check_labels(y_tr, X_tr.shape[0], "y_train")
    y_val = check_labels(y_val, X_val.shape[0], "y_val")
    if X_tr.shape[0] == 0 or X_val.shape[0] == 0:
        raise ValueError("empty dataset")
    if X_tr.shape[1] != params.architecture[0]:
        raise ValueError("training data width does not match network input")

    rng = np.random.default_rng(config.seed)
    state = AdamState.zeros_like(params)
    history = {"train_loss": [], "val_loss": [], "val_acc": []}
    best_val = np.inf
    best_params = params.copy()
    best_epoch = -1
    since_improve = 0
    n = X_tr.shape[0]

    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            _, trace = forward(params, X_tr[idx], mode="train", rng=rng)
            loss, grads = loss_and_backward(params, trace, y_tr[idx])
            adam_step(params, grads, state, config)
            epoch_losses.append(loss)
        val_loss, val_acc = evaluate(params, X_val, y_val)
        history["train_loss"].append(float(np.mean(epoch_losses)))
        history["val_loss"].append(val_loss)
        history["val_acc"].append(val_acc)
        if val_loss < best_val:
            best_val = val_loss
            best_params = params.copy()
            best_epoch = epoch
            since_improve = 0
        else:
            since_improve += 1
            if since_improve > config.patience:
                break
    history["best_epoch"] = best_epoch
    history["stopped_epoch"] = len(history["val_loss"]) - 1
    return best_params, history


def save_checkpoint(path, params: MlpParams) -> None:
    arch = params.architecture
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(arch))]
    parts.append(struct.pack(f"<{len(arch)}I", *arch))
    for w, b in zip(params.weights, params.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    parts.append(struct.pack("<d", params.dropout_rate))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> MlpParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError("bad checkpoint magic")
    (n_widths,) = struct.unpack_from("<I", raw, 4)
    arch = list(struct.unpack_from(f"<{n_widths}I", raw, 8))
    off = 8 + 4 * n_widths
    weights, biases = [], []
    for fan_in, fan_out in zip(arch[:-1], arch[1:]):
        w = np.frombuffer(raw, dtype="<f8", count=fan_in * fan_out, offset=off)
        off += 8 * fan_in * fan_out
        b = np.frombuffer(raw, dtype="<f8", count=fan_out, offset=off)
        off += 8 * fan_out
        weights.append(w.reshape(fan_in, fan_out).copy())
        biases.append(b.copy())
    (dropout_rate,) = struct.unpack_from("<d", raw, off)
    return MlpParams(architecture=arch, weights=weights, biases=biases, dropout_rate=dropout_rate)


class MlpClassifier(BaseEstimator, ClassifierMixin):
    """sklearn-style front end for the numpy MLP.

    Parameters mirror the training defaults; ``fit`` holds out
    ``val_fraction`` of the data for early stopping unless an explicit
    validation set is passed.
    """

    def __init__(
        self,
        hidden_layer_sizes=(64, 32),
        dropout_rate=0.2,
        learning_rate=2e-4,
        weight_decay=1e-5,
        batch_size=256,
        max_epochs=50,
        patience=5,
        val_fraction=0.2,
        random_state=0,
    ):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.dropout_rate = dropout_rate
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.val_fraction = val_fraction
        self.random_state = random_state

    def fit(self, X, y, X_val=None, y_val=None):
        X = as_float_matrix(X)
        y = check_labels(y, X.shape[0])
        if X_val is None:
            rng = np.random.default_rng(self.random_state)
            order = rng.permutation(X.shape[0])
            n_val = max(1, int(round(self.val_fraction * X.shape[0])))
            val_idx, tr_idx = order[:n_val], order[n_val:]
            X_val, y_val = X[val_idx], y[val_idx]
            X, y = X[tr_idx], y[tr_idx]
        arch = [X.shape[1], *self.hidden_layer_sizes, 2]
        params = init_mlp(arch, self.random_state)
        params.dropout_rate = self.dropout_rate
        cfg = TrainConfig(
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=self.random_state,
        )
        self.params_, self.history_ = train(params, (X, y), (X_val, y_val), cfg)
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        probs, _ = forward(self.params_, as_float_matrix(X), mode="eval")
        return probs

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)
