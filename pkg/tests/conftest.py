"""Shared fixtures and independent oracles used across the test suite."""

import numpy as np
import pytest

from trocab.nn import MlpParams, TrainConfig, forward, init_mlp, train
from trocab.rawpipe import GeneratorConfig, synth_dataset


def cross_entropy(params: MlpParams, X, y, mode="eval", seed=None) -> float:
    """Loss recomputed from scratch (used as the finite-difference target)."""
    rng = np.random.default_rng(seed) if seed is not None else None
    probs, _ = forward(params, X, mode=mode, rng=rng)
    picked = probs[np.arange(len(y)), np.asarray(y)]
    return float(-np.mean(np.log(picked)))


def random_smooth_net(seed, arch=(4, 6, 5, 2), rows=3, kink_margin=1e-3):
    """Random net + batch whose pre-activations stay clear of the ReLU kink,
    so central finite differences are trustworthy."""
    for attempt in range(50):
        rng = np.random.default_rng(seed * 1000 + attempt)
        params = init_mlp(list(arch), seed * 1000 + attempt)
        params.dropout_rate = 0.0
        X = rng.uniform(-1.0, 1.0, size=(rows, arch[0]))
        y = rng.integers(0, 2, size=rows)
        _, trace = forward(params, X, mode="eval")
        min_abs = min(np.abs(z).min() for z in trace.pre_acts[:-1])
        if min_abs > kink_margin:
            return params, X, y
    raise RuntimeError("could not sample a kink-free network")


def fd_param_grads(params, X, y, h=1e-5, mode="eval", seed=None):
    """Central finite differences on every weight/bias entry."""
    w_grads = [np.zeros_like(w) for w in params.weights]
    b_grads = [np.zeros_like(b) for b in params.biases]
    for store, tensors in ((w_grads, params.weights), (b_grads, params.biases)):
        for l, tensor in enumerate(tensors):
            flat = tensor.reshape(-1)
            out = store[l].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = cross_entropy(params, X, y, mode=mode, seed=seed)
                flat[i] = orig - h
                down = cross_entropy(params, X, y, mode=mode, seed=seed)
                flat[i] = orig
                out[i] = (up - down) / (2 * h)
    return w_grads, b_grads


def fd_input_grads(params, X, y, h=1e-5, mode="eval", seed=None):
    X = X.copy()
    out = np.zeros_like(X)
    flat, oflat = X.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = cross_entropy(params, X, y, mode=mode, seed=seed)
        flat[i] = orig - h
        down = cross_entropy(params, X, y, mode=mode, seed=seed)
        flat[i] = orig
        oflat[i] = (up - down) / (2 * h)
    return out


def max_rel_error(analytic, numeric, floor=1e-8):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


SMALL_GEN = GeneratorConfig(feature_dim=16, separation=4.0, noise=1.0,
                            body_min=64, body_max=256, seed=11)


@pytest.fixture(scope="session")
def toy_data():
    """Small synthetic task shared by attack/defense tests."""
    X_tr, y_tr, blobs_tr = synth_dataset(1200, SMALL_GEN, seed=100)
    X_te, y_te, blobs_te = synth_dataset(400, SMALL_GEN, seed=101)
    return {
        "train": (X_tr, y_tr, blobs_tr),
        "test": (X_te, y_te, blobs_te),
        "gen": SMALL_GEN,
    }


@pytest.fixture(scope="session")
def toy_model(toy_data):
    """Main classifier trained on the small task (dropout active)."""
    X, y, _ = toy_data["train"]
    params = init_mlp([X.shape[1], 32, 16, 2], seed=3)
    params.dropout_rate = 0.2
    cfg = TrainConfig(learning_rate=2e-3, batch_size=128, max_epochs=40, patience=6, seed=3)
    fitted, history = train(params, (X[:1000], y[:1000]), (X[1000:], y[1000:]), cfg)
    return fitted, history


@pytest.fixture(scope="session")
def toy_raw_model(toy_data):
    from trocab.rawpipe import extract_raw, parse_blob

    X, y, blobs = toy_data["train"]
    feats = np.stack([extract_raw(parse_blob(b)) for b in blobs])
    params = init_mlp([feats.shape[1], 32, 16, 2], seed=4)
    params.dropout_rate = 0.2
    cfg = TrainConfig(learning_rate=2e-3, batch_size=128, max_epochs=30, patience=6, seed=4)
    fitted, _ = train(params, (feats[:1000], y[:1000]), (feats[1000:], y[1000:]), cfg)
    return fitted
