"""sklearn API conformance for the estimator-shaped entry points."""

import numpy as np
from sklearn.base import clone
from sklearn.pipeline import Pipeline

from trocab.nn import MlpClassifier
from trocab.quantize import BitDepthReducer
from trocab.tro import TroConfig, TrustRawOverride


def test_mlp_classifier_get_set_params_and_clone():
    clf = MlpClassifier(hidden_layer_sizes=(8,), max_epochs=3, random_state=1)
    params = clf.get_params()
    assert params["hidden_layer_sizes"] == (8,)
    cloned = clone(clf)
    assert cloned.get_params() == params
    clf.set_params(dropout_rate=0.1)
    assert clf.dropout_rate == 0.1


def test_mlp_classifier_fit_predict(toy_data):
    X, y, _ = toy_data["train"]
    clf = MlpClassifier(
        hidden_layer_sizes=(16,), learning_rate=2e-3, max_epochs=15, random_state=0
    )
    clf.fit(X[:600], y[:600])
    assert np.array_equal(clf.classes_, [0, 1])
    probs = clf.predict_proba(X[600:700])
    assert probs.shape == (100, 2)
    acc = float(np.mean(clf.predict(X[600:700]) == y[600:700]))
    assert acc >= 0.8


def test_bit_depth_reducer_in_pipeline(toy_data):
    X, y, _ = toy_data["train"]
    pipe = Pipeline(
        [
            ("squeeze", BitDepthReducer(bits=6)),
            ("clf", MlpClassifier(hidden_layer_sizes=(8,), learning_rate=2e-3,
                                  max_epochs=5, random_state=0)),
        ]
    )
    pipe.fit(X[:400], y[:400])
    preds = pipe.predict(X[400:450])
    assert preds.shape == (50,)


def test_trust_raw_override_get_params(toy_model, toy_raw_model):
    main, _ = toy_model
    pipe = TrustRawOverride(main, toy_raw_model, TroConfig(tau=0.2))
    params = pipe.get_params(deep=False)
    assert params["config"].tau == 0.2
    assert params["main_params"] is main
