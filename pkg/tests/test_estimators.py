import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from wimamba.backbone import ModelConfig, WiMambaModel
from wimamba.errors import ConfigurationError, DimensionError
from wimamba.estimators import (
    BeamClassifier,
    ChannelInterpolator,
    ChannelTokenizer,
    LosClassifier,
    PositionRegressor,
    WiMambaEncoder,
    check_channels,
)
from wimamba.tasks import SceneConfig, generate_dataset


@pytest.fixture(scope="module")
def data():
    samples = generate_dataset(SceneConfig(n_antennas=8, n_subcarriers=8), 48, seed=0)
    X = np.stack([s.H for s in samples])
    return samples, X


@pytest.fixture(scope="module")
def encoder():
    model = WiMambaModel(ModelConfig(token_lens=(16,), d_model=8, n_layers=1, expand=2))
    return WiMambaEncoder.from_model(model, representation="mean")


def test_check_channels(data):
    samples, X = data
    assert check_channels(samples).shape == (48, 8, 8)
    assert check_channels(X[0]).shape == (1, 8, 8)
    with pytest.raises(DimensionError):
        check_channels(np.zeros(4))
    with pytest.raises(DimensionError):
        check_channels([np.zeros((2, 2)), np.zeros((3, 3))])
    with pytest.raises(ValueError):
        check_channels(np.full((1, 2, 2), np.nan))


def test_tokenizer_round_trip(data):
    _, X = data
    tok = ChannelTokenizer(token_len=16).fit(X)
    T = tok.transform(X)
    assert T.shape == (48, 8, 16)
    assert np.array_equal(tok.inverse_transform(T), X)
    assert tok.get_params() == {"token_len": 16}
    with pytest.raises(DimensionError):
        tok.transform(np.zeros((1, 4, 4)))
    with pytest.raises(NotFittedError):
        ChannelTokenizer().transform(X)


def test_encoder_fit_and_transform(data):
    _, X = data
    enc = WiMambaEncoder(d_model=8, n_layers=1, expand=2, token_lens=(16,), epochs=1, batch_size=16)
    assert clone(enc).get_params() == enc.get_params()
    enc.fit(X[:24])
    assert len(enc.history_) == 1
    Z = enc.transform(X[:3])
    assert Z.shape == (3, 8) and np.all(np.isfinite(Z))


def test_encoder_requires_fit(data):
    with pytest.raises(NotFittedError):
        WiMambaEncoder().transform(data[1])


@pytest.mark.parametrize("cls,label", [
    (LosClassifier, lambda s: int(s.los)),
    (BeamClassifier, lambda s: s.beam_index),
    (PositionRegressor, lambda s: s.position),
])
def test_task_estimators(cls, label, data, encoder):
    samples, X = data
    y = np.array([label(s) for s in samples])
    est = cls(encoder=encoder, steps=10, batch_size=8)
    est.fit(X[:32], y[:32])
    pred = est.predict(X[32:])
    assert len(pred) == 16
    s = est.score(X[32:], y[32:])
    assert np.isfinite(s)
    assert clone(est).get_params()["steps"] == 10


def test_raw_estimator_needs_no_encoder(data):
    samples, X = data
    y = np.array([int(s.los) for s in samples])
    est = LosClassifier(raw=True, representation="flatten", steps=5).fit(X, y)
    assert set(est.predict(X)) <= {0, 1}
    with pytest.raises(ConfigurationError):
        LosClassifier().fit(X, y)


def test_label_length_mismatch(data, encoder):
    with pytest.raises(ValueError):
        LosClassifier(encoder=encoder).fit(data[1][:4], [0, 1])


def test_interpolator(data, encoder):
    _, X = data
    est = ChannelInterpolator(encoder=encoder, steps=10, keep_fraction=0.5).fit(X[:32])
    observed = X[32:].copy()
    observed[:, :, ::2] = 0
    out = est.predict(observed)
    assert out.shape == observed.shape and np.iscomplexobj(out)
    assert np.isfinite(est.score(X[32:]))
    assert est.get_params()["keep_fraction"] == 0.5
