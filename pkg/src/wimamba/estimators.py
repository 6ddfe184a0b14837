"""scikit-learn style wrappers: tokenizer, pretrained encoder and task heads.

Channels are passed as a complex array ``[n, N, M]`` (or a sequence of
``N x M`` matrices / ``ChannelSample`` objects).
"""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .backbone import ModelConfig, WiMambaModel, encode, extract_representation
from .errors import ConfigurationError, DimensionError
from .numerics.tensor import no_grad
from .pretrain import PretrainConfig, new_state, pretrain_run
from .tasks.channels import N_BEAMS, ChannelSample, interp_mask_input
from .tasks.heads import HeadConfig, dataset_scale, fit_head, head_forward, make_head, nmse, predict, task_features
from .tokenizer import TokenSequence, detokenize, normalize_channel, tokenize


def check_channels(X):
    """Validate and return channels as a complex array ``[n, N, M]``."""
    if isinstance(X, ChannelSample):
        X = [X]
    if isinstance(X, (list, tuple)):
        X = [np.asarray(x.H if isinstance(x, ChannelSample) else x) for x in X]
        if len({x.shape for x in X}) > 1:
            raise DimensionError("all channels must share one N x M shape")
    X = np.asarray(X)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[0] == 0 or min(X.shape[1:]) < 1:
        raise DimensionError(f"expected channels shaped [n, N, M], got {X.shape}")
    if not np.issubdtype(X.dtype, np.number):
        raise ValueError(f"channels must be numeric, got dtype {X.dtype}")
    if not np.all(np.isfinite(X)):
        raise ValueError("channels contain NaN or infinite values")
    return X.astype(np.complex128, copy=False)


class ChannelTokenizer(TransformerMixin, BaseEstimator):
    """Channel matrices to ``[n, T, L]`` token arrays and back."""

    def __init__(self, token_len=16):
        self.token_len = token_len

    def fit(self, X, y=None):
        X = check_channels(X)
        self.n_antennas_, self.n_subcarriers_ = X.shape[1:]
        self.pad_ = tokenize(X[0], self.token_len).pad
        return self

    def transform(self, X):
        check_is_fitted(self, "pad_")
        X = check_channels(X)
        if X.shape[1:] != (self.n_antennas_, self.n_subcarriers_):
            raise DimensionError(f"fitted on {self.n_antennas_}x{self.n_subcarriers_} channels, got {X.shape[1:]}")
        return np.stack([tokenize(H, self.token_len).tokens for H in X])

    def inverse_transform(self, tokens):
        check_is_fitted(self, "pad_")
        return np.stack([
            detokenize(TokenSequence(np.asarray(t), self.token_len, self.n_antennas_, self.n_subcarriers_, self.pad_))
            for t in np.asarray(tokens)
        ])


class WiMambaEncoder(TransformerMixin, BaseEstimator):
    """``fit`` pretrains the backbone; ``transform`` returns frozen representations."""

    def __init__(self, d_model=128, n_layers=12, expand=3, d_state=8, d_conv=4, token_lens=(16, 64),
                 epochs=1, batch_size=32, mask_ratio=0.15, lr=1e-3, representation="class", token_len=None,
                 seed=0):
        self.d_model = d_model
        self.n_layers = n_layers
        self.expand = expand
        self.d_state = d_state
        self.d_conv = d_conv
        self.token_lens = token_lens
        self.epochs = epochs
        self.batch_size = batch_size
        self.mask_ratio = mask_ratio
        self.lr = lr
        self.representation = representation
        self.token_len = token_len
        self.seed = seed

    def _model_config(self):
        return ModelConfig(token_lens=tuple(self.token_lens), d_model=self.d_model, n_layers=self.n_layers,
                           expand=self.expand, d_state=self.d_state, d_conv=self.d_conv, seed=self.seed)

    def fit(self, X, y=None):
        X = check_channels(X)
        cfg = PretrainConfig(epochs=self.epochs, batch_size=self.batch_size, mask_ratio=self.mask_ratio,
                             lr=self.lr, seed=self.seed)
        state = pretrain_run(list(X), cfg, state=new_state(WiMambaModel(self._model_config()), cfg))
        self.model_ = state.model
        self.history_ = state.records
        return self

    @classmethod
    def from_model(cls, model, representation="class", token_len=None):
        """Wrap an already pretrained :class:`WiMambaModel` (e.g. from a checkpoint)."""
        c = model.config
        enc = cls(d_model=c.d_model, n_layers=c.n_layers, expand=c.expand, d_state=c.d_state, d_conv=c.d_conv,
                  token_lens=c.token_lens, representation=representation, token_len=token_len, seed=c.seed)
        enc.model_ = model
        enc.history_ = []
        return enc

    def _token_len(self):
        return self.token_len or self.model_.token_lens[0]

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_channels(X)
        L = self._token_len()
        with no_grad():
            return np.stack([
                extract_representation(encode(self.model_, tokenize(normalize_channel(H)[0], L)),
                                       self.representation).data
                for H in X
            ])


class _TaskEstimator(BaseEstimator):
    task = None

    def __init__(self, encoder=None, representation=None, steps=500, batch_size=32, lr=1e-3, raw=False,
                 token_len=None, seed=0):
        self.encoder = encoder
        self.representation = representation
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.raw = raw
        self.token_len = token_len
        self.seed = seed

    def _setup(self):
        if not self.raw:
            if self.encoder is None:
                raise ConfigurationError("an encoder is required unless raw=True")
            check_is_fitted(self.encoder, "model_")
        model = None if self.raw else self.encoder.model_
        L = self.token_len or (model.token_lens[0] if model is not None else 16)
        cfg = HeadConfig(steps=self.steps, batch_size=self.batch_size, lr=self.lr,
                         representation=self.representation, raw=self.raw, seed=self.seed,
                         **self._extra_config())
        return model, L, cfg

    def _extra_config(self):
        return {}

    def _samples(self, X, y):
        return [ChannelSample(H, **self._labels(v)) for H, v in zip(X, y)]

    def fit(self, X, y):
        X = check_channels(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} channels but {len(y)} labels")
        model, L, cfg = self._setup()
        samples = self._samples(X, y)
        scale = dataset_scale(samples)
        feats, targets, _ = task_features(model, samples, self.task, cfg, L, scale)
        self.head_ = make_head(self.task, feats, cfg, token_len=L)
        self.head_.input_scale = scale
        self.loss_curve_, self.best_loss_curve_ = fit_head(self.head_, feats, targets, cfg)
        return self

    def _features(self, X):
        check_is_fitted(self, "head_")
        X = check_channels(X)
        model, L, cfg = self._setup()
        dummy = [ChannelSample(H, los=False, beam_index=0, position=(0.0, 0.0)) for H in X]
        feats, _, _ = task_features(model, dummy, self.task, cfg, L, self.head_.input_scale)
        return feats


class LosClassifier(ClassifierMixin, _TaskEstimator):
    task = "los"

    def _labels(self, v):
        return {"los": bool(v)}

    def fit(self, X, y):
        super().fit(X, y)
        self.classes_ = np.array([0, 1])
        return self

    def predict(self, X):
        return predict(self.head_, self._features(X))


class BeamClassifier(ClassifierMixin, _TaskEstimator):
    task = "beam"

    def _labels(self, v):
        return {"beam_index": int(v)}

    def fit(self, X, y):
        super().fit(X, y)
        self.classes_ = np.arange(N_BEAMS)
        return self

    def predict(self, X):
        return predict(self.head_, self._features(X))


class PositionRegressor(RegressorMixin, _TaskEstimator):
    task = "loc"

    def _labels(self, v):
        return {"position": tuple(np.asarray(v, dtype=float))}

    def predict(self, X):
        return predict(self.head_, self._features(X))


class ChannelInterpolator(_TaskEstimator):
    """Learns to fill in unobserved subcarriers.

    ``fit`` hides a random ``1 - keep_fraction`` of the subcarriers of each
    training channel; ``predict`` takes channels whose missing columns are
    already zero and returns full reconstructions.
    """

    task = "interp"

    def __init__(self, encoder=None, keep_fraction=0.5, steps=500, batch_size=32, lr=1e-3, raw=False,
                 token_len=None, seed=0):
        super().__init__(encoder=encoder, representation=None, steps=steps, batch_size=batch_size, lr=lr,
                         raw=raw, token_len=token_len, seed=seed)
        self.keep_fraction = keep_fraction

    def _extra_config(self):
        return {"keep_fraction": self.keep_fraction}

    def fit(self, X, y=None):
        X = check_channels(X)
        return super().fit(X, np.zeros(len(X)))

    def _labels(self, v):
        return {}

    def predict(self, X_observed):
        check_is_fitted(self, "head_")
        X = check_channels(X_observed)
        model, L, _ = self._setup()
        scale = self.head_.input_scale
        out = []
        with no_grad():
            for H in X:
                ts = tokenize(H / scale, L)
                rep = ts.tokens if self.raw else encode(model, ts).x_patches.data
                out.append(head_forward(self.head_, rep, template=ts) * scale)
        return np.stack(out)

    def score(self, X, y=None):
        """Negative mean NMSE on ``X`` after hiding subcarriers with the fitted seed."""
        X = check_channels(X)
        rng = np.random.default_rng([self.seed, 8])
        observed = np.stack([interp_mask_input(H, self.keep_fraction, rng)[0] for H in X])
        pred = self.predict(observed)
        return -float(np.mean([nmse(p, H) for p, H in zip(pred, X)]))
