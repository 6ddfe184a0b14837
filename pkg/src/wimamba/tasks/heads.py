"""Downstream heads on frozen representations: feature extraction, head
training by empirical-risk minimisation, and evaluation metrics."""
from dataclasses import asdict, dataclass

import numpy as np

from ..backbone import encode, extract_representation
from ..errors import ConfigurationError
from ..numerics.module import Linear, Module
from ..numerics.tensor import as_tensor, cross_entropy, default_dtype, mul, no_grad, silu, square, sub, tsum
from ..pretrain import Adam
from ..tokenizer import TokenSequence, detokenize, normalize_channel, tokenize
from .channels import N_BEAMS, interp_mask_input

TASKS = ("los", "beam", "interp", "loc")
DEFAULT_REPRESENTATION = {"los": "class", "beam": "class", "loc": "mean", "interp": "patches"}
HIDDEN = {"los": (8,), "beam": (256, 128), "loc": (64, 32)}
OUTPUTS = {"los": 2, "beam": N_BEAMS, "loc": 2}
LOSS = {"los": "cross_entropy", "beam": "cross_entropy", "interp": "l2", "loc": "l2"}


def _check_task(task):
    if task not in TASKS:
        raise ConfigurationError(f"unknown task {task!r}; choose from {TASKS}")


def _check_representation(task, representation):
    if task == "interp":
        if representation != "patches":
            raise ConfigurationError("the interpolation head consumes per-patch embeddings")
    elif representation not in ("class", "flatten", "mean"):
        raise ConfigurationError(f"unknown representation {representation!r} for task {task!r}")


@dataclass
class HeadConfig:
    steps: int = 500
    batch_size: int = 32
    lr: float = 1e-3
    keep_fraction: float = 0.5  # observed subcarriers for interpolation
    representation: str = None  # None: task default
    raw: bool = False  # bypass the backbone and feed normalized raw channels
    normalization: str = "dataset"  # "dataset": one training-set scale; "sample": unit power per channel
    seed: int = 0

    def __post_init__(self):
        if self.normalization not in ("dataset", "sample"):
            raise ConfigurationError(f"normalization must be 'dataset' or 'sample', got {self.normalization!r}")
        if self.steps < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigurationError(f"invalid head training configuration {self}")
        if not 0 < self.keep_fraction <= 1:
            raise ConfigurationError("keep_fraction must lie in (0, 1]")

    def to_dict(self):
        return asdict(self)


class TaskHead(Module):
    """MLP with silu between affine layers; for interpolation a per-token linear map."""

    def __init__(self, task, in_dim, token_len=None, representation=None, seed=0, zero_final=False, dtype="float32"):
        _check_task(task)
        representation = representation or DEFAULT_REPRESENTATION[task]
        _check_representation(task, representation)
        if task == "interp" and not token_len:
            raise ConfigurationError("interpolation head needs the token length")
        self.task = task
        self.representation = representation
        self.in_dim = int(in_dim)
        self.token_len = token_len
        rng = np.random.default_rng([seed, 5])
        widths = [self.in_dim] + ([] if task == "interp" else list(HIDDEN[task]))
        widths.append(token_len if task == "interp" else OUTPUTS[task])
        with default_dtype(np.dtype(dtype)):
            self.layers = [
                Linear(a, b, rng, zero=zero_final and i == len(widths) - 2)
                for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))
            ]
        # fitted preprocessing, stored as plain arrays rather than parameters
        self.input_scale = None
        self.feature_mean = None
        self.feature_std = None
        self.target_mean = None
        self.target_std = None

    def __call__(self, x):
        return head_forward(self, x)


def head_forward(head, x, template=None):
    """Apply the head to a representation batch (or a single representation).

    For the interpolation head ``x`` holds patch embeddings ``[..., T, D]``;
    given a ``template`` token sequence the predicted tokens are reassembled
    into the complex ``N x M`` channel.
    """
    if np.shape(x)[-1] != head.in_dim:
        raise ConfigurationError(
            f"{head.task} head expects {head.representation} features of width {head.in_dim}, got {np.shape(x)}"
        )
    if head.feature_mean is not None:
        x = (np.asarray(getattr(x, "data", x)) - head.feature_mean) / head.feature_std
    x = as_tensor(np.asarray(getattr(x, "data", x), dtype=head.layers[0].weight.dtype))
    for i, layer in enumerate(head.layers):
        x = layer(x)
        if i < len(head.layers) - 1:
            x = silu(x)
    if head.task == "interp" and template is not None:
        tokens = x.data.astype(np.float64)
        return detokenize(TokenSequence(tokens, template.token_len, template.n_antennas,
                                        template.n_subcarriers, template.pad))
    return x


# ---------------------------------------------------------------- features

def _item(entry):
    if isinstance(entry, tuple):
        return entry
    return entry, None


def dataset_scale(dataset):
    """Root-mean-square coefficient magnitude over a whole dataset."""
    power = np.mean([np.mean(np.abs(np.asarray(_item(e)[0].H)) ** 2) for e in dataset])
    if power == 0:
        raise ValueError("dataset channels are all zero")
    return float(np.sqrt(power))


def _inputs(sample, task, L, rng, keep_fraction, scale):
    """Observed tokens and full-channel tokens, both divided by the same scale.

    With ``scale=None`` every channel is brought to unit power on its own
    (for interpolation, using the power of the observed part).
    """
    H = np.asarray(sample.H)
    H_obs = interp_mask_input(H, keep_fraction, rng)[0] if task == "interp" else H
    if scale is None:
        _, scale = normalize_channel(H_obs)
    return tokenize(H_obs / scale, L), tokenize(H / scale, L)


def task_features(model, dataset, task, cfg, token_len=None, scale=None):
    """Frozen features, targets and full-channel token templates for a list of
    ``ChannelSample`` or ``(ChannelSample, token_len)`` entries.

    ``scale`` divides every channel; when omitted under dataset normalization
    it is computed from ``dataset`` itself.
    """
    _check_task(task)
    if len(dataset) == 0:
        raise ValueError("task dataset is empty")
    if cfg.normalization == "sample":
        scale = None
    elif scale is None:
        scale = dataset_scale(dataset)
    representation = cfg.representation or DEFAULT_REPRESENTATION[task]
    _check_representation(task, representation)
    rng = np.random.default_rng([cfg.seed, 4])
    feats, targets, templates = [], [], []
    with no_grad():
        for entry in dataset:
            sample, L = _item(entry)
            L = L or token_len or (model.token_lens[0] if model is not None else 16)
            ts_in, ts_full = _inputs(sample, task, L, rng, cfg.keep_fraction, scale)
            if cfg.raw:
                f = _raw_features(ts_in, representation)
            else:
                out = encode(model, ts_in)
                f = out.x_patches.data if representation == "patches" else extract_representation(out, representation).data
            feats.append(np.asarray(f, dtype=np.float32))
            templates.append(ts_full)
            targets.append(_target(sample, task, ts_full))
    shapes = {f.shape for f in feats}
    if len(shapes) != 1:
        raise ConfigurationError(f"features of differing shapes {sorted(shapes)}; use a single granularity")
    return np.stack(feats), np.stack(targets), templates


def _raw_features(ts, representation):
    if representation == "patches":
        return ts.tokens
    return ts.tokens.reshape(-1)


def _target(sample, task, ts_full):
    if task == "los":
        return np.int64(bool(sample.los))
    if task == "beam":
        return np.int64(sample.beam_index)
    if task == "loc":
        return np.asarray(sample.position, dtype=np.float64)
    return ts_full.tokens


# ---------------------------------------------------------------- training

def _loss(head, pred, y):
    if LOSS[head.task] == "cross_entropy":
        return cross_entropy(pred, y)
    diff = sub(pred, as_tensor(y.astype(pred.dtype)))
    # squared error per sample, averaged over the batch
    return mul(tsum(square(diff)), 1.0 / len(y))


def fit_head(head, X, Y, cfg):
    """Minimise the task loss on precomputed features; returns ``(loss, best_so_far)`` curves."""
    if len(X) == 0:
        raise ValueError("task dataset is empty")
    X = np.asarray(X, dtype=np.float64)
    axes = tuple(range(X.ndim - 1))
    head.feature_mean = X.mean(axis=axes)
    head.feature_std = X.std(axis=axes) + 1e-6
    if head.task == "loc":
        head.target_mean = Y.mean(axis=0)
        head.target_std = Y.std(axis=0) + 1e-9
        Y = (Y - head.target_mean) / head.target_std
    rng = np.random.default_rng([cfg.seed, 6])
    opt = Adam(head.named_parameters())
    losses, best = [], []
    for _ in range(cfg.steps):
        idx = rng.choice(len(X), size=min(cfg.batch_size, len(X)), replace=False)
        opt.zero_grad()
        loss = _loss(head, head_forward(head, X[idx]), Y[idx])
        loss.backward()
        opt.step(cfg.lr)
        losses.append(loss.item())
        best.append(min(losses[-1], best[-1]) if best else losses[-1])
    return losses, best


def make_head(task, X, cfg, token_len=None, seed=None):
    in_dim = X.shape[-1]
    return TaskHead(task, in_dim, token_len=token_len, representation=cfg.representation,
                    seed=cfg.seed if seed is None else seed)


def train_head(head, model, dataset, cfg, token_len=None):
    """Train ``head`` on frozen ``model`` features of ``dataset``; backbone parameters are never touched."""
    if cfg.normalization == "dataset":
        head.input_scale = dataset_scale(dataset)
    X, Y, _ = task_features(model, dataset, head.task, cfg, token_len, head.input_scale)
    losses, best = fit_head(head, X, Y, cfg)
    return head, {"loss": losses, "best": best}


# ---------------------------------------------------------------- evaluation

def predict(head, X, templates=None):
    with no_grad():
        out = head_forward(head, X)
    pred = out.data
    if head.task in ("los", "beam"):
        return np.argmax(pred, axis=-1)
    if head.task == "loc":
        return pred * head.target_std + head.target_mean if head.target_std is not None else pred
    return [
        detokenize(TokenSequence(p.astype(np.float64), t.token_len, t.n_antennas, t.n_subcarriers, t.pad))
        for p, t in zip(pred, templates)
    ]


def nmse(H_hat, H):
    H = np.asarray(H)
    return float(np.sum(np.abs(np.asarray(H_hat) - H) ** 2) / np.sum(np.abs(H) ** 2))


def score(task, pred, Y, templates=None):
    if task in ("los", "beam"):
        return {"accuracy": float(np.mean(np.asarray(pred) == np.asarray(Y)))}
    if task == "loc":
        return {"mae_m": float(np.mean(np.abs(np.asarray(pred) - Y)))}
    return {"nmse": float(np.mean([nmse(p, detokenize(t)) for p, t in zip(pred, templates)]))}


def evaluate_task(head, model, test_set, cfg, token_len=None):
    """Accuracy (los/beam), NMSE (interp) or mean absolute coordinate error in metres (loc)."""
    if cfg.normalization == "dataset" and head.input_scale is None:
        raise ConfigurationError("head has no fitted input scale; train it first")
    X, Y, templates = task_features(model, test_set, head.task, cfg, token_len, head.input_scale)
    return score(head.task, predict(head, X, templates), Y, templates)
