"""WiMamba encoder: per-granularity token embedding with a learnable class
token, a stack of bidirectional Mamba layers, and representation pooling."""
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError
from .mamba import BidirectionalLayer
from .numerics.module import Module, ones, uniform_fan_in
from .numerics.tensor import (
    Tensor,
    as_tensor,
    concat,
    default_dtype,
    getitem,
    linear,
    mean,
    parameter,
    reshape,
    rms_normalize,
)

REPRESENTATIONS = ("class", "flatten", "mean")


@dataclass
class ModelConfig:
    token_lens: tuple = (16, 64)
    d_model: int = 128
    n_layers: int = 12
    expand: int = 3
    d_state: int = 8
    d_conv: int = 4
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.token_lens = tuple(int(L) for L in self.token_lens)
        if self.d_model % 2:
            raise ConfigurationError(f"d_model must be even, got {self.d_model}")
        if min(self.n_layers, self.expand, self.d_state, self.d_conv) < 1 or not self.token_lens:
            raise ConfigurationError(f"invalid model configuration {self}")

    def to_dict(self):
        d = asdict(self)
        d["token_lens"] = list(self.token_lens)
        return d


@dataclass
class EmbeddingOutput:
    x_cls: Tensor  # [D]
    x_patches: Tensor  # [T, D]
    token_len: int
    full: Tensor = field(repr=False, default=None)  # [(T+1), D], class token first


class WiMambaModel(Module):
    def __init__(self, config=None, zero_out=False, **overrides):
        config = config or ModelConfig(**overrides)
        self.config = config
        rng = np.random.default_rng(config.seed)
        D = config.d_model
        with default_dtype(np.dtype(config.dtype)):
            self.embed_weight = {}
            self.embed_bias = {}
            self.cls_token = {}
            for L in config.token_lens:
                key = str(L)
                self.embed_weight[key] = uniform_fan_in(rng, (D, L), L)
                self.embed_bias[key] = uniform_fan_in(rng, (D,), L)
                self.cls_token[key] = parameter(0.02 * rng.standard_normal(L))
            self.layers = [
                BidirectionalLayer(D, rng, config.expand, config.d_state, config.d_conv, zero_out)
                for _ in range(config.n_layers)
            ]
            self.final_gain = ones((D,))

    @property
    def token_lens(self):
        return self.config.token_lens

    def backbone_parameters(self):
        """Named parameters of the shared layers only (excludes per-granularity embeddings)."""
        return [(n, p) for n, p in self.named_parameters() if n.startswith(("layers.", "final_gain"))]

    def __repr__(self):
        return f"WiMambaModel({self.config}, params={self.num_parameters()})"


def _granularity(model, token_len):
    key = str(token_len)
    if key not in model.embed_weight:
        raise ConfigurationError(
            f"token length {token_len} not registered; model supports {list(model.token_lens)}"
        )
    return key


def embed(model, ts):
    """Prepend the class token and map every token to the embedding space."""
    key = _granularity(model, ts.token_len)
    tokens = as_tensor(np.asarray(ts.tokens, dtype=model.final_gain.dtype))
    cls = reshape(model.cls_token[key], (1, ts.token_len))
    seq = concat([cls, tokens], axis=0)
    return linear(seq, model.embed_weight[key], model.embed_bias[key])


def run_layers(model, seq):
    for layer in model.layers:
        seq = layer(seq)
    return rms_normalize(seq, model.final_gain)


def forward_tokens(model, ts):
    """Embedding followed by all layers and the final norm, as one [(T+1), D] tensor."""
    seq = embed(model, ts)
    for layer in model.layers:
        seq = layer(seq)
    return rms_normalize(seq, model.final_gain)


def encode(model, ts):
    out = forward_tokens(model, ts)
    D = model.config.d_model
    return EmbeddingOutput(
        x_cls=reshape(getitem(out, (slice(0, 1), slice(None))), (D,)),
        x_patches=getitem(out, (slice(1, None), slice(None))),
        token_len=ts.token_len,
        full=out,
    )


def extract_representation(out, kind="class"):
    if kind == "class":
        return out.x_cls
    if kind == "flatten":
        return reshape(out.x_patches, (-1,))
    if kind == "mean":
        return mean(out.x_patches, axis=0)
    raise ConfigurationError(f"unknown representation {kind!r}; choose from {REPRESENTATIONS}")


