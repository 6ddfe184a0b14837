import time

import numpy as np
import pytest

from conftest import grad_error
from wimamba.backbone import (
    EmbeddingOutput,
    ModelConfig,
    WiMambaModel,
    embed,
    encode,
    extract_representation,
)
from wimamba.errors import ConfigurationError
from wimamba.numerics import Tensor, count_macs, no_grad, rms_normalize, tsum
from wimamba.tokenizer import tokenize


def channel(rng, N=4, M=4):
    return rng.standard_normal((N, M)) + 1j * rng.standard_normal((N, M))


def small(**kw):
    cfg = dict(token_lens=(4, 16), d_model=8, n_layers=2, expand=2, d_state=3)
    cfg.update(kw)
    return WiMambaModel(ModelConfig(**cfg))


def test_default_parameter_budget():
    n = WiMambaModel().num_parameters()
    assert 1.5e6 <= n <= 3.5e6


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(d_model=7)
    with pytest.raises(ConfigurationError):
        ModelConfig(n_layers=0)


def test_identity_embedding(rng):
    m = small(token_lens=(8,), d_model=8)
    m.embed_weight["8"].data[:] = np.eye(8)
    m.embed_bias["8"].data[:] = 0
    ts = tokenize(channel(rng, 4, 4), 8)
    out = embed(m, ts).data
    assert np.allclose(out[1:], ts.tokens)
    assert np.allclose(out[0], m.cls_token["8"].data)


def test_bias_shifts_every_embedding(rng):
    m = small()
    ts = tokenize(channel(rng), 4)
    base = embed(m, ts).data
    m.embed_bias["4"].data += 0.5
    assert np.allclose(embed(m, ts).data - base, 0.5)


def test_unknown_granularity(rng):
    with pytest.raises(ConfigurationError):
        embed(small(), tokenize(channel(rng), 8))


def test_embedding_gradient(f64, rng):
    m = small(dtype="float64")
    ts = tokenize(channel(rng), 4)
    w = rng.standard_normal((ts.n_tokens + 1, 8))
    leaves = [m.embed_weight["4"], m.embed_bias["4"], m.cls_token["4"]]
    assert grad_error(lambda: tsum(embed(m, ts) * Tensor(w)), leaves) < 1e-4


def test_zero_out_backbone_is_final_norm_of_embeddings(rng):
    z = WiMambaModel(small().config, zero_out=True)
    ts = tokenize(channel(rng), 4)
    out = encode(z, ts)
    expect = rms_normalize(embed(z, ts), z.final_gain).data
    assert np.array_equal(out.full.data, expect)


@pytest.mark.parametrize("N,M,L,T", [(2, 4, 4, 4), (32, 32, 16, 128)])
def test_output_shapes(rng, N, M, L, T):
    m = small()
    ts = tokenize(channel(rng, N, M), L)
    assert ts.n_tokens == T
    out = encode(m, ts)
    assert isinstance(out, EmbeddingOutput)
    assert out.full.shape == (T + 1, 8)
    assert out.x_patches.shape == (T, 8)
    assert out.x_cls.shape == (8,)


def test_two_token_sequence(rng):
    m = small()
    ts = tokenize(channel(rng, 2, 2), 4)
    assert ts.n_tokens == 2
    assert encode(m, ts).full.shape == (3, 8)


def test_encode_is_deterministic(rng):
    m = small()
    ts = tokenize(channel(rng), 4)
    assert np.array_equal(encode(m, ts).full.data, encode(m, ts).full.data)
    with no_grad():
        assert np.array_equal(encode(m, ts).full.data, encode(m, ts).full.data)


def test_representations(rng):
    m = small()
    out = encode(m, tokenize(channel(rng), 4))
    T = out.x_patches.shape[0]
    assert extract_representation(out, "class").shape == (8,)
    assert extract_representation(out, "flatten").shape == (T * 8,)
    assert np.allclose(extract_representation(out, "mean").data, out.x_patches.data.mean(0))
    with pytest.raises(ConfigurationError):
        extract_representation(out, "max")


def test_representation_edge_cases():
    v = np.arange(4.0)
    const = EmbeddingOutput(Tensor(np.zeros(4)), Tensor(np.tile(v, (5, 1))), 4)
    assert np.allclose(extract_representation(const, "mean").data, v)
    single = EmbeddingOutput(Tensor(np.zeros(4)), Tensor(v[None]), 4)
    assert np.array_equal(extract_representation(single, "flatten").data, v.astype(np.float32))
    assert np.allclose(extract_representation(single, "mean").data, v)


def test_granularity_isolation(rng):
    m = small()
    tsum(encode(m, tokenize(channel(rng), 4)).full).backward()
    for name in ("embed_weight.16", "embed_bias.16", "cls_token.16"):
        p = dict(m.named_parameters())[name]
        assert p.grad is None or not p.grad.any()
    assert dict(m.named_parameters())["embed_weight.4"].grad.any()


def test_macs_double_with_tokens(rng):
    m = small(token_lens=(16,), d_model=16, n_layers=2)

    def macs(N):
        with no_grad(), count_macs() as c:
            encode(m, tokenize(channel(rng, N, 32), 16))
        return c.count

    a, b = macs(32), macs(64)
    assert abs(b / a - 2) <= 0.1  # doubling within 5%


def test_runtime_grows_at_most_fivefold(rng):
    m = WiMambaModel(ModelConfig(token_lens=(16,), d_model=32, n_layers=2))

    def timed(N):
        ts = tokenize(channel(rng, N, 64), 16)
        with no_grad():
            encode(m, ts)
            times = []
            for _ in range(5):
                t0 = time.perf_counter()
                encode(m, ts)
                times.append(time.perf_counter() - t0)
        return np.median(times)

    assert timed(64) / timed(16) <= 5.0  # T = 512 vs 128
