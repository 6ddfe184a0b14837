"""Latency / transient-memory benchmarking of the Mamba backbone against a
reference self-attention encoder of the same width and depth."""
import csv
import time
from dataclasses import asdict, dataclass

import numpy as np

from .backbone import WiMambaModel, forward_tokens
from .numerics import instrument
from .numerics.module import Linear, Module, ones
from .numerics.tensor import (
    as_tensor,
    check_finite,
    concat,
    default_dtype,
    getitem,
    linear,
    matmul,
    mul,
    no_grad,
    parameter,
    reshape,
    rms_normalize,
    silu,
    softmax,
    transpose,
)
from .tokenizer import n_tokens, tokenize

PATCHES = {16: "4x4", 36: "6x6", 64: "8x8"}
CSV_FIELDS = ["arch", "patch", "T", "lat_med_ms", "lat_p90_ms", "peak_bytes", "macs", "n_antennas", "n_subcarriers"]


class AttentionLayer(Module):
    """Pre-norm transformer encoder layer (forward only)."""

    def __init__(self, d_model, rng, n_heads=4, ffn_mult=4):
        if d_model % n_heads:
            raise ValueError(f"d_model {d_model} not divisible by {n_heads} heads")
        self.d_model = d_model
        self.n_heads = n_heads
        self.norm1 = ones((d_model,))
        self.qkv = Linear(d_model, 3 * d_model, rng)
        self.out = Linear(d_model, d_model, rng)
        self.norm2 = ones((d_model,))
        self.ff1 = Linear(d_model, ffn_mult * d_model, rng)
        self.ff2 = Linear(ffn_mult * d_model, d_model, rng)

    def __call__(self, seq):
        return attention_forward(self, seq)


def _heads(layer, seq):
    L, D = seq.shape
    H = layer.n_heads
    qkv = reshape(layer.qkv(rms_normalize(seq, layer.norm1)), (L, 3, H, D // H))
    q, k, v = (transpose(getitem(qkv, (slice(None), i)), (1, 0, 2)) for i in range(3))
    return q, k, v


def attention_weights(layer, seq):
    """Row-stochastic attention matrices, shape [heads, L, L]."""
    q, k, _ = _heads(layer, seq)
    scores = mul(matmul(q, transpose(k, (0, 2, 1))), 1.0 / np.sqrt(q.shape[-1]))
    return softmax(scores, axis=-1)


def attention_sublayer(layer, seq):
    """Multi-head self-attention with output projection, before the residual."""
    L, D = seq.shape
    q, k, v = _heads(layer, seq)
    scores = mul(matmul(q, transpose(k, (0, 2, 1))), 1.0 / np.sqrt(q.shape[-1]))
    probs = softmax(scores, axis=-1)
    del scores
    ctx = reshape(transpose(matmul(probs, v), (1, 0, 2)), (L, D))
    return layer.out(ctx)


def attention_forward(layer, seq):
    seq = attention_sublayer(layer, seq) + seq
    hidden = silu(layer.ff1(rms_normalize(seq, layer.norm2)))
    seq = layer.ff2(hidden) + seq
    return check_finite(seq, "attention layer output")


class AttentionEncoder(Module):
    """Token embedding + class token + stacked attention layers, mirroring the Mamba backbone."""

    def __init__(self, token_lens=(16, 64), d_model=128, n_layers=12, n_heads=4, seed=0, dtype="float32"):
        rng = np.random.default_rng(seed)
        self.d_model = d_model
        with default_dtype(np.dtype(dtype)):
            self.embed_weight = {}
            self.embed_bias = {}
            self.cls_token = {}
            for L in token_lens:
                self.embed_weight[str(L)] = Linear(L, d_model, rng).weight
                self.embed_bias[str(L)] = parameter(np.zeros(d_model))
                self.cls_token[str(L)] = parameter(0.02 * rng.standard_normal(L))
            self.layers = [AttentionLayer(d_model, rng, n_heads) for _ in range(n_layers)]
            self.final_gain = ones((d_model,))

    def encode_tokens(self, ts):
        key = str(ts.token_len)
        tokens = as_tensor(np.asarray(ts.tokens, dtype=self.final_gain.dtype))
        seq = concat([reshape(self.cls_token[key], (1, ts.token_len)), tokens], axis=0)
        seq = linear(seq, self.embed_weight[key], self.embed_bias[key])
        for layer in self.layers:
            seq = layer(seq)
        return rms_normalize(seq, self.final_gain)


def measure_latency(forward_fn, reps=20, warmup=3):
    """Median and 90th-percentile wall-clock milliseconds of ``forward_fn()``."""
    if reps < 20 or warmup < 3:
        raise ValueError("latency needs at least 20 timed repetitions and 3 warmup runs")
    for _ in range(warmup):
        forward_fn()
    times = []
    for _ in range(reps):
        start = time.perf_counter()
        forward_fn()
        times.append((time.perf_counter() - start) * 1e3)
    times.sort()
    return float(np.median(times)), float(np.percentile(times, 90))


def measure_peak_memory(forward_fn):
    """Peak bytes of tensors and kernel scratch alive during one call, beyond what existed before."""
    with instrument.track_allocations() as tracker:
        result = forward_fn()
        del result
    return tracker.peak


def measure_macs(forward_fn):
    with instrument.count_macs() as counter:
        forward_fn()
    return counter.count


@dataclass
class BenchRow:
    arch: str
    patch: str
    T: int
    lat_med_ms: float
    lat_p90_ms: float
    peak_bytes: int
    macs: int
    n_antennas: int
    n_subcarriers: int


def forward_fn_for(arch, model, ts):
    if arch == "mamba":
        def run():
            with no_grad():
                return forward_tokens(model, ts)
    elif arch == "transformer":
        def run():
            with no_grad():
                return model.encode_tokens(ts)
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    return run


def build_models(archs, token_lens, d_model=128, n_layers=12, seed=0):
    models = {}
    if "mamba" in archs:
        models["mamba"] = WiMambaModel(token_lens=token_lens, d_model=d_model, n_layers=n_layers, seed=seed)
    if "transformer" in archs:
        models["transformer"] = AttentionEncoder(token_lens, d_model, n_layers, seed=seed)
    return models


def scaling_report(channel, token_lens=(16, 36, 64), archs=("mamba", "transformer"), reps=20, warmup=3,
                   d_model=128, n_layers=12, seed=0, models=None):
    """Benchmark every (arch, token length) pair on one fixed channel."""
    H = np.asarray(channel)
    N, M = H.shape
    models = models or build_models(archs, token_lens, d_model, n_layers, seed)
    rows = []
    for arch in archs:
        model = models[arch]
        for L in token_lens:
            ts = tokenize(H, L)
            fn = forward_fn_for(arch, model, ts)
            med, p90 = measure_latency(fn, reps, warmup)
            rows.append(BenchRow(
                arch=arch,
                patch=PATCHES.get(L, f"L{L}"),
                T=n_tokens(N, M, L),
                lat_med_ms=med,
                lat_p90_ms=p90,
                peak_bytes=measure_peak_memory(fn),
                macs=measure_macs(fn),
                n_antennas=N,
                n_subcarriers=M,
            ))
    return rows


def write_report(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(asdict(row))
