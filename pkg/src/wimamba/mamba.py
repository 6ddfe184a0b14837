"""Mamba layer (norm, projection, causal conv, selective SSM, gate, output
projection, residual) and the bidirectional pairing used by the backbone."""
from .errors import ConfigurationError
from .numerics.module import Linear, Module, ones, uniform_fan_in, zeros
from .numerics.tensor import (
    check_finite,
    concat,
    conv1d_depthwise,
    flip,
    getitem,
    is_grad_enabled,
    linear,
    mul,
    rms_normalize,
    silu,
)
from .ssm import SsmParams, generate_selective_params, selective_scan, selective_scan_chunked

# inference scans run chunked; chunk bounds the transient [chunk, C, S] buffers
INFERENCE_CHUNK = 16


class MambaLayer(Module):
    def __init__(self, d_model, rng, expand=3, d_state=8, d_conv=4, zero_out=False):
        self.d_model = d_model
        self.inner = expand * d_model
        self.norm_gain = ones((d_model,))
        self.in_proj = Linear(d_model, 2 * self.inner, rng)
        self.conv_kernel = uniform_fan_in(rng, (d_conv, self.inner), d_conv)
        self.conv_bias = zeros((self.inner,))
        self.ssm = SsmParams(self.inner, d_state, rng)
        self.out_proj = Linear(self.inner, d_model, rng, zero=zero_out)

    def __call__(self, seq):
        return mamba_layer_forward(self, seq)


def mamba_layer_forward(layer, seq):
    if seq.ndim != 2 or seq.shape[1] != layer.d_model:
        raise ValueError(f"expected a [L, {layer.d_model}] sequence, got {seq.shape}")
    C = layer.inner
    u = rms_normalize(seq, layer.norm_gain)
    # the two halves of in_proj are applied separately so the main path can be
    # released before the gate path is materialized
    main = _in_proj_half(layer, u, 0, C)
    main = silu(conv1d_depthwise(main, layer.conv_kernel, layer.conv_bias, causal_pad=True))
    sp = generate_selective_params(main, layer.ssm)
    if is_grad_enabled():
        z, _ = selective_scan(main, sp, layer.ssm)
    else:
        z, _ = selective_scan_chunked(main, sp, layer.ssm, chunk=INFERENCE_CHUNK)
    del main, sp
    gated = mul(z, silu(_in_proj_half(layer, u, C, 2 * C)))
    del z, u
    out = layer.out_proj(gated) + seq
    return check_finite(out, "Mamba layer output")


def _in_proj_half(layer, u, lo, hi):
    rows = slice(lo, hi)
    return linear(u, getitem(layer.in_proj.weight, rows), getitem(layer.in_proj.bias, rows))


class BidirectionalLayer(Module):
    """Forward Mamba on the first ``D/2`` features, backward Mamba on the rest."""

    def __init__(self, d_model, rng, expand=3, d_state=8, d_conv=4, zero_out=False):
        if d_model % 2:
            raise ConfigurationError(f"embedding dimension must be even, got {d_model}")
        half = d_model // 2
        self.d_model = d_model
        self.fwd = MambaLayer(half, rng, expand, d_state, d_conv, zero_out)
        self.bwd = MambaLayer(half, rng, expand, d_state, d_conv, zero_out)

    def __call__(self, seq):
        return bidirectional_forward(self, seq)


def bidirectional_forward(layer, seq):
    half = layer.d_model // 2
    if seq.ndim != 2 or seq.shape[1] != layer.d_model:
        raise ValueError(f"expected a [L, {layer.d_model}] sequence, got {seq.shape}")
    front = getitem(seq, (slice(None), slice(0, half)))
    out_f = mamba_layer_forward(layer.fwd, front)
    del front
    back_rev = getitem(seq, (slice(None, None, -1), slice(half, 2 * half)))
    out_b = flip(mamba_layer_forward(layer.bwd, back_rev), 0)
    del back_rev
    return concat([out_f, out_b], axis=1)
