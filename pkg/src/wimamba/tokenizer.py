"""Complex CSI matrix <-> real token sequence, plus masking for pretraining.

Vectorization is column-major (antenna index fastest). The real and the
imaginary parts are each zero-padded to a multiple of the token length, so
token ``i`` of the real half is always paired with token ``i + T/2`` of the
imaginary half.
"""
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionError

POLICY_ONES, POLICY_GAUSSIAN, POLICY_KEEP = 0, 1, 2
POLICY_PROBS = (0.8, 0.1, 0.1)


@dataclass(frozen=True)
class TokenSequence:
    tokens: np.ndarray  # [T, L]
    token_len: int
    n_antennas: int
    n_subcarriers: int
    pad: int  # zeros appended to each component

    @property
    def n_tokens(self):
        return self.tokens.shape[0]

    @property
    def component_split(self):
        return self.tokens.shape[0] // 2


@dataclass(frozen=True)
class MaskSet:
    indices: np.ndarray  # sorted 0-based token indices
    policies: np.ndarray  # one POLICY_* code per index
    n_tokens: int

    def __len__(self):
        return len(self.indices)


def n_tokens(n_antennas, n_subcarriers, token_len):
    """2 * ceil(N*M / L)."""
    return 2 * math.ceil(n_antennas * n_subcarriers / token_len)


def tokenize(H, token_len):
    H = np.asarray(H)
    if H.ndim != 2:
        raise DimensionError(f"channel must be an N x M matrix, got shape {H.shape}")
    if not np.all(np.isfinite(H)):
        raise ValueError("channel has non-finite entries")
    N, M = H.shape
    per_comp = math.ceil(N * M / token_len)
    pad = per_comp * token_len - N * M
    real = np.real(H).ravel(order="F")
    imag = np.imag(H).ravel(order="F") if np.iscomplexobj(H) else np.zeros_like(real)
    tokens = np.zeros((2 * per_comp, token_len), dtype=real.dtype)
    flat = tokens.reshape(2, per_comp * token_len)
    flat[0, : N * M] = real
    flat[1, : N * M] = imag
    return TokenSequence(tokens, token_len, N, M, pad)


def detokenize(ts, n_antennas=None, n_subcarriers=None):
    N = ts.n_antennas if n_antennas is None else n_antennas
    M = ts.n_subcarriers if n_subcarriers is None else n_subcarriers
    tokens = np.asarray(ts.tokens)
    per_comp = math.ceil(N * M / ts.token_len)
    if tokens.shape != (2 * per_comp, ts.token_len) or per_comp * ts.token_len - N * M != ts.pad:
        raise DimensionError(
            f"token sequence {tokens.shape} (pad {ts.pad}) does not describe a {N}x{M} channel"
        )
    flat = tokens.reshape(2, per_comp * ts.token_len)[:, : N * M]
    H = np.empty((N, M), dtype=np.result_type(tokens.dtype, np.complex64))
    H.real = flat[0].reshape((N, M), order="F")
    H.imag = flat[1].reshape((N, M), order="F")
    return H


def build_mask_set(n_tokens, ratio, rng):
    """Mask ``ceil(ratio * T/2)`` real tokens together with their imaginary partners."""
    if n_tokens < 2 or n_tokens % 2:
        raise ValueError(f"token count must be even and positive, got {n_tokens}")
    if not 0 < ratio < 1:
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    half = n_tokens // 2
    n_pairs = math.ceil(ratio * half)
    if n_pairs < 1:
        raise ValueError("mask ratio selects no tokens")
    chosen = rng.choice(half, size=n_pairs, replace=False)
    indices = np.sort(np.concatenate([chosen, chosen + half]))
    policies = rng.choice(3, size=len(indices), p=POLICY_PROBS)
    return MaskSet(indices, policies, n_tokens)


def apply_masking(ts, mask, rng):
    tokens = ts.tokens.copy()
    for idx, policy in zip(mask.indices, mask.policies):
        if policy == POLICY_ONES:
            tokens[idx] = 1.0
        elif policy == POLICY_GAUSSIAN:
            tokens[idx] = rng.standard_normal(ts.token_len)
    return replace(ts, tokens=tokens)


def normalize_channel(H):
    """Scale ``H`` to unit mean power per coefficient; returns ``(H / scale, scale)``."""
    H = np.asarray(H)
    power = float(np.mean(np.abs(H) ** 2))
    if power == 0.0:
        raise ValueError("cannot normalize an all-zero channel")
    scale = math.sqrt(power)
    return H / scale, scale
