"""Geometric multipath channels for a uniform linear array with OFDM
subcarriers, together with the labels the downstream heads learn."""
import math
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigurationError

SPEED_OF_LIGHT = 299.792458  # metres per microsecond
N_BEAMS = 64


@dataclass
class SceneConfig:
    """Scene geometry. Delays are in microseconds and spacing in MHz so their product is cycles."""

    n_antennas: int = 16
    n_subcarriers: int = 16
    subcarrier_spacing: float = 0.12
    max_paths: int = 8
    los_probability: float = 0.5
    x_range: tuple = (20.0, 100.0)  # metres; the array sits at the origin facing +x
    y_range: tuple = (-60.0, 60.0)
    noise_power: float = 0.0
    reflection_loss: float = 0.3
    seed: int = 0

    def __post_init__(self):
        self.x_range = tuple(float(v) for v in self.x_range)
        self.y_range = tuple(float(v) for v in self.y_range)
        if min(self.n_antennas, self.n_subcarriers, self.max_paths) < 1:
            raise ConfigurationError("antennas, subcarriers and paths must be at least 1")
        if not 0 <= self.los_probability <= 1 or not 0 <= self.reflection_loss <= 1:
            raise ConfigurationError("probabilities and losses must lie in [0, 1]")
        if self.noise_power < 0 or self.subcarrier_spacing <= 0:
            raise ConfigurationError("noise power must be >= 0 and spacing > 0")
        if self.x_range[0] <= 0 or self.x_range[0] >= self.x_range[1] or self.y_range[0] >= self.y_range[1]:
            raise ConfigurationError("area bounds must be increasing with x > 0")

    def to_dict(self):
        d = asdict(self)
        d["x_range"], d["y_range"] = list(self.x_range), list(self.y_range)
        return d


@dataclass
class ChannelSample:
    H: np.ndarray  # complex [N, M]
    los: bool = None
    beam_index: int = None
    position: tuple = None  # (x, y) metres


def steering_vector(n_antennas, sin_theta):
    return np.exp(-1j * np.pi * np.arange(n_antennas) * sin_theta)


def delay_response(n_subcarriers, spacing, tau):
    return np.exp(-2j * np.pi * np.arange(n_subcarriers) * spacing * tau)


def channel_from_paths(n_antennas, n_subcarriers, spacing, gains, sin_thetas, delays):
    """Sum of per-path outer products of array and frequency responses."""
    H = np.zeros((n_antennas, n_subcarriers), dtype=np.complex128)
    for a, s, tau in zip(gains, sin_thetas, delays):
        H += a * np.outer(steering_vector(n_antennas, s), delay_response(n_subcarriers, spacing, tau))
    return H


def dft_codebook(n_antennas, n_beams=N_BEAMS):
    """Columns are steering vectors at ``sin(theta_k) = -1 + 2k/n_beams``."""
    sines = -1.0 + 2.0 * np.arange(n_beams) / n_beams
    return np.stack([steering_vector(n_antennas, s) for s in sines], axis=1)


def beam_gains(H, codebook=None):
    """Received power of every beam summed over subcarriers."""
    H = np.asarray(H)
    W = dft_codebook(H.shape[0]) if codebook is None else codebook
    return np.sum(np.abs(W.conj().T @ H) ** 2, axis=1)


def beam_index_of(H, codebook=None):
    return int(np.argmax(beam_gains(H, codebook)))


def generate_sample(scene, rng):
    """Draw a user position, its propagation paths and the resulting channel and labels."""
    x = rng.uniform(*scene.x_range)
    y = rng.uniform(*scene.y_range)
    user = np.array([x, y])
    los = bool(rng.random() < scene.los_probability)
    gains, sines, delays = [], [], []
    if los:
        d = math.hypot(x, y)
        gains.append(np.exp(2j * np.pi * rng.random()) / d)
        sines.append(y / d)
        delays.append(d / SPEED_OF_LIGHT)
    n_scatter = scene.max_paths - 1 if los else scene.max_paths
    if los and scene.max_paths == 1:
        n_scatter = 0
    for _ in range(n_scatter):
        s = np.array([rng.uniform(*scene.x_range), rng.uniform(*scene.y_range)])
        d1 = float(np.hypot(*s))
        d2 = float(np.hypot(*(user - s)))
        amp = scene.reflection_loss * rng.uniform(0.5, 1.0) / (d1 + d2)
        gains.append(amp * np.exp(2j * np.pi * rng.random()))
        sines.append(s[1] / d1)
        delays.append((d1 + d2) / SPEED_OF_LIGHT)
    H = channel_from_paths(scene.n_antennas, scene.n_subcarriers, scene.subcarrier_spacing, gains, sines, delays)
    if scene.noise_power > 0:
        noise = rng.standard_normal(H.shape) + 1j * rng.standard_normal(H.shape)
        H = H + math.sqrt(scene.noise_power / 2) * noise
    return ChannelSample(H=H, los=los, beam_index=beam_index_of(H), position=(float(x), float(y)))


def generate_dataset(scene, count, seed=None):
    rng = np.random.default_rng(scene.seed if seed is None else seed)
    return [generate_sample(scene, rng) for _ in range(count)]


def interp_mask_input(H, keep_fraction, rng):
    """Zero all but a random ``keep_fraction`` of subcarrier columns; returns ``(H_obs, kept)``."""
    if not 0 < keep_fraction <= 1:
        raise ValueError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    H = np.asarray(H)
    M = H.shape[1]
    n_keep = max(1, int(round(keep_fraction * M)))
    kept = np.sort(rng.choice(M, size=n_keep, replace=False))
    out = np.zeros_like(H)
    out[:, kept] = H[:, kept]
    return out, kept
