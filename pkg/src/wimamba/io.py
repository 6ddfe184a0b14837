"""Binary dataset files and model checkpoints.

Dataset layout (little-endian)::

    header  magic "WMC1" | version u16 | count u32 | N u16 | M u16 | flags u8
    sample  N*M f32 real part, N*M f32 imaginary part (both column-major),
            then, when flagged: los u8, beam u16, position 2 x f32

Checkpoints are ``.npz`` archives of named float arrays plus a JSON metadata
record holding the model configuration and its fingerprint.
"""
import hashlib
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .backbone import ModelConfig, WiMambaModel
from .errors import ConfigurationError
from .tasks.channels import ChannelSample

MAGIC = b"WMC1"
DATASET_VERSION = 1
HEADER = struct.Struct("<4sHIHHB")
FLAG_LOS, FLAG_BEAM, FLAG_POSITION = 1, 2, 4
ALL_LABELS = FLAG_LOS | FLAG_BEAM | FLAG_POSITION
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


def sample_dtype(n_antennas, n_subcarriers, flags):
    fields = [("re", "<f4", (n_antennas * n_subcarriers,)), ("im", "<f4", (n_antennas * n_subcarriers,))]
    if flags & FLAG_LOS:
        fields.append(("los", "u1"))
    if flags & FLAG_BEAM:
        fields.append(("beam", "<u2"))
    if flags & FLAG_POSITION:
        fields.append(("pos", "<f4", (2,)))
    return np.dtype(fields)  # unaligned: itemsize is the plain sum of field sizes


def dataset_nbytes(count, n_antennas, n_subcarriers, flags=ALL_LABELS):
    return HEADER.size + count * sample_dtype(n_antennas, n_subcarriers, flags).itemsize


def write_dataset(path, samples, flags=ALL_LABELS):
    """Serialize ``ChannelSample`` objects; channels are stored as 32-bit floats."""
    if not samples:
        raise ValueError("refusing to write an empty dataset")
    N, M = np.asarray(samples[0].H).shape
    if N > 0xFFFF or M > 0xFFFF:
        raise ValueError(f"channel dimensions {N}x{M} exceed the u16 header fields")
    rec = np.zeros(len(samples), dtype=sample_dtype(N, M, flags))
    for i, s in enumerate(samples):
        H = np.asarray(s.H)
        if H.shape != (N, M):
            raise ValueError(f"sample {i} has shape {H.shape}, expected {(N, M)}")
        rec["re"][i] = np.real(H).ravel(order="F")
        rec["im"][i] = np.imag(H).ravel(order="F")
        if flags & FLAG_LOS:
            rec["los"][i] = bool(s.los)
        if flags & FLAG_BEAM:
            rec["beam"][i] = s.beam_index
        if flags & FLAG_POSITION:
            rec["pos"][i] = s.position
    try:
        with open(path, "wb") as fh:
            fh.write(HEADER.pack(MAGIC, DATASET_VERSION, len(samples), N, M, flags))
            fh.write(rec.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write dataset {path}: {exc}") from exc


def read_header(fh, path):
    raw = fh.read(HEADER.size)
    if len(raw) < HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, count, N, M, flags = HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    if flags & ~ALL_LABELS:
        raise FormatError(f"{path}: unknown label flags {flags:#x}")
    return count, N, M, flags


def read_dataset(path):
    """Load every sample; absent labels come back as ``None``."""
    try:
        size = os.path.getsize(path)
        with open(path, "rb") as fh:
            count, N, M, flags = read_header(fh, path)
            expected = dataset_nbytes(count, N, M, flags)
            if size != expected:
                raise FormatError(f"{path}: {size} bytes on disk, header implies {expected}")
            rec = np.frombuffer(fh.read(), dtype=sample_dtype(N, M, flags), count=count)
    except OSError as exc:
        raise OSError(f"cannot read dataset {path}: {exc}") from exc
    samples = []
    for r in rec:
        H = np.empty((N, M), dtype=np.complex64)
        H.real = r["re"].reshape((N, M), order="F")
        H.imag = r["im"].reshape((N, M), order="F")
        samples.append(ChannelSample(
            H=H,
            los=bool(r["los"]) if flags & FLAG_LOS else None,
            beam_index=int(r["beam"]) if flags & FLAG_BEAM else None,
            position=tuple(float(v) for v in r["pos"]) if flags & FLAG_POSITION else None,
        ))
    return samples


# ---------------------------------------------------------------- checkpoints

def config_fingerprint(config_dict):
    blob = json.dumps(config_dict, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Checkpoint:
    model: WiMambaModel
    meta: dict
    decoder_state: dict = None
    optimizer_state: dict = None


def save_checkpoint(path, model, decoder=None, optimizer=None, extra=None):
    config = model.config.to_dict()
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": config,
        "fingerprint": config_fingerprint(config),
        **(extra or {}),
    }
    arrays = {f"param/{n}": p.data for n, p in model.named_parameters()}
    if decoder is not None:
        arrays.update({f"decoder/{n}": p.data for n, p in decoder.named_parameters()})
    if optimizer is not None:
        st = optimizer.state_dict()
        meta["optimizer_t"] = st["t"]
        arrays.update({f"adam_m/{k}": v for k, v in st["m"].items()})
        arrays.update({f"adam_v/{k}": v for k, v in st["v"].items()})
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    try:
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    if "meta" not in arrays:
        raise FormatError(f"{path}: not a checkpoint (no metadata)")
    meta = json.loads(arrays.pop("meta").tobytes().decode())
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
    config = meta["model_config"]
    if config_fingerprint(config) != meta["fingerprint"]:
        raise FormatError(f"{path}: configuration fingerprint mismatch")
    model = WiMambaModel(ModelConfig(**config))
    model.load_state_dict(_group(arrays, "param/"))
    decoder = _group(arrays, "decoder/") or None
    opt = None
    if "optimizer_t" in meta:
        opt = {"t": meta["optimizer_t"], "m": _group(arrays, "adam_m/"), "v": _group(arrays, "adam_v/")}
    return Checkpoint(model, meta, decoder, opt)


def _group(arrays, prefix):
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def save_pretrain_state(path, state, cfg):
    save_checkpoint(path, state.model, state.decoder, state.optimizer, extra={
        "pretrain_config": cfg.to_dict(),
        "epoch": state.epoch,
        "step": state.step,
    })


def load_pretrain_state(path, cfg=None):
    """Rebuild a :class:`~wimamba.pretrain.PretrainState` for resuming."""
    from .pretrain import PretrainConfig, new_state

    ckpt = load_checkpoint(path)
    if ckpt.decoder_state is None or ckpt.optimizer_state is None:
        raise ConfigurationError(f"{path} holds no decoder/optimizer state to resume from")
    cfg = cfg or PretrainConfig(**ckpt.meta["pretrain_config"])
    state = new_state(ckpt.model, cfg)
    state.decoder.load_state_dict(ckpt.decoder_state)
    state.optimizer.load_state_dict(ckpt.optimizer_state)
    state.epoch = int(ckpt.meta["epoch"])
    state.step = int(ckpt.meta["step"])
    return state, cfg
