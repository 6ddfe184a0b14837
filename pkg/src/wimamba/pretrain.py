"""Masked-token pretraining: linear decoder, reconstruction loss, Adam with
warmup + cosine schedule, and the epoch loop with CSV logging and resume."""
import csv
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone import WiMambaModel, forward_tokens
from .errors import ConfigurationError
from .numerics.module import Module, uniform_fan_in
from .numerics.tensor import as_tensor, default_dtype, linear, mul, no_grad, square, sub, take_rows, tsum
from .tokenizer import apply_masking, build_mask_set, normalize_channel, tokenize

LOG_FIELDS = ["epoch", "step", "train_loss", "val_loss", "lr", "wall_ms"]


@dataclass
class PretrainConfig:
    epochs: int = 100
    batch_size: int = 32
    mask_ratio: float = 0.15
    lr: float = 1e-3
    lr_min: float = 1e-5
    warmup_frac: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    val_frac: float = 0.1
    seed: int = 0
    token_lens: tuple = None  # None: every granularity the model was built with

    def __post_init__(self):
        if self.token_lens is not None:
            self.token_lens = tuple(int(L) for L in self.token_lens)
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0 or self.lr_min < 0:
            raise ConfigurationError(f"epochs, batch size and learning rates must be positive: {self}")
        if not 0 < self.mask_ratio < 1:
            raise ConfigurationError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if not 0 <= self.warmup_frac < 1 or not 0 <= self.val_frac < 1:
            raise ConfigurationError("warmup_frac and val_frac must lie in [0, 1)")

    def to_dict(self):
        d = asdict(self)
        d["token_lens"] = None if self.token_lens is None else list(self.token_lens)
        return d


class Decoder(Module):
    """One bias-free ``L x D`` map per granularity, used only while pretraining."""

    def __init__(self, token_lens, d_model, seed=0, dtype="float32"):
        rng = np.random.default_rng([seed, 1])
        with default_dtype(np.dtype(dtype)):
            self.weight = {str(L): uniform_fan_in(rng, (L, d_model), d_model) for L in token_lens}

    def __call__(self, x, token_len):
        return linear(x, self.weight[str(token_len)])


def pretrain_loss(model, decoder, ts_original, ts_masked, mask):
    """Sum of squared reconstruction errors over masked tokens, divided by their count."""
    if len(mask) == 0:
        raise ValueError("pretraining loss needs at least one masked token")
    if ts_masked.tokens.shape != ts_original.tokens.shape:
        raise ValueError("masked and original sequences differ in shape")
    out = forward_tokens(model, ts_masked)
    # row 0 holds the class token
    recon = decoder(take_rows(out, mask.indices + 1), ts_original.token_len)
    target = as_tensor(ts_original.tokens[mask.indices].astype(recon.dtype))
    return mul(tsum(square(sub(recon, target))), 1.0 / len(mask))


def lr_at(step, total_steps, cfg):
    """Linear warmup over ``warmup_frac`` of the run, then cosine decay to ``lr_min``."""
    warmup = max(1, round(cfg.warmup_frac * total_steps)) if cfg.warmup_frac > 0 else 0
    if step < warmup:
        return cfg.lr * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1 + math.cos(math.pi * progress))


class Adam:
    """Adaptive moment estimation over a fixed list of named parameters."""

    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)

    def state_dict(self):
        return {"t": self.t, "m": dict(self.m), "v": dict(self.v)}

    def load_state_dict(self, state):
        self.t = int(state["t"])
        for k in self.params:
            self.m[k] = np.array(state["m"][k], dtype=self.params[k].dtype)
            self.v[k] = np.array(state["v"][k], dtype=self.params[k].dtype)


def trainable_parameters(model, decoder):
    return [("model." + n, p) for n, p in model.named_parameters()] + [
        ("decoder." + n, p) for n, p in decoder.named_parameters()
    ]


def _channel(item):
    return item.H if hasattr(item, "H") else np.asarray(item)


def sample_granularity(token_lens, rng):
    return token_lens[int(rng.integers(len(token_lens)))]


def prepare_sample(H, token_lens, mask_ratio, rng):
    """Draw a granularity, normalize, tokenize and mask one channel."""
    L = sample_granularity(token_lens, rng)
    Hn, _ = normalize_channel(H)
    ts = tokenize(Hn, L)
    mask = build_mask_set(ts.n_tokens, mask_ratio, rng)
    return ts, apply_masking(ts, mask, rng), mask


def _token_lens(model, cfg):
    lens = cfg.token_lens or model.token_lens
    unknown = set(lens) - set(model.token_lens)
    if unknown:
        raise ConfigurationError(f"token lengths {sorted(unknown)} not in model {list(model.token_lens)}")
    return tuple(lens)


def pretrain_step(model, decoder, batch, cfg, rng, optimizer, lr=None):
    """One optimizer update on the mean masked-reconstruction loss of ``batch``."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    lens = _token_lens(model, cfg)
    optimizer.zero_grad()
    total = 0.0
    for item in batch:
        ts, ts_masked, mask = prepare_sample(_channel(item), lens, cfg.mask_ratio, rng)
        loss = mul(pretrain_loss(model, decoder, ts, ts_masked, mask), 1.0 / len(batch))
        loss.backward()
        total += loss.item()
    optimizer.step(cfg.lr if lr is None else lr)
    return total


def validation_loss(model, decoder, samples, cfg):
    """Mean loss over ``samples`` with masks drawn from a fixed stream."""
    if not samples:
        return float("nan")
    rng = np.random.default_rng([cfg.seed, 2])
    lens = _token_lens(model, cfg)
    with no_grad():
        losses = [
            pretrain_loss(model, decoder, *prepare_sample(_channel(s), lens, cfg.mask_ratio, rng)).item()
            for s in samples
        ]
    return float(np.mean(losses))


def split_dataset(n, val_frac, seed):
    order = np.random.default_rng([seed, 3]).permutation(n)
    n_val = int(round(val_frac * n)) if n > 1 else 0
    n_val = min(n_val, n - 1)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


@dataclass
class PretrainState:
    model: WiMambaModel
    decoder: Decoder
    optimizer: Adam
    epoch: int = 0  # epochs completed
    step: int = 0
    records: list = field(default_factory=list)


def new_state(model, cfg):
    decoder = Decoder(model.token_lens, model.config.d_model, model.config.seed, model.config.dtype)
    opt = Adam(trainable_parameters(model, decoder), cfg.beta1, cfg.beta2, cfg.adam_eps)
    return PretrainState(model, decoder, opt)


def pretrain_run(dataset, cfg, model=None, state=None, log_path=None, checkpoint_path=None, on_epoch=None):
    """Run (or continue) pretraining for ``cfg.epochs`` epochs.

    Each epoch draws its shuffle and masks from a stream seeded by
    ``(seed, epoch)``, so a run resumed from an epoch-boundary checkpoint
    replays exactly what an uninterrupted run would have done.
    Returns the final :class:`PretrainState`.
    """
    from . import io

    if len(dataset) == 0:
        raise ValueError("pretraining dataset is empty")
    if state is None:
        state = new_state(model or WiMambaModel(), cfg)
    train_idx, val_idx = split_dataset(len(dataset), cfg.val_frac, cfg.seed)
    val = [dataset[i] for i in val_idx]
    n_batches = math.ceil(len(train_idx) / cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    records = state.records
    log = None
    if log_path is not None:
        fresh = not state.epoch or not os.path.exists(log_path) or os.path.getsize(log_path) == 0
        try:
            log = open(log_path, "w" if fresh else "a", newline="")
        except OSError as exc:
            raise OSError(f"cannot open training log {log_path}: {exc}") from exc
        writer = csv.DictWriter(log, fieldnames=LOG_FIELDS)
        if fresh:
            writer.writeheader()
    try:
        while state.epoch < cfg.epochs:
            rng = np.random.default_rng([cfg.seed, 0, state.epoch])
            order = train_idx[rng.permutation(len(train_idx))]
            start = time.perf_counter()
            losses = []
            for b in range(n_batches):
                batch = [dataset[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
                lr = lr_at(state.step, total_steps, cfg)
                losses.append(pretrain_step(state.model, state.decoder, batch, cfg, rng, state.optimizer, lr))
                state.step += 1
            state.epoch += 1
            row = {
                "epoch": state.epoch,
                "step": state.step,
                "train_loss": float(np.mean(losses)),
                "val_loss": validation_loss(state.model, state.decoder, val, cfg),
                "lr": lr,
                "wall_ms": (time.perf_counter() - start) * 1e3,
            }
            records.append(row)
            if log is not None:
                writer.writerow(row)
                log.flush()
            if checkpoint_path is not None:
                io.save_pretrain_state(checkpoint_path, state, cfg)
            if on_epoch is not None:
                on_epoch(state, row)
    finally:
        if log is not None:
            log.close()
    return state
