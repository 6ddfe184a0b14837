"""``wimamba`` command line: generate, pretrain, task, bench."""
import csv
import json
import os
import sys

import click
import numpy as np

from . import io
from .backbone import ModelConfig, WiMambaModel
from .bench import CSV_FIELDS, PATCHES, build_models, scaling_report, write_report
from .errors import ConfigurationError
from .pretrain import PretrainConfig, new_state, pretrain_run
from .tasks.channels import SceneConfig, generate_sample
from .tasks.heads import TASKS, HeadConfig, evaluate_task, make_head, task_features, train_head

METRIC_FIELDS = ["task", "n_train", "metric_name", "value", "seed"]


def _int_list(text):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {text!r}") from None


def write_resolved_config(out_path, command, config):
    path = f"{out_path}.config.json"
    with open(path, "w") as fh:
        json.dump({"command": command, **config}, fh, indent=2, sort_keys=True)
    return path


def _fail(exc):
    click.echo(f"error: {exc}", err=True)
    sys.exit(1)


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Channel foundation model tools."""


@main.command()
@click.option("--count", type=int, required=True, help="Number of samples.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--antennas", type=int, default=16, show_default=True)
@click.option("--subcarriers", type=int, default=16, show_default=True)
@click.option("--spacing", type=float, default=0.12, show_default=True, help="Subcarrier spacing in MHz.")
@click.option("--paths", type=int, default=8, show_default=True, help="Maximum propagation paths.")
@click.option("--los-prob", type=float, default=0.5, show_default=True)
@click.option("--reflection-loss", type=float, default=0.3, show_default=True)
@click.option("--noise", type=float, default=0.0, show_default=True, help="Noise power per coefficient.")
@click.option("--seed", type=int, default=0, show_default=True)
def generate(count, out_path, antennas, subcarriers, spacing, paths, los_prob, reflection_loss, noise, seed):
    """Write a synthetic channel dataset."""
    if count < 1:
        raise click.UsageError("--count must be at least 1")
    try:
        scene = SceneConfig(n_antennas=antennas, n_subcarriers=subcarriers, subcarrier_spacing=spacing,
                            max_paths=paths, los_probability=los_prob, reflection_loss=reflection_loss,
                            noise_power=noise, seed=seed)
        rng = np.random.default_rng(seed)
        samples = [generate_sample(scene, rng) for _ in range(count)]
        io.write_dataset(out_path, samples)
    except (ConfigurationError, OSError, ValueError) as exc:
        _fail(exc)
    write_resolved_config(out_path, "generate", {"count": count, "scene": scene.to_dict()})
    los = np.mean([s.los for s in samples])
    click.echo(f"wrote {count} samples of {antennas}x{subcarriers} to {out_path} (LOS ratio {los:.3f})")


@main.command()
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True, help="Checkpoint file.")
@click.option("--log", "log_path", type=click.Path(dir_okay=False), default=None, help="Loss CSV [<out>.log.csv].")
@click.option("--epochs", type=int, default=100, show_default=True)
@click.option("--batch-size", type=int, default=32, show_default=True)
@click.option("--mask-ratio", type=float, default=0.15, show_default=True)
@click.option("--lr", type=float, default=1e-3, show_default=True)
@click.option("--d-model", type=int, default=128, show_default=True)
@click.option("--layers", type=int, default=12, show_default=True)
@click.option("--expand", type=int, default=3, show_default=True)
@click.option("--token-lens", default="16,64", show_default=True, help="Granularities, comma-separated.")
@click.option("--resume", "resume_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--seed", type=int, default=0, show_default=True)
def pretrain(data_path, out_path, log_path, epochs, batch_size, mask_ratio, lr, d_model, layers, expand,
             token_lens, resume_path, seed):
    """Masked-reconstruction pretraining of the backbone."""
    log_path = log_path or f"{out_path}.log.csv"
    try:
        samples = io.read_dataset(data_path)
        cfg = PretrainConfig(epochs=epochs, batch_size=batch_size, mask_ratio=mask_ratio, lr=lr, seed=seed)
        if resume_path:
            state, _ = io.load_pretrain_state(resume_path, cfg)
            model_cfg = state.model.config
        else:
            model_cfg = ModelConfig(token_lens=_int_list(token_lens), d_model=d_model, n_layers=layers,
                                    expand=expand, seed=seed)
            state = new_state(WiMambaModel(model_cfg), cfg)
        write_resolved_config(out_path, "pretrain", {
            "data": os.path.abspath(data_path), "model": model_cfg.to_dict(), "pretrain": cfg.to_dict(),
            "log": os.path.abspath(log_path), "resume": resume_path,
        })
        state = pretrain_run(samples, cfg, state=state, log_path=log_path, checkpoint_path=out_path)
    except (ConfigurationError, io.FormatError, OSError, ValueError) as exc:
        _fail(exc)
    last = state.records[-1] if state.records else None
    if last:
        click.echo(f"epoch {last['epoch']}: train {last['train_loss']:.4f} val {last['val_loss']:.4f}")
    click.echo(f"checkpoint written to {out_path}")


@main.command()
@click.option("--task", "task_id", type=click.Choice(TASKS), required=True)
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--checkpoint", "ckpt_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--n-train", type=int, required=True, help="Labelled samples used for training.")
@click.option("--n-test", type=int, default=None, help="Held-out samples [all remaining].")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True, help="Metrics CSV (appended).")
@click.option("--raw", is_flag=True, help="Feed normalized raw channels instead of backbone features.")
@click.option("--representation", type=click.Choice(["class", "mean", "flatten"]), default=None)
@click.option("--token-len", type=int, default=None, help="Granularity [first of the checkpoint, else 16].")
@click.option("--steps", type=int, default=500, show_default=True)
@click.option("--keep-fraction", type=float, default=0.5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def task(task_id, data_path, ckpt_path, n_train, n_test, out_path, raw, representation, token_len, steps,
         keep_fraction, seed):
    """Train a head on frozen features and append its test metric."""
    if ckpt_path is None and not raw:
        raise click.UsageError("--checkpoint is required unless --raw is given")
    if task_id == "interp" and representation is not None:
        raise click.UsageError("the interpolation head always uses per-patch embeddings")
    try:
        samples = io.read_dataset(data_path)
        if n_train < 1 or n_train >= len(samples):
            raise ConfigurationError(f"--n-train must lie in [1, {len(samples) - 1}] for this dataset")
        model = None if raw else io.load_checkpoint(ckpt_path).model
        L = token_len or (model.token_lens[0] if model is not None else 16)
        cfg = HeadConfig(steps=steps, keep_fraction=keep_fraction, representation=representation, raw=raw, seed=seed)
        order = np.random.default_rng([seed, 7]).permutation(len(samples))
        train = [samples[i] for i in order[:n_train]]
        test_idx = order[n_train:] if n_test is None else order[n_train:n_train + n_test]
        test = [samples[i] for i in test_idx]
        probe, _, _ = task_features(model, train[:1], task_id, cfg, L)
        head = make_head(task_id, probe, cfg, token_len=L)
        train_head(head, model, train, cfg, L)
        metrics = evaluate_task(head, model, test, cfg, L)
    except (ConfigurationError, io.FormatError, OSError, ValueError) as exc:
        _fail(exc)
    write_resolved_config(out_path, "task", {
        "task": task_id, "data": os.path.abspath(data_path),
        "checkpoint": None if ckpt_path is None else os.path.abspath(ckpt_path),
        "n_train": n_train, "n_test": len(test), "token_len": L, "head": cfg.to_dict(),
    })
    new_file = not os.path.exists(out_path) or os.path.getsize(out_path) == 0
    with open(out_path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        if new_file:
            writer.writeheader()
        for name, value in metrics.items():
            writer.writerow({"task": task_id, "n_train": n_train, "metric_name": name, "value": value, "seed": seed})
            click.echo(f"{task_id} n_train={n_train} {name}={value:.6g}")


@main.command()
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--antennas", type=int, default=32, show_default=True)
@click.option("--subcarriers", type=int, default=32, show_default=True)
@click.option("--patch", "patches", default="16,36,64", show_default=True,
              help="Token lengths (16=4x4, 36=6x6, 64=8x8), comma-separated.")
@click.option("--arch", "archs", type=click.Choice(["mamba", "transformer"]), multiple=True,
              help="Architectures [both].")
@click.option("--reps", type=int, default=20, show_default=True)
@click.option("--warmup", type=int, default=3, show_default=True)
@click.option("--d-model", type=int, default=128, show_default=True)
@click.option("--layers", type=int, default=12, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def bench(out_path, antennas, subcarriers, patches, archs, reps, warmup, d_model, layers, seed):
    """Latency, peak memory and MAC count of both encoders across patch sizes."""
    archs = archs or ("mamba", "transformer")
    lens = _int_list(patches)
    if reps < 20 or warmup < 3:
        raise click.UsageError("benchmarks need --reps >= 20 and --warmup >= 3")
    rng = np.random.default_rng(seed)
    H = rng.standard_normal((antennas, subcarriers)) + 1j * rng.standard_normal((antennas, subcarriers))
    try:
        models = build_models(archs, lens, d_model, layers, seed)
        rows = scaling_report(H, lens, archs, reps, warmup, d_model, layers, seed, models=models)
        write_report(rows, out_path)
    except (ConfigurationError, OSError, ValueError) as exc:
        _fail(exc)
    write_resolved_config(out_path, "bench", {
        "antennas": antennas, "subcarriers": subcarriers, "token_lens": list(lens),
        "patches": [PATCHES.get(L, f"L{L}") for L in lens], "archs": list(archs), "reps": reps,
        "warmup": warmup, "d_model": d_model, "layers": layers, "seed": seed, "columns": CSV_FIELDS,
    })
    for r in rows:
        click.echo(f"{r.arch:12s} {r.patch:5s} T={r.T:4d} median {r.lat_med_ms:8.2f} ms  "
                   f"p90 {r.lat_p90_ms:8.2f} ms  peak {r.peak_bytes:>10d} B  macs {r.macs}")


if __name__ == "__main__":
    main()
