"""Command-line entry points.

Six subcommands cover the full workflow: `phantom` writes a synthetic
corpus, `split` freezes a patient-level split to manifests, `train` fits
one method, `eval` scores a finished run on the held-out split, and
`compare` / `fewshot` drive the multi-method experiment grids from a YAML
config. Every flag can instead be supplied from a config file; explicit
flags win over config values.
"""

from __future__ import annotations

from pathlib import Path

import click

from .baselines import ARCHITECTURES
from .backbone import VARIANT_NAMES
from .data import (
    DEFAULT_IMAGE_GLOB,
    DEFAULT_LABEL_GLOB,
    DatasetSplit,
    PhantomSpec,
    discover_pairs,
    generate_phantom,
    load_corpus,
    split_patients,
)
from .evaluation import write_report_csv
from .experiments import (
    evaluate_model,
    load_experiment_config,
    method_name,
    method_spec,
    restore_run,
    run_fewshot,
    run_full_comparison,
    spec_from_config,
    train_method,
)
from .training import default_config


def _parse_size(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise click.BadParameter(f"expected HxWxS, got {text!r}")
    try:
        h, w, s = (int(p) for p in parts)
    except ValueError:
        raise click.BadParameter(f"expected integers in HxWxS, got {text!r}")
    return h, w, s


def _config_section(config_path, section: str) -> dict:
    if config_path is None:
        return {}
    cfg = load_experiment_config(config_path)
    value = cfg.get(section, {})
    if not isinstance(value, dict):
        raise click.BadParameter(f"config section {section!r} must be a mapping")
    return value


def _pick(flag, config: dict, key: str, default=None):
    """Precedence: explicit flag > config file > default."""
    if flag is not None:
        return flag
    if key in config and config[key] is not None:
        return config[key]
    return default


@click.group()
def main():
    """Left-atrium segmentation workbench: frozen-ViT probing against
    trained-from-scratch CNN baselines."""


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--n", "n_volumes", required=True, type=int, help="Number of volumes.")
@click.option("--size", default="64x64x8", show_default=True,
              help="Volume shape as HxWxS.")
@click.option("--noise", default=0.05, show_default=True, type=float,
              help="Additive Gaussian noise sigma.")
@click.option("--seed", default=0, show_default=True, type=int)
def phantom(out_dir, n_volumes, size, noise, seed):
    """Generate a synthetic blood-pool phantom corpus."""
    h, w, s = _parse_size(size)
    spec = PhantomSpec(
        n_volumes=n_volumes, height=h, width=w, n_slices=s,
        noise_sigma=noise, seed=seed,
    )
    volumes = generate_phantom(spec, out_dir)
    click.echo(f"wrote {len(volumes)} volumes ({size}) to {out_dir}")


@main.command()
@click.option("--data", "data_dir", required=True, type=click.Path(path_type=Path))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--image-glob", default=DEFAULT_IMAGE_GLOB, show_default=True)
@click.option("--label-glob", default=DEFAULT_LABEL_GLOB, show_default=True)
def split(data_dir, seed, out_dir, image_glob, label_glob):
    """Freeze a deterministic patient-level 70/10/20 split to manifests."""
    ids = [pid for pid, _, _ in discover_pairs(data_dir, image_glob, label_glob)]
    result = split_patients(ids, seed)
    result.save(out_dir)
    click.echo(
        f"{len(result.train_ids)}/{len(result.val_ids)}/{len(result.test_ids)} "
        f"train/val/test -> {out_dir}"
    )


@main.command()
@click.option("--method", type=click.Choice(ARCHITECTURES), default=None)
@click.option("--variant", type=click.Choice(VARIANT_NAMES), default=None,
              help="Backbone variant (vit_head only).")
@click.option("--data", "data_dir", type=click.Path(path_type=Path), default=None)
@click.option("--split", "split_dir", type=click.Path(path_type=Path), default=None)
@click.option("--out", "run_dir", required=True, type=click.Path(path_type=Path))
@click.option("--lr", type=float, default=None, help="Learning rate.")
@click.option("--batch", type=int, default=None, help="Batch size.")
@click.option("--epochs", type=int, default=None, help="Epoch cap.")
@click.option("--patience", type=int, default=None, help="Early-stop patience.")
@click.option("--seed", type=int, default=None)
@click.option("--config", "config_path", type=click.Path(path_type=Path),
              default=None, help="YAML config supplying any of the flags.")
@click.option("--input-size", type=int, default=None,
              help="Square input resolution (desk-scale runs).")
@click.option("--base-channels", type=int, default=None,
              help="UNet width (desk-scale runs).")
@click.option("--head-channels", type=int, default=None,
              help="ViT head width (desk-scale runs).")
@click.option("--vit-normalize", type=click.Choice(["imagenet", "zscore"]),
              default=None, help="ViT input normalization.")
@click.option("--pad-to", type=int, default=None,
              help="Baseline pad target; defaults to the corpus max side.")
def train(method, variant, data_dir, split_dir, run_dir, lr, batch, epochs,
          patience, seed, config_path, input_size, base_channels,
          head_channels, vit_normalize, pad_to):
    """Train one method on a frozen split and save the run directory."""
    method_cfg = _config_section(config_path, "method")
    train_cfg = _config_section(config_path, "train")
    data_cfg = _config_section(config_path, "data")

    architecture = _pick(method, method_cfg, "architecture")
    if architecture is None:
        raise click.UsageError("--method is required (flag or config)")
    data_dir = _pick(data_dir, data_cfg, "root")
    if data_dir is None:
        raise click.UsageError("--data is required (flag or config)")
    split_dir = _pick(split_dir, data_cfg, "split")
    if split_dir is None:
        raise click.UsageError("--split is required (flag or config)")

    entry = {"architecture": architecture}
    for key, value in (
        ("variant", _pick(variant, method_cfg, "variant")),
        ("input_size", _pick(input_size, method_cfg, "input_size")),
        ("base_channels", _pick(base_channels, method_cfg, "base_channels")),
        ("head_channels", _pick(head_channels, method_cfg, "head_channels")),
        ("vit_normalize", _pick(vit_normalize, method_cfg, "vit_normalize")),
        ("embed_dim", method_cfg.get("embed_dim")),
        ("depth", method_cfg.get("depth")),
        ("n_heads", method_cfg.get("n_heads")),
    ):
        if value is not None:
            entry[key] = value
    method_spec(entry)  # validate eagerly, before any data loads

    overrides = {}
    for key, value in (
        ("learning_rate", _pick(lr, train_cfg, "learning_rate")),
        ("batch_size", _pick(batch, train_cfg, "batch_size")),
        ("max_epochs", _pick(epochs, train_cfg, "max_epochs")),
        ("patience", _pick(patience, train_cfg, "patience")),
        ("seed", _pick(seed, train_cfg, "seed")),
    ):
        if value is not None:
            overrides[key] = value
    cfg = default_config(architecture, **overrides)

    volumes_by_id = _load_corpus_map_from(data_dir, data_cfg)
    manifest = DatasetSplit.load(split_dir)
    pad = _pick(pad_to, data_cfg, "pad_to")
    pad = int(pad) if pad else max(
        max(v.shape[0], v.shape[1]) for v in volumes_by_id.values()
    )

    _, ckpt = train_method(entry, volumes_by_id, manifest, cfg, run_dir, pad)
    click.echo(
        f"best epoch {ckpt.best_epoch}: "
        f"{cfg.early_stop_metric}={ckpt.best_val_metric:.4f} -> {run_dir}"
    )


def _load_corpus_map_from(data_dir, data_cfg: dict) -> dict:
    image_glob = data_cfg.get("image_glob", DEFAULT_IMAGE_GLOB)
    label_glob = data_cfg.get("label_glob", DEFAULT_LABEL_GLOB)
    volumes = load_corpus(data_dir, image_glob, label_glob)
    if not volumes:
        raise click.UsageError(f"no image/label pairs under {data_dir}")
    return {v.patient_id: v for v in volumes}


@main.command("eval")
@click.option("--run", "run_dir", required=True, type=click.Path(path_type=Path))
@click.option("--data", "data_dir", required=True, type=click.Path(path_type=Path))
@click.option("--split", "split_dir", required=True, type=click.Path(path_type=Path))
@click.option("--out", "report_path", required=True, type=click.Path(path_type=Path))
@click.option("--overlays", "overlays_dir", type=click.Path(path_type=Path),
              default=None, help="Also write <patient>_<slice>.png overlays here.")
@click.option("--image-glob", default=DEFAULT_IMAGE_GLOB, show_default=True)
@click.option("--label-glob", default=DEFAULT_LABEL_GLOB, show_default=True)
def eval_cmd(run_dir, data_dir, split_dir, report_path, overlays_dir,
             image_glob, label_glob):
    """Score a finished run on the held-out test split."""
    entry, method, model, pad_to = restore_run(run_dir)
    volumes_by_id = _load_corpus_map_from(
        data_dir, {"image_glob": image_glob, "label_glob": label_glob}
    )
    manifest = DatasetSplit.load(split_dir)
    report = evaluate_model(
        model, method, volumes_by_id, manifest.test_ids, pad_to,
        name=method_name(entry), overlays_dir=overlays_dir,
    )
    write_report_csv(report, report_path)
    click.echo(
        f"{report.method}: dice {report.dice_mean:.4f} +/- {report.dice_sd:.4f}, "
        f"iou {report.iou_mean:.4f} +/- {report.iou_sd:.4f} "
        f"({len(report.per_patient)} patients) -> {report_path}"
    )


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
def compare(config_path, out_dir):
    """Run the full method comparison described by a YAML config."""
    spec = spec_from_config(load_experiment_config(config_path))
    result = run_full_comparison(spec, out_dir)
    for (name, _value, seed), report in sorted(result.cells.items()):
        click.echo(
            f"{name} (seed {seed}): dice {report.dice_mean:.4f} "
            f"+/- {report.dice_sd:.4f}"
        )
    for key, msg in sorted(result.errors.items(), key=lambda kv: str(kv[0])):
        click.echo(f"FAILED {key}: {msg}", err=True)
    click.echo(f"wrote {out_dir}/compare.csv")
    if result.errors:
        raise SystemExit(1)


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
def fewshot(config_path, out_dir):
    """Run a few-shot sweep (slice fractions or patient counts)."""
    spec = spec_from_config(load_experiment_config(config_path))
    result = run_fewshot(spec, out_dir)
    for (name, value, seed), report in sorted(
        result.cells.items(), key=lambda kv: (kv[0][0], float(kv[0][1]), kv[0][2])
    ):
        click.echo(
            f"{name} @ {value} (seed {seed}): dice {report.dice_mean:.4f} "
            f"+/- {report.dice_sd:.4f}"
        )
    for key, msg in sorted(result.errors.items(), key=lambda kv: str(kv[0])):
        click.echo(f"FAILED {key}: {msg}", err=True)
    click.echo(f"wrote {out_dir}/fewshot.csv")
    if result.errors:
        raise SystemExit(1)


if __name__ == "__main__":
    main()
