"""Experiment orchestration: the full method comparison, the few-shot
sweeps, report/plot emission, and run-directory persistence.

Every grid cell (method x sweep value x seed) trains and evaluates in
isolation: a crashing cell records an error row and its siblings keep
running. Test patients are never touched during training; each cell
records a content hash of the test split so held-out integrity is
checkable after the fact.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from .baselines import ModelSpec, build_model
from .data import (
    DEFAULT_IMAGE_GLOB,
    DEFAULT_LABEL_GLOB,
    DatasetSplit,
    SliceSample,
    Volume,
    baseline_pred_to_native,
    extract_slices,
    load_corpus,
    preprocess_baseline,
    preprocess_vit,
    split_patients,
    subset_by_fraction,
    subset_by_patients,
    to_three_channel,
    vit_pred_to_native,
)
from .evaluation import (
    MetricReport,
    aggregate,
    binarize,
    evaluate_patient,
    postprocess_baseline,
    render_overlay,
    write_report_csv,
)
from .training import (
    TrainConfig,
    TrainedCheckpoint,
    default_config,
    load_checkpoint,
    train,
)
from .backbone import freeze, load_into, save_named_tensors

MODES = ("full", "fraction_sweep", "patient_sweep")

# default sweep grids for configs that pick a mode but no values
DEFAULT_FRACTIONS = [0.01, 0.05, 0.1, 0.25, 0.5, 1.0]
DEFAULT_PATIENT_COUNTS = [1, 10, "all"]

EVAL_BATCH = 8


@dataclass
class ExperimentSpec:
    methods: list[dict]           # each: {"name": ..., plus ModelSpec fields}
    data_root: Path
    mode: str = "full"
    values: list = field(default_factory=list)
    seeds: list[int] = field(default_factory=lambda: [0])
    split_dir: Path | None = None
    split_seed: int = 0
    pad_to: int | None = None     # None -> corpus max side
    image_glob: str = DEFAULT_IMAGE_GLOB
    label_glob: str = DEFAULT_LABEL_GLOB
    train_overrides: dict = field(default_factory=dict)
    fewshot_max_epochs: int = 10
    raw_config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.methods:
            raise ValueError("at least one method is required")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}, expected one of {MODES}")
        if not self.values:
            if self.mode == "fraction_sweep":
                self.values = list(DEFAULT_FRACTIONS)
            elif self.mode == "patient_sweep":
                self.values = list(DEFAULT_PATIENT_COUNTS)
        if self.mode == "fraction_sweep":
            for v in self.values:
                if not 0 < float(v) <= 1:
                    raise ValueError(f"fraction {v} outside (0, 1]")
        if self.mode == "patient_sweep":
            for v in self.values:
                if v != "all" and int(v) < 1:
                    raise ValueError(f"patient count {v} must be >= 1 (or 'all')")
        if not self.seeds:
            raise ValueError("at least one seed is required")


def method_name(entry: dict) -> str:
    return entry.get("name", entry["architecture"])


def method_spec(entry: dict) -> ModelSpec:
    fields = {k: v for k, v in entry.items() if k != "name"}
    return ModelSpec(**fields)


def load_experiment_config(path) -> dict:
    with open(path) as f:
        cfg = yaml.safe_load(f)
    if not isinstance(cfg, dict):
        raise ValueError(f"experiment config {path} must be a mapping")
    return cfg


def spec_from_config(cfg: dict) -> ExperimentSpec:
    data = cfg.get("data", {})
    if "root" not in data:
        raise ValueError("config must set data.root")
    return ExperimentSpec(
        methods=cfg.get("methods", []),
        data_root=Path(data["root"]),
        mode=cfg.get("mode", "full"),
        values=cfg.get("values", []),
        seeds=list(cfg.get("seeds", [0])),
        split_dir=Path(data["split"]) if data.get("split") else None,
        split_seed=int(data.get("split_seed", 0)),
        pad_to=data.get("pad_to"),
        image_glob=data.get("image_glob", DEFAULT_IMAGE_GLOB),
        label_glob=data.get("label_glob", DEFAULT_LABEL_GLOB),
        train_overrides=dict(cfg.get("train", {})),
        fewshot_max_epochs=int(cfg.get("fewshot_max_epochs", 10)),
        raw_config=cfg,
    )


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, default=str).encode()
    ).hexdigest()


def hash_test_split(volumes_by_id: dict[str, Volume], test_ids: list[str]) -> str:
    """Content hash of the held-out data; identical across cells by
    construction, and any leak of test data into training would have to
    survive this audit trail."""
    h = hashlib.sha256()
    for pid in sorted(test_ids):
        vol = volumes_by_id[pid]
        h.update(pid.encode())
        h.update(vol.voxels.tobytes())
        h.update(vol.labels.tobytes())
    return h.hexdigest()


@dataclass
class ExperimentResult:
    mode: str
    cells: dict[tuple, MetricReport] = field(default_factory=dict)
    errors: dict[tuple, str] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------


def _load_corpus_map(spec: ExperimentSpec) -> dict[str, Volume]:
    volumes = load_corpus(spec.data_root, spec.image_glob, spec.label_glob)
    return {v.patient_id: v for v in volumes}


def _resolve_split(spec: ExperimentSpec, volumes_by_id) -> DatasetSplit:
    if spec.split_dir is not None:
        split = DatasetSplit.load(spec.split_dir)
    else:
        split = split_patients(sorted(volumes_by_id), spec.split_seed)
    known = set(volumes_by_id)
    listed = set(split.train_ids) | set(split.val_ids) | set(split.test_ids)
    missing = listed - known
    if missing:
        raise ValueError(f"split names absent patients: {sorted(missing)[:5]}")
    _audit_split(split)
    return split


def _audit_split(split: DatasetSplit) -> None:
    train, val, test = map(set, (split.train_ids, split.val_ids, split.test_ids))
    overlap = (train & test) | (val & test) | (train & val)
    if overlap:
        raise ValueError(f"split sets overlap: {sorted(overlap)[:5]}")


def _slices_for(volumes_by_id, ids) -> list[SliceSample]:
    samples = []
    for pid in ids:
        samples.extend(extract_slices(volumes_by_id[pid]))
    return samples


def _corpus_pad_target(spec: ExperimentSpec, volumes_by_id) -> int:
    if spec.pad_to:
        return int(spec.pad_to)
    return max(max(v.shape[0], v.shape[1]) for v in volumes_by_id.values())


def _prepare_pairs(method: ModelSpec, samples, pad_to, backbone=None):
    """Per-slice (input, mask) training pairs for one method's path."""
    pairs = []
    for s in samples:
        if method.architecture == "vit_head":
            img, mask = preprocess_vit(
                s, size=method.input_size, normalize=method.vit_normalize
            )
            if backbone is not None:
                pairs.append((backbone.encode(img), mask))
            else:
                pairs.append((img, mask))
        else:
            img, mask = preprocess_baseline(s, target=method.input_size, pad_to=pad_to)
            if method.in_channels == 3:
                img = to_three_channel(img[0])
            pairs.append((img, mask))
    return pairs


# ---------------------------------------------------------------------------
# one cell: train + evaluate
# ---------------------------------------------------------------------------


def train_method(method_entry: dict, volumes_by_id, split: DatasetSplit,
                 cfg: TrainConfig, run_dir, pad_to: int,
                 ) -> tuple[torch.nn.Module, TrainedCheckpoint]:
    """Train one method on a split's full training set; convenience entry
    for the CLI. See _run_one_cell for the few-shot (subset) variant."""
    return _run_one_cell(
        method_entry, volumes_by_id, split,
        _slices_for(volumes_by_id, split.train_ids),
        _slices_for(volumes_by_id, split.val_ids),
        cfg, Path(run_dir), pad_to,
    )


def _run_one_cell(method_entry: dict, volumes_by_id, split: DatasetSplit,
                  train_samples, val_samples, cfg: TrainConfig, run_dir: Path,
                  pad_to: int) -> tuple[torch.nn.Module, TrainedCheckpoint]:
    method = method_spec(method_entry)
    fitted_pids = {s.patient_id for s in train_samples}
    fitted_pids |= {s.patient_id for s in val_samples}
    forbidden = fitted_pids & set(split.test_ids)
    if forbidden:
        raise RuntimeError(f"test patients leaked into training: {sorted(forbidden)[:5]}")

    run_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(method, seed=cfg.seed)
    if method.architecture == "vit_head":
        # the backbone is frozen, so each slice's token grid is computed
        # once up front and the loop trains the head alone; the gradients
        # are identical and the epochs get dramatically cheaper
        backbone = model.backbone
        train_pairs = _prepare_pairs(method, train_samples, pad_to, backbone)
        val_pairs = _prepare_pairs(method, val_samples, pad_to, backbone)
        ckpt = train(model.head, train_pairs, val_pairs, cfg, run_dir=run_dir)
        model.head.load_state_dict(ckpt.tensors)
        save_named_tensors(
            backbone, run_dir / "backbone.ckpt",
            meta={"input_size": backbone.input_size},
        )
    else:
        train_pairs = _prepare_pairs(method, train_samples, pad_to)
        val_pairs = _prepare_pairs(method, val_samples, pad_to)
        ckpt = train(model, train_pairs, val_pairs, cfg, run_dir=run_dir)
        model.load_state_dict(ckpt.tensors)

    write_run_config(run_dir, method_entry, cfg, pad_to)
    return model, ckpt


@torch.no_grad()
def evaluate_model(model, method: ModelSpec, volumes_by_id, ids, pad_to,
                   name: str | None = None, overlays_dir=None) -> MetricReport:
    """Volumetric per-patient metrics over the given patients.

    Predictions come back to native resolution before scoring; the
    morphological cleanup applies to the CNN baselines only, at native
    resolution. Optionally renders <patient>_<slice>.png overlays.
    """
    model.eval()
    rows = []
    if overlays_dir is not None:
        Path(overlays_dir).mkdir(parents=True, exist_ok=True)
    is_vit = method.architecture == "vit_head"
    for pid in sorted(ids):
        vol = volumes_by_id[pid]
        samples = extract_slices(vol)
        inputs = [
            _prepare_pairs(method, [s], pad_to)[0][0] for s in samples
        ]
        logits = []
        for start in range(0, len(inputs), EVAL_BATCH):
            chunk = inputs[start : start + EVAL_BATCH]
            xb = torch.stack(
                [torch.from_numpy(np.array(x, dtype=np.float32)) for x in chunk]
            )
            logits.append(model(xb)[:, 0])
        logits = torch.cat(logits)

        preds = []
        for k, s in enumerate(samples):
            pred = binarize(logits[k])
            native = (
                vit_pred_to_native(pred, s.image.shape)
                if is_vit
                else baseline_pred_to_native(pred, s.image.shape, pad_to)
            )
            if not is_vit:
                native = postprocess_baseline(native)
            preds.append(native)
            if overlays_dir is not None:
                render_overlay(
                    s.image, native, s.mask,
                    Path(overlays_dir) / f"{pid}_{s.slice_index}.png",
                )
        rows.append((pid, *evaluate_patient(preds, vol)))
    return aggregate(name or method.architecture, rows)


# ---------------------------------------------------------------------------
# run-directory persistence
# ---------------------------------------------------------------------------


def write_run_config(run_dir: Path, method_entry: dict, cfg: TrainConfig,
                     pad_to: int) -> None:
    payload = {
        "method": dict(method_entry),
        "train": asdict(cfg),
        "pad_to": pad_to,
    }
    (run_dir / "config").write_text(yaml.safe_dump(payload, sort_keys=True))


def restore_run(run_dir) -> tuple[dict, ModelSpec, torch.nn.Module, int]:
    """Rebuild the trained model from a run directory (config +
    best.ckpt (+ backbone.ckpt for the ViT path))."""
    run_dir = Path(run_dir)
    cfg_path = run_dir / "config"
    if not cfg_path.exists():
        raise FileNotFoundError(f"no config in {run_dir}")
    payload = yaml.safe_load(cfg_path.read_text())
    method_entry = payload["method"]
    method = method_spec(method_entry)
    cfg = TrainConfig(**payload["train"])
    ckpt = load_checkpoint(run_dir / "best.ckpt")
    if method.architecture == "vit_head":
        model = build_model(method, seed=cfg.seed)
        load_into(model.backbone, run_dir / "backbone.ckpt")
        model.head.load_state_dict(ckpt.tensors)
        freeze(model.backbone)
    else:
        model = build_model(method, seed=cfg.seed)
        model.load_state_dict(ckpt.tensors)
    return method_entry, method, model, int(payload["pad_to"])


# ---------------------------------------------------------------------------
# experiment drivers
# ---------------------------------------------------------------------------


def _cell_config(spec: ExperimentSpec, architecture: str, seed: int,
                 cap_epochs: bool) -> TrainConfig:
    overrides = dict(spec.train_overrides)
    overrides["seed"] = seed
    cfg = default_config(architecture, **overrides)
    if cap_epochs and cfg.max_epochs > spec.fewshot_max_epochs:
        cfg = TrainConfig(**{**asdict(cfg), "max_epochs": spec.fewshot_max_epochs})
    return cfg


def run_full_comparison(spec: ExperimentSpec, out_dir) -> ExperimentResult:
    """Train and evaluate every method on the full training split; writes
    compare.csv (one row per method), per-patient reports, and
    provenance.json under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    volumes_by_id = _load_corpus_map(spec)
    split = _resolve_split(spec, volumes_by_id)
    pad_to = _corpus_pad_target(spec, volumes_by_id)
    held_out = hash_test_split(volumes_by_id, split.test_ids)

    train_samples = _slices_for(volumes_by_id, split.train_ids)
    val_samples = _slices_for(volumes_by_id, split.val_ids)

    result = ExperimentResult(mode="full")
    for entry in spec.methods:
        name = method_name(entry)
        for seed in spec.seeds:
            key = (name, None, seed)
            run_dir = out_dir / "runs" / (
                name if len(spec.seeds) == 1 else f"{name}_s{seed}"
            )
            try:
                cfg = _cell_config(spec, entry["architecture"], seed, cap_epochs=False)
                model, _ = _run_one_cell(
                    entry, volumes_by_id, split, train_samples, val_samples,
                    cfg, run_dir, pad_to,
                )
                report = evaluate_model(
                    model, method_spec(entry), volumes_by_id, split.test_ids,
                    pad_to, name=name,
                )
                result.cells[key] = report
                write_report_csv(report, out_dir / "reports" / f"{name}_s{seed}.csv")
            except Exception as exc:  # crash isolation: record, keep going
                result.errors[key] = f"{type(exc).__name__}: {exc}"
                (out_dir / "errors.log").open("a").write(
                    f"--- {key}\n{traceback.format_exc()}\n"
                )

    result.provenance = {
        "kind": "compare",
        "config_hash": config_hash(spec.raw_config),
        "test_split_hash": held_out,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "n_patients": len(volumes_by_id),
        "split": {
            "train": split.train_ids, "val": split.val_ids, "test": split.test_ids,
        },
    }
    write_compare_csv(result, out_dir / "compare.csv")
    _write_errors_csv(result, out_dir / "errors.csv")
    (out_dir / "provenance.json").write_text(json.dumps(result.provenance, indent=2))
    return result


def run_fewshot(spec: ExperimentSpec, out_dir) -> ExperimentResult:
    """Sweep training-set size (slice fractions or patient counts); every
    cell evaluates on the untouched full test split. Writes fewshot.csv,
    sweep plots and provenance.json under out_dir."""
    if spec.mode not in ("fraction_sweep", "patient_sweep"):
        raise ValueError(f"run_fewshot needs a sweep mode, got {spec.mode!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    volumes_by_id = _load_corpus_map(spec)
    split = _resolve_split(spec, volumes_by_id)
    pad_to = _corpus_pad_target(spec, volumes_by_id)
    held_out = hash_test_split(volumes_by_id, split.test_ids)

    train_samples = _slices_for(volumes_by_id, split.train_ids)
    val_samples = _slices_for(volumes_by_id, split.val_ids)
    n_train_patients = len(set(split.train_ids))

    result = ExperimentResult(mode=spec.mode)
    cell_hashes = {}
    for entry in spec.methods:
        name = method_name(entry)
        for raw_value in spec.values:
            for seed in spec.seeds:
                if spec.mode == "fraction_sweep":
                    value = float(raw_value)
                    subset = subset_by_fraction(train_samples, value, seed)
                else:
                    value = n_train_patients if raw_value == "all" else int(raw_value)
                    subset = subset_by_patients(train_samples, value, seed)
                key = (name, value, seed)
                run_dir = out_dir / "runs" / f"{name}_{spec.mode}_{value}_s{seed}"
                try:
                    cfg = _cell_config(
                        spec, entry["architecture"], seed, cap_epochs=True
                    )
                    model, _ = _run_one_cell(
                        entry, volumes_by_id, split, subset, val_samples,
                        cfg, run_dir, pad_to,
                    )
                    report = evaluate_model(
                        model, method_spec(entry), volumes_by_id,
                        split.test_ids, pad_to, name=name,
                    )
                    result.cells[key] = report
                    cell_hashes[str(key)] = hash_test_split(
                        volumes_by_id, split.test_ids
                    )
                except Exception as exc:
                    result.errors[key] = f"{type(exc).__name__}: {exc}"
                    (out_dir / "errors.log").open("a").write(
                        f"--- {key}\n{traceback.format_exc()}\n"
                    )

    result.provenance = {
        "kind": "fewshot",
        "mode": spec.mode,
        "config_hash": config_hash(spec.raw_config),
        "test_split_hash": held_out,
        "cell_test_split_hashes": cell_hashes,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    write_fewshot_csv(result, out_dir / "fewshot.csv")
    _write_errors_csv(result, out_dir / "errors.csv")
    (out_dir / "provenance.json").write_text(json.dumps(result.provenance, indent=2))
    emit_plots(result, out_dir)
    return result


# ---------------------------------------------------------------------------
# reports and plots
# ---------------------------------------------------------------------------


def write_compare_csv(result: ExperimentResult, path) -> None:
    """Comparison-table CSV: method,dice_mean,dice_sd,iou_mean,iou_sd.
    Multiple seeds average cell-wise; floats use repr for exact re-reads."""
    methods = []
    for (name, _value, _seed) in result.cells:
        if name not in methods:
            methods.append(name)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "dice_mean", "dice_sd", "iou_mean", "iou_sd"])
        for name in methods:
            reports = [r for (n, _v, _s), r in result.cells.items() if n == name]
            w.writerow(
                [
                    name,
                    repr(float(np.mean([r.dice_mean for r in reports]))),
                    repr(float(np.mean([r.dice_sd for r in reports]))),
                    repr(float(np.mean([r.iou_mean for r in reports]))),
                    repr(float(np.mean([r.iou_sd for r in reports]))),
                ]
            )


def read_compare_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [
        {
            "method": r["method"],
            "dice_mean": float(r["dice_mean"]),
            "dice_sd": float(r["dice_sd"]),
            "iou_mean": float(r["iou_mean"]),
            "iou_sd": float(r["iou_sd"]),
        }
        for r in rows
    ]


def write_fewshot_csv(result: ExperimentResult, path) -> None:
    """Long-form sweep CSV: method,mode,value,seed,dice_mean,dice_sd,
    iou_mean,iou_sd; one row per cell, sorted."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ["method", "mode", "value", "seed",
             "dice_mean", "dice_sd", "iou_mean", "iou_sd"]
        )
        for key in sorted(result.cells, key=lambda k: (k[0], float(k[1]), k[2])):
            name, value, seed = key
            r = result.cells[key]
            w.writerow(
                [name, result.mode, repr(value), seed,
                 repr(r.dice_mean), repr(r.dice_sd),
                 repr(r.iou_mean), repr(r.iou_sd)]
            )


def read_fewshot_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    out = []
    for r in rows:
        out.append(
            {
                "method": r["method"],
                "mode": r["mode"],
                "value": float(r["value"]),
                "seed": int(r["seed"]),
                "dice_mean": float(r["dice_mean"]),
                "dice_sd": float(r["dice_sd"]),
                "iou_mean": float(r["iou_mean"]),
                "iou_sd": float(r["iou_sd"]),
            }
        )
    return out


def emit_plots(result: ExperimentResult, out_dir) -> dict[str, tuple]:
    """Dice vs sweep value, one line per method with an SD band. Returns
    the plotted series {method: (values, means, sds)} and writes
    <mode>_dice.png next to the CSV."""
    if result.mode not in ("fraction_sweep", "patient_sweep"):
        raise ValueError(f"plots need a sweep result, got mode {result.mode!r}")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series: dict[str, tuple] = {}
    methods = sorted({k[0] for k in result.cells})
    for name in methods:
        values = sorted({float(k[1]) for k in result.cells if k[0] == name})
        means, sds = [], []
        for v in values:
            cell_reports = [
                r for (n, val, _s), r in result.cells.items()
                if n == name and float(val) == v
            ]
            means.append(float(np.mean([r.dice_mean for r in cell_reports])))
            sds.append(float(np.mean([r.dice_sd for r in cell_reports])))
        series[name] = (values, means, sds)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, (values, means, sds) in series.items():
        ax.plot(values, means, marker="o", label=name)
        lo = [m - s for m, s in zip(means, sds)]
        hi = [m + s for m, s in zip(means, sds)]
        ax.fill_between(values, lo, hi, alpha=0.2)
    xlabel = (
        "training-slice fraction" if result.mode == "fraction_sweep"
        else "training patients"
    )
    ax.set_xlabel(xlabel)
    ax.set_ylabel("test Dice")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / f"{result.mode}_dice.png", dpi=150)
    plt.close(fig)
    return series


def _write_errors_csv(result: ExperimentResult, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "value", "seed", "error"])
        for (name, value, seed), msg in sorted(
            result.errors.items(), key=lambda kv: str(kv[0])
        ):
            w.writerow([name, "" if value is None else value, seed, msg])
