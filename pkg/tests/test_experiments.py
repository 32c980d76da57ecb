"""Experiment-grid tests on a miniature phantom corpus.

The corpus (12 volumes of 32x32x4) and its frozen split are built once per
session; every grid run here uses 2-epoch budgets and thumb-sized models,
so the full file stays in the tens-of-seconds range on CPU.
"""

import json

import numpy as np
import pytest

from atrium_probe.data import (
    DatasetSplit,
    PhantomSpec,
    generate_phantom,
    load_corpus,
    split_patients,
)
from atrium_probe.evaluation import MetricReport
from atrium_probe.experiments import (
    ExperimentResult,
    ExperimentSpec,
    config_hash,
    emit_plots,
    evaluate_model,
    method_spec,
    read_compare_csv,
    read_fewshot_csv,
    restore_run,
    run_fewshot,
    run_full_comparison,
    spec_from_config,
    hash_test_split,
    train_method,
)
from atrium_probe.training import default_config

UNET = {
    "name": "unet",
    "architecture": "unet",
    "input_size": 32,
    "base_channels": 8,
}
VIT = {
    "name": "vit_head",
    "architecture": "vit_head",
    "variant": "tiny-test",
    "embed_dim": 32,
    "depth": 1,
    "n_heads": 2,
    "input_size": 28,
    "head_channels": 16,
    "vit_normalize": "zscore",
}


def base_config(corpus_dir, split_dir, **extra):
    cfg = {
        "data": {"root": str(corpus_dir), "split": str(split_dir)},
        "methods": [dict(UNET), dict(VIT)],
        "seeds": [0],
        "train": {"max_epochs": 2, "patience": 10},
    }
    cfg.update(extra)
    return cfg


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    generate_phantom(
        PhantomSpec(n_volumes=12, height=32, width=32, n_slices=4, seed=7), out
    )
    return out


@pytest.fixture(scope="session")
def split_dir(tmp_path_factory, corpus_dir):
    out = tmp_path_factory.mktemp("split")
    ids = sorted(v.patient_id for v in load_corpus(corpus_dir))
    split_patients(ids, seed=0).save(out)
    return out


@pytest.fixture(scope="session")
def compare_out(tmp_path_factory, corpus_dir, split_dir):
    out = tmp_path_factory.mktemp("compare")
    spec = spec_from_config(base_config(corpus_dir, split_dir))
    result = run_full_comparison(spec, out)
    return out, result


@pytest.fixture(scope="session")
def fraction_out(tmp_path_factory, corpus_dir, split_dir):
    out = tmp_path_factory.mktemp("fewshot")
    cfg = base_config(
        corpus_dir, split_dir, mode="fraction_sweep", values=[0.5, 1.0]
    )
    result = run_fewshot(spec_from_config(cfg), out)
    return out, result


class TestSpecValidation:
    def test_missing_data_root(self):
        with pytest.raises(ValueError, match="data.root"):
            spec_from_config({"methods": [dict(UNET)]})

    def test_empty_methods(self):
        with pytest.raises(ValueError, match="method"):
            ExperimentSpec(methods=[], data_root=".")

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="mode"):
            ExperimentSpec(methods=[dict(UNET)], data_root=".", mode="grid")

    def test_sweep_default_grids(self):
        frac = ExperimentSpec(
            methods=[dict(UNET)], data_root=".", mode="fraction_sweep"
        )
        assert frac.values == [0.01, 0.05, 0.1, 0.25, 0.5, 1.0]
        pat = ExperimentSpec(
            methods=[dict(UNET)], data_root=".", mode="patient_sweep"
        )
        assert pat.values == [1, 10, "all"]

    def test_fraction_range(self):
        for bad in (0.0, -0.5, 1.5):
            with pytest.raises(ValueError):
                ExperimentSpec(
                    methods=[dict(UNET)], data_root=".",
                    mode="fraction_sweep", values=[bad],
                )

    def test_patient_count_range(self):
        with pytest.raises(ValueError):
            ExperimentSpec(
                methods=[dict(UNET)], data_root=".",
                mode="patient_sweep", values=[0],
            )

    def test_no_seeds(self):
        with pytest.raises(ValueError, match="seed"):
            ExperimentSpec(methods=[dict(UNET)], data_root=".", seeds=[])

    def test_config_hash_is_order_insensitive_and_sensitive_to_values(self):
        a = {"x": 1, "y": [2, 3]}
        b = {"y": [2, 3], "x": 1}
        assert config_hash(a) == config_hash(b)
        assert config_hash(a) != config_hash({"x": 2, "y": [2, 3]})


class TestSplitHash:
    def test_stable_and_id_order_free(self, corpus_dir):
        vols = {v.patient_id: v for v in load_corpus(corpus_dir)}
        ids = sorted(vols)[:3]
        h1 = hash_test_split(vols, ids)
        h2 = hash_test_split(vols, list(reversed(ids)))
        assert h1 == h2
        assert h1 == hash_test_split(vols, ids)

    def test_changes_with_membership(self, corpus_dir):
        vols = {v.patient_id: v for v in load_corpus(corpus_dir)}
        ids = sorted(vols)
        assert hash_test_split(vols, ids[:3]) != hash_test_split(vols, ids[:4])


class TestFullComparison:
    def test_all_cells_present(self, compare_out):
        _, result = compare_out
        assert set(result.cells) == {("unet", None, 0), ("vit_head", None, 0)}
        assert result.errors == {}

    def test_metrics_in_range(self, compare_out):
        _, result = compare_out
        for report in result.cells.values():
            for v in (report.dice_mean, report.iou_mean):
                assert 0.0 <= v <= 1.0

    def test_output_files(self, compare_out):
        out, _ = compare_out
        assert (out / "compare.csv").exists()
        assert (out / "errors.csv").exists()
        assert (out / "provenance.json").exists()
        for name in ("unet", "vit_head"):
            run = out / "runs" / name
            assert (run / "config").exists()
            assert (run / "best.ckpt").exists()
            assert (run / "history.csv").exists()
        assert (out / "runs" / "vit_head" / "backbone.ckpt").exists()
        assert not (out / "runs" / "unet" / "backbone.ckpt").exists()

    def test_csv_round_trip(self, compare_out):
        out, result = compare_out
        rows = read_compare_csv(out / "compare.csv")
        assert [r["method"] for r in rows] == ["unet", "vit_head"]
        by_method = {r["method"]: r for r in rows}
        for (name, _v, _s), report in result.cells.items():
            assert by_method[name]["dice_mean"] == report.dice_mean
            assert by_method[name]["iou_sd"] == report.iou_sd

    def test_provenance(self, compare_out, corpus_dir, split_dir):
        out, _ = compare_out
        prov = json.loads((out / "provenance.json").read_text())
        assert prov["config_hash"] == config_hash(
            base_config(corpus_dir, split_dir)
        )
        assert len(prov["test_split_hash"]) == 64
        split = DatasetSplit.load(split_dir)
        assert prov["split"]["test"] == split.test_ids

    def test_deterministic_rerun(self, compare_out, corpus_dir, split_dir,
                                 tmp_path):
        out, _ = compare_out
        spec = spec_from_config(base_config(corpus_dir, split_dir))
        run_full_comparison(spec, tmp_path)
        assert (tmp_path / "compare.csv").read_bytes() == (
            out / "compare.csv"
        ).read_bytes()

    def test_crash_isolation(self, corpus_dir, split_dir, tmp_path):
        cfg = base_config(corpus_dir, split_dir)
        # an impossible input size fails at model build, inside the cell
        cfg["methods"] = [
            dict(UNET),
            {"name": "broken", "architecture": "unet", "input_size": 33},
        ]
        result = run_full_comparison(spec_from_config(cfg), tmp_path)
        assert ("unet", None, 0) in result.cells
        assert ("broken", None, 0) in result.errors
        errors_csv = (tmp_path / "errors.csv").read_text()
        assert "broken" in errors_csv
        rows = read_compare_csv(tmp_path / "compare.csv")
        assert [r["method"] for r in rows] == ["unet"]


class TestRestoreRun:
    def test_eval_reproduces_cell_report(self, compare_out, corpus_dir,
                                         split_dir):
        out, result = compare_out
        vols = {v.patient_id: v for v in load_corpus(corpus_dir)}
        split = DatasetSplit.load(split_dir)
        for name in ("unet", "vit_head"):
            entry, method, model, pad_to = restore_run(out / "runs" / name)
            report = evaluate_model(
                model, method, vols, split.test_ids, pad_to, name=name
            )
            assert report == result.cells[(name, None, 0)]

    def test_missing_run_dir(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            restore_run(tmp_path / "nope")


class TestHeldOutAudit:
    def test_test_patient_in_training_rejected(self, corpus_dir):
        vols = {v.patient_id: v for v in load_corpus(corpus_dir)}
        ids = sorted(vols)
        # a corrupted manifest that trains on a test patient
        split = DatasetSplit(
            train_ids=ids[:8] + [ids[-1]], val_ids=ids[8:9], test_ids=ids[9:]
        )
        cfg = default_config("unet", max_epochs=1, seed=0)
        with pytest.raises(RuntimeError, match="leak"):
            train_method(dict(UNET), vols, split, cfg, "/tmp/unused", 32)


class TestFewshot:
    def test_grid_shape(self, fraction_out):
        _, result = fraction_out
        assert set(result.cells) == {
            ("unet", 0.5, 0), ("unet", 1.0, 0),
            ("vit_head", 0.5, 0), ("vit_head", 1.0, 0),
        }
        assert result.errors == {}

    def test_csv_round_trip(self, fraction_out):
        out, result = fraction_out
        rows = read_fewshot_csv(out / "fewshot.csv")
        assert len(rows) == 4
        for row in rows:
            report = result.cells[(row["method"], row["value"], row["seed"])]
            assert row["dice_mean"] == report.dice_mean
            assert row["iou_mean"] == report.iou_mean
            assert row["mode"] == "fraction_sweep"

    def test_full_fraction_matches_comparison(self, fraction_out, compare_out):
        """A fraction of 1.0 is the identity subset, so its cell must
        reproduce the full-comparison cell bit for bit."""
        _, few = fraction_out
        _, full = compare_out
        for name in ("unet", "vit_head"):
            assert few.cells[(name, 1.0, 0)] == full.cells[(name, None, 0)]

    def test_test_split_hash_constant_across_cells(self, fraction_out):
        out, result = fraction_out
        prov = json.loads((out / "provenance.json").read_text())
        hashes = set(prov["cell_test_split_hashes"].values())
        assert len(hashes) == 1
        assert hashes == {prov["test_split_hash"]}

    def test_plot_written(self, fraction_out):
        out, _ = fraction_out
        assert (out / "fraction_sweep_dice.png").exists()

    def test_epoch_cap_applies(self, fraction_out):
        out, _ = fraction_out
        import yaml

        payload = yaml.safe_load(
            (out / "runs" / "unet_fraction_sweep_1.0_s0" / "config").read_text()
        )
        assert payload["train"]["max_epochs"] == 2  # under the cap of 10

    def test_patient_sweep_with_all(self, corpus_dir, split_dir, tmp_path):
        cfg = base_config(
            corpus_dir, split_dir, mode="patient_sweep", values=[1, "all"]
        )
        cfg["methods"] = [dict(UNET)]
        result = run_fewshot(spec_from_config(cfg), tmp_path)
        # 12 patients split 8/1/3, so "all" resolves to 8
        assert set(result.cells) == {("unet", 1, 0), ("unet", 8, 0)}
        assert result.errors == {}

    def test_full_mode_rejected(self, corpus_dir, split_dir, tmp_path):
        spec = spec_from_config(base_config(corpus_dir, split_dir))
        with pytest.raises(ValueError, match="sweep"):
            run_fewshot(spec, tmp_path)


def _report(method, dice_mean, dice_sd=0.05):
    return MetricReport(
        method=method,
        per_patient=[("p0", dice_mean, dice_mean)],
        dice_mean=dice_mean,
        dice_sd=dice_sd,
        iou_mean=dice_mean,
        iou_sd=dice_sd,
    )


class TestPlots:
    def test_series_match_cells(self, tmp_path):
        result = ExperimentResult(mode="fraction_sweep")
        for v, d in ((0.1, 0.4), (0.5, 0.6), (1.0, 0.7)):
            result.cells[("m", v, 0)] = _report("m", d)
        series = emit_plots(result, tmp_path)
        values, means, sds = series["m"]
        assert values == [0.1, 0.5, 1.0]
        assert means == [0.4, 0.6, 0.7]
        assert sds == [0.05, 0.05, 0.05]
        assert (tmp_path / "fraction_sweep_dice.png").exists()

    def test_monotone_input_gives_monotone_series(self, tmp_path):
        result = ExperimentResult(mode="patient_sweep")
        rng = np.random.default_rng(3)
        levels = sorted(rng.uniform(0.2, 0.9, size=5))
        for v, d in zip((1, 2, 4, 8, 16), levels):
            result.cells[("m", v, 0)] = _report("m", float(d))
        _, means, _ = emit_plots(result, tmp_path)["m"]
        assert means == sorted(means)

    def test_two_methods_three_values(self, tmp_path):
        result = ExperimentResult(mode="fraction_sweep")
        for name in ("a", "b"):
            for v in (0.1, 0.5, 1.0):
                result.cells[(name, v, 0)] = _report(name, 0.5)
        series = emit_plots(result, tmp_path)
        assert set(series) == {"a", "b"}
        assert all(len(s[0]) == 3 for s in series.values())

    def test_seed_averaging(self, tmp_path):
        result = ExperimentResult(mode="fraction_sweep")
        result.cells[("m", 1.0, 0)] = _report("m", 0.4)
        result.cells[("m", 1.0, 1)] = _report("m", 0.8)
        _, means, _ = emit_plots(result, tmp_path)["m"]
        assert means == [pytest.approx(0.6)]

    def test_non_sweep_rejected(self, tmp_path):
        result = ExperimentResult(mode="full")
        result.cells[("m", None, 0)] = _report("m", 0.5)
        with pytest.raises(ValueError, match="sweep"):
            emit_plots(result, tmp_path)
