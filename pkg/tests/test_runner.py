"""Experiment orchestration and on-disk artifacts."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from app import runner
from app.config import ConfigError
from app.model import ModelBundle
from helpers import tiny_experiment


def _config(tmp_path: Path, **sections):
    sections.setdefault("protocol", {})
    sections["protocol"] = {"rounds": 2, **sections["protocol"]}
    return tiny_experiment(output_dir=str(tmp_path), **sections)


def _rows(path: Path):
    with path.open(encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


def test_run_writes_every_artifact(tmp_path: Path) -> None:
    config = _config(tmp_path, seeds=[0, 1])
    outcome = runner.run_experiment(config)

    run_dir = tmp_path / "tiny"
    assert outcome.run_dir == run_dir
    for name in ("config.yaml", "metrics.csv", "summary.csv"):
        assert (run_dir / name).stat().st_size > 0
    for seed in (0, 1):
        assert (run_dir / f"seed_{seed}" / "checkpoint.fsis").exists()
        lines = (run_dir / f"seed_{seed}" / "round_log.jsonl").read_text(encoding="utf-8").splitlines()
        assert len(lines) == 2 * 3
        assert json.loads(lines[0])["round"] == 1
    rows = _rows(run_dir / "metrics.csv")
    assert [row["seed"] for row in rows] == ["0", "1", "mean"]
    assert {row["mode"] for row in rows} == {"fedsis"}
    assert all(row["target_domain"] == "3" for row in rows)


def test_runs_are_reproducible(tmp_path: Path) -> None:
    first = runner.run_experiment(_config(tmp_path), tmp_path / "a")
    second = runner.run_experiment(_config(tmp_path), tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_text() == (tmp_path / "b" / "metrics.csv").read_text()
    assert np.array_equal(first.outcomes[0].scores, second.outcomes[0].scores)


def test_checkpoint_restores_the_trained_bundle(tmp_path: Path) -> None:
    config = _config(tmp_path)
    outcome = runner.run_experiment(config)
    restored = ModelBundle.load(tmp_path / "tiny" / "seed_0" / "checkpoint.fsis", config.model)
    trained = outcome.outcomes[0].result.bundle.named_arrays()
    for name, array in restored.named_arrays().items():
        assert np.array_equal(array, trained[name]), name
    listing = runner.inspect_checkpoint(tmp_path / "tiny" / "seed_0" / "checkpoint.fsis")
    assert [name for name, _, _ in listing] == list(trained)


def test_zero_rounds_still_evaluates(tmp_path: Path) -> None:
    outcome = runner.run_experiment(_config(tmp_path, protocol={"rounds": 0}))
    assert outcome.outcomes[0].result.round_log == []
    assert (tmp_path / "tiny" / "seed_0" / "round_log.jsonl").read_text() == ""
    assert 0.0 <= outcome.records[0].auc <= 100.0


def test_feature_dump(tmp_path: Path) -> None:
    config = _config(tmp_path, eval={"dump_features": True})
    runner.run_experiment(config)
    with np.load(tmp_path / "tiny" / "seed_0" / "features.npz") as dump:
        assert dump["features"].shape == (16, config.model.dim)
        assert dump["scores"].shape == (16,)
        assert set(dump["domains"].tolist()) == {3}

    again = runner.dump_features(
        config, tmp_path / "tiny" / "seed_0" / "checkpoint.fsis", tmp_path / "later" / "features.npz")
    with np.load(again) as dump:
        assert dump["features"].shape == (16, config.model.dim)


def test_dev_threshold_policy(tmp_path: Path) -> None:
    outcome = runner.run_experiment(_config(tmp_path, eval={"threshold_policy": "dev"}))
    assert outcome.records[0].policy == "dev"
    assert _rows(tmp_path / "tiny" / "metrics.csv")[0]["policy"] == "dev"


def test_split_by_attack_over_three_seeds(tmp_path: Path) -> None:
    config = _config(tmp_path, seeds=[0, 1, 2], data={"split_by_attack": True})
    outcome = runner.run_experiment(config)
    assert len(outcome.records) == 3
    for seed_outcome in outcome.outcomes:
        assert sorted({r.client for r in seed_outcome.result.round_log}) == list(range(6))


def test_sweep_writes_comparison_and_summary(tmp_path: Path) -> None:
    comparison, summary = runner.sweep(_config(tmp_path, seeds=[0, 1]), "protocol.r_uni", [1, 2])
    rows = _rows(comparison)
    assert [(row["value"], row["seed"]) for row in rows] == [("1", "0"), ("1", "1"), ("2", "0"), ("2", "1")]
    assert {row["axis"] for row in rows} == {"protocol.r_uni"}
    summary_rows = _rows(summary)
    assert [row["value"] for row in summary_rows] == ["1", "2"]
    assert all(row["n"] == "2" for row in summary_rows)
    assert (tmp_path / "tiny" / "sweep_protocol.r_uni" / "1" / "metrics.csv").exists()


def test_sweep_over_block_ranges(tmp_path: Path) -> None:
    comparison, _ = runner.sweep(_config(tmp_path), "model.sampler_range", [[1, 2], [3, 4]])
    assert len(_rows(comparison)) == 2
    assert (tmp_path / "tiny" / "sweep_model.sampler_range" / "1_2").exists()


@pytest.mark.parametrize(("axis", "values"), [("protocol.speed", [1]), ("protocol.r_uni", [])])
def test_invalid_sweeps_are_config_errors(tmp_path: Path, axis, values) -> None:
    with pytest.raises(ConfigError):
        runner.sweep(_config(tmp_path), axis, values)


def test_generated_files_feed_the_file_source(tmp_path: Path, domains) -> None:
    config = _config(tmp_path)
    paths = runner.gen_data(config, tmp_path / "data")
    assert [p.name for p in paths] == ["domain0.fsds", "domain1.fsds", "domain2.fsds", "domain3.fsds"]
    from_files = runner.build_domains(
        _config(tmp_path, data={"source": "file", "paths": [str(p) for p in paths]}))
    for loaded, generated in zip(from_files, domains):
        assert np.array_equal(loaded.images, generated.images)


def test_file_source_checks_image_shape(tmp_path: Path) -> None:
    paths = runner.gen_data(_config(tmp_path), tmp_path / "data")
    config = _config(
        tmp_path, model={"image_shape": [16, 16, 3]}, data={"source": "file", "paths": [str(p) for p in paths]})
    with pytest.raises(ConfigError, match="model expects"):
        runner.build_domains(config)


def test_inference_policy_follows_training_mode(tmp_path: Path) -> None:
    fixed = runner.inference_policy(_config(tmp_path, model={"sampler_mode": "fixed", "fixed_block": 3}))
    assert (fixed.kind, fixed.fixed_block) == ("fixed", 3)
    ranged = runner.inference_policy(_config(tmp_path, model={"sampler_range": [2, 3]}))
    assert (ranged.kind, ranged.low, ranged.high) == ("sampled", 2, 3)
    assert runner.inference_policy(_config(tmp_path, mode="festa")).cls_path
    assert not runner.inference_policy(_config(tmp_path)).cls_path
