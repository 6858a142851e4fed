import json
import shutil

import numpy as np
import pytest

from prunelens import cli
from prunelens.pipeline import (ConfigError, ExperimentConfig, Pipeline,
                                StageError, validate_bundle)

TINY = {
    "seed": 3,
    "grammar": {"vocab_size": 80, "max_depth": 2, "nest_prob": 0.35},
    "corpus": {"n_sentences": 220, "splits": [0.7, 0.15, 0.15],
               "rare_threshold": 40},
    "model": {"num_layers": 2, "model_dim": 16, "num_heads": 2, "ffn_dim": 32,
              "max_len": 96},
    "training": {"epochs": 2, "batch_size": 16, "rewind_epoch": 1,
                 "warmup_steps": 20, "lr_scale": 0.5},
    "imp": {"k_max": 2},
    "probe": {"tasks": ["token_tag", "arc_pred", "same_head"],
              "families": ["linear"], "replicates_hard": 2, "max_epochs": 5},
    "similarity": {"min_group": 5},
}


def write_toml(path, raw) -> str:
    # minimal TOML writer for the flat-table configs used here
    lines = []
    for key, value in raw.items():
        if not isinstance(value, dict):
            lines.append(f"{key} = {_toml_value(value)}")
    for key, value in raw.items():
        if isinstance(value, dict):
            lines.append(f"[{key}]")
            for k, v in value.items():
                lines.append(f"{k} = {_toml_value(v)}")
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    config = ExperimentConfig.load(write_toml(out / "config.toml", TINY))
    Pipeline(config, out / "artifacts").run()
    return out


def test_full_run_produces_manifest_and_artifacts(run_dir):
    root = run_dir / "artifacts"
    manifest = json.loads((root / "manifest.json").read_text())
    assert set(manifest["stages"]) == {"generate", "train", "imp", "dump",
                                       "probe", "similarity", "report"}
    assert (root / "models" / "LTH0" / "checkpoint.ckpt").exists()
    assert (root / "models" / "magnitude" / "LTH2" / "checkpoint.ckpt").exists()
    assert (root / "models" / "random" / "family.json").exists()
    assert (root / "dumps" / "LTH1" / "encoder.01.dump").exists()
    for rel in ("table_family.csv", "probe_metrics.csv", "layer_sim.csv",
                "attention_sim.csv", "neuron_sim.csv", "svd_curves.csv",
                "grouped_similarity.csv", "concentration.csv", "bundle.json"):
        assert (root / "reports" / rel).exists(), rel


def test_family_table_sparsity_schedule(run_dir):
    root = run_dir / "artifacts"
    rows = (root / "reports" / "table_family.csv").read_text().strip().splitlines()
    assert rows[0].startswith("k,")
    for line in rows[1:]:
        k, incl, excl = line.split(",")[:3]
        assert abs(float(excl) - (1 - 0.8 ** int(k))) < 1e-3
        assert float(incl) <= float(excl) + 1e-12


def test_bundle_validates_and_counts_models(run_dir):
    root = run_dir / "artifacts"
    bundle = json.loads((root / "reports" / "bundle.json").read_text())
    validate_bundle(bundle)
    assert bundle["iterations"] == [0, 1, 2]
    assert len(bundle["family_table"]) == 3
    assert bundle["non_goals"]


def test_rerun_skips_all_stages(run_dir, capsys):
    out = run_dir
    config = ExperimentConfig.load(str(out / "config.toml"))
    Pipeline(config, out / "artifacts").run()
    captured = capsys.readouterr().out
    assert captured.count("up to date, skipping") == 7


def test_probe_change_reruns_only_probe_and_report(run_dir, capsys):
    out = run_dir
    raw = json.loads(json.dumps(TINY))
    raw["probe"]["tasks"] = ["token_tag", "arc_pred"]
    config = ExperimentConfig.load(write_toml(out / "config2.toml", raw))
    Pipeline(config, out / "artifacts").run()
    captured = capsys.readouterr().out
    assert captured.count("up to date, skipping") == 5
    for stage in ("probe", "report"):
        assert f"[{stage}] running" in captured
    # restore the original artifacts for later tests
    config = ExperimentConfig.load(str(out / "config.toml"))
    Pipeline(config, out / "artifacts").run()
    capsys.readouterr()


def test_corrupt_artifact_rejected(run_dir, tmp_path):
    root = tmp_path / "copy"
    shutil.copytree(run_dir / "artifacts", root)
    victim = root / "models" / "LTH0" / "checkpoint.ckpt"
    blob = bytearray(victim.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    victim.write_bytes(bytes(blob))
    config = ExperimentConfig.load(str(run_dir / "config.toml"))
    pipeline = Pipeline(config, root)
    with pytest.raises(StageError, match="stale or corrupt"):
        pipeline.run(["imp"])


def test_stage_without_prerequisites_rejected(tmp_path):
    config = ExperimentConfig.load(None)
    pipeline = Pipeline(config, tmp_path / "empty")
    with pytest.raises(StageError, match="prerequisites"):
        pipeline.run(["probe"])


def test_config_validation_errors():
    from prunelens.pipeline import DEFAULT_CONFIG, _merge
    with pytest.raises(ConfigError, match="unknown config key"):
        _merge(DEFAULT_CONFIG, {"bogus": 1})
    bad = json.loads(json.dumps(TINY))
    bad["training"]["rewind_epoch"] = 99
    with pytest.raises(ConfigError):
        ExperimentConfig(raw=_merge(DEFAULT_CONFIG, bad)).validate()
    worse = json.loads(json.dumps(TINY))
    worse["imp"]["rate"] = 1.5
    with pytest.raises(ConfigError, match="rate"):
        ExperimentConfig(raw=_merge(DEFAULT_CONFIG, worse)).validate()


def test_cli_exit_codes(run_dir, tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[grammar]\nvocab_size = -3\n")
    assert cli.main(["run", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert cli.main(["probe", "--out", str(tmp_path / "empty2")]) == 2
    # a completed stage on existing artifacts succeeds
    assert cli.main(["report", "--config", str(run_dir / "config.toml"),
                     "--out", str(run_dir / "artifacts")]) == 0


def test_determinism_across_runs(run_dir, tmp_path):
    config = ExperimentConfig.load(str(run_dir / "config.toml"))
    second = tmp_path / "second"
    Pipeline(config, second).run()
    first = run_dir / "artifacts"
    compared = 0
    for rel in ["models/LTH0/checkpoint.ckpt",
                "models/magnitude/LTH1/checkpoint.ckpt",
                "models/magnitude/LTH2/checkpoint.ckpt",
                "models/random/LTH2/checkpoint.ckpt",
                "dumps/LTH0/encoder.01.dump",
                "dumps/LTH2/dec_self.02.dump",
                "reports/table_family.csv",
                "reports/probe_metrics.csv",
                "reports/layer_sim.csv",
                "reports/neuron_sim.csv",
                "reports/svd_curves.csv",
                "reports/concentration.csv",
                "reports/bundle.json"]:
        a = (first / rel).read_bytes()
        b = (second / rel).read_bytes()
        assert a == b, f"nondeterministic artifact: {rel}"
        compared += 1
    assert compared == 13
