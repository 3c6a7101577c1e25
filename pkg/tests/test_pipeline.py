import json
from pathlib import Path

import numpy as np
import pytest

from spherezsl.benchmark import SyntheticBenchmarkSpec, make_benchmark
from spherezsl.pipeline import (ConfigError, PipelineConfig, PipelineStageError,
                                RunContext, check_stage_prerequisites, run_pipeline,
                                stage_flpt, stage_generate, stage_recover,
                                stage_train_eval)
from spherezsl.service import PredictionServer, ServerClassifier, ServiceHandle


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipe_bench")
    spec = SyntheticBenchmarkSpec(dim=16, base_classes=4, new_classes=2, kappa=60.0,
                                  samples_per_class=40, test_samples_per_class=25,
                                  noise_angle_deg=10.0, seed=13)
    return make_benchmark(spec, out)


@pytest.fixture(scope="module")
def oracle(bench):
    server = PredictionServer(ServerClassifier.from_file(bench.server_weights), port=0)
    with ServiceHandle(server) as handle:
        yield handle


def config_dict(bench, out_dir, url, **overrides):
    doc = {
        "mode": "black-box",
        "seed": 5,
        "out_dir": str(out_dir),
        "protocol": "gzsl",
        "server_url": url,
        "paths": {
            "text_features": str(bench.text_features),
            "token_table": str(bench.token_table),
            "splits": str(bench.splits),
            "test_features": str(bench.features_test),
        },
        "recovery": {"samples_per_class": 60, "epochs": 60,
                     "learning_rate": 0.003, "batch_size": 32},
        "flpt": {"epochs": 6, "batch_size": 32, "learning_rate": 0.001},
        "generator": {"epochs": 15, "batch_size": 32, "learning_rate": 0.003,
                      "latent_dim": 8},
        "classifier": {"epochs": 15, "batch_size": 32, "learning_rate": 0.001},
        "per_class_synthesis": 40,
    }
    doc.update(overrides)
    return doc


def test_full_run_produces_report_and_artifacts(bench, oracle, tmp_path):
    cfg = PipelineConfig.from_dict(config_dict(bench, tmp_path / "run", oracle.url))
    result = run_pipeline(cfg)
    assert result.report.protocol == "gzsl"
    assert 0.0 <= result.report.harmonic <= 100.0
    for name in ("virtual_base.emb1", "prototypes.emb1", "recovery.json",
                 "enhanced_base.emb1", "text_tuned.emb1", "prompt_state.json",
                 "generator.gen1", "synthesized_new.emb1",
                 "report.json", "report.csv", "manifest.json"):
        assert cfg.artifact(name).exists(), name
    report_doc = json.loads(result.report_path.read_text())
    assert set(report_doc) == {"protocol", "base_acc", "new_acc",
                               "harmonic_mean", "per_class"}


def test_rerun_is_byte_identical(bench, oracle, tmp_path):
    cfg_a = PipelineConfig.from_dict(config_dict(bench, tmp_path / "a", oracle.url))
    cfg_b = PipelineConfig.from_dict(config_dict(bench, tmp_path / "b", oracle.url))
    run_pipeline(cfg_a)
    run_pipeline(cfg_b)
    assert (tmp_path / "a" / "report.json").read_bytes() == \
        (tmp_path / "b" / "report.json").read_bytes()
    # intermediate artifacts identical as well
    for name in ("virtual_base.emb1", "enhanced_base.emb1", "synthesized_new.emb1"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_stagewise_run_equals_full_run(bench, oracle, tmp_path):
    full_cfg = PipelineConfig.from_dict(config_dict(bench, tmp_path / "full", oracle.url))
    run_pipeline(full_cfg)

    staged_cfg = PipelineConfig.from_dict(config_dict(bench, tmp_path / "staged", oracle.url))
    staged_cfg.validate()
    Path(staged_cfg.out_dir).mkdir(parents=True)
    for fn in (stage_recover, stage_flpt, stage_generate, stage_train_eval):
        ctx = RunContext(staged_cfg)
        ctx.start(fn.__name__)
        fn(ctx)
        ctx.finish()
    assert (tmp_path / "full" / "report.json").read_bytes() == \
        (tmp_path / "staged" / "report.json").read_bytes()


def test_blackbox_manifest_and_access_log_are_data_free(bench, oracle, tmp_path):
    cfg = PipelineConfig.from_dict(config_dict(bench, tmp_path / "audit", oracle.url))
    run_pipeline(cfg)
    manifest = json.loads(cfg.artifact("manifest.json").read_text())
    recovery = next(s for s in manifest["stages"] if s["name"] == "recovery")
    base_features = str(bench.features_train)
    assert base_features not in recovery["inputs"]
    assert str(bench.server_weights) not in recovery["inputs"]
    accessed = [e["path"] for e in manifest["file_access"]]
    assert base_features not in accessed
    assert str(bench.server_weights) not in accessed
    # recovery reads exactly the public inputs: split and text features
    assert sorted(recovery["inputs"]) == sorted([str(bench.splits),
                                                 str(bench.text_features)])


def test_whitebox_mode(bench, tmp_path):
    doc = config_dict(bench, tmp_path / "wb", None, mode="white-box")
    doc.pop("server_url")
    doc["paths"]["weights"] = str(bench.server_weights)
    cfg = PipelineConfig.from_dict(doc)
    result = run_pipeline(cfg)
    assert result.report.harmonic > 0
    recovery_doc = json.loads(cfg.artifact("recovery.json").read_text())
    assert recovery_doc["mode"] == "white-box"


def test_validation_errors_before_any_stage(bench, oracle, tmp_path):
    doc = config_dict(bench, tmp_path / "v", oracle.url)
    doc["paths"]["test_features"] = str(tmp_path / "missing.emb1")
    cfg = PipelineConfig.from_dict(doc)
    with pytest.raises(ConfigError, match="does not exist"):
        run_pipeline(cfg)
    assert not (tmp_path / "v").exists()  # nothing ran, nothing written

    doc = config_dict(bench, tmp_path / "v2", None)
    doc.pop("server_url")
    with pytest.raises(ConfigError, match="server_url"):
        PipelineConfig.from_dict(doc).validate()

    with pytest.raises(ConfigError, match="unknown top-level"):
        PipelineConfig.from_dict({"bogus_key": 1})

    with pytest.raises(ConfigError, match="unknown keys in 'recovery'"):
        PipelineConfig.from_dict({"recovery": {"epoch": 5}})


def test_stage_failure_is_named_and_marked(bench, tmp_path):
    # black-box config pointing at a dead server: recovery must fail
    doc = config_dict(bench, tmp_path / "fail", "http://127.0.0.1:9")
    cfg = PipelineConfig.from_dict(doc)
    with pytest.raises(PipelineStageError) as exc:
        run_pipeline(cfg)
    assert exc.value.stage == "recovery"
    manifest = json.loads(cfg.artifact("manifest.json").read_text())
    statuses = {s["name"]: s["status"] for s in manifest["stages"]}
    assert statuses["recovery"] == "failed"


def test_ablation_flags_skip_stages(bench, oracle, tmp_path):
    doc = config_dict(bench, tmp_path / "abl", oracle.url,
                      stages={"flpt": False, "generator": False})
    cfg = PipelineConfig.from_dict(doc)
    result = run_pipeline(cfg)
    assert not cfg.artifact("prompt_state.json").exists()
    assert not cfg.artifact("synthesized_new.emb1").exists()
    manifest = json.loads(cfg.artifact("manifest.json").read_text())
    statuses = {s["name"]: s["status"] for s in manifest["stages"]}
    assert statuses["generate"] == "skipped"
    flpt_stage = next(s for s in manifest["stages"] if s["name"] == "flpt")
    assert flpt_stage["enabled"] is False
    assert result.report.harmonic >= 0.0


def test_base_to_new_protocol(bench, oracle, tmp_path):
    doc = config_dict(bench, tmp_path / "b2n", oracle.url, protocol="base-new")
    result = run_pipeline(PipelineConfig.from_dict(doc))
    assert result.report.protocol == "base-to-new"

    # restricted label spaces cannot do worse than the mixed protocol
    doc2 = config_dict(bench, tmp_path / "b2n_g", oracle.url)
    gzsl = run_pipeline(PipelineConfig.from_dict(doc2))
    assert result.report.base_acc >= gzsl.report.base_acc - 1e-9
    assert result.report.new_acc >= gzsl.report.new_acc - 1e-9


def test_manifest_hash_covers_config(bench, oracle, tmp_path):
    cfg1 = PipelineConfig.from_dict(config_dict(bench, tmp_path / "h1", oracle.url))
    cfg2 = PipelineConfig.from_dict(config_dict(bench, tmp_path / "h2", oracle.url,
                                                seed=6))
    assert cfg1.config_hash() != cfg2.config_hash()
    # out_dir participates too; identical content otherwise
    cfg3 = PipelineConfig.from_dict(config_dict(bench, tmp_path / "h1", oracle.url))
    assert cfg1.config_hash() == cfg3.config_hash()


def test_check_stage_prerequisites(bench, oracle, tmp_path):
    cfg = PipelineConfig.from_dict(config_dict(bench, tmp_path / "pre", oracle.url))
    with pytest.raises(ConfigError, match="run the earlier stages"):
        check_stage_prerequisites(cfg, ["flpt"])
    check_stage_prerequisites(cfg, ["recovery", "flpt", "generate", "train-eval"])
