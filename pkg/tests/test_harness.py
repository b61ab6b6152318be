"""End-to-end CLI: pipeline artifacts, run records, exit codes, determinism."""

import json
import shutil
import subprocess
from pathlib import Path

import numpy as np
import pytest

from spiraldiff.dataset import load_corpus
from spiraldiff.evaluation import read_metrics
from spiraldiff.harness import cli, read_run_records
from spiraldiff.motion import load_motion, save_motion

CONFIG = {
    "seed": 5,
    "corpus": {
        "frames_min": 12,
        "frames_max": 12,
        "test_sentences": 1,
    },
    "stage1": {
        "latent_h": 8, "latent_c": 16, "encoder_channels": [16, 16, 32, 32],
        "temporal_layers": 2, "temporal_heads": 4, "ff_mult": 2,
        "decoder_hidden": 128, "codebook_size": 64, "epochs": 4, "lr": 1e-3,
    },
    "stage2": {
        "steps": 10, "embed_dim": 64, "layers": 2, "heads": 4, "ff_mult": 2,
        "audio_backend": "conv", "conv_layers": 2, "conv_width": 3,
        "epochs": 3, "lr": 1e-3,
    },
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run every subcommand once; snapshot the state for later assertions."""
    root = tmp_path_factory.mktemp("run")
    out = root / "exp"
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps({**CONFIG, "out_dir": str(out)}))

    base = ["--config", str(cfg_path)]
    for argv in (
        ["synth-corpus", *base],
        ["build-pyramid", *base],
        ["train-stage1", *base],
        ["train-stage2", *base],
        ["sample", *base, "--gens", "2"],
        ["evaluate", *base],
        ["heatmap", *base],
        ["report", *base],
    ):
        assert cli(argv) == 0, argv[0]

    corpus = load_corpus(out / "corpus")
    first_test = corpus.split_samples("test")[0]
    return {
        "cfg_path": cfg_path,
        "out": out,
        "corpus": corpus,
        "records": read_run_records(out),
        "metrics": read_metrics(out / "metrics.txt"),
        "sample_name": first_test.name,
        "gen0": (out / "samples" / f"{first_test.name}-g0.bin").read_bytes(),
        "gen1": (out / "samples" / f"{first_test.name}-g1.bin").read_bytes(),
    }


class TestPipelineArtifacts:
    def test_all_stage_outputs_exist(self, pipeline):
        out = pipeline["out"]
        for rel in ("corpus/corpus.ini", "pyramid.bin", "stage1.bin", "stage2.bin",
                    "metrics.txt", "heatmap.png", "heatmap.f32",
                    "report/report.txt", "report/loss_curves.png",
                    "report/diversity.png"):
            assert (out / rel).exists(), rel

    def test_corpus_split_sizes(self, pipeline):
        corpus = pipeline["corpus"]
        assert len(corpus.split_samples("train")) == 2
        assert len(corpus.split_samples("test")) == 2
        assert len(corpus.split_samples("val")) == 0

    def test_sampled_motion_is_loadable(self, pipeline):
        path = pipeline["out"] / "samples" / f"{pipeline['sample_name']}-g0.bin"
        motion = load_motion(path)
        assert motion.data.shape == (12, 162, 3)
        assert motion.frame_rate == 25.0

    def test_metrics_file_contents(self, pipeline):
        report = pipeline["metrics"]
        assert report.lve is not None and report.lve >= 0.0
        assert report.fdd is not None
        assert report.diversity is not None and report.diversity > 0.0
        assert report.sample_count == 2
        assert len(report.config_hash) == 64

    def test_heatmap_raw_field_matches_vertex_count(self, pipeline):
        field = np.fromfile(pipeline["out"] / "heatmap.f32", dtype="<f4")
        assert field.shape == (162,)
        assert np.all(field >= 0.0)


class TestRunRecords:
    def test_one_record_per_subcommand(self, pipeline):
        names = [r["subcommand"] for r in pipeline["records"]]
        assert names == sorted(names)  # glob order groups by subcommand
        assert set(names) == {"synth-corpus", "build-pyramid", "train-stage1",
                              "train-stage2", "sample", "evaluate", "heatmap",
                              "report"}

    def test_record_fields(self, pipeline):
        for rec in pipeline["records"]:
            assert rec["seed"] == 5
            assert len(rec["config_hash"]) == 64
            assert rec["wall_clock_s"] >= 0.0
            for art in rec["artifacts"]:
                assert Path(art).exists(), art

    def test_records_are_write_once(self, pipeline):
        out = pipeline["out"]
        before = sorted(p.name for p in (out / "records").glob("record-heatmap-*"))
        assert before == ["record-heatmap-000.json"]
        assert cli(["heatmap", "--config", str(pipeline["cfg_path"])]) == 0
        after = sorted(p.name for p in (out / "records").glob("record-heatmap-*"))
        assert after == ["record-heatmap-000.json", "record-heatmap-001.json"]
        # the original record was not rewritten
        first = json.loads((out / "records" / "record-heatmap-000.json").read_text())
        assert first == [r for r in pipeline["records"] if r["subcommand"] == "heatmap"][0]

    def test_report_renders_missing_metrics_as_dash(self, pipeline):
        table = (pipeline["out"] / "report" / "report.txt").read_text()
        lines = table.splitlines()
        assert lines[0].split() == ["config", "subcommand", "seed", "lve", "fdd",
                                    "diversity", "wall_s"]
        train_rows = [ln for ln in lines if "train-stage1" in ln]
        assert train_rows and "—" in train_rows[0]
        eval_rows = [ln for ln in lines if "evaluate" in ln]
        assert eval_rows and "—" not in eval_rows[0]


class TestDeterminism:
    def test_resampling_is_bit_identical(self, pipeline):
        cfg = str(pipeline["cfg_path"])
        assert cli(["sample", "--config", cfg, "--gens", "2"]) == 0
        out = pipeline["out"] / "samples"
        name = pipeline["sample_name"]
        assert (out / f"{name}-g0.bin").read_bytes() == pipeline["gen0"]
        assert (out / f"{name}-g1.bin").read_bytes() == pipeline["gen1"]

    def test_generations_differ_from_each_other(self, pipeline):
        assert pipeline["gen0"] != pipeline["gen1"]

    def test_seed_override_changes_output(self, pipeline):
        cfg = str(pipeline["cfg_path"])
        assert cli(["sample", "--config", cfg, "--seed", "99"]) == 0
        name = pipeline["sample_name"]
        path = pipeline["out"] / "samples" / f"{name}-g0.bin"
        assert path.read_bytes() != pipeline["gen0"]

    def test_deterministic_sampler_ignores_seed(self, pipeline):
        cfg = str(pipeline["cfg_path"])
        name = pipeline["sample_name"]
        path = pipeline["out"] / "samples" / f"{name}-g0.bin"
        assert cli(["sample", "--config", cfg, "--seed", "1",
                    "--deterministic-sampler"]) == 0
        first = path.read_bytes()
        assert cli(["sample", "--config", cfg, "--seed", "2",
                    "--deterministic-sampler"]) == 0
        assert path.read_bytes() == first
        assert first != pipeline["gen0"]

    def test_reevaluation_reproduces_metrics(self, pipeline):
        cfg = str(pipeline["cfg_path"])
        assert cli(["evaluate", "--config", cfg]) == 0
        again = read_metrics(pipeline["out"] / "metrics.txt")
        assert again == pipeline["metrics"]


class TestEvaluatePredDir:
    def test_ground_truth_predictions_score_zero(self, pipeline, tmp_path):
        preds = tmp_path / "preds"
        preds.mkdir()
        for sample in pipeline["corpus"].split_samples("test"):
            save_motion(preds / f"{sample.name}.bin", sample.motion)
        cfg = str(pipeline["cfg_path"])
        assert cli(["evaluate", "--config", cfg, "--split", "test",
                    "--pred-dir", str(preds)]) == 0
        report = read_metrics(pipeline["out"] / "metrics.txt")
        assert report.lve == 0.0
        assert report.fdd == 0.0
        assert report.diversity is None  # stored files carry no spread metric

    def test_missing_prediction_file_fails(self, pipeline, tmp_path):
        cfg = str(pipeline["cfg_path"])
        code = cli(["evaluate", "--config", cfg, "--split", "test",
                    "--pred-dir", str(tmp_path / "nowhere")])
        assert code == 1


class TestExitCodes:
    def test_missing_config_flag(self, capsys):
        assert cli(["synth-corpus"]) == 3
        assert "config" in capsys.readouterr().err

    def test_nonexistent_config_file(self, tmp_path):
        assert cli(["synth-corpus", "--config", str(tmp_path / "no.json")]) == 3

    def test_invalid_json_config(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert cli(["synth-corpus", "--config", str(bad)]) == 3

    def test_unknown_config_key(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"seed": 1, "turbo": true}')
        assert cli(["synth-corpus", "--config", str(bad)]) == 3

    def test_unknown_subcommand_and_empty_argv(self):
        assert cli(["frobnicate"]) == 2
        assert cli([]) == 2

    def test_divergence_exit_code(self, pipeline, tmp_path, capsys):
        cfg = {**CONFIG, "out_dir": str(pipeline["out"])}
        cfg["stage1"] = {**CONFIG["stage1"], "lr": 1e12, "epochs": 3}
        path = tmp_path / "diverge.json"
        path.write_text(json.dumps(cfg))
        stage1_before = (pipeline["out"] / "stage1.bin").read_bytes()
        assert cli(["train-stage1", "--config", str(path)]) == 4
        assert "diverged" in capsys.readouterr().err
        # the checkpoint from the good run is left untouched
        assert (pipeline["out"] / "stage1.bin").read_bytes() == stage1_before

    def test_report_with_no_records(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": 1, "out_dir": str(tmp_path / "o")}))
        assert cli(["report", "--config", str(cfg)]) == 1


class TestEpochOverrides:
    def test_zero_epoch_training_still_writes_checkpoint(self, pipeline, tmp_path):
        out = tmp_path / "zero"
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps({**CONFIG, "out_dir": str(out)}))
        base = ["--config", str(cfg_path)]
        assert cli(["synth-corpus", *base]) == 0
        assert cli(["build-pyramid", *base]) == 0
        assert cli(["train-stage1", *base, "--epochs", "0"]) == 0
        records = read_run_records(out)
        rec = [r for r in records if r["subcommand"] == "train-stage1"][0]
        assert rec["metrics"]["final_loss"] is None
        assert rec["metrics"]["epochs"] == 0
        assert (out / "stage1.bin").exists()


def test_console_script_help():
    exe = shutil.which("spiraldiff")
    assert exe, "console script should be installed"
    out = subprocess.run([exe, "--help"], capture_output=True, text=True, timeout=120)
    assert out.returncode == 0
    for name in ("synth-corpus", "train-stage1", "sample", "evaluate", "report"):
        assert name in out.stdout
