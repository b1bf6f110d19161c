import json
from pathlib import Path

import pytest

from flab.cli import main
from flab.configio import save_config
from tests.test_pipeline import micro_cfg


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("cli") / "micro.txt"
    save_config(micro_cfg(), path)
    return path


@pytest.fixture(scope="module")
def cli_ws(tmp_path_factory, cfg_file) -> Path:
    ws = tmp_path_factory.mktemp("cli_ws")
    assert main(["synth-data", "--workdir", str(ws), "--config", str(cfg_file)]) == 0
    assert main(["train", "--stage", "pretrain", "--workdir", str(ws),
                 "--config", str(cfg_file)]) == 0
    assert main(["train", "--stage", "finetune", "--tuner", "trainable",
                 "--workdir", str(ws), "--config", str(cfg_file)]) == 0
    return ws


class TestSynthData:
    def test_deterministic_across_workdirs(self, tmp_path, cfg_file):
        w1, w2 = tmp_path / "a", tmp_path / "b"
        assert main(["synth-data", "--workdir", str(w1), "--config", str(cfg_file)]) == 0
        assert main(["synth-data", "--workdir", str(w2), "--config", str(cfg_file)]) == 0
        m1 = (w1 / "corpus/finetune/manifest_train.jsonl").read_text()
        m2 = (w2 / "corpus/finetune/manifest_train.jsonl").read_text()
        assert m1 == m2

    def test_resolved_config_copied(self, tmp_path, cfg_file):
        ws = tmp_path / "w"
        main(["synth-data", "--workdir", str(ws), "--config", str(cfg_file)])
        assert (ws / "config_synth.txt").exists()

    def test_bad_config_exit_2(self, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text("[corpus]\nfinetune_per_class = 1\n")
        assert main(["synth-data", "--workdir", str(tmp_path / "w"), "--config", str(bad)]) == 2


class TestTrainAndGenerate:
    def test_checkpoints_exist(self, cli_ws):
        assert (cli_ws / "checkpoints/pretrain.flab").exists()
        assert (cli_ws / "checkpoints/finetune.flab").exists()
        assert (cli_ws / "checkpoints/vocab.txt").exists()

    def test_finetune_without_pretrain_exit_2(self, tmp_path, cfg_file):
        ws = tmp_path / "w"
        main(["synth-data", "--workdir", str(ws), "--config", str(cfg_file)])
        assert main(["train", "--stage", "finetune", "--workdir", str(ws),
                     "--config", str(cfg_file)]) == 2

    def test_generate_writes_requested_count(self, cli_ws, cfg_file, tmp_path):
        out = tmp_path / "gen"
        code = main(["generate", "--workdir", str(cli_ws), "--config", str(cfg_file),
                     "--checkpoint", str(cli_ws / "checkpoints/finetune.flab"),
                     "--labels", "DogBark,Rain", "--count", "2", "--mode", "none",
                     "--seed", "3", "--out", str(out)])
        assert code == 0
        assert len(list((out / "wav").glob("*.wav"))) == 4
        assert (out / "config_generate.txt").exists()

    def test_generate_seed_reproducible(self, cli_ws, cfg_file, tmp_path):
        outs = []
        for name in ("g1", "g2"):
            out = tmp_path / name
            main(["generate", "--workdir", str(cli_ws), "--config", str(cfg_file),
                  "--checkpoint", str(cli_ws / "checkpoints/finetune.flab"),
                  "--labels", "Keyboard", "--count", "1", "--seed", "11",
                  "--out", str(out)])
            outs.append(sorted((out / "wav").glob("*.wav"))[0].read_bytes())
        assert outs[0] == outs[1]

    def test_generate_unknown_label_exit_2(self, cli_ws, cfg_file, tmp_path):
        assert main(["generate", "--workdir", str(cli_ws), "--config", str(cfg_file),
                     "--checkpoint", str(cli_ws / "checkpoints/finetune.flab"),
                     "--labels", "Explosion", "--count", "1",
                     "--out", str(tmp_path / "g")]) == 2

    def test_generate_top1_with_pool(self, cli_ws, cfg_file, tmp_path):
        out = tmp_path / "gen_pool"
        code = main(["generate", "--workdir", str(cli_ws), "--config", str(cfg_file),
                     "--checkpoint", str(cli_ws / "checkpoints/finetune.flab"),
                     "--labels", "GunShot", "--count", "2", "--pool", "2",
                     "--mode", "top1", "--seed", "5", "--out", str(out)])
        assert code == 0
        assert len(list((out / "wav").glob("*.wav"))) == 2
        assert (out / "scores.csv").exists()


class TestEvaluateAndCalibrate:
    def test_evaluate_self_near_zero(self, cli_ws, cfg_file, tmp_path, capsys):
        ref = cli_ws / "corpus/finetune/manifest_eval.jsonl"
        code = main(["evaluate", "--workdir", str(cli_ws), "--config", str(cfg_file),
                     "--checkpoint", str(cli_ws / "checkpoints/finetune.flab"),
                     "--generated", str(ref), "--reference", str(ref),
                     "--out", str(tmp_path / "fad.csv")])
        assert code == 0
        lines = (tmp_path / "fad.csv").read_text().strip().splitlines()
        assert len(lines) == 1 + 7 + 1
        for line in lines[1:]:
            assert float(line.split(",")[1]) < 1e-6

    def test_calibrate_writes_reports(self, cli_ws, cfg_file):
        code = main(["calibrate", "--workdir", str(cli_ws), "--config", str(cfg_file),
                     "--checkpoint", str(cli_ws / "checkpoints/finetune.flab"),
                     "--count", "3"])
        assert code == 0
        assert (cli_ws / "reports/calibration.csv").exists()
        assert (cli_ws / "reports/thresholds.txt").exists()

    def test_thresholds_usable_by_generate(self, cli_ws, cfg_file, tmp_path):
        out = tmp_path / "gen_thresh"
        code = main(["generate", "--workdir", str(cli_ws), "--config", str(cfg_file),
                     "--checkpoint", str(cli_ws / "checkpoints/finetune.flab"),
                     "--labels", "Rain", "--count", "2", "--pool", "2",
                     "--mode", "threshold",
                     "--thresholds", str(cli_ws / "reports/thresholds.txt"),
                     "--out", str(out)])
        assert code == 0
        assert len(list((out / "wav").glob("*.wav"))) >= 2
