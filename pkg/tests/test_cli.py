import json

import numpy as np
import pytest

from pointpretrain.cli import main

from conftest import tiny_train_config


def _tiny_config_file(tmp_path, **overrides):
    cfg = tiny_train_config(**overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg.to_dict()))
    return path


class TestGenData:
    def test_writes_expected_layout(self, tmp_path, capsys):
        out = tmp_path / "ds"
        rc = main(["gen-data", "--out", str(out), "--scenes", "4", "--views", "3",
                   "--height", "24", "--width", "24", "--teacher-dim", "8",
                   "--seed", "1"])
        assert rc == 0
        scene_dirs = sorted(p.name for p in out.glob("scene_*"))
        assert scene_dirs == [f"scene_{i:06d}" for i in range(4)]
        for sdir in out.glob("scene_*"):
            views = sorted(p.name for p in (sdir / "views").iterdir())
            assert views == ["view_00", "view_01", "view_02"]
        assert "resolved config" in capsys.readouterr().out

    def test_deterministic_bytes(self, tmp_path):
        args = ["--scenes", "2", "--views", "2", "--height", "16", "--width", "16",
                "--teacher-dim", "8", "--seed", "3"]
        assert main(["gen-data", "--out", str(tmp_path / "a")] + args) == 0
        assert main(["gen-data", "--out", str(tmp_path / "b")] + args) == 0
        for rel in ["scene_000001/views/view_01/depth.bin", "manifest.json"]:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_refuses_non_empty_dir_without_force(self, tmp_path, capsys):
        out = tmp_path / "ds"
        out.mkdir()
        (out / "junk.txt").write_text("hi")
        rc = main(["gen-data", "--out", str(out), "--scenes", "1"])
        assert rc == 2
        assert "--force" in capsys.readouterr().err
        rc = main(["gen-data", "--out", str(out), "--scenes", "1", "--views", "2",
                   "--height", "16", "--width", "16", "--teacher-dim", "8", "--force"])
        assert rc == 0


class TestCheck:
    def test_chamfer_suite_passes(self, capsys):
        assert main(["check", "--suite", "chamfer"]) == 0
        out = capsys.readouterr().out
        assert "[PASS] chamfer/oracle_equivalence" in out

    def test_unknown_suite_rejected(self):
        with pytest.raises(SystemExit) as exc:
            main(["check", "--suite", "bogus"])
        assert exc.value.code == 2


class TestPretrainCommand:
    def test_tiny_run_and_artifacts(self, tiny_dataset_dir, tmp_path, capsys):
        config = _tiny_config_file(tmp_path, steps=3)
        out = tmp_path / "run"
        rc = main(["pretrain", "--data", str(tiny_dataset_dir), "--out", str(out),
                   "--config", str(config)])
        assert rc == 0
        stdout = capsys.readouterr().out
        assert "resolved config (pretrain)" in stdout
        metrics = (out / "metrics.jsonl").read_text().splitlines()
        assert len(metrics) == 3
        assert (out / "checkpoint_final.ckpt").is_file()

    def test_flag_overrides_config_file(self, tiny_dataset_dir, tmp_path, capsys):
        config = _tiny_config_file(tmp_path, steps=3)
        out = tmp_path / "run"
        rc = main(["pretrain", "--data", str(tiny_dataset_dir), "--out", str(out),
                   "--config", str(config), "--steps", "2"])
        assert rc == 0
        echoed = capsys.readouterr().out.splitlines()[0]
        assert json.loads(echoed.split("resolved config (pretrain): ")[1])["steps"] == 2
        assert len((out / "metrics.jsonl").read_text().splitlines()) == 2

    def test_no_contrastive_flag_sets_ablation(self, tiny_dataset_dir, tmp_path, capsys):
        config = _tiny_config_file(tmp_path, steps=2)
        rc = main(["pretrain", "--data", str(tiny_dataset_dir),
                   "--out", str(tmp_path / "run"), "--config", str(config),
                   "--no-contrastive"])
        assert rc == 0
        lines = (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()
        record = json.loads(lines[0])
        assert record["loss_con_image"] == 0.0 and record["loss_con_text"] == 0.0

    def test_missing_data_dir_is_usage_error(self, tmp_path, capsys):
        config = _tiny_config_file(tmp_path, steps=2)
        rc = main(["pretrain", "--data", str(tmp_path / "nope"),
                   "--out", str(tmp_path / "run"), "--config", str(config)])
        assert rc == 2

    def test_invalid_config_rejected(self, tiny_dataset_dir, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"steps": 0}))
        rc = main(["pretrain", "--data", str(tiny_dataset_dir),
                   "--out", str(tmp_path / "run"), "--config", str(bad)])
        assert rc == 2

    def test_unknown_flag_rejected(self, tiny_dataset_dir, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["pretrain", "--data", str(tiny_dataset_dir),
                  "--out", str(tmp_path / "run"), "--bogus"])
        assert exc.value.code == 2


@pytest.fixture(scope="module")
def tiny_checkpoint(tiny_dataset_dir, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli_ckpt")
    config = tmp / "config.json"
    config.write_text(json.dumps(tiny_train_config(steps=3).to_dict()))
    out = tmp / "run"
    assert main(["pretrain", "--data", str(tiny_dataset_dir), "--out", str(out),
                 "--config", str(config)]) == 0
    return out / "checkpoint_final.ckpt"


class TestEvaluationCommands:
    def test_probe_pretrained_and_random_arms(self, tiny_dataset_dir, tiny_checkpoint,
                                              tmp_path, capsys):
        rc = main(["probe", "--data", str(tiny_dataset_dir),
                   "--checkpoint", str(tiny_checkpoint),
                   "--probe-steps", "30", "--holdout", "3"])
        assert rc == 0
        report = json.loads(capsys.readouterr().out.splitlines()[-1])
        assert report["arm"] == "pretrained"
        assert report["n_heldout"] == 3

        rc = main(["probe", "--data", str(tiny_dataset_dir), "--random-init",
                   "--probe-steps", "30", "--holdout", "3"])
        assert rc == 0
        report = json.loads(capsys.readouterr().out.splitlines()[-1])
        assert report["arm"] == "random-init"

    def test_probe_without_model_source_rejected(self, tiny_dataset_dir, capsys):
        rc = main(["probe", "--data", str(tiny_dataset_dir)])
        assert rc == 2
        assert "--checkpoint or --random-init" in capsys.readouterr().err

    def test_view_shift_reports_accuracy(self, tiny_dataset_dir, tiny_checkpoint, capsys):
        rc = main(["view-shift", "--data", str(tiny_dataset_dir),
                   "--checkpoint", str(tiny_checkpoint), "--gallery", "8"])
        assert rc == 0
        report = json.loads(capsys.readouterr().out.splitlines()[-1])
        assert report["gallery_size"] == 8
        assert 0.0 <= report["top1_accuracy"] <= 1.0

    def test_corrupt_checkpoint_rejected_before_compute(self, tiny_dataset_dir,
                                                        tiny_checkpoint, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        raw = bytearray(tiny_checkpoint.read_bytes())
        raw[4] = 9  # unsupported version
        bad.write_bytes(bytes(raw))
        rc = main(["view-shift", "--data", str(tiny_dataset_dir),
                   "--checkpoint", str(bad)])
        assert rc == 2
        assert "version" in capsys.readouterr().err

    def test_export_features_unit_norm_embeddings(self, tiny_dataset_dir,
                                                  tiny_checkpoint, tmp_path, capsys):
        out = tmp_path / "features"
        rc = main(["export-features", "--data", str(tiny_dataset_dir),
                   "--checkpoint", str(tiny_checkpoint), "--out", str(out)])
        assert rc == 0
        sidecars = sorted(out.glob("*.json"))
        assert len(sidecars) == 10
        for sidecar in sidecars:
            meta = json.loads(sidecar.read_text())
            blob = sidecar.with_suffix(".bin").read_bytes()
            emb_meta = meta["embedding"]
            start = emb_meta["offset"]
            count = int(np.prod(emb_meta["shape"]))
            emb = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
            assert abs(np.linalg.norm(emb.astype(np.float64)) - 1.0) < 1e-6
            assert meta["patch_features"]["shape"] == [8, 16]
            assert meta["pooled"]["shape"] == [16]
