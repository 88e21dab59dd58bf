import dataclasses
import json

import numpy as np
import pytest

import textmage.pipeline as P
from textmage.curves import CurvePoint, export_curves
from textmage.data import build_vocabulary
from textmage.errors import CheckpointError, ConfigError, DataError
from textmage.pipeline import (Checkpoint, RunConfig, caption_image,
                               evaluate_checkpoint, load_checkpoint,
                               load_run_config, prepare_data, run_hidden_sweep,
                               save_checkpoint, train_all, train_joint)

FAST = dict(stage_epochs=(2, 3, 2), seed=11)


@pytest.fixture(scope="module")
def fast_run(synth_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("fastrun")
    cfg = RunConfig.desk(**FAST)
    results = train_all(cfg, synth_dataset, out_dir=out)
    return cfg, results, out


class TestRunConfig:
    def test_round_trip(self):
        cfg = RunConfig.desk(seed=3)
        again = RunConfig.from_dict(cfg.to_dict())
        assert again == cfg

    def test_unknown_key_rejected(self):
        obj = RunConfig().to_dict()
        obj["learning_rate"] = 0.1
        with pytest.raises(ConfigError, match="learning_rate"):
            RunConfig.from_dict(obj)

    def test_unknown_nested_key_rejected(self):
        obj = RunConfig().to_dict()
        obj["sgd"]["warmup"] = 5
        with pytest.raises(ConfigError, match="warmup"):
            RunConfig.from_dict(obj)

    def test_partial_config_uses_defaults(self):
        cfg = RunConfig.from_dict({"seed": 9, "decoder": {"hidden_size": 32}})
        assert cfg.seed == 9
        assert cfg.decoder.hidden_size == 32
        assert cfg.decoder.dropout_p == 0.5
        assert cfg.stage_epochs == (20, 25, 35)

    def test_image_sizes(self):
        assert RunConfig().image_size == 224
        assert RunConfig.desk().image_size == 32

    def test_bad_mode_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig(image_mode="tiny")

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(RunConfig.desk(seed=4).to_dict()), encoding="utf-8")
        assert load_run_config(path).seed == 4

    def test_default_stage_schedule(self):
        cfg = RunConfig()
        assert cfg.stage_epochs == (20, 25, 35)
        assert cfg.stage_batch_sizes == (16, 128, 128)


class TestCheckpointCodec:
    def make(self, synth_dataset):
        vocab = build_vocabulary(synth_dataset)
        rng = np.random.default_rng(0)
        params = {
            "encoder.conv0.kernel": rng.normal(size=(2, 3, 3, 3)).astype(np.float32).astype(np.float64),
            "encoder.conv0.bias": np.zeros(2),
            "decoder.out.bias": rng.normal(size=7).astype(np.float32).astype(np.float64),
        }
        return Checkpoint(stage="stage1", params=params, vocab=vocab,
                          run_config=RunConfig.desk(), metrics={"val_accuracy": 0.5})

    def test_save_load_save_byte_identical(self, synth_dataset, tmp_path):
        ckpt = self.make(synth_dataset)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(ckpt, p1)
        again = load_checkpoint(p1)
        save_checkpoint(again, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_tensors_and_vocab_preserved(self, synth_dataset, tmp_path):
        ckpt = self.make(synth_dataset)
        path = tmp_path / "c.ckpt"
        save_checkpoint(ckpt, path)
        again = load_checkpoint(path)
        assert set(again.params) == set(ckpt.params)
        for k in ckpt.params:
            assert again.params[k].shape == ckpt.params[k].shape
            np.testing.assert_array_equal(again.params[k], ckpt.params[k])
        assert again.vocab.id_to_token == ckpt.vocab.id_to_token
        assert again.run_config == ckpt.run_config
        assert again.stage == "stage1"
        assert again.metrics["val_accuracy"] == 0.5

    def test_corrupted_magic_rejected(self, synth_dataset, tmp_path):
        ckpt = self.make(synth_dataset)
        path = tmp_path / "d.ckpt"
        save_checkpoint(ckpt, path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_bad_version_rejected(self, synth_dataset, tmp_path):
        ckpt = self.make(synth_dataset)
        path = tmp_path / "e.ckpt"
        save_checkpoint(ckpt, path)
        blob = bytearray(path.read_bytes())
        blob[4] = 9
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_truncation_rejected(self, synth_dataset, tmp_path):
        ckpt = self.make(synth_dataset)
        path = tmp_path / "f.ckpt"
        save_checkpoint(ckpt, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_binary_layout(self, synth_dataset, tmp_path):
        ckpt = self.make(synth_dataset)
        path = tmp_path / "g.ckpt"
        save_checkpoint(ckpt, path)
        blob = path.read_bytes()
        assert blob[:4] == b"TMCK"
        assert int.from_bytes(blob[4:8], "little") == 1
        assert int.from_bytes(blob[8:12], "little") == 3  # tensor count


class TestCurvesCsv:
    def test_header_and_rows(self, tmp_path):
        curve = [CurvePoint(1, 0.5, 0.25, 0.6, 0.2), CurvePoint(2, 0.4, 0.5, 0.5, 0.4),
                 CurvePoint(3, 0.3, 0.75, 0.45, 0.5)]
        path = tmp_path / "curve.csv"
        export_curves(curve, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,train_loss,train_acc,val_loss,val_acc"
        assert len(lines) == 4
        assert lines[1] == "1,0.5,0.25,0.6,0.2"

    def test_re_export_identical(self, tmp_path):
        curve = [CurvePoint(1, 1 / 3, 2 / 3, None, None)]
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        export_curves(curve, a)
        export_curves(curve, b)
        assert a.read_bytes() == b.read_bytes()

    def test_nine_significant_digits(self, tmp_path):
        curve = [CurvePoint(1, 0.123456789123, 0.5, None, None)]
        path = tmp_path / "c.csv"
        export_curves(curve, path)
        assert "0.123456789" in path.read_text()

    def test_empty_val_columns(self, tmp_path):
        curve = [CurvePoint(1, 0.5, 0.5, None, None)]
        path = tmp_path / "d.csv"
        export_curves(curve, path)
        assert path.read_text().splitlines()[1] == "1,0.5,0.5,,"

    def test_non_monotone_epochs_rejected(self, tmp_path):
        with pytest.raises(DataError):
            export_curves([CurvePoint(2, 0.5, 0.5)], tmp_path / "e.csv")


class TestStages:
    def test_stage_outputs_exist(self, fast_run):
        _, results, out = fast_run
        for name in ("stage1", "stage2", "stage3"):
            assert (out / f"{name}.ckpt").is_file()
            assert (out / f"{name}_curve.csv").is_file()
            assert (out / f"{name}_curve.png").is_file()
            assert len(results[name].curve) == {"stage1": 2, "stage2": 3, "stage3": 2}[name]

    def test_best_checkpoint_metric_is_curve_max(self, fast_run):
        _, results, _ = fast_run
        s1 = results["stage1"]
        best_from_curve = max(p.val_accuracy for p in s1.curve)
        assert s1.info["best_epoch"] == next(
            p.epoch for p in s1.curve if p.val_accuracy == best_from_curve)

    def test_encoder_frozen_in_stage2(self, fast_run):
        _, results, _ = fast_run
        s1, s2 = results["stage1"].checkpoint, results["stage2"].checkpoint
        enc_keys = [k for k in s1.params if k.startswith("encoder.")]
        assert enc_keys
        for k in enc_keys:
            np.testing.assert_array_equal(s1.params[k], s2.params[k])

    def test_feature_cache_counts(self, fast_run):
        _, results, _ = fast_run
        # 10 images split 8/2: each encoded exactly once
        assert results["stage2"].info["encode_calls"] == 10

    def test_stage2_checkpoint_has_both_models(self, fast_run):
        _, results, _ = fast_run
        params = results["stage2"].checkpoint.params
        assert any(k.startswith("encoder.") for k in params)
        assert any(k.startswith("decoder.") for k in params)

    def test_joint_epoch0_matches_stage2_val_metrics(self, fast_run, synth_dataset):
        cfg, results, _ = fast_run
        s2 = results["stage2"].checkpoint
        encoder, dec_model = P.models_from_checkpoint(s2)
        prep = prepare_data(s2.run_config, synth_dataset)
        val_loss, val_acc = P.joint_metrics(encoder, dec_model, prep.val)
        assert val_loss == s2.metrics["val_loss"]
        assert val_acc == s2.metrics["val_accuracy"]

    def test_zero_joint_epochs_reproduces_stage2_metrics(self, fast_run, synth_dataset):
        cfg, results, _ = fast_run
        cfg0 = dataclasses.replace(cfg, stage_epochs=(cfg.stage_epochs[0],
                                                      cfg.stage_epochs[1], 0))
        joint = train_joint(cfg0, synth_dataset, results["stage2"].checkpoint)
        assert joint.curve == []
        s2 = results["stage2"].checkpoint.metrics
        assert joint.info["val_loss"] == s2["val_loss"]
        assert joint.info["val_accuracy"] == s2["val_accuracy"]

    def test_joint_from_scratch_flag(self, synth_dataset, fast_run):
        cfg, results, _ = fast_run
        cfg2 = dataclasses.replace(cfg, joint_from_scratch=True,
                                   stage_epochs=(1, 1, 1))
        fresh = train_joint(cfg2, synth_dataset, results["stage2"].checkpoint)
        warm = results["stage3"]
        assert fresh.checkpoint.params.keys() == warm.checkpoint.params.keys()
        k = "decoder.out.weight"
        assert not np.array_equal(fresh.checkpoint.params[k], warm.checkpoint.params[k])

    def test_stage1_checkpoint_cannot_caption(self, fast_run, synth_dataset):
        _, results, _ = fast_run
        image = synth_dataset.image_file(synth_dataset.samples[0])
        with pytest.raises(CheckpointError):
            caption_image(results["stage1"].checkpoint, image)


class TestDeterminism:
    def test_two_runs_byte_identical(self, synth_dataset, tmp_path):
        def run(sub):
            out = tmp_path / sub
            cfg = RunConfig.desk(stage_epochs=(1, 2, 1), seed=21)
            results = train_all(cfg, synth_dataset, out_dir=out)
            prep = prepare_data(cfg, synth_dataset)
            report = evaluate_checkpoint(results["stage3"].checkpoint, prep.val)
            P.write_report(report, out / "report.json")
            return out

        a, b = run("a"), run("b")
        for name in ("stage1.ckpt", "stage2.ckpt", "stage3.ckpt", "stage1_curve.csv",
                     "stage2_curve.csv", "stage3_curve.csv", "report.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name


class TestCaptionAndEval:
    def test_caption_deterministic(self, fast_run, synth_dataset):
        _, results, _ = fast_run
        image = synth_dataset.image_file(synth_dataset.samples[0])
        ckpt = results["stage3"].checkpoint
        a = caption_image(ckpt, image)
        b = caption_image(ckpt, image)
        assert a == b
        assert isinstance(a, str)

    def test_caption_beam_mode(self, fast_run, synth_dataset):
        _, results, _ = fast_run
        image = synth_dataset.image_file(synth_dataset.samples[0])
        out = caption_image(results["stage3"].checkpoint, image, beam_width=3)
        assert isinstance(out, str)

    def test_caption_unreadable_image(self, fast_run, tmp_path):
        _, results, _ = fast_run
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"nope")
        with pytest.raises(OSError):
            caption_image(results["stage3"].checkpoint, bad)

    def test_eval_report_shape(self, fast_run, synth_dataset):
        cfg, results, _ = fast_run
        prep = prepare_data(cfg, synth_dataset)
        report = evaluate_checkpoint(results["stage3"].checkpoint, prep.val)
        assert set(report["bleu"]) == {"1", "2", "3", "4", "bp"}
        assert 0.0 <= report["meteor"] <= 1.0
        assert report["meteor_x100"] == pytest.approx(100 * report["meteor"])
        assert report["samples"] == len(prep.val)
        assert 0.0 <= report["token_accuracy"] <= 1.0

    def test_eval_empty_split_rejected(self, fast_run):
        _, results, _ = fast_run
        with pytest.raises(DataError):
            evaluate_checkpoint(results["stage3"].checkpoint, [])

    def test_write_report_renders_figure(self, fast_run, synth_dataset, tmp_path):
        cfg, results, _ = fast_run
        prep = prepare_data(cfg, synth_dataset)
        report = evaluate_checkpoint(results["stage3"].checkpoint, prep.val)
        path = tmp_path / "rep.json"
        P.write_report(report, path)
        assert path.is_file()
        assert (tmp_path / "rep.png").is_file()
        assert json.loads(path.read_text())["samples"] == report["samples"]


class TestHiddenSweep:
    def test_grid_shape(self, fast_run, synth_dataset):
        _, results, _ = fast_run
        report = run_hidden_sweep(results["stage1"].checkpoint, synth_dataset, [4, 8])
        assert [row["hidden_size"] for row in report["sweep"]] == [4, 8]
        for row in report["sweep"]:
            assert set(row["bleu"]) == {"1", "2", "3", "4", "bp"}
            assert "meteor" in row


class TestReferenceConstants:
    def test_documented_values(self):
        ref = P.REFERENCE_FULL_SCALE
        assert ref["dataset"]["images"] * 2 == ref["dataset"]["captions"]
        assert ref["stage1"] == {"train_accuracy": 0.758565, "val_accuracy": 0.643476}
        assert ref["stage2"] == {"train_accuracy": 0.807854}
        assert ref["joint"] == {"train_accuracy": 0.916543, "val_accuracy": 0.739776}
        grid = ref["eval_grid"]
        assert set(grid) == {32, 64, 128}
        assert grid[32]["bleu1"] == 66.7 and grid[32]["meteor"] == 18.227456
