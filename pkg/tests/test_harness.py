"""Run configs, the training loop's artifacts and reproducibility, checkpoint
integrity, the sweep drivers and the command line."""

import dataclasses
import json

import numpy as np
import pytest

from cxrnet import cli, models, training
from cxrnet.augment import AugmentationPolicy
from cxrnet.config import ConfigError, DataConfig, Hyperparameters, RunConfig, load_config
from cxrnet.data import SplitSpec
from cxrnet.training import (
    CheckpointError,
    _batch_slices,
    ablation_run_config,
    evaluate,
    load_checkpoint,
    resolve_manifest,
    train,
)


def make_config(corpus_root, output_dir, **overrides):
    base = dict(
        architecture="modified_vgg16",
        data=DataConfig(root=str(corpus_root), balance_seed=0,
                        split=SplitSpec(seed=1, counts=(5, 2, 2))),
        output_dir=str(output_dir),
        width_scale=0.0625,
        input_size=32,
        hyperparameters=Hyperparameters(epochs=2, batch_size=8, seed=10),
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def completed_run(tiny_corpus_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    config = make_config(tiny_corpus_root, out)
    return config, train(config)


class TestConfig:
    def test_file_round_trip(self, tiny_corpus_root, tmp_path):
        config = make_config(tiny_corpus_root, tmp_path / "out")
        path = tmp_path / "config.json"
        path.write_text(json.dumps(config.to_json()))
        assert load_config(path) == config

    @pytest.mark.parametrize("mutate", [
        lambda d: d.update(epochz=1),
        lambda d: d["data"].update(shuffle=True),
        lambda d: d["hyperparameters"].update(lr=0.1),
        lambda d: d["augmentation"].update(blur=True),
        lambda d: d["data"]["split"].update(ratio=0.5),
    ])
    def test_unknown_keys_rejected_at_every_level(self, tiny_corpus_root,
                                                  tmp_path, mutate):
        doc = make_config(tiny_corpus_root, tmp_path).to_json()
        mutate(doc)
        with pytest.raises(ConfigError):
            RunConfig.from_json(doc)

    def test_missing_required_key(self):
        with pytest.raises(ConfigError, match="architecture"):
            RunConfig.from_json({"data": {"manifest": "m"}, "output_dir": "o"})

    def test_root_and_manifest_are_exclusive(self):
        with pytest.raises(ConfigError):
            DataConfig(root="r", manifest="m")
        with pytest.raises(ConfigError):
            DataConfig()

    def test_root_mode_requires_split(self):
        with pytest.raises(ConfigError):
            DataConfig(root="r")

    def test_defaults_follow_published_recipe(self):
        hp = Hyperparameters()
        assert (hp.learning_rate, hp.epochs, hp.batch_size, hp.seed) == (0.001, 30, 32, 10)
        cfg = RunConfig(architecture="resnet50", data=DataConfig(manifest="m"),
                        output_dir="o")
        assert cfg.input_size == 256
        assert cfg.channel_policy == "replicate3"
        assert cfg.augment_validation is True


class TestBatchSlicing:
    def test_even_division(self):
        assert _batch_slices(8, 4) == [slice(0, 4), slice(4, 8)]

    def test_trailing_singleton_folds_into_previous(self):
        assert _batch_slices(9, 4) == [slice(0, 4), slice(4, 9)]

    def test_larger_remainder_stays_separate(self):
        assert _batch_slices(10, 4) == [slice(0, 4), slice(4, 8), slice(8, 10)]

    def test_single_batch(self):
        assert _batch_slices(3, 8) == [slice(0, 3)]


class TestTrainRun:
    def test_record_fields(self, completed_run):
        config, record = completed_run
        assert record.status == "completed"
        assert len(record.history) == 2
        assert record.test_accuracy is not None
        assert record.parameter_count == models.count_parameters(
            models.build_model("modified_vgg16", (32, 32, 3), 3, 0.0625))
        assert record.class_names == ("covid", "normal", "viral_pneumonia")
        assert record.content_hash and len(record.content_hash) == 64
        assert record.error is None

    def test_artifacts_on_disk(self, completed_run):
        config, _ = completed_run
        out = config.output_dir
        from pathlib import Path
        names = {p.name for p in Path(out).iterdir()}
        assert {"config.json", "manifest.json", "run_record.json", "checkpoint.npz",
                "report.txt", "curves.csv", "curves.png",
                "confusion_matrix.png"} <= names

    def test_curves_csv_has_one_row_per_epoch(self, completed_run):
        config, _ = completed_run
        from pathlib import Path
        lines = Path(config.output_dir, "curves.csv").read_text().strip().splitlines()
        assert lines[0] == "epoch,train_loss,train_accuracy,validation_loss,validation_accuracy"
        assert len(lines) == 3

    def test_run_record_json_round_trips(self, completed_run):
        config, record = completed_run
        from pathlib import Path
        doc = json.loads(Path(config.output_dir, "run_record.json").read_text())
        assert doc["content_hash"] == record.content_hash
        assert doc["status"] == "completed"
        assert len(doc["confusion"]) == 3

    def test_identical_config_reproduces_hash(self, tiny_corpus_root, tmp_path,
                                              completed_run):
        _, first = completed_run
        again = train(make_config(tiny_corpus_root, tmp_path / "again"))
        assert again.content_hash == first.content_hash

    def test_different_seed_changes_hash(self, tiny_corpus_root, tmp_path,
                                         completed_run):
        _, first = completed_run
        other = train(make_config(
            tiny_corpus_root, tmp_path / "other",
            hyperparameters=Hyperparameters(epochs=2, batch_size=8, seed=11)))
        assert other.content_hash != first.content_hash

    def test_augmented_run_changes_hash_and_still_completes(
            self, tiny_corpus_root, tmp_path, completed_run):
        _, first = completed_run
        augmented = train(make_config(
            tiny_corpus_root, tmp_path / "aug",
            augmentation=AugmentationPolicy(rotation=True, horizontal_flip=True)))
        assert augmented.status == "completed"
        assert augmented.content_hash != first.content_hash

    def test_manifest_mode_config(self, tiny_corpus_root, tmp_path):
        manifest = resolve_manifest(make_config(tiny_corpus_root, tmp_path / "x"))
        mpath = tmp_path / "manifest.json"
        manifest.save(mpath)
        config = RunConfig(
            architecture="modified_vgg16",
            data=DataConfig(manifest=str(mpath)),
            output_dir=str(tmp_path / "mrun"),
            width_scale=0.0625, input_size=32,
            hyperparameters=Hyperparameters(epochs=1, batch_size=8, seed=10))
        record = train(config)
        assert record.status == "completed"


class TestCheckpoint:
    def test_round_trip_restores_weights(self, completed_run):
        config, _ = completed_run
        from pathlib import Path
        spec, params, meta = load_checkpoint(Path(config.output_dir, "checkpoint.npz"))
        assert spec.name == "modified_vgg16"
        assert meta["class_names"] == ["covid", "normal", "viral_pneumonia"]
        shapes = models.param_shapes(spec)
        for node, entry in shapes.items():
            for pname, shape in entry.items():
                assert params[node][pname].shape == shape

    def test_evaluate_matches_recorded_test_accuracy(self, completed_run):
        config, record = completed_run
        from pathlib import Path
        rep, cm = evaluate(Path(config.output_dir, "checkpoint.npz"), "test")
        assert abs(rep.accuracy - record.test_accuracy) < 1e-6
        assert cm.counts.sum() == 6  # three classes times two test records

    def test_evaluate_other_splits(self, completed_run):
        config, _ = completed_run
        from pathlib import Path
        for split_name, expected_n in (("validation", 6), ("train", 15)):
            _, cm = evaluate(Path(config.output_dir, "checkpoint.npz"), split_name)
            assert cm.counts.sum() == expected_n

    def test_truncated_weights_rejected(self, completed_run, tmp_path):
        config, _ = completed_run
        from pathlib import Path
        src = np.load(Path(config.output_dir, "checkpoint.npz"), allow_pickle=False)
        arrays = {k: src[k] for k in src.files}
        src.close()
        key = next(k for k in arrays if k.endswith("/weights"))
        arrays[key] = arrays[key][..., :-1]
        bad = tmp_path / "truncated.npz"
        np.savez(bad, **arrays)
        with pytest.raises(CheckpointError, match="shape"):
            load_checkpoint(bad)

    def test_meta_spec_hash_mismatch_rejected(self, completed_run, tmp_path):
        config, _ = completed_run
        from pathlib import Path
        src = np.load(Path(config.output_dir, "checkpoint.npz"), allow_pickle=False)
        arrays = {k: src[k] for k in src.files if k != "__meta__"}
        meta = json.loads(str(src["__meta__"][()]))
        src.close()
        meta["spec_hash"] = "0" * 64
        bad = tmp_path / "badhash.npz"
        np.savez(bad, __meta__=np.array(json.dumps(meta)), **arrays)
        with pytest.raises(CheckpointError, match="hash"):
            load_checkpoint(bad)

    def test_missing_parameter_rejected(self, completed_run, tmp_path):
        config, _ = completed_run
        from pathlib import Path
        src = np.load(Path(config.output_dir, "checkpoint.npz"), allow_pickle=False)
        arrays = {k: src[k] for k in src.files}
        src.close()
        victim = next(k for k in arrays if k.endswith("/bias"))
        del arrays[victim]
        bad = tmp_path / "missing.npz"
        np.savez(bad, **arrays)
        with pytest.raises(CheckpointError, match="missing"):
            load_checkpoint(bad)


class TestSweepDrivers:
    def test_ablation_child_config_layout(self, tiny_corpus_root, tmp_path):
        base = make_config(tiny_corpus_root, tmp_path / "sweep")
        policy = AugmentationPolicy(rotation=True, zoom=True)
        child = ablation_run_config(base, policy)
        assert child.augmentation == policy
        assert child.output_dir.endswith("runs/rotation+zoom")
        assert child.hyperparameters == base.hyperparameters

    def test_comparison_covers_all_architectures(self, tiny_corpus_root, tmp_path):
        config = make_config(
            tiny_corpus_root, tmp_path / "cmp",
            hyperparameters=Hyperparameters(epochs=1, batch_size=8, seed=10))
        rows = training.compare_architectures(config)
        assert [r["architecture"] for r in rows] == \
            ["modified_vgg16", "resnet50", "densenet121"]
        assert all(r["test_accuracy"] is not None for r in rows)
        csv_text = (tmp_path / "cmp" / "comparison.csv").read_text().splitlines()
        assert csv_text[0] == "architecture,parameter_count,test_accuracy,wall_seconds"
        assert len(csv_text) == 4
        assert (tmp_path / "cmp" / "comparison.png").exists()

    def test_failed_run_keeps_the_sweep_alive(self, tiny_corpus_root, tmp_path,
                                              monkeypatch):
        config = make_config(tiny_corpus_root, tmp_path / "fail")
        calls = {"n": 0}
        real_train = training.train

        def flaky(cfg):
            calls["n"] += 1
            if calls["n"] == 2:
                raise training.CheckpointError("synthetic failure")
            return real_train(cfg)

        monkeypatch.setattr(training, "train", flaky)
        rows = training.compare_architectures(config)
        assert rows[1]["test_accuracy"] is None
        assert rows[0]["test_accuracy"] is not None
        csv_rows = (tmp_path / "fail" / "comparison.csv").read_text().splitlines()
        assert csv_rows[2].split(",")[2] == ""  # empty accuracy cell


class TestNumericFailure:
    # the overflow itself is the scenario under test
    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_exploding_run_is_recorded_not_raised(self, tiny_corpus_root, tmp_path):
        config = make_config(
            tiny_corpus_root, tmp_path / "explode",
            hyperparameters=Hyperparameters(learning_rate=1e6, epochs=2,
                                            batch_size=8, seed=10))
        record = train(config)
        assert record.status == "failed"
        assert record.error
        assert record.test_accuracy is None
        assert record.content_hash is None
        doc = json.loads((tmp_path / "explode" / "run_record.json").read_text())
        assert doc["status"] == "failed"


class TestCommandLine:
    def test_synth_and_split(self, tmp_path, capsys):
        assert cli.main(["synth", "--out", str(tmp_path / "c"),
                         "--num-per-class", "3", "--image-size", "16"]) == 0
        assert cli.main(["split", "--root", str(tmp_path / "c"),
                         "--out", str(tmp_path / "m.json"),
                         "--counts", "1,1,1"]) == 0
        out = capsys.readouterr().out
        assert "wrote" in out
        manifest = json.loads((tmp_path / "m.json").read_text())
        assert len(manifest["records"]) == 9

    def test_split_fraction_mode(self, tiny_corpus_root, tmp_path):
        assert cli.main(["split", "--root", str(tiny_corpus_root),
                         "--out", str(tmp_path / "m.json"),
                         "--test-fraction", "0.2",
                         "--validation-fraction", "0.2"]) == 0

    def test_train_eval_cycle(self, completed_run, capsys):
        config, record = completed_run
        from pathlib import Path
        ckpt = str(Path(config.output_dir, "checkpoint.npz"))
        assert cli.main(["eval", "--checkpoint", ckpt, "--split", "test"]) == 0
        out = capsys.readouterr().out
        assert "Accuracy:" in out

    def test_train_reports_hash(self, tiny_corpus_root, tmp_path, capsys):
        config = make_config(tiny_corpus_root, tmp_path / "cli_run",
                             hyperparameters=Hyperparameters(epochs=1, batch_size=8,
                                                             seed=10))
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(config.to_json()))
        assert cli.main(["train", "--config", str(cfg_path)]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["status"] == "completed"

    def test_params_prints_count_and_trace(self, capsys):
        assert cli.main(["params", "--arch", "resnet50"]) == 0
        out = capsys.readouterr().out
        assert "23,593,859" in out
        assert "conv5_x" in out

    def test_gradcheck_subcommand(self, capsys):
        assert cli.main(["gradcheck", "--configs-per-kind", "1"]) == 0
        out = capsys.readouterr().out
        assert out.count("pass") == 8

    def test_bad_config_is_a_clean_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"architecture": "resnet50", "bogus": 1}')
        assert cli.main(["train", "--config", str(bad)]) == 1
        assert "error:" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert cli.main(["train", "--config", str(tmp_path / "nope.json")]) == 1
        assert "error:" in capsys.readouterr().err
