"""
Tests for the optimizer, metrics, run configuration and training loop
"""

import json
import logging

import numpy as np
import pandas as pd
import pytest

import training.trainer as trainer_module
from ai_models.model_zoo import build_variant
from config.run_config import RunConfig
from core.exceptions import (
    ConfigurationError,
    DimensionError,
    DivergenceError,
    GrammarError,
    MetricError,
    NumericError,
    RunConfigError,
)
from core.tensor import Tensor
from core.trg_block import NamedParameter
from monitoring.resource_monitor import ResourceMonitor
from synthetic.grammar import generate
from synthetic.sampling import sample_frames
from training.metrics import (
    MetricsLog,
    MetricsReport,
    average_precision,
    mean_average_precision,
    rank_classes,
    topk_precision,
)
from training.optimizer import OptimizerState, Schedule, lr_at, sgd_step
from training.trainer import Trainer, train
from utils.helpers import substream


def scalar_param(value=1.0, group="spatial_transform"):
    return NamedParameter("w", Tensor([value], dtype=np.float64), group)


class TestSchedule:
    def test_step_drop(self):
        schedule = Schedule()
        assert lr_at(49, schedule) == pytest.approx(0.001)
        assert lr_at(50, schedule) == pytest.approx(0.0001)

    def test_drop_epoch_must_be_inside_run(self):
        with pytest.raises(ConfigurationError):
            Schedule(drop_epoch=100, epochs=100).validate()


class TestSgd:
    def test_worked_example(self):
        param = scalar_param()
        state = OptimizerState(lr=0.001, momentum=0.9, weight_decay=5e-4)
        sgd_step([param], state, [np.array([0.1])])
        assert param.tensor.data[0] == pytest.approx(0.99980905, abs=1e-12)
        assert state.velocity["w"][0] == pytest.approx(0.1005, abs=1e-12)

    def test_batchnorm_terms_skip_decay(self):
        param = scalar_param(group="batchnorm")
        sgd_step([param], OptimizerState(), [np.array([0.0])])
        assert param.tensor.data[0] == 1.0

    def test_plain_momentum(self):
        param = scalar_param()
        state = OptimizerState(lr=0.1, momentum=0.5, weight_decay=0.0, nesterov=False)
        for _ in range(2):
            sgd_step([param], state, [np.array([1.0])])
        # v1 = 1, v2 = 1.5
        assert param.tensor.data[0] == pytest.approx(1.0 - 0.1 - 0.15)

    def test_uses_accumulated_gradients(self):
        param = scalar_param()
        param.tensor.grad = np.array([2.0])
        sgd_step([param], OptimizerState(lr=0.5, momentum=0.0, weight_decay=0.0))
        assert param.tensor.data[0] == pytest.approx(0.0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            sgd_step([scalar_param()], OptimizerState(), [np.zeros(2)])

    def test_matches_torch_nesterov(self, rng):
        torch = pytest.importorskip("torch")
        start = rng.standard_normal(3)
        grads = [rng.standard_normal(3) for _ in range(4)]

        param = NamedParameter("p", Tensor(start, dtype=np.float64), "spatial_transform")
        state = OptimizerState(lr=0.01, momentum=0.9, weight_decay=5e-4, nesterov=True)
        reference = torch.tensor(start, requires_grad=True)
        optimizer = torch.optim.SGD([reference], lr=0.01, momentum=0.9, weight_decay=5e-4, nesterov=True)
        for g in grads:
            sgd_step([param], state, [g])
            reference.grad = torch.tensor(g)
            optimizer.step()
        np.testing.assert_allclose(param.tensor.data, reference.detach().numpy(), atol=1e-12)


class TestMetrics:
    def test_rank_ties_keep_index_order(self):
        np.testing.assert_array_equal(rank_classes(np.array([1.0, 2.0, 2.0])), [1, 2, 0])

    def test_topk(self):
        ranked = [[0, 1], [1, 0]]
        assert topk_precision(ranked, [0, 0], 1) == 0.5
        assert topk_precision(ranked, [0, 0], 2) == 1.0

    def test_topk_errors(self):
        with pytest.raises(MetricError):
            topk_precision([], [], 1)
        with pytest.raises(MetricError):
            topk_precision([[0]], [0], 2)

    def test_average_precision_worked_example(self):
        ap = average_precision(np.array([4.0, 3.0, 2.0, 1.0]), np.array([1, 0, 1, 0]))
        assert ap == pytest.approx(0.8333, abs=1e-4)

    def test_single_positive_ranked_last(self):
        assert average_precision(np.arange(5, 0, -1), np.array([0, 0, 0, 0, 1])) == pytest.approx(1 / 5)

    def test_map_skips_empty_classes(self):
        scores = np.array([[0.9, 0.1, 0.5], [0.2, 0.8, 0.4]])
        labels = np.array([[1, 0, 0], [0, 1, 0]])
        assert mean_average_precision(scores, labels) == pytest.approx(1.0)
        with pytest.raises(MetricError):
            mean_average_precision(scores, np.zeros_like(labels))

    def test_map_matches_sklearn(self, rng):
        metrics = pytest.importorskip("sklearn.metrics")
        for _ in range(25):
            scores = rng.random((12, 4))
            labels = (rng.random((12, 4)) < 0.4).astype(int)
            labels[0] = 1
            expected = np.mean([metrics.average_precision_score(labels[:, c], scores[:, c]) for c in range(4)])
            assert mean_average_precision(scores, labels) == pytest.approx(expected, abs=1e-12)

    def test_topk_matches_brute_force(self, rng):
        for _ in range(50):
            scores = rng.random((6, 5))
            truths = rng.integers(0, 5, 6)
            brute = np.mean([t in np.argsort(-s)[:3] for s, t in zip(scores, truths)])
            assert topk_precision(rank_classes(scores), truths, 3) == pytest.approx(brute)

    def test_metrics_csv(self, tmp_path):
        log = MetricsLog()
        log.append(MetricsReport(0, "train", 1.5, 0.25, 0.75))
        log.append(MetricsReport(0, "val", 1.25, 0.5, 1.0, map=0.6))
        path = log.to_csv(tmp_path / "metrics.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,split,loss,top1,top5,map"
        assert lines[1] == "0,train,1.500000,0.250000,0.750000,"
        assert lines[2] == "0,val,1.250000,0.500000,1.000000,0.600000"
        assert log.best("val").top1 == 0.5
        assert log.last("train").loss == 1.5


class TestRunConfig:
    def test_defaults_validate(self):
        config = RunConfig().validate()
        assert config.model_config().num_classes == 6
        assert config.schedule().drop_epoch == 15

    def test_unknown_keys(self):
        with pytest.raises(RunConfigError, match="unknown config keys: colour"):
            RunConfig.from_dict({"colour": "red"})

    def test_string_bool_rejected(self):
        with pytest.raises(RunConfigError, match="batchnorm must be bool"):
            RunConfig.from_dict({"batchnorm": "false"})

    def test_string_number_rejected(self):
        with pytest.raises(RunConfigError, match="epochs must be int"):
            RunConfig.from_dict({"epochs": "30"})

    def test_bool_is_not_an_int(self):
        with pytest.raises(RunConfigError, match="heads"):
            RunConfig.from_dict({"heads": True})

    def test_int_accepted_for_float(self):
        assert RunConfig.from_dict({"noise": 0, "learning_rate": 1}).noise == 0

    def test_optional_and_list_elements(self):
        assert RunConfig.from_dict({"similarity_width": None, "dataset": None}).similarity_width is None
        with pytest.raises(RunConfigError, match="similarity_width must be int or null"):
            RunConfig.from_dict({"similarity_width": 2.5})
        with pytest.raises(RunConfigError, match="heads_sweep must be list of int"):
            RunConfig.from_dict({"heads_sweep": [1, "2"]})
        with pytest.raises(RunConfigError, match="class_strings"):
            RunConfig.from_dict({"class_strings": "A,B"})

    def test_validate_checks_types_of_direct_construction(self):
        with pytest.raises(RunConfigError, match="epochs"):
            RunConfig(epochs="30").validate()

    def test_load_layers_defaults_under_file(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"seed": 3, "workers": 2}))
        config = RunConfig.load(path, {"workers": 4, "out_dir": "elsewhere"})
        assert (config.seed, config.workers, config.out_dir) == (3, 2, "elsewhere")

    def test_load_errors(self, tmp_path):
        with pytest.raises(RunConfigError, match="not found"):
            RunConfig.load(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{ not json")
        with pytest.raises(RunConfigError, match="invalid JSON"):
            RunConfig.load(bad)

    def test_override_ignores_none(self):
        config = RunConfig().override(seed=None, heads=5)
        assert (config.seed, config.heads) == (7, 5)

    def test_dumps_round_trip(self):
        config = RunConfig(seed=99, class_strings=["A,B", "B,A"])
        assert RunConfig.from_dict(json.loads(config.dumps())) == config

    def test_dense_window_must_fit(self):
        with pytest.raises(RunConfigError, match="dense window"):
            RunConfig(sampling="dense").validate()

    def test_grammar_errors_propagate(self):
        with pytest.raises(GrammarError):
            RunConfig(class_strings=["A,B", "C"]).validate()

    def test_seed_range(self):
        with pytest.raises(RunConfigError):
            RunConfig(seed=-1).validate()


class TestTrainer:
    def test_fit_writes_metrics_and_checkpoint(self, tiny_config, tiny_splits, tmp_path, caplog):
        caplog.set_level(logging.INFO, logger="training.trainer")
        train_set, val_set = tiny_splits
        model = build_variant(tiny_config.model_config(), substream(tiny_config.seed, "init"))
        log, _ = train(model, train_set, val_set, tiny_config, tmp_path)
        assert len(log.reports) == 4
        frame = pd.read_csv(tmp_path / "metrics.csv")
        assert list(frame["split"]) == ["train", "val", "train", "val"]
        assert np.isfinite(frame["loss"]).all()
        assert frame["top1"].between(0, 1).all()
        assert (tmp_path / "model.trgw").exists()
        assert "Peak RSS during training" in caplog.text

    def test_training_is_deterministic(self, tiny_config, tiny_splits):
        train_set, val_set = tiny_splits
        frames = []
        for _ in range(2):
            model = build_variant(tiny_config.model_config(), substream(tiny_config.seed, "init"))
            log, _ = train(model, train_set, val_set, tiny_config)
            frames.append(log.to_frame())
        pd.testing.assert_frame_equal(frames[0], frames[1])

    def test_training_changes_parameters(self, tiny_config, tiny_splits):
        train_set, _ = tiny_splits
        model = build_variant(tiny_config.model_config(), substream(tiny_config.seed, "init"))
        before = model.classifier_weight.data.copy()
        Trainer(model, tiny_config).train_epoch(train_set, 0)
        assert not np.array_equal(before, model.classifier_weight.data)

    def test_top5_on_few_classes_is_reported_as_top_k(self, tiny_config, tiny_splits, caplog):
        config = tiny_config.override(class_strings=["A,B", "B,A", "C"])
        model = build_variant(config.model_config(), substream(config.seed, "init"))
        _, val_set = tiny_splits
        val_set = val_set.subset(range(3))
        val_set.num_classes = 3
        report = Trainer(model, config).evaluate(val_set)
        assert report.top5 == 1.0
        assert "top-5 is reported as top-3" in caplog.text

    def test_multi_clip_evaluation(self, tiny_config, tiny_splits):
        _, val_set = tiny_splits
        model = build_variant(tiny_config.model_config(), substream(tiny_config.seed, "init"))
        trainer = Trainer(model, tiny_config)
        report = trainer.evaluate(val_set, num_clips=3)
        assert report.split == "val"
        assert 0.0 <= report.top1 <= 1.0

    def test_multi_label_reports_map(self, tiny_config):
        from synthetic.grammar import generate

        config = tiny_config.override(label_mode="multi", epochs=1, drop_epoch=0)
        dataset = generate(config.grammar(), 18, config.seed)
        train_set, val_set = dataset.split(12)
        model = build_variant(config.model_config(), substream(config.seed, "init"))
        log, _ = train(model, train_set, val_set, config)
        assert log.last("val").map is not None

    def test_zero_classifier_scores_chance(self, tiny_config, tiny_splits):
        _, val_set = tiny_splits
        model = build_variant(tiny_config.model_config(), substream(tiny_config.seed, "init"))
        model.classifier_weight.data[...] = 0.0
        report = Trainer(model, tiny_config).evaluate(val_set, epoch=0)
        assert report.top1 == pytest.approx(1.0 / val_set.num_classes)

    def test_loss_falls_over_first_epochs(self, tiny_config, tiny_splits):
        config = tiny_config.override(epochs=5, drop_epoch=4)
        train_set, val_set = tiny_splits
        model = build_variant(config.model_config(), substream(config.seed, "init"))
        log, _ = train(model, train_set, val_set, config)
        losses = [r.loss for r in log.reports if r.split == "train"]
        assert len(losses) == 5
        assert losses[-1] < losses[0]

    def test_trained_model_sees_a_frame_swap(self, tiny_config, tiny_splits):
        train_set, val_set = tiny_splits
        model = build_variant(tiny_config.model_config(), substream(tiny_config.seed, "init"))
        train(model, train_set, val_set, tiny_config)
        dataset = generate(tiny_config.grammar(), 100, tiny_config.seed + 1)
        changed = 0
        for sample in dataset.samples:
            clip = sample_frames(sample.frames, tiny_config.frames, tiny_config.sampling, tiny_config.stride)
            swapped = clip.data.copy()
            swapped[[0, -1]] = swapped[[-1, 0]]
            changed += not np.allclose(model.logits(clip).data, model.logits(Tensor(swapped)).data, atol=1e-6)
        assert changed >= 95

    def test_order_aware_model_beats_order_blind_on_reversed_pairs(self, tiny_config):
        config = tiny_config.override(class_strings=["A,B", "B,A"], learning_rate=0.01, epochs=5, drop_epoch=4)
        dataset = generate(config.grammar(), 24, config.seed)
        train_set, val_set = dataset.split(16)
        clips = [
            sample_frames(s.frames, config.frames, config.sampling, config.stride, dtype=np.float64).data
            for i, s in enumerate(val_set.samples) if val_set.class_of(i) == 0
        ]

        def pair_accuracy(model):
            hits = 0
            for clip in clips:
                hits += int(np.argmax(model.logits(Tensor(clip, dtype=np.float64)).data)) == 0
                hits += int(np.argmax(model.logits(Tensor(clip[::-1], dtype=np.float64)).data)) == 1
            return hits / (2 * len(clips))

        accuracy = {}
        for variant in ("avgpool", "full"):
            variant_config = config.override(variant=variant)
            model = build_variant(variant_config.model_config(dtype="float64"), substream(config.seed, "init"))
            train(model, train_set, val_set, variant_config)
            accuracy[variant] = pair_accuracy(model)
        # a clip and its reversal pool to the same features
        assert accuracy["avgpool"] == 0.5
        assert accuracy["full"] > accuracy["avgpool"]

    def test_divergence_is_reported(self, tiny_config, tiny_splits, monkeypatch):
        def explode(params, state, grads=None):
            raise NumericError("sgd produced non-finite values")

        monkeypatch.setattr(trainer_module, "sgd_step", explode)
        model = build_variant(tiny_config.model_config(), substream(tiny_config.seed, "init"))
        with pytest.raises(DivergenceError) as info:
            Trainer(model, tiny_config).train_epoch(tiny_splits[0], 0)
        assert (info.value.epoch, info.value.step) == (0, 0)

    def test_resource_monitor_snapshot(self):
        monitor = ResourceMonitor()
        snapshot = monitor.log_snapshot("test")
        assert snapshot["label"] == "test"
        assert snapshot["memory_mb"] > 0
        assert monitor.peak_memory_mb() == snapshot["memory_mb"]
