import logging

import numpy as np
import pytest

from models.ahp_net import AhpNet, ModelConfig
from models.trainer import Trainer, TrainConfig, smoothed, split_dataset
from tools.file_tools import read_checkpoint, read_csv
from tools.inversion_tools import CgSettings
from tools.simulation_tools import DatasetSample, simulate_dataset
from utils.error_handling import NumericalError, ValidationError, get_error_metrics

MODEL = ModelConfig(stages=1, cnn_depth=3, cnn_channels=4, cg=CgSettings(max_iters=200, rel_tolerance=1e-6))


@pytest.fixture(scope="module")
def samples(A16):
    return simulate_dataset(A16, 4, seed=5, dose=1e4)


def train_config(**overrides):
    values = dict(epochs=2, batch_size=2, lr=1e-3, seed=11, checkpoint_every=1, validation_fraction=0.25)
    values.update(overrides)
    return TrainConfig(**values)


def test_split_keeps_at_least_one_training_sample(samples):
    train, val = split_dataset(samples, 0.25)
    assert len(train) == 3 and len(val) == 1
    train, val = split_dataset(samples[:1], 0.5)
    assert len(train) == 1 and val == []


def test_smoothed_is_a_trailing_mean():
    assert smoothed([1.0, 3.0, 5.0, 7.0], window=2) == [1.0, 2.0, 4.0, 6.0]


def test_training_needs_a_learnable_stage(A16):
    model = AhpNet(ModelConfig(stages=0), A16, seed=0)
    with pytest.raises(ValidationError):
        Trainer(model, train_config())


def test_empty_dataset_is_rejected(A16):
    trainer = Trainer(AhpNet(MODEL, A16, seed=0), train_config())
    with pytest.raises(ValidationError):
        trainer.train([])


def test_zero_learning_rate_leaves_parameters_unchanged(A16, samples):
    model = AhpNet(MODEL, A16, seed=0)
    before = {name: param.value.copy() for name, param in model.params.items()}
    Trainer(model, train_config(lr=0.0, epochs=1)).train(samples)
    for name, param in model.params.items():
        assert np.array_equal(param.value, before[name])


def test_training_writes_report_and_checkpoints(A16, samples, tmp_path):
    model = AhpNet(MODEL, A16, seed=0)
    report = Trainer(model, train_config(), checkpoint_dir=tmp_path).train(samples)
    assert len(report.epochs) == 2
    assert all(np.isfinite(loss) for loss in report.losses)
    assert [p.name for p in report.checkpoints] == ["epoch_0001.ahpc", "epoch_0002.ahpc", "final.ahpc"]
    rows = read_csv(tmp_path / "training_report.csv")
    assert [row["epoch"] for row in rows] == ["1", "2"]
    assert read_checkpoint(tmp_path / "final.ahpc")["train.epoch"][0] == 2.0


def test_same_seed_writes_identical_checkpoints(A16, samples, tmp_path):
    for name in ("a", "b"):
        model = AhpNet(MODEL, A16, seed=3)
        Trainer(model, train_config(epochs=1), checkpoint_dir=tmp_path / name).train(samples)
    assert (tmp_path / "a" / "final.ahpc").read_bytes() == (tmp_path / "b" / "final.ahpc").read_bytes()


def test_resume_continues_the_uninterrupted_run(A16, samples, tmp_path):
    straight = AhpNet(MODEL, A16, seed=3, dtype=np.float32)
    Trainer(straight, train_config(), checkpoint_dir=tmp_path / "straight").train(samples)

    first_half = AhpNet(MODEL, A16, seed=3, dtype=np.float32)
    Trainer(first_half, train_config(epochs=1), checkpoint_dir=tmp_path / "first").train(samples)

    resumed = AhpNet(MODEL, A16, seed=99, dtype=np.float32)
    tensors = resumed.load_checkpoint(tmp_path / "first" / "final.ahpc")
    start = int(tensors["train.epoch"][0])
    assert start == 1
    Trainer(resumed, train_config(), checkpoint_dir=tmp_path / "resumed").train(samples, start_epoch=start)

    straight_final = (tmp_path / "straight" / "final.ahpc").read_bytes()
    assert (tmp_path / "resumed" / "final.ahpc").read_bytes() == straight_final


def test_non_finite_loss_stops_training_with_a_dump(A16, samples, tmp_path):
    broken = [
        DatasetSample(s.sample_id, np.full_like(s.phantom, np.nan), s.sinogram, s.dose, s.seed)
        for s in samples
    ]
    trainer = Trainer(AhpNet(MODEL, A16, seed=0), train_config(), checkpoint_dir=tmp_path)
    with pytest.raises(NumericalError) as excinfo:
        trainer.train(broken)
    dump = excinfo.value.dump_path
    assert dump is not None
    tensors = read_checkpoint(dump)
    assert "batch.sinogram" in tensors
    assert np.all(np.isnan(tensors["batch.truth"]))


def test_capped_inversions_are_counted_and_logged(A16, samples, caplog):
    capped = ModelConfig(stages=1, cnn_depth=3, cnn_channels=4, cg=CgSettings(max_iters=1, rel_tolerance=1e-12))
    before = get_error_metrics().category_counts["convergence"]
    with caplog.at_level(logging.WARNING):
        report = Trainer(AhpNet(capped, A16, seed=0), train_config(epochs=1, lr=0.0)).train(samples)
    assert report.cg_failures > 0
    assert get_error_metrics().category_counts["convergence"] > before
    messages = [record.getMessage() for record in caplog.records]
    assert any("ConvergenceError" in m and "'operation': 'train_step'" in m for m in messages)
    assert any("training inversions missed the CG tolerance" in m for m in messages)
