import math

import numpy as np
import pytest
import torch

from mamkit.gradcheck import TOY
from mamkit.model import MamNet
from mamkit.synth import SyntheticSpec, synth_generate
from mamkit.training import (
    DataError,
    TrainConfig,
    build_configs,
    evaluate,
    load_checkpoint,
    parse_config_text,
    read_checkpoint,
    save_checkpoint,
    train,
    write_run_log,
)

SPEC = SyntheticSpec(canvas=32)


@pytest.fixture(scope="module")
def data():
    return synth_generate(48, 1, SPEC, fractions=(32 / 48, 8 / 48, 8 / 48))


def snapshot(model):
    return {k: v.clone() for k, v in model.state_dict().items()}


def test_zero_learning_rate_is_a_null_update(data):
    model = MamNet(TOY, seed=0)
    before = snapshot(model)
    cfg = TrainConfig(lr_cnn=0.0, lr_transformer=0.0, epochs=1, seed=0)
    train(model, data.split("train"), data.split("val"), cfg)
    after = model.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_first_epoch_loss_near_uniform(data):
    model = MamNet(TOY, seed=3)
    cfg = TrainConfig(lr_cnn=0.0, lr_transformer=0.0, epochs=1)
    result = train(model, data.split("train"), data.split("val"), cfg)
    assert abs(result.history[0].train_loss - 4 * math.log(4)) <= 0.5


def test_loss_decreases_on_training_data(data):
    model = MamNet(TOY, seed=1)
    cfg = TrainConfig(lr_cnn=3e-3, lr_transformer=3e-3, epochs=4, patience=10, augment=False)
    result = train(model, data.split("train"), data.split("val"), cfg)
    assert result.history[-1].train_loss < result.history[0].train_loss


def test_training_is_bit_reproducible(data, tmp_path):
    runs = []
    for name in ("a", "b"):
        model = MamNet(TOY, seed=5)
        result = train(model, data.split("train"), data.split("val"), TrainConfig(epochs=2, seed=5))
        write_run_log(tmp_path / f"{name}.jsonl", result.history)
        save_checkpoint(tmp_path / f"{name}.bin", model)
        runs.append(result)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_checkpoint_round_trip_preserves_evaluation(data, tmp_path):
    model = MamNet(TOY, seed=2)
    images, labels = data.split("test")
    before = evaluate(model, images, labels, trials=2, seed=4)
    save_checkpoint(tmp_path / "ck.bin", model, {"epoch": 3})
    loaded, meta = load_checkpoint(tmp_path / "ck.bin")
    assert meta == {"epoch": 3} and loaded.config == model.config
    after = evaluate(loaded, images, labels, trials=2, seed=4)
    assert after.average == before.average
    assert all(np.array_equal(a, b) for a, b in zip(before.predictions, after.predictions))


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.bin")
    (tmp_path / "bad.bin").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        read_checkpoint(tmp_path / "bad.bin")
    model = MamNet(TOY, seed=0)
    save_checkpoint(tmp_path / "ok.bin", model)
    (tmp_path / "long.bin").write_bytes((tmp_path / "ok.bin").read_bytes() + b"\0")
    with pytest.raises(ValueError):
        read_checkpoint(tmp_path / "long.bin")


def test_equal_trial_seeds_give_equal_reports(data):
    model = MamNet(TOY, seed=0)
    images, labels = data.split("test")
    result = evaluate(model, images, labels, trials=3, trial_seeds=[9, 9, 9])
    assert result.trials[0] == result.trials[1] == result.trials[2]
    assert all(result.average[key] == result.trials[0][key] for key in result.average.cells)


def test_trial_seed_count_checked(data):
    with pytest.raises(ValueError):
        evaluate(MamNet(TOY), *data.split("test"), trials=2, trial_seeds=[1])


def test_empty_split(data):
    model = MamNet(TOY)
    empty = (np.empty((0, 32, 32, 3), np.uint8), np.empty((0, 4), np.int64))
    with pytest.raises(DataError):
        train(model, empty, data.split("val"), TrainConfig(epochs=1))
    with pytest.raises(DataError):
        train(model, data.split("train"), empty, TrainConfig(epochs=1))
    with pytest.raises(DataError):
        evaluate(model, *empty)


def test_early_exit_keeps_best_weights(data):
    model = MamNet(TOY, seed=4)
    cfg = TrainConfig(lr_cnn=0.05, lr_transformer=0.05, epochs=6, patience=2, augment=False)
    states = {}
    result = train(model, data.split("train"), data.split("val"), cfg,
                   on_epoch=lambda e: states.__setitem__(e.epoch, snapshot(model)))
    best = min(result.history, key=lambda e: e.val_loss)
    assert result.best_epoch == best.epoch
    assert all(best.val_loss <= e.val_loss for e in result.history)
    final = model.state_dict()
    assert all(torch.equal(final[k], states[best.epoch][k]) for k in final)
    # patience ends the run early once the validation loss stops improving
    assert len(result.history) <= min(cfg.epochs, best.epoch + cfg.patience)


class TestConfig:
    def test_parse(self):
        values = parse_config_text("# run\nbatch_size = 4\nrates: 1/16, 1/8, 1/4, 1/2\nmodel_width = 32 # small\n")
        assert values == {"batch_size": "4", "rates": "1/16, 1/8, 1/4, 1/2", "model_width": "32"}

    def test_layering(self):
        file_values = parse_config_text("seed = 1\nepochs = 5\nmodel_width = 32\nheads = 2\n")
        flags = {"epochs": "7", "lr_cnn": None}
        train_cfg, mam = build_configs({**file_values, **{k: v for k, v in flags.items() if v is not None}},
                                       environ={})
        assert (train_cfg.seed, train_cfg.epochs, train_cfg.lr_cnn) == (1, 7, 2e-4)
        assert (mam.width, mam.heads) == (32, 2)
        train_cfg, _ = build_configs(file_values, environ={"MAMKIT_SEED": "42"})
        assert train_cfg.seed == 42

    def test_rates(self):
        _, mam = build_configs({"rates": "1/4,1/2,1,1"}, environ={})
        assert mam.rates == (0.25, 0.5, 1.0, 1.0)

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            build_configs({"learning_rate": "1"}, environ={})

    def test_malformed_line(self):
        with pytest.raises(ValueError):
            parse_config_text("just words")
