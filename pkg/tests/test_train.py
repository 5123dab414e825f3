import dataclasses

import numpy as np
import pytest

from shufflemixer import train as train_mod
from shufflemixer.config import RunConfig
from shufflemixer.tensor import NonFiniteError, Tensor
from shufflemixer.train import mean_foreground_dice, one_hot, segmentation_loss, train

TINY_RUN = RunConfig(preset="tiny", steps=3, batch_size=2, num_volumes=2, eval_every=3)


def _logits_for(labels, margin):
    return Tensor(one_hot(labels, 2, np.float64) * 2 * margin - margin, dtype=np.float64)


class TestLoss:
    def test_confident_correct_prediction_near_zero(self):
        lab = np.zeros((1, 4, 4, 4), np.uint8)
        lab[0, :2] = 1
        assert segmentation_loss(_logits_for(lab, 30.0), lab).data.item() < 1e-6

    def test_confident_wrong_prediction_large(self):
        lab = np.zeros((1, 4, 4, 4), np.uint8)
        lab[0, :2] = 1
        assert segmentation_loss(_logits_for(1 - lab, 30.0), lab).data.item() > 10

    def test_uniform_logits_value(self):
        lab = np.zeros((1, 2, 2, 2), np.uint8)
        lab[0, 0] = 1
        loss = segmentation_loss(Tensor(np.zeros((1, 2, 2, 2, 2))), lab).data.item()
        soft = (2 * 2 + 1e-5) / (4 + 4 + 1e-5)
        assert loss == pytest.approx(0.5 * (1 - soft) + 0.5 * np.log(2), rel=1e-12)


def test_mean_foreground_dice():
    lab = np.zeros((2, 2, 2, 2), np.uint8)
    lab[:, 0] = 1
    pred = lab.copy()
    pred[1] = 0
    assert mean_foreground_dice(pred, lab, 2) == 0.5


def test_same_seed_same_trace():
    a, b = train(TINY_RUN, log=lambda _: None), train(TINY_RUN, log=lambda _: None)
    assert a.losses == b.losses and len(a.losses) == 3
    c = train(dataclasses.replace(TINY_RUN, seed=1), log=lambda _: None)
    assert c.losses != a.losses


def test_loss_decreases_on_tiny():
    r = train(dataclasses.replace(TINY_RUN, steps=30, eval_every=30), log=lambda _: None)
    assert np.mean(r.losses[-5:]) < np.mean(r.losses[:5])


def test_ases_off_trains():
    r = train(dataclasses.replace(TINY_RUN, ases="off"), log=lambda _: None)
    assert all(np.isfinite(r.losses))


def test_checkpoints_written(tmp_path):
    lines = []
    r = train(TINY_RUN, log=lines.append, out_dir=tmp_path)
    assert (tmp_path / "final.smck").exists()
    assert (tmp_path / "best.smck").exists() == (r.best_dice > 0)
    assert lines[0].startswith("step=0 loss=")
    assert any("train_dice=" in line for line in lines)


def test_non_finite_input_detected(monkeypatch):
    real = train_mod.synth_dataset

    def poisoned(spec, seed):
        cases = real(spec, seed)
        cases[0][0][0, 0, 0, 0] = np.nan
        return cases

    monkeypatch.setattr(train_mod, "synth_dataset", poisoned)
    with pytest.raises(NonFiniteError):
        train(dataclasses.replace(TINY_RUN, batch_size=2), log=lambda _: None)
