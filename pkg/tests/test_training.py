"""Training tests: loss values, schedule, optimizer oracle, freezing,
determinism, and resume."""

import math

import numpy as np
import pytest

from lavseg import autodiff as ad
from lavseg.autodiff import Tensor
from lavseg.model import Model, load_model, save_model
from lavseg.training import (AdamW, DICE_EPS, LossWeights, ScheduleConfig,
                             Trainer, bce_loss, dice_loss, lr_at, mask_loss)

from conftest import tiny_config


# --- losses ------------------------------------------------------------------

def test_perfect_prediction_losses_vanish():
    gt = (np.arange(16).reshape(4, 4) % 2).astype(np.uint8)
    logits = Tensor(np.where(gt == 1, 50.0, -50.0))
    assert bce_loss(logits, gt).item() < 1e-6
    assert dice_loss(logits, gt).item() < 1e-6


def test_zero_logits_bce_is_ln2():
    gt = (np.random.default_rng(0).random((6, 6)) > 0.5).astype(np.uint8)
    assert math.isclose(bce_loss(Tensor(np.zeros((6, 6))), gt).item(),
                        math.log(2.0), abs_tol=1e-12)


def test_dice_loss_oracle():
    # scripted: prob p on a 2x2 grid, gt = [[1,0],[0,0]]
    gt = np.array([[1, 0], [0, 0]], dtype=np.uint8)
    logits = Tensor(np.zeros((2, 2)))  # sigmoid = 0.5 everywhere
    inter, psum, gsum = 0.5, 2.0, 1.0
    expect = 1.0 - (2 * inter + DICE_EPS) / (psum + gsum + DICE_EPS)
    assert math.isclose(dice_loss(logits, gt).item(), expect, abs_tol=1e-12)


def test_mask_loss_weights_and_contracts():
    gt = np.zeros((2, 2), dtype=np.uint8)
    logits = Tensor(np.zeros((2, 2)))
    b = bce_loss(logits, gt).item()
    d = dice_loss(logits, gt).item()
    total = mask_loss(logits, gt, LossWeights(2.0, 0.5)).item()
    assert math.isclose(total, 2.0 * b + 0.5 * d, abs_tol=1e-12)
    with pytest.raises(ad.ShapeError):
        mask_loss(logits, np.zeros((3, 3)))
    with pytest.raises(ValueError):
        mask_loss(logits, gt, LossWeights(-1.0, 1.0))


# --- schedule ----------------------------------------------------------------

def test_lr_schedule_points():
    sched = ScheduleConfig(base_lr=1e-3, warmup_steps=100, total_steps=1000)
    assert lr_at(0, sched) == 0.0
    assert math.isclose(lr_at(50, sched), 5e-4)
    assert math.isclose(lr_at(100, sched), 1e-3)
    assert math.isclose(lr_at(550, sched), 5e-4)
    assert lr_at(1000, sched) == 0.0
    with pytest.raises(ValueError):
        lr_at(1001, sched)
    with pytest.raises(ValueError):
        ScheduleConfig(warmup_steps=0, total_steps=10)
    with pytest.raises(ValueError):
        ScheduleConfig(warmup_steps=10, total_steps=10)


# --- optimizer ---------------------------------------------------------------

def test_adamw_first_step_oracle():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = AdamW({"p": p}, weight_decay=0.0)
    g = np.array([0.5, -0.25])
    opt.step({"p": g}, lr=0.1)
    # after bias correction the first step is lr * g / (|g| + eps)
    expect = np.array([1.0, -2.0]) - 0.1 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.data, expect, rtol=1e-9)


def test_adamw_decoupled_weight_decay():
    p = Tensor(np.array([4.0]), requires_grad=True)
    opt = AdamW({"p": p}, weight_decay=0.01)
    opt.step({"p": np.zeros(1)}, lr=0.5)
    # zero gradient: only the decay term moves the parameter
    np.testing.assert_allclose(p.data, [4.0 * (1.0 - 0.5 * 0.01)], rtol=1e-12)


def test_adamw_state_round_trip():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW({"p": p})
    opt.step({"p": np.array([0.3])}, lr=0.01)
    state = opt.state_tensors()
    q = Tensor(np.array([1.0]), requires_grad=True)
    opt2 = AdamW({"p": q})
    opt2.load_state(state)
    assert opt2.step_count == 1
    np.testing.assert_array_equal(opt2.m["p"], opt.m["p"])
    np.testing.assert_array_equal(opt2.v["p"], opt.v["p"])


# --- training loop -----------------------------------------------------------

def test_training_deterministic_and_loss_finite(tiny_train_samples):
    cfg = tiny_config()

    def run():
        model = Model(cfg)
        tr = Trainer(model, tiny_train_samples, cfg)
        tr.train(3)
        return model, tr

    m1, t1 = run()
    m2, t2 = run()
    assert t1.loss_log == t2.loss_log
    assert all(np.isfinite(l) for _, _, l in t1.loss_log)
    for name, t in m1.params().items():
        np.testing.assert_array_equal(t.data, m2.params()[name].data)


def test_frozen_groups_untouched(tiny_train_samples):
    cfg = tiny_config()
    model = Model(cfg)
    before = {name: t.data.copy() for name, t in model.params().items()}
    Trainer(model, tiny_train_samples, cfg).train(3)
    changed_trainable = 0
    for name, t in model.params().items():
        if t.requires_grad:
            changed_trainable += int(not np.array_equal(before[name], t.data))
        else:
            np.testing.assert_array_equal(before[name], t.data, err_msg=name)
    assert changed_trainable > 0


def test_resume_matches_straight_run(tiny_train_samples, tmp_path):
    cfg = tiny_config()
    straight = Model(cfg)
    Trainer(straight, tiny_train_samples, cfg).train(4)

    model = Model(cfg)
    tr = Trainer(model, tiny_train_samples, cfg)
    tr.train(2)
    tr.save(tmp_path / "mid.slv")

    resumed, extra = load_model(tmp_path / "mid.slv")
    tr2 = Trainer(resumed, tiny_train_samples, cfg)
    tr2.load_state(extra)
    assert tr2.step_count == 2
    tr2.train(2)
    for name, t in straight.params().items():
        np.testing.assert_array_equal(t.data, resumed.params()[name].data,
                                      err_msg=name)


def test_empty_training_set_rejected():
    cfg = tiny_config()
    with pytest.raises(ValueError):
        Trainer(Model(cfg), [], cfg)


def test_loss_log_written(tiny_train_samples, tmp_path):
    cfg = tiny_config()
    tr = Trainer(Model(cfg), tiny_train_samples, cfg)
    tr.train(2)
    path = tmp_path / "loss.csv"
    tr.write_log(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "step,lr,loss"
    assert len(lines) == 3


def test_micro_batch_loss_matches_per_sample(tiny_train_samples):
    cfg = tiny_config()
    model = Model(cfg)
    tr = Trainer(model, tiny_train_samples, cfg)
    batch = tiny_train_samples[:2]
    batched = tr.micro_batch_loss(batch).item()
    singles = [mask_loss(model.forward_first_frame(s).logits,
                         s.target_masks[0], cfg.train).item() for s in batch]
    assert abs(batched - float(np.mean(singles))) < 1e-10
