"""Loss, optimizer, schedule, and the end-to-end training loop.

Supervision touches frame 0 only: the fusion path sees the whole video,
the segmenter decodes the first frame, and the mask loss (weighted BCE +
soft Dice) drives everything trainable. Gradients accumulate over
``accum`` micro-batches per optimizer step; frozen groups are never
updated. Everything is deterministic for a fixed (config, seed, data).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lavseg import autodiff as ad
from lavseg.autodiff import Tape, Tensor
from lavseg.config import RunConfig
from lavseg.data import VideoSample
from lavseg.model import Model, save_model

DICE_EPS = 1.0


@dataclass
class LossWeights:
    lambda_bce: float = 1.0
    lambda_dice: float = 1.0


def bce_loss(logits: Tensor, gt: np.ndarray) -> Tensor:
    return ad.bce_with_logits_mean(logits, Tensor(gt.astype(np.float64)))


def dice_loss(logits: Tensor, gt: np.ndarray) -> Tensor:
    g = gt.astype(np.float64)
    p = ad.sigmoid(logits)
    inter = ad.sum_(ad.mul(p, Tensor(g)))
    num = ad.add_const(ad.scale(inter, 2.0), DICE_EPS)
    den = ad.add_const(ad.sum_(p), float(g.sum()) + DICE_EPS)
    return ad.add_const(ad.scale(ad.div(num, den), -1.0), 1.0)


def mask_loss(logits: Tensor, gt: np.ndarray,
              w: LossWeights = LossWeights()) -> Tensor:
    if logits.shape != gt.shape:
        raise ad.ShapeError(f"mask_loss: logits {logits.shape} vs gt {gt.shape}")
    if w.lambda_bce < 0 or w.lambda_dice < 0:
        raise ValueError("loss weights must be non-negative")
    return ad.add(ad.scale(bce_loss(logits, gt), w.lambda_bce),
                  ad.scale(dice_loss(logits, gt), w.lambda_dice))


@dataclass
class ScheduleConfig:
    base_lr: float = 1e-4
    warmup_steps: int = 100
    total_steps: int = 1000

    def __post_init__(self):
        if not 0 < self.warmup_steps < self.total_steps:
            raise ValueError("need 0 < warmup_steps < total_steps")


def lr_at(step: int, sched: ScheduleConfig) -> float:
    """Linear ramp 0 -> base over warmup, then linear decay to 0 at total."""
    if step < 0 or step > sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps}]")
    if step <= sched.warmup_steps:
        return sched.base_lr * step / sched.warmup_steps
    return sched.base_lr * (sched.total_steps - step) / (sched.total_steps - sched.warmup_steps)


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter map."""

    def __init__(self, params: dict[str, Tensor], weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                                    + self.weight_decay * p.data)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{k}": v for k, v in self.m.items()}
        out |= {f"opt.v.{k}": v for k, v in self.v.items()}
        out["opt.step"] = np.array(float(self.step_count))
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        for k in self.m:
            self.m[k] = tensors[f"opt.m.{k}"].copy()
            self.v[k] = tensors[f"opt.v.{k}"].copy()
        self.step_count = int(tensors["opt.step"].item())


class Trainer:
    def __init__(self, model: Model, samples: list[VideoSample], cfg: RunConfig):
        if not samples:
            raise ValueError("empty training set")
        self.model = model
        self.samples = samples
        self.cfg = cfg
        self.weights = LossWeights(cfg.train.lambda_bce, cfg.train.lambda_dice)
        self.sched = ScheduleConfig(base_lr=cfg.train.lr,
                                    warmup_steps=cfg.train.warmup,
                                    total_steps=cfg.train.total_steps)
        self.opt = AdamW(model.trainable_params(),
                         weight_decay=cfg.train.weight_decay)
        self.step_count = 0
        self._cursor = 0
        self.loss_log: list[tuple[int, float, float]] = []  # (step, lr, loss)

    def _next_batch(self) -> list[VideoSample]:
        batch = []
        for _ in range(self.cfg.train.batch):
            batch.append(self.samples[self._cursor % len(self.samples)])
            self._cursor += 1
        return batch

    def micro_batch_loss(self, batch: list[VideoSample]) -> Tensor:
        if not batch:
            raise ValueError("empty batch")
        preds = self.model.forward_first_frame_batch(batch)
        losses = [mask_loss(pred.logits, sample.target_masks[0], self.weights)
                  for pred, sample in zip(preds, batch)]
        total = losses[0]
        for loss in losses[1:]:
            total = ad.add(total, loss)
        return ad.scale(total, 1.0 / len(batch))

    def train_step(self) -> float:
        """One optimizer step = ``accum`` accumulated micro-batches."""
        trainable = self.model.trainable_params()
        for t in trainable.values():
            t.zero_grad()
        micro_losses = []
        for _ in range(self.cfg.train.accum):
            with Tape() as tape:
                loss = self.micro_batch_loss(self._next_batch())
            tape.backward(loss)
            micro_losses.append(loss.item())
        grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
                 / self.cfg.train.accum
                 for name, t in trainable.items()}
        self.step_count += 1
        lr = lr_at(self.step_count, self.sched)
        self.opt.step(grads, lr)
        mean_loss = float(np.mean(micro_losses))
        self.loss_log.append((self.step_count, lr, mean_loss))
        return mean_loss

    def train(self, n_steps: int | None = None,
              log_every: int = 0) -> list[tuple[int, float, float]]:
        n_steps = n_steps if n_steps is not None else self.cfg.train.total_steps
        for _ in range(n_steps):
            loss = self.train_step()
            if log_every and self.step_count % log_every == 0:
                print(f"step {self.step_count:5d}  loss {loss:.5f}")
        return self.loss_log

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["step", "lr", "loss"])
            for step, lr, loss in self.loss_log:
                wr.writerow([step, f"{lr:.12g}", f"{loss:.12g}"])

    def save(self, path: str | Path) -> None:
        save_model(self.model, path, extra=self.state_tensors())

    def state_tensors(self) -> dict[str, np.ndarray]:
        extra = self.opt.state_tensors()
        extra["train.step"] = np.array(float(self.step_count))
        extra["train.cursor"] = np.array(float(self._cursor))
        return extra

    def load_state(self, extra: dict[str, np.ndarray]) -> None:
        self.opt.load_state(extra)
        self.step_count = int(extra["train.step"].item())
        self._cursor = int(extra["train.cursor"].item())
