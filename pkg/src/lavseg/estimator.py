"""Scikit-learn-style facade over the full pipeline.

``ReferringVideoSegmenter`` is a BaseEstimator: constructor args are plain
hyperparameters (so ``get_params``/``set_params``/``clone`` work), ``fit``
trains on a dataset directory or a list of samples, ``predict`` returns one
binary mask per frame per sample, and ``score`` is the mean J&F.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from lavseg.config import resolve_config
from lavseg.data import VideoSample, load_manifest, load_split
from lavseg.metrics import boundary_f, jaccard
from lavseg.model import Model
from lavseg.training import Trainer


def _as_samples(X) -> list[VideoSample]:
    if isinstance(X, (str, Path)):
        manifest = load_manifest(X)
        return load_split(manifest, "train")
    if isinstance(X, VideoSample):
        return [X]
    samples = list(X)
    if not all(isinstance(s, VideoSample) for s in samples):
        raise TypeError("expected a dataset directory or VideoSample instances")
    return samples


class ReferringVideoSegmenter(BaseEstimator):
    """Trains the fusion prompt + segmenter end-to-end and predicts masks."""

    def __init__(self, layers=6, dim=64, heads=4, n_seg=1,
                 strategy="learnable-token", capacity=6, encoder_seed=1,
                 train_decoder=True, train_prompt=True,
                 lr=1e-4, weight_decay=0.0, warmup=100, total_steps=1000,
                 batch=8, accum=2, lambda_bce=1.0, lambda_dice=1.0, seed=0):
        self.layers = layers
        self.dim = dim
        self.heads = heads
        self.n_seg = n_seg
        self.strategy = strategy
        self.capacity = capacity
        self.encoder_seed = encoder_seed
        self.train_decoder = train_decoder
        self.train_prompt = train_prompt
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup = warmup
        self.total_steps = total_steps
        self.batch = batch
        self.accum = accum
        self.lambda_bce = lambda_bce
        self.lambda_dice = lambda_dice
        self.seed = seed

    def _build_config(self, sample: VideoSample):
        n, _, h, w = sample.frames.shape
        return resolve_config({
            "data": {"height": h, "width": w, "num_frames": n,
                     "d_audio_raw": sample.audio_descriptors.shape[1]},
            "enc": {"seed": self.encoder_seed},
            "fusion": {"layers": self.layers, "dim": self.dim,
                       "heads": self.heads, "n_seg": self.n_seg,
                       "strategy": self.strategy},
            "seg": {"capacity": self.capacity,
                    "train_decoder": self.train_decoder,
                    "train_prompt": self.train_prompt},
            "train": {"lr": self.lr, "weight_decay": self.weight_decay,
                      "warmup": self.warmup, "total_steps": self.total_steps,
                      "batch": self.batch, "accum": self.accum,
                      "lambda_bce": self.lambda_bce,
                      "lambda_dice": self.lambda_dice, "seed": self.seed},
        })

    def fit(self, X, y=None):
        samples = _as_samples(X)
        if not samples:
            raise ValueError("fit needs at least one sample")
        cfg = self._build_config(samples[0])
        self.model_ = Model(cfg)
        trainer = Trainer(self.model_, samples, cfg)
        trainer.train()
        self.loss_log_ = trainer.loss_log
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("estimator is not fitted; call fit first")

    def predict(self, X) -> list[np.ndarray]:
        """Per sample: (num_frames, H, W) uint8 propagated masks."""
        self._check_fitted()
        out = []
        for sample in _as_samples(X):
            preds = self.model_.predict_sample(sample)
            out.append(np.stack([p.binary_mask() for p in preds]))
        return out

    def score(self, X, y=None) -> float:
        """Mean J&F over all frames of all samples."""
        self._check_fitted()
        samples = _as_samples(X)
        vals = []
        for sample, masks in zip(samples, self.predict(samples)):
            j = np.mean([jaccard(m, g) for m, g in zip(masks, sample.target_masks)])
            f = np.mean([boundary_f(m, g) for m, g in zip(masks, sample.target_masks)])
            vals.append((j + f) / 2.0)
        return float(np.mean(vals))
