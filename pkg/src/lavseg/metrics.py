"""Segmentation metrics: region Jaccard, boundary F-score, their average,
and the foreground-ratio score for null references.

Conventions (both masks empty counts as a perfect match):
  - jaccard(empty, empty) = 1.0
  - boundary_f(empty, empty) = 1.0; exactly one empty boundary = 0.0
  - s_score of all-empty predictions = 0.0 (the ideal null behavior);
    an all-foreground prediction reports +inf.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from lavseg.data import VideoSample


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred.astype(bool), gt.astype(bool)


def jaccard(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = _check_pair(pred, gt)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a background 4-neighbor or on the image border."""
    m = np.asarray(mask).astype(bool)
    padded = np.zeros((m.shape[0] + 2, m.shape[1] + 2), dtype=bool)
    padded[1:-1, 1:-1] = m
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def _dilate_chebyshev(mask: np.ndarray, tol: int) -> np.ndarray:
    out = mask.copy()
    h, w = mask.shape
    for dy in range(-tol, tol + 1):
        for dx in range(-tol, tol + 1):
            if dy == 0 and dx == 0:
                continue
            shifted = np.zeros_like(mask)
            ys = slice(max(dy, 0), h + min(dy, 0))
            xs = slice(max(dx, 0), w + min(dx, 0))
            ys_src = slice(max(-dy, 0), h + min(-dy, 0))
            xs_src = slice(max(-dx, 0), w + min(-dx, 0))
            shifted[ys, xs] = mask[ys_src, xs_src]
            out |= shifted
    return out


def boundary_f(pred: np.ndarray, gt: np.ndarray, tol: int = 1) -> float:
    pred, gt = _check_pair(pred, gt)
    pb = boundary_pixels(pred)
    gb = boundary_pixels(gt)
    n_pb, n_gb = int(pb.sum()), int(gb.sum())
    if n_pb == 0 and n_gb == 0:
        return 1.0
    if n_pb == 0 or n_gb == 0:
        return 0.0
    gb_zone = _dilate_chebyshev(gb, tol) if tol > 0 else gb
    pb_zone = _dilate_chebyshev(pb, tol) if tol > 0 else pb
    precision = float((pb & gb_zone).sum() / n_pb)
    recall = float((gb & pb_zone).sum() / n_gb)
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def s_score(pred_masks: Sequence[np.ndarray]) -> float:
    """sqrt(foreground / background) pooled over all frames; lower is better."""
    if len(pred_masks) == 0:
        raise ValueError("s_score needs at least one frame")
    fg = sum(int(np.asarray(m).astype(bool).sum()) for m in pred_masks)
    total = sum(int(np.asarray(m).size) for m in pred_masks)
    bg = total - fg
    if fg == 0:
        return 0.0
    if bg == 0:
        return math.inf
    return math.sqrt(fg / bg)


# --- report assembly ---------------------------------------------------------

@dataclass
class SampleResult:
    sample_id: str
    split: str
    frame_j: list[float]
    frame_f: list[float]
    s: float | None = None

    @property
    def j(self) -> float:
        return float(np.mean(self.frame_j))

    @property
    def f(self) -> float:
        return float(np.mean(self.frame_f))

    @property
    def jf(self) -> float:
        return (self.j + self.f) / 2.0


@dataclass
class MetricsReport:
    rows: list[SampleResult] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def split_mean(self, split: str, key: str) -> float | None:
        vals = [getattr(r, key) for r in self.rows if r.split == split
                and getattr(r, key) is not None]
        return float(np.mean(vals)) if vals else None

    def summary(self) -> dict[str, dict[str, float | None]]:
        out: dict[str, dict[str, float | None]] = {}
        for split in ("seen-test", "unseen-test"):
            out[split] = {k: self.split_mean(split, k) for k in ("j", "f", "jf")}
        seen, unseen = out["seen-test"], out["unseen-test"]
        # the mix column averages split means, not pooled samples
        out["mix"] = {
            k: ((seen[k] + unseen[k]) / 2.0
                if seen[k] is not None and unseen[k] is not None else None)
            for k in ("j", "f", "jf")
        }
        out["null-test"] = {"s": self.split_mean("null-test", "s")}
        return out

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["sample_id", "split", "J", "F", "J&F", "S"])
            for r in self.rows:
                wr.writerow([r.sample_id, r.split,
                             f"{r.j:.6f}", f"{r.f:.6f}", f"{r.jf:.6f}",
                             "" if r.s is None else f"{r.s:.6f}"])
            for split, vals in self.summary().items():
                wr.writerow([f"mean:{split}", split,
                             *(("" if vals.get(k) is None else f"{vals[k]:.6f}")
                               for k in ("j", "f", "jf")),
                             "" if vals.get("s") is None else f"{vals['s']:.6f}"])

    def write_json(self, path: str | Path) -> None:
        doc = {
            "samples": [{"id": r.sample_id, "split": r.split, "J": r.j,
                         "F": r.f, "J&F": r.jf, "S": r.s} for r in self.rows],
            "summary": self.summary(),
            "warnings": self.warnings,
        }
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True),
                              encoding="utf-8")


def evaluate(predict_fn: Callable[[VideoSample], list[np.ndarray]],
             samples: list[VideoSample],
             splits: Sequence[str] = ("seen-test", "unseen-test", "null-test"),
             tol: int = 1) -> MetricsReport:
    """Score a predictor over dataset samples, Table-style layout.

    ``predict_fn`` returns one binary mask per frame. Null-split samples are
    scored by S only; other splits by per-frame J and F averaged per video.
    """
    report = MetricsReport()
    present = {s.split for s in samples}
    for split in splits:
        if split not in present:
            report.warnings.append(f"split {split!r} missing from dataset")
    for sample in samples:
        if sample.split not in splits:
            continue
        preds = predict_fn(sample)
        if len(preds) != sample.num_frames:
            raise ValueError(f"{sample.sample_id}: predictor returned "
                             f"{len(preds)} masks for {sample.num_frames} frames")
        if sample.split == "null-test":
            report.rows.append(SampleResult(
                sample_id=sample.sample_id, split=sample.split,
                frame_j=[jaccard(p, g) for p, g in zip(preds, sample.target_masks)],
                frame_f=[boundary_f(p, g, tol) for p, g in zip(preds, sample.target_masks)],
                s=s_score(preds)))
        else:
            report.rows.append(SampleResult(
                sample_id=sample.sample_id, split=sample.split,
                frame_j=[jaccard(p, g) for p, g in zip(preds, sample.target_masks)],
                frame_f=[boundary_f(p, g, tol) for p, g in zip(preds, sample.target_masks)]))
    return report
