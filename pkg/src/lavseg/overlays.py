"""Overlay rendering: predicted mask tint plus ground-truth contour, as PPM."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from lavseg.data import VideoSample
from lavseg.metrics import boundary_pixels

_TINT = np.array([1.0, 0.25, 0.25])     # predicted foreground
_CONTOUR = np.array([0.1, 1.0, 0.1])    # ground-truth boundary


def write_ppm(path: Path, rgb: np.ndarray) -> None:
    """rgb: (H, W, 3) floats in [0, 1]."""
    data = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def overlay_frame(frame: np.ndarray, pred_mask: np.ndarray,
                  gt_mask: np.ndarray) -> np.ndarray:
    """frame (3, H, W) + masks (H, W) -> blended (H, W, 3) image."""
    img = frame.transpose(1, 2, 0).copy()
    sel = pred_mask.astype(bool)
    img[sel] = 0.5 * img[sel] + 0.5 * _TINT
    img[boundary_pixels(gt_mask)] = _CONTOUR
    return img


def render_sample_overlays(sample: VideoSample, pred_masks: list[np.ndarray],
                           out_dir: Path) -> list[Path]:
    if len(pred_masks) != sample.num_frames:
        raise ValueError(f"{sample.sample_id}: {len(pred_masks)} predictions "
                         f"for {sample.num_frames} frames")
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in range(sample.num_frames):
        img = overlay_frame(sample.frames[t], pred_masks[t], sample.target_masks[t])
        path = out_dir / f"overlay_{t:03d}.ppm"
        write_ppm(path, img)
        paths.append(path)
    return paths
