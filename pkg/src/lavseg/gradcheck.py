"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from lavseg.autodiff import Tape, Tensor


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar ``fn()`` wrt every entry of ``t``.

    ``fn`` must re-run the forward pass reading ``t.data`` fresh each call.
    """
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn().item()
        flat[i] = orig - h
        down = fn().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor],
                    h: float = 1e-5) -> dict[str, float]:
    """Compare tape gradients of scalar ``fn()`` against central differences.

    Returns max relative error per parameter (keyed by name or index).
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    report: dict[str, float] = {}
    for k, p in enumerate(params):
        key = p.name or f"param{k}"
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        report[key] = max_rel_error(analytic, numeric_grad(fn, p, h=h))
    return report
