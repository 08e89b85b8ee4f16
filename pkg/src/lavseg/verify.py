"""Finite-difference verification suites for the autodiff engine and the
composed model paths. Used by the tests and the ``gradcheck`` subcommand."""

from __future__ import annotations

from typing import Callable

import numpy as np

from lavseg import autodiff as ad
from lavseg.autodiff import Tensor
from lavseg.config import RunConfig, resolve_config
from lavseg.data import GenConfig, generate_scene
from lavseg.gradcheck import check_gradients
from lavseg.model import Model
from lavseg.training import mask_loss

TOLERANCE = 1e-4


def _rand(rng, shape, away_from_zero: float = 0.0) -> Tensor:
    x = rng.uniform(-2.0, 2.0, shape)
    if away_from_zero:
        x = np.where(np.abs(x) < away_from_zero,
                     away_from_zero * np.sign(x) + (x == 0) * away_from_zero, x)
    return Tensor(x, requires_grad=True)


def _weighted_sum(out: Tensor, w: np.ndarray) -> Tensor:
    return ad.sum_(ad.mul(out, Tensor(w)))


def check_ops(seed: int = 0) -> dict[str, float]:
    """Max relative FD error for every differentiable primitive."""
    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}

    def run(name: str, params: list[Tensor], fn: Callable[[], Tensor]) -> None:
        errs = check_gradients(fn, params)
        report[name] = max(errs.values())

    a = _rand(rng, (3, 4))
    b = _rand(rng, (4, 2))
    w = rng.uniform(-1, 1, (3, 2))
    run("matmul", [a, b], lambda: _weighted_sum(ad.matmul(a, b), w))

    x = _rand(rng, (3, 4))
    y = _rand(rng, (3, 4))
    w = rng.uniform(-1, 1, (3, 4))
    run("add", [x, y], lambda: _weighted_sum(ad.add(x, y), w))
    run("sub", [x, y], lambda: _weighted_sum(ad.sub(x, y), w))
    run("mul", [x, y], lambda: _weighted_sum(ad.mul(x, y), w))
    yd = _rand(rng, (3, 4), away_from_zero=0.5)
    run("div", [x, yd], lambda: _weighted_sum(ad.div(x, yd), w))
    run("scale", [x], lambda: _weighted_sum(ad.scale(x, -1.7), w))

    bias = _rand(rng, (4,))
    run("add_bias", [x, bias], lambda: _weighted_sum(ad.add_bias(x, bias), w))

    xr = _rand(rng, (3, 4), away_from_zero=0.05)
    run("relu", [xr], lambda: _weighted_sum(ad.relu(xr), w))
    run("sigmoid", [x], lambda: _weighted_sum(ad.sigmoid(x), w))
    run("softmax", [x], lambda: _weighted_sum(ad.softmax(x), w))

    gamma = _rand(rng, (4,))
    beta = _rand(rng, (4,))
    run("layer_norm", [x, gamma, beta],
        lambda: _weighted_sum(ad.layer_norm(x, gamma, beta), w))

    w6 = rng.uniform(-1, 1, (6, 4))
    run("concat", [x, y],
        lambda: _weighted_sum(ad.concat([x, y], axis=0), w6))
    w2 = rng.uniform(-1, 1, (3, 2))
    run("narrow", [x], lambda: _weighted_sum(ad.narrow(x, 1, 1, 2), w2))
    w12 = rng.uniform(-1, 1, (12,))
    run("reshape", [x], lambda: _weighted_sum(ad.reshape(x, (12,)), w12))
    wt = rng.uniform(-1, 1, (4, 3))
    run("transpose", [a], lambda: _weighted_sum(ad.transpose(a), wt))

    run("mean_all", [x], lambda: ad.mean(x))
    w3 = rng.uniform(-1, 1, (3,))
    run("mean_axis", [x], lambda: _weighted_sum(ad.mean(x, axis=1), w3))
    run("sum_all", [x], lambda: ad.sum_(x))
    w4 = rng.uniform(-1, 1, (4,))
    run("sum_axis", [x], lambda: _weighted_sum(ad.sum_(x, axis=0), w4))

    table = _rand(rng, (7, 4))
    ids = [1, 3, 3, 0]
    w_emb = rng.uniform(-1, 1, (4, 4))
    run("embedding", [table], lambda: _weighted_sum(ad.embedding(table, ids), w_emb))

    img = _rand(rng, (8, 8))
    wp = rng.uniform(-1, 1, (4, 4))
    run("avg_pool2", [img], lambda: _weighted_sum(ad.avg_pool2(img), wp))
    small = _rand(rng, (4, 4))
    wu = rng.uniform(-1, 1, (16, 16))
    run("bilinear_upsample", [small],
        lambda: _weighted_sum(ad.bilinear_upsample(small, 16, 16), wu))

    w2d = rng.uniform(-1, 1, (3, 2))
    run("linear", [a, b, bias2 := _rand(rng, (2,))],
        lambda: _weighted_sum(ad.linear(a, b, bias2), w2d))

    q = _rand(rng, (3, 4))
    k = _rand(rng, (5, 4))
    v = _rand(rng, (5, 4))
    run("attention", [q, k, v],
        lambda: _weighted_sum(ad.attention(q, k, v, 2), w))

    qp = _rand(rng, (7, 4))
    kp = _rand(rng, (7, 4))
    vp = _rand(rng, (7, 4))
    w7 = rng.uniform(-1, 1, (7, 4))
    run("attention_packed", [qp, kp, vp],
        lambda: _weighted_sum(
            ad.attention_packed(qp, kp, vp, 2, [(0, 3), (3, 4)]), w7))

    logits = _rand(rng, (5, 5))
    targets = Tensor((rng.random((5, 5)) > 0.5).astype(np.float64))
    run("bce_with_logits", [logits], lambda: ad.bce_with_logits_mean(logits, targets))
    return report


def tiny_run_config() -> RunConfig:
    """Desk-scale-within-desk-scale config for end-to-end gradient checks."""
    return resolve_config({
        "data": {"height": 16, "width": 16, "num_frames": 2,
                 "min_size": 2, "max_size": 2, "min_objects": 2, "max_objects": 2},
        "enc": {"d_audio": 4, "d_visual": 8, "d_text": 8},
        "fusion": {"layers": 1, "dim": 8, "heads": 2},
        "seg": {"d_model": 8, "d_mem": 4, "heads": 2},
    })


def check_fusion(seed: int = 0) -> dict[str, float]:
    """FD check through one transformer block and a full 2-frame fusion."""
    from lavseg.fusion import FrameFeatures, FusionConfig, FusionTransformer
    from lavseg.nn import TransformerBlock

    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}

    blk = TransformerBlock(rng, 8, 2)
    params = {f"block.{k}": v for k, v in blk.params("blk").items()}
    for k, v in params.items():
        v.name = k
    x = Tensor(rng.uniform(-1, 1, (4, 8)))
    w = rng.uniform(-1, 1, (4, 8))
    errs = check_gradients(lambda: _weighted_sum(blk(x), w), list(params.values()))
    report["transformer_block"] = max(errs.values())

    fusion = FusionTransformer(FusionConfig(layers=1, dim=8, heads=2))
    feats = FrameFeatures(
        audio=Tensor(rng.uniform(-1, 1, (2, 8))),
        text=Tensor(rng.uniform(-1, 1, (3, 8))),
        visual=[Tensor(rng.uniform(-1, 1, (4, 8))) for _ in range(2)],
        cls=[Tensor(rng.uniform(-1, 1, (1, 8))) for _ in range(2)],
    )
    fparams = fusion.params()
    for k, v in fparams.items():
        v.name = k
    trainable = [v for v in fparams.values() if v.requires_grad]
    wv = rng.uniform(-1, 1, (1, 8))
    errs = check_gradients(lambda: _weighted_sum(fusion.fuse_video(feats), wv),
                           trainable)
    report["fuse_video"] = max(errs.values())
    return report


def check_decoder(seed: int = 0) -> dict[str, float]:
    """FD check of the mask decoder on a 4x4 patch grid at d_model=8."""
    from lavseg.segmenter import MaskDecoder, SegConfig

    rng = np.random.default_rng(seed)
    cfg = SegConfig(d_model=8, d_mem=4, heads=2, height=16, width=16,
                    d_prompt_in=8)
    dec = MaskDecoder(np.random.default_rng(seed + 1), cfg)
    params = dec.params("dec")
    for k, v in params.items():
        v.name = k
    cond = Tensor(rng.uniform(-1, 1, (16, 8)))
    prompt = Tensor(rng.uniform(-1, 1, (1, 8)))
    gt = (rng.random((16, 16)) > 0.5).astype(np.float64)

    def fn():
        return mask_loss(dec(cond, prompt).logits, gt)

    errs = check_gradients(fn, list(params.values()))
    return {"mask_decoder": max(errs.values())}


def check_end2end(seed: int = 0) -> dict[str, float]:
    """FD check from the mask loss all the way back to every trainable
    parameter, including the learnable prompt token.

    Runs the training path proper: a packed batch of two samples from
    different families (so their text lengths differ and the row spans are
    uneven), exactly as ``Trainer.micro_batch_loss`` does."""
    cfg = tiny_run_config()
    model = Model(cfg)
    samples = [generate_scene(seed + 3, cfg.data, split="train",
                              family="audio-argmax", sample_id="fd-a"),
               generate_scene(seed + 5, cfg.data, split="train",
                              family="text-only", sample_id="fd-b")]
    params = model.trainable_params()
    for k, v in params.items():
        v.name = k

    def fn():
        # the cache only holds frozen-encoder outputs, which no trainable
        # parameter perturbs, so it stays valid across FD evaluations
        preds = model.forward_first_frame_batch(samples)
        total = mask_loss(preds[0].logits, samples[0].target_masks[0])
        total = ad.add(total, mask_loss(preds[1].logits,
                                        samples[1].target_masks[0]))
        return ad.scale(total, 0.5)

    errs = check_gradients(fn, list(params.values()))
    return {"end2end_max": max(errs.values()),
            "seg_token": errs["tok.seg"]}


_SCOPES = {
    "ops": check_ops,
    "fusion": check_fusion,
    "decoder": check_decoder,
    "end2end": check_end2end,
}


def run_scope(scope: str, seed: int = 0) -> tuple[dict[str, float], bool]:
    if scope == "all":
        report: dict[str, float] = {}
        for name, fn in _SCOPES.items():
            for k, v in fn(seed).items():
                report[f"{name}.{k}"] = v
    elif scope in _SCOPES:
        report = _SCOPES[scope](seed)
    else:
        raise ValueError(f"unknown gradcheck scope {scope!r}")
    return report, all(v < TOLERANCE for v in report.values())
