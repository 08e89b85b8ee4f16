"""Frozen per-modality feature extractors plus trainable projection MLPs.

The three encoders stand in for large pretrained backbones: their weights
are drawn once from a per-encoder seed and never updated, and the three
feature spaces are deliberately unaligned. The projection MLPs
(Linear -> ReLU -> Linear, one per modality) are the trainable maps into
the shared fusion dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lavseg import autodiff as ad
from lavseg.autodiff import Tensor
from lavseg.nn import Linear, LayerNorm, TransformerBlock, set_trainable


@dataclass
class EncoderConfig:
    seed: int = 1
    d_audio: int = 16
    d_visual: int = 64
    d_text: int = 32
    patch: int = 4
    vocab_size: int = 64
    d_audio_raw: int = 32


def patchify(frame: np.ndarray, patch: int) -> np.ndarray:
    """(3, H, W) -> (h*w, 3*patch*patch) row-major over the patch grid."""
    c, height, width = frame.shape
    gh, gw = height // patch, width // patch
    x = frame.reshape(c, gh, patch, gw, patch)
    return x.transpose(1, 3, 0, 2, 4).reshape(gh * gw, c * patch * patch)


class AudioEncoder:
    """Per-frame linear map over spectral bins, then layer norm. Frozen."""

    def __init__(self, rng, cfg: EncoderConfig):
        self.lin = Linear(rng, cfg.d_audio_raw, cfg.d_audio)
        self.ln = LayerNorm(cfg.d_audio)
        set_trainable(self.params("x"), False)

    def __call__(self, descriptors: np.ndarray) -> Tensor:
        return self.ln(self.lin(Tensor(descriptors)))

    def params(self, prefix: str) -> dict[str, Tensor]:
        return self.lin.params(f"{prefix}.lin") | self.ln.params(f"{prefix}.ln")


class VisualEncoder:
    """Patch embedding + 2 transformer blocks with a fixed cls token. Frozen."""

    def __init__(self, rng, cfg: EncoderConfig):
        self.patch = cfg.patch
        self.embed = Linear(rng, 3 * cfg.patch * cfg.patch, cfg.d_visual)
        self.cls = Tensor(rng.normal(0.0, 0.5, (1, cfg.d_visual)))
        self.blocks = [TransformerBlock(rng, cfg.d_visual, 4) for _ in range(2)]
        set_trainable(self.params("x"), False)

    def encode_frame(self, frame: np.ndarray) -> tuple[Tensor, Tensor]:
        """Returns (patch_tokens (h*w, d_V), cls_token (1, d_V))."""
        tokens = self.embed(Tensor(patchify(frame, self.patch)))
        z = ad.concat([self.cls, tokens], axis=0)
        for blk in self.blocks:
            z = blk(z)
        return ad.narrow(z, 0, 1, z.shape[0] - 1), ad.narrow(z, 0, 0, 1)

    def __call__(self, frames: np.ndarray) -> tuple[list[Tensor], list[Tensor]]:
        pairs = [self.encode_frame(f) for f in frames]
        return [p[0] for p in pairs], [p[1] for p in pairs]

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = self.embed.params(f"{prefix}.embed") | {f"{prefix}.cls": self.cls}
        for i, blk in enumerate(self.blocks):
            out |= blk.params(f"{prefix}.blk{i}")
        return out


class TextEncoder:
    """Embedding-table lookup + 1 transformer block. Frozen."""

    def __init__(self, rng, cfg: EncoderConfig):
        self.table = Tensor(rng.normal(0.0, 0.5, (cfg.vocab_size, cfg.d_text)))
        self.block = TransformerBlock(rng, cfg.d_text, 4)
        set_trainable(self.params("x"), False)

    def __call__(self, token_ids: list[int]) -> Tensor:
        return self.block(ad.embedding(self.table, token_ids))

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.table": self.table} | self.block.params(f"{prefix}.blk")


class ProjectionMLP:
    """Linear(ReLU(Linear(x))) into the shared fusion dimension. Trainable."""

    def __init__(self, rng, d_in: int, d_out: int):
        self.fc1 = Linear(rng, d_in, 2 * d_out)
        self.fc2 = Linear(rng, 2 * d_out, d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.relu(self.fc1(x)))

    def params(self, prefix: str) -> dict[str, Tensor]:
        return self.fc1.params(f"{prefix}.fc1") | self.fc2.params(f"{prefix}.fc2")


class ModalityEncoders:
    """All three frozen encoders plus their trainable projections."""

    def __init__(self, cfg: EncoderConfig, d_shared: int):
        rng_a = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
        rng_v = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        rng_t = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
        rng_p = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
        self.cfg = cfg
        self.audio = AudioEncoder(rng_a, cfg)
        self.visual = VisualEncoder(rng_v, cfg)
        self.text = TextEncoder(rng_t, cfg)
        self.proj_audio = ProjectionMLP(rng_p, cfg.d_audio, d_shared)
        self.proj_visual = ProjectionMLP(rng_p, cfg.d_visual, d_shared)
        self.proj_text = ProjectionMLP(rng_p, cfg.d_text, d_shared)

    def params(self) -> dict[str, Tensor]:
        return (self.audio.params("enc.audio")
                | self.visual.params("enc.vis")
                | self.text.params("enc.text")
                | self.proj_audio.params("proj.audio")
                | self.proj_visual.params("proj.vis")
                | self.proj_text.params("proj.text"))
