"""Multimodal fusion into a learnable segmentation prompt token.

A stack of bi-directional pre-norm transformer blocks compresses the
projected audio, text, and per-frame visual features into the leading
[seg] token(s). The token output at frame i is fed back in at frame i+1
(forward propagation), while the projected per-frame cls tokens of all
strictly earlier frames are appended at the sequence tail (history
accumulation), so early-frame information is never diluted away.

Sequence order per frame: [seg...] F_A [aud] F_T [vis] F_V^i [his...].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from lavseg import autodiff as ad
from lavseg.autodiff import Tensor
from lavseg.nn import TransformerBlock


@dataclass
class FusionConfig:
    layers: int = 6
    dim: int = 64
    heads: int = 4
    n_seg: int = 1
    strategy: str = "learnable-token"  # or "mean"
    seed: int = 7

    def validate(self) -> None:
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.n_seg < 1:
            raise ValueError("n_seg must be >= 1")
        if self.strategy not in ("learnable-token", "mean"):
            raise ValueError(f"unknown fusion strategy {self.strategy!r}")


@dataclass
class FrameFeatures:
    """Projected features of one sample, all at the shared dimension d."""
    audio: Tensor                 # (N_A, d)
    text: Tensor                  # (P, d)
    visual: list[Tensor]          # per frame (h*w, d)
    cls: list[Tensor]             # per frame (1, d), projected


@dataclass
class FusionState:
    current_seg: Tensor
    his: list[Tensor] = field(default_factory=list)


def sequence_length(n_seg: int, n_audio: int, n_text: int, n_patches: int,
                    n_his: int) -> int:
    return n_seg + n_audio + 1 + n_text + 1 + n_patches + n_his


class FusionTransformer:
    def __init__(self, cfg: FusionConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
        self.seg = Tensor(rng.normal(0.0, 0.02, (cfg.n_seg, cfg.dim)),
                          requires_grad=True)
        # fixed sentinel tokens: never trained
        self.aud = Tensor(rng.normal(0.0, 0.02, (1, cfg.dim)))
        self.vis = Tensor(rng.normal(0.0, 0.02, (1, cfg.dim)))
        self.blocks = [TransformerBlock(rng, cfg.dim, cfg.heads)
                       for _ in range(cfg.layers)]

    def params(self) -> dict[str, Tensor]:
        out = {"tok.seg": self.seg, "tok.aud": self.aud, "tok.vis": self.vis}
        for i, blk in enumerate(self.blocks):
            out |= blk.params(f"fuse.blk{i}")
        return out

    def initial_state(self) -> FusionState:
        return FusionState(current_seg=self.seg, his=[])

    def assemble_sequence(self, state: FusionState, audio: Tensor, text: Tensor,
                          visual_i: Tensor) -> Tensor:
        d = self.cfg.dim
        for name, t in (("audio", audio), ("text", text), ("visual", visual_i)):
            if t.shape[1] != d:
                raise ad.ShapeError(f"{name} features have dim {t.shape[1]}, expected {d}")
        parts = [state.current_seg, audio, self.aud, text, self.vis, visual_i]
        parts.extend(state.his)
        return ad.concat(parts, axis=0)

    def run_blocks(self, z: Tensor) -> Tensor:
        for blk in self.blocks:
            z = blk(z)
        return z

    def propagate_step(self, state: FusionState, feats: FrameFeatures,
                       frame_index: int) -> FusionState:
        z = self.assemble_sequence(state, feats.audio, feats.text,
                                   feats.visual[frame_index])
        z = self.run_blocks(z)
        new_seg = ad.narrow(z, 0, 0, self.cfg.n_seg)
        # the step itself sees only strictly earlier frames' cls tokens
        return FusionState(current_seg=new_seg,
                           his=state.his + [feats.cls[frame_index]])

    def fuse_videos(self, feats_list: list[FrameFeatures]) -> list[Tensor]:
        """``fuse_video`` over several samples with packed row-wise ops.

        Per frame, the samples' sequences are concatenated along rows so the
        projections, layer norms, and MLPs run once over all of them;
        attention stays within each sample's row span. Each sample receives
        the same math as ``fuse_video`` (up to BLAS summation order).
        Samples with differing frame counts, or the "mean" strategy, fall
        back to the per-sample path.
        """
        frame_counts = {len(f.visual) for f in feats_list}
        if self.cfg.strategy != "learnable-token" or len(frame_counts) != 1:
            return [self.fuse_video(f) for f in feats_list]
        (n_frames,) = frame_counts
        if n_frames < 1:
            raise ValueError("fuse_videos needs at least one frame")
        states = [self.initial_state() for _ in feats_list]
        for i in range(n_frames):
            seqs = [self.assemble_sequence(st, f.audio, f.text, f.visual[i])
                    for st, f in zip(states, feats_list)]
            bounds, start = [], 0
            for z in seqs:
                bounds.append((start, z.shape[0]))
                start += z.shape[0]
            packed = ad.concat(seqs, axis=0)
            for blk in self.blocks:
                packed = blk.forward_packed(packed, bounds)
            states = [FusionState(current_seg=ad.narrow(packed, 0, s, self.cfg.n_seg),
                                  his=st.his + [f.cls[i]])
                      for (s, _), st, f in zip(bounds, states, feats_list)]
        return [st.current_seg for st in states]

    def fuse_video(self, feats: FrameFeatures,
                   strategy: str | None = None) -> Tensor:
        """Compress a whole sample into the (n_seg, d) prompt embedding."""
        strategy = strategy or self.cfg.strategy
        n_frames = len(feats.visual)
        if n_frames < 1:
            raise ValueError("fuse_video needs at least one frame")
        if strategy == "learnable-token":
            state = self.initial_state()
            for i in range(n_frames):
                state = self.propagate_step(state, feats, i)
            return state.current_seg
        if strategy == "mean":
            parts = [self.seg, feats.audio, self.aud, feats.text, self.vis]
            parts.extend(feats.visual)
            z = self.run_blocks(ad.concat(parts, axis=0))
            pooled = ad.reshape(ad.mean(z, axis=0), (1, self.cfg.dim))
            if self.cfg.n_seg == 1:
                return pooled
            return ad.concat([pooled] * self.cfg.n_seg, axis=0)
        raise ValueError(f"unknown fusion strategy {strategy!r}")
