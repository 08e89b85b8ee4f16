"""Promptable video segmenter: prompt-conditioned first-frame decoding plus
memory-bank propagation.

The frame encoder and memory machinery are frozen; the prompt encoder and
two-way mask decoder are the trainable adaptation surface (both can be
re-frozen for ablations). Video propagation is online: frame 0 is decoded
from the fused prompt alone and pinned into the memory bank, later frames
are conditioned on the bank before decoding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from lavseg import autodiff as ad
from lavseg.autodiff import Tensor
from lavseg.encoders import patchify
from lavseg.nn import Linear, LayerNorm, Mlp, MultiHeadAttention, TransformerBlock, set_trainable


@dataclass
class SegConfig:
    d_model: int = 64      # decoder/frame-embedding width
    d_mem: int = 32        # spatial memory map width
    patch: int = 4
    heads: int = 4
    capacity: int = 6      # unpinned memory slots
    height: int = 32
    width: int = 32
    d_prompt_in: int = 64  # fusion dimension feeding the prompt encoder
    seed: int = 13
    train_decoder: bool = True
    train_prompt: bool = True

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch


@dataclass
class MemoryEntry:
    spatial_map: Tensor   # (h*w/4, d_mem)
    object_ptr: Tensor    # (1, d_model)
    frame_index: int
    pinned: bool = False


class MemoryBank:
    """Bounded FIFO of memory entries with one pinned prompted-frame entry."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.entries: list[MemoryEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def unpinned_count(self) -> int:
        return sum(1 for e in self.entries if not e.pinned)

    def push(self, entry: MemoryEntry) -> None:
        if self.entries and entry.frame_index <= self.entries[-1].frame_index:
            raise ValueError(
                f"out-of-order memory push: frame {entry.frame_index} after "
                f"{self.entries[-1].frame_index}")
        self.entries.append(entry)
        if self.unpinned_count() > self.capacity:
            oldest = next(i for i, e in enumerate(self.entries) if not e.pinned)
            del self.entries[oldest]


@dataclass
class MaskPrediction:
    logits: Tensor          # (H, W)
    occlusion_score: Tensor  # scalar; negative = object judged absent
    object_ptr: Tensor      # (1, d_model)
    forced_empty: bool = False

    def binary_mask(self) -> np.ndarray:
        if self.forced_empty:
            return np.zeros(self.logits.shape, dtype=np.uint8)
        return (1.0 / (1.0 + np.exp(-self.logits.data)) > 0.5).astype(np.uint8)


class FrameEncoder:
    """Patch embedding + 2 transformer blocks, frozen."""

    def __init__(self, rng, cfg: SegConfig):
        self.patch = cfg.patch
        self.embed = Linear(rng, 3 * cfg.patch * cfg.patch, cfg.d_model)
        self.blocks = [TransformerBlock(rng, cfg.d_model, cfg.heads) for _ in range(2)]
        set_trainable(self.params("x"), False)

    def __call__(self, frame: np.ndarray) -> Tensor:
        z = self.embed(Tensor(patchify(frame, self.patch)))
        for blk in self.blocks:
            z = blk(z)
        return z

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = self.embed.params(f"{prefix}.embed")
        for i, blk in enumerate(self.blocks):
            out |= blk.params(f"{prefix}.blk{i}")
        return out


class PromptEncoder:
    """Linear + layer norm from fusion dim to decoder dim; row 0 only."""

    def __init__(self, rng, cfg: SegConfig):
        self.lin = Linear(rng, cfg.d_prompt_in, cfg.d_model)
        self.ln = LayerNorm(cfg.d_model)

    def __call__(self, prompt_embedding: Tensor) -> Tensor:
        first = ad.narrow(prompt_embedding, 0, 0, 1)
        return self.ln(self.lin(first))

    def forward_batch(self, prompt_embeddings: list[Tensor]) -> Tensor:
        """Row 0 of each prompt, encoded in one pass; one row per sample."""
        firsts = ad.concat([ad.narrow(p, 0, 0, 1) for p in prompt_embeddings],
                           axis=0)
        return self.ln(self.lin(firsts))

    def params(self, prefix: str) -> dict[str, Tensor]:
        return self.lin.params(f"{prefix}.lin") | self.ln.params(f"{prefix}.ln")


class _MemoryAttnBlock:
    """Self-attention, cross-attention to memory rows, MLP; pre-norm residual."""

    def __init__(self, rng, d: int, heads: int):
        self.ln1 = LayerNorm(d)
        self.self_attn = MultiHeadAttention(rng, d, heads)
        self.ln2 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(rng, d, heads)
        self.ln3 = LayerNorm(d)
        self.mlp = Mlp(rng, d, 4 * d, d)
        # Damp the frozen random blocks so conditioning stays a mild residual.
        # The decoder is trained only on unconditioned frame-0 embeddings, so
        # anything these blocks add at propagation time is a distribution shift
        # it never saw; 0.02 keeps the memory signal present but small enough
        # that propagated decodes stay on the decoder's training manifold.
        for lin in (self.self_attn.wo, self.cross_attn.wo, self.mlp.fc2):
            lin.w.data *= 0.02

    def __call__(self, x: Tensor, mem: Tensor) -> Tensor:
        h = self.ln1(x)
        x = ad.add(x, self.self_attn(h, h))
        x = ad.add(x, self.cross_attn(self.ln2(x), mem))
        return ad.add(x, self.mlp(self.ln3(x)))

    def params(self, prefix: str) -> dict[str, Tensor]:
        return (self.ln1.params(f"{prefix}.ln1")
                | self.self_attn.params(f"{prefix}.self")
                | self.ln2.params(f"{prefix}.ln2")
                | self.cross_attn.params(f"{prefix}.cross")
                | self.ln3.params(f"{prefix}.ln3")
                | self.mlp.params(f"{prefix}.mlp"))


class MemoryAttention:
    """Conditions frame tokens on the memory bank. Frozen; empty bank = identity."""

    def __init__(self, rng, cfg: SegConfig):
        self.spatial_proj = Linear(rng, cfg.d_mem, cfg.d_model)
        self.blocks = [_MemoryAttnBlock(rng, cfg.d_model, cfg.heads) for _ in range(2)]
        set_trainable(self.params("x"), False)

    def __call__(self, frame_emb: Tensor, bank: MemoryBank) -> Tensor:
        if len(bank) == 0:
            return frame_emb
        rows = []
        for e in bank.entries:
            rows.append(self.spatial_proj(e.spatial_map))
            rows.append(e.object_ptr)
        mem = ad.concat(rows, axis=0)
        x = frame_emb
        for blk in self.blocks:
            x = blk(x, mem)
        return x

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = self.spatial_proj.params(f"{prefix}.spatial")
        for i, blk in enumerate(self.blocks):
            out |= blk.params(f"{prefix}.blk{i}")
        return out


class _TwoWayBlock:
    """Token self-attn, token->image cross, token MLP, image->token cross."""

    def __init__(self, rng, d: int, heads: int):
        self.ln_t1 = LayerNorm(d)
        self.token_self = MultiHeadAttention(rng, d, heads)
        self.ln_t2 = LayerNorm(d)
        self.ln_i1 = LayerNorm(d)
        self.t2i = MultiHeadAttention(rng, d, heads)
        self.ln_t3 = LayerNorm(d)
        self.mlp = Mlp(rng, d, 4 * d, d)
        self.ln_i2 = LayerNorm(d)
        self.ln_t4 = LayerNorm(d)
        self.i2t = MultiHeadAttention(rng, d, heads)

    def __call__(self, tokens: Tensor, img: Tensor) -> tuple[Tensor, Tensor]:
        h = self.ln_t1(tokens)
        tokens = ad.add(tokens, self.token_self(h, h))
        tokens = ad.add(tokens, self.t2i(self.ln_t2(tokens), self.ln_i1(img)))
        tokens = ad.add(tokens, self.mlp(self.ln_t3(tokens)))
        img = ad.add(img, self.i2t(self.ln_i2(img), self.ln_t4(tokens)))
        return tokens, img

    def forward_packed(self, tokens: Tensor, img: Tensor,
                       t_bounds: list[tuple[int, int]],
                       i_bounds: list[tuple[int, int]]) -> tuple[Tensor, Tensor]:
        """The block applied independently to paired row segments.

        ``tokens`` packs each sample's prompt tokens along rows (spans
        ``t_bounds``); ``img`` packs the frame embeddings (spans
        ``i_bounds``). Attention only ever pairs span i with span i.
        """
        h = self.ln_t1(tokens)
        tokens = ad.add(tokens, self.token_self.forward_packed(h, t_bounds))
        tokens = ad.add(tokens, self.t2i.forward_packed_cross(
            self.ln_t2(tokens), self.ln_i1(img), t_bounds, i_bounds))
        tokens = ad.add(tokens, self.mlp(self.ln_t3(tokens)))
        img = ad.add(img, self.i2t.forward_packed_cross(
            self.ln_i2(img), self.ln_t4(tokens), i_bounds, t_bounds))
        return tokens, img

    def params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, mod in (("ln_t1", self.ln_t1), ("self", self.token_self),
                          ("ln_t2", self.ln_t2), ("ln_i1", self.ln_i1),
                          ("t2i", self.t2i), ("ln_t3", self.ln_t3),
                          ("mlp", self.mlp), ("ln_i2", self.ln_i2),
                          ("ln_t4", self.ln_t4), ("i2t", self.i2t)):
            out |= mod.params(f"{prefix}.{name}")
        return out


class MaskDecoder:
    """Two two-way blocks, dot-product mask logits, occlusion and pointer heads."""

    def __init__(self, rng, cfg: SegConfig):
        self.cfg = cfg
        self.blocks = [_TwoWayBlock(rng, cfg.d_model, cfg.heads) for _ in range(2)]
        self.mask_head = Mlp(rng, cfg.d_model, cfg.d_model, cfg.d_model)
        self.occ_head = Linear(rng, cfg.d_model, 1, zero_init=True)

    def __call__(self, cond_emb: Tensor, prompt_tokens: Tensor) -> MaskPrediction:
        tokens, img = prompt_tokens, cond_emb
        for blk in self.blocks:
            tokens, img = blk(tokens, img)
        query = self.mask_head(tokens)  # (1, d)
        patch_logits = ad.scale(ad.matmul(img, ad.transpose(query)),
                                1.0 / math.sqrt(self.cfg.d_model))
        gh, gw = self.cfg.grid
        grid = ad.reshape(patch_logits, (gh, gw))
        logits = ad.bilinear_upsample(grid, self.cfg.height, self.cfg.width)
        occ = ad.reshape(self.occ_head(tokens), ())
        return MaskPrediction(logits=logits, occlusion_score=occ, object_ptr=tokens)

    def decode_batch(self, cond_embs: list[Tensor],
                     prompt_tokens: list[Tensor]) -> list[MaskPrediction]:
        """``__call__`` over a batch, with the two-way blocks packed.

        All samples' prompt tokens (and frame embeddings) are concatenated
        along rows and run through each block once; attention stays within
        each sample's span, so results match the per-sample path exactly.
        """
        t_bounds, i_bounds = [], []
        pos_t = pos_i = 0
        for tok, emb in zip(prompt_tokens, cond_embs):
            t_bounds.append((pos_t, tok.shape[0]))
            i_bounds.append((pos_i, emb.shape[0]))
            pos_t += tok.shape[0]
            pos_i += emb.shape[0]
        tokens = ad.concat(prompt_tokens, axis=0)
        img = ad.concat(cond_embs, axis=0)
        for blk in self.blocks:
            tokens, img = blk.forward_packed(tokens, img, t_bounds, i_bounds)
        query = self.mask_head(tokens)
        occ_all = self.occ_head(tokens)
        gh, gw = self.cfg.grid
        preds = []
        for (st, nt), (si, ni) in zip(t_bounds, i_bounds):
            tok = ad.narrow(tokens, 0, st, nt)
            patch_logits = ad.scale(
                ad.matmul(ad.narrow(img, 0, si, ni),
                          ad.transpose(ad.narrow(query, 0, st, nt))),
                1.0 / math.sqrt(self.cfg.d_model))
            grid = ad.reshape(patch_logits, (gh, gw))
            logits = ad.bilinear_upsample(grid, self.cfg.height, self.cfg.width)
            occ = ad.reshape(ad.narrow(occ_all, 0, st, nt), ())
            preds.append(MaskPrediction(logits=logits, occlusion_score=occ,
                                        object_ptr=tok))
        return preds

    def params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, blk in enumerate(self.blocks):
            out |= blk.params(f"{prefix}.blk{i}")
        return (out | self.mask_head.params(f"{prefix}.mask_head")
                | self.occ_head.params(f"{prefix}.occ_head"))


def _half_pool_matrix(gh: int, gw: int) -> np.ndarray:
    """(gh*gw/4, gh*gw) matrix averaging each 2x2 cell of the token grid."""
    oh, ow = gh // 2, gw // 2
    m = np.zeros((oh * ow, gh * gw))
    for i in range(oh):
        for j in range(ow):
            for di in range(2):
                for dj in range(2):
                    m[i * ow + j, (2 * i + di) * gw + (2 * j + dj)] = 0.25
    return m


class MemoryEncoder:
    """Fuses the predicted mask with the unconditioned frame embedding. Frozen."""

    def __init__(self, rng, cfg: SegConfig):
        self.cfg = cfg
        self.mask_proj = Linear(rng, 1, cfg.d_mem)
        self.emb_proj = Linear(rng, cfg.d_model, cfg.d_mem)
        gh, gw = cfg.grid
        self._half_pool = Tensor(_half_pool_matrix(gh, gw))
        set_trainable(self.params("x"), False)

    def __call__(self, mask_logits: Tensor, frame_emb: Tensor) -> Tensor:
        prob = ad.sigmoid(mask_logits)
        down = prob
        side = self.cfg.height
        while side > self.cfg.height // self.cfg.patch:
            down = ad.avg_pool2(down)
            side //= 2
        gh, gw = self.cfg.grid
        mask_rows = ad.reshape(down, (gh * gw, 1))
        fused = ad.add(self.mask_proj(mask_rows), self.emb_proj(frame_emb))
        return ad.matmul(self._half_pool, fused)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return (self.mask_proj.params(f"{prefix}.mask")
                | self.emb_proj.params(f"{prefix}.emb"))


class PromptableSegmenter:
    def __init__(self, cfg: SegConfig):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 21]))
        self.frame_encoder = FrameEncoder(rng, cfg)
        self.prompt_encoder = PromptEncoder(rng, cfg)
        self.memory_attention = MemoryAttention(rng, cfg)
        self.mask_decoder = MaskDecoder(rng, cfg)
        self.memory_encoder = MemoryEncoder(rng, cfg)
        set_trainable(self.prompt_encoder.params("x"), cfg.train_prompt)
        set_trainable(self.mask_decoder.params("x"), cfg.train_decoder)

    def params(self) -> dict[str, Tensor]:
        return (self.frame_encoder.params("seg.enc")
                | self.memory_attention.params("seg.mem.attn")
                | self.memory_encoder.params("seg.mem.menc")
                | self.prompt_encoder.params("seg.prompt")
                | self.mask_decoder.params("seg.dec"))

    def decode_first_frame(self, frame_emb: Tensor, prompt_embedding: Tensor) -> MaskPrediction:
        """Training-time path: prompt-conditioned decode of frame 0, no memory."""
        return self.mask_decoder(frame_emb, self.prompt_encoder(prompt_embedding))

    def decode_first_frame_batch(self, frame_embs: list[Tensor],
                                 prompt_embeddings: list[Tensor]) -> list[MaskPrediction]:
        """``decode_first_frame`` over a batch, with packed decoder ops."""
        tokens = self.prompt_encoder.forward_batch(prompt_embeddings)
        per_sample = [ad.narrow(tokens, 0, i, 1) for i in range(len(frame_embs))]
        return self.mask_decoder.decode_batch(frame_embs, per_sample)

    def propagate_video(self, frame_embs: list[Tensor],
                        prompt_embedding: Tensor) -> list[MaskPrediction]:
        """Online propagation over precomputed unconditioned frame embeddings."""
        bank = MemoryBank(self.cfg.capacity)
        prompt_tokens = self.prompt_encoder(prompt_embedding)
        preds: list[MaskPrediction] = []
        for i, emb in enumerate(frame_embs):
            cond = self.memory_attention(emb, bank)
            pred = self.mask_decoder(cond, prompt_tokens)
            if pred.occlusion_score.item() < 0.0:
                pred.forced_empty = True
            spatial = self.memory_encoder(pred.logits, emb)
            bank.push(MemoryEntry(spatial_map=spatial, object_ptr=pred.object_ptr,
                                  frame_index=i, pinned=(i == 0)))
            preds.append(pred)
        return preds
