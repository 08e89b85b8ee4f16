"""The assembled pipeline: encoders -> fusion -> promptable segmenter.

Frozen encoder outputs are pure functions of the input, so they are cached
per sample; only the trainable path (projections, fusion, prompt encoder,
decoder) is recomputed each training pass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lavseg import checkpoint as ckpt
from lavseg.autodiff import Tensor
from lavseg.config import RunConfig, resolve_config
from lavseg.data import VideoSample
from lavseg.encoders import ModalityEncoders
from lavseg.fusion import FrameFeatures, FusionTransformer
from lavseg.segmenter import MaskPrediction, PromptableSegmenter


@dataclass
class SampleCache:
    """Frozen-encoder outputs for one sample (never on the tape)."""
    audio: Tensor            # (N, d_A)
    text: Tensor             # (P, d_T)
    patches: list[Tensor]    # per frame (h*w, d_V)
    cls: list[Tensor]        # per frame (1, d_V)
    frame_embs: list[Tensor]  # per frame (h*w, d_s), segmenter frame encoder


class Model:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.encoders = ModalityEncoders(cfg.enc, cfg.fusion.dim)
        self.fusion = FusionTransformer(cfg.fusion)
        self.segmenter = PromptableSegmenter(cfg.seg)
        self._cache: dict[str, SampleCache] = {}

    # -- parameters ---------------------------------------------------------

    def params(self) -> dict[str, Tensor]:
        return (self.encoders.params() | self.fusion.params()
                | self.segmenter.params())

    def trainable_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params().items() if v.requires_grad}

    def param_digest(self, prefix: str = "") -> bytes:
        import hashlib
        h = hashlib.sha256()
        for name in sorted(self.params()):
            if name.startswith(prefix):
                h.update(name.encode())
                h.update(self.params()[name].data.tobytes())
        return h.digest()

    # -- forward ------------------------------------------------------------

    def encode_sample(self, sample: VideoSample) -> SampleCache:
        cached = self._cache.get(sample.sample_id)
        if cached is not None:
            return cached
        audio = self.encoders.audio(sample.audio_descriptors)
        text = self.encoders.text(sample.expression_tokens)
        patches, cls = self.encoders.visual(sample.frames)
        frame_embs = [self.segmenter.frame_encoder(f) for f in sample.frames]
        cache = SampleCache(audio=audio, text=text, patches=patches, cls=cls,
                            frame_embs=frame_embs)
        self._cache[sample.sample_id] = cache
        return cache

    def clear_cache(self) -> None:
        self._cache.clear()

    def project(self, cache: SampleCache) -> FrameFeatures:
        return FrameFeatures(
            audio=self.encoders.proj_audio(cache.audio),
            text=self.encoders.proj_text(cache.text),
            visual=[self.encoders.proj_visual(p) for p in cache.patches],
            cls=[self.encoders.proj_visual(c) for c in cache.cls],
        )

    def fuse(self, sample: VideoSample) -> Tensor:
        return self.fusion.fuse_video(self.project(self.encode_sample(sample)))

    def forward_first_frame(self, sample: VideoSample) -> MaskPrediction:
        """Training path: fuse the whole video, decode frame 0 only."""
        cache = self.encode_sample(sample)
        prompt = self.fusion.fuse_video(self.project(cache))
        return self.segmenter.decode_first_frame(cache.frame_embs[0], prompt)

    def forward_first_frame_batch(self, samples: list[VideoSample]) -> list[MaskPrediction]:
        """``forward_first_frame`` over a batch, with packed fusion ops."""
        caches = [self.encode_sample(s) for s in samples]
        prompts = self.fusion.fuse_videos([self.project(c) for c in caches])
        return self.segmenter.decode_first_frame_batch(
            [c.frame_embs[0] for c in caches], prompts)

    def predict_sample(self, sample: VideoSample) -> list[MaskPrediction]:
        """Inference path: fuse, then propagate over all frames."""
        cache = self.encode_sample(sample)
        prompt = self.fusion.fuse_video(self.project(cache))
        return self.segmenter.propagate_video(cache.frame_embs, prompt)

    # -- persistence ---------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params().items()}

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        params = self.params()
        missing = set(params) - set(tensors)
        if missing:
            raise ckpt.CheckpointError(f"checkpoint missing tensors: {sorted(missing)[:4]}...")
        for name, t in params.items():
            arr = tensors[name]
            if arr.shape != t.data.shape:
                raise ckpt.CheckpointError(
                    f"{name}: checkpoint shape {arr.shape} != model shape {t.data.shape}")
            t.data = arr.copy()
        self.clear_cache()


def save_model(model: Model, path: str | Path,
               extra: dict[str, np.ndarray] | None = None) -> None:
    """Write the SLV1 checkpoint plus a sidecar <path>.json config echo."""
    tensors = model.state_tensors()
    if extra:
        tensors = tensors | extra
    ckpt.save_tensors(path, tensors)
    Path(str(path) + ".json").write_text(
        json.dumps(model.cfg.to_dict(), indent=1, sort_keys=True), encoding="utf-8")


def load_model(path: str | Path) -> tuple[Model, dict[str, np.ndarray]]:
    """Rebuild a model from checkpoint + sidecar config.

    Returns (model, extra_tensors) where extra holds non-parameter records
    such as optimizer state.
    """
    side = Path(str(path) + ".json")
    if not side.exists():
        raise ckpt.CheckpointError(f"missing sidecar config {side}")
    cfg = resolve_config(json.loads(side.read_text(encoding="utf-8")))
    model = Model(cfg)
    tensors = ckpt.load_tensors(path)
    params = {k: v for k, v in tensors.items() if k in model.params()}
    extra = {k: v for k, v in tensors.items() if k not in params}
    model.load_state(params)
    return model, extra
