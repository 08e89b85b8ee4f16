"""Deterministic synthetic benchmark: moving shapes that emit tones.

Each sample is a short video of colored shapes jiggling inside their own
quadrant, a mixed spectral audio descriptor per frame, a referring
expression, and per-frame ground-truth masks for the referred object.
Expressions come from six template families that exercise text, audio, and
temporal cues, including null references that no object satisfies.

On disk a sample is a directory of raw little-endian files plus PGM masks;
``manifest.json`` at the dataset root indexes everything.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np


class GenerationError(RuntimeError):
    """Scene sampling could not satisfy the requested template."""


class DatasetError(IOError):
    """Missing, truncated, or inconsistent dataset files."""


# --- category table: shape kind x color, each with its own tone bin -------

@dataclass(frozen=True)
class Category:
    category_id: int
    shape: str
    color_name: str
    rgb: tuple[float, float, float]
    tone_bin: int


CATEGORIES: tuple[Category, ...] = (
    Category(0, "circle", "red", (0.90, 0.20, 0.20), 2),
    Category(1, "square", "blue", (0.20, 0.30, 0.90), 5),
    Category(2, "triangle", "green", (0.20, 0.80, 0.30), 8),
    Category(3, "circle", "yellow", (0.90, 0.90, 0.20), 11),
    Category(4, "square", "magenta", (0.90, 0.20, 0.90), 14),
    Category(5, "triangle", "cyan", (0.20, 0.90, 0.90), 17),
    Category(6, "circle", "white", (0.95, 0.95, 0.95), 20),
    Category(7, "square", "orange", (0.95, 0.60, 0.10), 23),
)
SEEN_CATEGORY_IDS = (0, 1, 2, 3, 4, 5)
UNSEEN_CATEGORY_IDS = (6, 7)

SPLITS = ("train", "seen-test", "unseen-test", "null-test")

TEMPLATE_FAMILIES = (
    "text-only",          # "the red circle"
    "audio-argmax",       # "the object making the loudest sound"
    "audio-presence",     # "the circle that is making sound"
    "negation",           # "the silent square"
    "temporal",           # "the object that sounded before the blue square"
    "null",               # "the white circle making sound" (absent category)
)

_CORE_WORDS = [
    "the", "object", "making", "loudest", "sound", "that", "is", "silent",
    "sounded", "before",
    "circle", "square", "triangle",
    "red", "blue", "green", "yellow", "magenta", "cyan", "white", "orange",
]
# padding words keep the embedding table at the declared desk-scale size
_FILLER_WORDS = [f"w{i:02d}" for i in range(64 - len(_CORE_WORDS))]
VOCAB: tuple[str, ...] = tuple(_CORE_WORDS + _FILLER_WORDS)
_WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}


def tokenize(text: str, p_max: int) -> list[int]:
    words = text.split()
    if not words:
        raise GenerationError("empty expression")
    if len(words) > p_max:
        raise GenerationError(f"expression longer than {p_max} tokens: {text!r}")
    try:
        return [_WORD_TO_ID[w] for w in words]
    except KeyError as e:
        raise GenerationError(f"word not in vocabulary: {e.args[0]!r}") from None


# --- configuration and sample records --------------------------------------

@dataclass
class GenConfig:
    height: int = 32
    width: int = 32
    num_frames: int = 8
    d_audio_raw: int = 32
    p_max: int = 12
    min_objects: int = 2
    max_objects: int = 3
    min_size: int = 4
    max_size: int = 6
    background: float = 0.08
    max_retries: int = 200

    def validate(self) -> None:
        if self.num_frames < 2:
            raise ValueError("num_frames must be >= 2")
        if not (1 <= self.min_objects <= self.max_objects <= 4):
            raise ValueError("object count must be within 1..4")
        if self.height % 2 or self.width % 2:
            raise ValueError("frame sides must be even")


@dataclass
class ObjectTrack:
    category_id: int
    size: float
    trajectory: np.ndarray          # (num_frames, 2) centers as (x, y)
    tone_bin: int
    amplitude_envelope: np.ndarray  # (num_frames,) in [0, 1]

    @property
    def category(self) -> Category:
        return CATEGORIES[self.category_id]

    def total_amplitude(self) -> float:
        return float(self.amplitude_envelope.sum())

    def onset(self) -> int | None:
        nz = np.nonzero(self.amplitude_envelope > 0.0)[0]
        return int(nz[0]) if nz.size else None


@dataclass
class VideoSample:
    sample_id: str
    split: str
    template_id: int
    expression: str
    expression_tokens: list[int]
    frames: np.ndarray        # (N, 3, H, W) float64 in [0, 1]
    audio_descriptors: np.ndarray  # (N, d_audio_raw) float64
    target_masks: np.ndarray  # (N, H, W) uint8 in {0, 1}
    tracks: list[ObjectTrack] = field(default_factory=list)
    target_index: int | None = None

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


# --- geometry ---------------------------------------------------------------

def shape_mask(shape: str, cx: float, cy: float, size: float,
               height: int, width: int) -> np.ndarray:
    """Rasterize one analytic shape; pixel (x, y) samples at (x+.5, y+.5)."""
    ys, xs = np.mgrid[0:height, 0:width]
    px = xs + 0.5
    py = ys + 0.5
    if shape == "circle":
        inside = (px - cx) ** 2 + (py - cy) ** 2 <= size ** 2
    elif shape == "square":
        inside = np.maximum(np.abs(px - cx), np.abs(py - cy)) <= size
    elif shape == "triangle":
        # isoceles: apex (cx, cy-size), base corners (cx +/- size, cy+size)
        inside = ((py >= cy - size) & (py <= cy + size)
                  & (np.abs(px - cx) <= (py - (cy - size)) / 2.0))
    else:
        raise ValueError(f"unknown shape kind {shape!r}")
    return inside.astype(np.uint8)


_QUADRANTS = ((0, 0), (1, 0), (0, 1), (1, 1))  # (qx, qy) grid cells


def _sample_track(rng: np.random.Generator, cfg: GenConfig, category_id: int,
                  quadrant: tuple[int, int]) -> ObjectTrack:
    qw, qh = cfg.width // 2, cfg.height // 2
    size = float(rng.integers(cfg.min_size, cfg.max_size + 1))
    x0 = quadrant[0] * qw + size + 1.0
    x1 = quadrant[0] * qw + qw - size - 1.0
    y0 = quadrant[1] * qh + size + 1.0
    y1 = quadrant[1] * qh + qh - size - 1.0
    cx = rng.uniform(x0, x1)
    cy = rng.uniform(y0, y1)
    vx = rng.uniform(-1.4, 1.4)
    vy = rng.uniform(-1.4, 1.4)
    traj = np.zeros((cfg.num_frames, 2))
    for t in range(cfg.num_frames):
        traj[t] = (cx, cy)
        cx += vx
        cy += vy
        if cx < x0 or cx > x1:
            vx = -vx
            cx = min(max(cx, x0), x1)
        if cy < y0 or cy > y1:
            vy = -vy
            cy = min(max(cy, y0), y1)

    if rng.random() < 0.75:  # sounding object: step envelope from its onset
        onset = int(rng.integers(0, cfg.num_frames - 1))
        level = float(rng.uniform(0.3, 1.0))
        env = np.zeros(cfg.num_frames)
        env[onset:] = level
    else:
        env = np.zeros(cfg.num_frames)
    cat = CATEGORIES[category_id]
    return ObjectTrack(category_id=category_id, size=size, trajectory=traj,
                       tone_bin=cat.tone_bin, amplitude_envelope=env)


def _sample_scene(rng: np.random.Generator, cfg: GenConfig,
                  category_pool: tuple[int, ...],
                  must_include: int | None = None) -> list[ObjectTrack]:
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    pool = list(category_pool)
    rng.shuffle(pool)
    cats = pool[:n]
    if must_include is not None and must_include not in cats:
        cats[0] = must_include
    quads = list(_QUADRANTS)
    rng.shuffle(quads)
    return [_sample_track(rng, cfg, c, q) for c, q in zip(sorted(cats), quads)]


# --- audio mixing -----------------------------------------------------------

def track_audio(track: ObjectTrack, cfg: GenConfig) -> np.ndarray:
    """Spectral contribution of one object: a Gaussian bump at its tone bin."""
    bins = np.arange(cfg.d_audio_raw, dtype=np.float64)
    bump = np.exp(-0.5 * (bins - track.tone_bin) ** 2)
    return track.amplitude_envelope[:, None] * bump[None, :]


def mix_audio(tracks: list[ObjectTrack], cfg: GenConfig) -> np.ndarray:
    out = np.zeros((cfg.num_frames, cfg.d_audio_raw))
    for tr in tracks:
        out += track_audio(tr, cfg)
    return out


# --- template resolution (the labeling oracle) ------------------------------

def resolve_template(tracks: list[ObjectTrack], family: str,
                     arg_category: int | None) -> int | None:
    """Return the referred track index, or None for a null reference.

    Raises GenerationError when the template is unsatisfiable or ambiguous
    for this scene. Argmax ties break toward the lower category_id.
    """
    if family == "text-only":
        hits = [i for i, t in enumerate(tracks) if t.category_id == arg_category]
        if len(hits) != 1:
            raise GenerationError("text-only reference is not unique")
        return hits[0]
    if family == "audio-argmax":
        sounding = [(t.total_amplitude(), t.category_id, i)
                    for i, t in enumerate(tracks) if t.total_amplitude() > 0]
        if not sounding:
            raise GenerationError("no sounding object for audio-argmax")
        best = max(sounding, key=lambda s: (s[0], -s[1]))
        return best[2]
    if family == "audio-presence":
        shape = CATEGORIES[arg_category].shape
        hits = [i for i, t in enumerate(tracks)
                if t.category.shape == shape and t.total_amplitude() > 0]
        if len(hits) != 1:
            raise GenerationError("sounding-shape reference is not unique")
        return hits[0]
    if family == "negation":
        shape = CATEGORIES[arg_category].shape
        hits = [i for i, t in enumerate(tracks)
                if t.category.shape == shape and t.total_amplitude() == 0.0]
        if len(hits) != 1:
            raise GenerationError("silent-shape reference is not unique")
        return hits[0]
    if family == "temporal":
        ref = next((t for t in tracks if t.category_id == arg_category), None)
        if ref is None or ref.onset() is None:
            raise GenerationError("temporal reference object silent or absent")
        before = [(t.onset(), -t.category_id, i) for i, t in enumerate(tracks)
                  if t.onset() is not None and t.onset() < ref.onset()]
        if not before:
            raise GenerationError("nothing sounded before the reference")
        return max(before)[2]
    if family == "null":
        if any(t.category_id == arg_category for t in tracks):
            raise GenerationError("null reference category is actually present")
        return None
    raise ValueError(f"unknown template family {family!r}")


def _expression_text(family: str, arg_category: int | None) -> str:
    cat = CATEGORIES[arg_category] if arg_category is not None else None
    if family == "text-only":
        return f"the {cat.color_name} {cat.shape}"
    if family == "audio-argmax":
        return "the object making the loudest sound"
    if family == "audio-presence":
        return f"the {cat.shape} that is making sound"
    if family == "negation":
        return f"the silent {cat.shape}"
    if family == "temporal":
        return f"the object that sounded before the {cat.color_name} {cat.shape}"
    if family == "null":
        return f"the {cat.color_name} {cat.shape} making sound"
    raise ValueError(f"unknown template family {family!r}")


def _pick_arg_category(rng: np.random.Generator, tracks: list[ObjectTrack],
                       family: str, split: str) -> int | None:
    present = [t.category_id for t in tracks]
    if family == "null":
        pool = [c.category_id for c in CATEGORIES if c.category_id not in present]
        return int(pool[rng.integers(0, len(pool))])
    if family == "audio-argmax":
        return None
    want_unseen = split == "unseen-test"
    cands = [c for c in present
             if (c in UNSEEN_CATEGORY_IDS) == want_unseen] or present
    if family == "temporal":
        # the argument names the later-sounding reference, not the target
        cands = present
    return int(cands[rng.integers(0, len(cands))])


# --- rendering and full-sample generation -----------------------------------

def render_frames(tracks: list[ObjectTrack], cfg: GenConfig) -> np.ndarray:
    frames = np.full((cfg.num_frames, 3, cfg.height, cfg.width), cfg.background)
    for tr in tracks:
        rgb = tr.category.rgb
        for t in range(cfg.num_frames):
            cx, cy = tr.trajectory[t]
            m = shape_mask(tr.category.shape, cx, cy, tr.size, cfg.height, cfg.width)
            for c in range(3):
                frames[t, c][m == 1] = rgb[c]
    return frames


def render_target_masks(tracks: list[ObjectTrack], target: int | None,
                        cfg: GenConfig) -> np.ndarray:
    masks = np.zeros((cfg.num_frames, cfg.height, cfg.width), dtype=np.uint8)
    if target is None:
        return masks
    tr = tracks[target]
    for t in range(cfg.num_frames):
        cx, cy = tr.trajectory[t]
        masks[t] = shape_mask(tr.category.shape, cx, cy, tr.size, cfg.height, cfg.width)
    return masks


_TRAIN_FAMILY_CYCLE = (
    "text-only", "audio-argmax", "audio-presence", "negation",
    "temporal", "text-only", "audio-argmax", "null",
)
_UNSEEN_FAMILY_CYCLE = ("text-only", "audio-argmax")


def generate_scene(seed: int, config: GenConfig, split: str = "train",
                   family: str | None = None, sample_id: str = "sample") -> VideoSample:
    """Generate one sample, fully determined by (seed, config, split, family)."""
    config.validate()
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    if family is None:
        family = "null" if split == "null-test" else "text-only"
    rng = np.random.default_rng(np.random.SeedSequence([seed, SPLITS.index(split),
                                                        TEMPLATE_FAMILIES.index(family)]))
    pool = SEEN_CATEGORY_IDS
    must_include = None
    if split == "unseen-test":
        pool = SEEN_CATEGORY_IDS + UNSEEN_CATEGORY_IDS
    for _ in range(config.max_retries):
        if split == "unseen-test":
            must_include = int(UNSEEN_CATEGORY_IDS[rng.integers(0, len(UNSEEN_CATEGORY_IDS))])
        tracks = _sample_scene(rng, config, pool, must_include)
        try:
            arg = _pick_arg_category(rng, tracks, family, split)
            target = resolve_template(tracks, family, arg)
        except GenerationError:
            continue
        if split == "unseen-test" and (
                target is None or tracks[target].category_id not in UNSEEN_CATEGORY_IDS):
            continue
        expression = _expression_text(family, arg)
        tokens = tokenize(expression, config.p_max)
        frames = render_frames(tracks, config)
        audio = mix_audio(tracks, config)
        # quantize to the on-disk float32 precision so round trips are exact
        frames = frames.astype(np.float32).astype(np.float64)
        audio = audio.astype(np.float32).astype(np.float64)
        masks = render_target_masks(tracks, target, config)
        return VideoSample(sample_id=sample_id, split=split,
                           template_id=TEMPLATE_FAMILIES.index(family),
                           expression=expression, expression_tokens=tokens,
                           frames=frames, audio_descriptors=audio,
                           target_masks=masks, tracks=tracks, target_index=target)
    raise GenerationError(
        f"could not satisfy template {family!r} for split {split!r} "
        f"after {config.max_retries} retries (seed {seed})")


# --- serialization ----------------------------------------------------------

def write_pgm(path: Path, mask: np.ndarray) -> None:
    data = (mask.astype(np.uint8) * 255)
    with open(path, "wb") as f:
        f.write(f"P5\n{mask.shape[1]} {mask.shape[0]}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DatasetError(f"cannot read {path}: {e}") from e
    if not raw.startswith(b"P5"):
        raise DatasetError(f"{path}: not a binary PGM file")
    parts = raw.split(b"\n", 3)
    if len(parts) < 4:
        raise DatasetError(f"{path}: malformed PGM header")
    w, h = (int(v) for v in parts[1].split())
    body = parts[3]
    if len(body) != w * h:
        raise DatasetError(f"{path}: expected {w * h} pixel bytes, got {len(body)}")
    return (np.frombuffer(body, dtype=np.uint8).reshape(h, w) > 127).astype(np.uint8)


def _track_to_json(tr: ObjectTrack) -> dict:
    return {
        "category_id": tr.category_id,
        "size": tr.size,
        "trajectory": tr.trajectory.tolist(),
        "tone_bin": tr.tone_bin,
        "amplitude_envelope": tr.amplitude_envelope.tolist(),
    }


def _track_from_json(d: dict) -> ObjectTrack:
    return ObjectTrack(category_id=d["category_id"], size=d["size"],
                       trajectory=np.array(d["trajectory"], dtype=np.float64),
                       tone_bin=d["tone_bin"],
                       amplitude_envelope=np.array(d["amplitude_envelope"],
                                                   dtype=np.float64))


def save_sample(sample: VideoSample, sample_dir: Path) -> None:
    sample_dir.mkdir(parents=True, exist_ok=True)
    (sample_dir / "frames.f32").write_bytes(
        sample.frames.astype("<f4").tobytes())
    (sample_dir / "audio.f32").write_bytes(
        sample.audio_descriptors.astype("<f4").tobytes())
    for t in range(sample.num_frames):
        write_pgm(sample_dir / f"mask_{t:03d}.pgm", sample.target_masks[t])
    (sample_dir / "expression.txt").write_text(sample.expression, encoding="utf-8")
    (sample_dir / "tracks.json").write_text(json.dumps({
        "tracks": [_track_to_json(tr) for tr in sample.tracks],
        "target_index": sample.target_index,
    }), encoding="utf-8")


def build_dataset(seed: int, config: GenConfig, out_dir: str | Path, *,
                  n_train: int, n_seen: int, n_unseen: int, n_null: int) -> dict:
    """Generate all splits, write them under ``out_dir``, return the manifest."""
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plan = [("train", n_train), ("seen-test", n_seen),
            ("unseen-test", n_unseen), ("null-test", n_null)]
    records = []
    for split, count in plan:
        for k in range(count):
            if split == "null-test":
                family = "null"
            elif split == "unseen-test":
                family = _UNSEEN_FAMILY_CYCLE[k % len(_UNSEEN_FAMILY_CYCLE)]
            else:
                family = _TRAIN_FAMILY_CYCLE[k % len(_TRAIN_FAMILY_CYCLE)]
            sample_id = f"{split}-{k:04d}"
            sample_seed = seed * 100003 + SPLITS.index(split) * 1009 + k
            sample = generate_scene(sample_seed, config, split=split,
                                    family=family, sample_id=sample_id)
            rel = Path(split) / f"{k:04d}"
            save_sample(sample, out_dir / rel)
            records.append({
                "id": sample_id,
                "split": split,
                "dir": str(rel),
                "template": TEMPLATE_FAMILIES[sample.template_id],
                "expression": sample.expression,
                "categories": [tr.category_id for tr in sample.tracks],
                "target_category": (None if sample.target_index is None
                                    else sample.tracks[sample.target_index].category_id),
            })
    manifest = {
        "version": "1",
        "seed": seed,
        "config": asdict(config),
        "samples": records,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return manifest


def manifest_digest(root: str | Path) -> str:
    return hashlib.sha256((Path(root) / "manifest.json").read_bytes()).hexdigest()


def load_manifest(root: str | Path) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise DatasetError(f"no manifest at {path}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    manifest["_root"] = str(root)
    return manifest


def _read_f32(path: Path, shape: tuple[int, ...]) -> np.ndarray:
    expected = int(np.prod(shape)) * 4
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DatasetError(f"cannot read {path}: {e}") from e
    if len(raw) != expected:
        raise DatasetError(f"{path}: expected {expected} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)


def load_sample(manifest: dict, sample_id: str) -> VideoSample:
    rec = next((r for r in manifest["samples"] if r["id"] == sample_id), None)
    if rec is None:
        raise DatasetError(f"sample id {sample_id!r} not in manifest")
    cfg = GenConfig(**manifest["config"])
    sdir = Path(manifest["_root"]) / rec["dir"]
    frames = _read_f32(sdir / "frames.f32",
                       (cfg.num_frames, 3, cfg.height, cfg.width))
    audio = _read_f32(sdir / "audio.f32", (cfg.num_frames, cfg.d_audio_raw))
    masks = np.stack([read_pgm(sdir / f"mask_{t:03d}.pgm")
                      for t in range(cfg.num_frames)])
    expression = (sdir / "expression.txt").read_text(encoding="utf-8")
    meta = json.loads((sdir / "tracks.json").read_text(encoding="utf-8"))
    return VideoSample(sample_id=sample_id, split=rec["split"],
                       template_id=TEMPLATE_FAMILIES.index(rec["template"]),
                       expression=expression,
                       expression_tokens=tokenize(expression, cfg.p_max),
                       frames=frames, audio_descriptors=audio,
                       target_masks=masks,
                       tracks=[_track_from_json(d) for d in meta["tracks"]],
                       target_index=meta["target_index"])


def load_split(manifest: dict, split: str) -> list[VideoSample]:
    return [load_sample(manifest, r["id"]) for r in manifest["samples"]
            if r["split"] == split]
