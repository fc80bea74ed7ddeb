"""Frame-directory ingestion, preprocessing and the synthetic panning dataset.

Datasets on disk follow ``<root>/<sequence_id>/<frame_number>.<png|jpg>``;
lexicographic file order within a sequence defines time.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

INPUT_LEN = 8
TRAIN_WINDOW = 10
FRAME_SUFFIXES = (".png", ".jpg", ".jpeg")
TARGET_HW = (128, 160)


class DataError(ValueError):
    pass


@dataclass
class FrameSequence:
    """RGB clip stored channels-first as ``(3, n, H, W)`` floats in [0, 1]."""

    frames: np.ndarray
    source_id: str = ""
    start_index: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        f = self.frames
        if f.ndim != 4 or f.shape[0] != 3:
            raise DataError(f"frames must be (3, n, H, W), got {f.shape}")
        if f.shape[1] < 1:
            raise DataError("a FrameSequence needs at least one frame")
        if f.shape[2] % 16 or f.shape[3] % 16:
            raise DataError(f"frame size {f.shape[2:]} is not divisible by 16")

    def __len__(self) -> int:
        return self.frames.shape[1]

    @property
    def hw(self) -> tuple[int, int]:
        return self.frames.shape[2], self.frames.shape[3]


@dataclass
class ClipSample:
    input: FrameSequence
    target: FrameSequence

    def __post_init__(self):
        if len(self.input) != INPUT_LEN:
            raise DataError(f"clip input must have {INPUT_LEN} frames, got {len(self.input)}")


@dataclass
class IndexEntry:
    source_id: str
    start_index: int


@dataclass
class DatasetIndex:
    root: Path
    entries: list[IndexEntry]
    frame_shape: tuple[int, int]
    total_frames: int
    window: int = TRAIN_WINDOW
    temporal_factor: int = 1
    files: dict[str, list[Path]] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.entries)

    def save(self, path: str | Path) -> None:
        payload = [{"source_id": e.source_id, "start_index": e.start_index} for e in self.entries]
        Path(path).write_text(json.dumps(payload, indent=1))

    @staticmethod
    def load_entries(path: str | Path) -> list[IndexEntry]:
        return [IndexEntry(d["source_id"], int(d["start_index"])) for d in json.loads(Path(path).read_text())]


@dataclass
class SynthSpec:
    canvas: tuple[int, int] = (64, 80)
    n_sprites: int = 2
    pan_velocity: int = 1
    sprite_velocity_range: tuple[int, int] = (-1, 1)
    texture_seed: int = 0
    length: int = 20
    n_sequences: int = 1

    def __post_init__(self):
        h, w = self.canvas
        if h % 16 or w % 16 or h <= 0 or w <= 0:
            raise DataError(f"canvas {h}x{w} must be positive and divisible by 16")
        if self.pan_velocity < 0:
            raise DataError("pan_velocity must be >= 0")
        if self.length < 1 or self.n_sequences < 1:
            raise DataError("length and n_sequences must be >= 1")
        lo, hi = self.sprite_velocity_range
        if lo > hi:
            raise DataError("sprite_velocity_range must be (low, high) with low <= high")


# ---------------------------------------------------------------------------
# Frame-level operations
# ---------------------------------------------------------------------------

def crop_box(h: int, w: int, aspect: tuple[int, int] = (4, 5)) -> tuple[int, int, int, int]:
    """Largest centred ``aspect`` (h:w) box inside an ``h x w`` frame, as (top, left, ch, cw)."""
    ah, aw = aspect
    if h * aw <= w * ah:
        ch, cw = h, (h * aw) // ah
    else:
        ch, cw = (w * ah) // aw, w
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def preprocess(raw_frame: np.ndarray, target_hw: tuple[int, int] = TARGET_HW) -> np.ndarray:
    """Centre-crop to 4:5, area-resample to ``target_hw`` and scale to [0, 1].

    ``raw_frame`` is ``(H, W, 3)`` uint8 (or float already in [0, 1]).
    Returns ``(3, th, tw)`` float32.
    """
    raw = np.asarray(raw_frame)
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise DataError(f"expected an RGB frame (H, W, 3), got {raw.shape}")
    if raw.dtype == np.uint8:
        img = raw.astype(np.float32) / 255.0
    else:
        img = raw.astype(np.float32)
    th, tw = target_hw
    top, left, ch, cw = crop_box(*img.shape[:2], aspect=(th, tw))
    if ch < th or cw < tw:
        raise DataError(f"frame {raw.shape[0]}x{raw.shape[1]} too small for a {th}x{tw} crop")
    img = img[top:top + ch, left:left + cw]
    if (ch, cw) != (th, tw):
        chans = [
            np.asarray(Image.fromarray(np.ascontiguousarray(img[..., c]), mode="F").resize((tw, th), Image.BOX))
            for c in range(3)
        ]
        img = np.stack(chans, axis=-1)
    return np.clip(img, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32)


def temporal_downsample(sequence, factor: int = 3):
    """Keep every ``factor``-th frame (indices 0, factor, 2*factor, ...)."""
    if factor < 1:
        raise DataError(f"temporal factor must be >= 1, got {factor}")
    if isinstance(sequence, FrameSequence):
        return FrameSequence(sequence.frames[:, ::factor], sequence.source_id, sequence.start_index,
                             dict(sequence.meta))
    return sequence[::factor]


def augment_flip(clip: ClipSample, rng: np.random.Generator, p: float = 0.5,
                 force: bool | None = None) -> ClipSample:
    """Mirror input and target together about the vertical axis with probability ``p``."""
    flip = bool(rng.random() < p) if force is None else force
    if not flip:
        return clip
    return ClipSample(
        FrameSequence(clip.input.frames[..., ::-1].copy(), clip.input.source_id, clip.input.start_index),
        FrameSequence(clip.target.frames[..., ::-1].copy(), clip.target.source_id, clip.target.start_index),
    )


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def _frame_files(seq_dir: Path) -> list[Path]:
    return sorted(p for p in seq_dir.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)


def read_frame(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except Exception as exc:  # PIL raises a zoo of types
        raise DataError(f"cannot decode frame file {path}: {exc}") from exc


def _check_header(path: Path) -> None:
    try:
        with Image.open(path):
            pass
    except Exception as exc:
        raise DataError(f"cannot decode frame file {path}: {exc}") from exc


def ingest(root_path: str | Path, dataset_kind: str = "train", *, window: int = TRAIN_WINDOW,
           stride: int | None = None, temporal_factor: int = 1, verify: bool = True) -> DatasetIndex:
    """Index ``root_path`` into fixed-length windows.

    ``train`` uses non-overlapping windows at offsets 0, window, 2*window, ...;
    ``eval`` slides by ``stride`` (defaults to 10, one window per ten frames).
    Offsets are counted after temporal downsampling.
    """
    root = Path(root_path)
    if dataset_kind not in ("train", "eval"):
        raise DataError(f"unknown dataset kind {dataset_kind!r}")
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    if dataset_kind == "train":
        stride = window
    elif stride is None:
        stride = TRAIN_WINDOW
    if stride < 1:
        raise DataError("stride must be >= 1")

    seq_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    files: dict[str, list[Path]] = {}
    entries: list[IndexEntry] = []
    total = 0
    frame_shape = None
    for d in seq_dirs:
        fs = _frame_files(d)
        if not fs:
            continue
        fs = temporal_downsample(fs, temporal_factor)
        if verify:
            for f in fs:
                _check_header(f)
        total += len(fs)
        if frame_shape is None:
            frame_shape = read_frame(fs[0]).shape[:2]
        if len(fs) < window:
            logger.warning("sequence %s has %d frames (< window %d); skipped", d.name, len(fs), window)
            continue
        files[d.name] = fs
        entries.extend(IndexEntry(d.name, s) for s in range(0, len(fs) - window + 1, stride))
    if not files and total == 0:
        raise DataError(f"no sequences found under {root}")
    return DatasetIndex(root, entries, tuple(frame_shape), total, window, temporal_factor, files)


def load_clip(index: DatasetIndex, entry: IndexEntry, target_hw: tuple[int, int] = TARGET_HW,
              n_target: int = 1) -> ClipSample:
    """Input = window frames 1..8, targets = frames 9..8+n_target."""
    fs = index.files[entry.source_id]
    need = 1 + INPUT_LEN + n_target
    window = fs[entry.start_index:entry.start_index + need]
    if len(window) < need:
        raise DataError(f"window at {entry.source_id}:{entry.start_index} has {len(window)} < {need} frames")
    frames = np.stack([preprocess(read_frame(p), target_hw) for p in window[1:]], axis=1)
    start = entry.start_index + 1
    return ClipSample(
        FrameSequence(frames[:, :INPUT_LEN], entry.source_id, start),
        FrameSequence(frames[:, INPUT_LEN:], entry.source_id, start + INPUT_LEN),
    )


def split_windows(seq: FrameSequence, window: int = TRAIN_WINDOW, stride: int | None = None,
                  n_target: int = 1) -> list[ClipSample]:
    """In-memory counterpart of ``ingest`` + ``load_clip`` for a decoded sequence."""
    stride = window if stride is None else stride
    need = 1 + INPUT_LEN + n_target
    if need > window:
        raise DataError(f"window {window} too short for {n_target} target frame(s)")
    out = []
    for s in range(0, len(seq) - window + 1, stride):
        f = seq.frames[:, s + 1:s + need]
        out.append(ClipSample(FrameSequence(f[:, :INPUT_LEN], seq.source_id, s + 1),
                              FrameSequence(f[:, INPUT_LEN:], seq.source_id, s + 1 + INPUT_LEN)))
    return out


# ---------------------------------------------------------------------------
# Synthetic panning dataset
# ---------------------------------------------------------------------------

def _periodic_texture(h: int, w: int, rng: np.random.Generator, beta: float = 1.2) -> np.ndarray:
    """Colour 1/f^beta noise, periodic in both axes so circular shifts stay seamless."""
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    radius = np.sqrt(fy ** 2 + fx ** 2)
    radius[0, 0] = 1.0
    amp = radius ** (-beta)
    amp[0, 0] = 0.0
    mix = rng.normal(size=(3, 3)) * 0.5 + np.eye(3)
    chans = []
    for _ in range(3):
        spec = (rng.normal(size=amp.shape) + 1j * rng.normal(size=amp.shape)) * amp
        chans.append(np.fft.irfft2(spec, s=(h, w)))
    tex = np.tensordot(mix, np.stack(chans), axes=1)
    tex -= tex.mean(axis=(1, 2), keepdims=True)
    tex /= np.abs(tex).max() + 1e-12
    return (0.5 + 0.4 * tex).astype(np.float32)


def synth_generate(spec: SynthSpec, rng: np.random.Generator | int) -> list[FrameSequence]:
    """Render ``spec.n_sequences`` clips of a textured background panning right.

    The background moves ``pan_velocity`` px/frame with wrap-around; sprites
    (flat-coloured squares) move independently, also wrapping. Ground-truth
    displacements are stored in each sequence's ``meta``.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    h, w = spec.canvas
    tex_rng = np.random.default_rng([spec.texture_seed, int(rng.integers(2**31))])
    out = []
    for i in range(spec.n_sequences):
        bg = _periodic_texture(h, w, tex_rng)
        size = max(2, h // 8)
        sprites = []
        for _ in range(spec.n_sprites):
            lo, hi = spec.sprite_velocity_range
            sprites.append({
                "pos": [int(rng.integers(h)), int(rng.integers(w))],
                "vel": [int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))],
                "color": rng.uniform(0.05, 0.95, size=3).astype(np.float32).tolist(),
            })
        frames = np.empty((3, spec.length, h, w), np.float32)
        for k in range(spec.length):
            f = np.roll(bg, spec.pan_velocity * k, axis=2)
            for sp in sprites:
                y0 = (sp["pos"][0] + sp["vel"][0] * k) % h
                x0 = (sp["pos"][1] + sp["vel"][1] * k) % w
                ys = (np.arange(size) + y0) % h
                xs = (np.arange(size) + x0) % w
                f[:, ys[:, None], xs[None, :]] = np.asarray(sp["color"], np.float32)[:, None, None]
            frames[:, k] = f
        meta = {"pan_velocity": spec.pan_velocity,
                "background_dx": [spec.pan_velocity * k for k in range(spec.length)],
                "sprites": sprites}
        out.append(FrameSequence(frames, f"seq{i:04d}", 0, meta))
    return out


def synth_dataset(canvas: tuple[int, int], pans: Sequence[int], n_sequences: int, length: int,
                  seed: int, n_sprites: int = 2) -> list[FrameSequence]:
    """Sequences cycling through ``pans``; ids are unique across the whole set."""
    rng = np.random.default_rng(seed)
    seqs = []
    for i in range(n_sequences):
        spec = SynthSpec(canvas=canvas, n_sprites=n_sprites, pan_velocity=int(pans[i % len(pans)]),
                         texture_seed=seed, length=length)
        (s,) = synth_generate(spec, rng)
        s.source_id = f"seq{i:04d}"
        seqs.append(s)
    return seqs


def write_dataset(sequences: Iterable[FrameSequence], root: str | Path) -> Path:
    """Write sequences as PNG frame directories plus ``motion.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    motion = {}
    for seq in sequences:
        d = root / seq.source_id
        d.mkdir(exist_ok=True)
        u8 = np.round(np.clip(seq.frames, 0, 1) * 255).astype(np.uint8)
        for k in range(len(seq)):
            Image.fromarray(u8[:, k].transpose(1, 2, 0)).save(d / f"{k:06d}.png")
        motion[seq.source_id] = seq.meta.get("pan_velocity", 0)
    (root / "motion.json").write_text(json.dumps(motion, indent=1, sort_keys=True))
    return root


def read_motion_labels(root: str | Path) -> dict[str, float]:
    path = Path(root) / "motion.json"
    return json.loads(path.read_text()) if path.exists() else {}


def stack_clips(clips: Sequence[ClipSample]) -> tuple[np.ndarray, np.ndarray]:
    """Batch clips into ``(N, 3, 8, H, W)`` inputs and ``(N, 3, n, H, W)`` targets."""
    x = np.stack([c.input.frames for c in clips])
    y = np.stack([c.target.frames for c in clips])
    if x.min() < 0 or x.max() > 1 or y.min() < 0 or y.max() > 1:
        raise DataError("frame values outside [0, 1]")
    return x, y
