"""Frame-sequence loading, augmentation, and the synthetic micro-motion generator.

Sequences are directories of 8-bit PNG/PGM frames read as intensity/255. A
dataset manifest is JSON lines: line 1 is a header object with ``class_names``
(plus an optional ``extent`` hint), every following line one sequence entry
{"sequence_dir", "subject", "label", optional "frames"}.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .dynimg import MIN_FRAMES
from .io_utils import atomic_write_bytes, atomic_write_text

FRAME_SUFFIXES = (".png", ".pgm")

CLASS_NAMES = ("drift_right", "drift_up", "pulse")


class SequenceLoadError(ValueError):
    pass


@dataclass
class FrameSequence:
    """Ordered stack of aligned frames with subject/label metadata."""

    frames: np.ndarray  # T x C x H x W in [0,1]
    subject_id: str
    label: int
    source_path: str = ""

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def middle_frame(self) -> np.ndarray:
        return self.frames[(self.num_frames - 1) // 2]


@dataclass(frozen=True)
class ManifestEntry:
    sequence_dir: str
    subject: str
    label: int
    frames: tuple[str, ...] | None = None


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    class_names: list[str]
    extent: int | None = None  # optional loader hint carried in the header

    def subjects(self) -> list[str]:
        return sorted({e.subject for e in self.entries})


@dataclass
class AugmentSpec:
    rotations_deg: list[float] = field(default_factory=lambda: [-10.0, -5.0, 5.0, 10.0])
    hflip: bool = True


def _decode_frame(path: Path) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise SequenceLoadError(f"undecodable image {path}: {exc}") from None
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB" if len(img.getbands()) >= 3 else "L")
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        return arr[None, :, :]
    return np.moveaxis(arr, 2, 0)  # H,W,C -> C,H,W


def _resize_frame(frame: np.ndarray, extent: int) -> np.ndarray:
    c, h, w = frame.shape
    if (h, w) == (extent, extent):
        return frame
    out = np.empty((c, extent, extent))
    for ch in range(c):
        pil = Image.fromarray(frame[ch].astype(np.float32), mode="F")
        out[ch] = np.asarray(pil.resize((extent, extent), Image.BILINEAR), dtype=np.float64)
    return np.clip(out, 0.0, 1.0)


def load_sequence(seq_dir, frame_list=None, extent: int = 64,
                  subject: str = "", label: int = 0) -> FrameSequence:
    """Load a frame directory into a T x C x H x W stack scaled to [0,1].

    Frame order is the explicit ``frame_list`` when given, else lexicographic
    filename order. All frames must decode and share one channel count.
    """
    seq_dir = Path(seq_dir)
    if frame_list:
        paths = [seq_dir / name for name in frame_list]
    else:
        paths = sorted(p for p in seq_dir.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)
    if len(paths) < MIN_FRAMES:
        raise SequenceLoadError(
            f"insufficient frames in {seq_dir}: {len(paths)} < {MIN_FRAMES}")
    frames = [_decode_frame(p) for p in paths]
    channels = {f.shape[0] for f in frames}
    if len(channels) != 1:
        raise SequenceLoadError(f"inconsistent channel counts {sorted(channels)} in {seq_dir}")
    stack = np.stack([_resize_frame(f, extent) for f in frames])
    return FrameSequence(frames=stack, subject_id=subject, label=label, source_path=str(seq_dir))


# ---------------------------------------------------------------------------
# augmentation

def _rotate_frame(frame: np.ndarray, angle_deg: float) -> np.ndarray:
    # rotation about image center, bilinear, zero padding
    out = np.empty_like(frame)
    for ch in range(frame.shape[0]):
        pil = Image.fromarray(frame[ch].astype(np.float32), mode="F")
        rot = pil.rotate(angle_deg, resample=Image.BILINEAR, fillcolor=0.0)
        out[ch] = np.asarray(rot, dtype=np.float64)
    return np.clip(out, 0.0, 1.0)


def augment(seq: FrameSequence, spec: AugmentSpec | None = None) -> list[FrameSequence]:
    """Expand one sequence into 1 + |rotations| + hflip sequences.

    Each output applies a single transform identically to every frame;
    the unmodified original is first.
    """
    spec = spec or AugmentSpec()
    out = [seq]
    for angle in spec.rotations_deg:
        frames = np.stack([_rotate_frame(f, angle) for f in seq.frames])
        out.append(FrameSequence(frames, seq.subject_id, seq.label, seq.source_path))
    if spec.hflip:
        out.append(FrameSequence(seq.frames[:, :, :, ::-1].copy(), seq.subject_id,
                                 seq.label, seq.source_path))
    return out


# ---------------------------------------------------------------------------
# manifest io

def write_manifest(manifest: Manifest, path) -> None:
    header: dict = {"class_names": list(manifest.class_names)}
    if manifest.extent is not None:
        header["extent"] = manifest.extent
    lines = [json.dumps(header)]
    for e in manifest.entries:
        doc: dict = {"sequence_dir": e.sequence_dir, "subject": e.subject, "label": e.label}
        if e.frames is not None:
            doc["frames"] = list(e.frames)
        lines.append(json.dumps(doc))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_manifest(path) -> Manifest:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in (s.strip() for s in fh) if ln]
    if not lines:
        raise SequenceLoadError(f"empty manifest {path}")
    header = json.loads(lines[0])
    if "class_names" not in header:
        raise SequenceLoadError(f"{path}: first line must carry class_names")
    class_names = list(header["class_names"])
    entries = []
    for ln in lines[1:]:
        doc = json.loads(ln)
        label = int(doc["label"])
        if not 0 <= label < len(class_names):
            raise SequenceLoadError(f"{path}: label {label} out of range")
        if not doc["subject"]:
            raise SequenceLoadError(f"{path}: empty subject id")
        entries.append(ManifestEntry(
            sequence_dir=doc["sequence_dir"], subject=str(doc["subject"]),
            label=label, frames=tuple(doc["frames"]) if "frames" in doc else None))
    return Manifest(entries=entries, class_names=class_names,
                    extent=int(header["extent"]) if "extent" in header else None)


def load_entry(manifest_path, entry: ManifestEntry, extent: int) -> FrameSequence:
    base = Path(manifest_path).parent
    return load_sequence(base / entry.sequence_dir, frame_list=entry.frames,
                         extent=extent, subject=entry.subject, label=entry.label)


# ---------------------------------------------------------------------------
# synthetic micro-motion dataset

# Blob brightness is modulated per sequence; the pulse class adds a sinusoidal
# amplitude wobble whose phase is random, so no single frame reveals the class.
_BLOB_GAIN = 0.4
_AMP_RANGE = (0.6, 1.4)
_PULSE_DEPTH = 0.15
_PULSE_CYCLES = 2.0
_JITTER_PX = 1.5


def _smooth_background(rng: np.random.Generator, extent: int) -> np.ndarray:
    coarse = rng.uniform(0.0, 1.0, size=(extent // 8 + 2, extent // 8 + 2))
    pil = Image.fromarray(coarse.astype(np.float32), mode="F")
    field_ = np.asarray(pil.resize((extent, extent), Image.BILINEAR), dtype=np.float64)
    return 0.2 + 0.3 * field_


def _render_frame(bg: np.ndarray, cx: float, cy: float, sigma: float, amp: float) -> np.ndarray:
    extent = bg.shape[0]
    ys = np.arange(extent)[:, None]
    xs = np.arange(extent)[None, :]
    blob = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma * sigma))
    return np.clip(bg + _BLOB_GAIN * amp * blob, 0.0, 1.0)


def _quantize(frame: np.ndarray) -> np.ndarray:
    return np.floor(frame * 255.0 + 0.5).astype(np.uint8)


def synth_dataset(out_dir, num_subjects: int = 8, seqs_per_subject: int = 6,
                  T: int = 24, extent: int = 32, motion_px: float = 1.0,
                  seed: int = 0) -> Manifest:
    """Render a balanced 3-class micro-motion dataset and its manifest.

    Class 0 drifts the blob right by ``motion_px`` over the sequence, class 1
    drifts it up, class 2 keeps it still and pulses its brightness. Subject
    appearance (background texture, blob placement and size) is drawn per
    subject so identity never predicts class; blob gain is drawn per sequence
    so single-frame brightness does not either.
    """
    if motion_px <= 0:
        raise ValueError("motion_px must be positive")
    if num_subjects < 2:
        raise ValueError("need at least 2 subjects for leave-one-subject-out")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for s in range(num_subjects):
        subject = f"s{s:02d}"
        bg = _smooth_background(rng, extent)
        base_cx = rng.uniform(0.3 * extent, 0.7 * extent)
        base_cy = rng.uniform(0.3 * extent, 0.7 * extent)
        sigma = rng.uniform(extent / 10.0, extent / 6.0)
        labels = [i % 3 for i in range(seqs_per_subject)]
        for m in range(seqs_per_subject):
            label = labels[m]
            seq_rel = f"{subject}/seq{m:02d}"
            seq_dir = out_dir / seq_rel
            seq_dir.mkdir(parents=True, exist_ok=True)
            cx = base_cx + rng.uniform(-_JITTER_PX, _JITTER_PX)
            cy = base_cy + rng.uniform(-_JITTER_PX, _JITTER_PX)
            amp = rng.uniform(*_AMP_RANGE)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            for t in range(T):
                frac = t / (T - 1)
                fx, fy, amp_t = cx, cy, amp
                if label == 0:
                    fx = cx + motion_px * frac
                elif label == 1:
                    fy = cy - motion_px * frac  # up = decreasing row index
                else:
                    amp_t = amp * (1.0 + _PULSE_DEPTH * np.sin(
                        2.0 * np.pi * _PULSE_CYCLES * frac + phase))
                frame = _render_frame(bg, fx, fy, sigma, amp_t)
                buf = io.BytesIO()
                Image.fromarray(_quantize(frame), mode="L").save(buf, format="PNG")
                atomic_write_bytes(seq_dir / f"frame_{t:03d}.png", buf.getvalue())
            entries.append(ManifestEntry(sequence_dir=seq_rel, subject=subject, label=label))
    manifest = Manifest(entries=entries, class_names=list(CLASS_NAMES), extent=extent)
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
