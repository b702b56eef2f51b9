"""Segmented sparse sampling and rank-pooled dynamic images.

A sequence of T frames is split into 3 equal-duration segments by the floor
rule, each segment into 3 sub-segments the same way, and one frame index is
drawn per sub-segment. Together with the onset/middle/offset triple this gives
four snippets, each collapsed to a single signed descriptor image by
approximate rank pooling (coefficients ``beta_t = 2t - n - 1``). An exact
rank-pooling solver (hinge objective minimized by subgradient descent) is kept
as a test oracle only.
"""

from __future__ import annotations

import json
import random
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .io_utils import atomic_write_bytes


class SequenceTooShort(ValueError):
    """Raised when a sequence has fewer than MIN_FRAMES frames."""


MIN_FRAMES = 9  # 3 segments x 3 sub-segments need at least one frame each


@dataclass(frozen=True)
class SamplingPlan:
    """Frame-index choices for the four snippets of one sequence.

    ``snippet_indices[0]`` is the onset/middle/offset triple; triples 1..3 are
    drawn one index per sub-segment of segments 1..3.
    """

    segment_bounds: tuple[tuple[int, int], ...]
    snippet_indices: tuple[tuple[int, int, int], ...]
    seed: int

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "segment_bounds": [list(b) for b in self.segment_bounds],
            "snippets": [list(s) for s in self.snippet_indices],
        }


@dataclass
class RankPoolConfig:
    variant: str = "time_average"  # or "direct_frame"
    ranksvm_reg_lambda: float = 1.0  # exact oracle only
    oracle_steps: int = 150
    oracle_lr: float = 0.05

    def __post_init__(self):
        if self.variant not in ("time_average", "direct_frame"):
            raise ValueError(f"unknown rank-pool variant {self.variant!r}")
        if self.ranksvm_reg_lambda <= 0 or self.oracle_steps <= 0 or self.oracle_lr <= 0:
            raise ValueError("rank-pool hyperparameters must be positive")


@dataclass
class DynamicImage:
    """Signed, un-normalized rank-pooled descriptor of one snippet."""

    pixels: np.ndarray  # C x H x W float64
    segment_id: int  # 0 = onset/middle/offset snippet, 1..3 = segments
    snippet: tuple[int, int, int] = field(default=(0, 0, 0))


def _split3(lo: int, hi: int) -> list[tuple[int, int]]:
    n = hi - lo
    return [(lo + (k * n) // 3, lo + ((k + 1) * n) // 3) for k in range(3)]


def make_plan(T: int, seed: int) -> SamplingPlan:
    """Deterministic sampling plan for a T-frame sequence.

    Segment k covers [floor(kT/3), floor((k+1)T/3)); sub-segments split each
    segment by the same rule; one index is drawn uniformly per sub-segment.
    """
    if T < MIN_FRAMES:
        raise SequenceTooShort(f"need at least {MIN_FRAMES} frames, got {T}")
    rng = random.Random(f"plan:{T}:{seed}")
    bounds = _split3(0, T)
    snippets = [(0, (T - 1) // 2, T - 1)]
    for lo, hi in bounds:
        triple = tuple(rng.randrange(a, b) for a, b in _split3(lo, hi))
        snippets.append(triple)
    return SamplingPlan(tuple(bounds), tuple(snippets), seed)


def arp_coefficients(n: int) -> np.ndarray:
    """Rank-pooling frame coefficients 2t - n - 1 for t = 1..n; they sum to 0."""
    if n < 2:
        raise ValueError(f"need at least 2 frames, got {n}")
    t = np.arange(1, n + 1, dtype=np.float64)
    return 2.0 * t - n - 1.0


def effective_frame_weights(n: int, variant: str) -> np.ndarray:
    """Per-frame weights after expanding the time-average recursion.

    time_average: frame tau enters every running mean V_t with t >= tau at
    weight 1/t, so its total weight is sum_{t>=tau} beta_t / t.
    direct_frame: the coefficients apply to raw frames unchanged.
    """
    beta = arp_coefficients(n)
    if variant == "direct_frame":
        return beta
    ratios = beta / np.arange(1, n + 1, dtype=np.float64)
    return np.cumsum(ratios[::-1])[::-1].copy()


def dynamic_image(frames: np.ndarray, cfg: RankPoolConfig | None = None,
                  segment_id: int = 0, snippet: tuple[int, int, int] = (0, 0, 0)) -> DynamicImage:
    """Rank-pool an n x C x H x W stack into one signed descriptor image."""
    cfg = cfg or RankPoolConfig()
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[0] < 2:
        raise ValueError(f"need an n>=2 stack of C x H x W frames, got shape {frames.shape}")
    weights = effective_frame_weights(frames.shape[0], cfg.variant)
    pixels = np.tensordot(weights, frames, axes=(0, 0))
    return DynamicImage(pixels=pixels, segment_id=segment_id, snippet=snippet)


def standardize(img: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Zero-mean unit-variance normalization applied per image."""
    img = np.asarray(img, dtype=np.float64)
    return (img - img.mean()) / (img.std() + eps)


class OracleDivergence(RuntimeError):
    """Subgradient descent increased the objective over 10 consecutive steps."""


def rank_pool_exact(frames: np.ndarray, cfg: RankPoolConfig | None = None) -> DynamicImage:
    """Minimize the regularized pairwise-hinge ranking objective directly.

    Frames are flattened to vectors, scored against their running time
    averages, and the descriptor is obtained by full-batch subgradient descent
    from 0. Exists as an independent oracle for the closed-form coefficients;
    not used in the pipeline.
    """
    cfg = cfg or RankPoolConfig()
    frames = np.asarray(frames, dtype=np.float64)
    n = frames.shape[0]
    if n < 2:
        raise ValueError("need at least 2 frames")
    shape = frames.shape[1:]
    feats = frames.reshape(n, -1)
    vt = np.cumsum(feats, axis=0) / np.arange(1, n + 1)[:, None]  # running means

    pair_scale = 2.0 / (n * (n - 1))
    d = np.zeros(feats.shape[1])
    prev_loss = np.inf
    rising = 0
    for _ in range(cfg.oracle_steps):
        scores = vt @ d
        grad = cfg.ranksvm_reg_lambda * d
        loss = 0.5 * cfg.ranksvm_reg_lambda * float(d @ d)
        for t in range(n):
            for q in range(t + 1, n):
                margin = 1.0 - scores[q] + scores[t]
                if margin > 0.0:
                    loss += pair_scale * margin
                    grad += pair_scale * (vt[t] - vt[q])
        if loss > prev_loss:
            rising += 1
            if rising >= 10:
                raise OracleDivergence(f"loss rose for {rising} consecutive steps")
        else:
            rising = 0
        prev_loss = loss
        d -= cfg.oracle_lr * grad
    return DynamicImage(pixels=d.reshape(shape), segment_id=0)


def ranking_scores(frames: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Scores <d, V_t> of each running time average under descriptor d."""
    frames = np.asarray(frames, dtype=np.float64)
    n = frames.shape[0]
    feats = frames.reshape(n, -1)
    vt = np.cumsum(feats, axis=0) / np.arange(1, n + 1)[:, None]
    return vt @ d.reshape(-1)


def segment_dynamic_images(frames: np.ndarray, seed: int,
                           cfg: RankPoolConfig | None = None) -> tuple[SamplingPlan, list[DynamicImage]]:
    """Sample four snippets from a T x C x H x W stack and rank-pool each."""
    cfg = cfg or RankPoolConfig()
    frames = np.asarray(frames, dtype=np.float64)
    plan = make_plan(frames.shape[0], seed)
    images = []
    for seg_id, triple in enumerate(plan.snippet_indices):
        stack = frames[list(triple)]
        images.append(dynamic_image(stack, cfg, segment_id=seg_id, snippet=triple))
    return plan, images


# ---------------------------------------------------------------------------
# serialization

DIMG_MAGIC = b"DIMG"
DIMG_VERSION = 1


def write_dimg(img: DynamicImage, path) -> None:
    """Raw descriptor file: magic, version u32 LE, C,H,W u32 LE, float64 LE data."""
    c, h, w = img.pixels.shape
    payload = DIMG_MAGIC + struct.pack("<4I", DIMG_VERSION, c, h, w)
    payload += img.pixels.astype("<f8").tobytes()
    atomic_write_bytes(path, payload)


def read_dimg(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != DIMG_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}")
    version, c, h, w = struct.unpack("<4I", blob[4:20])
    if version != DIMG_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    data = np.frombuffer(blob[20:], dtype="<f8")
    if data.size != c * h * w:
        raise ValueError(f"{path}: payload size mismatch")
    return data.reshape(c, h, w).copy()


def to_display_u8(pixels: np.ndarray) -> np.ndarray:
    """Min-max map to [0,255] u8; an all-equal image becomes mid-gray 128.

    Rounding is half away from zero, so a pixel exactly at mid-range maps up.
    """
    lo = float(pixels.min())
    hi = float(pixels.max())
    if hi == lo:
        return np.full(pixels.shape, 128, dtype=np.uint8)
    scaled = (pixels - lo) * (255.0 / (hi - lo))
    return np.floor(scaled + 0.5).astype(np.uint8)


def export_display(img: DynamicImage, path) -> None:
    """Write the descriptor as an 8-bit PNG for inspection."""
    if not np.isfinite(img.pixels).all():
        raise ValueError("refusing to export non-finite dynamic image")
    u8 = to_display_u8(img.pixels)
    if u8.shape[0] == 1:
        pil = Image.fromarray(u8[0], mode="L")
    elif u8.shape[0] == 3:
        pil = Image.fromarray(np.moveaxis(u8, 0, 2), mode="RGB")
    else:
        raise ValueError(f"cannot export {u8.shape[0]}-channel image")
    pil.save(path, format="PNG")


def write_plan(plan: SamplingPlan, T: int, path) -> None:
    doc = dict(plan.to_json(), T=T)
    atomic_write_bytes(path, (json.dumps(doc, indent=2) + "\n").encode())
