"""Training loop, leave-one-subject-out protocol, and experiment drivers.

Every entry point is a pure function of (data, config, seed): shuffling and
snippet sampling draw from seeds derived with a stable hash, so reruns are
bit-identical. Folds are independent and may run in worker processes; the
``RANKTIDE_THREADS`` environment variable caps the worker count (0 = auto).
"""

from __future__ import annotations

import hashlib
import json
import multiprocessing
import os
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import losses, network
from .autodiff import Tape, Value
from .dynimg import RankPoolConfig, segment_dynamic_images, standardize
from .io_utils import atomic_write_text
from .losses import DeLossConfig
from .network import ModelConfig, BackboneConfig
from .sequences import AugmentSpec, FrameSequence, Manifest, ManifestEntry, augment, load_entry


@dataclass
class TrainConfig:
    lr: float = 3e-4
    epochs: int = 100
    tradeoff_lambda: float = 0.03
    seed: int = 0
    batch_size: int = 8
    enable_stma: bool = True
    enable_de_loss: bool = True
    optimizer: str = "adam"
    channels: list[int] = field(default_factory=lambda: [8, 16, 32])
    extent: int | None = None  # None: manifest hint, else 64
    variant: str = "time_average"
    augment: bool = False
    augment_dynamic: bool = False  # transform descriptor images instead of frames
    eval_seed: int = 9001

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def rank_pool(self) -> RankPoolConfig:
        return RankPoolConfig(variant=self.variant)


@dataclass
class Fold:
    held_out_subject: str
    train_entries: list[ManifestEntry]
    val_entries: list[ManifestEntry]


@dataclass
class LosoSplit:
    folds: list[Fold]


def derive_seed(*parts) -> int:
    """Stable 31-bit seed from arbitrary labeled parts."""
    digest = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def loso_split(manifest: Manifest) -> LosoSplit:
    """One fold per subject, ordered by subject id; the fold validates exactly
    that subject's sequences and trains on everyone else's."""
    subjects = manifest.subjects()
    if len(subjects) < 2:
        raise ValueError("leave-one-subject-out needs at least 2 subjects")
    folds = []
    for subject in subjects:
        train = [e for e in manifest.entries if e.subject != subject]
        val = [e for e in manifest.entries if e.subject == subject]
        folds.append(Fold(held_out_subject=subject, train_entries=train, val_entries=val))
    return LosoSplit(folds=folds)


def resolve_extent(cfg: TrainConfig, manifest: Manifest) -> int:
    if cfg.extent is not None:
        return cfg.extent
    if manifest.extent is not None:
        return manifest.extent
    return 64


# ---------------------------------------------------------------------------
# optimizers

class Adam:
    def __init__(self, params: dict[str, Value], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, scale: float = 1.0) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * scale
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            mhat = self.m[k] / b1c
            vhat = self.v[k] / b2c
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


class SgdMomentum:
    def __init__(self, params: dict[str, Value], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.vel = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, scale: float = 1.0) -> None:
        for k, p in self.params.items():
            if p.grad is None:
                continue
            self.vel[k] = self.momentum * self.vel[k] + p.grad * scale
            p.data -= self.lr * self.vel[k]


def make_optimizer(cfg: TrainConfig, params: dict[str, Value]):
    if cfg.optimizer == "adam":
        return Adam(params, cfg.lr)
    return SgdMomentum(params, cfg.lr)


# ---------------------------------------------------------------------------
# augmentation as (sequence, transform) sample pairs

def _transforms(spec: AugmentSpec) -> list[tuple]:
    out: list[tuple] = [("none",)]
    out += [("rot", angle) for angle in spec.rotations_deg]
    if spec.hflip:
        out.append(("hflip",))
    return out


def _transform_signed(img: np.ndarray, transform: tuple) -> np.ndarray:
    """Apply a rotation/flip to a signed descriptor image (no clipping)."""
    if transform[0] == "none":
        return img
    if transform[0] == "hflip":
        return img[:, :, ::-1].copy()
    angle = transform[1]
    out = np.empty_like(img)
    for ch in range(img.shape[0]):
        pil = Image.fromarray(img[ch].astype(np.float32), mode="F")
        out[ch] = np.asarray(pil.rotate(angle, resample=Image.BILINEAR, fillcolor=0.0),
                             dtype=np.float64)
    return out


def build_training_samples(seqs: list[FrameSequence], cfg: TrainConfig) -> list[tuple[FrameSequence, tuple]]:
    """Expand sequences into (sequence, descriptor-transform) sample pairs.

    Frame-level augmentation transforms whole sequences up front; the
    alternative mode defers the same transforms to the descriptor images.
    """
    if not cfg.augment:
        return [(s, ("none",)) for s in seqs]
    spec = AugmentSpec()
    samples: list[tuple[FrameSequence, tuple]] = []
    if cfg.augment_dynamic:
        for s in seqs:
            samples += [(s, t) for t in _transforms(spec)]
    else:
        for s in seqs:
            samples += [(aug, ("none",)) for aug in augment(s, spec)]
    return samples


def sample_descriptor_images(seq: FrameSequence, plan_seed: int, cfg: TrainConfig,
                             transform: tuple = ("none",)) -> list[np.ndarray]:
    """Four standardized descriptor images for one sample."""
    _, images = segment_dynamic_images(seq.frames, plan_seed, cfg.rank_pool())
    return [standardize(_transform_signed(img.pixels, transform)) for img in images]


# ---------------------------------------------------------------------------
# fold training

@dataclass
class EpochLog:
    epoch: int
    ce: float
    de: float
    total: float
    mean_alpha: list[float]
    mean_dbar_std: float

    def to_json(self) -> dict:
        return asdict(self)


class NonFiniteLoss(RuntimeError):
    pass


def model_config(cfg: TrainConfig, num_classes: int, in_channels: int) -> ModelConfig:
    return ModelConfig(
        backbone=BackboneConfig(channels=list(cfg.channels), in_channels=in_channels),
        num_classes=num_classes)


def train_fold(train_seqs: list[FrameSequence], cfg: TrainConfig, num_classes: int,
               fold_key: str = "all") -> tuple[dict[str, Value], list[EpochLog]]:
    """Train one model on the given sequences; returns parameters and the
    per-epoch log (losses, mean segment weights, mean distance spread)."""
    if not train_seqs:
        raise ValueError("empty training set")
    mcfg = model_config(cfg, num_classes, train_seqs[0].frames.shape[1])
    params = network.init_params(mcfg, derive_seed(cfg.seed, "init", fold_key))
    opt = make_optimizer(cfg, params)
    samples = build_training_samples(train_seqs, cfg)
    lam = cfg.tradeoff_lambda if cfg.enable_de_loss else 0.0
    de_cfg = DeLossConfig()
    logs: list[EpochLog] = []

    for epoch in range(cfg.epochs):
        order = list(range(len(samples)))
        random.Random(f"shuffle:{cfg.seed}:{fold_key}:{epoch}").shuffle(order)
        sums = np.zeros(3)
        alpha_sum = np.zeros(4)
        dbar_std_sum = 0.0
        pending = 0
        for pos, idx in enumerate(order):
            seq, transform = samples[idx]
            plan_seed = derive_seed(cfg.seed, "plan", fold_key, epoch, idx)
            imgs = sample_descriptor_images(seq, plan_seed, cfg, transform)
            with Tape() as tape:
                result = network.forward([Value(im) for im in imgs], params, mcfg,
                                         enable_attention=cfg.enable_stma)
                loss, breakdown = losses.total_loss(result.logits, seq.label,
                                                    result.features, lam, de_cfg)
                if not np.isfinite(breakdown.total):
                    raise NonFiniteLoss(
                        f"non-finite loss at epoch {epoch}, sample {idx} "
                        f"({seq.source_path}): ce={breakdown.ce} de={breakdown.de}")
                tape.backward(loss)
            sums += (breakdown.ce, breakdown.de, breakdown.total)
            alpha_sum += result.alpha.data
            dbar_std_sum += 1.0 - breakdown.de  # std of normalized distances
            pending += 1
            if pending == cfg.batch_size or pos == len(order) - 1:
                opt.step(scale=1.0 / pending)
                for p in params.values():
                    p.zero_grad()
                pending = 0
        n = len(order)
        logs.append(EpochLog(epoch=epoch, ce=float(sums[0] / n), de=float(sums[1] / n),
                             total=float(sums[2] / n),
                             mean_alpha=(alpha_sum / n).tolist(),
                             mean_dbar_std=float(dbar_std_sum / n)))
    return params, logs


def train_static_fold(train_seqs: list[FrameSequence], cfg: TrainConfig, num_classes: int,
                      fold_key: str = "all") -> dict[str, Value]:
    """Baseline trained on the standardized middle frame only."""
    if not train_seqs:
        raise ValueError("empty training set")
    mcfg = model_config(cfg, num_classes, train_seqs[0].frames.shape[1])
    params = network.init_params(mcfg, derive_seed(cfg.seed, "init-static", fold_key))
    opt = make_optimizer(cfg, params)
    samples = build_training_samples(train_seqs, cfg) if not cfg.augment_dynamic \
        else [(s, ("none",)) for s in train_seqs]
    for epoch in range(cfg.epochs):
        order = list(range(len(samples)))
        random.Random(f"shuffle-static:{cfg.seed}:{fold_key}:{epoch}").shuffle(order)
        pending = 0
        for pos, idx in enumerate(order):
            seq, _ = samples[idx]
            img = standardize(seq.middle_frame())
            with Tape() as tape:
                logits = network.static_forward(Value(img), params, mcfg)
                loss = losses.cross_entropy(logits, seq.label)
                if not np.isfinite(loss.item()):
                    raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, sample {idx}")
                tape.backward(loss)
            pending += 1
            if pending == cfg.batch_size or pos == len(order) - 1:
                opt.step(scale=1.0 / pending)
                for p in params.values():
                    p.zero_grad()
                pending = 0
    return params


# ---------------------------------------------------------------------------
# evaluation

def _check_compat(params: dict[str, Value], num_classes: int, in_channels: int) -> None:
    k = params["cls.w"].shape[0]
    if k != num_classes:
        raise ValueError(f"checkpoint has {k} classes, manifest has {num_classes}")
    cin = params["backbone.0.w"].shape[1]
    if cin != in_channels:
        raise ValueError(f"checkpoint expects {cin} channel(s), data has {in_channels}")


def evaluate(params: dict[str, Value], seqs: list[FrameSequence], cfg: TrainConfig,
             num_classes: int, fixed_seed: int) -> dict:
    """Deterministic evaluation: snippet plans derive from fixed_seed and the
    sequence path, predictions are argmax logits."""
    if not seqs:
        raise ValueError("empty evaluation set")
    mcfg = model_config(cfg, num_classes, seqs[0].frames.shape[1])
    _check_compat(params, num_classes, seqs[0].frames.shape[1])
    preds, truths, alpha_rows = [], [], []
    for seq in seqs:
        plan_seed = derive_seed(fixed_seed, "eval", seq.source_path)
        imgs = sample_descriptor_images(seq, plan_seed, cfg)
        result = network.forward([Value(im) for im in imgs], params, mcfg,
                                 enable_attention=cfg.enable_stma)
        preds.append(int(np.argmax(result.logits.data)))
        truths.append(seq.label)
        alpha_rows.append({"sequence": seq.source_path, "subject": seq.subject_id,
                           "alpha": result.alpha.data.tolist()})
    report = losses.compute_metrics(preds, truths, num_classes)
    report["predictions"] = preds
    report["truth"] = truths
    report["alpha"] = alpha_rows
    return report


def evaluate_static(params: dict[str, Value], seqs: list[FrameSequence], cfg: TrainConfig,
                    num_classes: int) -> dict:
    mcfg = model_config(cfg, num_classes, seqs[0].frames.shape[1])
    _check_compat(params, num_classes, seqs[0].frames.shape[1])
    preds, truths = [], []
    for seq in seqs:
        logits = network.static_forward(Value(standardize(seq.middle_frame())), params, mcfg)
        preds.append(int(np.argmax(logits.data)))
        truths.append(seq.label)
    report = losses.compute_metrics(preds, truths, num_classes)
    report["predictions"] = preds
    report["truth"] = truths
    return report


# ---------------------------------------------------------------------------
# LOSO driver

def worker_count(n_tasks: int) -> int:
    cap = os.environ.get("RANKTIDE_THREADS", "0")
    try:
        cap_n = int(cap)
    except ValueError:
        cap_n = 0
    if cap_n <= 0:
        cap_n = os.cpu_count() or 1
    return max(1, min(cap_n, n_tasks))


def _load_fold_seqs(manifest_path, entries, extent: int) -> list[FrameSequence]:
    return [load_entry(manifest_path, e, extent) for e in entries]


def _run_fold(args) -> dict:
    manifest_path, fold, cfg, num_classes, extent, out_dir, dump_attention, static = args
    train_seqs = _load_fold_seqs(manifest_path, fold.train_entries, extent)
    val_seqs = _load_fold_seqs(manifest_path, fold.val_entries, extent)
    if static:
        params = train_static_fold(train_seqs, cfg, num_classes, fold.held_out_subject)
        report = evaluate_static(params, val_seqs, cfg, num_classes)
        logs = []
    else:
        params, logs = train_fold(train_seqs, cfg, num_classes, fold.held_out_subject)
        report = evaluate(params, val_seqs, cfg, num_classes, cfg.eval_seed)
    summary = {
        "held_out_subject": fold.held_out_subject,
        "metrics": {k: report[k] for k in ("accuracy", "macro_f1", "confusion", "per_class")},
        "predictions": report["predictions"],
        "truth": report["truth"],
        "epochs": [lg.to_json() for lg in logs],
        "alpha": report.get("alpha", []),
    }
    if out_dir is not None:
        fold_dir = Path(out_dir) / f"fold_{fold.held_out_subject}"
        fold_dir.mkdir(parents=True, exist_ok=True)
        network.save_checkpoint(params, fold_dir / "checkpoint.smas")
        atomic_write_text(fold_dir / "log.jsonl",
                          "".join(json.dumps(lg.to_json()) + "\n" for lg in logs))
        atomic_write_text(fold_dir / "metrics.json",
                          json.dumps(summary["metrics"], indent=2) + "\n")
        if dump_attention and summary["alpha"]:
            atomic_write_text(fold_dir / "alpha.jsonl",
                              "".join(json.dumps(row) + "\n" for row in summary["alpha"]))
    return summary


def run_loso(manifest: Manifest, manifest_path, cfg: TrainConfig, out_dir=None,
             dump_attention: bool = False, static: bool = False) -> dict:
    """Train every fold, evaluate each held-out subject, pool predictions.

    Aggregate accuracy pools per-sample predictions across folds; macro F1 is
    computed on the pooled confusion matrix. Per-fold accuracies are kept too.
    """
    split = loso_split(manifest)
    extent = resolve_extent(cfg, manifest)
    num_classes = len(manifest.class_names)
    tasks = [(manifest_path, fold, cfg, num_classes, extent, out_dir, dump_attention, static)
             for fold in split.folds]
    n_workers = worker_count(len(tasks))
    if n_workers > 1:
        with multiprocessing.Pool(n_workers) as pool:
            fold_summaries = pool.map(_run_fold, tasks)
    else:
        fold_summaries = [_run_fold(t) for t in tasks]

    pooled_preds = [p for s in fold_summaries for p in s["predictions"]]
    pooled_truth = [t for s in fold_summaries for t in s["truth"]]
    aggregate = losses.compute_metrics(pooled_preds, pooled_truth, num_classes)
    aggregate["mean_fold_accuracy"] = float(
        np.mean([s["metrics"]["accuracy"] for s in fold_summaries]))
    report = {
        "config": asdict(cfg),
        "num_sequences": len(manifest.entries),
        "class_names": manifest.class_names,
        "static_baseline": static,
        "folds": fold_summaries,
        "aggregate": aggregate,
    }
    if out_dir is not None:
        atomic_write_text(Path(out_dir) / "aggregate.json", json.dumps(report, indent=2) + "\n")
    return report


def ablation_grid(manifest: Manifest, manifest_path, cfg: TrainConfig, out_dir=None) -> list[dict]:
    """4-run grid over (segment/spatial attention on/off, deviation loss on/off).

    Matched seeds across runs; rows carry the aggregate metrics and each
    fold's final-epoch mean distance spread for the paired comparison."""
    rows = []
    for enable_stma in (False, True):
        for enable_de in (False, True):
            run_cfg = TrainConfig(**{**asdict(cfg),
                                     "enable_stma": enable_stma,
                                     "enable_de_loss": enable_de})
            sub_dir = None
            if out_dir is not None:
                sub_dir = Path(out_dir) / f"stma_{int(enable_stma)}_de_{int(enable_de)}"
                sub_dir.mkdir(parents=True, exist_ok=True)
            report = run_loso(manifest, manifest_path, run_cfg, out_dir=sub_dir)
            rows.append({
                "enable_stma": enable_stma,
                "enable_de_loss": enable_de,
                "accuracy": report["aggregate"]["accuracy"],
                "macro_f1": report["aggregate"]["macro_f1"],
                "final_dbar_std_per_fold": {
                    s["held_out_subject"]: s["epochs"][-1]["mean_dbar_std"]
                    for s in report["folds"]},
            })
    return rows


def lambda_sweep(manifest: Manifest, manifest_path, cfg: TrainConfig,
                 lambdas: list[float], out_dir=None) -> list[dict]:
    """Run the LOSO protocol once per trade-off value."""
    rows = []
    for lam in lambdas:
        if lam < 0:
            raise ValueError("lambda values must be >= 0")
        run_cfg = TrainConfig(**{**asdict(cfg), "tradeoff_lambda": lam,
                                 "enable_de_loss": True})
        sub_dir = None
        if out_dir is not None:
            sub_dir = Path(out_dir) / f"lambda_{lam:g}"
            sub_dir.mkdir(parents=True, exist_ok=True)
        report = run_loso(manifest, manifest_path, run_cfg, out_dir=sub_dir)
        rows.append({"lambda": lam,
                     "accuracy": report["aggregate"]["accuracy"],
                     "macro_f1": report["aggregate"]["macro_f1"]})
    return rows
