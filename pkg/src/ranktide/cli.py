"""Command-line front end.

Subcommands: synth (render a synthetic dataset), dynimg (descriptor images for
one sequence), train, loso (leave-one-subject-out runs, ablation grid, static
baseline), eval (apply a checkpoint), sweep (trade-off weight sweep), and
gradcheck (finite-difference verification). Settings resolve as built-in
defaults < config file < command-line flags; unknown config keys are rejected
by name. Report paths write figures next to their CSV/JSON outputs.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import checks, figures, network, training
from .dynimg import (RankPoolConfig, export_display, segment_dynamic_images,
                     write_dimg, write_plan)
from .io_utils import atomic_write_bytes, atomic_write_text
from .sequences import load_sequence, read_manifest, synth_dataset
from .training import TrainConfig


class CliError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise CliError(f"not a boolean: {text!r}")


def _parse_channels(text: str) -> list[int]:
    try:
        return [int(p) for p in text.replace(" ", "").split(",") if p]
    except ValueError:
        raise CliError(f"bad channel list: {text!r}") from None


def _parse_variant(text: str) -> str:
    aliases = {"timeavg": "time_average", "time_average": "time_average",
               "direct": "direct_frame", "direct_frame": "direct_frame"}
    t = text.strip().lower()
    if t not in aliases:
        raise CliError(f"unknown variant {text!r} (want timeavg or direct)")
    return aliases[t]


_CONFIG_PARSERS = {
    "lr": float,
    "epochs": int,
    "tradeoff_lambda": float,
    "seed": int,
    "batch_size": int,
    "enable_stma": _parse_bool,
    "enable_de_loss": _parse_bool,
    "optimizer": str,
    "channels": _parse_channels,
    "extent": int,
    "variant": _parse_variant,
    "augment": _parse_bool,
    "augment_dynamic": _parse_bool,
    "eval_seed": int,
    "ranksvm_reg_lambda": float,
    "oracle_steps": int,
    "oracle_lr": float,
}


def parse_config_file(path) -> dict:
    """key = value lines; '#' starts a comment; unknown keys are an error."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_PARSERS:
            raise CliError(f"{path}:{lineno}: unknown config key '{key}'")
        out[key] = _CONFIG_PARSERS[key](value)
    return out


def resolve_settings(args) -> dict:
    """defaults < config file < flags, for every known key."""
    settings = {}
    if getattr(args, "config", None):
        settings.update(parse_config_file(args.config))
    overrides = {
        "lr": args.lr if hasattr(args, "lr") else None,
        "epochs": getattr(args, "epochs", None),
        "tradeoff_lambda": getattr(args, "tradeoff_lambda", None),
        "seed": getattr(args, "seed", None),
        "batch_size": getattr(args, "batch_size", None),
        "optimizer": getattr(args, "optimizer", None),
        "channels": _parse_channels(args.channels) if getattr(args, "channels", None) else None,
        "extent": getattr(args, "extent", None),
        "variant": _parse_variant(args.variant) if getattr(args, "variant", None) else None,
        "eval_seed": getattr(args, "eval_seed", None),
    }
    for name in ("stma", "de_loss", "augment", "augment_dynamic"):
        flag = getattr(args, name, None)
        if flag is not None:
            key = {"stma": "enable_stma", "de_loss": "enable_de_loss"}.get(name, name)
            overrides[key] = flag == "on"
    settings.update({k: v for k, v in overrides.items() if v is not None})
    return settings


def build_train_config(args) -> TrainConfig:
    settings = resolve_settings(args)
    fields = {k: v for k, v in settings.items() if k in TrainConfig.__dataclass_fields__}
    return TrainConfig(**fields)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("--lr", type=float, help="learning rate (default 3e-4)")
    p.add_argument("--epochs", type=int, help="training epochs (default 100)")
    p.add_argument("--tradeoff-lambda", dest="tradeoff_lambda", type=float,
                   help="deviation-loss weight (default 0.03)")
    p.add_argument("--seed", type=int, help="run seed (default 0)")
    p.add_argument("--batch-size", dest="batch_size", type=int, help="batch size (default 8)")
    p.add_argument("--optimizer", choices=["adam", "sgd_momentum"], help="optimizer")
    p.add_argument("--channels", help="backbone channels, e.g. 8,16,32")
    p.add_argument("--extent", type=int, help="frame extent (default: manifest hint or 64)")
    p.add_argument("--variant", help="rank pooling variant: timeavg or direct")
    p.add_argument("--stma", choices=["on", "off"], help="spatial+segment attention")
    p.add_argument("--de-loss", dest="de_loss", choices=["on", "off"], help="deviation loss")
    p.add_argument("--augment", choices=["on", "off"], help="rotation/flip augmentation")
    p.add_argument("--augment-dynamic", dest="augment_dynamic", choices=["on", "off"],
                   help="apply augmentation to descriptor images instead of frames")
    p.add_argument("--eval-seed", dest="eval_seed", type=int, help="snippet seed at eval time")


def _write_predictions_csv(report: dict, path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["sequence", "subject", "truth", "prediction"])
    for fold in report["folds"]:
        alpha = fold.get("alpha") or [{} for _ in fold["truth"]]
        for row, t, p in zip(alpha, fold["truth"], fold["predictions"]):
            writer.writerow([row.get("sequence", ""), fold["held_out_subject"], t, p])
    atomic_write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    out = Path(args.out)
    manifest = synth_dataset(out, num_subjects=args.subjects, seqs_per_subject=args.per_subject,
                             T=args.frames, extent=args.extent, motion_px=args.motion_px,
                             seed=args.seed)
    print(f"wrote {len(manifest.entries)} sequences under {out} "
          f"({len(manifest.subjects())} subjects, {len(manifest.class_names)} classes)")
    return 0


def cmd_dynimg(args) -> int:
    settings = resolve_settings(args)
    extent = settings.get("extent", 64)
    variant = settings.get("variant", "time_average")
    seq = load_sequence(args.input, extent=extent)
    cfg = RankPoolConfig(variant=variant)
    plan, images = segment_dynamic_images(seq.frames, args.seed, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for img in images:
        export_display(img, out / f"I_{img.segment_id}.png")
        write_dimg(img, out / f"I_{img.segment_id}.dimg")
    write_plan(plan, seq.num_frames, out / "plan.json")
    print(f"wrote 4 descriptor images and plan.json to {out}")
    return 0


def _load_manifest(path):
    manifest = read_manifest(path)
    return manifest


def cmd_train(args) -> int:
    cfg = build_train_config(args)
    manifest = _load_manifest(args.manifest)
    extent = training.resolve_extent(cfg, manifest)
    seqs = [training.load_entry(args.manifest, e, extent) for e in manifest.entries]
    params, logs = training.train_fold(seqs, cfg, len(manifest.class_names))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    network.save_checkpoint(params, out / "checkpoint.smas")
    atomic_write_text(out / "log.jsonl",
                      "".join(json.dumps(lg.to_json()) + "\n" for lg in logs))
    atomic_write_text(out / "config.json", json.dumps(asdict(cfg), indent=2) + "\n")
    print(f"trained on {len(seqs)} sequences; checkpoint at {out / 'checkpoint.smas'}")
    return 0


def cmd_loso(args) -> int:
    cfg = build_train_config(args)
    manifest = _load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.ablation:
        rows = training.ablation_grid(manifest, args.manifest, cfg, out_dir=out)
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["enable_stma", "enable_de_loss", "accuracy", "macro_f1"])
        for r in rows:
            writer.writerow([r["enable_stma"], r["enable_de_loss"],
                             f"{r['accuracy']:.6f}", f"{r['macro_f1']:.6f}"])
        atomic_write_text(out / "ablation.csv", buf.getvalue())
        atomic_write_text(out / "ablation.json", json.dumps(rows, indent=2) + "\n")
        figures.plot_ablation(rows, out / "figures" / "ablation.png")
        for r in rows:
            print(f"stma={r['enable_stma']} de_loss={r['enable_de_loss']} "
                  f"accuracy={r['accuracy']:.4f} macro_f1={r['macro_f1']:.4f}")
        return 0

    report = training.run_loso(manifest, args.manifest, cfg, out_dir=out,
                               dump_attention=args.dump_attention,
                               static=args.static_baseline)
    _write_predictions_csv(report, out / "predictions.csv")
    if not args.static_baseline:
        figures.plot_training_curves(report["folds"], out / "figures" / "training_curves.png")
    figures.plot_confusion(report["aggregate"]["confusion"], manifest.class_names,
                           out / "figures" / "confusion.png")
    if args.dump_attention:
        rows = [row for fold in report["folds"] for row in fold["alpha"]]
        figures.plot_alpha_rows(rows, out / "figures" / "alpha_heatmap.png")
    agg = report["aggregate"]
    print(f"aggregate accuracy={agg['accuracy']:.4f} macro_f1={agg['macro_f1']:.4f} "
          f"(mean fold accuracy {agg['mean_fold_accuracy']:.4f})")
    return 0


def cmd_eval(args) -> int:
    cfg = build_train_config(args)
    manifest = _load_manifest(args.manifest)
    extent = training.resolve_extent(cfg, manifest)
    params = network.load_checkpoint(args.checkpoint)
    seqs = [training.load_entry(args.manifest, e, extent) for e in manifest.entries]
    report = training.evaluate(params, seqs, cfg, len(manifest.class_names), cfg.eval_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = {k: report[k] for k in ("accuracy", "macro_f1", "confusion", "per_class")}
    atomic_write_text(out / "metrics.json", json.dumps(metrics, indent=2) + "\n")
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["sequence", "subject", "truth", "prediction"])
    for row, t, p in zip(report["alpha"], report["truth"], report["predictions"]):
        writer.writerow([row["sequence"], row["subject"], t, p])
    atomic_write_text(out / "predictions.csv", buf.getvalue())
    figures.plot_confusion(report["confusion"], manifest.class_names,
                           out / "figures" / "confusion.png")
    if args.dump_attention:
        atomic_write_text(out / "alpha.jsonl",
                          "".join(json.dumps(r) + "\n" for r in report["alpha"]))
        figures.plot_alpha_rows(report["alpha"], out / "figures" / "alpha_heatmap.png")
    print(f"accuracy={report['accuracy']:.4f} macro_f1={report['macro_f1']:.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = build_train_config(args)
    manifest = _load_manifest(args.manifest)
    try:
        lambdas = [float(p) for p in args.lambdas.split(",") if p.strip()]
    except ValueError:
        raise CliError(f"bad --lambdas list: {args.lambdas!r}") from None
    if not lambdas:
        raise CliError("--lambdas must name at least one value")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = training.lambda_sweep(manifest, args.manifest, cfg, lambdas, out_dir=out)
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["lambda", "accuracy", "macro_f1"])
    for r in rows:
        writer.writerow([f"{r['lambda']:g}", f"{r['accuracy']:.6f}", f"{r['macro_f1']:.6f}"])
    atomic_write_text(out / "sweep.csv", buf.getvalue())
    atomic_write_text(out / "sweep.json", json.dumps(rows, indent=2) + "\n")
    figures.plot_lambda_sweep(rows, out / "figures" / "lambda_sweep.png")
    for r in rows:
        print(f"lambda={r['lambda']:g} accuracy={r['accuracy']:.4f} "
              f"macro_f1={r['macro_f1']:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    results = checks.run_suite(tol=args.tol, composite_tol=args.composite_tol,
                               instances=args.instances, seed=args.seed or 0)
    print(checks.format_results(results))
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ranktide",
        description="Segmented dynamic-image descriptors, attention-based sequence "
                    "classification, and a leave-one-subject-out harness.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic micro-motion dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--subjects", type=int, default=8, help="number of subjects (default 8)")
    p.add_argument("--per-subject", dest="per_subject", type=int, default=6,
                   help="sequences per subject (default 6)")
    p.add_argument("--frames", type=int, default=24, help="frames per sequence (default 24)")
    p.add_argument("--extent", type=int, default=32, help="frame extent (default 32)")
    p.add_argument("--motion-px", dest="motion_px", type=float, default=1.0,
                   help="total drift in pixels (default 1.0)")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("dynimg", help="compute the four descriptor images of one sequence")
    p.add_argument("--input", required=True, help="sequence directory (>= 9 frames)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="snippet sampling seed")
    p.add_argument("--variant", help="rank pooling variant: timeavg or direct")
    p.add_argument("--extent", type=int, help="frame extent (default 64)")
    p.add_argument("--config", help="key=value settings file")
    p.set_defaults(func=cmd_dynimg)

    p = sub.add_parser("train", help="train one model on every manifest entry")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("loso", help="leave-one-subject-out training and evaluation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ablation", action="store_true",
                   help="run the 4-combination attention/deviation-loss grid")
    p.add_argument("--static-baseline", dest="static_baseline", action="store_true",
                   help="train on the middle frame only (no descriptor images)")
    p.add_argument("--dump-attention", dest="dump_attention", action="store_true",
                   help="write per-sequence segment weights")
    _add_train_flags(p)
    p.set_defaults(func=cmd_loso)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-attention", dest="dump_attention", action="store_true")
    _add_train_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="sweep the deviation-loss trade-off weight")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lambdas", required=True, help="comma list, e.g. 0,0.03,0.3")
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--tol", type=float, default=checks.OP_TOL,
                   help="per-op tolerance (default 1e-5)")
    p.add_argument("--composite-tol", dest="composite_tol", type=float,
                   default=checks.COMPOSITE_TOL, help="composite tolerance (default 1e-4)")
    p.add_argument("--instances", type=int, default=20,
                   help="random instances per check (default 20)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
