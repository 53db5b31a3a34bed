"""Command-line entry point: ``gen``, ``train``, ``eval``, ``ablate`` and ``plot``.

Every command is deterministic given its config and seed. Outputs::

    gen     <out>/<domain>/<split>/manifest.json (+ image blobs)
    train   <out>/checkpoint.json, <out>/checkpoint.f64, <out>/losses.csv
    eval    <out>/report_<domain>.json and <out>/reports.csv
    ablate  <out>/ablation.csv and <out>/ablation_summary.csv
    plot    <out>/<csv stem>.svg
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .experiments import (generate_domains, load_split, run_ablation, summarize,
                          write_summary)
from .synth import DatasetFormatError, read_dataset
from .training import RunConfig, evaluate_model, load_checkpoint, save_checkpoint, train

logger = logging.getLogger("dgobb")


class CliError(Exception):
    """A user-facing error; printed without a traceback."""


def _parse_blocks(text: str) -> tuple:
    try:
        blocks = tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad block list {text!r}; expected e.g. 1,2,3,4") from None
    if not blocks or any(b not in (1, 2, 3, 4) for b in blocks):
        raise argparse.ArgumentTypeError(f"block ids must be in 1..4, got {text!r}")
    return blocks


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgobb", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", type=Path, help="RunConfig JSON; unknown keys are rejected")
        if data:
            p.add_argument("--data", type=Path, required=True, help="data root made by 'gen'")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, help="overrides the config seed")

    def toggles(p):
        p.add_argument("--no-style", action="store_true", help="disable style hallucination")
        p.add_argument("--no-hcl", action="store_true", help="disable the HRoI contrastive loss")
        p.add_argument("--no-rac", action="store_true", help="disable the RRoI contrastive loss")
        p.add_argument("--no-sec", action="store_true", help="disable the category consistency loss")
        p.add_argument("--sec-metric", choices=("l2", "kl", "jsd"))
        p.add_argument("--style-blocks", type=_parse_blocks, help="comma list of hallucinated blocks")

    p = sub.add_parser("gen", help="generate source and target datasets")
    common(p, data=False)

    p = sub.add_parser("train", help="train on the source domain")
    common(p)
    toggles(p)
    p.add_argument("--steps", type=int, help="stop after this many steps")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", type=Path, help="checkpoint header (default <out>/checkpoint.json)")
    p.add_argument("--iou", type=float, default=0.5, help="IoU threshold for a true positive")

    p = sub.add_parser("ablate", help="run the ablation matrices over several seeds")
    common(p)
    toggles(p)
    p.add_argument("--seeds", type=int, default=5, help="number of seeds (starting at --seed)")
    p.add_argument("--matrices", default="components,scales,metrics")
    p.add_argument("--steps", type=int, help="stop each run after this many steps")

    p = sub.add_parser("plot", help="SVG chart of a loss or ablation CSV")
    p.add_argument("csv", type=Path)
    p.add_argument("--out", type=Path, required=True)
    return parser


def load_config(args) -> RunConfig:
    try:
        cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    except FileNotFoundError:
        raise CliError(f"config not found: {args.config}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"invalid config {args.config}: {exc}") from None
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    det = cfg.detector
    changes = {}
    for flag, name in (("no_style", "style"), ("no_hcl", "hcl"), ("no_rac", "rac"), ("no_sec", "sec")):
        if getattr(args, flag, False):
            changes[name] = False
    if getattr(args, "sec_metric", None):
        changes["sec_metric"] = args.sec_metric
    if getattr(args, "style_blocks", None):
        changes["style_blocks"] = args.style_blocks
    if changes:
        cfg = replace(cfg, detector=replace(det, **changes))
    if getattr(args, "steps", None) is not None:
        cfg = replace(cfg, max_steps=args.steps)
    return cfg


def _dataset(path: Path, cfg: RunConfig, split: str, domain: str | None = None):
    """A dataset directory, or ``<root>/<domain>/<split>`` below a data root."""
    try:
        if (path / "manifest.json").exists():
            return read_dataset(path)
        return load_split(path, domain or cfg.data.source, split)
    except (FileNotFoundError, DatasetFormatError) as exc:
        raise CliError(str(exc)) from None


def _num(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def cmd_gen(args) -> int:
    cfg = load_config(args)
    data = cfg.data if args.seed is None else replace(cfg.data, seed=args.seed)
    counts = generate_domains(data, args.out)
    for domain, splits in counts.items():
        print(f"{domain}: " + ", ".join(f"{split} {n} objects" for split, n in splits.items()))
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args)
    samples = _dataset(args.data, cfg, "train")
    args.out.mkdir(parents=True, exist_ok=True)
    result = train(cfg, samples, log_path=args.out / "losses.csv", progress=args.verbose)
    header = save_checkpoint(args.out / "checkpoint", result.model, cfg, result.steps, result.rng_state)
    logger.info("training took %.1fs", result.seconds)
    print(f"trained {result.steps} steps -> {header}")
    return 0


def cmd_eval(args) -> int:
    ckpt = args.checkpoint or args.out / "checkpoint.json"
    try:
        model, cfg, _ = load_checkpoint(ckpt)
    except (FileNotFoundError, ValueError) as exc:
        raise CliError(str(exc)) from None
    if not 0.0 < args.iou <= 1.0:
        raise CliError(f"--iou must be in (0, 1], got {args.iou}")
    if (args.data / "manifest.json").exists():
        sets = {args.data.name: _dataset(args.data, cfg, "test")}
    else:
        sets = {d: _dataset(args.data, cfg, "test", d) for d in (cfg.data.source, *cfg.data.targets)}
    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for domain, samples in sets.items():
        report, _ = evaluate_model(model, samples, args.iou)
        (args.out / f"report_{domain}.json").write_text(report.to_json())
        rows.append((domain, report))
        print(f"{domain}: mAP {_num(report.mAP)}  angle RMSD {_num(report.angle_rmsd)}")
    with open(args.out / "reports.csv", "w") as fh:
        fh.write("domain," + rows[0][1].csv_header() + "\n")
        for domain, report in rows:
            fh.write(f"{domain},{report.csv_row()}\n")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    if args.seeds < 1:
        raise CliError("--seeds must be at least 1")
    matrices = [m.strip() for m in args.matrices.split(",") if m.strip()]
    seeds = range(cfg.seed, cfg.seed + args.seeds)
    try:
        records = run_ablation(cfg, args.data, seeds, matrices, args.out / "ablation.csv")
    except FileNotFoundError as exc:
        raise CliError(str(exc)) from None
    summary = summarize(records)
    write_summary(summary, args.out / "ablation_summary.csv")
    for s in summary:
        if s["domain"] == "target":
            print(f"{s['matrix']:>10} {s['row']:<14} median target mAP {_num(s['mAP'])}")
    return 0


def cmd_plot(args) -> int:
    from .plotting import plot_csv

    try:
        path = plot_csv(args.csv, args.out)
    except FileNotFoundError:
        raise CliError(f"CSV not found: {args.csv}") from None
    except ValueError as exc:
        raise CliError(str(exc)) from None
    print(path)
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "plot": cmd_plot}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
