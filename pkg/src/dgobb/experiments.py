"""Dataset layout, single train/eval cells and the ablation matrices.

A generated data root looks like ``<root>/<domain>/<split>/manifest.json``.
Only the source domain gets a ``train`` split; every domain gets ``test``.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import replace
from pathlib import Path
from statistics import median
from typing import Iterable, Sequence

from .detector import DetectorConfig
from .evaluate import EvalReport
from .synth import DOMAIN_STYLES, SceneSpec, generate_split, read_dataset, write_dataset
from .training import DataConfig, RunConfig, evaluate_model, train

logger = logging.getLogger(__name__)

ABLATION_COLUMNS = ("matrix", "row", "seed", "domain", "mAP", "RMSD")
TARGET = "target"  # pseudo-domain: per-seed mean over the target domains


def generate_domains(data: DataConfig, root) -> dict:
    """Write the source train split and a test split for every domain.

    Returns ``{domain: {split: object_count}}``.
    """
    root = Path(root)
    spec = SceneSpec()
    counts: dict = {}
    for domain in (data.source, *data.targets):
        if domain not in DOMAIN_STYLES:
            raise ValueError(f"unknown domain {domain!r}; expected one of {sorted(DOMAIN_STYLES)}")
        splits = {"test": data.test_size}
        if domain == data.source:
            splits = {"train": data.train_size, **splits}
        for split, count in splits.items():
            samples = generate_split(spec, DOMAIN_STYLES[domain], data.seed, split, count)
            write_dataset(samples, root / domain / split, spec)
            counts.setdefault(domain, {})[split] = sum(len(s.boxes) for s in samples)
    return counts


def split_dir(root, domain: str, split: str) -> Path:
    d = Path(root) / domain / split
    if not (d / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset at {d} (run 'gen' first)")
    return d


def load_split(root, domain: str, split: str):
    return read_dataset(split_dir(root, domain, split))


# ablation matrices ---------------------------------------------------------------------------------

def component_rows(base: DetectorConfig) -> list[tuple[str, DetectorConfig]]:
    """Cumulative component toggles, from the plain detector to the full model."""
    steps = [
        ("baseline", dict(style=False, hcl=False, rac=False, sec=False)),
        ("style", dict(style=True, hcl=False, rac=False, sec=False)),
        ("style+hcl", dict(style=True, hcl=True, rac=False, sec=False)),
        ("style+hcl+rac", dict(style=True, hcl=True, rac=True, sec=False)),
        ("full", dict(style=True, hcl=True, rac=True, sec=True)),
    ]
    return [(name, replace(base, **kw)) for name, kw in steps]


def scale_rows(base: DetectorConfig) -> list[tuple[str, DetectorConfig]]:
    """Full model with hallucination on blocks 1..k, k = 1..4."""
    full = replace(base, style=True, hcl=True, rac=True, sec=True)
    return [("F1" if k == 1 else f"F1-F{k}", replace(full, style_blocks=tuple(range(1, k + 1))))
            for k in range(1, 5)]


def metric_rows(base: DetectorConfig) -> list[tuple[str, DetectorConfig]]:
    """Full model with each category-consistency distance."""
    full = replace(base, style=True, hcl=True, rac=True, sec=True)
    return [(m, replace(full, sec_metric=m)) for m in ("l2", "kl", "jsd")]


MATRICES = {"components": component_rows, "scales": scale_rows, "metrics": metric_rows}


def matrix_cells(base: DetectorConfig, matrices: Sequence[str] = tuple(MATRICES)) -> list[tuple[str, str, DetectorConfig]]:
    cells = []
    for m in matrices:
        if m not in MATRICES:
            raise ValueError(f"unknown matrix {m!r}; expected one of {sorted(MATRICES)}")
        cells += [(m, row, cfg) for row, cfg in MATRICES[m](base)]
    return cells


def run_cell(run_cfg: RunConfig, train_samples, eval_sets: dict, log_path=None) -> dict[str, EvalReport]:
    """Train once and evaluate on every domain in ``eval_sets``."""
    result = train(run_cfg, train_samples, log_path=log_path)
    logger.info("trained %d steps in %.1fs", result.steps, result.seconds)
    return {d: evaluate_model(result.model, samples)[0] for d, samples in eval_sets.items()}


def run_ablation(run_cfg: RunConfig, root, seeds: Iterable[int], matrices: Sequence[str] = tuple(MATRICES),
                 out_csv=None) -> list[dict]:
    """Run every matrix row for every seed; identical cells are trained once.

    Returns one record per (matrix, row, seed, domain), including the
    ``target`` pseudo-domain (mean of the target domains for that seed).
    """
    data = run_cfg.data
    train_samples = load_split(root, data.source, "train")
    eval_sets = {d: load_split(root, d, "test") for d in (data.source, *data.targets)}
    cache: dict = {}
    records = []
    writer = fh = None
    if out_csv is not None:
        Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
        fh = open(out_csv, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(ABLATION_COLUMNS)
    try:
        for seed in seeds:
            for matrix, row, det_cfg in matrix_cells(run_cfg.detector, matrices):
                key = (json.dumps(det_cfg.to_dict(), sort_keys=True), seed)
                if key not in cache:
                    logger.info("cell %s/%s seed %d", matrix, row, seed)
                    cache[key] = run_cell(replace(run_cfg, detector=det_cfg, seed=seed), train_samples, eval_sets)
                reports = cache[key]
                cell = [(d, reports[d].mAP, reports[d].angle_rmsd) for d in eval_sets]
                cell.append((TARGET, _mean([reports[d].mAP for d in data.targets]),
                             _mean([reports[d].angle_rmsd for d in data.targets])))
                for domain, m, r in cell:
                    rec = {"matrix": matrix, "row": row, "seed": seed, "domain": domain, "mAP": m, "RMSD": r}
                    records.append(rec)
                    if writer:
                        writer.writerow([matrix, row, seed, domain, _fmt(m), _fmt(r)])
                        fh.flush()
    finally:
        if fh:
            fh.close()
    return records


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return sum(vals) / len(vals) if vals else None


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def read_ablation_csv(path) -> list[dict]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return records
        if tuple(header) != ABLATION_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(ABLATION_COLUMNS):
                raise ValueError(f"{path}:{lineno}: expected {len(ABLATION_COLUMNS)} fields, got {len(row)}")
            try:
                records.append({"matrix": row[0], "row": row[1], "seed": int(row[2]), "domain": row[3],
                                "mAP": float(row[4]) if row[4] else None,
                                "RMSD": float(row[5]) if row[5] else None})
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return records


def summarize(records: Sequence[dict]) -> list[dict]:
    """Median mAP and RMSD over seeds for every (matrix, row, domain)."""
    groups: dict = {}
    for r in records:
        groups.setdefault((r["matrix"], r["row"], r["domain"]), []).append(r)
    out = []
    for (matrix, row, domain), rs in groups.items():
        maps = [r["mAP"] for r in rs if r["mAP"] is not None]
        rmsds = [r["RMSD"] for r in rs if r["RMSD"] is not None]
        out.append({"matrix": matrix, "row": row, "domain": domain, "seeds": len(rs),
                    "mAP": median(maps) if maps else None, "RMSD": median(rmsds) if rmsds else None})
    return out


def lookup(summary: Sequence[dict], matrix: str, row: str, domain: str) -> dict:
    for s in summary:
        if (s["matrix"], s["row"], s["domain"]) == (matrix, row, domain):
            return s
    raise KeyError(f"no summary for {matrix}/{row}/{domain}")


def write_summary(summary: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("matrix", "row", "domain", "seeds", "median_mAP", "median_RMSD"))
        for s in summary:
            w.writerow((s["matrix"], s["row"], s["domain"], s["seeds"], _fmt(s["mAP"]), _fmt(s["RMSD"])))


def is_finite(v) -> bool:
    return v is not None and math.isfinite(v)
