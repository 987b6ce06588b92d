"""Condition-grid evaluation: methods x bubble conditions -> metric tables.

Every table cell aggregates per-frame metrics whose disparities are
stored on disk, so a report can be audited by recomputing each cell from
its files.
"""

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pfm
from .bubbles import render_bubbles, sample_field
from .cloud import disparity_metrics
from .config import PipelineConfig, config_hash
from .data import load_frame, save_frame
from .stereo import match_descriptors
from .utils import rng_stream, thread_count

logger = logging.getLogger(__name__)


@dataclass
class ExperimentReport:
    methods: list
    conditions: list
    rmse: dict            # method -> condition -> mean over frames
    bad_ratio: dict
    cells: list           # per (method, condition, frame) records with file paths
    runtimes: dict        # method -> total seconds
    config_hash: str = ""
    bad_threshold: float = 1.0

    def table(self, metric: str) -> dict:
        return getattr(self, metric)


def _augment_for_eval(frame, condition, cfg: PipelineConfig, out_dir: Path):
    seed = int(rng_stream(cfg.seed, "eval", frame.name, condition).integers(2 ** 31))
    fld = sample_field(condition, (frame.shape[1], frame.shape[0]), seed,
                       cfg.bubbles)
    sample = render_bubbles(frame, fld, cfg.bubbles)
    d = out_dir / "frames" / frame.name / condition
    if not (d / "im0.png").exists():
        save_frame(d, sample.degraded)
    return sample.degraded, d


def run_grid(frames, matchers: dict, cfg: PipelineConfig, out_dir,
             conditions=None, workers: int = None,
             bad_threshold: float = 1.0) -> ExperimentReport:
    """Evaluate each matcher over each condition on every frame.

    frames need ground truth. Augmented inputs and all disparity maps are
    written under out_dir so every report cell stays traceable.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    conditions = list(conditions or cfg.conditions)
    usable = [f for f in frames if f.gt_disp is not None]
    for f in frames:
        if f.gt_disp is None:
            logger.warning("frame %s has no ground truth; excluded from grid", f.name)
    if not usable:
        raise ValueError("no frames with ground truth to evaluate")

    jobs = []
    for frame in usable:
        for cond in conditions:
            degraded, sample_dir = _augment_for_eval(frame, cond, cfg, out_dir)
            jobs.append((frame, cond, degraded, sample_dir))

    cells = []
    runtimes = {name: 0.0 for name in matchers}

    def run_one(job, name, matcher):
        frame, cond, degraded, sample_dir = job
        tic = time.perf_counter()
        ml, mr = degraded.full_masks()
        dl = matcher.describe_map(degraded.left)
        dr = matcher.describe_map(degraded.right)
        result = match_descriptors(dl, dr, ml, mr, cfg.stereo)
        elapsed = time.perf_counter() - tic
        disp_path = out_dir / "disp" / name / f"{frame.name}__{cond}.pfm"
        disp_path.parent.mkdir(parents=True, exist_ok=True)
        pfm.write_pfm(disp_path, result.disp)
        metrics = disparity_metrics(result.disp, frame.gt_disp, ml,
                                    bad_threshold=bad_threshold)
        return {
            "method": name, "condition": cond, "frame": frame.name,
            "disp_path": str(disp_path), "sample_dir": str(sample_dir),
            "rmse": metrics["rmse"], "bad_ratio": metrics["bad_ratio"],
            "coverage": metrics["coverage"], "seconds": elapsed,
        }

    workers = workers if workers is not None else min(thread_count(), 4)
    for name, matcher in matchers.items():
        tic = time.perf_counter()
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(lambda j: run_one(j, name, matcher), jobs))
        else:
            results = [run_one(j, name, matcher) for j in jobs]
        cells.extend(results)
        runtimes[name] = time.perf_counter() - tic
        logger.info("method %s evaluated in %.1fs", name, runtimes[name])

    rmse = {}
    bad = {}
    for name in matchers:
        rmse[name] = {}
        bad[name] = {}
        for cond in conditions:
            vals = [c for c in cells if c["method"] == name and c["condition"] == cond]
            rmse[name][cond] = float(np.mean([c["rmse"] for c in vals]))
            bad[name][cond] = float(np.mean([c["bad_ratio"] for c in vals]))

    report = ExperimentReport(
        methods=list(matchers), conditions=conditions, rmse=rmse, bad_ratio=bad,
        cells=cells, runtimes=runtimes, config_hash=config_hash(cfg),
        bad_threshold=bad_threshold)
    save_report(out_dir, report)
    return report


def save_report(out_dir, report: ExperimentReport) -> Path:
    out_dir = Path(out_dir)
    path = out_dir / "report.json"
    path.write_text(json.dumps({
        "methods": report.methods, "conditions": report.conditions,
        "rmse": report.rmse, "bad_ratio": report.bad_ratio,
        "cells": report.cells, "runtimes": report.runtimes,
        "config_hash": report.config_hash,
        "bad_threshold": report.bad_threshold,
    }, indent=1))
    for metric in ("rmse", "bad_ratio"):
        lines = ["method," + ",".join(report.conditions)]
        for name in report.methods:
            row = report.table(metric)[name]
            lines.append(name + "," + ",".join(f"{row[c]:.6f}"
                                               for c in report.conditions))
        (out_dir / f"{metric}.csv").write_text("\n".join(lines) + "\n")
    return path


def load_report(out_dir) -> ExperimentReport:
    raw = json.loads((Path(out_dir) / "report.json").read_text())
    return ExperimentReport(
        methods=raw["methods"], conditions=raw["conditions"], rmse=raw["rmse"],
        bad_ratio=raw["bad_ratio"], cells=raw["cells"], runtimes=raw["runtimes"],
        config_hash=raw.get("config_hash", ""),
        bad_threshold=raw.get("bad_threshold", 1.0))


def verify_report(out_dir) -> bool:
    """Recompute every cell from its stored disparity and sample files."""
    report = load_report(out_dir)
    for cell in report.cells:
        disp = pfm.read_pfm(cell["disp_path"])
        sample = load_frame(cell["sample_dir"])
        ml, _ = sample.full_masks()
        metrics = disparity_metrics(disp, sample.gt_disp, ml,
                                    bad_threshold=report.bad_threshold)
        if metrics["rmse"] != cell["rmse"] or metrics["bad_ratio"] != cell["bad_ratio"]:
            logger.error("cell %s/%s/%s does not reproduce: %s vs stored %s",
                         cell["method"], cell["condition"], cell["frame"],
                         metrics, {k: cell[k] for k in ("rmse", "bad_ratio")})
            return False
    return True


def ordering_satisfied(report: ExperimentReport, better: str, worse: str,
                       metric: str = "bad_ratio") -> int:
    """Count conditions where ``better`` scores <= ``worse``."""
    table = report.table(metric)
    return sum(1 for c in report.conditions
               if table[better][c] <= table[worse][c] + 1e-12)
