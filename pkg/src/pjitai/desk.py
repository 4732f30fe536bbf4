"""Desk-scale regret comparison across algorithms and settings, with an on-disk cache."""
from __future__ import annotations

import dataclasses
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .evaluation import RegretTrace, aggregate_replicates, cumulative_regret
from .experiment import ExperimentConfig, replicate_model, run_replicate
from .io_utils import atomic_write_text


@dataclass(frozen=True)
class DeskPlan:
    master_seeds: tuple[int, ...] = (0, 1, 2)
    settings: tuple[int, ...] = (1, 2)
    replicates: tuple[tuple[str, int], ...] = (("simple", 20), ("ls4l2", 20), ("complicated", 5))
    schema: str = "binary3"
    regret: str = "expected"

    def config(self, seed: int, setting: int) -> ExperimentConfig:
        reps = dict(self.replicates)
        return ExperimentConfig(setting=setting, algorithms=tuple(reps), replicates=reps, seed=seed, schema=self.schema)


def _cache_path(root: Path, cfg: ExperimentConfig, algo: str, rep: int) -> Path:
    return root / f"seed{cfg.seed}" / f"setting{cfg.setting}" / f"{algo}_{rep:03d}.json"


def run_cell(root: Path, cfg: ExperimentConfig, algo: str, rep: int) -> dict:
    """One replicate's regret curves, read from cache when the config matches."""
    path = _cache_path(root, cfg, algo, rep)
    key = json.dumps(dataclasses.replace(cfg, replicates={}, algorithms=()).to_dict(), sort_keys=True)
    if path.exists():
        doc = json.loads(path.read_text())
        if doc.get("config") == key:
            return doc
    t0 = time.perf_counter()
    res = run_replicate(cfg, algo, rep, replicate_model(cfg, rep), raise_on_broken=False)
    doc = {
        "config": key,
        "algorithm": algo,
        "replicate": rep,
        "realized": cumulative_regret(res.records).step.tolist(),
        "expected": cumulative_regret(res.records, expected=True).step.tolist(),
        "seconds": time.perf_counter() - t0,
        "broken_updates": sorted({e.calendar_day for e in res.updates if not e.executed}),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(path, json.dumps(doc))
    return doc


def run_plan(root: Path | str, plan: DeskPlan = DeskPlan(), log: Callable[[str], None] = print) -> dict:
    """Run or load every cell and return final mean regrets keyed by seed, setting and algorithm."""
    root = Path(root)
    summary: dict = {}
    for seed in plan.master_seeds:
        for setting in plan.settings:
            cfg = plan.config(seed, setting)
            curves = {}
            for algo, n in plan.replicates:
                traces = []
                for rep in range(n):
                    doc = run_cell(root, cfg, algo, rep)
                    traces.append(RegretTrace(np.array(doc[plan.regret])))
                    broken = doc.get("broken_updates", [])
                    log(f"seed={seed} setting={setting} {algo} rep={rep} final={traces[-1].cumulative[-1]:.3f} "
                        f"({doc['seconds']:.1f}s)" + (f" broken updates on days {broken}" if broken else ""))
                curves[algo] = aggregate_replicates(traces)
            n_min = min(len(c.mean) for c in curves.values())
            summary.setdefault(str(seed), {})[str(setting)] = {a: float(c.mean[n_min - 1]) for a, c in curves.items()}
    return summary


def check_ordering(summary: dict) -> dict[str, list[str]]:
    """Failures of the expected orderings, per master seed (empty lists mean pass)."""
    out = {}
    for seed, by_setting in summary.items():
        s1, s2 = by_setting["1"], by_setting["2"]
        bad = []
        if not s1["simple"] <= s1["ls4l2"] <= s1["complicated"]:
            bad.append(f"setting 1 order: {s1}")
        if not (s2["simple"] > s2["ls4l2"] and s2["simple"] > s2["complicated"]):
            bad.append(f"setting 2 simple not highest: {s2}")
        gap1 = s1["simple"] - s1["ls4l2"]
        gap2 = s2["simple"] - s2["ls4l2"]
        if not gap2 > gap1:
            bad.append(f"gap2 {gap2:.3f} <= gap1 {gap1:.3f}")
        out[seed] = bad
    return out


def default_cache_dir() -> Path:
    return Path(os.environ.get("PJITAI_DESK_CACHE", Path(__file__).resolve().parents[2] / "results" / "desk_regret"))
