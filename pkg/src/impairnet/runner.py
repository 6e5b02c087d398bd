"""
Experiment orchestration: run a validated config and write its result bundle.

Work items are independent and seeded by index, and results are reduced in
index order, so the tabular output is the same for any ``map_fn``.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .diffusion import run_experiment
from .graph import GraphSpec, PathCountQuery, expected_paths, monte_carlo_paths
from .io import MetricSeries, emit_csv, write_summary
from .marl import run_marl
from .seeding import SEED_RULE, trial_rng


@dataclass
class ResultBundle:
    summary: dict
    files: dict  # name -> Path

    @property
    def metrics(self) -> dict:
        return self.summary["metrics"]


# -- paths --------------------------------------------------------------------

def _paths_cell(seed: int, trials: int, cell):
    index, case, n, rho, k = cell
    spec = GraphSpec(n, rho)
    query = PathCountQuery(case, n, spec.avg_neighbors, k)
    formula = expected_paths(query)
    mc = monte_carlo_paths(spec, k, case, trials, trial_rng(seed, index))
    return formula, mc


def run_paths(cfg: ExperimentConfig, map_fn: Callable = map):
    p = cfg.params
    cells = [
        (i, case, n, rho, k)
        for i, (case, n, rho, k) in enumerate(
            itertools.product(p["cases"], p["n_nodes"], p["link_probability"], p["lengths"])
        )
    ]
    table = MetricSeries(("case", "N", "rho", "M", "K", "formula", "monte_carlo", "rel_error"))
    worst = 0.0
    for (i, case, n, rho, k), (formula, mc) in zip(cells, map_fn(partial(_paths_cell, cfg.seed, p["trials"]), cells)):
        rel = abs(mc - formula) / formula if formula else (0.0 if mc == 0 else math.inf)
        worst = max(worst, rel)
        table.append(case, n, rho, rho * (n - 1), k, formula, mc, rel)
    return {"paths": table}, {"cells": len(cells), "max_rel_error": worst}


# -- diffusion ----------------------------------------------------------------

def run_diffusion(cfg: ExperimentConfig, map_fn: Callable = map):
    lms = cfg.lms_config()
    series = run_experiment(lms, cfg.seed, map_fn)
    db = series.node_msd_db
    intact_db = series.intact_mean_db
    msd = MetricSeries(("iteration", "node_id", "msd_db", "intact_mean"))
    for t, it in enumerate(series.iterations):
        for node in range(db.shape[1]):
            msd.append(int(it), node, db[t, node], intact_db[t])
    tables = {"msd": msd}
    metrics = {
        "steady_state_intact_db": series.steady_state_db(),
        "final_intact_db": float(intact_db[-1]),
    }
    if lms.noise.impaired_node is not None:
        rel = series.impaired_weight
        after = cfg.params["weight_after_round"]
        with np.errstate(all="ignore"):
            per_round = _nanmean_rows(rel.T)
            per_trial = _nanmean_rows(rel[:, after:])
        weight = MetricSeries(("iteration", "mean_relative_weight"))
        for it, w in zip(series.iterations, per_round):
            weight.append(int(it), w)
        trials = MetricSeries(("trial", "mean_relative_weight_after"))
        for i, w in enumerate(per_trial):
            trials.append(i, w)
        tables["impaired_weight"] = weight
        tables["impaired_weight_trials"] = trials
        valid = per_trial[~np.isnan(per_trial)]
        metrics["impaired_weight_after_round"] = after
        metrics["mean_relative_impaired_weight"] = float(valid.mean()) if valid.size else float("nan")
        metrics["fraction_trials_below_quarter"] = float((valid < 0.25).mean()) if valid.size else float("nan")
    return tables, metrics


def _nanmean_rows(a: np.ndarray) -> np.ndarray:
    """Row means ignoring nan, with nan for all-nan rows (no warning)."""
    valid = ~np.isnan(a)
    counts = valid.sum(axis=1)
    sums = np.where(valid, a, 0.0).sum(axis=1)
    out = np.full(a.shape[0], np.nan)
    np.divide(sums, counts, out=out, where=counts > 0)
    return out


# -- marl ---------------------------------------------------------------------

def _marl_task(cfg: ExperimentConfig, task):
    repetition, detection = task
    p = cfg.params
    stats = run_marl(
        cfg.grid_world(), cfg.learning_params(), cfg.voting_config(), p["n_agents"],
        p["broken_agent"], detection, trial_rng(cfg.seed, 2 * repetition + int(not detection)),
        n_eval=p["n_eval"], warmup_episodes=p["warmup_episodes"],
    )
    votes = (stats.decisions, stats.nominations, stats.post_warmup) if p["record_votes"] and detection else None
    return stats.success_rate, stats.detection_accuracy, stats.nomination_accuracy, stats.ticks, votes


def run_marl_experiment(cfg: ExperimentConfig, map_fn: Callable = map):
    p = cfg.params
    tasks = [(r, det) for r in range(p["repetitions"]) for det in (True, False)]
    results = list(map_fn(partial(_marl_task, cfg), tasks))
    runs = MetricSeries((
        "repetition", "seed_index_with", "seed_index_without", "success_with_detection",
        "success_without_detection", "detection_accuracy", "nomination_accuracy",
        "steps_with_detection", "steps_without_detection",
    ))
    votes = MetricSeries(("repetition", "round", "agent", "detected", "nominated", "correct", "post_warmup"))
    broken = -1 if p["broken_agent"] is None else p["broken_agent"]
    with_rates, without_rates, accuracies = [], [], []
    for r in range(p["repetitions"]):
        on, off = results[2 * r], results[2 * r + 1]
        runs.append(r, 2 * r, 2 * r + 1, on[0], off[0], on[1], on[2], on[3], off[3])
        with_rates.append(on[0])
        without_rates.append(off[0])
        accuracies.append(on[1])
        if on[4] is not None:
            decisions, nominations, post = on[4]
            for rnd in range(decisions.shape[0]):
                for agent in range(decisions.shape[1]):
                    d = decisions[rnd, agent]
                    votes.append(r, rnd, agent, d, nominations[rnd, agent], d == broken, post[rnd])
    tables = {"marl_runs": runs}
    if p["record_votes"]:
        tables["marl_votes"] = votes
    acc = np.array(accuracies, dtype=float)
    metrics = {
        "success_with_detection": float(np.mean(with_rates)),
        "success_without_detection": float(np.mean(without_rates)),
        "detection_accuracy": float(np.nanmean(acc)) if np.isfinite(acc).any() else float("nan"),
        "repetitions": p["repetitions"],
    }
    return tables, metrics


RUNNERS = {"paths": run_paths, "diffusion": run_diffusion, "marl": run_marl_experiment}


def run(cfg: ExperimentConfig, out_dir, map_fn: Callable = map) -> ResultBundle:
    """Run `cfg`, write ``<name>.csv`` series and ``summary.json`` into `out_dir`."""
    out_dir = Path(out_dir)
    start = time.perf_counter()
    tables, metrics = RUNNERS[cfg.kind](cfg, map_fn)
    files = {name: emit_csv(table, out_dir / f"{name}.csv") for name, table in tables.items()}
    summary = {
        "version": __version__,
        "kind": cfg.kind,
        "master_seed": cfg.seed,
        "seed_rule": SEED_RULE,
        "jobs": cfg.jobs,
        "config": cfg.to_dict(),
        "metrics": metrics,
        "files": {name: path.name for name, path in files.items()},
        "elapsed_seconds": round(time.perf_counter() - start, 3),
    }
    files["summary"] = write_summary(summary, out_dir / "summary.json")
    return ResultBundle(summary, files)
