"""Experiment orchestration: protocol runs, sensitivity grids, reports.

A run is fully determined by its config: the dataset is built once from the
base seed, each round redraws splits and initialization from named streams
of ``seed + round``, and every strategy in the list is trained through the
task sequence with per-task evaluation over all classes seen so far.
Reports are written atomically and reproduce byte-identically for the same
config (wall-clock timings are kept out of the deterministic files).
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace as dc_replace

import numpy as np

from .config import ExperimentConfig, stream
from .data import (SpectralDataset, assign_splits, generate_synthetic,
                   load_csv, scale_counts, snv_normalize_all, split_tasks)
from .metrics import MetricError, kde, layer_stats
from .network import NetworkSpec
from .plasticity import CbConfig
from .strategies import (RngBundle, StrategyConfig, TrainSettings,
                         evaluate_predictions, make_strategy)

DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class TaskRecord:
    strategy: str
    round: int
    task: int
    f1: float
    precision: float
    recall: float
    best_epoch: int
    n_test: int
    param_count: int
    confusion: np.ndarray
    wall_time: float = 0.0


@dataclass
class RunReport:
    config: dict
    config_hash: str
    records: list = field(default_factory=list)
    weight_stats: list = field(default_factory=list)
    kde_curves: list = field(default_factory=list)
    events: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)

    def aggregates(self):
        """mean/std of F1 over rounds, keyed strategy -> task."""
        by_key = {}
        for rec in self.records:
            by_key.setdefault((rec.strategy, rec.task), []).append(rec.f1)
        out = {}
        for (strategy, task), values in sorted(by_key.items()):
            arr = np.asarray(values, dtype=np.float64)
            out.setdefault(strategy, {})[task] = {
                "mean": float(arr.mean()), "std": float(arr.std())}
        return out

    def param_counts(self):
        out = {}
        for rec in self.records:
            out.setdefault(rec.strategy, {})[rec.task] = rec.param_count
        return out


def network_spec(config: ExperimentConfig) -> NetworkSpec:
    return NetworkSpec.reference(bands=config.bands,
                                 width_factor=config.width_factor)


def build_dataset(config: ExperimentConfig) -> SpectralDataset:
    if config.source == "csv":
        dataset = load_csv(config.csv_path)
    else:
        counts = scale_counts(config.class_counts, config.scale)
        dataset = generate_synthetic(counts, bands=config.bands,
                                     noise_sigma=config.noise_sigma,
                                     rng=stream(config.seed, "data"))
    if config.snv:
        dataset = snv_normalize_all(dataset)
    return dataset


def _strategy_config(config: ExperimentConfig, name: str) -> StrategyConfig:
    cb = CbConfig(enabled=config.cb_enabled,
                  replacement_rate=config.cb_rho,
                  maturity_threshold=config.cb_maturity,
                  decay_rate=config.cb_eta)
    return StrategyConfig(name=name, lambda_ewc=config.lambda_ewc,
                          lambda_distill=config.lambda_distill,
                          temperature=config.temperature,
                          exemplar_quota=config.exemplar_quota,
                          selection_mode=config.selection_mode, cb=cb)


def run_single(config: ExperimentConfig, dataset: SpectralDataset,
               strategy_name: str, round_idx: int):
    """Train one strategy through the task sequence for one round."""
    seed = config.seed + round_idx
    split_ds = assign_splits(dataset, config.split_ratios,
                             rng=stream(seed, "split"))
    task_stream = split_tasks(split_ds, config.classes_per_task, seed=seed)
    dtype = DTYPES[config.dtype]
    spec = network_spec(config)
    events = []

    def sink(event):
        events.append({"round": round_idx, **event})

    rngs = RngBundle(init=stream(seed, "init"),
                     batch=stream(seed, "batch"),
                     cb=stream(seed, "cb"),
                     exemplar_for_task=lambda t: stream(seed, "exemplar", t))
    settings = TrainSettings(epochs=config.epochs,
                             batch_size=config.batch_size, lr=config.lr,
                             fisher_max_samples=config.fisher_max_samples)
    strategy = make_strategy(spec, _strategy_config(config, strategy_name),
                             settings, rngs, dtype=dtype, event_sink=sink)

    records, stats_rows, kde_curves, checkpoints = [], [], [], {}
    for task_idx, task in enumerate(task_stream.tasks):
        seen = task_stream.classes_through(task_idx)
        train_classes = seen if strategy.trains_on_all_seen else task.class_ids
        tr_x, tr_y, tr_ids = split_ds.select(train_classes, "train")
        val_x, val_y, _ = split_ds.select(seen, "val")
        start = time.perf_counter()
        history = strategy.train_task(task_idx, task.class_ids, tr_x, tr_y,
                                      tr_ids, val_x, val_y)
        wall = time.perf_counter() - start
        test_x, test_y, _ = split_ds.select(seen, "test")
        pred = strategy.predict(test_x)
        met = evaluate_predictions(pred, test_y, len(seen))
        records.append(TaskRecord(
            strategy=strategy_name, round=round_idx, task=task_idx,
            f1=met["f1"], precision=met["precision"], recall=met["recall"],
            best_epoch=history["best_epoch"], n_test=len(test_y),
            param_count=strategy.param_count(), confusion=met["confusion"],
            wall_time=wall))
        stats_rows.extend(_analysis_rows(strategy, strategy_name, round_idx,
                                         task_idx))
        if round_idx == 0:
            kde_curves.extend(_kde_curves(strategy, task_idx,
                                          config.kde_points))
            if config.save_checkpoints:
                name = f"checkpoint_{strategy_name}_round0_task{task_idx}"
                checkpoints[name] = strategy.checkpoint_state()
    return records, stats_rows, kde_curves, events, checkpoints


def _analysis_rows(strategy, strategy_name, round_idx, task_idx):
    rows = []
    for label, series in strategy.analysis_weights().items():
        for series_name, weights in series.items():
            row = {"strategy": strategy_name, "layer": f"{label}_{series_name}",
                   "round": round_idx, "task": task_idx}
            try:
                st = layer_stats(weights)
                row.update(mean=st.mean, std=st.std, skewness=st.skewness,
                           kurtosis=st.kurtosis)
            except MetricError:
                w = np.asarray(weights, dtype=np.float64).ravel()
                row.update(mean=float(w.mean()), std=float(w.std()),
                           skewness=float("nan"), kurtosis=float("nan"))
            rows.append(row)
    return rows


def _kde_curves(strategy, task_idx, points):
    curves = []
    for label, series in strategy.analysis_weights().items():
        weights = series["bn_scale"]
        try:
            grid, density = kde(weights, grid_points=points)
        except MetricError:
            continue
        curves.append({"layer": f"{label}_bn_scale", "task": task_idx,
                       "grid": grid, "density": density})
    return curves


def _job(config_dict, strategy_name, round_idx):
    config = ExperimentConfig.from_dict(config_dict)
    dataset = build_dataset(config)
    return run_single(config, dataset, strategy_name, round_idx)


def run_experiment(config: ExperimentConfig,
                   dataset: SpectralDataset = None) -> RunReport:
    """Full protocol: every configured strategy, every round, all tasks."""
    config.validate()
    report = RunReport(config=config.to_dict(),
                       config_hash=config.content_hash())
    jobs = [(name, r) for name in config.strategies
            for r in range(config.rounds)]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(
                _job, [config.to_dict()] * len(jobs),
                [name for name, _ in jobs], [r for _, r in jobs]))
    else:
        if dataset is None:
            dataset = build_dataset(config)
        results = [run_single(config, dataset, name, r) for name, r in jobs]
    for records, stats_rows, kde_curves, events, checkpoints in results:
        report.records.extend(records)
        report.weight_stats.extend(stats_rows)
        report.kde_curves.extend(kde_curves)
        report.events.extend(events)
        report.checkpoints.update(checkpoints)
    report.records.sort(key=lambda r: (r.strategy, r.round, r.task))
    report.weight_stats.sort(key=lambda r: (r["strategy"], r["layer"],
                                            r["round"], r["task"]))
    report.events.sort(key=lambda e: (e.get("strategy", ""), e["round"],
                                      e.get("task", -1), e.get("step", -1)))
    return report


@dataclass
class GridReport:
    config: dict
    config_hash: str
    cells: dict = field(default_factory=dict)   # (strategy, rho, m) -> report
    best: dict = field(default_factory=dict)    # strategy -> (rho, m, f1)


def run_sensitivity_grid(config: ExperimentConfig) -> GridReport:
    """Full factorial (replacement rate x maturity) per strategy; the best
    cell per strategy is picked by final-task mean F1, ties resolving to the
    lower rate then the lower threshold."""
    config.validate()
    grid = GridReport(config=config.to_dict(),
                      config_hash=config.content_hash())
    dataset = build_dataset(config)
    for name in config.strategies:
        candidates = []
        for rho in config.grid_rho:
            for maturity in config.grid_maturity:
                cell_cfg = dc_replace(config, strategies=[name],
                                      cb_enabled=True, cb_rho=rho,
                                      cb_maturity=maturity,
                                      save_checkpoints=False)
                cell = run_experiment(cell_cfg, dataset=dataset)
                grid.cells[(name, rho, maturity)] = cell
                agg = cell.aggregates()[name]
                final_task = max(agg)
                candidates.append((rho, maturity, agg[final_task]["mean"]))
        best = min(candidates, key=lambda c: (-c[2], c[0], c[1]))
        grid.best[name] = {"rho": best[0], "maturity": best[1],
                           "final_task_f1": best[2]}
    return grid


# ---- report emission ---------------------------------------------------------

def _atomic_write(path, text):
    tmp = str(path) + ".tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _atomic_savez(path, arrays):
    tmp = str(path) + ".tmp.npz"
    np.savez(tmp, **arrays)
    os.replace(tmp, path)


def _pct(mean, std):
    return f"{100 * mean:.2f}±{100 * std:.2f}%"


def emit_reports(report: RunReport, out_dir):
    """Write the full deterministic file set plus informational timings."""
    os.makedirs(out_dir, exist_ok=True)
    join = lambda *p: os.path.join(out_dir, *p)
    strategies = list(dict.fromkeys(r.strategy for r in report.records))

    for name in strategies:
        rows = ["strategy,round,task,weighted_f1,precision,recall,"
                "best_epoch,n_test,param_count"]
        for rec in report.records:
            if rec.strategy != name:
                continue
            rows.append(f"{rec.strategy},{rec.round},{rec.task},"
                        f"{rec.f1:.6f},{rec.precision:.6f},{rec.recall:.6f},"
                        f"{rec.best_epoch},{rec.n_test},{rec.param_count}")
        _atomic_write(join(f"results_{name}.csv"), "\n".join(rows) + "\n")

    aggregates = report.aggregates()
    tasks = sorted({rec.task for rec in report.records})
    header = "strategy," + ",".join(f"task_{t}" for t in tasks)
    lines = [header]
    order = [s for s in report.config["strategies"] if s in aggregates]
    for name in order:
        cells = [(_pct(aggregates[name][t]["mean"], aggregates[name][t]["std"])
                  if t in aggregates[name] else "") for t in tasks]
        lines.append(name + "," + ",".join(cells))
    _atomic_write(join("summary_table.csv"), "\n".join(lines) + "\n")

    for rec in report.records:
        path = join(f"confusion_{rec.strategy}_task{rec.task}"
                    f"_round{rec.round}.csv")
        body = "\n".join(",".join(str(v) for v in row)
                         for row in rec.confusion)
        _atomic_write(path, body + "\n")

    rows = ["strategy,layer,round,task,mean,std,skewness,kurtosis"]
    for st in report.weight_stats:
        rows.append(f"{st['strategy']},{st['layer']},{st['round']},"
                    f"{st['task']},{st['mean']:.9e},{st['std']:.9e},"
                    f"{st['skewness']:.9e},{st['kurtosis']:.9e}")
    _atomic_write(join("weight_stats.csv"), "\n".join(rows) + "\n")

    for curve in report.kde_curves:
        path = join(f"kde_{curve['layer']}_task{curve['task']}.csv")
        body = "\n".join(f"{g!r},{d!r}" for g, d in
                         zip(curve["grid"], curve["density"]))
        _atomic_write(path, "grid,density\n" + body + "\n")

    events_text = "".join(json.dumps(e, sort_keys=True) + "\n"
                          for e in report.events)
    _atomic_write(join("events.jsonl"), events_text)

    timing_rows = ["strategy,round,task,seconds"]
    for rec in report.records:
        timing_rows.append(f"{rec.strategy},{rec.round},{rec.task},"
                           f"{rec.wall_time:.3f}")
    _atomic_write(join("timings.csv"), "\n".join(timing_rows) + "\n")

    for name, arrays in report.checkpoints.items():
        _atomic_savez(join(f"{name}.npz"), arrays)

    summary = {
        "config": report.config,
        "config_hash": report.config_hash,
        "f1": report.aggregates(),
        "param_counts": report.param_counts(),
    }
    _atomic_write(join("summary.json"),
                  json.dumps(summary, indent=2, sort_keys=True) + "\n")


def emit_grid_reports(grid: GridReport, out_dir):
    """Sensitivity tables (one per strategy) plus the best-cell record."""
    os.makedirs(out_dir, exist_ok=True)
    join = lambda *p: os.path.join(out_dir, *p)
    config = ExperimentConfig.from_dict(grid.config)
    tasks = None
    for name in config.strategies:
        lines = None
        for rho in config.grid_rho:
            for maturity in config.grid_maturity:
                cell = grid.cells[(name, rho, maturity)]
                agg = cell.aggregates()[name]
                if tasks is None:
                    tasks = sorted(agg)
                if lines is None:
                    lines = ["parameters," + ",".join(f"task_{t}"
                                                      for t in tasks)]
                cells = [_pct(agg[t]["mean"], agg[t]["std"]) for t in tasks]
                lines.append(f"{rho} / {maturity}," + ",".join(cells))
        _atomic_write(join(f"grid_{name}.csv"), "\n".join(lines) + "\n")

    best_lines = ["strategy,replacement_rate,maturity_threshold,"
                  "final_task_f1"]
    for name in config.strategies:
        b = grid.best[name]
        best_lines.append(f"{name},{b['rho']},{b['maturity']},"
                          f"{b['final_task_f1']:.6f}")
    _atomic_write(join("grid_best.csv"), "\n".join(best_lines) + "\n")

    summary = {"config": grid.config, "config_hash": grid.config_hash,
               "best": grid.best,
               "cells": {f"{k[0]}|{k[1]}|{k[2]}": v.aggregates()
                         for k, v in grid.cells.items()}}
    _atomic_write(join("grid_summary.json"),
                  json.dumps(summary, indent=2, sort_keys=True) + "\n")
