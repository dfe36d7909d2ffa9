"""Experiment protocols: paired arms, POV sweep, bias/temperature ablation,
and embedding-space analysis."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from xego import ndmath as nd
from xego.datasetbuild import DatasetBundle, group_segments
from xego.harness.config import RunConfig
from xego.harness.training import (
    TrainResult,
    build_epoch_plans,
    build_model,
    evaluate_split,
    prepare_bundle,
    train,
)
from xego.metrics import MetricsReport, pca_2d, separation_ratio
from xego.model import NowcastModel, TASKS

__all__ = [
    "PairResult",
    "SweepResult",
    "run_pair",
    "sweep_pov",
    "sweep_csv_rows",
    "write_sweep_csv",
    "ABLATION_GRID",
    "run_ablation",
    "write_ablation_csv",
    "analyze_embeddings",
    "embedding_stats",
]

ARM_CECL = "cecl"
ARM_BASELINE = "baseline"
SWEEP_CSV_HEADER = ("task", "pov", "arm", "subset_acc", "hamming", "macro_f1", "micro_f1")


@dataclass
class PairResult:
    """One seed's paired arms: same data, plans, and init; only lambda differs."""

    config: RunConfig
    metrics: dict[str, dict[str, dict[int, MetricsReport]]]  # arm -> task -> pov
    results: dict[str, TrainResult]

    def gap(self, task: str, pov: int, field: str = "subset_acc") -> float:
        a = getattr(self.metrics[ARM_CECL][task][pov], field)
        b = getattr(self.metrics[ARM_BASELINE][task][pov], field)
        return a - b


def run_pair(config: RunConfig, bundle: DatasetBundle | None = None) -> PairResult:
    """Train the contrastive arm and its lambda=0 twin on identical batches."""
    if bundle is None:
        bundle = prepare_bundle(config)
    plans = build_epoch_plans(config, bundle.splits["train"])
    metrics = {}
    results = {}
    for arm, lam in ((ARM_CECL, config.lam), (ARM_BASELINE, 0.0)):
        result = train(config, bundle, lam=lam, epoch_plans=plans)
        metrics[arm] = evaluate_split(
            result.model, bundle.splits["test"], pov_sizes=config.pov_sizes
        )
        results[arm] = result
    return PairResult(config=config, metrics=metrics, results=results)


@dataclass
class SweepResult:
    seeds: list[int]
    pairs: list[PairResult]

    def mean_metric(self, arm: str, task: str, pov: int, field: str = "subset_acc") -> float:
        vals = [getattr(p.metrics[arm][task][pov], field) for p in self.pairs]
        return float(np.mean(vals))

    def mean_gap(self, task: str, pov: int, field: str = "subset_acc") -> float:
        return float(np.mean([p.gap(task, pov, field) for p in self.pairs]))


def sweep_pov(config: RunConfig, seeds=(0, 1, 2)) -> SweepResult:
    """The paired POV-sweep protocol across seeds."""
    pairs = []
    for seed in seeds:
        cfg = config.with_overrides(seed=int(seed))
        pairs.append(run_pair(cfg))
    return SweepResult(seeds=[int(s) for s in seeds], pairs=pairs)


def sweep_csv_rows(sweep: SweepResult) -> list[tuple]:
    rows = []
    config = sweep.pairs[0].config
    for task in TASKS:
        for pov in config.pov_sizes:
            for arm in (ARM_CECL, ARM_BASELINE):
                rows.append(
                    (
                        task,
                        pov,
                        arm,
                        round(sweep.mean_metric(arm, task, pov, "subset_acc"), 4),
                        round(sweep.mean_metric(arm, task, pov, "hamming_dist"), 4),
                        round(sweep.mean_metric(arm, task, pov, "macro_f1"), 4),
                        round(sweep.mean_metric(arm, task, pov, "micro_f1"), 4),
                    )
                )
    return rows


def write_sweep_csv(sweep: SweepResult, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_CSV_HEADER)
        writer.writerows(sweep_csv_rows(sweep))


def sweep_json(sweep: SweepResult) -> dict:
    config = sweep.pairs[0].config
    per_seed = []
    for seed, pair in zip(sweep.seeds, sweep.pairs):
        arms = {}
        for arm in (ARM_CECL, ARM_BASELINE):
            arms[arm] = {
                task: {int(k): rep.as_dict() for k, rep in pair.metrics[arm][task].items()}
                for task in TASKS
            }
        per_seed.append(
            {
                "seed": seed,
                "config_hash": pair.config.config_hash(),
                "arms": arms,
                "best_epoch": {a: pair.results[a].best_epoch for a in arms},
                "wall_clock_s": {a: pair.results[a].wall_clock_s for a in arms},
            }
        )
    return {
        "seeds": sweep.seeds,
        "pov_sizes": list(config.pov_sizes),
        "per_seed": per_seed,
        "mean_gap_tln_subset": {
            int(k): sweep.mean_gap("tln", k) for k in config.pov_sizes
        },
    }


# ---------------------------------------------------------------------------
# bias/temperature ablation

# (bias init or None for frozen-at-zero, temperature init)
ABLATION_GRID: tuple[tuple[float | None, float], ...] = (
    (None, 10.0),
    (0.0, 10.0),
    (0.0, 1.0),
    (-3.0, 10.0),
    (-3.0, 1.0),
    (-10.0, 10.0),
    (-10.0, 1.0),
)


def run_ablation(
    config: RunConfig,
    grid=ABLATION_GRID,
    bundle: DatasetBundle | None = None,
) -> list[dict]:
    """One contrastive run per grid cell on shared data, plans, and seed."""
    if not grid:
        raise ValueError("ablation grid must be non-empty")
    if bundle is None:
        bundle = prepare_bundle(config)
    plans = build_epoch_plans(config, bundle.splits["train"])
    rows = []
    for b0, t0 in grid:
        cell_cfg = config.with_overrides(
            t_init=float(t0),
            bias_mode="fixed",
            b_init=0.0 if b0 is None else float(b0),
            trainable_bias=b0 is not None,
        )
        model = build_model(cell_cfg)
        result = train(cell_cfg, bundle, lam=cell_cfg.lam, epoch_plans=plans, model=model)
        reports = evaluate_split(result.model, bundle.splits["test"], pov_sizes=(1,))
        rows.append(
            {
                "b": "n/a" if b0 is None else b0,
                "t": t0,
                "tln_subset_acc": reports["tln"][1].subset_acc,
                "tln_hamming": reports["tln"][1].hamming_dist,
                "eln_subset_acc": reports["eln"][1].subset_acc,
                "eln_hamming": reports["eln"][1].hamming_dist,
                "final_t": result.model.store.contrastive.temperature,
                "final_b": result.model.store.contrastive.bias,
            }
        )
    return rows


def write_ablation_csv(rows: list[dict], path) -> None:
    header = ("b", "t", "tln_subset_acc", "tln_hamming", "eln_subset_acc", "eln_hamming")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([row[h] for h in header])


# ---------------------------------------------------------------------------
# embedding analysis

def _unit_embeddings(model: NowcastModel, split) -> np.ndarray:
    enc = model.extractor.extract(split.feature_tensor())
    _, unit = model.project(nd.tensor(enc))
    return unit.data.copy()


def embedding_stats(model: NowcastModel, split) -> dict:
    """Cosine alignment and 2-D separation ratios of a split's embeddings."""
    units = _unit_embeddings(model, split)
    keys = [seg.group_key for seg in split.segments]
    same = np.array(
        [[ki == kj for kj in keys] for ki in keys], dtype=bool
    )
    cos = units @ units.T
    off_diag = ~np.eye(len(keys), dtype=bool)
    pos_mask = same & off_diag
    neg_mask = ~same
    pos_mean = float(cos[pos_mask].mean())
    neg_mean = float(cos[neg_mask].mean())

    points = pca_2d(units)
    team_labels = np.array([seg.team for seg in split.segments])
    slot_labels = np.array([seg.slot_index for seg in split.segments])
    area_labels = np.array(
        [int(np.argmax(seg.features[len(seg.frame_ticks) // 2, 3:26])) for seg in split.segments]
    )
    ratios = {"team": float(separation_ratio(points, team_labels))}
    for name, labels in (("slot", slot_labels), ("area", area_labels)):
        counts = np.unique(labels, return_counts=True)[1]
        if len(counts) >= 2 and counts.min() >= 2:
            ratios[name] = float(separation_ratio(points, labels))
    return {
        "pos_mean_cos": pos_mean,
        "neg_mean_cos": neg_mean,
        "alignment_gap": pos_mean - neg_mean,
        "separation_ratios": ratios,
        "points": points,
        "team_labels": team_labels,
        "slot_labels": slot_labels,
        "area_labels": area_labels,
    }


def analyze_embeddings(
    config: RunConfig,
    bundle: DatasetBundle | None = None,
    trained: TrainResult | None = None,
) -> dict:
    """Before/after-training embedding comparison on the test split."""
    if bundle is None:
        bundle = prepare_bundle(config)
    before_model = build_model(config)
    before = embedding_stats(before_model, bundle.splits["test"])
    if trained is None:
        plans = build_epoch_plans(config, bundle.splits["train"])
        trained = train(config, bundle, lam=config.lam, epoch_plans=plans)
    after = embedding_stats(trained.model, bundle.splits["test"])
    return {"before": before, "after": after, "trained": trained, "bundle": bundle}


def analysis_json(analysis: dict) -> dict:
    def strip(stats: dict) -> dict:
        return {
            "pos_mean_cos": stats["pos_mean_cos"],
            "neg_mean_cos": stats["neg_mean_cos"],
            "alignment_gap": stats["alignment_gap"],
            "separation_ratios": stats["separation_ratios"],
        }

    return {"before": strip(analysis["before"]), "after": strip(analysis["after"])}


def write_points_csv(analysis: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("stage", "x", "y", "team", "slot", "area"))
        for stage in ("before", "after"):
            stats = analysis[stage]
            for (x, y), team, slot, area in zip(
                stats["points"], stats["team_labels"], stats["slot_labels"],
                stats["area_labels"],
            ):
                writer.writerow((stage, f"{x:.6f}", f"{y:.6f}", int(team), int(slot), int(area)))


def save_sweep(sweep: SweepResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(sweep, out / "sweep.csv")
    (out / "sweep.json").write_text(json.dumps(sweep_json(sweep), indent=2, sort_keys=True))
