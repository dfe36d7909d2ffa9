"""Training loop: paired-plan epochs, AdamW, validation checkpointing.

The frozen extractor's pooled outputs are cached per split once, so each
step only runs the trainable stack. Batch plans are built outside the
trainer and can be shared verbatim between a contrastive arm and its
lambda=0 baseline, making the comparison paired sample-for-sample.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from xego import ndmath as nd
from xego import objectives as obj
from xego.datasetbuild import (
    BatchPlan,
    DatasetBundle,
    DatasetConfig,
    SegmentSet,
    build_dataset,
    build_pair_mask,
    group_segments,
    plan_batches,
)
from xego.errors import XegoError
from xego.harness.config import RunConfig
from xego.metrics import MetricsReport, classify, compute_report
from xego.model import ModelConfig, NowcastModel, TASKS
from xego.objectives import init_bias
from xego.simcore import build_default_map, simulate_rounds

__all__ = [
    "TrainingDivergedError",
    "TrainResult",
    "prepare_bundle",
    "epoch_plan_seeds",
    "build_epoch_plans",
    "build_model",
    "train",
    "evaluate_split",
    "EvalGroups",
]


class TrainingDivergedError(XegoError):
    """Loss became non-finite; message carries batch id and param norms."""


@dataclass
class TrainResult:
    model: NowcastModel
    best_state: dict[str, np.ndarray]
    best_val: float
    best_epoch: int
    log: dict
    cecl_evaluations: int
    wall_clock_s: float

    def restore_best(self) -> None:
        self.model.store.load_state(self.best_state)


def prepare_bundle(config: RunConfig) -> DatasetBundle:
    """Simulate the corpus and build the split dataset for a run config."""
    game_map = build_default_map()
    sim_cfg = config.sim_config()
    rounds = simulate_rounds(game_map, sim_cfg, config.rounds)
    dcfg = DatasetConfig(
        window_s=config.window_s,
        fps=config.fps,
        jitter_s=config.jitter_s,
        ratios=config.ratios,
        seed=config.seed,
        masked=config.masked,
    )
    return build_dataset(rounds, dcfg, sim_cfg=sim_cfg, map_spec=game_map)


def epoch_plan_seeds(config: RunConfig) -> list[int]:
    root = np.random.SeedSequence((config.seed, 0xE70C))
    return [int(s.generate_state(1)[0]) for s in root.spawn(config.epochs)]


def build_epoch_plans(config: RunConfig, train_split: SegmentSet) -> list[list[BatchPlan]]:
    return [
        plan_batches(
            train_split.segments,
            g=config.groups_per_batch,
            a=config.agents_per_group,
            seed=seed,
        )
        for seed in epoch_plan_seeds(config)
    ]


def model_config(config: RunConfig) -> ModelConfig:
    return ModelConfig(
        d_h=config.d_h,
        d_enc=config.d_enc,
        d_proj=config.d_proj,
        d_agg=config.d_agg,
        d_s=config.d_s,
        pov_sizes=tuple(config.pov_sizes),
    )


def resolve_bias_init(config: RunConfig) -> float:
    if config.bias_mode == "fixed":
        return config.b_init
    return init_bias(config.bias_mode, (config.groups_per_batch, config.agents_per_group))


def build_model(config: RunConfig) -> NowcastModel:
    return NowcastModel(
        model_config(config),
        seed=config.seed,
        t_init=config.t_init,
        b_init=resolve_bias_init(config),
        trainable_bias=config.trainable_bias,
    )


def _batch_bce(
    model: NowcastModel,
    emb: nd.Tensor,
    plan: BatchPlan,
    split: SegmentSet,
    pov_sizes,
) -> nd.Tensor:
    """Mean over subset sizes of (TLN + ELN) BCE for one batch.

    Size 1 trains on every member's singleton view; larger sizes use the
    canonical lowest-id subset of each group.
    """
    a = len(plan.groups[0].agent_ids)
    g = len(plan.groups)
    seg_team = np.array([split.segments[i].team for i in plan.segment_indices])
    team_y = np.stack([split.labels[i].teammate_y for i in plan.segment_indices])
    enemy_y = np.stack([split.labels[i].enemy_y for i in plan.segment_indices])
    group_rows = np.arange(g) * a

    total: nd.Tensor | None = None
    for k in pov_sizes:
        if k == 1:
            subsets = np.arange(g * a)[:, None]
            team_idx = seg_team
            ty, ey = team_y, enemy_y
        else:
            if k > a:
                continue
            subsets = group_rows[:, None] + np.arange(k)[None, :]
            team_idx = seg_team[group_rows]
            ty, ey = team_y[group_rows], enemy_y[group_rows]
        for task, labels in (("tln", ty), ("eln", ey)):
            logits = model.predict_groups(emb, subsets, team_idx, task)
            term = obj.bce_loss(logits, labels)
            total = term if total is None else nd.add(total, term)
    return nd.scale(total, 1.0 / len(pov_sizes))


def _param_norms(model: NowcastModel) -> str:
    worst = sorted(
        ((float(np.abs(t.data).max()), name) for name, t in model.store.tensors.items()),
        reverse=True,
    )[:3]
    return ", ".join(f"{name}: {v:.3e}" for v, name in worst)


def train(
    config: RunConfig,
    bundle: DatasetBundle,
    *,
    lam: float | None = None,
    epoch_plans: list[list[BatchPlan]] | None = None,
    model: NowcastModel | None = None,
) -> TrainResult:
    """Train one arm; returns the model with its best-validation state kept.

    Validation metric: TLN subset accuracy at pov=1 on the val split,
    evaluated after every epoch.
    """
    t_start = time.perf_counter()
    if lam is None:
        lam = config.lam
    if epoch_plans is None:
        epoch_plans = build_epoch_plans(config, bundle.splits["train"])
    if model is None:
        model = build_model(config)

    train_split = bundle.splits["train"]
    enc_train = model.extractor.extract(train_split.feature_tensor())
    masks = {}  # one mask per distinct member-key tuple, they repeat per epoch

    params = model.store.trainable(include_contrastive=lam > 0)
    matrices = {id(t) for t in model.store.matrices()}
    no_decay = [t for t in params if id(t) not in matrices]
    optimizer = nd.AdamW(
        params,
        lr=config.lr,
        weight_decay=config.weight_decay,
        no_decay=no_decay,
    )

    cecl_evaluations = 0
    log: dict = {
        "epochs": [],
        "t_history": [],
        "b_history": [],
        "val_history": [],
        "lam": lam,
    }
    best_val = -1.0
    best_epoch = -1
    best_state = model.store.state_arrays()
    step = 0

    for epoch, plans in enumerate(epoch_plans):
        epoch_cecl = 0.0
        epoch_bce = 0.0
        for plan in plans:
            optimizer.zero_grad()
            with nd.Tape() as tape:
                pooled = nd.tensor(enc_train[plan.segment_indices])
                emb, unit = model.project(pooled)
                cecl_term = None
                if lam > 0:
                    if plan.member_keys not in masks:
                        masks[plan.member_keys] = build_pair_mask(plan).m
                    cecl_term = obj.cecl_loss(unit, masks[plan.member_keys], model.store.contrastive)
                    cecl_evaluations += 1
                    epoch_cecl += cecl_term.item()
                bce_term = _batch_bce(model, emb, plan, train_split, config.pov_sizes)
                loss = obj.total_loss(cecl_term, bce_term, lam)
                if not np.isfinite(loss.data).all():
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch {step}; "
                        f"largest params: {_param_norms(model)}"
                    )
                epoch_bce += bce_term.item()
                tape.backward(loss)
            optimizer.step()
            step += 1

        val_report = evaluate_split(model, bundle.splits["val"], pov_sizes=(1,))
        val_metric = val_report["tln"][1].subset_acc
        log["epochs"].append(
            {
                "epoch": epoch,
                "mean_cecl": epoch_cecl / max(1, len(plans)),
                "mean_bce": epoch_bce / max(1, len(plans)),
                "val_tln_subset_acc": val_metric,
            }
        )
        log["t_history"].append(model.store.contrastive.temperature)
        log["b_history"].append(model.store.contrastive.bias)
        log["val_history"].append(val_metric)
        if val_metric > best_val:
            best_val = val_metric
            best_epoch = epoch
            best_state = model.store.state_arrays()

    model.store.load_state(best_state)
    return TrainResult(
        model=model,
        best_state=best_state,
        best_val=best_val,
        best_epoch=best_epoch,
        log=log,
        cecl_evaluations=cecl_evaluations,
        wall_clock_s=time.perf_counter() - t_start,
    )


@dataclass
class EvalGroups:
    """Canonical evaluation groups of one split: full 5-agent teams."""

    rows: np.ndarray  # (G, 5) segment row indices, agent-sorted
    team_idx: np.ndarray  # (G,)
    teammate_y: np.ndarray  # (G, 23)
    enemy_y: np.ndarray  # (G, 23)

    @classmethod
    def from_split(cls, split: SegmentSet) -> "EvalGroups":
        groups = group_segments(split.segments)
        keys = sorted(k for k, v in groups.items() if len(v) == 5)
        rows = np.array([groups[k] for k in keys], dtype=np.int64)
        team_idx = np.array([k[2] for k in keys], dtype=np.int64)
        teammate_y = np.stack([split.labels[groups[k][0]].teammate_y for k in keys])
        enemy_y = np.stack([split.labels[groups[k][0]].enemy_y for k in keys])
        return cls(rows=rows, team_idx=team_idx, teammate_y=teammate_y, enemy_y=enemy_y)


def evaluate_split(
    model: NowcastModel,
    split: SegmentSet,
    pov_sizes=(1, 2, 3, 4, 5),
) -> dict[str, dict[int, MetricsReport]]:
    """Metrics per task and POV size. Size k uses each group's k lowest
    agent ids (the canonical subset)."""
    if not split.segments:
        raise XegoError("cannot evaluate an empty split")
    eg = EvalGroups.from_split(split)
    enc = model.extractor.extract(split.feature_tensor())
    emb, _ = model.project(nd.tensor(enc))
    out: dict[str, dict[int, MetricsReport]] = {task: {} for task in TASKS}
    for k in pov_sizes:
        subsets = eg.rows[:, :k]
        for task, y in (("tln", eg.teammate_y), ("eln", eg.enemy_y)):
            logits = model.predict_groups(emb, subsets, eg.team_idx, task)
            pred = classify(logits.data)
            out[task][k] = compute_report(pred, y)
    return out
