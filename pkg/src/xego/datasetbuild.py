"""Windowed, labeled, split, leak-maskable training samples from rounds.

A segment is one agent's T-frame feature window. All ten agents of a round
share identical slot boundaries and jitter, so segments of the same slot are
exactly time-aligned across agents; that alignment is what makes same-team
same-slot pairs contrastive positives.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from xego.errors import DomainError
from xego.simcore import (
    FEAT_F,
    FEAT_WIDTH,
    N_AGENTS,
    N_AREAS,
    MapSpec,
    SimConfig,
    TrajectoryRound,
    build_default_map,
    render_tick_features,
    team_of_agent,
)

__all__ = [
    "Segment",
    "LabelVector",
    "GroupKey",
    "BatchPlan",
    "PairMask",
    "SegmentSet",
    "DatasetConfig",
    "DatasetBundle",
    "segment_round",
    "build_labels",
    "apply_leak_mask",
    "split_rounds",
    "group_segments",
    "plan_batches",
    "build_pair_mask",
    "build_dataset",
    "write_split_archive",
    "read_split_archive",
]

SPLIT_NAMES = ("train", "val", "test")


@dataclass
class Segment:
    features: np.ndarray  # (T, FEAT_WIDTH) f32
    agent_id: int
    team: int
    round_uid: int
    slot_index: int
    center_tick: int
    frame_ticks: np.ndarray  # (T,) i64

    def __eq__(self, other) -> bool:
        if not isinstance(other, Segment):
            return NotImplemented
        return (
            self.agent_id == other.agent_id
            and self.team == other.team
            and self.round_uid == other.round_uid
            and self.slot_index == other.slot_index
            and self.center_tick == other.center_tick
            and np.array_equal(self.frame_ticks, other.frame_ticks)
            and np.array_equal(self.features, other.features)
        )

    @property
    def group_key(self) -> tuple[int, int, int]:
        return (self.round_uid, self.slot_index, self.team)


@dataclass(frozen=True)
class LabelVector:
    teammate_y: np.ndarray  # (23,) u8
    enemy_y: np.ndarray  # (23,) u8

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabelVector):
            return NotImplemented
        return np.array_equal(self.teammate_y, other.teammate_y) and np.array_equal(
            self.enemy_y, other.enemy_y
        )


@dataclass(frozen=True)
class GroupKey:
    round_uid: int
    slot_index: int
    team: int
    agent_ids: tuple[int, ...]


@dataclass
class BatchPlan:
    groups: tuple[GroupKey, ...]
    segment_indices: np.ndarray  # (G*A,) indices into the split's segment list
    member_keys: tuple[tuple[int, int, int], ...]  # (round_uid, slot, team) per member

    @property
    def size(self) -> int:
        return len(self.segment_indices)


@dataclass
class PairMask:
    m: np.ndarray  # (B, B) int8 in {+1, -1}


def _jitter_rng(seed: int, round_: TrajectoryRound) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence((int(seed), round_.match_id, round_.round_id, 0x51077))
    )


def slot_frame_ticks(
    round_: TrajectoryRound,
    window_s: float = 5.0,
    fps: int = 4,
    jitter_s: float = 0.3,
    seed: int = 0,
) -> list[np.ndarray]:
    """Frame ticks per slot, shared by all agents of the round."""
    if fps < 1 or window_s <= 0:
        raise DomainError(f"bad window parameters window_s={window_s}, fps={fps}")
    if round_.tickrate % fps != 0:
        raise DomainError(f"tickrate {round_.tickrate} not divisible by fps {fps}")
    stride = round_.tickrate // fps
    n_frames = int(round(window_s * fps))
    duration_s = round_.n_ticks / round_.tickrate
    n_slots = int(duration_s // window_s)
    if n_slots < 1:
        return []
    rng = _jitter_rng(seed, round_)
    max_start = round_.n_ticks - 1 - (n_frames - 1) * stride
    if max_start < 0:
        return []
    ticks_per_slot = []
    for s in range(n_slots):
        jit = float(rng.uniform(-jitter_s, jitter_s)) if jitter_s > 0 else 0.0
        start = int(round((s * window_s + jit) * round_.tickrate))
        start = min(max(start, 0), max_start)
        ticks_per_slot.append(start + stride * np.arange(n_frames, dtype=np.int64))
    return ticks_per_slot


def segment_round(
    round_: TrajectoryRound,
    window_s: float = 5.0,
    fps: int = 4,
    jitter_s: float = 0.3,
    seed: int = 0,
    *,
    map_spec: MapSpec | None = None,
    sim_cfg: SimConfig | None = None,
    round_uid: int | None = None,
) -> list[Segment]:
    """All agents' segments for every full window of the round.

    Returns one segment per (slot, agent); empty when the round is shorter
    than a single window.
    """
    if map_spec is None:
        map_spec = build_default_map()
    if round_uid is None:
        round_uid = round_.round_id
    ticks_per_slot = slot_frame_ticks(round_, window_s, fps, jitter_s, seed)
    segments: list[Segment] = []
    for slot, ticks in enumerate(ticks_per_slot):
        frames = np.stack(
            [render_tick_features(round_, int(t), map_spec, sim_cfg) for t in ticks]
        )  # (T, 10, W)
        center = int(ticks[len(ticks) // 2])
        for agent in range(N_AGENTS):
            segments.append(
                Segment(
                    features=frames[:, agent, :].copy(),
                    agent_id=agent,
                    team=team_of_agent(agent),
                    round_uid=round_uid,
                    slot_index=slot,
                    center_tick=center,
                    frame_ticks=ticks.copy(),
                )
            )
    return segments


def build_labels(round_: TrajectoryRound, segment: Segment) -> LabelVector:
    """Occupancy labels at the segment's center tick, relative to its team."""
    if not (0 <= segment.center_tick < round_.n_ticks):
        raise DomainError(f"center_tick {segment.center_tick} outside round")
    areas = round_.area_id[segment.center_tick]
    teammate = np.zeros(N_AREAS, dtype=np.uint8)
    enemy = np.zeros(N_AREAS, dtype=np.uint8)
    for agent in range(N_AGENTS):
        if team_of_agent(agent) == segment.team:
            teammate[int(areas[agent])] = 1
        else:
            enemy[int(areas[agent])] = 1
    return LabelVector(teammate_y=teammate, enemy_y=enemy)


def apply_leak_mask(segment: Segment, masked: bool) -> Segment:
    """Zero the trailing 23 leak dims of every frame when masked."""
    if not masked:
        return segment
    feats = segment.features.copy()
    feats[:, FEAT_F:] = 0.0
    return replace(segment, features=feats, frame_ticks=segment.frame_ticks.copy())


def split_rounds(
    round_uids: Sequence[int],
    ratios: tuple[int, int, int] = (70, 15, 15),
    seed: int = 0,
) -> dict[str, set[int]]:
    """Round-level split: disjoint, exhaustive, floor sizes, remainder to
    train first, then val, then test."""
    uids = list(round_uids)
    if len(set(uids)) != len(uids):
        raise DomainError("round uids must be unique")
    n = len(uids)
    if n < 3:
        raise DomainError(f"need at least 3 rounds to split, got {n}")
    if sum(ratios) != 100 or any(r <= 0 for r in ratios):
        raise DomainError(f"ratios must be positive and sum to 100, got {ratios}")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x5B117)))
    order = [uids[i] for i in rng.permutation(n)]
    sizes = [int(n * r) // 100 for r in ratios]
    leftover = n - sum(sizes)
    for i in range(leftover):
        sizes[i % 3] += 1
    out: dict[str, set[int]] = {}
    start = 0
    for name, size in zip(SPLIT_NAMES, sizes):
        out[name] = set(order[start : start + size])
        start += size
    return out


def group_segments(segments: Sequence[Segment]) -> dict[tuple[int, int, int], list[int]]:
    """Indices of segments per (round_uid, slot_index, team), agent-sorted."""
    groups: dict[tuple[int, int, int], list[int]] = {}
    for idx, seg in enumerate(segments):
        groups.setdefault(seg.group_key, []).append(idx)
    for key, members in groups.items():
        members.sort(key=lambda i: segments[i].agent_id)
        agents = [segments[i].agent_id for i in members]
        if len(set(agents)) != len(agents):
            raise DomainError(f"duplicate agent in group {key}")
    return groups


def plan_batches(
    segments: Sequence[Segment],
    g: int,
    a: int = 5,
    seed: int = 0,
) -> list[BatchPlan]:
    """Deterministically shuffled batches of g groups of a teammates each.

    Groups that cannot field ``a`` members and trailing groups that cannot
    fill a batch are dropped.
    """
    if g < 1 or a < 1:
        raise DomainError(f"need positive batch shape, got g={g}, a={a}")
    groups = group_segments(segments)
    usable = {k: v[:a] for k, v in sorted(groups.items()) if len(v) >= a}
    if len(usable) < g:
        raise DomainError(f"need at least {g} groups of {a} teammates, have {len(usable)}")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xBA7C4)))
    keys = list(usable.keys())
    order = [keys[i] for i in rng.permutation(len(keys))]
    plans: list[BatchPlan] = []
    for b in range(len(order) // g):
        chunk = order[b * g : (b + 1) * g]
        group_keys = []
        indices: list[int] = []
        member_keys: list[tuple[int, int, int]] = []
        for key in chunk:
            members = usable[key]
            group_keys.append(
                GroupKey(
                    round_uid=key[0],
                    slot_index=key[1],
                    team=key[2],
                    agent_ids=tuple(segments[i].agent_id for i in members),
                )
            )
            indices.extend(members)
            member_keys.extend([key] * len(members))
        plans.append(
            BatchPlan(
                groups=tuple(group_keys),
                segment_indices=np.array(indices, dtype=np.int64),
                member_keys=tuple(member_keys),
            )
        )
    return plans


def build_pair_mask(plan: BatchPlan) -> PairMask:
    """+1 where two members share (round_uid, slot, team), else -1."""
    keys = plan.member_keys
    n = len(keys)
    m = np.full((n, n), -1, dtype=np.int8)
    for i in range(n):
        for j in range(n):
            if keys[i] == keys[j]:
                m[i, j] = 1
    return PairMask(m=m)


# ---------------------------------------------------------------------------
# dataset assembly

@dataclass
class DatasetConfig:
    window_s: float = 5.0
    fps: int = 4
    jitter_s: float = 0.3
    ratios: tuple[int, int, int] = (70, 15, 15)
    seed: int = 0
    masked: bool = True


@dataclass
class SegmentSet:
    segments: list[Segment]
    labels: list[LabelVector]

    def __len__(self) -> int:
        return len(self.segments)

    def feature_tensor(self) -> np.ndarray:
        return np.stack([s.features for s in self.segments])

    def teammate_matrix(self) -> np.ndarray:
        return np.stack([l.teammate_y for l in self.labels])

    def enemy_matrix(self) -> np.ndarray:
        return np.stack([l.enemy_y for l in self.labels])


@dataclass
class DatasetBundle:
    splits: dict[str, SegmentSet]
    manifest: dict
    masked: bool


def build_dataset(
    rounds: Sequence[TrajectoryRound],
    dcfg: DatasetConfig,
    sim_cfg: SimConfig | None = None,
    map_spec: MapSpec | None = None,
) -> DatasetBundle:
    """Segment, label, mask, and split a round corpus.

    Round uids are corpus positions, so identical corpora yield identical
    datasets regardless of where the rounds came from.
    """
    if map_spec is None:
        map_spec = build_default_map()
    uids = list(range(len(rounds)))
    assignment = split_rounds(uids, dcfg.ratios, dcfg.seed)
    splits = {name: SegmentSet([], []) for name in SPLIT_NAMES}
    inventory = []
    for uid, round_ in zip(uids, rounds):
        split_name = next(name for name in SPLIT_NAMES if uid in assignment[name])
        segs = segment_round(
            round_,
            dcfg.window_s,
            dcfg.fps,
            dcfg.jitter_s,
            dcfg.seed,
            map_spec=map_spec,
            sim_cfg=sim_cfg,
            round_uid=uid,
        )
        target = splits[split_name]
        for seg in segs:
            target.labels.append(build_labels(round_, seg))
            target.segments.append(apply_leak_mask(seg, dcfg.masked))
        inventory.append(
            {
                "round_uid": uid,
                "round_id": round_.round_id,
                "match_id": round_.match_id,
                "split": split_name,
                "n_segments": len(segs),
            }
        )
    manifest = {
        "config": {
            "window_s": dcfg.window_s,
            "fps": dcfg.fps,
            "jitter_s": dcfg.jitter_s,
            "ratios": list(dcfg.ratios),
            "seed": dcfg.seed,
            "masked": dcfg.masked,
        },
        "splits": {name: sorted(assignment[name]) for name in SPLIT_NAMES},
        "rounds": inventory,
        "n_segments": {name: len(splits[name]) for name in SPLIT_NAMES},
    }
    return DatasetBundle(splits=splits, manifest=manifest, masked=dcfg.masked)


# ---------------------------------------------------------------------------
# split archives: header + f32 feature matrices + label bytes

_ARCHIVE_MAGIC = b"XSEG"
_ARCHIVE_VERSION = 1
_ARCHIVE_HEADER = struct.Struct("<4sHIHHHB")
_SEGMENT_HEAD = struct.Struct("<IHBBI")


def write_split_archive(split: SegmentSet, sink: BinaryIO, masked: bool) -> int:
    """Layout: magic XSEG | version u16 | n u32 | T u16 | width u16 | F u16
    | masked u8, then per segment: round_uid u32, slot u16, team u8,
    agent u8, center_tick u32, frame ticks T*u32, features T*width f32,
    teammate 23 bytes, enemy 23 bytes (labels zeroed when absent)."""
    n = len(split.segments)
    t_frames = split.segments[0].features.shape[0] if n else 0
    written = 0

    def put(b: bytes) -> None:
        nonlocal written
        sink.write(b)
        written += len(b)

    put(
        _ARCHIVE_HEADER.pack(
            _ARCHIVE_MAGIC, _ARCHIVE_VERSION, n, t_frames, FEAT_WIDTH, FEAT_F, int(masked)
        )
    )
    for seg, label in zip(split.segments, split.labels):
        if seg.features.shape != (t_frames, FEAT_WIDTH):
            raise DomainError(f"inconsistent segment shape {seg.features.shape}")
        put(
            _SEGMENT_HEAD.pack(
                seg.round_uid, seg.slot_index, seg.team, seg.agent_id, seg.center_tick
            )
        )
        put(seg.frame_ticks.astype(np.uint32).tobytes())
        put(seg.features.astype(np.float32).tobytes())
        put(label.teammate_y.astype(np.uint8).tobytes())
        put(label.enemy_y.astype(np.uint8).tobytes())
    return written


def read_split_archive(source: BinaryIO) -> tuple[SegmentSet, bool]:
    head = source.read(_ARCHIVE_HEADER.size)
    if len(head) != _ARCHIVE_HEADER.size:
        raise DomainError("truncated archive header")
    magic, version, n, t_frames, width, feat_f, masked = _ARCHIVE_HEADER.unpack(head)
    if magic != _ARCHIVE_MAGIC:
        raise DomainError(f"bad archive magic {magic!r}")
    if version != _ARCHIVE_VERSION:
        raise DomainError(f"unsupported archive version {version}")
    if width != FEAT_WIDTH or feat_f != FEAT_F:
        raise DomainError(f"archive width {width}/{feat_f} does not match build")
    out = SegmentSet([], [])
    feat_bytes = t_frames * width * 4
    for _ in range(n):
        rec = source.read(_SEGMENT_HEAD.size)
        if len(rec) != _SEGMENT_HEAD.size:
            raise DomainError("truncated segment record")
        uid, slot, team, agent, center = _SEGMENT_HEAD.unpack(rec)
        ticks_raw = source.read(t_frames * 4)
        feats_raw = source.read(feat_bytes)
        ty_raw = source.read(N_AREAS)
        ey_raw = source.read(N_AREAS)
        if (
            len(ticks_raw) != t_frames * 4
            or len(feats_raw) != feat_bytes
            or len(ty_raw) != N_AREAS
            or len(ey_raw) != N_AREAS
        ):
            raise DomainError("truncated segment payload")
        out.segments.append(
            Segment(
                features=np.frombuffer(feats_raw, dtype=np.float32)
                .reshape(t_frames, width)
                .copy(),
                agent_id=agent,
                team=team,
                round_uid=uid,
                slot_index=slot,
                center_tick=center,
                frame_ticks=np.frombuffer(ticks_raw, dtype=np.uint32).astype(np.int64),
            )
        )
        out.labels.append(
            LabelVector(
                teammate_y=np.frombuffer(ty_raw, dtype=np.uint8).copy(),
                enemy_y=np.frombuffer(ey_raw, dtype=np.uint8).copy(),
            )
        )
    return out, bool(masked)


def save_bundle(bundle: DatasetBundle, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(bundle.manifest, indent=2, sort_keys=True))
    for name, split in bundle.splits.items():
        with open(out / f"{name}.xseg", "wb") as fh:
            write_split_archive(split, fh, bundle.masked)


def load_bundle(in_dir) -> DatasetBundle:
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    splits = {}
    masked = True
    for name in SPLIT_NAMES:
        with open(src / f"{name}.xseg", "rb") as fh:
            splits[name], masked = read_split_archive(fh)
    return DatasetBundle(splits=splits, manifest=manifest, masked=masked)
