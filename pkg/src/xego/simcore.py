"""Synthetic tactical simulator: two teams of five on a fixed 23-area grid.

Rounds are tick-synchronized trajectories with flash/smoke/engage events and
partially observable egocentric feature streams. Everything is a pure
function of (config, seed), so repeated calls are bit-identical.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from xego.errors import DomainError

__all__ = [
    "AreaDef",
    "MapSpec",
    "SimConfig",
    "AgentState",
    "Event",
    "TrajectoryRound",
    "ObservationFrame",
    "N_AREAS",
    "N_AGENTS",
    "GRID",
    "FEAT_F",
    "FEAT_WIDTH",
    "EVENT_KINDS",
    "build_default_map",
    "area_of_position",
    "has_line_of_sight",
    "generate_round",
    "simulate_rounds",
    "render_observation",
    "render_tick_features",
]

N_AREAS = 23
N_AGENTS = 10
GRID = 48

# Fixed motion-model constants (not part of SimConfig).
PHASE_S = 10.0
SPEED_CELLS_S = 14.0
MOTION_NOISE = 0.8
ARRIVE_DIST = 0.8
HOLD_P = 0.2
MAX_PUSH_HOPS = 2
STACK_P = 0.5
FLASH_RADIUS = 8.0
BLIND_S = 2.0
EVENT_WINDOW_S = 3.0
EVENT_DECAY_S = 1.0
TIME_NOISE = 0.02
# Feature magnitudes: how loudly each block speaks through the frozen
# random encoder (its pooled output is RMS-normalized downstream).
VIS_SCALE = 0.5
LEAK_SCALE = 1.0

EVENT_KINDS = ("flash", "smoke", "engage")

# Feature layout: F ego/visibility/event/phase dims, then the 23-dim
# occupancy leak block (minimap analog).
FEAT_F = 32
FEAT_WIDTH = FEAT_F + N_AREAS
_POS = slice(0, 2)
_FACING = 2
_AREA_ONEHOT = slice(3, 3 + N_AREAS)
_VIS = slice(26, 29)
_BLIND = 29
_RECENT = 30
_TIME = 31
LEAK = slice(FEAT_F, FEAT_WIDTH)
MAX_DOOR_DEGREE = 3


@dataclass(frozen=True)
class AreaDef:
    area_id: int
    name: str
    x0: int
    y0: int
    x1: int  # exclusive
    y1: int  # exclusive

    def contains_cell(self, cx: int, cy: int) -> bool:
        return self.x0 <= cx < self.x1 and self.y0 <= cy < self.y1

    def center(self) -> tuple[float, float]:
        return ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)


@dataclass(frozen=True)
class MapSpec:
    grid_width: int
    grid_height: int
    areas: tuple[AreaDef, ...]
    adjacency: tuple[tuple[int, int], ...]
    spawn_t: int
    spawn_ct: int
    cell_area: np.ndarray = field(repr=False, compare=False, default=None)
    neighbor_map: tuple[tuple[int, ...], ...] = field(compare=False, default=None)
    door_distance: np.ndarray = field(repr=False, compare=False, default=None)

    def area_name(self, area_id: int) -> str:
        return self.areas[area_id].name

    def neighbors(self, area_id: int) -> tuple[int, ...]:
        return self.neighbor_map[area_id]

    def formation_areas(self, target_area: int) -> tuple[int, ...]:
        """Per-role stance around a team target: three members hold the
        target, the other two its lowest-id door neighbors."""
        nbrs = self.neighbors(target_area)
        first = nbrs[0] if nbrs else target_area
        second = nbrs[1] if len(nbrs) > 1 else target_area
        return (target_area, target_area, target_area, first, second)


# 48x48 grid tiled by six 8-row bands. Names follow common callout style.
_BANDS = [(0, 8), (8, 16), (16, 24), (24, 32), (32, 40), (40, 48)]
_AREA_ROWS: list[list[tuple[str, int, int]]] = [
    [("T_Spawn", 0, 16), ("T_Ramp", 16, 32), ("Outside", 32, 48)],
    [("Apartments", 0, 12), ("Top_Mid", 12, 24), ("Tickets", 24, 36), ("Back_Alley", 36, 48)],
    [("Palace", 0, 12), ("Mid", 12, 24), ("Connector", 24, 36), ("Market", 36, 48)],
    [("Bombsite_A", 0, 12), ("Catwalk", 12, 24), ("Window", 24, 36), ("Kitchen", 36, 48)],
    [("Sandwich", 0, 12), ("Stairs", 12, 24), ("Jungle", 24, 36), ("Bombsite_B", 36, 48)],
    [("CT_Ramp", 0, 12), ("CT_Spawn", 12, 24), ("Ladder", 24, 36), ("Van", 36, 48)],
]

# Door graph: the subset of shared edges agents can see through. Connected,
# max degree 3 (so every neighbor has a visibility-feature slot).
_DOORS: tuple[tuple[int, int], ...] = (
    (0, 1), (1, 2), (0, 3), (1, 4), (2, 5), (2, 6),
    (3, 7), (4, 8), (5, 9), (6, 10), (8, 9),
    (7, 11), (8, 12), (9, 13), (10, 14),
    (11, 15), (12, 16), (13, 17), (14, 18), (16, 17),
    (15, 19), (16, 20), (17, 21), (18, 22), (19, 20), (21, 22),
)


def build_default_map() -> MapSpec:
    """The fixed 23-area map; identical on every call."""
    areas = []
    aid = 0
    for (y0, y1), row in zip(_BANDS, _AREA_ROWS):
        for name, x0, x1 in row:
            areas.append(AreaDef(aid, name, x0, y0, x1, y1))
            aid += 1
    assert len(areas) == N_AREAS

    cell_area = np.full((GRID, GRID), 255, dtype=np.uint8)
    for a in areas:
        cell_area[a.y0 : a.y1, a.x0 : a.x1] = a.area_id
    assert (cell_area != 255).all(), "areas must tile the full grid"

    nbrs: list[list[int]] = [[] for _ in range(N_AREAS)]
    for a, b in _DOORS:
        nbrs[a].append(b)
        nbrs[b].append(a)
    neighbor_map = tuple(tuple(sorted(ns)) for ns in nbrs)
    assert max(len(ns) for ns in neighbor_map) <= MAX_DOOR_DEGREE

    # hop distances over the door graph (BFS per source)
    dist = np.full((N_AREAS, N_AREAS), 255, dtype=np.uint8)
    for src in range(N_AREAS):
        dist[src, src] = 0
        frontier = [src]
        while frontier:
            nxt = []
            for cur in frontier:
                for nb in neighbor_map[cur]:
                    if dist[src, nb] == 255:
                        dist[src, nb] = dist[src, cur] + 1
                        nxt.append(nb)
            frontier = nxt
    assert dist.max() < 255, "door graph must be connected"

    by_name = {a.name: a.area_id for a in areas}
    return MapSpec(
        grid_width=GRID,
        grid_height=GRID,
        areas=tuple(areas),
        adjacency=_DOORS,
        spawn_t=by_name["T_Spawn"],
        spawn_ct=by_name["CT_Spawn"],
        cell_area=cell_area,
        neighbor_map=neighbor_map,
        door_distance=dist,
    )


def area_of_position(map_spec: MapSpec, pos: tuple[float, float]) -> int:
    """Area containing ``pos``; boundary points belong to the floor cell."""
    x, y = float(pos[0]), float(pos[1])
    if not (0.0 <= x < map_spec.grid_width and 0.0 <= y < map_spec.grid_height):
        raise DomainError(f"position {pos} outside playable region")
    return int(map_spec.cell_area[int(math.floor(y)), int(math.floor(x))])


def _areas_along(map_spec: MapSpec, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Area ids of cells sampled finely along the segment p->q."""
    dist = float(np.hypot(*(q - p)))
    n = max(2, int(dist * 4) + 1)
    ts = np.linspace(0.0, 1.0, n)
    pts = p[None, :] + ts[:, None] * (q - p)[None, :]
    cx = np.clip(pts[:, 0].astype(np.int64), 0, map_spec.grid_width - 1)
    cy = np.clip(pts[:, 1].astype(np.int64), 0, map_spec.grid_height - 1)
    return map_spec.cell_area[cy, cx]


def has_line_of_sight(map_spec: MapSpec, p, q) -> bool:
    """True when every area boundary crossed along p->q is an open door."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    seq = _areas_along(map_spec, p, q)
    doors = {frozenset(d) for d in map_spec.adjacency}
    prev = int(seq[0])
    for aid in seq[1:]:
        aid = int(aid)
        if aid != prev:
            if frozenset((prev, aid)) not in doors:
                return False
            prev = aid
    return True


@dataclass
class SimConfig:
    tickrate: int = 64
    duration_s: float = 44.0
    flash_rate: float = 0.02  # flash events per second per team
    vis_radius: float = 10.0
    noise_std: float = 1.5  # observation noise, in cells
    seed: int = 0

    def validate(self) -> None:
        if self.tickrate < 1:
            raise DomainError(f"tickrate must be >= 1, got {self.tickrate}")
        if self.duration_s <= 0:
            raise DomainError(f"duration_s must be positive, got {self.duration_s}")
        if self.flash_rate < 0 or self.vis_radius <= 0 or self.noise_std < 0:
            raise DomainError("flash_rate/vis_radius/noise_std out of range")

    @classmethod
    def desk_profile(cls, **overrides) -> "SimConfig":
        cfg = cls(tickrate=16, duration_s=20.0)
        return replace(cfg, **overrides)


@dataclass
class AgentState:
    agent_id: int
    team: int  # 0 = T (ids 0-4), 1 = CT (ids 5-9)
    pos: tuple[float, float]
    facing: float
    blind_until: int


@dataclass(frozen=True)
class Event:
    tick: int
    kind: str
    origin: tuple[float, float]
    affected: tuple[int, ...]


@dataclass
class TrajectoryRound:
    """One round: per-tick snapshots of all 10 agents plus events.

    Snapshot arrays are float32/uint8 so that file serialization is exact.
    """

    round_id: int
    match_id: int
    tickrate: int
    n_ticks: int
    map_name: str
    pos: np.ndarray  # (n_ticks, 10, 2) f32
    facing: np.ndarray  # (n_ticks, 10) f32
    area_id: np.ndarray  # (n_ticks, 10) u8
    blind: np.ndarray  # (n_ticks, 10) u8
    events: list[Event]

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrajectoryRound):
            return NotImplemented
        return (
            self.round_id == other.round_id
            and self.match_id == other.match_id
            and self.tickrate == other.tickrate
            and self.n_ticks == other.n_ticks
            and self.map_name == other.map_name
            and np.array_equal(self.pos, other.pos)
            and np.array_equal(self.facing, other.facing)
            and np.array_equal(self.area_id, other.area_id)
            and np.array_equal(self.blind, other.blind)
            and self.events == other.events
        )

    def team_of(self, agent_id: int) -> int:
        return 0 if agent_id < 5 else 1


def team_of_agent(agent_id: int) -> int:
    return 0 if agent_id < 5 else 1


def _sample_cell_in_area(rng: np.random.Generator, area: AreaDef) -> np.ndarray:
    x = rng.uniform(area.x0 + 0.2, area.x1 - 0.2)
    y = rng.uniform(area.y0 + 0.2, area.y1 - 0.2)
    return np.array([x, y])


def _next_team_target(rng, map_spec: MapSpec, current: int) -> int:
    """Hold with prob HOLD_P, else push to an area within MAX_PUSH_HOPS
    doors; bounded hops keep transits short relative to a phase."""
    if rng.random() < HOLD_P:
        return current
    reachable = [
        a
        for a in range(N_AREAS)
        if 1 <= map_spec.door_distance[current, a] <= MAX_PUSH_HOPS
    ]
    return int(reachable[rng.integers(len(reachable))])


def generate_round(
    map_spec: MapSpec,
    cfg: SimConfig,
    seed: int,
    *,
    match_id: int | None = None,
    round_id: int | None = None,
) -> TrajectoryRound:
    """Simulate one round; bit-identical output for identical (cfg, seed)."""
    cfg.validate()
    n_ticks = int(round(cfg.duration_s * cfg.tickrate))
    if n_ticks < 1:
        raise DomainError("round must span at least one tick")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), cfg.seed, 0x5EC0)))

    if match_id is None:
        match_id = cfg.seed
    if round_id is None:
        round_id = int(seed) & 0xFFFFFFFF

    pos = np.zeros((N_AGENTS, 2))
    facing = np.zeros(N_AGENTS)
    blind_until = np.zeros(N_AGENTS, dtype=np.int64)
    waypoints = np.zeros((N_AGENTS, 2))
    team_targets = [map_spec.spawn_t, map_spec.spawn_ct]
    assigned_area = np.zeros(N_AGENTS, dtype=np.int64)
    settled = np.zeros(N_AGENTS, dtype=bool)

    def reassign(team: int) -> None:
        """Pick a formation variant, shuffle roles, hand out stance areas.

        A stack puts all five members in the target; the only single-view
        tell separating it from a spread is who shows up in the adjacent
        areas.
        """
        target = team_targets[team]
        if rng.random() < STACK_P:
            stances: tuple[int, ...] = (target,) * 5
        else:
            stances = map_spec.formation_areas(target)
        shift = int(rng.integers(5))
        for rank in range(5):
            agent = team * 5 + rank
            assigned_area[agent] = stances[(rank + shift) % 5]
            waypoints[agent] = _sample_cell_in_area(
                rng, map_spec.areas[assigned_area[agent]]
            )
            settled[agent] = False

    # Phase 0 stances form around the spawn areas; agents start in place.
    for team in (0, 1):
        reassign(team)
    for i in range(N_AGENTS):
        pos[i] = _sample_cell_in_area(rng, map_spec.areas[assigned_area[i]])
    # Positions are kept exactly float32-representable so that the event
    # rule can be replayed bit-for-bit from stored snapshots.
    pos = pos.astype(np.float32).astype(np.float64)

    snap_pos = np.zeros((n_ticks, N_AGENTS, 2), dtype=np.float32)
    snap_facing = np.zeros((n_ticks, N_AGENTS), dtype=np.float32)
    snap_area = np.zeros((n_ticks, N_AGENTS), dtype=np.uint8)
    snap_blind = np.zeros((n_ticks, N_AGENTS), dtype=np.uint8)
    events: list[Event] = []

    phase_ticks = max(1, int(PHASE_S * cfg.tickrate))
    step_len = SPEED_CELLS_S / cfg.tickrate
    noise_sigma = MOTION_NOISE / math.sqrt(cfg.tickrate)
    blind_ticks = max(1, int(BLIND_S * cfg.tickrate))
    event_p = cfg.flash_rate / cfg.tickrate
    lo, hi = 0.01, GRID - 0.01

    for t in range(n_ticks):
        if t > 0 and t % phase_ticks == 0:
            for team in (0, 1):
                team_targets[team] = _next_team_target(rng, map_spec, team_targets[team])
                reassign(team)

        # snapshot current state
        snap_pos[t] = pos.astype(np.float32)
        snap_facing[t] = facing.astype(np.float32)
        for i in range(N_AGENTS):
            snap_area[t, i] = map_spec.cell_area[int(snap_pos[t, i, 1]), int(snap_pos[t, i, 0])]
        snap_blind[t] = (t < blind_until).astype(np.uint8)

        # events at this tick take effect from t+1 onward
        for team in (0, 1):
            for kind in EVENT_KINDS:
                p = event_p if kind == "flash" else event_p / 2.0
                if rng.random() >= p:
                    continue
                thrower = int(rng.integers(5)) + team * 5
                origin = pos[thrower] + rng.uniform(-3.0, 3.0, size=2)
                origin = np.clip(origin, lo, hi).astype(np.float32).astype(np.float64)
                affected = []
                for i in range(N_AGENTS):
                    if np.hypot(*(pos[i] - origin)) > FLASH_RADIUS:
                        continue
                    if has_line_of_sight(map_spec, origin, pos[i]):
                        affected.append(i)
                if kind == "flash":
                    for i in affected:
                        blind_until[i] = max(blind_until[i], t + 1 + blind_ticks)
                events.append(
                    Event(
                        tick=t,
                        kind=kind,
                        origin=(float(origin[0]), float(origin[1])),
                        affected=tuple(affected),
                    )
                )

        # move toward waypoints with individual noise; settled agents mill
        # inside their stance area and watch the team target
        delta = waypoints - pos
        dists = np.hypot(delta[:, 0], delta[:, 1])
        noise = rng.normal(0.0, noise_sigma, size=(N_AGENTS, 2))
        for i in range(N_AGENTS):
            area = map_spec.areas[assigned_area[i]]
            if dists[i] < ARRIVE_DIST:
                settled[i] = True
                waypoints[i] = _sample_cell_in_area(rng, area)
                target_c = map_spec.areas[team_targets[team_of_agent(i)]].center()
                facing[i] = math.atan2(target_c[1] - pos[i][1], target_c[0] - pos[i][0])
                pos[i] = pos[i] + noise[i] * 0.5
            else:
                step = min(step_len, dists[i])
                direction = delta[i] / dists[i]
                pos[i] = pos[i] + direction * step + noise[i]
                facing[i] = math.atan2(direction[1], direction[0])
            if settled[i]:
                # stance discipline: a settled agent never strays off-area
                pos[i, 0] = min(max(pos[i, 0], area.x0 + 0.1), area.x1 - 0.1)
                pos[i, 1] = min(max(pos[i, 1], area.y0 + 0.1), area.y1 - 0.1)
        np.clip(pos, lo, hi, out=pos)
        pos = pos.astype(np.float32).astype(np.float64)

    return TrajectoryRound(
        round_id=round_id,
        match_id=match_id,
        tickrate=cfg.tickrate,
        n_ticks=n_ticks,
        map_name="default48",
        pos=snap_pos,
        facing=snap_facing,
        area_id=snap_area,
        blind=snap_blind,
        events=events,
    )


def simulate_rounds(
    map_spec: MapSpec, cfg: SimConfig, n_rounds: int
) -> list[TrajectoryRound]:
    """Corpus convention: round i uses seed cfg.seed + i and round_id i."""
    return [
        generate_round(map_spec, cfg, cfg.seed + i, match_id=cfg.seed, round_id=i)
        for i in range(n_rounds)
    ]


@dataclass
class ObservationFrame:
    """One agent's feature vector at one tick.

    Layout (width 55): noisy position (2), facing (1), own-area one-hot (23),
    visible-teammate occupancy counts for up to 3 door neighbors in ascending
    area-id order (3), blindness intensity (1), recent-event indicator (1),
    noisy round-time (1), then the 23-dim occupancy leak block. The leak
    encodes ground-truth occupancy relative to the observer: +1 for own-team
    presence, +2 for enemy presence per area.
    """

    agent_id: int
    tick: int
    features: np.ndarray  # (FEAT_WIDTH,) f32


def _obs_rng(round_: TrajectoryRound, agent_id: int, tick: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence((round_.match_id, round_.round_id, agent_id, tick, 0x0B5))
    )


def _leak_vector(round_: TrajectoryRound, tick: int, pov_team: int) -> np.ndarray:
    """Team-resolved occupancy: +1 own-team presence, +2 enemy presence."""
    areas = round_.area_id[tick]
    own = np.zeros(N_AREAS)
    enemy = np.zeros(N_AREAS)
    for i in range(N_AGENTS):
        if team_of_agent(i) == pov_team:
            own[int(areas[i])] = 1.0
        else:
            enemy[int(areas[i])] = 1.0
    return own + 2.0 * enemy


def _recent_event_level(round_: TrajectoryRound, agent_id: int, tick: int) -> float:
    window = EVENT_WINDOW_S * round_.tickrate
    decay = EVENT_DECAY_S * round_.tickrate
    level = 0.0
    for ev in round_.events:
        dt = tick - ev.tick
        if 0 <= dt <= window and agent_id in ev.affected:
            level += math.exp(-dt / decay)
    return level


def render_tick_features(
    round_: TrajectoryRound,
    tick: int,
    map_spec: MapSpec | None = None,
    cfg: SimConfig | None = None,
) -> np.ndarray:
    """Feature vectors of all 10 agents at one tick, shape (10, FEAT_WIDTH).

    Pairwise visibility is computed once, which keeps dataset rendering an
    order of magnitude cheaper than per-agent calls.
    """
    if map_spec is None:
        map_spec = build_default_map()
    if cfg is None:
        cfg = SimConfig()
    if not (0 <= tick < round_.n_ticks):
        raise DomainError(f"tick {tick} out of range [0, {round_.n_ticks})")

    pos = round_.pos[tick].astype(np.float64)
    areas = round_.area_id[tick]
    blind = round_.blind[tick]

    # LOS and range are symmetric; blindness then gates each viewer's row.
    sightline = np.zeros((N_AGENTS, N_AGENTS), dtype=bool)
    for i in range(N_AGENTS):
        for j in range(i + 1, N_AGENTS):
            if np.hypot(*(pos[j] - pos[i])) > cfg.vis_radius:
                continue
            if has_line_of_sight(map_spec, pos[i], pos[j]):
                sightline[i, j] = sightline[j, i] = True
    visible = sightline & ~blind.astype(bool)[:, None]

    out = np.zeros((N_AGENTS, FEAT_WIDTH), dtype=np.float64)
    time_base = tick / max(1, round_.n_ticks - 1)
    for i in range(N_AGENTS):
        rng = _obs_rng(round_, i, tick)
        noise = rng.normal(0.0, 1.0, size=3)
        feats = out[i]
        feats[_POS] = (pos[i] + noise[:2] * cfg.noise_std) / GRID
        feats[_FACING] = float(round_.facing[tick, i]) / math.pi
        feats[3 + int(areas[i])] = 1.0
        if not blind[i]:
            nbrs = map_spec.neighbors(int(areas[i]))
            team = team_of_agent(i)
            for slot, nb in enumerate(nbrs[:3]):
                count = sum(
                    1
                    for j in range(N_AGENTS)
                    if visible[i, j] and team_of_agent(j) == team and int(areas[j]) == nb
                )
                feats[26 + slot] = count * VIS_SCALE
        feats[_BLIND] = 1.0 if blind[i] else 0.0
        feats[_RECENT] = _recent_event_level(round_, i, tick)
        feats[_TIME] = time_base + noise[2] * TIME_NOISE
        feats[LEAK] = _leak_vector(round_, tick, team_of_agent(i)) * LEAK_SCALE
    return out.astype(np.float32)


def render_observation(
    round_: TrajectoryRound,
    agent_id: int,
    tick: int,
    map_spec: MapSpec | None = None,
    cfg: SimConfig | None = None,
) -> ObservationFrame:
    """Egocentric observation of one agent at one tick."""
    if not (0 <= agent_id < N_AGENTS):
        raise DomainError(f"agent_id {agent_id} out of range [0, {N_AGENTS})")
    feats = render_tick_features(round_, tick, map_spec=map_spec, cfg=cfg)
    return ObservationFrame(agent_id=agent_id, tick=tick, features=feats[agent_id])
