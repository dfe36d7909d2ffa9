"""Binary trajectory file format (.xego), writer and streaming parser.

Layout, little-endian throughout:

    header:  magic "XEGO" | version u16 | tickrate u16 | n_ticks u32
             | n_agents u8 | n_events u32 | round_id u32 | match_id u32
             | map_name u16 length + UTF-8 bytes
    ticks:   n_ticks records; per agent (10): pos_x f32, pos_y f32,
             facing f32, area_id u8, blind u8  -> 14 bytes, 140 per tick
    events:  n_events records: tick u32 | kind u8 | origin 2*f32
             | affected count u8 | affected ids u8 each

Tick records sit at fixed offsets (header + t*140), events follow them.
The parser reads one tick record at a time, so transient memory stays
bounded by a single record regardless of round length.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from xego.errors import DomainError, XegoError
from xego.simcore import Event, TrajectoryRound, EVENT_KINDS, N_AGENTS, N_AREAS

__all__ = [
    "MAGIC",
    "VERSION",
    "TICK_RECORD_SIZE",
    "FormatError",
    "VersionError",
    "TruncationError",
    "RangeError",
    "WriteError",
    "write_round",
    "read_round",
    "write_round_file",
    "read_round_file",
    "header_size",
    "inspect_file",
]

MAGIC = b"XEGO"
VERSION = 1
AGENT_RECORD = struct.Struct("<fffBB")  # 14 bytes
TICK_RECORD_SIZE = AGENT_RECORD.size * N_AGENTS  # 140
_FIXED_HEADER = struct.Struct("<4sHHIBIII")
_EVENT_HEAD = struct.Struct("<IBffB")
_KIND_CODE = {k: i for i, k in enumerate(EVENT_KINDS)}


class FormatError(XegoError):
    """Stream is not a trajectory file (bad magic or malformed field)."""


class VersionError(XegoError):
    """Recognized file with an unsupported version."""


class TruncationError(XegoError):
    """Stream ended early; message names expected vs available bytes."""


class RangeError(XegoError):
    """A stored value is outside its documented range."""


class WriteError(XegoError):
    """Sink failure; carries the byte offset reached."""

    def __init__(self, offset: int, cause: Exception):
        super().__init__(f"write failed at byte offset {offset}: {cause}")
        self.offset = offset


def header_size(map_name: str) -> int:
    return _FIXED_HEADER.size + 2 + len(map_name.encode("utf-8"))


class _CountingWriter:
    def __init__(self, sink: BinaryIO):
        self.sink = sink
        self.offset = 0

    def write(self, payload: bytes) -> None:
        try:
            self.sink.write(payload)
        except OSError as exc:
            raise WriteError(self.offset, exc) from exc
        self.offset += len(payload)


def _validate_round(r: TrajectoryRound) -> None:
    if r.pos.shape != (r.n_ticks, N_AGENTS, 2):
        raise DomainError(f"pos shape {r.pos.shape} does not match n_ticks {r.n_ticks}")
    for name, val in (("tickrate", r.tickrate), ("n_ticks", r.n_ticks)):
        if val < 0:
            raise DomainError(f"{name} must be non-negative")
    if r.tickrate > 0xFFFF:
        raise DomainError(f"tickrate {r.tickrate} exceeds u16")
    for name, val in (("round_id", r.round_id), ("match_id", r.match_id)):
        if not (0 <= val <= 0xFFFFFFFF):
            raise DomainError(f"{name} {val} exceeds u32")
    if int(r.area_id.max(initial=0)) >= N_AREAS:
        raise DomainError(f"area_id {int(r.area_id.max())} out of range")
    for ev in r.events:
        if ev.kind not in _KIND_CODE:
            raise DomainError(f"unknown event kind {ev.kind!r}")
        if len(ev.affected) > N_AGENTS or any(not 0 <= a < N_AGENTS for a in ev.affected):
            raise DomainError(f"bad affected list {ev.affected}")


def write_round(round_: TrajectoryRound, sink: BinaryIO) -> int:
    """Serialize a round; returns the total byte count written."""
    _validate_round(round_)
    w = _CountingWriter(sink)
    name_bytes = round_.map_name.encode("utf-8")
    if len(name_bytes) > 0xFFFF:
        raise DomainError("map_name too long")
    w.write(
        _FIXED_HEADER.pack(
            MAGIC,
            VERSION,
            round_.tickrate,
            round_.n_ticks,
            N_AGENTS,
            len(round_.events),
            round_.round_id,
            round_.match_id,
        )
    )
    w.write(struct.pack("<H", len(name_bytes)))
    w.write(name_bytes)

    for t in range(round_.n_ticks):
        parts = []
        for i in range(N_AGENTS):
            parts.append(
                AGENT_RECORD.pack(
                    float(round_.pos[t, i, 0]),
                    float(round_.pos[t, i, 1]),
                    float(round_.facing[t, i]),
                    int(round_.area_id[t, i]),
                    int(round_.blind[t, i]),
                )
            )
        w.write(b"".join(parts))

    for ev in round_.events:
        w.write(
            _EVENT_HEAD.pack(
                ev.tick,
                _KIND_CODE[ev.kind],
                float(ev.origin[0]),
                float(ev.origin[1]),
                len(ev.affected),
            )
        )
        if ev.affected:
            w.write(bytes(ev.affected))
    return w.offset


def _read_exact(source: BinaryIO, n: int, what: str, offset: int) -> bytes:
    data = source.read(n)
    if len(data) != n:
        raise TruncationError(
            f"truncated while reading {what} at offset {offset}: "
            f"expected {n} bytes, got {len(data)}"
        )
    return data


def read_round(source: BinaryIO) -> TrajectoryRound:
    """Parse and fully validate a round; raises before any partial result."""
    offset = 0
    head = _read_exact(source, _FIXED_HEADER.size, "header", offset)
    offset += len(head)
    magic, version, tickrate, n_ticks, n_agents, n_events, round_id, match_id = (
        _FIXED_HEADER.unpack(head)
    )
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionError(f"unsupported version {version}, expected {VERSION}")
    if n_agents != N_AGENTS:
        raise FormatError(f"n_agents {n_agents}, expected {N_AGENTS}")

    name_len = struct.unpack("<H", _read_exact(source, 2, "map_name length", offset))[0]
    offset += 2
    try:
        map_name = _read_exact(source, name_len, "map_name", offset).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"map_name is not valid UTF-8: {exc}") from exc
    offset += name_len

    pos = np.zeros((n_ticks, N_AGENTS, 2), dtype=np.float32)
    facing = np.zeros((n_ticks, N_AGENTS), dtype=np.float32)
    area = np.zeros((n_ticks, N_AGENTS), dtype=np.uint8)
    blind = np.zeros((n_ticks, N_AGENTS), dtype=np.uint8)
    for t in range(n_ticks):
        rec = _read_exact(source, TICK_RECORD_SIZE, f"tick record {t}", offset)
        offset += TICK_RECORD_SIZE
        for i in range(N_AGENTS):
            x, y, f, aid, bl = AGENT_RECORD.unpack_from(rec, i * AGENT_RECORD.size)
            if aid >= N_AREAS:
                raise RangeError(f"area_id {aid} >= {N_AREAS} at tick {t}, agent {i}")
            if bl > 1:
                raise RangeError(f"blind flag {bl} at tick {t}, agent {i}")
            pos[t, i] = (x, y)
            facing[t, i] = f
            area[t, i] = aid
            blind[t, i] = bl

    events: list[Event] = []
    for k in range(n_events):
        head = _read_exact(source, _EVENT_HEAD.size, f"event {k}", offset)
        offset += _EVENT_HEAD.size
        tick, kind_code, ox, oy, count = _EVENT_HEAD.unpack(head)
        if kind_code >= len(EVENT_KINDS):
            raise FormatError(f"unknown event kind code {kind_code}")
        if count > N_AGENTS:
            raise RangeError(f"event {k} affected count {count} > {N_AGENTS}")
        ids = _read_exact(source, count, f"event {k} ids", offset)
        offset += count
        if any(b >= N_AGENTS for b in ids):
            raise RangeError(f"event {k} has agent id >= {N_AGENTS}")
        events.append(
            Event(tick=tick, kind=EVENT_KINDS[kind_code], origin=(ox, oy), affected=tuple(ids))
        )

    return TrajectoryRound(
        round_id=round_id,
        match_id=match_id,
        tickrate=tickrate,
        n_ticks=n_ticks,
        map_name=map_name,
        pos=pos,
        facing=facing,
        area_id=area,
        blind=blind,
        events=events,
    )


def write_round_file(round_: TrajectoryRound, path) -> int:
    with open(path, "wb") as fh:
        return write_round(round_, fh)


def read_round_file(path) -> TrajectoryRound:
    with open(path, "rb") as fh:
        return read_round(fh)


def inspect_file(path) -> dict:
    """Header and event summary as a JSON-friendly dict."""
    r = read_round_file(path)
    kinds: dict[str, int] = {}
    for ev in r.events:
        kinds[ev.kind] = kinds.get(ev.kind, 0) + 1
    return {
        "path": str(Path(path)),
        "version": VERSION,
        "map_name": r.map_name,
        "round_id": r.round_id,
        "match_id": r.match_id,
        "tickrate": r.tickrate,
        "n_ticks": r.n_ticks,
        "n_agents": N_AGENTS,
        "n_events": len(r.events),
        "events_by_kind": kinds,
        "duration_s": r.n_ticks / r.tickrate if r.tickrate else None,
    }


def round_to_bytes(round_: TrajectoryRound) -> bytes:
    buf = io.BytesIO()
    write_round(round_, buf)
    return buf.getvalue()


def round_from_bytes(data: bytes) -> TrajectoryRound:
    return read_round(io.BytesIO(data))


def inspect_json(path) -> str:
    return json.dumps(inspect_file(path), indent=2, sort_keys=True)
