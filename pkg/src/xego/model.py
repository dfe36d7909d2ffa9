"""Model stack: frozen random feature extractor, trainable projector,
per-subset-size aggregators, team-side embedding, and nowcast heads.

The extractor maps each frame's feature vector through a fixed 2-layer
network and mean-pools over frames; that pooled vector is the only thing
the trainable stack sees, so it can be cached per segment. The projector
output is the contrastive embedding; its row-normalized form feeds the
pairwise loss while the raw form feeds the prediction heads.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from xego import ndmath as nd
from xego.errors import DomainError
from xego.objectives import ContrastiveParams
from xego.simcore import FEAT_WIDTH, N_AREAS

__all__ = [
    "ModelConfig",
    "FrozenExtractor",
    "ParamStore",
    "NowcastModel",
    "TASKS",
    "save_checkpoint",
    "load_checkpoint",
]

TASKS = ("tln", "eln")


@dataclass(frozen=True)
class ModelConfig:
    feat_width: int = FEAT_WIDTH
    d_h: int = 128
    d_enc: int = 128
    d_proj: int = 64
    d_agg: int = 128
    d_s: int = 16
    pov_sizes: tuple[int, ...] = (1, 2, 3, 4, 5)

    def validate(self) -> None:
        if any(d < 1 for d in (self.feat_width, self.d_h, self.d_enc, self.d_proj,
                               self.d_agg, self.d_s)):
            raise DomainError("model dims must be positive")
        if not self.pov_sizes or any(not 1 <= k <= 5 for k in self.pov_sizes):
            raise DomainError(f"pov_sizes must lie in 1..5, got {self.pov_sizes}")


class FrozenExtractor:
    """Fixed random 2-layer per-frame network, mean-pooled over frames.

    The pooled vector is RMS-normalized (a fixed per-sample rescale) so the
    trainable stack always sees O(1) inputs regardless of feature scales.
    """

    def __init__(self, cfg: ModelConfig, seed: int):
        rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xF402)))
        w, h, e = cfg.feat_width, cfg.d_h, cfg.d_enc
        # Small first-layer scale with positive biases keeps most units in
        # their linear region, so the random features stay information
        # preserving rather than shredding small-signal blocks at kinks.
        self.w1 = rng.normal(0.0, 0.35 / math.sqrt(w), size=(w, h))
        self.b1 = rng.uniform(0.5, 1.2, size=h)
        self.w2 = rng.normal(0.0, math.sqrt(2.0 / h), size=(h, e))
        self.b2 = rng.uniform(-0.1, 0.1, size=e)

    def extract(self, frames: np.ndarray) -> np.ndarray:
        """(B, T, feat_width) or (T, feat_width) -> pooled (B, d_enc) / (d_enc,)."""
        x = np.asarray(frames, dtype=np.float64)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        if x.ndim != 3 or x.shape[-1] != self.w1.shape[0]:
            raise DomainError(
                f"frames shape {frames.shape} incompatible with extractor width "
                f"{self.w1.shape[0]}"
            )
        hidden = np.maximum(x @ self.w1 + self.b1, 0.0)
        enc = hidden @ self.w2 + self.b2
        pooled = enc.mean(axis=1)
        rms = np.sqrt((pooled * pooled).mean(axis=1, keepdims=True)) + 1e-9
        pooled = pooled / rms
        return pooled[0] if squeeze else pooled

    def weights_hash(self) -> str:
        digest = hashlib.sha256()
        for arr in (self.w1, self.b1, self.w2, self.b2):
            digest.update(arr.tobytes())
        return digest.hexdigest()


class ParamStore:
    """All trainable tensors by name, in a fixed creation order."""

    def __init__(self):
        self.tensors: dict[str, nd.Tensor] = {}
        self.contrastive: ContrastiveParams | None = None

    def add(self, name: str, tensor: nd.Tensor) -> nd.Tensor:
        if name in self.tensors:
            raise DomainError(f"duplicate parameter {name}")
        self.tensors[name] = tensor
        return tensor

    def attach_contrastive(self, params: ContrastiveParams) -> None:
        self.contrastive = params
        self.tensors["contrastive.t_log"] = params.t_log
        self.tensors["contrastive.b"] = params.b

    def trainable(self, include_contrastive: bool = True) -> list[nd.Tensor]:
        out = []
        for name, t in self.tensors.items():
            if name.startswith("contrastive."):
                continue
            out.append(t)
        if include_contrastive and self.contrastive is not None:
            out.extend(self.contrastive.trainable())
        return out

    def matrices(self) -> list[nd.Tensor]:
        """Weight matrices (2-D), the group that receives weight decay."""
        return [
            t
            for name, t in self.tensors.items()
            if not name.startswith("contrastive.") and t.ndim == 2
        ]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.tensors) - set(arrays)
        if missing:
            raise DomainError(f"checkpoint missing parameters: {sorted(missing)}")
        for name, t in self.tensors.items():
            arr = arrays[name]
            if arr.shape != t.data.shape:
                raise DomainError(
                    f"checkpoint shape {arr.shape} vs model {t.data.shape} for {name}"
                )
            t.data = arr.astype(np.float64).copy()


def _init_linear(store, rng, name, fan_in, fan_out):
    bound = 1.0 / math.sqrt(fan_in)
    w = store.add(f"{name}.w", nd.tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out))))
    b = store.add(f"{name}.b", nd.tensor(rng.uniform(-bound, bound, size=fan_out)))
    return w, b


class NowcastModel:
    """Shared projector with per-size aggregators and per-size task heads."""

    def __init__(
        self,
        cfg: ModelConfig,
        seed: int,
        t_init: float = 10.0,
        b_init: float = -3.0,
        trainable_bias: bool = True,
    ):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.extractor = FrozenExtractor(cfg, seed)
        self.store = ParamStore()
        rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x1417)))
        _init_linear(self.store, rng, "proj.l1", cfg.d_enc, cfg.d_h)
        _init_linear(self.store, rng, "proj.l2", cfg.d_h, cfg.d_proj)
        for k in cfg.pov_sizes:
            _init_linear(self.store, rng, f"agg{k}.l1", k * cfg.d_proj, cfg.d_h)
            _init_linear(self.store, rng, f"agg{k}.l2", cfg.d_h, cfg.d_agg)
            for task in TASKS:
                _init_linear(self.store, rng, f"head_{task}{k}.l1", cfg.d_agg + cfg.d_s, cfg.d_h)
                _init_linear(self.store, rng, f"head_{task}{k}.l2", cfg.d_h, N_AREAS)
        self.store.add(
            "side.table",
            nd.tensor(rng.uniform(-1.0 / math.sqrt(cfg.d_s), 1.0 / math.sqrt(cfg.d_s),
                                  size=(2, cfg.d_s))),
        )
        self.store.attach_contrastive(
            ContrastiveParams.create(t_init=t_init, b_init=b_init, trainable_bias=trainable_bias)
        )

    # -- forward pieces ----------------------------------------------------

    def _mlp(self, x: nd.Tensor, name: str) -> nd.Tensor:
        t = self.store.tensors
        hidden = nd.relu(nd.add(nd.matmul(x, t[f"{name}.l1.w"]), t[f"{name}.l1.b"]))
        return nd.add(nd.matmul(hidden, t[f"{name}.l2.w"]), t[f"{name}.l2.b"])

    def project(self, pooled: nd.Tensor) -> tuple[nd.Tensor, nd.Tensor]:
        """Pooled extractor outputs -> (embedding, unit embedding)."""
        emb = self._mlp(pooled, "proj")
        return emb, nd.l2_normalize_rows(emb)

    def encode_segments(self, frames: np.ndarray) -> tuple[nd.Tensor, nd.Tensor]:
        """(B, T, feat_width) frame stacks -> (embeddings, unit rows)."""
        pooled = self.extractor.extract(frames)
        return self.project(nd.tensor(np.atleast_2d(pooled)))

    def encode(self, segment) -> tuple[np.ndarray, np.ndarray]:
        """One segment -> (embedding vector, unit vector), no recording."""
        emb, unit = self.encode_segments(segment.features[None])
        return emb.data[0].copy(), unit.data[0].copy()

    def predict_groups(
        self,
        embeddings: nd.Tensor,
        subsets: np.ndarray,
        team_idx: np.ndarray,
        task: str,
    ) -> nd.Tensor:
        """Logits for groups of embedding rows.

        ``subsets`` is (G, k) row indices in canonical (ascending agent id)
        order; ``team_idx`` is (G,) side indices into the side table.
        """
        if task not in TASKS:
            raise DomainError(f"unknown task {task!r}")
        subsets = np.asarray(subsets)
        if subsets.ndim != 2:
            raise DomainError(f"subsets must be (G, k), got {subsets.shape}")
        k = subsets.shape[1]
        if k not in self.cfg.pov_sizes:
            raise DomainError(f"no aggregator for subset size {k}")
        parts = [nd.gather_rows(embeddings, subsets[:, j]) for j in range(k)]
        stacked = parts[0] if k == 1 else nd.concat(parts, axis=1)
        agg = self._mlp(stacked, f"agg{k}")
        side = nd.gather_rows(self.store.tensors["side.table"], np.asarray(team_idx))
        combined = nd.concat([agg, side], axis=1)
        return self._mlp(combined, f"head_{task}{k}")

    def predict(self, embeddings: np.ndarray, team_side: int, task: str) -> np.ndarray:
        """Logits for one subset of same-team embeddings (canonical order)."""
        emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        if team_side not in (0, 1):
            raise DomainError(f"team_side must be 0 or 1, got {team_side}")
        subsets = np.arange(emb.shape[0])[None, :]
        logits = self.predict_groups(
            nd.tensor(emb), subsets, np.array([team_side]), task
        )
        return logits.data[0].copy()


# ---------------------------------------------------------------------------
# checkpoints: versioned binary of named tensors + JSON sidecar

_CKPT_MAGIC = b"XCKP"
_CKPT_VERSION = 1


def save_checkpoint(path, store: ParamStore, meta: dict) -> None:
    path = Path(path)
    arrays = store.state_arrays()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sHI", _CKPT_MAGIC, _CKPT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            blob = name.encode("utf-8")
            fh.write(struct.pack("<H", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.astype("<f8").tobytes())
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(meta, indent=2, sort_keys=True)
    )


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic, version, count = struct.unpack("<4sHI", fh.read(10))
        if magic != _CKPT_MAGIC:
            raise DomainError(f"bad checkpoint magic {magic!r}")
        if version != _CKPT_VERSION:
            raise DomainError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            n_items = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(fh.read(n_items * 8), dtype="<f8").reshape(shape).copy()
    sidecar = path.with_suffix(path.suffix + ".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return arrays, meta
