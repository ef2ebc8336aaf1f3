"""Embedding store, EMB1 file format, synthetic corpora and split assignment."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import DuplicateId, EmptySplit, FormatError, InfeasibleGeometry, NormError
from .rng import stream

log = logging.getLogger(__name__)

MAGIC = b"EMB1"


class Role(IntEnum):
    ANCHOR = 0
    POSITIVE_POOL = 1
    HARD_NEGATIVE = 2
    MID_POOL = 3
    EASY_OOD = 4
    RESERVE = 5

    @property
    def label(self) -> str:
        return self.name.lower().replace("_", "-")

    @classmethod
    def parse(cls, s: str) -> "Role":
        return cls[s.upper().replace("-", "_")]


class Split(IntEnum):
    UNASSIGNED = 0
    TRAIN = 1
    VAL = 2
    TEST = 3

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, s: str) -> "Split":
        return cls[s.upper()]


@dataclass(frozen=True)
class EmbeddingStore:
    """Unit-norm float32 vectors with per-row id, role, split and group.

    ``group`` ties an anchor to its positive and hard negative (all three
    carry the anchor's id); it is empty for pool items.
    """

    ids: tuple[str, ...]
    vectors: np.ndarray
    roles: np.ndarray
    splits: np.ndarray
    groups: tuple[str, ...] = ()

    def __post_init__(self):
        n = len(self.ids)
        if not self.groups:
            object.__setattr__(self, "groups", ("",) * n)
        if self.vectors.shape[0] != n or len(self.roles) != n or len(self.splits) != n:
            raise FormatError("store columns have different lengths")
        if len(set(self.ids)) != n:
            raise DuplicateId("record ids are not unique")
        self.vectors.setflags(write=False)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def where(self, role: Role | None = None, split: Split | None = None) -> np.ndarray:
        keep = np.ones(len(self), dtype=bool)
        if role is not None:
            keep &= self.roles == role
        if split is not None:
            keep &= self.splits == split
        return np.flatnonzero(keep)

    def role_counts(self) -> dict[str, int]:
        return {r.label: int(np.sum(self.roles == r)) for r in Role}

    def split_counts(self) -> dict[str, int]:
        return {s.label: int(np.sum(self.splits == s)) for s in Split}

    def index_of(self) -> dict[str, int]:
        return {k: i for i, k in enumerate(self.ids)}

    def with_splits(self, splits: np.ndarray) -> "EmbeddingStore":
        return replace(self, splits=np.asarray(splits, dtype=np.int8))


# --------------------------------------------------------------------- EMB1 io


def save_embeddings(store: EmbeddingStore, path: str | Path) -> None:
    """Write ``store`` as EMB1: header, f32 rows, then a JSON-lines trailer."""
    rows, dim = store.vectors.shape
    trailer = "".join(
        json.dumps(_row_meta(store, i), separators=(",", ":")) + "\n" for i in range(rows)
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", rows, dim))
        fh.write(np.ascontiguousarray(store.vectors, dtype="<f4").tobytes())
        fh.write(struct.pack("<Q", len(trailer)))
        fh.write(trailer)


def _row_meta(store: EmbeddingStore, i: int) -> dict:
    meta = {
        "id": store.ids[i],
        "role": Role(store.roles[i]).label,
        "split": Split(store.splits[i]).label,
    }
    if store.groups[i]:
        meta["group"] = store.groups[i]
    return meta


def load_embeddings(path: str | Path) -> EmbeddingStore:
    """Read an EMB1 file.

    Rows already unit-norm to f32 precision are kept bit for bit; other rows
    with norm in [0.5, 2.0] are rescaled, anything outside raises NormError.
    """
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    rows, dim = struct.unpack_from("<II", data, 4)
    body = 12 + 4 * rows * dim
    if len(data) < body + 8:
        raise FormatError(f"{path}: truncated matrix ({len(data)} bytes)")
    vectors = np.frombuffer(data, dtype="<f4", count=rows * dim, offset=12)
    vectors = vectors.reshape(rows, dim).astype(np.float32)
    (tlen,) = struct.unpack_from("<Q", data, body)
    if len(data) != body + 8 + tlen:
        raise FormatError(f"{path}: trailer length {tlen} does not match file size")
    try:
        lines = data[body + 8 :].decode("utf-8").splitlines()
        metas = [json.loads(line) for line in lines if line]
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad trailer: {exc}") from exc
    if len(metas) != rows:
        raise FormatError(f"{path}: {len(metas)} trailer rows for {rows} vectors")

    norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
    bad = np.flatnonzero((norms < 0.5) | (norms > 2.0))
    if bad.size:
        raise NormError(f"{path}: {bad.size} rows with norm outside [0.5, 2.0], e.g. row {bad[0]}")
    off = np.abs(norms - 1.0) > 1e-6
    if np.any(off):
        if np.any(np.abs(norms - 1.0) > 1e-3):
            log.warning("%s: rescaling %d rows that are not unit norm", path, int(off.sum()))
        vectors[off] = (vectors[off] / norms[off, None]).astype(np.float32)

    try:
        return EmbeddingStore(
            ids=tuple(str(m["id"]) for m in metas),
            vectors=vectors,
            roles=np.array([Role.parse(m["role"]) for m in metas], dtype=np.int8),
            splits=np.array([Split.parse(m.get("split", "unassigned")) for m in metas], dtype=np.int8),
            groups=tuple(str(m.get("group", "")) for m in metas),
        )
    except KeyError as exc:
        raise FormatError(f"{path}: bad trailer field {exc}") from exc


# ----------------------------------------------------------------- synthesis


@dataclass(frozen=True)
class SynthSpec:
    """Geometry of a synthetic corpus.

    ID anchors sit at an angle drawn from ``anchor_spread`` around one of
    ``n_id_clusters`` centres. Each hard negative stays at its anchor's angle
    from the centre but is rotated by exactly ``hard_perturbation_angle``,
    partly towards a low-rank confusion subspace owned by the cluster
    (``confusion_rank``; ``confusion_strength`` sets how much of the rotation
    goes there). Easy OOD items live in separate caps at least
    ``easy_ood_separation_angle`` from every ID centre; each cap centre sits
    at least ``ood_tilt`` radians from the mean ID direction, so easy OOD
    shares some generic structure with the ID clusters without sitting near
    any of them.
    Mid-pool and reserve items have a cosine to their centre inside
    ``mid_band``.
    """

    dim: int = 1024
    n_id_clusters: int = 5
    n_anchors: int = 2000
    hard_perturbation_angle: float = 0.35
    easy_ood_separation_angle: float = 1.2
    mid_band: tuple[float, float] = (0.5, 0.8)
    seed: int = 42
    n_easy_ood: int = 2000
    n_mid: int = 4000
    reserve_fraction: float = 0.25
    anchor_spread: tuple[float, float] = (0.3, 0.5)
    n_ood_clusters: int = 5
    ood_spread: float = 0.5
    confusion_rank: int = 4
    confusion_strength: float = 1.0
    ood_tilt: float = 0.8

    def validate(self) -> None:
        if self.dim < 8:
            raise InfeasibleGeometry(f"dim must be >= 8, got {self.dim}")
        if not 0 < self.hard_perturbation_angle < self.easy_ood_separation_angle < np.pi / 2:
            raise InfeasibleGeometry("need 0 < hard angle < easy separation < pi/2")
        lo, hi = self.mid_band
        if not -1 <= lo < hi <= 1:
            raise InfeasibleGeometry(f"bad mid band {self.mid_band}")
        a_lo, a_hi = self.anchor_spread
        if not self.hard_perturbation_angle / 2 < a_lo <= a_hi < np.pi / 2:
            raise InfeasibleGeometry("anchor spread must exceed half the hard angle")
        if self.n_anchors < 1 or self.n_id_clusters < 1:
            raise InfeasibleGeometry("need at least one cluster and one anchor")
        if not 0 < self.ood_tilt <= np.pi / 2:
            raise InfeasibleGeometry(f"ood_tilt must lie in (0, pi/2], got {self.ood_tilt}")
        if self.confusion_rank + self.n_id_clusters + 2 > self.dim:
            raise InfeasibleGeometry("confusion subspace does not fit in dim")


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _tangent(rng: np.random.Generator, base: np.ndarray) -> np.ndarray:
    """Random unit vectors orthogonal to the matching rows of ``base``."""
    g = rng.standard_normal(base.shape)
    g -= base * np.sum(g * base, axis=1, keepdims=True)
    return _unit(g)


def _rotate(base: np.ndarray, direction: np.ndarray, angle) -> np.ndarray:
    angle = np.asarray(angle, dtype=np.float64).reshape(-1, 1)
    return np.cos(angle) * base + np.sin(angle) * direction


def _ood_centres(spec: SynthSpec, rng, id_centres: np.ndarray) -> np.ndarray:
    need = np.cos(spec.easy_ood_separation_angle)
    mean = _unit(id_centres.sum(axis=0))
    out = []
    for attempt in range(200 * spec.n_ood_clusters):
        # few clusters put the mean close to every centre; widen the tilt then
        tilt = min(np.pi / 2, spec.ood_tilt + 0.05 * (attempt // 20))
        r = rng.standard_normal(spec.dim)
        r = _unit(r - mean * (r @ mean))
        c = np.cos(tilt) * mean + np.sin(tilt) * r
        if np.max(id_centres @ c) <= need:
            out.append(c)
            if len(out) == spec.n_ood_clusters:
                return np.array(out)
    raise InfeasibleGeometry(
        f"could not place {spec.n_ood_clusters} OOD caps {spec.easy_ood_separation_angle} rad "
        f"from {spec.n_id_clusters} ID clusters in dim {spec.dim} at tilt {spec.ood_tilt}"
    )


def synth_corpus(spec: SynthSpec) -> EmbeddingStore:
    """Generate a labelled corpus; identical output for identical ``spec``."""
    spec.validate()
    rng = stream(spec.seed, "synth")
    d, k = spec.dim, spec.n_id_clusters
    centres = _unit(rng.standard_normal((k, d)))
    confusion = rng.standard_normal((k, spec.confusion_rank, d))

    n = spec.n_anchors
    cluster = np.arange(n) % k
    c = centres[cluster]
    alpha = rng.uniform(*spec.anchor_spread, size=n)
    u = _tangent(rng, c)
    anchors = _rotate(c, u, alpha)

    pos = _rotate(anchors, _tangent(rng, anchors), rng.uniform(0.0, 0.5, size=n) * spec.hard_perturbation_angle)

    # Same latitude around the centre, rotated by exactly the hard angle.
    theta = spec.hard_perturbation_angle
    rho = (np.cos(theta) - np.cos(alpha) ** 2) / np.sin(alpha) ** 2
    coef = rng.standard_normal((n, spec.confusion_rank))
    pull = _unit(np.einsum("nr,nrd->nd", coef, confusion[cluster]))
    w = spec.confusion_strength * pull + _unit(rng.standard_normal((n, d)))
    for basis in (c, u):
        w -= basis * np.sum(w * basis, axis=1, keepdims=True)
    w = _unit(w)
    u_hard = rho[:, None] * u + np.sqrt(1.0 - rho**2)[:, None] * w
    hard = _rotate(c, u_hard, alpha)

    m = spec.n_mid
    m_cluster = np.arange(m) % k
    mc = centres[m_cluster]
    m_cos = rng.uniform(*spec.mid_band, size=m)
    mid = _rotate(mc, _tangent(rng, mc), np.arccos(m_cos))
    n_reserve = int(round(spec.reserve_fraction * m))

    ood_c = _ood_centres(spec, rng, centres)
    o = spec.n_easy_ood
    oc = ood_c[np.arange(o) % spec.n_ood_clusters]
    easy = _rotate(oc, _tangent(rng, oc), rng.uniform(0.0, spec.ood_spread, size=o))
    limit = np.cos(spec.easy_ood_separation_angle)
    for _ in range(100):
        bad = np.flatnonzero(np.max(easy @ centres.T, axis=1) > limit) if o else []
        if len(bad) == 0:
            break
        easy[bad] = _rotate(oc[bad], _tangent(rng, oc[bad]), rng.uniform(0.0, spec.ood_spread, size=len(bad)))
    else:
        raise InfeasibleGeometry("easy OOD samples keep falling inside the separation angle")

    vectors = np.concatenate([anchors, pos, hard, mid, easy])
    vectors = _unit(vectors).astype(np.float32)
    roles = np.concatenate(
        [
            np.full(n, Role.ANCHOR),
            np.full(n, Role.POSITIVE_POOL),
            np.full(n, Role.HARD_NEGATIVE),
            np.where(np.arange(m) < m - n_reserve, Role.MID_POOL, Role.RESERVE),
            np.full(o, Role.EASY_OOD),
        ]
    ).astype(np.int8)
    anchor_ids = [f"a{i:06d}" for i in range(n)]
    ids = (
        anchor_ids
        + [f"p{i:06d}" for i in range(n)]
        + [f"h{i:06d}" for i in range(n)]
        + [("m" if i < m - n_reserve else "r") + f"{i:06d}" for i in range(m)]
        + [f"o{i:06d}" for i in range(o)]
    )
    groups = anchor_ids * 3 + [""] * (m + o)
    return EmbeddingStore(
        ids=tuple(ids),
        vectors=vectors,
        roles=roles,
        splits=np.zeros(len(ids), dtype=np.int8),
        groups=tuple(groups),
    )


# -------------------------------------------------------------------- splits


def _split_sizes(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    n_val = int(np.floor(fractions[1] * n + 0.5))
    n_test = int(np.floor(fractions[2] * n + 0.5))
    return n - n_val - n_test, n_val, n_test


def assign_splits(
    store: EmbeddingStore, fractions: tuple[float, float, float] = (0.8, 0.1, 0.1), seed: int = 42
) -> EmbeddingStore:
    """Partition anchor groups into train/val/test.

    An anchor's positive and hard negative follow it. Val and test each get
    as many easy-OOD items as they have anchors (capped by supply); every
    other pool item stays unassigned.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1: {fractions}")
    anchors = store.where(Role.ANCHOR)
    order = stream(seed, "splits").permutation(anchors.size)
    sizes = _split_sizes(anchors.size, fractions)
    for name, size, frac in zip(("train", "val", "test"), sizes, fractions):
        if frac > 0 and size == 0:
            raise EmptySplit(f"split {name} received no anchors")

    group_split: dict[str, int] = {}
    bounds = np.cumsum((0,) + sizes)
    for s, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:]), start=1):
        for i in anchors[order[lo:hi]]:
            group_split[store.groups[i] or store.ids[i]] = s

    splits = np.zeros(len(store), dtype=np.int8)
    for i, g in enumerate(store.groups):
        if store.roles[i] in (Role.ANCHOR, Role.POSITIVE_POOL, Role.HARD_NEGATIVE):
            key = g or store.ids[i]
            splits[i] = group_split.get(key, Split.UNASSIGNED)

    easy = store.where(Role.EASY_OOD)
    easy = easy[stream(seed, "easy-splits").permutation(easy.size)]
    n_val = min(sizes[1], easy.size)
    n_test = min(sizes[2], easy.size - n_val)
    splits[easy[:n_val]] = Split.VAL
    splits[easy[n_val : n_val + n_test]] = Split.TEST
    return store.with_splits(splits)
