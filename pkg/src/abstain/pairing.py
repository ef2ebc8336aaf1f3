"""Training tuples: reciprocal-NN positives, banded pools, paired hard
negatives and per-epoch k_mine sampling with padding masks."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .corpus import EmbeddingStore, Role, Split
from .errors import MissingHardNegative
from .rng import stream

DUPLICATE_COS = 1.0 - 1e-9


class Exposure(str, Enum):
    """Which negative types a run is allowed to see."""

    ALL = "all"
    HARD_ONLY = "hard_only"
    EASY_ONLY = "easy_only"
    NO_HARD = "no_hard"
    NO_EASY = "no_easy"
    HARD_EASY = "hard_easy"

    @property
    def hard(self) -> bool:
        return self in (Exposure.ALL, Exposure.HARD_ONLY, Exposure.NO_EASY, Exposure.HARD_EASY)

    @property
    def easy(self) -> bool:
        return self in (Exposure.ALL, Exposure.EASY_ONLY, Exposure.NO_HARD, Exposure.HARD_EASY)

    @property
    def mid(self) -> bool:
        return self in (Exposure.ALL, Exposure.NO_HARD, Exposure.NO_EASY)


@dataclass(frozen=True)
class NegativeBand:
    lo: float
    hi: float

    def __post_init__(self):
        if not (-1.0 <= self.lo < self.hi <= 1.0):
            raise ValueError(f"invalid band [{self.lo}, {self.hi}]")


@dataclass(frozen=True)
class PairingConfig:
    exposure: Exposure = Exposure.ALL
    mid_band: tuple[float, float] = (0.5, 0.8)
    easy_band: tuple[float, float] = (-1.0, 0.3)
    k_mine: int = 8


@dataclass
class TrainingTuple:
    anchor: int
    positive: int
    hard_negative: int
    hard_valid: bool
    pool: np.ndarray
    mined: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    mined_mask: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


@dataclass
class TupleSet:
    """Tuples for one split plus the external OOD pool the hinge draws from."""

    tuples: list[TrainingTuple]
    ood_pool: np.ndarray
    exposure: Exposure

    def __len__(self) -> int:
        return len(self.tuples)

    def arrays(self):
        """Anchor, positive, hard-negative indices and hard-valid flags."""
        a = np.array([t.anchor for t in self.tuples], dtype=np.int64)
        p = np.array([t.positive for t in self.tuples], dtype=np.int64)
        h = np.array([t.hard_negative for t in self.tuples], dtype=np.int64)
        hv = np.array([t.hard_valid for t in self.tuples], dtype=bool)
        return a, p, h, hv

    def write_jsonl(self, path: str | Path, store: EmbeddingStore) -> None:
        ids = store.ids
        with open(path, "w", encoding="utf-8") as fh:
            for t in self.tuples:
                row = {
                    "anchor": ids[t.anchor],
                    "positive": ids[t.positive],
                    "hard_negative": ids[t.hard_negative] if t.hard_valid else None,
                    "pool_size": int(t.pool.size),
                    "pool_roles": {
                        r.label: int(np.sum(store.roles[t.pool] == r)) for r in Role if np.any(store.roles[t.pool] == r)
                    },
                    "mined": [ids[i] for i, ok in zip(t.mined, t.mined_mask) if ok],
                }
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def _top1(sim: np.ndarray, axis: int) -> np.ndarray:
    # lower index wins ties; argmax already returns the first maximum
    return np.argmax(sim, axis=axis)


def rnn_filter(vectors_a: np.ndarray, vectors_c: np.ndarray) -> list[tuple[int, int]]:
    """Mutual top-1 cosine pairs ``(i, j)`` between two row sets.

    Near-exact duplicates (cosine above 1 - 1e-9) are dropped.
    """
    A = np.asarray(vectors_a, dtype=np.float64)
    C = np.asarray(vectors_c, dtype=np.float64)
    if A.shape[0] == 0 or C.shape[0] == 0:
        return []
    sim = A @ C.T
    best_c = _top1(sim, axis=1)
    best_a = _top1(sim, axis=0)
    out = []
    for i, j in enumerate(best_c):
        if best_a[j] == i and sim[i, j] <= DUPLICATE_COS:
            out.append((i, int(j)))
    return out


def band_negatives(
    anchor: np.ndarray, pool_vectors: np.ndarray, band: NegativeBand, pool_ids=None
) -> np.ndarray:
    """Positions in ``pool_vectors`` whose cosine to ``anchor`` is inside ``band``.

    Ordered by descending cosine; ties go to the smaller id (or position).
    """
    pool_vectors = np.atleast_2d(np.asarray(pool_vectors, dtype=np.float64))
    keys = np.arange(pool_vectors.shape[0]) if pool_ids is None else np.asarray(pool_ids)
    return _band_select(np.asarray(anchor, dtype=np.float64)[None], pool_vectors, band, keys)[0]


def _band_select(A: np.ndarray, pool_vectors: np.ndarray, band: NegativeBand, pool_ids) -> list[np.ndarray]:
    """:func:`band_negatives` for every row of ``A`` at once."""
    cos = A @ np.asarray(pool_vectors, dtype=np.float64).T
    inside = (cos >= band.lo) & (cos <= band.hi)
    out = []
    for row, keep in zip(cos, inside):
        keep = np.flatnonzero(keep)
        out.append(keep[np.lexsort((pool_ids[keep], -row[keep]))])
    return out


def positive_matches(store: EmbeddingStore) -> dict[int, int]:
    """Anchor row -> RNN-filtered positive row, over the whole store."""
    anchors = store.where(Role.ANCHOR)
    cands = store.where(Role.POSITIVE_POOL)
    pairs = rnn_filter(store.vectors[anchors], store.vectors[cands])
    return {int(anchors[i]): int(cands[j]) for i, j in pairs}


def assemble_tuples(
    store: EmbeddingStore,
    split: Split,
    config: PairingConfig,
    matches: dict[int, int] | None = None,
) -> TupleSet:
    """One tuple per surviving anchor of ``split``, ordered by anchor row.

    Anchors without a reciprocal positive in the same split are dropped.
    Candidate pools hold only unassigned rows, so nothing that belongs to a
    train/val/test split can leak in as a mined negative.
    """
    if matches is None:
        matches = positive_matches(store)
    exposure = Exposure(config.exposure)
    unassigned = store.splits == Split.UNASSIGNED
    mid_rows = np.flatnonzero(unassigned & (store.roles == Role.MID_POOL))
    easy_rows = np.flatnonzero(unassigned & (store.roles == Role.EASY_OOD))
    reserve_rows = np.flatnonzero(unassigned & (store.roles == Role.RESERVE))

    hard_of: dict[str, int] = {}
    for i in store.where(Role.HARD_NEGATIVE):
        hard_of[store.groups[i]] = int(i)

    id_arr = np.asarray(store.ids)
    anchors = [int(a) for a in store.where(Role.ANCHOR, split)]
    anchors = [a for a in anchors if a in matches and store.splits[matches[a]] == split]
    A = store.vectors[anchors].astype(np.float64)
    mid_band = NegativeBand(*config.mid_band)
    easy_band = NegativeBand(*config.easy_band)
    mid_sel = _band_select(A, store.vectors[mid_rows], mid_band, id_arr[mid_rows]) if exposure.mid else None
    easy_sel = _band_select(A, store.vectors[easy_rows], easy_band, id_arr[easy_rows]) if exposure.easy else None

    tuples = []
    for n, a in enumerate(anchors):
        key = store.groups[a] or store.ids[a]
        h = hard_of.get(key)
        if h is None:
            raise MissingHardNegative(f"anchor {store.ids[a]} has no paired hard negative")
        parts = []
        if exposure.mid:
            parts.append(mid_rows[mid_sel[n]])
        if exposure.easy:
            parts.append(easy_rows[easy_sel[n]])
        if exposure.mid:
            parts.append(reserve_rows)
        pool = np.concatenate(parts).astype(np.int64) if parts else np.zeros(0, dtype=np.int64)
        tuples.append(TrainingTuple(a, matches[a], h, exposure.hard, pool))
    ood_pool = easy_rows.astype(np.int64) if exposure.easy else np.zeros(0, dtype=np.int64)
    return TupleSet(tuples, ood_pool, exposure)


def sample_k_mine(tup: TrainingTuple, k_mine: int, seed: int, epoch: int = 0) -> TrainingTuple:
    """Draw ``k_mine`` distinct pool items uniformly; pad with masked slots.

    The draw depends only on ``(seed, epoch, anchor)``.
    """
    if k_mine < 0:
        raise ValueError("k_mine must be non-negative")
    n = tup.pool.size
    mined = np.full(k_mine, tup.anchor, dtype=np.int64)
    mask = np.zeros(k_mine, dtype=bool)
    if n:
        take = min(n, k_mine)
        pick = stream(seed, "mine", epoch, tup.anchor).choice(n, size=take, replace=False)
        mined[:take] = tup.pool[np.sort(pick)]
        mask[:take] = True
    return replace(tup, mined=mined, mined_mask=mask)


def sample_all(tset: TupleSet, k_mine: int, seed: int, epoch: int) -> tuple[np.ndarray, np.ndarray]:
    """Mined index matrix and mask for every tuple, shape ``(n, k_mine)``."""
    rows = [sample_k_mine(t, k_mine, seed, epoch) for t in tset.tuples]
    if not rows:
        return np.zeros((0, k_mine), dtype=np.int64), np.zeros((0, k_mine), dtype=bool)
    return np.stack([r.mined for r in rows]), np.stack([r.mined_mask for r in rows])
