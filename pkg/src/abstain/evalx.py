"""Abstention scores, ranking metrics and threshold calibration.

Scores are oriented so that higher means "more OOD, abstain". Labels are
booleans with True for OOD (the positive class). A query is abstained on
when its score is strictly greater than the threshold.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np
from scipy.stats import rankdata

from . import model as M
from .corpus import EmbeddingStore, Role, Split
from .errors import IndexTooSmall, SingleClass

KNN_K = 5


class Method(str, Enum):
    EBM = "ebm_energy"
    SOFTMAX = "softmax_prob"
    KNN = "knn"


class Scenario(str, Enum):
    HARD = "hard"
    EASY = "easy"
    MIXED = "mixed"


# ---------------------------------------------------------------- scoring


def knn_score(reference: np.ndarray, x: np.ndarray, k: int = KNN_K) -> np.ndarray:
    """``1 - s_k`` with ``s_k`` the k-th largest cosine to the reference rows."""
    reference = np.asarray(reference, dtype=np.float64)
    if reference.shape[0] < k:
        raise IndexTooSmall(f"reference set has {reference.shape[0]} rows, need k={k}")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    out = np.empty(x.shape[0])
    for lo in range(0, x.shape[0], 2048):
        sim = x[lo : lo + 2048] @ reference.T
        kth = np.partition(sim, sim.shape[1] - k, axis=1)[:, sim.shape[1] - k]
        out[lo : lo + 2048] = 1.0 - kth
    return out


def score(method: Method | str, source, x: np.ndarray) -> np.ndarray:
    """Abstention scores for rows of ``x``.

    ``source`` is a parameter dict for the parametric methods, or the
    reference matrix for kNN.
    """
    method = Method(method)
    single = np.ndim(x) == 1
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if method is Method.KNN:
        out = knn_score(source, x)
    else:
        z = M.project(source, x)
        out = M.energy(source, z) if method is Method.EBM else M.ood_probability(source, z)
    return out[0] if single else out


def knn_reference(store: EmbeddingStore) -> np.ndarray:
    """Train-split anchors and positives, the in-domain kNN index."""
    rows = np.flatnonzero(
        (store.splits == Split.TRAIN) & np.isin(store.roles, (Role.ANCHOR, Role.POSITIVE_POOL))
    )
    return store.vectors[rows].astype(np.float64)


# ---------------------------------------------------------------- metrics


def _check(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ")
    if y.all() or not y.any():
        raise SingleClass("need both ID and OOD examples")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC, ties counted as one half."""
    s, y = _check(scores, labels)
    ranks = rankdata(s)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def aupr(scores, labels) -> float:
    """Step-wise average precision with equal scores taken as one block."""
    s, y = _check(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each equal-score block
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[ends]
    seen = ends + 1
    gained = np.diff(np.r_[0, tp])
    return float(np.sum(gained * (tp / seen)) / y.sum())


def rates_at(scores, labels, tau: float) -> tuple[float, float]:
    """(FPR, TPR) when abstaining on ``score > tau``."""
    s, y = _check(scores, labels)
    above = s > tau
    return float(above[~y].mean()), float(above[y].mean())


def det_err(fpr: float, tpr: float) -> float:
    return 0.5 * (fpr + (1.0 - tpr))


def candidate_thresholds(scores) -> np.ndarray:
    u = np.unique(np.asarray(scores, dtype=np.float64))
    return np.r_[-np.inf, (u[:-1] + u[1:]) / 2.0, np.inf]


def sweep(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Candidate thresholds with their FPR and TPR."""
    s, y = _check(scores, labels)
    taus = candidate_thresholds(s)
    neg = np.sort(s[~y])
    pos = np.sort(s[y])
    fpr = 1.0 - np.searchsorted(neg, taus, side="right") / neg.size
    tpr = 1.0 - np.searchsorted(pos, taus, side="right") / pos.size
    return taus, fpr, tpr


@dataclass(frozen=True)
class Thresholds:
    tau_deterr: float
    tau_95: float
    calibrated_on: str = "val"


def calibrate(scores, labels, calibrated_on: str = "val") -> Thresholds:
    """Pick the DetErr-minimising threshold and the one nearest 95% TPR.

    DetErr ties go to the lowest threshold; TPR ties prefer higher TPR, then
    lower FPR.
    """
    taus, fpr, tpr = sweep(scores, labels)
    err = 0.5 * (fpr + 1.0 - tpr)
    i_err = int(np.argmin(err))
    # rounding makes e.g. |0.9 - 0.95| and |1.0 - 0.95| compare equal
    gap = np.round(np.abs(tpr - 0.95), 12)
    i_95 = int(np.lexsort((fpr, -tpr, gap))[0])
    return Thresholds(float(taus[i_err]), float(taus[i_95]), calibrated_on)


@dataclass
class MetricReport:
    method: str
    config: str
    scenario: str
    auroc: float
    aupr: float
    fpr_at_95: float
    det_err: float
    tau_deterr: float
    tau_95: float
    n_id: int
    n_ood: int
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)


REPORT_SCHEMA = {
    "type": "object",
    "required": [
        "method", "config", "scenario", "auroc", "aupr", "fpr_at_95",
        "det_err", "tau_deterr", "tau_95", "n_id", "n_ood", "seed",
    ],
    "properties": {
        "method": {"enum": [m.value for m in Method]},
        "config": {"type": "string"},
        "scenario": {"enum": [s.value for s in Scenario]},
        "auroc": {"type": "number", "minimum": 0, "maximum": 1},
        "aupr": {"type": "number", "minimum": 0, "maximum": 1},
        "fpr_at_95": {"type": "number", "minimum": 0, "maximum": 1},
        "det_err": {"type": "number", "minimum": 0, "maximum": 1},
        "tau_deterr": {"type": ["number", "string"]},
        "tau_95": {"type": ["number", "string"]},
        "n_id": {"type": "integer", "minimum": 1},
        "n_ood": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
    },
}


def evaluate(
    scores, labels, thresholds: Thresholds, method: str = "", config: str = "", scenario: str = "hard", seed: int = 0
) -> MetricReport:
    """Threshold-free metrics plus FPR@95 and DetErr at frozen thresholds."""
    s, y = _check(scores, labels)
    fpr95, _ = rates_at(s, y, thresholds.tau_95)
    f, t = rates_at(s, y, thresholds.tau_deterr)
    return MetricReport(
        method=str(method),
        config=str(config),
        scenario=str(scenario),
        auroc=auroc(s, y),
        aupr=aupr(s, y),
        fpr_at_95=fpr95,
        det_err=det_err(f, t),
        tau_deterr=thresholds.tau_deterr,
        tau_95=thresholds.tau_95,
        n_id=int((~y).sum()),
        n_ood=int(y.sum()),
        seed=int(seed),
    )


# -------------------------------------------------------------- scenarios


def scenario_rows(store: EmbeddingStore, split: Split, scenario: Scenario | str) -> tuple[np.ndarray, np.ndarray]:
    """Store rows and OOD labels for one evaluation scenario on ``split``.

    ID is the split's anchors. Hard OOD is their paired hard negatives, easy
    OOD is the split's external pool truncated to the ID count, mixed is both.
    """
    scenario = Scenario(scenario)
    ids = store.where(Role.ANCHOR, split)
    groups = {store.groups[i] or store.ids[i] for i in ids}
    hard = np.array(
        [i for i in store.where(Role.HARD_NEGATIVE, split) if store.groups[i] in groups], dtype=np.int64
    )
    easy = store.where(Role.EASY_OOD, split)[: ids.size]
    ood = {Scenario.HARD: hard, Scenario.EASY: easy, Scenario.MIXED: np.r_[hard, easy]}[scenario]
    rows = np.r_[ids, ood].astype(np.int64)
    labels = np.r_[np.zeros(ids.size, dtype=bool), np.ones(ood.size, dtype=bool)]
    return rows, labels
