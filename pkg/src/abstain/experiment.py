"""Glue between the modules: prepare tuples, train one head, score and
evaluate, and run the exposure x method x scenario grid."""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import model as M
from .config import RunConfig
from .corpus import EmbeddingStore, Split, assign_splits, synth_corpus
from .evalx import (
    Method,
    MetricReport,
    Scenario,
    Thresholds,
    calibrate,
    evaluate,
    knn_reference,
    scenario_rows,
    score,
)
from .loss import Head
from .pairing import Exposure, TupleSet, assemble_tuples, positive_matches
from .train import FitResult, fit

log = logging.getLogger(__name__)

EXPOSURES = [e.value for e in Exposure]
METHODS = [m.value for m in Method]
SCENARIOS = [s.value for s in Scenario]


def build_store(cfg: RunConfig) -> EmbeddingStore:
    cfg = cfg.resolved()
    return assign_splits(synth_corpus(cfg.synth), cfg.split_fractions, cfg.seed)


def ensure_splits(store: EmbeddingStore, cfg: RunConfig) -> EmbeddingStore:
    if np.any(store.splits != Split.UNASSIGNED):
        return store
    return assign_splits(store, cfg.split_fractions, cfg.seed)


def prepare(store: EmbeddingStore, cfg: RunConfig, exposure: str | None = None) -> tuple[TupleSet, TupleSet]:
    pairing = cfg.pairing if exposure is None else replace(cfg.pairing, exposure=Exposure(exposure))
    matches = positive_matches(store)
    return (
        assemble_tuples(store, Split.TRAIN, pairing, matches),
        assemble_tuples(store, Split.VAL, pairing, matches),
    )


def train_head(store: EmbeddingStore, cfg: RunConfig, exposure: str | None = None, head: str | None = None) -> FitResult:
    cfg = cfg.resolved()
    if exposure is not None:
        cfg = replace(cfg, pairing=replace(cfg.pairing, exposure=Exposure(exposure)))
    if head is not None:
        cfg = replace(cfg, loss=replace(cfg.loss, head=Head(head)))
    train_set, val_set = prepare(store, cfg)
    return fit(store, train_set, val_set, cfg.loss, cfg.train, config_hash=cfg.hash())


def method_for(head: Head | str) -> Method:
    return Method.EBM if Head(head) is Head.EBM else Method.SOFTMAX


def score_rows(store: EmbeddingStore, method: Method | str, source, rows: np.ndarray) -> np.ndarray:
    return score(method, source, store.vectors[rows].astype(np.float64))


def calibrate_and_evaluate(
    store: EmbeddingStore, method: Method | str, source, config_name: str, seed: int, scenarios=SCENARIOS
) -> tuple[list[MetricReport], dict[str, Thresholds]]:
    """Calibrate on the val split per scenario, then report on test."""
    method = Method(method)
    reports, thresholds = [], {}
    for sc in scenarios:
        v_rows, v_lab = scenario_rows(store, Split.VAL, sc)
        th = calibrate(score_rows(store, method, source, v_rows), v_lab)
        t_rows, t_lab = scenario_rows(store, Split.TEST, sc)
        rep = evaluate(score_rows(store, method, source, t_rows), t_lab, th, method.value, config_name, sc, seed)
        reports.append(rep)
        thresholds[sc] = th
    return reports, thresholds


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("ABSTAIN_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class CellResult:
    exposure: str
    head: str
    fit: FitResult | None
    reports: list[MetricReport]
    error: str = ""


def _run_cell(store, cfg, exposure, head) -> CellResult:
    try:
        result = train_head(store, cfg, exposure, head)
        reports, _ = calibrate_and_evaluate(store, method_for(head), result.best.params, exposure, cfg.seed)
        return CellResult(exposure, head, result, reports)
    except Exception as exc:  # recorded in the partial-failure manifest
        log.exception("grid cell %s/%s failed", exposure, head)
        return CellResult(exposure, head, None, [], f"{type(exc).__name__}: {exc}")


def ablation_grid(
    store: EmbeddingStore, cfg: RunConfig, exposures=EXPOSURES, heads=("ebm", "softmax")
) -> tuple[list[MetricReport], list[CellResult]]:
    """Every exposure config x {EBM, softmax, kNN} x {hard, easy, mixed}.

    kNN needs no training, so it is scored once and its reports are copied
    into every exposure row.
    """
    cfg = cfg.resolved()
    jobs = [(e, h) for e in exposures for h in heads]
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        cells = list(pool.map(lambda j: _run_cell(store, cfg, *j), jobs))
    knn, _ = calibrate_and_evaluate(store, Method.KNN, knn_reference(store), "", cfg.seed)
    reports = []
    for e in exposures:
        for c in cells:
            if c.exposure == e:
                reports.extend(c.reports)
        reports.extend(replace(r, config=e) for r in knn)
    return reports, cells


# ---------------------------------------------------------------- outputs


def write_reports(reports: list[MetricReport], out: Path, stem: str = "grid") -> None:
    out.mkdir(parents=True, exist_ok=True)
    rows = [r.to_dict() for r in reports]
    (out / f"{stem}.json").write_text(json.dumps(jsonable(rows), indent=1))
    if rows:
        with open(out / f"{stem}.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


def write_plot_data(reports: list[MetricReport], out: Path) -> None:
    """FPR@95 per (config, method) on hard OOD, and DetErr per method for
    the all-negatives config."""
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "plot_fpr95_hard.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "method", "fpr_at_95"])
        for r in reports:
            if r.scenario == Scenario.HARD.value:
                w.writerow([r.config, r.method, r.fpr_at_95])
    with open(out / "plot_deterr_all.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "scenario", "det_err"])
        for r in reports:
            if r.config == Exposure.ALL.value:
                w.writerow([r.method, r.scenario, r.det_err])


def jsonable(obj):
    """Copy of ``obj`` with non-finite floats written as strings ('inf')."""
    if isinstance(obj, dict):
        return {k: jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


def lookup(reports: list[MetricReport], config: str, method: str, scenario: str) -> MetricReport:
    for r in reports:
        if r.config == config and r.method == method and r.scenario == scenario:
            return r
    raise KeyError((config, method, scenario))


# -------------------------------------------------------------- orderings


@dataclass(frozen=True)
class OrderingCheck:
    name: str
    passed: bool
    detail: str


def _auroc(reports, config, method, scenario) -> float:
    return lookup(reports, config, method, scenario).auroc


def check_orderings(reports: list[MetricReport], margin: float = 0.01) -> list[OrderingCheck]:
    """The qualitative grid orderings the method is expected to reproduce.

    Each check compares cells of one grid; ``margin`` is the minimum AUROC
    gap where a strict ordering is required.
    """
    ebm, soft, knn = Method.EBM.value, Method.SOFTMAX.value, Method.KNN.value
    out = []

    e_hard = lookup(reports, "all", ebm, "hard")
    s_hard = lookup(reports, "all", soft, "hard")
    ok = e_hard.auroc >= s_hard.auroc + margin and e_hard.det_err < s_hard.det_err
    out.append(OrderingCheck(
        "ebm_beats_softmax_on_hard", ok,
        f"AUROC {e_hard.auroc:.3f} vs {s_hard.auroc:.3f}, DetErr {e_hard.det_err:.3f} vs {s_hard.det_err:.3f}",
    ))

    drops = {m: _auroc(reports, "all", m, "easy") - _auroc(reports, "hard_only", m, "easy") for m in (ebm, soft)}
    out.append(OrderingCheck(
        "hard_only_collapses_easy", all(d >= 0.15 for d in drops.values()),
        ", ".join(f"{m} easy drop {d:.3f}" for m, d in drops.items()),
    ))

    vals = {(c, m): _auroc(reports, c, m, "hard") for c in ("easy_only", "no_hard") for m in (ebm, soft)}
    out.append(OrderingCheck(
        "no_hard_collapses_hard", all(v <= 0.65 for v in vals.values()),
        ", ".join(f"{c}/{m} hard {v:.3f}" for (c, m), v in vals.items()),
    ))

    k_easy, k_hard = _auroc(reports, "all", knn, "easy"), _auroc(reports, "all", knn, "hard")
    rows = {c: [(r.scenario, r.auroc, r.aupr, r.fpr_at_95, r.det_err) for r in reports if r.config == c and r.method == knn]
            for c in {r.config for r in reports}}
    constant = len({tuple(v) for v in rows.values()}) == 1
    out.append(OrderingCheck(
        "knn_easy_high_hard_lower", k_easy >= 0.97 and k_hard <= k_easy - 0.05 and constant,
        f"easy {k_easy:.3f}, hard {k_hard:.3f}, constant across configs: {constant}",
    ))

    he, al = _auroc(reports, "hard_easy", ebm, "mixed"), _auroc(reports, "all", ebm, "mixed")
    out.append(OrderingCheck(
        "hard_easy_recovers_mixed", abs(he - al) <= 0.02, f"mixed {he:.3f} vs all {al:.3f}",
    ))
    return out
