"""Command-line entry point.

Every command reads a JSON run config (``--config``), applies flag overrides,
writes the effective config beside its outputs and exits with a documented
code. Failures are reported on stderr as one JSON object.

Exit codes: 0 ok, 1 ordering assertion failed, 2 config error, 3 data error,
4 training divergence, 5 partial grid failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import experiment as X
from . import model as M
from .config import RunConfig
from .corpus import Split, load_embeddings, save_embeddings
from .diffmath import l2_normalize
from .errors import AbstainError, ConfigError, ConfigHashWarning, DimensionMismatch, FormatError
from .evalx import Method, calibrate, scenario_rows, score
from .loss import Ablation, Head
from .pairing import Exposure

log = logging.getLogger("abstain")

EXIT_OK, EXIT_ORDERING, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_PARTIAL = 0, 1, 2, 3, 4, 5

CORPUS = "corpus.emb"
CHECKPOINT = "checkpoint.ckpt"
THRESHOLDS = "thresholds.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--data", type=Path, help=f"EMB1 corpus (default OUT/{CORPUS})")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. train.epochs=5 (value parsed as JSON)")
    p.add_argument("-v", "--verbose", action="store_true")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--head", choices=[h.value for h in Head])
    p.add_argument("--negatives", choices=[e.value for e in Exposure])
    p.add_argument("--ablation", choices=[a.value for a in Ablation])


def _eval_flags(p: argparse.ArgumentParser) -> None:
    _model_flags(p)
    p.add_argument("--checkpoint", type=Path, help=f"default OUT/{CHECKPOINT}")
    p.add_argument("--strict", action="store_true", help="config-hash mismatch is an error")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="abstain", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write the synthetic corpus as EMB1 plus a summary")
    _common(p)
    p = sub.add_parser("prep", help="assemble train/val tuples and write JSON-lines sidecars")
    _common(p)
    _model_flags(p)
    p = sub.add_parser("train", help="fit one head and keep the best-val checkpoint")
    _common(p)
    _model_flags(p)
    p = sub.add_parser("calibrate", help="pick thresholds on the val split")
    _common(p)
    _eval_flags(p)
    p = sub.add_parser("eval", help="calibrate on val, report on test for every scenario")
    _common(p)
    _eval_flags(p)
    p = sub.add_parser("grid", help="exposure x method x scenario grid")
    _common(p)
    p.add_argument("--assert-orderings", action="store_true", help="exit 1 unless the expected orderings hold")
    p = sub.add_parser("score", help="score one query and decide answer or abstain")
    _common(p)
    _eval_flags(p)
    p.add_argument("--scenario", choices=["hard", "easy", "mixed"])
    p.add_argument("--tau", choices=["deterr", "tpr95"])
    q = p.add_mutually_exclusive_group(required=True)
    q.add_argument("--vector", help="inline vector as a JSON list or comma-separated floats")
    q.add_argument("--id", help="row id to score from the corpus (or --embeddings file)")
    p.add_argument("--embeddings", type=Path, help="EMB1 file holding --id")
    return parser


# ------------------------------------------------------------------ config


def effective_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    dotted = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            dotted[key] = json.loads(value)
        except json.JSONDecodeError:
            dotted[key] = value
    flag_map = {
        "seed": "seed", "out": "out", "head": "loss.head", "negatives": "pairing.exposure",
        "ablation": "loss.ablation", "scenario": "scenario", "tau": "tau",
    }
    for flag, key in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            dotted[key] = str(value) if isinstance(value, Path) else value
    if dotted:
        try:
            cfg = cfg.override(**dotted)
        except KeyError as exc:
            raise ConfigError(f"unknown config section in {sorted(dotted)}") from exc
    return cfg.resolved()


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_provenance(cfg: RunConfig, out: Path, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "config_hash": cfg.hash(), "config": cfg.to_dict()}
    (out / f"{command}.config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_store(args, cfg: RunConfig):
    path = args.data or Path(cfg.out) / CORPUS
    if not path.exists():
        raise FormatError(f"corpus {path} not found; run gen-data first or pass --data")
    return X.ensure_splits(load_embeddings(path), cfg)


def _load_model(args, cfg: RunConfig) -> M.Checkpoint:
    path = args.checkpoint or Path(cfg.out) / CHECKPOINT
    if not path.exists():
        raise FormatError(f"checkpoint {path} not found; run train first or pass --checkpoint")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConfigHashWarning)
        ckpt = M.load_checkpoint(path, expect_hash=cfg.hash(), strict=args.strict)
    for w in caught:
        print(json.dumps({"warning": w.category.__name__, "message": str(w.message)}), file=sys.stderr)
    return ckpt


def _method(ckpt: M.Checkpoint) -> Method:
    return X.method_for(ckpt.meta.get("head", "ebm"))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = effective_config(args)
    out = _outdir(cfg)
    store = X.build_store(cfg)
    path = args.data or out / CORPUS
    save_embeddings(store, path)
    summary = {
        "path": str(path),
        "sha256": _sha256(path),
        "rows": len(store),
        "dim": store.dim,
        "roles": store.role_counts(),
        "splits": store.split_counts(),
    }
    (out / "corpus.summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_provenance(cfg, out, "gen-data")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_prep(args) -> int:
    cfg = effective_config(args)
    out = _outdir(cfg)
    store = _load_store(args, cfg)
    train_set, val_set = X.prepare(store, cfg)
    train_set.write_jsonl(out / "tuples_train.jsonl", store)
    val_set.write_jsonl(out / "tuples_val.jsonl", store)
    write_provenance(cfg, out, "prep")
    print(json.dumps({"train_tuples": len(train_set), "val_tuples": len(val_set),
                      "exposure": cfg.pairing.exposure.value}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = effective_config(args)
    out = _outdir(cfg)
    store = _load_store(args, cfg)
    result = X.train_head(store, cfg)
    M.save_checkpoint(result.best, out / CHECKPOINT)
    result.history.write_csv(out / "history.csv")
    result.history.write_json(out / "history.json")
    write_provenance(cfg, out, "train")
    print(json.dumps({"checkpoint": str(out / CHECKPOINT), "best_epoch": result.best.epoch,
                      "best_val_loss": result.best.val_loss, "config_hash": cfg.hash()}))
    return EXIT_OK


def _thresholds_doc(store, ckpt, method) -> dict:
    doc = {"method": method.value, "calibrated_on": "val", "scenarios": {}}
    for sc in X.SCENARIOS:
        rows, labels = scenario_rows(store, Split.VAL, sc)
        th = calibrate(X.score_rows(store, method, ckpt.params, rows), labels)
        doc["scenarios"][sc] = {"tau_deterr": th.tau_deterr, "tau_95": th.tau_95}
    return doc


def cmd_calibrate(args) -> int:
    cfg = effective_config(args)
    out = _outdir(cfg)
    store = _load_store(args, cfg)
    ckpt = _load_model(args, cfg)
    doc = _thresholds_doc(store, ckpt, _method(ckpt))
    (out / THRESHOLDS).write_text(json.dumps(X.jsonable(doc), indent=2, sort_keys=True) + "\n")
    write_provenance(cfg, out, "calibrate")
    print(json.dumps(X.jsonable(doc), sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = effective_config(args)
    out = _outdir(cfg)
    store = _load_store(args, cfg)
    ckpt = _load_model(args, cfg)
    method = _method(ckpt)
    reports, _ = X.calibrate_and_evaluate(store, method, ckpt.params, cfg.pairing.exposure.value, cfg.seed)
    X.write_reports(reports, out, stem="report")
    X.write_plot_data(reports, out)
    write_provenance(cfg, out, "eval")
    for r in reports:
        print(json.dumps(X.jsonable(r.to_dict()), sort_keys=True))
    return EXIT_OK


def cmd_grid(args) -> int:
    cfg = effective_config(args)
    out = _outdir(cfg)
    store = _load_store(args, cfg) if (args.data or (out / CORPUS).exists()) else X.build_store(cfg)
    reports, cells = X.ablation_grid(store, cfg)
    X.write_reports(reports, out, stem="grid")
    X.write_plot_data(reports, out)
    manifest = []
    for c in cells:
        cell_dir = out / "cells" / c.exposure / X.method_for(c.head).value
        cell_dir.mkdir(parents=True, exist_ok=True)
        if c.fit is not None:
            M.save_checkpoint(c.fit.best, cell_dir / CHECKPOINT)
            c.fit.history.write_csv(cell_dir / "history.csv")
        X.write_reports(c.reports, cell_dir, stem="report")
        manifest.append({"config": c.exposure, "head": c.head, "ok": not c.error, "error": c.error})
    for e in X.EXPOSURES:
        knn_dir = out / "cells" / e / Method.KNN.value
        X.write_reports([r for r in reports if r.config == e and r.method == Method.KNN.value], knn_dir, stem="report")
    (out / "manifest.json").write_text(json.dumps({"cells": manifest}, indent=2) + "\n")
    write_provenance(cfg, out, "grid")
    failed = [m for m in manifest if not m["ok"]]
    print(json.dumps({"cells": len(reports), "failed": len(failed)}))
    if failed:
        print(json.dumps({"error": "PartialGridFailure", "failed": failed}), file=sys.stderr)
        return EXIT_PARTIAL
    if args.assert_orderings:
        checks = X.check_orderings(reports)
        (out / "orderings.json").write_text(json.dumps([c.__dict__ for c in checks], indent=2) + "\n")
        for c in checks:
            print(json.dumps(c.__dict__))
        if not all(c.passed for c in checks):
            return EXIT_ORDERING
    return EXIT_OK


def _query_vector(args, cfg, dim: int) -> tuple[str, np.ndarray]:
    if args.vector is not None:
        text = args.vector.strip()
        try:
            values = json.loads(text) if text.startswith("[") else [float(t) for t in text.split(",")]
        except ValueError as exc:
            raise FormatError(f"cannot parse --vector: {exc}") from exc
        x = np.asarray(values, dtype=np.float64)
        name = "inline"
    else:
        path = args.embeddings or args.data or Path(cfg.out) / CORPUS
        store = load_embeddings(path)
        row = store.index_of().get(args.id)
        if row is None:
            raise FormatError(f"id {args.id!r} not found in {path}")
        x = store.vectors[row].astype(np.float64)
        name = args.id
    if x.ndim != 1 or x.size != dim:
        raise DimensionMismatch(f"query has {x.size} values, model expects {dim}")
    return name, l2_normalize(x)


def decide(value: float, tau: float) -> str:
    """Abstain only when the score is strictly above the threshold."""
    return "abstain" if value > tau else "answer"


def cmd_score(args) -> int:
    cfg = effective_config(args)
    out = Path(cfg.out)
    ckpt = _load_model(args, cfg)
    path = out / THRESHOLDS
    if not path.exists():
        raise FormatError(f"{path} not found; run calibrate first")
    doc = json.loads(path.read_text())
    entry = doc["scenarios"][cfg.scenario]
    tau = float(entry["tau_deterr" if cfg.tau == "deterr" else "tau_95"])
    name, x = _query_vector(args, cfg, M.input_dim(ckpt.params))
    value = float(score(_method(ckpt), ckpt.params, x))
    print(json.dumps({"query": name, "score": value, "threshold": tau, "decision": decide(value, tau),
                      "method": doc["method"], "scenario": cfg.scenario, "tau": cfg.tau}))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "prep": cmd_prep,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "eval": cmd_eval,
    "grid": cmd_grid,
    "score": cmd_score,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
        return COMMANDS[args.command](args)
    except AbstainError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}),
              file=sys.stderr)
        return exc.exit_code
    except (KeyError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": EXIT_DATA}),
              file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
