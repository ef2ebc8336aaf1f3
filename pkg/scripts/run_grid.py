#!/usr/bin/env python3
"""Run the exposure x method x scenario grid on one or more seeds.

Prints an AUROC/DetErr table per seed and the ordering checks, and writes
grid.json/grid.csv plus orderings.json under OUT/seed-<n>/.

    python scripts/run_grid.py --seeds 42 43 44 45 46 --out runs/seeds
"""

import argparse
import json
import time
from pathlib import Path

from abstain import experiment as X
from abstain.config import RunConfig


def table(reports) -> str:
    lines = [f"{'config':10s} {'method':13s} " + " ".join(f"{s:>13s}" for s in X.SCENARIOS)]
    for e in X.EXPOSURES:
        for m in X.METHODS:
            cells = [X.lookup(reports, e, m, s) for s in X.SCENARIOS]
            lines.append(f"{e:10s} {m:13s} " + " ".join(f"{c.auroc:6.3f}/{c.det_err:5.3f}" for c in cells))
    return "\n".join(lines)


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[42])
    ap.add_argument("--config", type=Path)
    ap.add_argument("--out", type=Path, default=Path("runs/grid"))
    args = ap.parse_args()

    base = RunConfig.load(args.config) if args.config else RunConfig()
    passes = {}
    for seed in args.seeds:
        cfg = base.override(seed=seed).resolved()
        t0 = time.perf_counter()
        reports, cells = X.ablation_grid(X.build_store(cfg), cfg)
        elapsed = time.perf_counter() - t0
        out = args.out / f"seed-{seed}"
        X.write_reports(reports, out)
        X.write_plot_data(reports, out)
        checks = X.check_orderings(reports)
        (out / "orderings.json").write_text(json.dumps([c.__dict__ for c in checks], indent=2) + "\n")
        failed = [f"{c.exposure}/{c.head}: {c.error}" for c in cells if c.error]
        print(f"\nseed {seed}  ({elapsed:.0f} s, {len(failed)} failed cells)")
        print(table(reports) if not failed else "\n".join(failed))
        for c in checks:
            print(f"  {'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail}")
            passes.setdefault(c.name, []).append(c.passed)
    if len(args.seeds) > 1:
        print("\nordering pass counts over seeds")
        for name, hits in passes.items():
            print(f"  {sum(hits)}/{len(hits)}  {name}")


if __name__ == "__main__":
    main()
