"""Desk-scale regret comparison of the simple, ls4l2 and complicated algorithms.

Runs (or resumes from cache) every replicate for each master seed and
setting, then prints the final mean cumulative regret and the ordering check.
A second table restricted to the replicates every algorithm shares is printed
for diagnosis; it reads the same cache and costs nothing extra.

    python3 scripts/desk_regret.py --out results/desk_regret
"""
import argparse
import json
import dataclasses
import sys

from pjitai.desk import DeskPlan, check_ordering, default_cache_dir, run_plan


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(default_cache_dir()))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--regret", choices=["expected", "realized"], default="expected")
    args = ap.parse_args(argv)
    plan = DeskPlan(master_seeds=tuple(args.seeds), regret=args.regret)
    summary = run_plan(args.out, plan, log=lambda m: print(m, flush=True))
    print(json.dumps(summary, indent=2))
    failures = check_ordering(summary)
    for seed, bad in failures.items():
        print(f"seed {seed}: {'PASS' if not bad else 'FAIL ' + '; '.join(bad)}")
    shared = min(n for _, n in plan.replicates)
    paired = dataclasses.replace(plan, replicates=tuple((a, shared) for a, _ in plan.replicates))
    print(f"paired means over replicates 0..{shared - 1}:")
    print(json.dumps(run_plan(args.out, paired, log=lambda m: None), indent=2))
    return 0 if not any(failures.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
