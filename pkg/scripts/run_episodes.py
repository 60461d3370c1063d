#!/usr/bin/env python3
"""End-to-end experiment through the CLI: scene, annotations, episodes, rollouts, report.

Runs every stage in a work directory and prints the navigation summary for
argmax and sampled rollouts side by side.

    python3 scripts/run_episodes.py --config configs/small.cfg --episodes 6 --work /tmp/volnav-run
"""

import argparse
import json
import tempfile
from pathlib import Path

from volnav.cli import main as volnav


def run(*argv):
    code = volnav([str(a) for a in argv])
    if code != 0:
        raise SystemExit(f"volnav {argv[0]} failed with exit code {code}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/small.cfg")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--episodes", type=int, default=6)
    ap.add_argument("--jobs", type=int, default=2)
    ap.add_argument("--work", default=None, help="work directory (default: a temporary one)")
    args = ap.parse_args()
    work = Path(args.work or tempfile.mkdtemp(prefix="volnav-"))
    work.mkdir(parents=True, exist_ok=True)
    common = ["--config", args.config]
    scene, eps = work / "scene", work / "episodes.jsonl"

    run("gen-scene", "--seed", args.seed, "--out", scene, "--episodes", eps,
        "--num-episodes", args.episodes, *common)
    run("annotate", "--scene", scene, "--jobs", args.jobs, *common)
    reports = {}
    for mode in ("argmax", "sample"):
        traj = work / f"trajectories.{mode}.txt"
        run("simulate", "--scene", scene, "--episodes", eps, "--mode", mode, "--out", traj,
            "--jobs", args.jobs, *common)
        run("evaluate", "--trajectories", traj, "--episodes", eps, "--scene", scene,
            "--out", work / f"report.{mode}.txt", *common)
        reports[mode] = json.loads((work / f"report.{mode}.json").read_text())["nav"]

    print(f"\nwork directory: {work}")
    keys = [k for k in reports["argmax"] if k != "episodes"]
    print(f"{'metric':>8} {'argmax':>10} {'sample':>10}")
    for k in keys:
        print(f"{k:>8} {reports['argmax'][k]:10.4f} {reports['sample'][k]:10.4f}")


if __name__ == "__main__":
    main()
