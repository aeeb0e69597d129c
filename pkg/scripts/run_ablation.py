"""Synthetic G x K sweep of mean post-adaptation error.

    python3 scripts/run_ablation.py --out runs/ablation --G 1 2 3 --K 1 5 --seeds 0 1
"""
import argparse
from pathlib import Path

from elfua.config import TrainConfig
from elfua.experiments import SYNTH_TRAIN, run_sweep, sweep_csv, sweep_table
from elfua.synthworld import SynthWorldConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablation", help="output directory")
    ap.add_argument("--G", type=int, nargs="+", default=[1, 2, 3], help="inner step counts")
    ap.add_argument("--K", type=int, nargs="+", default=[1, 5], help="support sizes")
    ap.add_argument("--gamma", type=float, nargs="*", default=[], help="optional gamma values to sweep as well")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--steps", type=int, default=SYNTH_TRAIN["total_outer_steps"])
    args = ap.parse_args()

    grid = {"inner_steps": args.G, "shots": args.K}
    if args.gamma:
        grid["gamma"] = args.gamma
    base = TrainConfig(**{**SYNTH_TRAIN, "total_outer_steps": args.steps})
    out = Path(args.out)
    rows = run_sweep(out, base, grid, args.seeds, SynthWorldConfig())
    (out / "sweep.csv").write_text(sweep_csv(rows))
    (out / "sweep.txt").write_text(sweep_table(rows) + "\n")
    print(sweep_table(rows))


if __name__ == "__main__":
    main()
