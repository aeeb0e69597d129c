"""Synthetic comparison: Baseline / Ours w/o adaptation / Ours / Oracle over several seeds.

    python3 scripts/run_table1.py --out runs/table1 --seeds 0 1 2 3 4
"""
import argparse
import dataclasses
import json
import time
from pathlib import Path

from elfua.config import TrainConfig
from elfua.experiments import SYNTH_TRAIN, run_table1
from elfua.synthworld import SynthWorldConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/table1", help="output directory")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--steps", type=int, default=SYNTH_TRAIN["total_outer_steps"], help="outer steps per run")
    ap.add_argument("--shots", type=int, default=SYNTH_TRAIN["shots"], help="support size K")
    args = ap.parse_args()

    out = Path(args.out)
    summary = {}
    for seed in args.seeds:
        t0 = time.time()
        cfg = TrainConfig(**{**SYNTH_TRAIN, "total_outer_steps": args.steps, "shots": args.shots, "seed": seed})
        res = run_table1(out / f"seed{seed}", seed, SynthWorldConfig(seed=seed), cfg)
        summary[seed] = res.to_dict() | {"seconds": round(time.time() - t0, 1)}
        print(f"seed {seed}  ({time.time() - t0:.0f}s)\n{res.table()}")
        print(f"improved on {res.fraction_improved():.0%} of persons; ordering holds: {res.ordering_holds()}\n")
    held = sum(s["ordering_holds"] for s in summary.values())
    print(f"ordering held on {held}/{len(summary)} seeds")
    cfg_dump = dataclasses.asdict(TrainConfig(**{**SYNTH_TRAIN, "total_outer_steps": args.steps, "shots": args.shots}))
    (out / "summary.json").write_text(json.dumps({"train": cfg_dump, "seeds": summary}, indent=1, sort_keys=True))


if __name__ == "__main__":
    main()
