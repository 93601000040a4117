"""Transfer to the held-out encoder as the surrogate ensemble grows: {S3}, {S1, S3}, {S1, S2, S3}.

    python scripts/ensemble_size.py [--pairs 20] [--cache runs/cache]
"""

import argparse
import dataclasses
from pathlib import Path

from emblaunder.config import ExperimentConfig
from emblaunder.experiment import build_scenario
from emblaunder.scenarios import run_scenario
from emblaunder.zoo import build_zoo

ENSEMBLES = (("S3",), ("S1", "S3"), ("S1", "S2", "S3"))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pairs", type=int, default=20)
    ap.add_argument("--cache", type=Path)
    args = ap.parse_args()

    cfg = ExperimentConfig()
    cfg = dataclasses.replace(cfg, scenario=dataclasses.replace(cfg.scenario, pairs=args.pairs))
    zoo = build_zoo(cfg, args.cache)
    spec = build_scenario(cfg, zoo, "identity")
    print(f"{'ensemble':<16}{'targeted':>10}{'noise':>10}{'mean cos':>10}")
    for members in ENSEMBLES:
        attack = dataclasses.replace(cfg.attack, ensemble=members)
        agg = run_scenario(spec, zoo.ensemble(members), zoo.held_out, attack).aggregates
        print(f"{'+'.join(members):<16}{agg['targeted_asr']:>10.3f}{agg['noise_targeted_asr']:>10.3f}"
              f"{agg['mean_final_cos_heldout']:>10.3f}")


if __name__ == "__main__":
    main()
