"""Full desk experiment: all four families, both ablations, float vs 8-bit scoring.

    python scripts/run_desk.py --out runs/desk [--config my.cfg] [--cache runs/cache]
"""

import argparse
import dataclasses
import time
from pathlib import Path

from emblaunder.config import ExperimentConfig, load_config
from emblaunder.encoders import retrieval_accuracy
from emblaunder.experiment import build_scenario, run_ablation, run_experiment, summary_text, write_ablation
from emblaunder.scenarios import FAMILIES, run_scenario
from emblaunder.zoo import build_zoo


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    ap.add_argument("--config", type=Path)
    ap.add_argument("--cache", type=Path, help="weight cache directory (skips retraining)")
    args = ap.parse_args()

    cfg = load_config(args.config.read_bytes()) if args.config else ExperimentConfig()
    cfg = dataclasses.replace(cfg, scenario=dataclasses.replace(cfg.scenario, families=FAMILIES))
    t0 = time.perf_counter()
    zoo = build_zoo(cfg, args.cache)
    print(f"zoo ready in {time.perf_counter() - t0:.0f}s")
    for eid, enc in zoo.encoders.items():
        print(f"  {eid} ({enc.arch}): test retrieval accuracy {retrieval_accuracy(enc, zoo.test):.3f}")

    reports = run_experiment(cfg, args.out, zoo=zoo)
    print(f"\n{'family':<12}{'targeted':>10}{'noise':>10}{'untargeted':>12}")
    for fam, rep in reports.items():
        a = rep.aggregates
        print(f"{fam:<12}{a['targeted_asr']:>10.3f}{a['noise_targeted_asr']:>10.3f}{a['untargeted_asr']:>12.3f}")

    ident = reports["identity"]
    flt = run_scenario(build_scenario(cfg, zoo, "identity"), {}, zoo.held_out, cfg.attack, eval_quantize=False,
                       adv_images=ident.adv_images)
    rows = {"float.targeted_asr": flt.aggregates["targeted_asr"], "png.targeted_asr": ident.aggregates["targeted_asr"],
            "float.mean_cos": flt.aggregates["mean_final_cos_heldout"], "png.mean_cos": ident.aggregates["mean_final_cos_heldout"]}
    (args.out / "quantization.txt").write_text(summary_text(rows))
    print("\n" + summary_text(rows), end="")

    cache = {("identity", cfg.attack.epsilon, cfg.attack.steps): ident}
    for axis in ("epsilon", "steps"):
        ab = run_ablation(cfg, axis, zoo, cache=cache)
        write_ablation(ab, args.out)
        print(f"\n{axis}: {ab.values}")
        for m, series in ab.asr.items():
            print(f"  {m}: {[round(v, 3) for v in series]}")


if __name__ == "__main__":
    main()
