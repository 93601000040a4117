"""Command-line entry point.

Exit codes: 0 success, 1 domain or runtime error, 2 usage error.
Flag values override config-file values, which override built-in defaults.
"""

from __future__ import annotations

import argparse
import logging
import sys
from fractions import Fraction
from pathlib import Path

from .config import ExperimentConfig, dump_config, load_config, with_overrides

log = logging.getLogger("emblaunder")


def _real(text: str) -> float:
    """Accept ``0.0314`` or ``8/255``."""
    try:
        return float(Fraction(text)) if "/" in text else float(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"not a real number: {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="emblaunder", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("gen-data", help="render a synthetic shape dataset to PNG files")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--per-class", type=int, default=10)
    g.add_argument("--out", type=Path, required=True)

    t = sub.add_parser("train", help="train one encoder contrastively on a generated dataset")
    t.add_argument("--arch", choices=("tiny_vit", "tiny_cnn"), required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--config", type=Path)
    t.add_argument("--epochs", type=int)

    a = sub.add_parser("attack", help="craft one adversarial image against the surrogate ensemble")
    a.add_argument("--config", type=Path)
    a.add_argument("--src", type=Path, required=True)
    target = a.add_mutually_exclusive_group(required=True)
    target.add_argument("--target-label", type=int)
    target.add_argument("--target-image", type=Path)
    target.add_argument("--target-away", action="store_true", help="push away from the source embedding")
    a.add_argument("--out", type=Path, required=True)
    _attack_flags(a)

    e = sub.add_parser("evaluate", help="run the configured scenarios end to end and write reports")
    e.add_argument("--config", type=Path)
    e.add_argument("--out", type=Path, required=True)
    _attack_flags(e)

    b = sub.add_parser("ablate", help="sweep epsilon or step count on the identity scenario")
    b.add_argument("--axis", choices=("epsilon", "steps"), required=True)
    b.add_argument("--config", type=Path)
    b.add_argument("--out", type=Path, required=True)
    _attack_flags(b)

    r = sub.add_parser("report", help="recompute aggregates from the CSV rows of an evaluate run")
    r.add_argument("--in", dest="inp", type=Path, required=True)
    r.add_argument("--out", type=Path, required=True)

    sub.add_parser("selftest", help="gradient checks, projection properties and the linear oracle")
    return p


def _attack_flags(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("--epsilon", type=_real, help="L-inf budget in [0,1], e.g. 0.0314 or 8/255")
    p.add_argument("--steps", type=int)


def parse_args(argv=None) -> argparse.Namespace:
    return build_parser().parse_args(argv)


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    path = getattr(args, "config", None)
    if path is not None:
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        cfg = load_config(path.read_bytes())
    else:
        cfg = ExperimentConfig()
    lines = []
    if getattr(args, "seed", None) is not None:
        lines.append(f"seed = {args.seed}")
    if getattr(args, "epsilon", None) is not None:
        lines.append(f"attack.epsilon = {args.epsilon!r}")
    if getattr(args, "steps", None) is not None:
        lines.append(f"attack.steps = {args.steps}")
    if getattr(args, "out", None) is not None:
        quoted = str(args.out).replace("\\", "\\\\").replace('"', '\\"')
        lines.append(f'output.dir = "{quoted}"')
    return with_overrides(cfg, "\n".join(lines)) if lines else cfg


# --- subcommands ----------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .data import generate_shape_dataset, save_dataset

    if args.per_class < 0:
        raise ValueError("--per-class must be non-negative")
    ds = generate_shape_dataset(args.seed, args.per_class)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} images to {args.out}")
    return 0


def cmd_train(args) -> int:
    import dataclasses

    from .data import load_dataset
    from .encoders import TrainConfig, init_encoder, retrieval_accuracy, save_weights, train_contrastive

    cfg = resolve_config(args)
    data = load_dataset(args.data)
    t = cfg.train
    vit = args.arch == "tiny_vit"
    tc = TrainConfig(
        epochs=t.epochs_vit if vit else t.epochs_cnn,
        temperature=t.temperature,
        lr=t.lr_vit if vit else t.lr_cnn,
        momentum=t.momentum,
        seed=args.seed,
        augment=t.augment,
        max_shift=t.max_shift,
    )
    if args.epochs is not None:
        tc = dataclasses.replace(tc, epochs=args.epochs)
    enc = train_contrastive(init_encoder(args.arch, t.dim, args.seed), data, tc)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / f"{args.arch}-seed{args.seed}.ezw"
    path.write_bytes(save_weights(enc))
    print(f"wrote {path} (train retrieval accuracy {retrieval_accuracy(enc, data):.4f})")
    return 0


def cmd_attack(args) -> int:
    from .attack import TargetSpec, pgd_attack
    from .experiment import summary_text
    from .image_io import load_image, save_image
    from .zoo import build_zoo

    cfg = resolve_config(args)
    for path in (args.src, args.target_image):
        if path is not None and not path.exists():
            raise FileNotFoundError(f"image not found: {path}")
    src = load_image(args.src)
    if args.target_label is not None:
        spec = TargetSpec.label_target(args.target_label)
    elif args.target_image is not None:
        spec = TargetSpec.image_target(load_image(args.target_image))
    else:
        spec = TargetSpec.away_from_source()
    zoo = build_zoo(cfg, cfg.output.cache_dir or None, members=cfg.attack.ensemble)
    res = pgd_attack(src, spec, cfg.attack, zoo.ensemble(cfg.attack.ensemble), seed=cfg.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    save_image(res.adv, args.out / "adv.png")
    summary = {
        "epsilon": cfg.attack.epsilon,
        "epsilon_255": cfg.attack.epsilon * 255,
        "steps": cfg.attack.steps,
        "linf": res.linf,
        "wall_time": res.wall_time,
        **{f"final_cosine.{k}": v for k, v in res.final_cosine.items()},
    }
    (args.out / "attack.txt").write_text(summary_text(summary))
    (args.out / "trace.csv").write_text("step,objective\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(res.trace)))
    print(f"wrote {args.out / 'adv.png'}")
    return 0


def cmd_evaluate(args) -> int:
    from .experiment import run_experiment

    cfg = resolve_config(args)
    reports = run_experiment(cfg, args.out)
    for fam, rep in reports.items():
        agg = rep.aggregates
        print(f"{fam}: targeted ASR {agg['targeted_asr']:.3f}, untargeted ASR {agg['untargeted_asr']:.3f}, "
              f"noise targeted ASR {agg['noise_targeted_asr']:.3f}")
    return 0


def cmd_ablate(args) -> int:
    from .experiment import run_ablation, write_ablation, write_report

    cfg = resolve_config(args)
    ab = run_ablation(cfg, args.axis)
    path = write_ablation(ab, args.out)
    for value, rep in zip(ab.values, ab.reports):
        write_report(rep, args.out / f"{args.axis}_{value!r}")
    for m, series in ab.asr.items():
        print(f"{m}: " + ", ".join(f"{v:.3f}" for v in series) + ("" if ab.monotone(m) else "  (drop > 5 points)"))
    print(f"wrote {path}")
    return 0


def cmd_report(args) -> int:
    from .experiment import aggregates_from_csv, summary_text

    csvs = sorted(args.inp.rglob("rows.csv"))
    if not csvs:
        raise FileNotFoundError(f"no rows.csv under {args.inp}")
    args.out.mkdir(parents=True, exist_ok=True)
    lines = []
    for path in csvs:
        name = str(path.parent.relative_to(args.inp)).replace("/", ".") or "root"
        agg = aggregates_from_csv(path)
        lines.append(summary_text({f"{name}.{k}": v for k, v in agg.items()}))
    out = args.out / "report.txt"
    out.write_text("".join(lines))
    print(f"wrote {out}")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return 0 if run_selftest() else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "report": cmd_report,
    "selftest": cmd_selftest,
}


def dispatch(args: argparse.Namespace) -> int:
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # every failure maps to exit 1 with a one-line diagnostic
        print(f"emblaunder {args.command}: error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return dispatch(args)


def show_config(cfg: ExperimentConfig) -> str:
    return dump_config(cfg)


if __name__ == "__main__":
    sys.exit(main())
