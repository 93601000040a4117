"""Standard scenarios, ablation sweeps, report files and the determinism check."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .attack import TargetSpec
from .config import ExperimentConfig, dump_config
from .data import HUES, NUM_CLASSES, SHAPES, ShapeDataset
from .encoders import Encoder, save_weights
from .image_io import encode_png, quantize_roundtrip
from .scenarios import (
    CSV_COLUMNS,
    EVAL_JITTER,
    IdentityGallery,
    LabelRetriever,
    ProductRanker,
    ScenarioError,
    ScenarioReport,
    ScenarioRow,
    ScenarioSpec,
    build_content_filter,
    build_identity_gallery,
    classify_identity,
    compute_aggregates,
    run_scenario,
)
from .zoo import Zoo, build_zoo

log = logging.getLogger(__name__)

# crosses stand in for the content the filter must block
UNSAFE_CLASSES = tuple(range(SHAPES.index("cross") * len(HUES), (SHAPES.index("cross") + 1) * len(HUES)))
PREMIUM_CLASS = 0
COMPETITORS = 4
MONOTONE_TOLERANCE = 0.05


def _scenario_rng(cfg: ExperimentConfig, family: str) -> np.random.Generator:
    from .scenarios import FAMILIES

    return np.random.default_rng([cfg.seed, 7000 + FAMILIES.index(family)])


def _correct(gallery: IdentityGallery, enc: Encoder, img, cid: int) -> bool:
    return classify_identity(gallery, enc.embed(quantize_roundtrip(img))) == cid


def _pick_pairs(rng, pool: ShapeDataset, n_pairs: int, usable) -> list[tuple[np.ndarray, int, np.ndarray, int]]:
    """Draw (source, target) pool images of distinct classes, keeping only images ``usable`` accepts."""
    by_class = {c: [img for img in pool.of_class(c) if usable(img, c)] for c in range(NUM_CLASSES)}
    classes = [c for c, imgs in by_class.items() if imgs]
    if len(classes) < 2:
        raise ScenarioError("too few usable pool images to form pairs")
    pairs = []
    for _ in range(n_pairs):
        s, t = rng.choice(classes, 2, replace=False)
        src = by_class[s][rng.integers(len(by_class[s]))]
        tgt = by_class[t][rng.integers(len(by_class[t]))]
        pairs.append((src, int(s), tgt, int(t)))
    return pairs


def identity_scenario(cfg: ExperimentConfig, zoo: Zoo, consumer_encoder: Encoder | None = None) -> ScenarioSpec:
    """Source images should be recognized as the target's class; both are correctly recognized when clean."""
    enc = consumer_encoder or zoo.held_out
    gallery = build_identity_gallery(enc, zoo.gallery)
    held_gallery = gallery if enc is zoo.held_out else build_identity_gallery(zoo.held_out, zoo.gallery)
    pairs = _pick_pairs(
        _scenario_rng(cfg, "identity"),
        zoo.pool,
        cfg.scenario.pairs,
        lambda img, c: _correct(held_gallery, zoo.held_out, img, c),
    )
    return _pair_spec(cfg, "identity", pairs, gallery, image_targets=True)


def narrative_scenario(cfg: ExperimentConfig, zoo: Zoo, consumer_encoder: Encoder | None = None) -> ScenarioSpec:
    """The consumer should retrieve the target label text for the source image."""
    enc = consumer_encoder or zoo.held_out
    retriever = LabelRetriever(enc.label_embeddings())
    held = LabelRetriever(zoo.held_out.label_embeddings())
    pairs = _pick_pairs(
        _scenario_rng(cfg, "narrative"),
        zoo.pool,
        cfg.scenario.pairs,
        lambda img, c: held.verdict(zoo.held_out.embed(quantize_roundtrip(img))) == str(c),
    )
    return _pair_spec(cfg, "narrative", pairs, retriever, image_targets=False)


def _pair_spec(cfg, family, pairs, consumer, image_targets: bool) -> ScenarioSpec:
    return ScenarioSpec(
        family=family,
        sources=[p[0] for p in pairs],
        source_ids=[p[1] for p in pairs],
        targets=[TargetSpec.image_target(p[2]) if image_targets else TargetSpec.label_target(p[3]) for p in pairs],
        target_ids=[p[3] for p in pairs],
        consumer=consumer,
        target_images=[p[2] for p in pairs],
        trials=cfg.scenario.trials,
        prompt_label=cfg.scenario.prompt_label,
        jitter=EVAL_JITTER if cfg.scenario.jitter else None,
        seed=cfg.seed,
    )


def compliance_scenario(cfg: ExperimentConfig, zoo: Zoo, consumer_encoder: Encoder | None = None) -> ScenarioSpec:
    """Every unsafe source is paired with every safe target; the filter threshold is calibrated on those clean images."""
    enc = consumer_encoder or zoo.held_out
    rng = _scenario_rng(cfg, "compliance")
    s = cfg.scenario
    unsafe_idx = np.flatnonzero(np.isin(zoo.pool.labels, UNSAFE_CLASSES))
    safe_idx = np.flatnonzero(~np.isin(zoo.pool.labels, UNSAFE_CLASSES))
    if len(unsafe_idx) < s.compliance_sources or len(safe_idx) < s.compliance_targets:
        raise ScenarioError("pool too small for the requested compliance grid")
    src_idx = rng.choice(unsafe_idx, s.compliance_sources, replace=False)
    tgt_idx = rng.choice(safe_idx, s.compliance_targets, replace=False)
    srcs = [zoo.pool.images[i] for i in src_idx]
    tgts = [zoo.pool.images[i] for i in tgt_idx]
    filt = build_content_filter(enc, zoo.gallery, UNSAFE_CLASSES, srcs, tgts)
    pairs = [(a, int(zoo.pool.labels[i]), b, int(zoo.pool.labels[j])) for i, a in zip(src_idx, srcs) for j, b in zip(tgt_idx, tgts)]
    return _pair_spec(cfg, "compliance", pairs, filt, image_targets=True)


def commercial_scenario(cfg: ExperimentConfig, zoo: Zoo, consumer_encoder: Encoder | None = None) -> ScenarioSpec:
    """The attacker's product should rank first against clean competitor listings for a premium reference."""
    enc = consumer_encoder or zoo.held_out
    rng = _scenario_rng(cfg, "commercial")
    gallery = build_identity_gallery(enc, zoo.gallery)
    premium = gallery.prototypes[PREMIUM_CLASS]
    premium_imgs = zoo.pool.of_class(PREMIUM_CLASS)
    others = np.flatnonzero(zoo.pool.labels != PREMIUM_CLASS)
    specs_src, src_ids, targets, tgt_imgs, consumers = [], [], [], [], []
    for _ in range(cfg.scenario.pairs):
        picks = rng.choice(others, COMPETITORS + 1, replace=False)
        comp = enc.embed(np.stack([quantize_roundtrip(zoo.pool.images[i]) for i in picks[1:]]))
        consumers.append(ProductRanker(premium, comp))
        specs_src.append(zoo.pool.images[picks[0]])
        src_ids.append(int(zoo.pool.labels[picks[0]]))
        tgt = premium_imgs[rng.integers(len(premium_imgs))]
        targets.append(TargetSpec.image_target(tgt))
        tgt_imgs.append(tgt)
    return ScenarioSpec(
        family="commercial",
        sources=specs_src,
        source_ids=src_ids,
        targets=targets,
        target_ids=[PREMIUM_CLASS] * len(src_ids),
        consumer=consumers,
        target_images=tgt_imgs,
        trials=cfg.scenario.trials,
        prompt_label=cfg.scenario.prompt_label,
        jitter=EVAL_JITTER if cfg.scenario.jitter else None,
        seed=cfg.seed,
    )


SCENARIO_BUILDERS: dict[str, Callable[..., ScenarioSpec]] = {
    "identity": identity_scenario,
    "narrative": narrative_scenario,
    "compliance": compliance_scenario,
    "commercial": commercial_scenario,
}


def build_scenario(cfg: ExperimentConfig, zoo: Zoo, family: str, consumer_encoder: Encoder | None = None) -> ScenarioSpec:
    if family not in SCENARIO_BUILDERS:
        raise ScenarioError(f"unknown family {family!r}")
    return SCENARIO_BUILDERS[family](cfg, zoo, consumer_encoder)


def run_family(cfg: ExperimentConfig, zoo: Zoo, family: str, eval_quantize: bool = True) -> ScenarioReport:
    spec = build_scenario(cfg, zoo, family)
    report = run_scenario(spec, zoo.ensemble(cfg.attack.ensemble), zoo.held_out, cfg.attack, eval_quantize=eval_quantize)
    report.config["epsilon_255"] = cfg.attack.epsilon * 255
    return report


# --- ablation -------------------------------------------------------------------------------


@dataclass
class AblationReport:
    axis: str
    values: list[float]
    asr: dict[str, list[float]]  # model id -> targeted ASR per grid value
    reports: list[ScenarioReport] = field(default_factory=list, repr=False)

    def drops(self, model: str = "H", tolerance: float = MONOTONE_TOLERANCE) -> list[tuple[float, float, float]]:
        """Adjacent grid points where ASR falls by more than ``tolerance``."""
        a = self.asr[model]
        return [(self.values[i], self.values[i + 1], a[i] - a[i + 1]) for i in range(len(a) - 1) if a[i] - a[i + 1] > tolerance]

    def monotone(self, model: str = "H", tolerance: float = MONOTONE_TOLERANCE) -> bool:
        return not self.drops(model, tolerance)

    def summary(self) -> dict[str, object]:
        out: dict[str, object] = {"axis": self.axis, "values": self.values}
        for m, a in self.asr.items():
            out[f"asr.{m}"] = a
            out[f"monotone.{m}"] = self.monotone(m)
        return out


def _cell_config(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "epsilon":
        attack = dataclasses.replace(cfg.attack, epsilon=float(value))
    elif axis == "steps":
        attack = dataclasses.replace(cfg.attack, steps=int(value))
    else:
        raise ValueError(f"unknown ablation axis {axis!r}")
    return dataclasses.replace(cfg, attack=attack)


def run_ablation(
    cfg: ExperimentConfig,
    axis: str,
    zoo: Zoo | None = None,
    family: str = "identity",
    cache: dict | None = None,
) -> AblationReport:
    """One full scenario per grid value with shared seeds and pairs.

    Targeted ASR is reported on the held-out consumer and, as a white-box reference, on a consumer
    built from each surrogate.  ``cache`` maps (epsilon, steps) to previously computed reports.
    """
    values = list(cfg.ablation.epsilon if axis == "epsilon" else cfg.ablation.steps) if axis in ("epsilon", "steps") else None
    if values is None:
        raise ValueError(f"unknown ablation axis {axis!r}")
    if not values:
        raise ValueError(f"ablation.{axis} is empty")
    if list(values) != sorted(values):
        raise ValueError(f"ablation.{axis} values must be sorted ascending")
    zoo = zoo or build_zoo(cfg, cfg.output.cache_dir or None)
    spec = build_scenario(cfg, zoo, family)
    surrogate_specs = {eid: build_scenario(cfg, zoo, family, enc) for eid, enc in zoo.surrogates.items()}
    models = ["H"] + list(surrogate_specs)
    asr: dict[str, list[float]] = {m: [] for m in models}
    reports = []
    ensemble = zoo.ensemble(cfg.attack.ensemble)
    for v in values:
        cell = _cell_config(cfg, axis, v)
        key = (family, cell.attack.epsilon, cell.attack.steps)
        if cache is not None and key in cache:
            report = cache[key]
        else:
            report = run_scenario(spec, ensemble, zoo.held_out, cell.attack)
            if cache is not None:
                cache[key] = report
        reports.append(report)
        asr["H"].append(report.aggregates["targeted_asr"])
        for eid, sspec in surrogate_specs.items():
            wb = run_scenario(sspec, {}, zoo.encoders[eid], cell.attack, adv_images=report.adv_images)
            asr[eid].append(wb.aggregates["targeted_asr"])
    return AblationReport(axis, [float(v) for v in values], asr, reports)


# --- report files ------------------------------------------------------------------------------


def _fmt_cell(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def rows_to_csv(rows: Sequence[ScenarioRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt_cell(getattr(r, c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def read_rows_csv(path_or_text) -> list[ScenarioRow]:
    text = Path(path_or_text).read_text() if isinstance(path_or_text, Path) else str(path_or_text)
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ValueError(f"unexpected CSV header {reader.fieldnames}")
    rows = []
    for rec in reader:
        rows.append(
            ScenarioRow(
                family=rec["family"],
                source_id=int(rec["source_id"]),
                target_id=int(rec["target_id"]),
                trial=int(rec["trial"]),
                verdict_clean_src=rec["verdict_clean_src"],
                verdict_clean_tgt=rec["verdict_clean_tgt"],
                verdict_adv=rec["verdict_adv"],
                verdict_noise=rec["verdict_noise"],
                linf=float(rec["linf"]),
                final_cos_heldout=float(rec["final_cos_heldout"]),
            )
        )
    return rows


def summary_text(values: dict) -> str:
    lines = []
    for k, v in values.items():
        if isinstance(v, (list, tuple)):
            v = "[" + ", ".join(_fmt_cell(x) for x in v) + "]"
        lines.append(f"{k} = {_fmt_cell(v)}")
    return "\n".join(lines) + "\n"


def parse_summary(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def write_report(report: ScenarioReport, out_dir: str | Path, images: bool = True) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    p = out / "rows.csv"
    p.write_text(rows_to_csv(report.rows))
    written.append(p)
    summary = {"family": report.family, **report.aggregates}
    eps = report.config.get("attack", {}).get("epsilon")
    if eps is not None:
        summary["epsilon"] = eps
        summary["epsilon_255"] = eps * 255
    if "prompt_label" in report.config:
        summary["prompt_label"] = report.config["prompt_label"]
    p = out / "summary.txt"
    p.write_text(summary_text(summary))
    written.append(p)
    if images:
        for i, img in enumerate(report.adv_images):
            p = out / f"adv_{i:03d}.png"
            p.write_bytes(encode_png(img))
            written.append(p)
    return written


def write_ablation(report: AblationReport, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = out / f"ablation_{report.axis}.txt"
    p.write_text(summary_text(report.summary()))
    return p


# --- whole pipeline and determinism ----------------------------------------------------------


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path, zoo: Zoo | None = None) -> dict[str, ScenarioReport]:
    """Data, weights, adversarial images and reports for every configured family, all under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(dump_config(cfg))
    zoo = zoo or build_zoo(cfg, cfg.output.cache_dir or None)
    data_dir = out / "data"
    data_dir.mkdir(exist_ok=True)
    for name, ds in (("gallery", zoo.gallery), ("test", zoo.test), ("pool", zoo.pool)):
        (data_dir / f"{name}.bin").write_bytes(ds.to_bytes())
    for eid, ds in zoo.train_data.items():
        (data_dir / f"train_{eid}.bin").write_bytes(ds.to_bytes())
    wdir = out / "weights"
    wdir.mkdir(exist_ok=True)
    for eid, enc in zoo.encoders.items():
        (wdir / f"{eid}.ezw").write_bytes(save_weights(enc))
    reports = {}
    for fam in cfg.scenario.families:
        reports[fam] = run_family(cfg, zoo, fam)
        write_report(reports[fam], out / fam)
    return reports


@dataclass
class DeterminismResult:
    passed: bool
    files_compared: int
    diff: str = ""

    def __bool__(self):
        return self.passed


def compare_trees(a: Path, b: Path) -> DeterminismResult:
    fa = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    fb = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    if fa != fb:
        only = sorted(set(fa) ^ set(fb))
        return DeterminismResult(False, 0, f"file sets differ: {[str(p) for p in only]}")
    for rel in fa:
        da, db = (a / rel).read_bytes(), (b / rel).read_bytes()
        if da != db:
            n = min(len(da), len(db))
            off = next((i for i in range(n) if da[i] != db[i]), n)
            return DeterminismResult(False, len(fa), f"{rel}: first difference at byte {off}")
    return DeterminismResult(True, len(fa))


def verify_determinism(
    cfg: ExperimentConfig,
    entropy_hook: Callable[[Path], None] | None = None,
    workdir: str | Path | None = None,
    reference: str | Path | None = None,
) -> DeterminismResult:
    """Run the pipeline twice from scratch (no weight cache) and compare every artifact byte-wise.

    ``entropy_hook`` is called with each run's output directory after the run; tests use it to plant
    unseeded bytes. With ``reference`` (the output of an earlier uncached run of the same config) only
    one fresh run is made and compared against it.
    """
    cfg = dataclasses.replace(cfg, output=dataclasses.replace(cfg.output, cache_dir=""))
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        dirs = [Path(tmp) / "run_a", Path(tmp) / "run_b"]
        if reference is not None:
            dirs[0] = Path(reference)
        for d in dirs[1 if reference is not None else 0 :]:
            run_experiment(cfg, d)
            if entropy_hook is not None:
                entropy_hook(d)
        return compare_trees(*dirs)


def aggregates_from_csv(path: str | Path) -> dict[str, float]:
    return compute_aggregates(read_rows_csv(Path(path)))
