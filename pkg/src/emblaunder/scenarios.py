"""Attack families, simulated downstream consumers, and ASR accounting.

Consumers only ever see held-out encoder embeddings of the quantized image.
The attack itself only ever sees the surrogate ensemble.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .attack import (
    AttackConfig,
    AugmentRanges,
    TargetSpec,
    apply_transforms,
    pgd_attack_batch,
    random_baseline,
    resolve_targets,
    sample_transform,
)
from .autodiff import Tensor
from .data import NUM_CLASSES, ShapeDataset
from .encoders import Encoder
from .image_io import check_image, quantize_roundtrip, resize_bilinear_eval

FAMILIES = ("narrative", "identity", "commercial", "compliance")
FLAGGED, CLEAN = "flagged", "clean"
EVAL_JITTER = AugmentRanges(crop_scale=(0.9, 1.0), brightness=(0.95, 1.05), noise_sigma=1 / 255)
ATTACK_CHUNK = 64


class ScenarioError(ValueError):
    pass


def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ScenarioError("zero-norm embedding")
    return v / n


# --- consumers ---------------------------------------------------------------------


@dataclass
class IdentityGallery:
    prototypes: np.ndarray  # (classes, d), unit rows

    def verdict(self, e: np.ndarray) -> str:
        return str(classify_identity(self, e))


def build_identity_gallery(held_out: Encoder, data: ShapeDataset) -> IdentityGallery:
    counts = np.bincount(data.labels, minlength=NUM_CLASSES)
    if len(counts) > NUM_CLASSES or counts.min() == 0:
        missing = [c for c in range(NUM_CLASSES) if counts[c] == 0]
        raise ScenarioError(f"gallery has no images for classes {missing}")
    emb = held_out.embed(data.images).astype(np.float64)
    protos = np.stack([emb[data.labels == c].mean(axis=0) for c in range(NUM_CLASSES)])
    return IdentityGallery(_unit(protos).astype(np.float32))


def classify_identity(gallery: IdentityGallery, e: np.ndarray) -> int:
    e = np.asarray(e, dtype=np.float64)
    if e.shape != gallery.prototypes.shape[1:]:
        raise ScenarioError(f"embedding dim {e.shape} does not match gallery {gallery.prototypes.shape[1:]}")
    scores = gallery.prototypes.astype(np.float64) @ _unit(e)
    return int(np.argmax(scores))  # first maximum -> lowest class id on exact ties


@dataclass
class LabelRetriever:
    """Narrative consumer: which label (toy caption) the held-out encoder retrieves."""

    label_embeddings: np.ndarray

    def verdict(self, e: np.ndarray) -> str:
        return str(int(np.argmax(self.label_embeddings.astype(np.float64) @ _unit(e))))


@dataclass
class ContentFilter:
    unsafe_prototypes: np.ndarray  # (m, d)
    threshold: float

    def __post_init__(self):
        if not -1 < self.threshold < 1:
            raise ScenarioError(f"threshold must lie in (-1, 1), got {self.threshold}")

    def score(self, e: np.ndarray) -> float:
        e = np.asarray(e, dtype=np.float64)
        if e.shape != self.unsafe_prototypes.shape[1:]:
            raise ScenarioError("embedding dimension does not match filter")
        return float(np.max(_unit(self.unsafe_prototypes) @ _unit(e)))

    def verdict(self, e: np.ndarray) -> str:
        return filter_decision(self, e)


def filter_decision(filt: ContentFilter, e: np.ndarray) -> str:
    return FLAGGED if filt.score(e) >= filt.threshold else CLEAN


def build_content_filter(
    held_out: Encoder, gallery: ShapeDataset, unsafe_classes: Sequence[int], unsafe_images, safe_images
) -> ContentFilter:
    """Prototypes are per-class gallery means; the threshold is the midpoint of the gap between
    the weakest clean unsafe calibration image and the strongest clean safe one."""
    g = build_identity_gallery(held_out, gallery)
    protos = g.prototypes[list(unsafe_classes)]
    probe = ContentFilter(protos, 0.0)
    unsafe = [probe.score(held_out.embed(quantize_roundtrip(x))) for x in unsafe_images]
    safe = [probe.score(held_out.embed(quantize_roundtrip(x))) for x in safe_images]
    lo, hi = max(safe), min(unsafe)
    if not lo < hi:
        raise ScenarioError(f"filter cannot separate calibration images (max safe {lo:.4f} >= min unsafe {hi:.4f})")
    return ContentFilter(protos, float((lo + hi) / 2))


@dataclass
class ProductRanker:
    """Commercial consumer: rank of the attacker's product among competitors by proximity to a premium prototype."""

    premium: np.ndarray
    competitors: np.ndarray  # (m, d) embeddings of clean competitor listings

    def verdict(self, e: np.ndarray) -> str:
        order = rank_products(self.premium, [e] + list(self.competitors))
        return str(order.index(0) + 1)


def rank_products(premium: np.ndarray, candidates: Sequence[np.ndarray]) -> list[int]:
    """Candidate indices by descending cosine to ``premium``; ties keep input order."""
    if len(candidates) == 0:
        raise ScenarioError("no candidates to rank")
    p = _unit(premium)
    scores = [float(_unit(c) @ p) for c in candidates]
    return sorted(range(len(candidates)), key=lambda i: -scores[i])


_CONSUMER_KIND = {
    "identity": IdentityGallery,
    "narrative": LabelRetriever,
    "compliance": ContentFilter,
    "commercial": ProductRanker,
}


# --- success rules (pure functions of a row) ---------------------------------------------


def targeted_success(family: str, verdict: str, target_id: int, clean_src_verdict: str) -> bool:
    if family in ("identity", "narrative"):
        return verdict == str(target_id)
    if family == "compliance":
        return verdict == CLEAN
    if family == "commercial":
        return verdict == "1"
    raise ScenarioError(f"unknown family {family!r}")


def untargeted_success(family: str, verdict: str, source_id: int, clean_src_verdict: str) -> bool:
    if family in ("identity", "narrative"):
        return verdict != str(source_id)
    if family == "compliance":
        return verdict != FLAGGED
    if family == "commercial":
        return verdict != clean_src_verdict
    raise ScenarioError(f"unknown family {family!r}")


# --- scenario specs / rows / report -------------------------------------------------------------------


@dataclass
class ScenarioSpec:
    family: str
    sources: list[np.ndarray]
    source_ids: list[int]
    targets: list[TargetSpec]
    target_ids: list[int]
    consumer: object  # one consumer, or a list with one per source
    target_images: list[np.ndarray | None] | None = None
    trials: int = 5
    prompt_label: str = ""
    jitter: AugmentRanges | None = EVAL_JITTER
    seed: int = 0

    def consumer_for(self, i: int):
        return self.consumer[i] if isinstance(self.consumer, (list, tuple)) else self.consumer

    def validate(self):
        if self.family not in FAMILIES:
            raise ScenarioError(f"unknown family {self.family!r}")
        if not self.sources:
            raise ScenarioError("scenario has no sources")
        n = len(self.sources)
        if not (len(self.source_ids) == len(self.targets) == len(self.target_ids) == n):
            raise ScenarioError("sources, ids and targets must align")
        if self.target_images is not None and len(self.target_images) != n:
            raise ScenarioError("target_images must align with sources")
        consumers = self.consumer if isinstance(self.consumer, (list, tuple)) else [self.consumer]
        if isinstance(self.consumer, (list, tuple)) and len(consumers) != n:
            raise ScenarioError("a per-source consumer list must align with sources")
        for c in consumers:
            if not isinstance(c, _CONSUMER_KIND[self.family]):
                raise ScenarioError(
                    f"{self.family} scenario needs a {_CONSUMER_KIND[self.family].__name__}, got {type(c).__name__}"
                )
        if self.trials < 1:
            raise ScenarioError("trials must be >= 1")


@dataclass(frozen=True)
class ScenarioRow:
    family: str
    source_id: int
    target_id: int
    trial: int
    verdict_clean_src: str
    verdict_clean_tgt: str
    verdict_adv: str
    verdict_noise: str
    linf: float
    final_cos_heldout: float


CSV_COLUMNS = tuple(ScenarioRow.__dataclass_fields__)


def compute_aggregates(rows: Sequence[ScenarioRow]) -> dict[str, float]:
    """Every aggregate is a pure function of the rows."""
    n = len(rows)
    if n == 0:
        return {"rows": 0}

    def rate(pred):
        return sum(1 for r in rows if pred(r)) / n

    agg = {
        "rows": n,
        "targeted_asr": rate(lambda r: targeted_success(r.family, r.verdict_adv, r.target_id, r.verdict_clean_src)),
        "untargeted_asr": rate(lambda r: untargeted_success(r.family, r.verdict_adv, r.source_id, r.verdict_clean_src)),
        "noise_targeted_asr": rate(
            lambda r: targeted_success(r.family, r.verdict_noise, r.target_id, r.verdict_clean_src)
        ),
        "noise_untargeted_asr": rate(
            lambda r: untargeted_success(r.family, r.verdict_noise, r.source_id, r.verdict_clean_src)
        ),
        "clean_src_targeted_rate": rate(
            lambda r: targeted_success(r.family, r.verdict_clean_src, r.target_id, r.verdict_clean_src)
        ),
        "mean_final_cos_heldout": sum(r.final_cos_heldout for r in rows) / n,
        "max_linf": max(r.linf for r in rows),
    }
    if rows[0].family == "compliance":
        agg["clean_src_flag_rate"] = rate(lambda r: r.verdict_clean_src == FLAGGED)
        agg["clean_tgt_flag_rate"] = rate(lambda r: r.verdict_clean_tgt == FLAGGED)
        agg["adv_accept_rate"] = rate(lambda r: r.verdict_adv == CLEAN)
    return agg


@dataclass
class ScenarioReport:
    family: str
    rows: list[ScenarioRow]
    adv_images: list[np.ndarray] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def aggregates(self) -> dict[str, float]:
        return compute_aggregates(self.rows)


# --- evaluation --------------------------------------------------------------------------------


def heldout_embedding(held_out: Encoder, img, jitter: AugmentRanges | None, seed, quantize: bool = True) -> np.ndarray:
    x = check_image(img)
    if quantize:
        x = quantize_roundtrip(x)
    x = resize_bilinear_eval(x, held_out.input_size, held_out.input_size)
    t = Tensor(x[None])
    if jitter is not None:
        rng = np.random.default_rng(seed)
        t = apply_transforms([sample_transform(rng, jitter, x.shape[0])], t)
    return held_out.embed_tensor(t).numpy()[0]


def evaluate_trial(consumer, adv, held_out: Encoder, seed, jitter: AugmentRanges | None = EVAL_JITTER, quantize=True) -> str:
    """One consumer verdict on the held-out view of ``adv`` after 8-bit quantization and a fresh jitter."""
    return consumer.verdict(heldout_embedding(held_out, adv, jitter, seed, quantize))


def _check_separation(ensemble: Mapping[str, Encoder], held_out: Encoder):
    for eid, enc in ensemble.items():
        if enc is held_out:
            raise ScenarioError(f"held-out encoder appears in the attack ensemble as {eid!r}")
        if isinstance(enc, Encoder) and enc.params.get("head.w") is held_out.params.get("head.w"):
            raise ScenarioError(f"ensemble member {eid!r} shares parameters with the held-out encoder")


def run_scenario(
    spec: ScenarioSpec,
    ensemble: Mapping[str, Encoder],
    held_out: Encoder,
    cfg: AttackConfig,
    eval_quantize: bool = True,
    adv_images: Sequence[np.ndarray] | None = None,
) -> ScenarioReport:
    """Attack every (source, target) pair with the surrogates, then score J jittered trials on the held-out consumer.

    ``adv_images`` skips the attack and re-scores precomputed adversarial images.
    """
    spec.validate()
    _check_separation(ensemble, held_out)
    n = len(spec.sources)
    srcs = np.stack([check_image(s) for s in spec.sources])

    if adv_images is None:
        advs = []
        for start in range(0, n, ATTACK_CHUNK):
            stop = min(start + ATTACK_CHUNK, n)
            results = pgd_attack_batch(srcs[start:stop], spec.targets[start:stop], cfg, ensemble, range(start, stop))
            advs.extend(r.adv for r in results)
    else:
        advs = [check_image(a) for a in adv_images]
        if len(advs) != n:
            raise ScenarioError("one adversarial image per source is required")

    rows = []
    for i in range(n):
        consumer = spec.consumer_for(i)
        src, adv = srcs[i], advs[i]
        ref = resolve_targets(spec.targets[i], {"H": held_out}, src)[0]
        e_adv = heldout_embedding(held_out, adv, None, None, eval_quantize)
        cos = float(_unit(e_adv) @ _unit(ref.embedding))
        v_src = consumer.verdict(heldout_embedding(held_out, src, None, None))
        timg = spec.target_images[i] if spec.target_images is not None else None
        v_tgt = consumer.verdict(heldout_embedding(held_out, timg, None, None)) if timg is not None else ""
        linf = float(np.abs(adv.astype(np.float64) - src).max())
        for trial in range(spec.trials):
            noise = random_baseline(src, cfg.epsilon, seed=[spec.seed, i, trial, 0])
            rows.append(
                ScenarioRow(
                    family=spec.family,
                    source_id=int(spec.source_ids[i]),
                    target_id=int(spec.target_ids[i]),
                    trial=trial,
                    verdict_clean_src=v_src,
                    verdict_clean_tgt=v_tgt,
                    verdict_adv=evaluate_trial(
                        consumer, adv, held_out, [spec.seed, i, trial, 1], spec.jitter, eval_quantize
                    ),
                    verdict_noise=evaluate_trial(consumer, noise, held_out, [spec.seed, i, trial, 2], spec.jitter),
                    linf=linf,
                    final_cos_heldout=cos,
                )
            )
    echo = {"attack": asdict(cfg), "trials": spec.trials, "prompt_label": spec.prompt_label, "seed": spec.seed}
    return ScenarioReport(spec.family, rows, list(advs), echo)

