"""Ensemble embedding-space PGD with expectation over random differentiable transforms.

Maximizes  sum_f sign_f * cos(f(t(x)), e_f)  averaged over sampled transforms t,
subject to ||x - src||_inf <= epsilon and x in [0, 1].
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import NUM_CLASSES
from .image_io import check_image, resize_bilinear_eval

DEFAULT_EPSILON = 8 / 255
DESK_STEPS = 500
REFERENCE_STEPS = 15000


class AttackError(RuntimeError):
    pass


class Embedder(Protocol):
    input_size: int

    def embed_tensor(self, x: Tensor) -> Tensor: ...


# --- configuration -------------------------------------------------------------


@dataclass
class AttackConfig:
    epsilon: float = DEFAULT_EPSILON
    steps: int = DESK_STEPS
    step_size: float | None = None  # None -> 50 * epsilon / steps (epsilon / 10 at 500 steps)
    eot_samples: int = 4
    eot: bool = True
    crop_scale: tuple[float, float] = (0.8, 1.0)
    brightness: tuple[float, float] = (0.9, 1.1)
    noise_sigma: float = 2 / 255
    ensemble: tuple[str, ...] = ("S1", "S2", "S3")
    objective: str = "cosine"
    seed: int = 0
    random_start: bool = False

    def __post_init__(self):
        self.crop_scale = tuple(float(v) for v in self.crop_scale)
        self.brightness = tuple(float(v) for v in self.brightness)
        self.ensemble = tuple(self.ensemble)
        self.validate()

    def validate(self):
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.step_size is not None and self.step_size < 0:
            raise ValueError("step_size must be >= 0")
        if self.eot_samples < 1:
            raise ValueError("eot_samples must be >= 1")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        lo, hi = self.brightness
        if not 0 < lo <= hi:
            raise ValueError(f"brightness range must satisfy 0 < lo <= hi, got {self.brightness}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.objective not in ("cosine", "dot"):
            raise ValueError(f"objective must be 'cosine' or 'dot', got {self.objective!r}")

    @property
    def effective_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 50.0 * self.epsilon / self.steps if self.steps else 0.0

    @property
    def ranges(self) -> "AugmentRanges":
        return AugmentRanges(self.crop_scale, self.brightness, self.noise_sigma)


@dataclass(frozen=True)
class AugmentRanges:
    crop_scale: tuple[float, float] = (0.8, 1.0)
    brightness: tuple[float, float] = (0.9, 1.1)
    noise_sigma: float = 2 / 255

    @property
    def degenerate(self) -> bool:
        return self.crop_scale == (1.0, 1.0) and self.brightness == (1.0, 1.0) and self.noise_sigma == 0


IDENTITY_RANGES = AugmentRanges((1.0, 1.0), (1.0, 1.0), 0.0)


# --- targets -----------------------------------------------------------------------


@dataclass(frozen=True)
class TargetSpec:
    kind: str  # "image" | "label" | "away"
    image: np.ndarray | None = None
    label: int | None = None

    @classmethod
    def image_target(cls, img) -> "TargetSpec":
        return cls("image", image=check_image(img))

    @classmethod
    def label_target(cls, cid: int) -> "TargetSpec":
        return cls("label", label=int(cid))

    @classmethod
    def away_from_source(cls) -> "TargetSpec":
        """Minimize similarity to the source's own embedding. The source is a stationary point of that
        objective, so this needs EOT or ``random_start`` to move at all."""
        return cls("away")


@dataclass(frozen=True)
class ResolvedTarget:
    encoder_id: str
    embedding: np.ndarray
    sign: float


def _embed_numpy(enc, img: np.ndarray) -> np.ndarray:
    img = resize_bilinear_eval(img, enc.input_size, enc.input_size)
    return enc.embed_tensor(Tensor(img[None])).numpy()[0]


def resolve_targets(spec: TargetSpec, ensemble: Mapping[str, Embedder], src=None) -> list[ResolvedTarget]:
    if not ensemble:
        raise AttackError("ensemble is empty")
    out = []
    for eid, enc in ensemble.items():
        if spec.kind == "image":
            emb, sign = _embed_numpy(enc, spec.image), 1.0
        elif spec.kind == "label":
            if spec.label is None or not 0 <= spec.label < NUM_CLASSES:
                raise AttackError(f"label target {spec.label} out of range [0, {NUM_CLASSES})")
            if not hasattr(enc, "label_embeddings"):
                raise AttackError(f"encoder {eid} has no label head")
            emb, sign = enc.label_embeddings()[spec.label], 1.0
        elif spec.kind == "away":
            if src is None:
                raise AttackError("away_from_source needs the source image")
            emb, sign = _embed_numpy(enc, check_image(src)), -1.0
        else:
            raise AttackError(f"unresolvable target kind {spec.kind!r}")
        out.append(ResolvedTarget(eid, np.asarray(emb, dtype=np.float32), sign))
    return out


# --- transforms ---------------------------------------------------------------------


@dataclass(frozen=True)
class Transform:
    """Square crop [top, top+side-1] x [left, left+side-1], resampled back, then brightness and noise."""

    top: float
    left: float
    side: float
    brightness: float
    noise: np.ndarray | None

    def is_identity(self, size: int) -> bool:
        return self.side == size - 1 and self.top == 0 and self.left == 0 and self.brightness == 1.0 and self.noise is None


def sample_transform(rng: np.random.Generator, ranges: AugmentRanges, size: int) -> Transform:
    """Draws in fixed order (scale, offsets, brightness, noise) regardless of degeneracy."""
    lo, hi = ranges.crop_scale
    scale = rng.uniform(lo, hi) if hi > lo else lo
    extent = np.sqrt(scale) * size  # crop side in pixels
    slack = size - extent
    top = rng.uniform(0, slack) if slack > 0 else 0.0
    left = rng.uniform(0, slack) if slack > 0 else 0.0
    blo, bhi = ranges.brightness
    bright = rng.uniform(blo, bhi) if bhi > blo else blo
    noise = None
    if ranges.noise_sigma > 0:
        noise = rng.normal(0.0, ranges.noise_sigma, (size, size, 3)).astype(np.float32)
    return Transform(float(top), float(left), float(extent - 1), float(bright), noise)


def apply_transforms(transforms: Sequence[Transform], x: Tensor) -> Tensor:
    """Apply transform i to x[i]; x is (N, H, W, 3) with H == W."""
    n, size = x.shape[0], x.shape[1]
    if all(t.is_identity(size) for t in transforms):
        return x
    rows = np.stack([ad.bilinear_matrix(size, size, t.top, t.top + t.side) for t in transforms])
    cols = np.stack([ad.bilinear_matrix(size, size, t.left, t.left + t.side) for t in transforms])
    out = ad.resample(x, rows, cols)
    out = out * np.array([t.brightness for t in transforms], dtype=x.dtype).reshape(n, 1, 1, 1)
    if any(t.noise is not None for t in transforms):
        noise = np.stack([t.noise if t.noise is not None else np.zeros((size, size, 3), np.float32) for t in transforms])
        out = out + noise.astype(x.dtype)
    return ad.clamp(out, 0.0, 1.0)


def apply_transform(t: Transform, x: Tensor) -> Tensor:
    single = x.ndim == 3
    xb = ad.reshape(x, (1,) + x.shape) if single else x
    out = apply_transforms([t] * xb.shape[0], xb)
    return ad.reshape(out, x.shape) if single and out is not xb else (x if out is xb else out)


# --- objective and projection ------------------------------------------------------


def _tile(x: Tensor, k: int) -> Tensor:
    """(B, ...) -> (B*K, ...) repeating each row K times; gradient sums the copies."""
    if k == 1:
        return x
    b = x.shape[0]
    expanded = ad.reshape(x, (b, 1) + x.shape[1:]) + np.zeros((1, k) + x.shape[1:], dtype=x.dtype)
    return ad.reshape(expanded, (b * k,) + x.shape[1:])


def attack_objective(
    x: Tensor,
    ensemble: Mapping[str, Embedder],
    targets: Sequence[Sequence[ResolvedTarget]],
    transforms: Sequence[Sequence[Transform]] | None = None,
    objective: str = "cosine",
) -> Tensor:
    """Sum over sources of mean_k sum_f sign_f * Sim(f(t_k(x_b)), e_f).

    ``targets[b]`` are the resolved targets for source b (one per encoder, in ensemble order);
    ``transforms[b]`` holds the K transforms for source b, or None for the plain path.
    """
    b = x.shape[0]
    k = len(transforms[0]) if transforms is not None else 1
    xs = x
    if transforms is not None:
        xs = apply_transforms([t for per in transforms for t in per], _tile(x, k))
    total = None
    for f_idx, (eid, enc) in enumerate(ensemble.items()):
        emb_t = np.repeat(np.stack([targets[i][f_idx].embedding for i in range(b)]), k, axis=0)
        signs = np.repeat(np.array([targets[i][f_idx].sign for i in range(b)], dtype=x.dtype), k)
        xin = ad.bilinear_resize(xs, enc.input_size, enc.input_size)
        emb = enc.embed_tensor(xin)
        if objective == "cosine":
            sim = ad.cosine_similarity(emb, emb_t.astype(emb.dtype), axis=-1)
        else:
            sim = ad.tsum(emb * emb_t.astype(emb.dtype), axis=-1)
        term = sim * signs
        total = term if total is None else total + term
    per_source = ad.mean(ad.reshape(total, (b, k)), axis=1)
    return per_source


def project_linf(x, src, epsilon: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    src = np.asarray(src, dtype=np.float32)
    if x.shape != src.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {src.shape}")
    eps = np.float32(epsilon)
    return np.clip(np.clip(x, src - eps, src + eps), 0.0, 1.0)


def random_baseline(src, epsilon: float, seed: int) -> np.ndarray:
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    src = check_image(src)
    rng = np.random.default_rng(seed)
    noise = rng.uniform(-epsilon, epsilon, src.shape).astype(np.float32)
    return project_linf(src + noise, src, epsilon)


# --- PGD ---------------------------------------------------------------------------


@dataclass
class AttackResult:
    adv: np.ndarray
    trace: list[float]
    final_cosine: dict[str, float]
    linf: float
    wall_time: float
    config: dict = field(default_factory=dict)


def pgd_attack_batch(
    srcs: np.ndarray,
    targets: Sequence[TargetSpec],
    cfg: AttackConfig,
    ensemble: Mapping[str, Embedder],
    seeds: Sequence[int] | None = None,
    on_step: Callable[[int, np.ndarray], None] | None = None,
) -> list[AttackResult]:
    """Independent attacks on each source, evaluated together in one graph per iteration.

    Source b draws its transforms from ``default_rng([cfg.seed, seeds[b]])``. ``on_step(step, x)``
    sees the projected batch after every update.
    """
    cfg.validate()
    srcs = np.stack([check_image(s) for s in srcs])
    b, size = srcs.shape[0], srcs.shape[1]
    if srcs.shape[1] != srcs.shape[2]:
        raise AttackError("working images must be square")
    if len(targets) != b:
        raise AttackError("one target spec per source is required")
    if not ensemble:
        raise AttackError("ensemble is empty")
    seeds = list(range(b)) if seeds is None else list(seeds)
    rngs = [np.random.default_rng([cfg.seed, int(s)]) for s in seeds]
    resolved = [resolve_targets(t, ensemble, s) for t, s in zip(targets, srcs)]
    alpha = np.float32(cfg.effective_step_size)
    ranges = cfg.ranges
    start = time.perf_counter()

    x = srcs.copy()
    if cfg.random_start and cfg.epsilon > 0:
        x = np.stack([project_linf(s + r.uniform(-cfg.epsilon, cfg.epsilon, s.shape), s, cfg.epsilon) for s, r in zip(srcs, rngs)])
    traces: list[list[float]] = [[] for _ in range(b)]
    for step in range(cfg.steps):
        transforms = None
        if cfg.eot:
            transforms = [[sample_transform(r, ranges, size) for _ in range(cfg.eot_samples)] for r in rngs]
        leaf = Tensor(x, requires_grad=True)
        try:
            per_source = attack_objective(leaf, ensemble, resolved, transforms, cfg.objective)
            grad = ad.backward(ad.tsum(per_source))[leaf]
        except ad.NonFiniteError as exc:
            raise AttackError(f"non-finite objective or gradient at step {step}: {exc}") from exc
        for i, v in enumerate(per_source.data.tolist()):
            traces[i].append(v)
        x = project_linf(x + alpha * np.sign(grad).astype(np.float32), srcs, cfg.epsilon)
        if on_step is not None:
            on_step(step, x)
    elapsed = time.perf_counter() - start

    results = []
    echo = asdict(cfg)
    for i in range(b):
        finals = {}
        for f_idx, (eid, enc) in enumerate(ensemble.items()):
            rt = resolved[i][f_idx]
            emb = _embed_numpy(enc, x[i])
            if cfg.objective == "cosine":
                finals[eid] = float(np.dot(emb, rt.embedding) / (np.linalg.norm(emb) * np.linalg.norm(rt.embedding)))
            else:
                finals[eid] = float(np.dot(emb, rt.embedding))
        results.append(
            AttackResult(
                adv=x[i].copy(),
                trace=traces[i],
                final_cosine=finals,
                linf=float(np.abs(x[i] - srcs[i]).max()),
                wall_time=elapsed / b,
                config=echo,
            )
        )
    return results


def pgd_attack(
    src, spec: TargetSpec, cfg: AttackConfig, ensemble: Mapping[str, Embedder], seed: int = 0, on_step=None
) -> AttackResult:
    hook = None if on_step is None else (lambda step, x: on_step(step, x[0]))
    return pgd_attack_batch(np.asarray(src)[None], [spec], cfg, ensemble, [seed], on_step=hook)[0]


class LinearEncoder:
    """f(x) = W vec(x), optionally L2-normalized. Used for closed-form checks."""

    def __init__(self, weight: np.ndarray, input_size: int, normalize: bool = False):
        self.weight = np.asarray(weight, dtype=np.float32)
        self.input_size = input_size
        self.normalize = normalize
        self._wt = Tensor(self.weight.T.copy())

    def embed_tensor(self, x: Tensor) -> Tensor:
        flat = ad.reshape(x, (x.shape[0], -1)) @ self._wt
        return ad.l2_normalize(flat, axis=-1) if self.normalize else flat

    def corner_optimum(self, src: np.ndarray, target: np.ndarray, epsilon: float) -> np.ndarray:
        """argmax of <W x, e> over the box: push each pixel by epsilon along sign(W^T e), then clip."""
        direction = np.sign(self.weight.T.astype(np.float64) @ np.asarray(target, np.float64))
        return np.clip(src + epsilon * direction.reshape(src.shape), 0.0, 1.0)
