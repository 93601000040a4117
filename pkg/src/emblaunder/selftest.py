"""Fast internal consistency checks: op gradients, projection properties and the linear-encoder oracle."""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .attack import AttackConfig, LinearEncoder, TargetSpec, pgd_attack, project_linf, resolve_targets


def _weighted(out: ad.Tensor, w: np.ndarray) -> ad.Tensor:
    return ad.tsum(out * ad.constant(w))


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(margin, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def gradcheck_cases(rng: np.random.Generator) -> Iterator[tuple[str, Callable[..., ad.Tensor], list[np.ndarray]]]:
    """One random instance of every differentiable op, each reduced to a scalar by a fixed random weighting."""
    n = rng.normal

    w = n(size=(2, 3))
    yield "add", lambda a, b: _weighted(a + b, w), [n(size=(2, 3)), n(size=(3,))]
    yield "sub", lambda a, b: _weighted(a - b, w), [n(size=(2, 3)), n(size=(2, 1))]
    yield "mul", lambda a, b: _weighted(a * b, w), [n(size=(2, 3)), n(size=(1, 3))]
    yield "relu", lambda a: _weighted(ad.relu(a), w), [_away_from_zero(rng, (2, 3))]
    yield "gelu", lambda a: _weighted(ad.gelu(a), w), [n(size=(2, 3))]
    lo, hi = -0.5, 0.5
    x = rng.uniform(-1, 1, (2, 3))
    x[np.abs(np.abs(x) - 0.5) < 0.05] += 0.1  # keep clear of the kinks
    yield "clamp", lambda a: _weighted(ad.clamp(a, lo, hi), w), [x]
    w6 = n(size=(3, 2))
    yield "reshape", lambda a: _weighted(ad.reshape(a, (3, 2)), w6), [n(size=(2, 3))]
    w_t = n(size=(4, 2, 3))
    yield "transpose", lambda a: _weighted(ad.transpose(a, (2, 0, 1)), w_t), [n(size=(2, 3, 4))]
    w_p = n(size=(1, 4, 12))
    yield "patchify", lambda a: _weighted(ad.patchify(a, 2), w_p), [n(size=(1, 4, 4, 3))]
    w_s = n(size=(2,))
    yield "tsum", lambda a: _weighted(ad.tsum(a, axis=1), w_s), [n(size=(2, 3))]
    w_m = n(size=(3,))
    yield "mean", lambda a: _weighted(ad.mean(a, axis=0), w_m), [n(size=(2, 3))]
    w_mm = n(size=(2, 4))
    yield "matmul", lambda a, b: _weighted(a @ b, w_mm), [n(size=(2, 3)), n(size=(3, 4))]
    w_c = n(size=(1, 3, 3, 2))
    yield "conv2d", lambda a, k: _weighted(ad.conv2d(a, k, stride=2, padding=1), w_c), [
        n(size=(1, 5, 5, 2)),
        n(size=(3, 3, 2, 2)),
    ]
    rows, cols = rng.random((2, 3, 4)), rng.random((1, 5, 4))
    w_r = n(size=(2, 3, 5, 2))
    yield "resample", lambda a: _weighted(ad.resample(a, rows, cols), w_r), [n(size=(2, 4, 4, 2))]
    w_b = n(size=(1, 3, 5, 3))
    yield "bilinear_resize", lambda a: _weighted(ad.bilinear_resize(a, 3, 5), w_b), [n(size=(1, 4, 4, 3))]
    w_ln = n(size=(2, 4))
    yield "layer_norm", lambda a, g, b: _weighted(ad.layer_norm(a, g, b), w_ln), [
        n(size=(2, 4)),
        n(size=(4,)),
        n(size=(4,)),
    ]
    w_sm = n(size=(2, 4))
    yield "softmax", lambda a: _weighted(ad.softmax(a, axis=-1), w_sm), [n(size=(2, 4))]
    targets = rng.integers(0, 4, 3)
    yield "cross_entropy", lambda a: ad.cross_entropy(a, targets), [n(size=(3, 4))]
    w_l2 = n(size=(2, 4))
    yield "l2_normalize", lambda a: _weighted(ad.l2_normalize(a, axis=-1), w_l2), [n(size=(2, 4))]
    w_cs = n(size=(2,))
    yield "cosine_similarity", lambda a, b: _weighted(ad.cosine_similarity(a, b, axis=-1), w_cs), [
        n(size=(2, 4)),
        n(size=(2, 4)),
    ]


OP_NAMES = tuple(name for name, _, _ in gradcheck_cases(np.random.default_rng(0)))


def check_gradients(instances: int = 3, seed: int = 0, tol: float = 1e-3) -> dict[str, float]:
    """Worst relative error per op over ``instances`` random draws."""
    rng = np.random.default_rng(seed)
    worst = {name: 0.0 for name in OP_NAMES}
    for _ in range(instances):
        for name, fn, inputs in gradcheck_cases(rng):
            worst[name] = max(worst[name], ad.grad_check(fn, inputs, tol=tol).worst)
    return worst


def check_projection(trials: int = 200, seed: int = 0) -> bool:
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        src = rng.random((4, 4, 3)).astype(np.float32)
        eps = float(rng.uniform(0, 0.2))
        x = (src + rng.normal(0, 0.3, src.shape)).astype(np.float32)
        p = project_linf(x, src, eps)
        if np.abs(p.astype(np.float64) - src).max() > eps + 1e-6 or p.min() < 0 or p.max() > 1:
            return False
        if not np.array_equal(project_linf(p, src, eps), p):
            return False
    return True


def linear_oracle_gap(rng: np.random.Generator, size: int = 4, dim: int = 5, steps: int = 40) -> float:
    """Largest per-pixel gap between dot-objective PGD and the signed-corner optimum on one random instance."""
    enc = LinearEncoder(rng.normal(size=(dim, size * size * 3)), size)
    src = rng.random((size, size, 3)).astype(np.float32)
    spec = TargetSpec.image_target(rng.random((size, size, 3)).astype(np.float32))
    eps = 8 / 255
    cfg = AttackConfig(epsilon=eps, steps=steps, eot=False, objective="dot", ensemble=("L",))
    res = pgd_attack(src, spec, cfg, {"L": enc})
    target = resolve_targets(spec, {"L": enc})[0].embedding
    oracle = enc.corner_optimum(src, target, eps)
    return float(np.abs(res.adv.astype(np.float64) - oracle).max())


def check_linear_oracle(instances: int = 3, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    return max(linear_oracle_gap(rng) for _ in range(instances))


def run_selftest(emit: Callable[[str], None] = print) -> bool:
    ok = True
    grads = check_gradients()
    for name, err in grads.items():
        passed = err <= 1e-3
        ok &= passed
        emit(f"{'PASS' if passed else 'FAIL'} grad_check {name}: max rel err {err:.2e}")
    proj = check_projection()
    ok &= proj
    emit(f"{'PASS' if proj else 'FAIL'} projection stays in the ball and is idempotent")
    gap = check_linear_oracle()
    ok &= gap <= 1e-3
    emit(f"{'PASS' if gap <= 1e-3 else 'FAIL'} linear-encoder oracle: max pixel gap {gap:.2e}")
    return bool(ok)
