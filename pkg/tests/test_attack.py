import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emblaunder import autodiff as ad
from emblaunder.attack import (
    IDENTITY_RANGES,
    AttackConfig,
    AttackError,
    LinearEncoder,
    TargetSpec,
    apply_transforms,
    pgd_attack,
    pgd_attack_batch,
    project_linf,
    random_baseline,
    resolve_targets,
    sample_transform,
)


def _linear(rng, size=4, dim=5, normalize=False):
    return LinearEncoder(rng.normal(size=(dim, size * size * 3)), size, normalize=normalize)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 0.2), st.floats(0.001, 0.1))
def test_iterates_stay_in_ball_and_box(seed, eps, alpha):
    rng = np.random.default_rng(seed)
    enc = _linear(rng, normalize=True)
    src = rng.random((4, 4, 3)).astype(np.float32)
    cfg = AttackConfig(epsilon=eps, steps=8, step_size=alpha, eot_samples=2, ensemble=("L",))
    seen = []

    def check(step, x):
        seen.append(step)
        assert np.abs(x.astype(np.float64) - src).max() <= eps + 1e-6
        assert x.min() >= 0.0 and x.max() <= 1.0

    pgd_attack(src, TargetSpec.image_target(rng.random((4, 4, 3))), cfg, {"L": enc}, seed=1, on_step=check)
    assert seen == list(range(8))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 0.3))
def test_projection_is_idempotent_and_feasible(seed, eps):
    rng = np.random.default_rng(seed)
    src = rng.random((3, 3, 3)).astype(np.float32)
    p = project_linf(src + rng.normal(0, 0.5, src.shape), src, eps)
    assert np.abs(p.astype(np.float64) - src).max() <= eps + 1e-6
    assert 0 <= p.min() and p.max() <= 1
    np.testing.assert_array_equal(project_linf(p, src, eps), p)


@pytest.mark.parametrize("seed", range(4))
def test_linear_dot_attack_reaches_corner(seed):
    rng = np.random.default_rng(seed)
    enc = _linear(rng)
    src = rng.random((4, 4, 3)).astype(np.float32)
    target = rng.random((4, 4, 3)).astype(np.float32)
    eps = 8 / 255
    cfg = AttackConfig(epsilon=eps, steps=40, eot=False, objective="dot", ensemble=("L",))
    adv = pgd_attack(src, TargetSpec.image_target(target), cfg, {"L": enc}).adv
    e = enc.weight.astype(np.float64) @ target.reshape(-1)
    corner = np.clip(src + eps * np.sign(enc.weight.T.astype(np.float64) @ e).reshape(src.shape), 0, 1)
    assert np.abs(adv - corner).max() <= 1e-3


def test_zero_budget_and_zero_steps_return_source(tiny_cnn, rng):
    src = rng.random((32, 32, 3)).astype(np.float32)
    spec = TargetSpec.label_target(3)
    for cfg in (AttackConfig(epsilon=0.0, steps=3, ensemble=("C",)), AttackConfig(steps=0, ensemble=("C",))):
        res = pgd_attack(src, spec, cfg, {"C": tiny_cnn})
        np.testing.assert_array_equal(res.adv, src)


def test_attack_is_deterministic_and_raises_target_similarity(tiny_cnn, tiny_vit, rng):
    src = rng.random((32, 32, 3)).astype(np.float32)
    ens = {"A": tiny_cnn, "B": tiny_vit}
    cfg = AttackConfig(epsilon=8 / 255, steps=12, eot_samples=2, ensemble=("A", "B"), seed=3)
    a = pgd_attack(src, TargetSpec.label_target(5), cfg, ens, seed=9)
    b = pgd_attack(src, TargetSpec.label_target(5), cfg, ens, seed=9)
    np.testing.assert_array_equal(a.adv, b.adv)
    assert a.trace == b.trace and len(a.trace) == 12
    assert a.trace[-1] > a.trace[0]
    assert a.linf <= 8 / 255 + 1e-6


def test_away_target_lowers_similarity_to_source(tiny_cnn, rng):
    src = rng.random((32, 32, 3)).astype(np.float32)
    cfg = AttackConfig(epsilon=16 / 255, steps=10, eot_samples=2, ensemble=("C",))
    res = pgd_attack(src, TargetSpec.away_from_source(), cfg, {"C": tiny_cnn})
    assert res.final_cosine["C"] < 1.0
    assert res.trace[-1] > res.trace[0]


def test_away_target_without_eot_or_random_start_is_a_fixed_point(tiny_cnn, rng):
    # the source maximizes its own cosine, so the first gradient is zero and sign(0) never moves
    src = rng.random((32, 32, 3)).astype(np.float32)
    cfg = AttackConfig(epsilon=16 / 255, steps=3, eot=False, ensemble=("C",))
    res = pgd_attack(src, TargetSpec.away_from_source(), cfg, {"C": tiny_cnn})
    np.testing.assert_array_equal(res.adv, src)
    cfg = AttackConfig(epsilon=16 / 255, steps=3, eot=False, random_start=True, ensemble=("C",))
    assert pgd_attack(src, TargetSpec.away_from_source(), cfg, {"C": tiny_cnn}).final_cosine["C"] < 1.0


def test_batch_matches_single_source_runs(tiny_cnn, rng):
    srcs = rng.random((3, 32, 32, 3)).astype(np.float32)
    specs = [TargetSpec.label_target(i) for i in range(3)]
    cfg = AttackConfig(steps=4, eot_samples=2, ensemble=("C",))
    batch = pgd_attack_batch(srcs, specs, cfg, {"C": tiny_cnn}, seeds=[10, 11, 12])
    single = pgd_attack(srcs[1], specs[1], cfg, {"C": tiny_cnn}, seed=11)
    np.testing.assert_allclose(batch[1].adv, single.adv, atol=1e-6)


def test_resolve_targets_errors(tiny_cnn, rng):
    with pytest.raises(AttackError):
        resolve_targets(TargetSpec.label_target(99), {"C": tiny_cnn})
    with pytest.raises(AttackError):
        resolve_targets(TargetSpec.away_from_source(), {"C": tiny_cnn})
    with pytest.raises(AttackError):
        resolve_targets(TargetSpec.label_target(0), {})
    (t,) = resolve_targets(TargetSpec.label_target(4), {"C": tiny_cnn})
    np.testing.assert_allclose(t.embedding, tiny_cnn.label_embeddings()[4])


@pytest.mark.parametrize(
    "kwargs",
    [
        {"epsilon": -0.1},
        {"steps": -1},
        {"eot_samples": 0},
        {"crop_scale": (0.9, 0.8)},
        {"brightness": (0.0, 1.0)},
        {"objective": "l2"},
    ],
)
def test_invalid_attack_config(kwargs):
    with pytest.raises(ValueError):
        AttackConfig(**kwargs)


def test_default_step_size_is_tenth_of_budget_at_500_steps():
    cfg = AttackConfig()
    assert cfg.effective_step_size == pytest.approx(cfg.epsilon / 10)


def test_degenerate_transform_is_identity(rng):
    t = sample_transform(rng, IDENTITY_RANGES, 8)
    assert t.is_identity(8)
    x = ad.Tensor(rng.random((1, 8, 8, 3)).astype(np.float32))
    assert apply_transforms([t], x) is x


def test_full_crop_resample_is_identity(rng):
    t = sample_transform(rng, IDENTITY_RANGES, 8)
    t = type(t)(t.top, t.left, t.side, 1.0 + 1e-9, None)  # forces the resample path
    x = rng.random((1, 8, 8, 3))
    out = apply_transforms([t], ad.Tensor(x, dtype=np.float64)).numpy()
    np.testing.assert_allclose(out, x, atol=1e-6)


def test_random_baseline_is_seeded_and_bounded(rng):
    src = rng.random((6, 6, 3)).astype(np.float32)
    a = random_baseline(src, 8 / 255, 4)
    np.testing.assert_array_equal(a, random_baseline(src, 8 / 255, 4))
    assert np.abs(a.astype(np.float64) - src).max() <= 8 / 255 + 1e-6
