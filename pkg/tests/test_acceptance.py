"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line in the terminal summary.

Criteria 4-10 share one uncached standard run (pinned seed, default config), built once per session.
"""

import time

import numpy as np
import pytest

from emblaunder import autodiff as ad
from emblaunder.attack import AttackConfig, LinearEncoder, TargetSpec, pgd_attack
from emblaunder.config import ExperimentConfig
from emblaunder.encoders import retrieval_accuracy
from emblaunder.experiment import run_ablation, run_experiment, run_family, verify_determinism
from emblaunder.scenarios import run_scenario
from emblaunder.selftest import OP_NAMES, gradcheck_cases
from emblaunder.experiment import build_scenario
from emblaunder.zoo import build_zoo

from conftest import ACCEPTANCE

EPS = 8 / 255


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# --- criteria 1-3: no trained models needed ------------------------------------------------------


def test_criterion_01_gradients():
    start = time.perf_counter()
    worst = {name: 0.0 for name in OP_NAMES}
    count = {name: 0 for name in OP_NAMES}
    for seed in range(20):
        for name, fn, inputs in gradcheck_cases(np.random.default_rng(10_000 + seed)):
            worst[name] = max(worst[name], ad.grad_check(fn, inputs, tol=1e-3).worst)
            count[name] += 1
    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in worst.items() if v > 1e-3}
    ok = not bad and min(count.values()) >= 20 and elapsed < 30
    record(1, ok, f"{len(OP_NAMES)} ops x {min(count.values())} instances, worst {max(worst.values()):.1e}, {elapsed:.1f}s; failing {bad}")


def test_criterion_02_ball_invariant():
    start = time.perf_counter()
    iterations = violations = 0
    rng = np.random.default_rng(2)
    for _ in range(50):
        size = int(rng.integers(4, 9))
        enc = LinearEncoder(rng.normal(size=(6, size * size * 3)), size, normalize=bool(rng.integers(2)))
        src = rng.random((size, size, 3)).astype(np.float32)
        eps = float(rng.uniform(0, 0.1))
        cfg = AttackConfig(
            epsilon=eps, steps=20, step_size=float(rng.uniform(0.001, 0.05)), eot_samples=2, ensemble=("L",)
        )

        def check(step, x):
            nonlocal iterations, violations
            iterations += 1
            if np.abs(x.astype(np.float64) - src).max() > eps + 1e-6 or x.min() < 0 or x.max() > 1:
                violations += 1

        pgd_attack(src, TargetSpec.image_target(rng.random((size, size, 3))), cfg, {"L": enc}, seed=1, on_step=check)
    elapsed = time.perf_counter() - start
    record(2, iterations >= 1000 and violations == 0 and elapsed < 10, f"{iterations} iterations, {violations} violations, {elapsed:.1f}s")


def test_criterion_03_linear_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    gaps = []
    for _ in range(10):
        size, dim = 4, 5
        w = rng.normal(size=(dim, size * size * 3))
        src = rng.random((size, size, 3)).astype(np.float32)
        target = rng.random((size, size, 3)).astype(np.float32)
        cfg = AttackConfig(epsilon=EPS, steps=40, eot=False, objective="dot", ensemble=("L",))
        adv = pgd_attack(src, TargetSpec.image_target(target), cfg, {"L": LinearEncoder(w, size)}).adv
        e = w @ target.reshape(-1).astype(np.float64)
        corner = np.clip(src + EPS * np.sign(w.T @ e).reshape(src.shape), 0.0, 1.0)
        gaps.append(float(np.abs(adv - corner).max()))
    elapsed = time.perf_counter() - start
    record(3, max(gaps) <= 1e-3 and elapsed < 10, f"max per-pixel gap {max(gaps):.1e} over 10 instances, {elapsed:.1f}s")


# --- criteria 4-10: the standard run ------------------------------------------------------------


@pytest.fixture(scope="session")
def standard(tmp_path_factory):
    cfg = ExperimentConfig()
    start = time.perf_counter()
    zoo = build_zoo(cfg)
    train_time = time.perf_counter() - start
    run_dir = tmp_path_factory.mktemp("standard")
    start = time.perf_counter()
    reports = run_experiment(cfg, run_dir, zoo=zoo)
    identity_time = time.perf_counter() - start
    cache = {("identity", cfg.attack.epsilon, cfg.attack.steps): reports["identity"]}
    return {"cfg": cfg, "zoo": zoo, "dir": run_dir, "identity": reports["identity"], "cache": cache,
            "train_time": train_time, "identity_time": identity_time}


def test_criterion_04_encoder_quality(standard):
    acc = {eid: retrieval_accuracy(enc, standard["zoo"].test) for eid, enc in standard["zoo"].encoders.items()}
    t = standard["train_time"]
    ok = len(acc) == 4 and min(acc.values()) >= 0.9 and t < 300
    record(4, ok, f"accuracy {', '.join(f'{k}={v:.3f}' for k, v in acc.items())}; training {t:.0f}s")


def test_criterion_05_transfer(standard):
    agg = standard["identity"].aggregates
    margin = agg["targeted_asr"] - agg["noise_targeted_asr"]
    t = standard["identity_time"]
    ok = agg["rows"] == 250 and margin >= 0.30 and agg["untargeted_asr"] >= agg["targeted_asr"] and t < 600
    record(5, ok, f"targeted {agg['targeted_asr']:.3f} vs noise {agg['noise_targeted_asr']:.3f} (margin {margin:+.3f}), "
                  f"untargeted {agg['untargeted_asr']:.3f}; {t:.0f}s")


def test_criterion_06_budget_monotone(standard):
    start = time.perf_counter()
    ab = run_ablation(standard["cfg"], "epsilon", standard["zoo"], cache=standard["cache"])
    t = time.perf_counter() - start + standard["identity_time"]
    asr = ab.asr["H"]
    ok = [v * 255 for v in ab.values] == pytest.approx([4, 8, 16]) and ab.monotone("H", 0.05) and t < 1500
    record(6, ok, f"targeted ASR at 4/8/16 of 255: {', '.join(f'{a:.3f}' for a in asr)}; {t:.0f}s")


def test_criterion_07_step_trend(standard):
    ab = run_ablation(standard["cfg"], "steps", standard["zoo"], cache=standard["cache"])
    asr = dict(zip([int(v) for v in ab.values], ab.asr["H"]))
    ok = asr[500] >= asr[100] - 0.05
    record(7, ok, f"targeted ASR 100 steps {asr[100]:.3f}, 500 steps {asr[500]:.3f}")


def test_criterion_08_quantization(standard):
    cfg, zoo, quant = standard["cfg"], standard["zoo"], standard["identity"]
    spec = build_scenario(cfg, zoo, "identity")
    flt = run_scenario(spec, {}, zoo.held_out, cfg.attack, eval_quantize=False, adv_images=quant.adv_images)
    q, f = quant.aggregates, flt.aggregates
    cos_drop = f["mean_final_cos_heldout"] - q["mean_final_cos_heldout"]
    asr_drop = f["targeted_asr"] - q["targeted_asr"]
    record(8, cos_drop < 0.05 and asr_drop <= 0.10, f"cosine drop {cos_drop:+.4f}, targeted ASR drop {asr_drop:+.3f}")


def test_criterion_09_compliance(standard):
    rep = run_family(standard["cfg"], standard["zoo"], "compliance")
    agg = rep.aggregates
    sources = len({r.source_id for r in rep.rows})
    ok = (
        agg["rows"] == 100 * standard["cfg"].scenario.trials
        and agg["clean_src_flag_rate"] == 1.0
        and agg["clean_tgt_flag_rate"] == 0.0
        and agg["adv_accept_rate"] >= 0.5
    )
    record(9, ok, f"{agg['rows']} rows; clean unsafe flagged {agg['clean_src_flag_rate']:.2f}, clean safe flagged "
                  f"{agg['clean_tgt_flag_rate']:.2f}, adversarial evasion {agg['adv_accept_rate']:.3f} ({sources} source classes)")


def test_criterion_10_determinism(standard):
    start = time.perf_counter()
    res = verify_determinism(standard["cfg"], reference=standard["dir"])
    t = time.perf_counter() - start
    record(10, res.passed and res.files_compared > 0, f"{res.files_compared} files byte-identical across runs ({t:.0f}s) {res.diff}")
