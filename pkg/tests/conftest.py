import numpy as np
import pytest

from emblaunder.encoders import init_encoder


@pytest.fixture(scope="session")
def tiny_vit():
    return init_encoder("tiny_vit", 16, seed=11)


@pytest.fixture(scope="session")
def tiny_cnn():
    return init_encoder("tiny_cnn", 16, seed=12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_CONFIG = """
seed = 3
data.train_per_class = 2
data.test_per_class = 1
data.gallery_per_class = 2
data.pool_per_class = 3
train.dim = 16
train.epochs_vit = 2
train.epochs_cnn = 6
attack.steps = 3
attack.eot_samples = 2
scenario.pairs = 3
scenario.trials = 2
scenario.compliance_sources = 3
scenario.compliance_targets = 2
ablation.epsilon = [0.0, 0.0313]
ablation.steps = [1, 3]
"""


@pytest.fixture(scope="session")
def tiny_cfg():
    from emblaunder.config import load_config

    return load_config(TINY_CONFIG)


@pytest.fixture(scope="session")
def tiny_zoo(tiny_cfg):
    from emblaunder.zoo import build_zoo

    return build_zoo(tiny_cfg)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
