import numpy as np
import pytest

from fedhyp.config import RunConfig
from fedhyp.server import build_environment, initial_prototypes, pretrain


def small_config(**overrides) -> RunConfig:
    base = dict(rounds=3, n_source_per_agent=160, pretrain_epochs=2,
                test_car=(8, 4, 4, 4), test_drone=(4, 4, 4, 4))
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def small_cfg():
    return small_config()


@pytest.fixture(scope="session")
def small_env(small_cfg):
    return build_environment(small_cfg)


@pytest.fixture(scope="session")
def pretrained(small_cfg, small_env):
    params, clf = pretrain(small_env.source, small_cfg, clf_channels=small_env.world.cue_channels)
    protos = initial_prototypes(params, small_env.source, small_cfg)
    return params, clf, protos


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def ball_points(rng, n, dim, gamma, max_frac=0.9):
    """``n`` random points strictly inside the ball of curvature ``-gamma``."""
    d = rng.normal(size=(n, dim))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = rng.uniform(0, max_frac, size=(n, 1)) / np.sqrt(gamma)
    return d * r


def tangent_vectors(rng, n, dim, gamma, max_frac=0.7):
    """Tangent vectors with sqrt(gamma) * norm below ``max_frac``.

    The printed exponential map is direction-preserving and monotone only
    while gamma * |v|^2 < 1, so gradient checks sample inside that region.
    """
    return ball_points(rng, n, dim, gamma, max_frac)


# one line per acceptance criterion, filled by test_acceptance and printed at the end of the session
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
