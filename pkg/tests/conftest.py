from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from patterncloth.board import build_codebook, generate_board
from patterncloth.capture_sim import NoiseConfig
from patterncloth.geometry import build_template
from patterncloth.scenes import sheet_scene

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")

# the noise level shared by the registration, triangulation and driving checks
BENCH_NOISE = NoiseConfig(pixel_jitter_sigma=0.3, dropout_rate=0.05, color_ambiguity_rate=0.02,
                          outlier_rate=0.02, seed=1)


@pytest.fixture(scope="session")
def small_board():
    return generate_board(20, 24, seed=3)


@pytest.fixture(scope="session")
def small_codebook(small_board):
    return build_codebook(small_board)


@pytest.fixture(scope="session")
def flat_template():
    return build_template(generate_board(12, 14, seed=5))


@pytest.fixture(scope="session")
def sheet():
    return sheet_scene(rows=20, cols=20, n_frames=4, seed=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
