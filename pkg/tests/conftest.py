from __future__ import annotations

import numpy as np
import pytest

from msad.synth import SynthConfig, generate_dataset

TINY_SYNTH = dict(
    categories=["alpha", "beta"],
    train_count=6,
    test_normal=3,
    test_abnormal=3,
    cloud_points=300,
    rgb_size=(48, 64),
    ir_size=(40, 52),
    seed=3,
)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small synthetic dataset shared by the integration tests."""
    root = tmp_path_factory.mktemp("tiny") / "data"
    manifest = generate_dataset(SynthConfig(**TINY_SYNTH), root)
    return root, manifest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
