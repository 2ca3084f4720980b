"""Shared fixtures: a tiny model, a synthetic dataset, and the acceptance summary."""
from __future__ import annotations

import numpy as np
import pytest

from ddpnet.data import gen_synthetic, load_manifest
from ddpnet.model import build_ddpnet, preset_spec

# criterion number -> (passed, detail), filled in by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_spec():
    return preset_spec("tiny")


@pytest.fixture
def tiny_model(tiny_spec):
    return build_ddpnet(tiny_spec, rng=0)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    gen_synthetic(root, 16, (64, 64), 3, seed=0)
    return root


@pytest.fixture(scope="session")
def synth_samples(synth_dir):
    return load_manifest(synth_dir / "manifest.tsv")
