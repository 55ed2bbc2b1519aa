"""Shared fixtures: a small network config and a small generated dataset.

The full-size dataset and the long training runs live in
test_acceptance.py; everything here is sized for sub-second tests.
"""

import numpy as np
import pytest

from trilayer import fields, synth

TINY_FIELD = dict(
    fg_depth=2,
    fg_width=16,
    fg_rgb_depth=2,
    fg_rgb_width=16,
    fg_skip_at=1,
    scene_depth=2,
    scene_width=16,
    scene_rgb_width=16,
    latent_dim=4,
)

# one line per acceptance criterion, echoed after the test table so the
# verdicts survive pytest's stdout capture
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def tiny_field_config():
    return fields.FieldConfig(**TINY_FIELD)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    """Two 32x32 frames with the occluder present; shared across modules."""
    out = tmp_path_factory.mktemp("tiny_data")
    spec = synth.SceneSpec(n_frames=2, width=32, height=32, march_steps=320)
    synth.generate(spec, seed=0, out_dir=out)
    return out


@pytest.fixture(scope="session")
def tiny_dataset(tiny_dataset_dir):
    return synth.load_dataset(tiny_dataset_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
