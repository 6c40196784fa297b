"""Shared fixtures: synthetic datasets generated once per session."""

import pytest

from smartcast.pipeline import parse_config
from smartcast.synth import SynthSpec, generate_dataset

TINY_SPEC = SynthSpec(
    n_days=140,
    depths_cm=(10, 30),
    n_images=8,
    image_width=8,
    image_height=8,
    grid_nx=6,
    grid_ny=6,
    cloud_image=None,
)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    """Full bundled scenario (seed 7): 4 sensors x 3 depths x 400 days, 13 images."""
    out = tmp_path_factory.mktemp("synth_full")
    generate_dataset(out, seed=7)
    return out


@pytest.fixture(scope="session")
def synth_config(synth_dir):
    return parse_config(synth_dir / "config.json")


@pytest.fixture(scope="session")
def tiny_dir(tmp_path_factory):
    """Small fast scenario for pipeline plumbing tests."""
    out = tmp_path_factory.mktemp("synth_tiny")
    generate_dataset(out, seed=3, spec=TINY_SPEC)
    return out
