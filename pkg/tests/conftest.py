import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from volnav.scene import generate_synthetic_scene, save_scene

settings.register_profile("volnav", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("volnav")

SMALL = ["resolution=0.4", "z_cells=8", "levels=1", "dim=16", "view_dim=16", "heads=2", "samples=2",
         "cva_layers=1", "policy_heads=2", "policy_layers=1", "max_steps=4"]


@pytest.fixture(autouse=True)
def _no_config_env(monkeypatch):
    monkeypatch.delenv("VOLNAV_CONFIG", raising=False)


@pytest.fixture(scope="session")
def scene():
    return generate_synthetic_scene(1)


@pytest.fixture(scope="session")
def coarse_scene():
    """One-room scene with sparse surfaces and few cameras, for fast encoder runs."""
    return generate_synthetic_scene(0, n_rooms=2, n_objects=2, point_spacing=0.2, headings=4, elevations=(0.0,))


@pytest.fixture(scope="session")
def scene_dir(tmp_path_factory, scene):
    path = tmp_path_factory.mktemp("scene") / "s"
    save_scene(scene, path)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
