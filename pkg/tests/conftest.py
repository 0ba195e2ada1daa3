import os
import tempfile

# isolate the run ledger and log files before ps2kit computes its default paths
_SANDBOX = tempfile.mkdtemp(prefix="ps2kit-tests-")
os.environ.setdefault("PS2KIT_DATA_DIR", os.path.join(_SANDBOX, "data"))
os.environ.setdefault("PS2KIT_LOG_DIR", os.path.join(_SANDBOX, "logs"))

import numpy as np
import pytest

from ps2kit.config import PS2Config
from ps2kit.datasets import GroundTruth, ObjectCapture
from ps2kit.lightspace import DEFAULT_LIGHTSPACE
from ps2kit.photometry import make_heightfield_scene, make_sphere_scene, render_all_bins


def pytest_collection_modifyitems(config, items):
    if os.environ.get("PS2KIT_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="desk-scale check; set PS2KIT_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def capture_from_scene(scene, name="scene", lightspace=DEFAULT_LIGHTSPACE, with_albedo=True):
    renders = render_all_bins(scene, lightspace)
    return ObjectCapture(
        name=name,
        images=np.stack([r.image for r in renders]),
        lights=np.stack([r.light for r in renders]),
        mask=scene.mask.copy(),
        intensities=np.ones((len(renders), 3)),
        ground_truth=GroundTruth(scene.normals.copy(), scene.albedo.copy() if with_albedo else None),
    )


@pytest.fixture
def make_capture():
    return capture_from_scene


@pytest.fixture
def sphere_scene():
    return make_sphere_scene(res=64)


@pytest.fixture
def sphere_capture(sphere_scene):
    return capture_from_scene(sphere_scene, "sphere")


@pytest.fixture
def bumpy_capture():
    return capture_from_scene(make_heightfield_scene(res=64, seed=3), "bumpy")


@pytest.fixture
def tiny_config():
    """A configuration small enough to train a few iterations on a CPU in seconds."""
    return PS2Config(
        seed=0,
        res=64,
        width_scale=0.125,
        batch_size=2,
        epochs=2,
        iters_per_epoch=2,
        warmup_iters=2,
        warmup_samples=10,
        pairs_per_object=3,
        lambda_perp=0.0,
        perceptual_pretrained=False,
    )
