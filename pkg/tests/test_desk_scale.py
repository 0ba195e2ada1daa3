"""Desk-scale training checks. Slow: run with PS2KIT_RUN_SLOW=1."""

import numpy as np
import pytest
import torch

from ps2kit.config import PS2Config
from ps2kit.datasets import prepare_capture, sample_pairs
from ps2kit.evaluation import emit_report, estimate, relight_to_bin, ssim, to_numpy_image
from ps2kit.lightspace import LightBin, LightSpace
from ps2kit.photometry import make_heightfield_scene, make_sphere_scene
from ps2kit.trainer import collate_pairs, run

from conftest import capture_from_scene

pytestmark = pytest.mark.slow


def desk_config(**over):
    base = dict(
        res=64,
        width_scale=0.25,
        batch_size=8,
        epochs=25,
        iters_per_epoch=100,
        warmup_iters=500,
        pairs_per_object=20,
        perceptual_pretrained=False,
    )
    base.update(over)
    return PS2Config(**base)


@pytest.fixture(scope="module")
def desk_captures():
    return [
        capture_from_scene(make_sphere_scene(res=64, albedo="textured", seed=1), "sphere"),
        capture_from_scene(make_heightfield_scene(res=64, seed=2), "bumpy"),
    ]


def test_full_pipeline_reaches_targets(desk_captures, tmp_path):
    cfg = desk_config()
    state, _ = run(cfg, desk_captures, str(tmp_path))
    assert state.iteration == 2500
    checkpoint = str(tmp_path / "checkpoints" / "epoch_025.pt")
    reports = emit_report(checkpoint, desk_captures, str(tmp_path / "eval"), seed=99)
    for report in reports:
        assert report.ssim_recon > 0.85, report.object
        assert report.ssim_relight > 0.70, report.object
        assert report.mae_mean < 25.0, report.object
        assert report.bin_acc > 0.60, report.object


def test_warmup_lowers_early_loss(desk_captures, tmp_path):
    wins = 0
    for seed in range(5):
        losses = {}
        for warmup in (True, False):
            cfg = desk_config(seed=seed, epochs=16, warmup=warmup)
            _, history = run(cfg, desk_captures, str(tmp_path / f"s{seed}-{warmup}"))
            losses[warmup] = history[1500]["loss_total"]
        wins += losses[True] < losses[False]
    assert wins >= 4


@pytest.fixture(scope="module")
def glossy_run(tmp_path_factory):
    scene = make_sphere_scene(res=64, ks=0.6, alpha=30.0, albedo="textured", seed=5)
    capture = capture_from_scene(scene, "glossy")
    cfg = desk_config(epochs=10)
    state, _ = run(cfg, [capture], str(tmp_path_factory.mktemp("glossy")))
    return state.model.eval(), cfg, prepare_capture(capture, cfg.res, cfg.crop_to_object)


def image_tensor(image):
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()[None]


def mask_tensor(mask):
    return torch.from_numpy(mask.astype(np.float32))[None, None]


class TestTrainedRelighting:
    def test_different_targets_give_different_images(self, glossy_run):
        model, cfg, capture = glossy_run
        lightspace = LightSpace(cfg.bins_per_axis)
        src = capture.bins(lightspace).index(lightspace.frontal_bin)
        image, mask = image_tensor(capture.images[src]), mask_tensor(capture.mask)
        a = relight_to_bin(model, image, mask, LightBin(0, 0))
        b = relight_to_bin(model, image, mask, LightBin(4, 4))
        assert (a - b).abs().mean() > 0.01

    @pytest.mark.parametrize("source", [(2, 2), (1, 2), (2, 1)])
    def test_own_light_reproduces_the_source_best(self, glossy_run, source):
        model, cfg, capture = glossy_run
        bins = capture.bins(LightSpace(cfg.bins_per_axis))
        src = bins.index(LightBin(*source))
        relit = relight_to_bin(model, image_tensor(capture.images[src]), mask_tensor(capture.mask), bins[src])
        relit = to_numpy_image(relit[0])
        own = ssim(capture.images[src], relit, capture.mask)
        others = [ssim(capture.images[j], relit, capture.mask) for j in range(len(bins)) if j != src]
        assert own > max(others)

    def test_refinement_reduces_albedo_error_on_highlights(self, glossy_run):
        model, cfg, capture = glossy_run
        pairs = sample_pairs(capture, 12, 3, LightSpace(cfg.bins_per_axis))
        batch = collate_pairs(pairs)
        est = estimate(model, batch.image1, batch.image2, batch.mask, chunk=len(pairs))[0]
        normals, albedo = capture.ground_truth.normals, capture.ground_truth.albedo
        coarse, refined = [], []
        for j, pair in enumerate(pairs):
            for i, light in enumerate((pair.light1, pair.light2)):
                h = light + np.array([0.0, 0.0, 1.0])
                h = h / np.linalg.norm(h)
                highlight = capture.mask & (normals @ h > 0.98)
                if not highlight.any():
                    continue
                coarse.append(np.abs(to_numpy_image(est.albedo[i][j]) - albedo)[highlight])
                refined.append(np.abs(to_numpy_image(est.albedo_refined[i][j]) - albedo)[highlight])
        assert coarse
        assert np.concatenate(refined).mean() < np.concatenate(coarse).mean()
