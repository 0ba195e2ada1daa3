import json
import os
from dataclasses import replace

import numpy as np
import pytest
import torch

from ps2kit.config import PS2Config
from ps2kit.datasets import ObjectCapture, prepare_capture
from ps2kit.errors import EmptyDatasetError, InsufficientDiversityError, MissingLabelsError
from ps2kit.geometry import angular_error_deg
from ps2kit.lightspace import DEFAULT_LIGHTSPACE, LightBin
from ps2kit.losses import Objective
from ps2kit.trainer import (
    build_state,
    build_weak_oracle,
    grad_norms,
    lr_at,
    make_batch,
    pair_lights,
    run,
    run_warmup,
    train_step,
    warmup_step,
)


@pytest.fixture
def prepared(sphere_capture, tiny_config):
    return prepare_capture(sphere_capture, tiny_config.res)


def read_metrics(out_dir):
    with open(os.path.join(out_dir, "metrics.jsonl"), encoding="utf-8") as f:
        return [json.loads(line) for line in f]


class TestSchedule:
    def test_learning_rate_halves_every_five_epochs(self):
        cfg = PS2Config()
        assert lr_at(0, cfg) == pytest.approx(1e-4)
        assert lr_at(4, cfg) == pytest.approx(1e-4)
        assert lr_at(5, cfg) == pytest.approx(5e-5)
        assert lr_at(24, cfg) == pytest.approx(6.25e-6)

    def test_full_schedule_run(self, sphere_capture, tmp_path):
        cfg = PS2Config(res=64, width_scale=0.125, batch_size=1, epochs=25, iters_per_epoch=1,
                        warmup=False, lambda_perp=0.0, perceptual_pretrained=False)
        state, history = run(cfg, [sphere_capture], str(tmp_path))
        assert state.iteration == 25
        names = sorted(os.listdir(tmp_path / "checkpoints"))
        assert names == [f"epoch_{e:03d}.pt" for e in range(1, 26)]
        for record in history:
            assert record["lr"] == pytest.approx(lr_at(record["epoch"], cfg))
        assert history[-1]["lr"] == pytest.approx(1e-4 / 16)
        assert len(read_metrics(str(tmp_path))) == 25


class TestWeakOracle:
    def test_labels_come_from_distinct_bins(self, sphere_capture, tiny_config):
        oracle = build_weak_oracle(sphere_capture, tiny_config, np.random.default_rng(0))
        assert len(oracle.indices) == 10
        bins = [sphere_capture.bins()[i] for i in oracle.indices]
        assert len(set(bins)) == 10

    def test_normals_are_accurate(self, sphere_capture, tiny_config):
        oracle = build_weak_oracle(sphere_capture, tiny_config, np.random.default_rng(1))
        gt = sphere_capture.ground_truth.normals
        err = angular_error_deg(oracle.labels.normals[sphere_capture.mask], gt[sphere_capture.mask])
        assert np.median(err) < 3.0

    def test_albedo_lookup_by_image_index(self, sphere_capture, tiny_config):
        oracle = build_weak_oracle(sphere_capture, tiny_config, np.random.default_rng(2))
        first = oracle.indices[0]
        assert oracle.albedo(first) is oracle.labels.albedos[0]
        assert oracle.supervision_mask(first).dtype == bool


class TestSteps:
    def test_warmup_step(self, prepared, tiny_config):
        rng = np.random.default_rng(0)
        oracle = build_weak_oracle(prepared, tiny_config, rng)
        batch = make_batch([prepared], tiny_config, rng, "cpu", [oracle])
        state = build_state(tiny_config)
        state, metrics, _ = warmup_step(state, batch, Objective.from_config(tiny_config))
        assert state.iteration == 1
        assert np.isfinite(metrics["loss_warmup"])
        assert metrics["loss_recon"] is None

    def test_warmup_needs_labels(self, prepared, tiny_config):
        batch = make_batch([prepared], tiny_config, np.random.default_rng(0), "cpu")
        with pytest.raises(MissingLabelsError):
            warmup_step(build_state(tiny_config), batch, Objective.from_config(tiny_config))

    def test_every_module_receives_gradient(self, prepared, tiny_config):
        batch = make_batch([prepared], tiny_config, np.random.default_rng(0), "cpu")
        state, metrics, _ = train_step(build_state(tiny_config), batch, Objective.from_config(tiny_config))
        norms = grad_norms(state.model)
        assert set(norms) == {"encoder", "normal_decoder", "albedo_decoder", "illumination",
                              "refinement", "reconstruction", "relighting"}
        assert all(v > 0 for v in norms.values()), norms
        assert metrics["loss_relight"] > 0

    def test_relighting_idle_without_ir(self, prepared, tiny_config):
        cfg = replace(tiny_config, ir=False)
        batch = make_batch([prepared], cfg, np.random.default_rng(0), "cpu")
        state, metrics, est = train_step(build_state(cfg), batch, Objective.from_config(cfg))
        assert grad_norms(state.model)["relighting"] == 0.0
        assert metrics["loss_relight"] is None
        assert est.relit is None

    def test_frontal_mode_pairs_and_loss(self, prepared, tiny_config):
        cfg = replace(tiny_config, mode="frontal")
        batch = make_batch([prepared], cfg, np.random.default_rng(4), "cpu")
        assert batch.bins1.tolist() == [[2, 2]] * cfg.batch_size
        _, metrics, _ = train_step(build_state(cfg), batch, Objective.from_config(cfg))
        assert metrics["loss_aux_lighting"] > 0

    def test_supervised_mode(self, prepared, tiny_config):
        cfg = replace(tiny_config, mode="supervised")
        batch = make_batch([prepared], cfg, np.random.default_rng(0), "cpu")
        assert batch.gt_normal is not None
        _, metrics, _ = train_step(build_state(cfg), batch, Objective.from_config(cfg))
        assert metrics["loss_supervised"] > 0

    def test_supervised_step_without_labels(self, prepared, tiny_config):
        cfg = replace(tiny_config, mode="supervised")
        batch = make_batch([prepared], tiny_config, np.random.default_rng(0), "cpu")
        with pytest.raises(MissingLabelsError):
            train_step(build_state(cfg), batch, Objective.from_config(cfg))

    def test_selfsup_batch_carries_no_supervision(self, prepared, tiny_config):
        batch = make_batch([prepared], tiny_config, np.random.default_rng(0), "cpu")
        assert batch.gt_normal is None and batch.gt_albedo is None
        assert batch.eval_normal is not None

    def test_calibrated_step_bypasses_illumination(self, prepared, tiny_config):
        cfg = replace(tiny_config, mode="calibrated")
        batch = make_batch([prepared], cfg, np.random.default_rng(0), "cpu")
        assert batch.lights1.shape == (cfg.batch_size, 3)
        state, metrics, est = train_step(build_state(cfg), batch, Objective.from_config(cfg))
        norms = grad_norms(state.model)
        assert norms["illumination"] == 0.0
        for name in ("refinement", "reconstruction", "relighting"):
            assert norms[name] > 0, name
        expected = torch.nn.functional.normalize(batch.lights1, dim=1)
        assert torch.allclose(est.lights[0], expected, atol=1e-6)
        assert metrics["loss_relight"] > 0

    def test_calibrated_bin_center_lights(self, prepared, tiny_config):
        cfg = replace(tiny_config, mode="calibrated", calibrated_light="bin_center")
        batch = make_batch([prepared], cfg, np.random.default_rng(1), "cpu")
        state = build_state(cfg)
        lights1, _ = pair_lights(state.model, batch, cfg)
        for light, (el, az) in zip(lights1, batch.bins1.tolist()):
            expected = DEFAULT_LIGHTSPACE.center_direction(LightBin(el, az))
            np.testing.assert_allclose(light.numpy(), expected, atol=1e-6)

    def test_calibrated_step_needs_measured_lights(self, prepared, tiny_config):
        cfg = replace(tiny_config, mode="calibrated")
        batch = make_batch([prepared], cfg, np.random.default_rng(0), "cpu")
        batch.lights1 = batch.lights2 = None
        with pytest.raises(MissingLabelsError):
            train_step(build_state(cfg), batch, Objective.from_config(cfg))

    def test_no_given_lights_outside_calibrated_mode(self, prepared, tiny_config):
        batch = make_batch([prepared], tiny_config, np.random.default_rng(0), "cpu")
        assert pair_lights(build_state(tiny_config).model, batch, tiny_config) is None


class TestRun:
    def test_metrics_and_checkpoints(self, sphere_capture, tiny_config, tmp_path):
        state, history = run(tiny_config, [sphere_capture], str(tmp_path))
        assert state.iteration == 4
        assert sorted(os.listdir(tmp_path / "checkpoints")) == ["epoch_001.pt", "epoch_002.pt"]
        records = read_metrics(str(tmp_path))
        assert [r["iter"] for r in records] == [0, 1, 2, 3]
        assert records[0]["loss_warmup"] is not None and records[0]["loss_recon"] is None
        assert records[2]["loss_recon"] is not None
        assert all("mae" in r for r in records)

    def test_resume_replays_the_same_steps(self, sphere_capture, tiny_config, tmp_path):
        full_dir, resumed_dir = tmp_path / "full", tmp_path / "resumed"
        full, full_history = run(tiny_config, [sphere_capture], str(full_dir))
        resumed, resumed_history = run(tiny_config, [sphere_capture], str(resumed_dir),
                                       resume_from=str(full_dir / "checkpoints" / "epoch_001.pt"))
        assert resumed.iteration == full.iteration
        assert [r["iter"] for r in resumed_history] == [2, 3]
        for a, b in zip(full_history[2:], resumed_history):
            assert b["loss_total"] == pytest.approx(a["loss_total"], rel=1e-6)
        for (name, p), q in zip(full.model.state_dict().items(), resumed.model.state_dict().values()):
            assert torch.allclose(p.float(), q.float(), rtol=1e-6, atol=1e-7), name

    def test_warmup_only_run(self, sphere_capture, tiny_config, tmp_path):
        state, history = run_warmup(tiny_config, [sphere_capture], str(tmp_path))
        assert state.iteration == tiny_config.warmup_iters
        assert "warmup.pt" in os.listdir(tmp_path / "checkpoints")
        assert all(r["loss_warmup"] is not None for r in history)

    def test_warmup_only_needs_warmup(self, sphere_capture, tiny_config, tmp_path):
        with pytest.raises(MissingLabelsError):
            run_warmup(replace(tiny_config, warmup=False), [sphere_capture], str(tmp_path))

    def test_empty_dataset(self, tiny_config, tmp_path):
        with pytest.raises(EmptyDatasetError):
            run(tiny_config, [], str(tmp_path))

    def test_supervised_mode_needs_ground_truth(self, sphere_scene, make_capture, tiny_config, tmp_path):
        capture = make_capture(sphere_scene, with_albedo=False)
        with pytest.raises(MissingLabelsError):
            run(replace(tiny_config, mode="supervised"), [capture], str(tmp_path))

    def test_frontal_mode_needs_frontal_image(self, sphere_capture, tiny_config, tmp_path):
        keep = [i for i, b in enumerate(sphere_capture.bins()) if b != DEFAULT_LIGHTSPACE.frontal_bin]
        capture = ObjectCapture(
            name="no-frontal",
            images=sphere_capture.images[keep],
            lights=sphere_capture.lights[keep],
            mask=sphere_capture.mask,
        )
        assert LightBin(2, 2) not in capture.bins()
        with pytest.raises(InsufficientDiversityError):
            run(replace(tiny_config, mode="frontal"), [capture], str(tmp_path))
