# Copyright Contributors to the endosplat project
# SPDX-License-Identifier: Apache-2.0
import json

import numpy as np
import pytest

import endosplat as es


@pytest.fixture(scope="module")
def scene():
    spec = {"gaussian_count": 600, "camera_count": 6, "width": 24, "height": 24, "init_points": 300}
    return es.synthesize(spec)


def test_synthesize_and_roundtrip(scene, tmp_path):
    bundle, gt = scene
    assert len(bundle) == 6
    assert len(gt) == 600
    assert bundle.image(0).shape == (24, 24, 3)
    assert "two_view" in bundle.splits
    gt.save(tmp_path / "gt.gsc")
    back = es.GaussianCloud.load(tmp_path / "gt.gsc")
    np.testing.assert_allclose(back.positions, gt.positions, rtol=1e-6, atol=1e-9)
    bundle.save(tmp_path / "scene")
    assert len(es.SceneBundle.load(tmp_path / "scene")) == 6


def test_render_ground_truth_matches_images(scene):
    bundle, gt = scene
    out = es.render(gt, bundle.camera(0))
    assert out["rgb"].shape == (24, 24, 3)
    assert out["depth"].shape == (24, 24)
    assert np.all((out["alpha"] >= 0) & (out["alpha"] <= 1))
    assert es.psnr(out["rgb"], bundle.image(0)) > 40


def test_cloud_from_arrays():
    cloud = es.GaussianCloud(
        positions=[[0.0, 0.0, 2.0]],
        rotations=[[1.0, 0.0, 0.0, 0.0]],
        scales=[[0.1, 0.1, 0.1]],
        opacities=[0.9],
        sh=np.full((1, 3, 1), 1.0),
    )
    cam = es.Camera({"fx": 20, "fy": 20, "cx": 8, "cy": 8, "width": 17, "height": 17})
    out = es.render(cloud, cam)
    assert out["alpha"][8, 8] == pytest.approx(0.9, abs=1e-6)
    with pytest.raises(ValueError):
        es.GaussianCloud([[0, 0, 1]], [[1, 0, 0, 0]], [[0.1, 0.1, 0.1]], [1.5], np.zeros((1, 3, 1)))


def test_losses():
    a = np.zeros((4, 4, 3))
    b = np.full((4, 4, 3), 0.5)
    value, grad = es.loss_gs(a, b, 0.0)
    assert value == pytest.approx(0.5)
    assert grad.shape == a.shape
    value, _ = es.loss_tv(np.array([[0.0, 1.0]]))
    assert value == pytest.approx(0.5)
    value, _ = es.loss_depth(np.ones((3, 3)), np.full((3, 3), 2.0))
    assert value == pytest.approx(1.0)
    value, _ = es.loss_distortion(np.full((2, 2), 0.25))
    assert value == pytest.approx(0.25)
    assert es.ssim(b, b) == pytest.approx(1.0)


def test_train_and_evaluate(scene):
    bundle, _ = scene
    cloud, report = es.train(bundle, {"iterations": 30, "seed": 1}, split="pct_25")
    lines = [json.loads(line) for line in report.splitlines()]
    assert lines[-1]["summary"] is True
    result = es.evaluate(cloud, bundle, bundle.indices("pct_25", "test"))
    assert result["psnr"] > 10
    with pytest.raises(es.ConfigError):
        es.train(bundle, {"bogus": 1})


def test_polar_and_sampling():
    F = np.array([[2.0, 0.1, 0.0], [0.0, 1.0, 0.2], [0.1, 0.0, 1.5]])
    R, P = es.polar_decompose(F)
    np.testing.assert_allclose(R @ P, F, atol=1e-10)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-10)
    idx = es.farthest_point_sample(np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]]), 2, 0)
    assert len(idx) == 2


def test_simulation_poke_and_reset():
    bundle, gt = es.synthesize({"gaussian_count": 2000, "camera_count": 2, "width": 8, "height": 8,
                                "subsurface_layers": 2})
    sim = es.Simulation(gt, nodes=128, params={"substeps": 20})
    np.testing.assert_array_equal(sim.positions(), gt.positions)
    poke = es.central_poke(gt, 0.5)
    for _ in range(5):
        sim.advance_frame(poke)
    assert sim.frame == 5
    assert sim.displacement().max() > 0
    first = sim.positions()
    sim.reset()
    np.testing.assert_array_equal(sim.positions(), gt.positions)
    for _ in range(5):
        sim.advance_frame(poke)
    np.testing.assert_array_equal(sim.positions(), first)
    with pytest.raises(es.ConfigError):
        es.Simulation(gt, params={"youngs_modulus": -1})
