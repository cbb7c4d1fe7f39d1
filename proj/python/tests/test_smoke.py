import math

import numpy as np
import pytest

import rfuse


def test_scene_and_grid_helpers():
    scene = rfuse.generate_scene(seed=3)
    target = scene["target"]
    assert target.shape == (32, 32, 32)
    assert scene["coarse"].shape == (8, 8, 8)
    assert 0.0 <= target.min() and target.max() <= 1.0
    again = rfuse.generate_scene(seed=3)
    assert np.array_equal(target, again["target"])

    chunks = rfuse.unfold(target, rfuse.ChunkLayout(32, 8, 4))
    assert len(chunks) == 64 and chunks[0].shape == (8, 8, 8)
    assert np.array_equal(chunks[0], target[:8, :8, :8])
    assert np.array_equal(rfuse.coarsen(target, 4), scene["coarse"])
    assert rfuse.chunk_iou(target, target) == 1.0


def test_temperature_and_attention():
    for tau in (0.05, 0.2, 0.9):
        t = [rfuse.iou_temperature(tau, iou) for iou in np.linspace(0, 1, 11)]
        assert all(tau < v < 1 for v in t)
        assert all(a < b for a, b in zip(t, t[1:]))

    w = rfuse.attention_weights([0.1, 0.5, -0.3], 10.0)
    assert math.isclose(sum(w), 1.0, abs_tol=1e-12)
    shifted = rfuse.attention_weights([1.1, 1.5, 0.7], 10.0)
    assert np.allclose(w, shifted, atol=1e-12)

    p_in = [0.0, 1.0]
    p_retr = [[1.0, 0.0], [0.5, 0.5]]
    s = [0.2, 0.9]
    out = rfuse.blend(p_in, p_retr, s, 10.0)
    swapped = rfuse.blend(p_in, p_retr[::-1], s[::-1], 10.0)
    assert np.allclose(out, swapped, atol=1e-12)


def test_meshing_and_metrics():
    scene = rfuse.generate_scene(seed=5)
    verts, faces = rfuse.marching_cubes(scene["target"], 0.1)
    assert verts.shape[1] == 3 and faces.shape[0] > 0
    report = rfuse.evaluate_meshes(verts, faces, verts, faces, 0.1, (0.0, 0.0, 0.0), (32, 32, 32), 0.1, samples=2000)
    assert report["iou"] == 1.0
    assert report["chamfer_l1"] < 1e-9
    assert report["f_score"] == 1.0


def test_missing_artifact_is_reported(tmp_path):
    cfg = f"[experiment]\nout_dir = {tmp_path}\n"
    with pytest.raises(FileNotFoundError):
        rfuse.run_stage(cfg, "build_db")
