from __future__ import annotations

import json

import numpy as np
import pytest

from scenediff import shape as S
from scenediff import synthetic as Y
from scenediff.align import alignment_metric
from scenediff.pose import iou3d


@pytest.fixture(scope="module")
def records():
    return Y.generate_records(6, 11)


@pytest.mark.parametrize("cls", range(len(Y.CLASS_NAMES)))
def test_template_fills_unit_box(cls):
    s = Y.template_scaffold(cls, 0.3)
    assert s.g == 16
    semi = S.ellipsoid_radius() * np.sqrt(s.lam)
    lo, hi = (s.mu - semi).min(0), (s.mu + semi).max(0)
    assert np.allclose(lo, -0.5) and np.allclose(hi, 0.5)
    assert np.allclose(s.weights(), 1.0)


def test_template_rejects_class_and_small_g():
    with pytest.raises(ValueError):
        Y.template_scaffold(99, 0.0)
    with pytest.raises(ValueError):
        Y.SceneConfig(g=4)
    with pytest.raises(ValueError):
        Y.SceneConfig(split="test")


def test_scene_is_deterministic():
    a = Y.generate_scene(Y.scene_rng(3, 7))
    b = Y.generate_scene(Y.scene_rng(3, 7))
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())


def test_scene_invariants(records):
    cfg = Y.SceneConfig()
    for rec in records:
        sc = rec.scene
        assert cfg.min_objects <= len(sc.objects) <= cfg.max_objects
        boxes = [o.box3d(sc.camera) for o in sc.objects]
        for o, b in zip(sc.objects, boxes):
            # every object rests on the floor
            assert b.center[1] + b.size[1] / 2 == pytest.approx(sc.camera_height)
            assert 0.7 <= o.pose.distance <= 5.0
            l, t, r, bt = o.box2d
            assert 0 <= l < r <= 128 and 0 <= t < bt <= 128
        for i in range(len(boxes)):
            for j in range(i):
                assert iou3d(boxes[i], boxes[j]) <= cfg.max_overlap + 1e-12


def test_projection_roundtrip(records):
    for rec in records:
        for (box, delta), o in zip(Y.project_boxes(rec.scene), rec.scene.objects):
            assert np.allclose(box, o.box2d) and np.allclose(delta, o.pose.offset)


def test_room_yaw_shared(records):
    for rec in records:
        for o in rec.scene.objects:
            k = (o.pose.yaw - rec.scene.room_yaw) / (np.pi / 2)
            assert abs(k - np.round(k)) * np.pi / 2 <= 0.1 + 1e-9


def test_depth_matches_scaffold_surface(records):
    rec = records[0]
    targets = rec.targets()
    sc = rec.scene
    poses = [o.pose for o in sc.objects]
    vis = [i for i, q in enumerate(targets) if len(q)]
    err = alignment_metric([poses[i] for i in vis], [sc.objects[i].scaffold for i in vis],
                           np.array([sc.objects[i].box_center for i in vis]), [targets[i] for i in vis], sc.camera,
                           m=2000, rng=np.random.default_rng(0))
    assert err < 0.01


def test_depth_hits_lie_on_ellipsoids(records):
    rec = records[1]
    sc = rec.scene
    for k, o in enumerate(sc.objects):
        pts = rec.targets()[k]
        if not len(pts):
            continue
        c, inv = Y.object_ellipsoids(o, sc.camera)
        r = np.linalg.norm(np.einsum("gij,ngj->ngi", inv, pts[:, None, :] - c[None]), axis=2).min(axis=1)
        assert np.allclose(r, 1.0, atol=1e-3)


def test_ray_hits_sphere():
    rays = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 1.0]])
    t = Y.ray_hits(rays, np.array([[0.0, 0.0, 5.0]]), np.eye(3)[None])
    assert t[0, 0] == pytest.approx(4.0) and np.isinf(t[1, 0])


def test_feature_patch(records):
    rec = records[0]
    for k, obs in enumerate(rec.observations):
        assert obs.patch.shape == (8, 8, 2)
        assert 0 <= obs.patch[..., 1].min() and obs.patch[..., 1].max() <= 1
        assert np.all(obs.patch[..., 0] <= 5.0 / Y.DEPTH_SCALE + 1e-6)


def test_pool_bounds_cover():
    for n in (3, 8, 13, 100):
        b = Y._pool_bounds(n, 8)
        assert b[0][0] == 0 and b[-1][1] == n and all(hi > lo for lo, hi in b)


def test_dataset_roundtrip(tmp_path):
    cfg = Y.SceneConfig(max_objects=3)
    out = Y.build_dataset(tmp_path / "ds", 3, 5, cfg)
    manifest, recs = Y.load_dataset(out)
    assert manifest["count"] == 3 and manifest["config_hash"] == cfg.hash()
    mem = Y.generate_records(3, 5, cfg)
    for a, b in zip(recs, mem):
        assert np.array_equal(a.depth.depth, b.depth.depth)
        assert np.array_equal(a.depth.instance, b.depth.instance)
        assert np.allclose(a.observations[0].patch, b.observations[0].patch)
        assert a.scene.to_dict() == json.loads(json.dumps(b.scene.to_dict()))
    with pytest.raises(FileExistsError):
        Y.build_dataset(out, 1, 5, cfg)
    Y.build_dataset(out, 1, 5, cfg, force=True)
    assert Y.load_dataset(out)[0]["count"] == 1


def test_placement_budget():
    cfg = Y.SceneConfig(min_objects=8, max_objects=8, max_tries=5)
    with pytest.raises(Y.PlacementError):
        Y.generate_scene(np.random.default_rng(0), cfg)


def test_style_split():
    tr = Y.generate_scene(np.random.default_rng(1))
    va = Y.generate_scene(np.random.default_rng(1), Y.SceneConfig(split="val"))
    assert all(o.style < 0.5 for o in tr.objects) and all(o.style >= 0.5 for o in va.objects)
