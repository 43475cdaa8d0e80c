from __future__ import annotations

import math

import numpy as np
import pytest

from scenediff import shape as S
from scenediff.autodiff import grad_check
from scenediff.autodiff import tensor as T
from scenediff.autodiff.tensor import Tensor


def _random_scaffold(rng, g=4):
    q, _ = np.linalg.qr(rng.normal(size=(g, 3, 3)))
    return S.GaussianScaffold(rng.uniform(-0.2, 0.2, (g, 3)), q, rng.uniform(0.002, 0.02, (g, 3)),
                              rng.normal(size=g) * 0.1)


def test_pack_unpack_roundtrip():
    s = _random_scaffold(np.random.default_rng(0))
    code = S.pack_shape_code(s)
    assert code.shape == (4 * 16,)
    back = S.unpack_shape_code(code, 4)
    assert np.allclose(back.mu, s.mu) and np.allclose(back.lam, s.lam) and np.allclose(back.pi, s.pi)
    assert np.allclose(back.covariances(), s.covariances())


def test_unpack_projects_to_rotation():
    rng = np.random.default_rng(1)
    code = rng.normal(size=2 * 16)
    s = S.unpack_shape_code(code, 2)
    for u in s.U:
        assert np.allclose(u.T @ u, np.eye(3), atol=1e-12)
    assert np.all(s.lam > 0)
    with pytest.raises(ValueError):
        S.unpack_shape_code(code, 3)


def test_unpack_tensor_matches_numpy():
    rng = np.random.default_rng(2)
    code = S.pack_shape_code(_random_scaffold(rng, 3)) + rng.normal(size=48) * 0.01
    mu, u, lam, pi = S.unpack_shape_code_tensor(Tensor(code), 3)
    ref = S.unpack_shape_code(code, 3)
    assert np.allclose(mu.data, ref.mu) and np.allclose(lam.data, ref.lam) and np.allclose(pi.data, ref.pi)
    assert np.allclose(np.einsum("gij,gkj->gik", u.data, u.data), np.eye(3), atol=1e-10)


def test_normalizer_roundtrip():
    n = S.ShapeCodeNormalizer(4)
    code = np.random.default_rng(3).normal(size=64)
    assert np.allclose(n.denormalize(n.normalize(code)), code)
    assert np.allclose(n.denormalize_tensor(Tensor(n.normalize(code))).data, code)


def test_weights_default_to_one():
    s = S.GaussianScaffold.identity(5)
    assert np.allclose(s.weights(), 1.0)
    s.pi[:] = [3, 0, 0, 0, 0]
    assert s.weights().sum() == pytest.approx(5.0)


def test_sample_points_moments():
    rng = np.random.default_rng(4)
    s = _random_scaffold(rng, 1)
    pts = S.sample_points(s, 200_000, rng)
    assert np.allclose(pts.mean(0), s.mu[0], atol=2e-3)
    assert np.allclose(np.cov(pts.T), s.covariances()[0], atol=5e-4)


def test_sample_points_fixed_noise_and_errors():
    rng = np.random.default_rng(5)
    s = _random_scaffold(rng, 2)
    z = rng.standard_normal((2, 3, 3))
    assert np.array_equal(S.sample_points(s, 3, rng, z), S.sample_points(s, 3, rng, z))
    with pytest.raises(ValueError):
        S.sample_points(s, 0, rng)
    s.lam[0, 0] = 0.0
    with pytest.raises(ValueError):
        S.sample_points(s, 3, rng)


def test_mahalanobis_matches_direct():
    rng = np.random.default_rng(6)
    s = _random_scaffold(rng, 3)
    x = rng.normal(size=(10, 3)) * 0.3
    cov_inv = np.linalg.inv(s.covariances())
    d = x[:, None, :] - s.mu[None]
    ref = np.einsum("ngi,gij,ngj->ng", d, cov_inv, d)
    assert np.allclose(S.mahalanobis_sq(s, x), ref)


def test_isolated_component_surface_at_radius():
    s = S.GaussianScaffold(np.zeros((1, 3)), np.eye(3)[None], np.full((1, 3), 0.01), np.zeros(1))
    k = S.ellipsoid_radius()
    on = np.array([[k * 0.1, 0, 0]])
    assert S.analytic_field(s, on)[0] == pytest.approx(S.OCC_THRESHOLD)
    assert S.occupancy(s, on)[0] == pytest.approx(0.5)
    assert S.union_occupancy(s, on * 0.99)[0] == 1.0 and S.union_occupancy(s, on * 1.01)[0] == 0.0


def test_decoder_starts_analytic_and_has_gradients():
    rng = np.random.default_rng(7)
    s = _random_scaffold(rng, 3)
    dec = S.OccupancyDecoder(latent_dim=4, hidden=8, rng=rng)
    x = rng.normal(size=(6, 3)) * 0.2
    lat = rng.normal(size=(3, 4))
    assert np.allclose(dec.occupancy(s, lat, x), S.occupancy(s, x), atol=1e-6)
    err = grad_check(lambda l: T.sum_(T.mul(dec.logits(s, l, x), Tensor(np.arange(6.0)))), [lat])
    assert err < 1e-4


def _sphere_field(res, r=0.4, lo=-0.6, hi=0.6):
    pts = S.grid_points(res, lo, hi)
    return S.field_to_grid(r - np.linalg.norm(pts, axis=1), res)


def test_marching_cubes_sphere():
    res, r = 64, 0.4
    mesh = S.marching_cubes(_sphere_field(res, r), 0.0)
    cell = 1.2 / (res - 1)
    assert mesh.is_watertight()
    assert np.abs(np.linalg.norm(mesh.vertices, axis=1) - r).max() < 2 * cell
    assert mesh.face_areas().sum() == pytest.approx(4 * math.pi * r * r, rel=0.02)


def test_marching_cubes_orientation():
    # shift the sphere along +x only: the mesh must follow in +x
    pts = S.grid_points(32)
    f = 0.3 - np.linalg.norm(pts - [0.2, 0, 0], axis=1)
    v = S.marching_cubes(S.field_to_grid(f, 32), 0.0).vertices
    assert v.mean(0) == pytest.approx([0.2, 0, 0], abs=0.01)


def test_marching_cubes_empty_and_clipped():
    assert S.marching_cubes(np.zeros((8, 8, 8)), 0.5).is_empty
    # a field that is inside everywhere still closes at the grid boundary
    assert S.marching_cubes(np.ones((8, 8, 8)), 0.5).is_watertight()
    with pytest.raises(ValueError):
        S.marching_cubes(np.zeros((8, 8)), 0.5)


def test_union_and_decoded_mesh():
    rng = np.random.default_rng(8)
    s = _random_scaffold(rng, 3)
    m = S.union_mesh(s, 40)
    assert not m.is_empty
    assert not S.decode_mesh(s, res=32).is_empty


def test_surface_sample_on_sphere():
    mesh = S.marching_cubes(_sphere_field(48), 0.0)
    pts = S.surface_sample(mesh, 5000, np.random.default_rng(9))
    assert np.abs(np.linalg.norm(pts, axis=1) - 0.4).max() < 0.02
    with pytest.raises(ValueError):
        S.surface_sample(S.Mesh(np.zeros((0, 3)), np.zeros((0, 3))), 3, np.random.default_rng(0))


def test_self_metrics():
    mesh = S.marching_cubes(_sphere_field(32), 0.0)
    p = S.surface_sample(mesh, 3000, np.random.default_rng(10))
    assert S.chamfer_distance(p, p) == 0.0
    assert S.f_score(p, p) == 100.0


def test_chamfer_closed_form_and_brute():
    p = np.zeros((1, 3))
    q = np.array([[1.0, 0, 0], [0, 2.0, 0]])
    # p->q: 1, q->p: (1 + 4) / 2
    assert S.chamfer_distance(p, q) == pytest.approx(0.5 * (1 + 2.5))
    rng = np.random.default_rng(11)
    a, b = rng.normal(size=(300, 3)), rng.normal(size=(200, 3))
    assert S.chamfer_distance(a, b) == S.chamfer_distance_brute(a, b)


def test_fscore_threshold_is_strict():
    p = np.zeros((1, 3))
    q = np.array([[0.05, 0, 0]])
    assert S.f_score(p, q, 0.05) == 0.0
    assert S.f_score(p, q, 0.0500001) == 100.0
    with pytest.raises(ValueError):
        S.f_score(p, q, 0.0)


def test_mesh_io_roundtrip(tmp_path):
    mesh = S.marching_cubes(_sphere_field(16), 0.0)
    S.write_obj(tmp_path / "m.obj", mesh)
    back = S.read_obj(tmp_path / "m.obj")
    assert np.allclose(back.vertices, mesh.vertices, atol=1e-6) and np.array_equal(back.faces, mesh.faces)
    S.write_ply(tmp_path / "m.ply", mesh)
    back = S.read_ply(tmp_path / "m.ply")
    assert np.allclose(back.vertices, mesh.vertices, atol=1e-6) and np.array_equal(back.faces, mesh.faces)


def test_occupancy_grid_io(tmp_path):
    g = np.random.default_rng(12).random((3, 4, 5)).astype(np.float32)
    S.write_occupancy_grid(tmp_path / "o.occ", g)
    assert np.array_equal(S.read_occupancy_grid(tmp_path / "o.occ"), g)
    (tmp_path / "bad.occ").write_bytes(b"XXXX")
    with pytest.raises(ValueError):
        S.read_occupancy_grid(tmp_path / "bad.occ")


def test_mesh_rejects_bad_faces():
    with pytest.raises(ValueError):
        S.Mesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))
