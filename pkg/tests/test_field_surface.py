import numpy as np
import pytest

from omnifield.field import (
    NO_HIT,
    Camera,
    RenderedView,
    SurfaceField,
    backprop_surface,
    build_knn_adjacency,
    load_field,
    look_at_camera,
    pca_colorize,
    render_surface,
    save_field,
)


def front_camera(w=64, h=64, f=50.0):
    return look_at_camera([0, 0, -2], [0, 0, 1], [0, -1, 0], f, f, w / 2, h / 2, w, h)


def render_oracle(field, camera, radius):
    """All-points-per-pixel exhaustive z-buffer."""
    h, w = camera.height, camera.width
    u, v, z = camera.project(field.points)
    hit = np.full((h, w), NO_HIT, dtype=np.int32)
    depth = np.zeros((h, w))
    for py in range(h):
        for px in range(w):
            best, best_z = NO_HIT, np.inf
            for i in range(field.n_points):
                if z[i] <= 1e-9:
                    continue
                if (px - u[i]) ** 2 + (py - v[i]) ** 2 <= radius * radius:
                    if z[i] < best_z:
                        best, best_z = i, z[i]
            hit[py, px] = best
            if best >= 0:
                depth[py, px] = best_z
    return hit, depth


def test_single_point_pinhole_identity():
    cam = front_camera()
    f = SurfaceField.build(np.array([[0.0, 0.0, 0.0]]), np.array([[0.5, 0.5, 0.5]]), 4, knn=2)
    view = render_surface(f, cam, point_radius=0.6)
    assert view.hit_index_map[32, 32] == 0
    assert view.depth_map[32, 32] == pytest.approx(2.0)
    assert view.opacity_map[32, 32] == 1.0


def test_nearer_point_wins_zbuffer():
    cam = front_camera()
    pts = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 1.0]])  # both on the optical axis
    f = SurfaceField.build(pts, np.zeros((2, 3)), 2, knn=1)
    view = render_surface(f, cam, point_radius=0.6)
    assert view.hit_index_map[32, 32] == 0


def test_camera_behind_all_points():
    cam = look_at_camera([0, 0, -2], [0, 0, -3], [0, -1, 0], 50, 50, 32, 32, 64, 64)
    f = SurfaceField.build(np.array([[0.0, 0.0, 0.0]]), np.zeros((1, 3)), 2, knn=1)
    view = render_surface(f, cam, point_radius=1.0)
    assert view.opacity_map.sum() == 0
    assert np.all(view.hit_index_map == NO_HIT)


def test_random_cloud_matches_exhaustive_oracle():
    rng = np.random.default_rng(42)
    pts = rng.uniform(-0.8, 0.8, size=(100, 3))
    cam = front_camera(w=32, h=32, f=24.0)
    f = SurfaceField.build(pts, rng.uniform(0, 1, (100, 3)), 3, knn=4, seed=1)
    for radius in (0.9, 1.7):
        view = render_surface(f, cam, point_radius=radius)
        hit_ref, depth_ref = render_oracle(f, cam, radius)
        assert np.array_equal(view.hit_index_map, hit_ref)
        assert np.allclose(view.depth_map, depth_ref)
        covered = view.hit_index_map >= 0
        assert np.array_equal(view.opacity_map > 0, covered)
        assert np.all(view.depth_map[covered] > 0)


def test_empty_field_rejected():
    cam = front_camera()
    f = SurfaceField(
        np.zeros((0, 3)), np.zeros((0, 2)), np.zeros((0, 3)), [], knn=1
    )
    with pytest.raises(ValueError):
        render_surface(f, cam, 1.0)


def test_adjacency_symmetric_closed_and_sorted():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(50, 3))
    adj = build_knn_adjacency(pts, 5)
    for i, nbrs in enumerate(adj):
        assert np.all(np.diff(nbrs) > 0)
        assert i not in nbrs
        for j in nbrs:
            assert i in adj[j]


def test_backprop_surface_scatter():
    rng = np.random.default_rng(0)
    hit = np.array([[0, 1], [1, NO_HIT]], dtype=np.int32)
    gf = rng.normal(size=(2, 2, 3))
    gc = rng.normal(size=(2, 2, 3))
    view_grad = RenderedView(gf, gc, np.zeros((2, 2)), np.zeros((2, 2)))
    feat_grad, col_grad = backprop_surface(view_grad, hit, n_points=3)
    assert np.allclose(feat_grad[0], gf[0, 0])
    assert np.allclose(feat_grad[1], gf[0, 1] + gf[1, 0])
    assert np.allclose(feat_grad[2], 0)
    assert np.allclose(col_grad[1], gc[0, 1] + gc[1, 0])


def test_backprop_surface_zero_cotangent():
    hit = np.zeros((4, 4), dtype=np.int32)
    zeros = RenderedView(np.zeros((4, 4, 2)), np.zeros((4, 4, 3)), np.zeros((4, 4)), np.zeros((4, 4)))
    feat_grad, col_grad = backprop_surface(zeros, hit, n_points=1)
    assert not feat_grad.any() and not col_grad.any()


def test_pca_colorize_deterministic_and_bounded():
    rng = np.random.default_rng(9)
    feats = rng.normal(size=(200, 8))
    rgb1 = pca_colorize(feats)
    rgb2 = pca_colorize(feats.copy())
    assert np.array_equal(rgb1, rgb2)
    assert rgb1.min() >= 0 and rgb1.max() <= 1
    # image-shaped input with a validity mask
    img = rng.normal(size=(6, 5, 8))
    valid = rng.random((6, 5)) > 0.3
    rgb = pca_colorize(img, valid)
    assert rgb.shape == (6, 5, 3)
    assert not rgb[~valid].any()


def test_surface_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    f = SurfaceField.build(rng.normal(size=(30, 3)), rng.uniform(0, 1, (30, 3)), 6, knn=4, seed=2)
    path = tmp_path / "surf.field"
    save_field(f, path)
    back = load_field(path)
    assert isinstance(back, SurfaceField)
    assert back.knn == f.knn
    assert np.allclose(back.points, f.points, atol=1e-6)
    assert np.allclose(back.features, f.features, atol=1e-6)
    assert np.allclose(back.colors, f.colors, atol=1e-6)
    assert all(np.array_equal(a, b) for a, b in zip(back.adjacency, f.adjacency))


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(0.0, 50, 32, 32, np.eye(3), np.zeros(3), 64, 64)
    bad_rot = np.eye(3)
    bad_rot[0, 0] = 1.5
    with pytest.raises(ValueError):
        Camera(50, 50, 32, 32, bad_rot, np.zeros(3), 64, 64)


def test_unproject_inverts_projection():
    cam = front_camera()
    rng = np.random.default_rng(11)
    pts = rng.uniform(-0.5, 0.5, size=(20, 3))
    u, v, z = cam.project(pts)
    back = cam.unproject(np.stack([u, v], axis=1), z)
    assert np.allclose(back, pts, atol=1e-9)
