import numpy as np
import pytest

from numeric import central_diff, rel_error
from omnifield.field import (
    StaleCacheError,
    VoxelField,
    backprop_rays,
    composite_rays,
    load_field,
    look_at_camera,
    render_volume,
    save_field,
    softplus,
)


def front_camera(w=24, h=24, f=20.0, dist=3.0):
    return look_at_camera([0, 0, -dist], [0, 0, 1], [0, -1, 0], f, f, w / 2, h / 2, w, h)


def random_field(rng, r=8, d=3):
    vf = VoxelField.build(r, [[-1, -1, -1], [1, 1, 1]], d, seed=int(rng.integers(1 << 30)))
    vf.density_raw = rng.normal(0.0, 1.5, vf.density_raw.shape)
    vf.features = rng.normal(0.0, 1.0, vf.features.shape)
    vf.colors = rng.uniform(0.0, 1.0, vf.colors.shape)
    return vf


def compositing_oracle(sigma, delta, values, ts):
    """Step-by-step scalar transmittance recursion for one ray."""
    t_acc = 1.0
    out = np.zeros(values.shape[1])
    opacity = 0.0
    depth = 0.0
    for i in range(len(sigma)):
        alpha = 1.0 - np.exp(-sigma[i] * delta[i])
        w = t_acc * alpha
        out += w * values[i]
        opacity += w
        depth += w * ts[i]
        t_acc *= 1.0 - alpha
    return out, opacity, depth, t_acc


def test_empty_space_renders_zero():
    vf = VoxelField.build(6, [[-1, -1, -1], [1, 1, 1]], 3, seed=0)
    vf.density_raw[:] = -60.0  # softplus(-60) ~ 0
    view = render_volume(vf, front_camera(), 12, jitter=False)
    assert np.allclose(view.opacity_map, 0, atol=1e-20)
    assert np.allclose(view.color_map, 0)
    assert np.allclose(view.feature_map, 0)


def test_opaque_slab_saturates():
    vf = VoxelField.build(6, [[-1, -1, -1], [1, 1, 1]], 2, seed=0)
    vf.density_raw[:] = 500.0  # effectively opaque everywhere
    vf.colors[..., 0] = 0.3
    vf.colors[..., 1] = 0.6
    vf.colors[..., 2] = 0.9
    cam = front_camera(w=16, h=16, f=30.0)
    view = render_volume(vf, cam, 48, jitter=False)
    center = view.color_map[8, 8]
    assert np.allclose(center, [0.3, 0.6, 0.9], atol=1e-3)
    assert view.opacity_map[8, 8] == pytest.approx(1.0, abs=1e-3)


def test_matches_sequential_oracle():
    rng = np.random.default_rng(31)
    vf = random_field(rng, r=8, d=4)
    cam = front_camera()
    pix = np.array([[12, 12], [3, 20], [20, 3], [7, 7]])
    o, d = cam.pixel_rays(pix)
    rr = composite_rays(vf, o, d, 16, jitter=True, jitter_seed=5)
    c = rr.cache
    for k in range(len(pix)):
        sigma = softplus(c.raw_interp[k])
        vals = np.concatenate([c.color_interp[k], c.feat_interp[k]], axis=1)
        out, opacity, depth, resid = compositing_oracle(sigma, c.delta[k], vals, c.t[k])
        assert np.allclose(rr.colors[k], out[:3], atol=1e-12)
        assert np.allclose(rr.features[k], out[3:], atol=1e-12)
        assert rr.opacity[k] == pytest.approx(opacity, abs=1e-12)
        assert rr.depth_t[k] == pytest.approx(depth, abs=1e-12)
        assert rr.residual_trans[k] == pytest.approx(resid, abs=1e-12)


def test_transmittance_conservation_and_weight_bounds():
    rng = np.random.default_rng(7)
    for _ in range(10):
        vf = random_field(rng, r=6, d=2)
        origins = rng.uniform(-3, 3, size=(16, 3))
        dirs = rng.normal(size=(16, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        rr = composite_rays(vf, origins, dirs, 24, jitter=True, jitter_seed=int(rng.integers(1 << 30)))
        assert np.abs(rr.opacity + rr.residual_trans - 1).max() < 1e-9
        w = rr.cache.weights
        assert np.all(w >= 0) and np.all(w <= 1)
        assert np.all(np.diff(rr.cache.trans, axis=1) <= 1e-15)


def test_backprop_zero_cotangent():
    rng = np.random.default_rng(1)
    vf = random_field(rng, r=4, d=2)
    o, d = front_camera().pixel_rays(np.array([[12, 12]]))
    rr = composite_rays(vf, o, d, 8, jitter_seed=1)
    g = backprop_rays(vf, rr.cache, d_colors=np.zeros((1, 3)))
    assert not g.density_raw.any() and not g.features.any() and not g.colors.any()


def test_single_sample_color_grad_is_t1_alpha1():
    # one sample: dc(r)/dc_1 = T_1 * alpha_1 = alpha_1
    rng = np.random.default_rng(2)
    vf = random_field(rng, r=4, d=2)
    o = np.array([[0.0, 0.0, -2.0]])
    d = np.array([[0.0, 0.0, 1.0]])
    rr = composite_rays(vf, o, d, 2, jitter=False)
    c = rr.cache
    d_colors = np.array([[1.0, 0.0, 0.0]])
    g = backprop_rays(vf, c, d_colors=d_colors)
    # analytic per-sample contribution equals the compositing weight
    total = (c.corner_w * c.weights[..., None]).reshape(-1)
    scattered = np.zeros(vf.colors.size // 3)
    np.add.at(scattered, c.corner_idx.reshape(-1), total)
    assert np.allclose(g.colors[..., 0].ravel(), scattered)
    assert not g.colors[..., 1].any()


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(99)
    cam = front_camera(w=12, h=12, f=10.0)
    pix = np.array([[6, 6], [2, 9], [9, 2]])
    o, d = cam.pixel_rays(pix)
    for trial in range(3):
        vf = random_field(rng, r=4, d=2)
        dc = rng.normal(size=(3, 3))
        df = rng.normal(size=(3, 2))
        do = rng.normal(size=3)
        dd = rng.normal(size=3)
        seed = int(rng.integers(1 << 30))

        def loss():
            rr = composite_rays(vf, o, d, 5, jitter=True, jitter_seed=seed)
            return float(
                (dc * rr.colors).sum()
                + (df * rr.features).sum()
                + (do * rr.opacity).sum()
                + (dd * rr.depth_t).sum()
            )

        rr = composite_rays(vf, o, d, 5, jitter=True, jitter_seed=seed)
        g = backprop_rays(vf, rr.cache, d_colors=dc, d_features=df, d_opacity=do, d_depth=dd)
        for name in ("density_raw", "features", "colors"):
            fd = central_diff(loss, getattr(vf, name))
            assert rel_error(getattr(g, name), fd) < 1e-4, f"{name} trial {trial}"


def test_refinement_consistency():
    rng = np.random.default_rng(17)
    vf = random_field(rng, r=8, d=2)
    cam = front_camera(w=10, h=10, f=8.0)
    renders = [render_volume(vf, cam, s, jitter=False) for s in (8, 16, 32, 64, 128)]
    diffs = [
        np.abs(a.color_map - b.color_map).mean() + np.abs(a.opacity_map - b.opacity_map).mean()
        for a, b in zip(renders, renders[1:])
    ]
    assert all(d1 > d2 for d1, d2 in zip(diffs, diffs[1:]))


def test_stale_cache_rejected():
    rng = np.random.default_rng(5)
    vf = random_field(rng, r=4, d=2)
    o, d = front_camera().pixel_rays(np.array([[12, 12]]))
    rr = composite_rays(vf, o, d, 4, jitter_seed=2)
    vf.density_raw += 0.1
    vf.bump_version()
    with pytest.raises(StaleCacheError):
        backprop_rays(vf, rr.cache, d_colors=np.zeros((1, 3)))


def test_degenerate_bounds_rejected():
    with pytest.raises(ValueError):
        VoxelField.build(4, [[0, 0, 0], [1, 0, 1]], 2)


def test_too_few_samples_rejected():
    vf = VoxelField.build(4, [[-1, -1, -1], [1, 1, 1]], 2)
    o, d = front_camera().pixel_rays(np.array([[12, 12]]))
    with pytest.raises(ValueError):
        composite_rays(vf, o, d, 1)


def test_rays_missing_the_box():
    vf = VoxelField.build(4, [[-1, -1, -1], [1, 1, 1]], 2, seed=3)
    vf.density_raw[:] = 5.0
    origins = np.array([[0.0, 0.0, -3.0], [10.0, 10.0, -3.0]])
    dirs = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
    rr = composite_rays(vf, origins, dirs, 8, jitter=False)
    assert rr.opacity[0] > 0.9
    assert rr.opacity[1] == 0.0


def test_voxel_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(12)
    vf = random_field(rng, r=5, d=4)
    path = tmp_path / "vox.field"
    save_field(vf, path)
    back = load_field(path)
    assert isinstance(back, VoxelField)
    assert back.resolution == 5
    assert np.allclose(back.bounds, vf.bounds, atol=1e-6)
    assert np.allclose(back.density_raw, vf.density_raw, atol=1e-5)
    assert np.allclose(back.features, vf.features, atol=1e-6)
    assert np.allclose(back.colors, vf.colors, atol=1e-6)
