import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mvgeo.backbone import ConfigError, ModelConfig
from mvgeo.heads import CameraHead, DenseHead, Model, TrackingHead, full_forward
from mvgeo.tensor import Tensor, grad_check

SMALL = ModelConfig(depth=2, dim=16, heads=2, track_dim=8, dense_dim=8, track_hidden=8)


def _perturbed_model(cfg=SMALL, seed=0, scale=0.3, dtype=np.float32):
    model = Model(cfg, seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed + 100)
    for _, p in model.named_parameters():
        p.data = (p.data + rng.normal(0, scale, p.shape)).astype(dtype)
    return model


def _images(rng, n, size=28):
    return rng.random((n, 3, size, size)).astype(np.float32)


# ---------------------------------------------------------------------------
# camera head


@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
def test_camera_head_first_frame_identity_and_unit_quaternion(seed, n):
    rng = np.random.default_rng(seed)
    head = CameraHead(SMALL, rng)
    for _, p in head.named_parameters():
        p.data = (p.data + rng.normal(0, 1.0, p.shape)).astype(np.float32)
    pred = head(Tensor(rng.normal(size=(n, 16)).astype(np.float32))).params.data
    assert pred.shape == (n, 9)
    assert pred[0, :7].tolist() == [0, 0, 0, 1, 0, 0, 0]
    np.testing.assert_allclose(np.linalg.norm(pred[:, :4], axis=1), 1.0, atol=1e-6)
    assert np.all((pred[:, 7:] > 0) & (pred[:, 7:] < np.pi))


def test_camera_head_equivariance(rng):
    head = CameraHead(SMALL, rng)
    tok = rng.normal(size=(5, 16)).astype(np.float32)
    perm = [0, 3, 1, 4, 2]
    a = head(Tensor(tok)).params.data
    b = head(Tensor(tok[perm])).params.data
    assert np.abs(a[perm] - b).max() < 1e-5


# ---------------------------------------------------------------------------
# dense head


def _snapshots(rng, n, k, dim, dtype=np.float32, grad=False):
    return [Tensor(rng.normal(size=(n, k + 5, dim)).astype(dtype), requires_grad=grad) for _ in range(4)]


def _seq_stub(tokens, grid):
    from mvgeo.backbone import TokenSequence
    return TokenSequence(tokens, grid[0] * grid[1], grid)


@pytest.mark.parametrize("h,w", [(28, 28), (28, 42), (56, 42)])
def test_dense_head_shapes(rng, h, w):
    head = DenseHead(SMALL, rng)
    grid = (h // 14, w // 14)
    snaps = _snapshots(rng, 2, grid[0] * grid[1], 16)
    out = head(snaps, _seq_stub(snaps[-1], grid), _images(rng, 2, 28)[:, :, :1, :1].repeat(h, 2).repeat(w, 3))
    assert out.depth.shape == (2, h, w)
    assert out.depth_conf.shape == (2, h, w) and out.points_conf.shape == (2, h, w)
    assert out.points.shape == (2, 3, h, w)
    assert out.features.shape == (2, 8, h, w)


def test_dense_head_needs_four_snapshots(rng):
    head = DenseHead(SMALL, rng)
    snaps = _snapshots(rng, 1, 4, 16)
    with pytest.raises(ConfigError):
        head(snaps[:3], _seq_stub(snaps[0], (2, 2)), _images(rng, 1))


def test_zero_output_layer_gives_unit_maps(rng):
    head = DenseHead(SMALL, rng)
    head.out.weight.data[:] = 0
    head.out.bias.data[:] = 0
    snaps = _snapshots(rng, 2, 4, 16)
    out = head(snaps, _seq_stub(snaps[0], (2, 2)), _images(rng, 2))
    assert np.all(out.depth.data == 1) and np.all(out.depth_conf.data == 1) and np.all(out.points_conf.data == 1)


@given(st.integers(0, 2**31 - 1), st.floats(0.1, 5.0))
def test_confidences_respect_floor(seed, scale):
    rng = np.random.default_rng(seed)
    model = _perturbed_model(seed=seed % 5, scale=scale)
    with np.errstate(over="ignore"):
        out = model(_images(rng, 2))
    floor = SMALL.sigma_floor
    for c in (out.dense.depth_conf.data, out.dense.points_conf.data):
        assert np.all(c >= np.float32(floor))


def test_dense_head_gradient_matches_finite_differences(rng):
    head = DenseHead(SMALL, rng, dtype=np.float64)
    snaps = _snapshots(rng, 1, 4, 16, np.float64, grad=True)
    seq = _seq_stub(snaps[-1], (2, 2))
    imgs = rng.random((1, 3, 28, 28))
    probe = [rng.normal(size=(1, 28, 28)), rng.normal(size=(1, 3, 28, 28))]

    def f():
        out = head(snaps, seq, imgs)
        return (out.depth * Tensor(probe[0])).sum() + (out.points * Tensor(probe[1])).sum()

    assert grad_check(f, snaps, max_entries=12, abs_floor=1e-8) < 1e-3


# ---------------------------------------------------------------------------
# tracking head


def _track_head(cfg=SMALL, seed=0):
    return TrackingHead(cfg, np.random.default_rng(seed))


def test_uniform_features_give_centroid():
    head = _track_head()
    feats = np.ones((3, 8, 10, 14), np.float32) * 0.3
    pred = head(Tensor(feats), np.array([[4.0, 5.0], [0.0, 0.0]]))
    np.testing.assert_allclose(pred.initial.data[..., 0], 6.5, atol=1e-4)
    np.testing.assert_allclose(pred.initial.data[..., 1], 4.5, atol=1e-4)


def test_one_hot_match_is_located(rng):
    head = _track_head()
    N, C, H, W = 4, 8, 12, 16
    f = np.zeros(C, np.float32)
    f[2] = 6.0  # |f|^2 = 36 dominates the other H*W zero correlations
    feats = np.zeros((N, C, H, W), np.float32)
    spots = [(3, 5), (7, 1), (10, 14), (0, 9)]
    for k, (y, x) in enumerate(spots):
        feats[k, :, y, x] = f
    pred = head(Tensor(feats), np.array([[5.0, 3.0]]))
    target = np.array([[x, y] for y, x in spots], float)
    assert np.abs(pred.initial.data[0] - target).max() < 0.5


def test_track_shapes_and_bounds(rng):
    head = _track_head()
    feats = Tensor(rng.normal(size=(5, 8, 14, 14)).astype(np.float32))
    pred = head(feats, rng.uniform(0, 13, size=(3, 2)))
    assert pred.positions.shape == (3, 5, 2) and pred.vis_logits.shape == (3, 5)
    assert np.all(np.isfinite(pred.positions.data))
    with pytest.raises(ValueError):
        head(feats, np.array([[13.5, 2.0]]))
    with pytest.raises(ValueError):
        head(feats, np.array([[-0.1, 2.0]]))
    with pytest.raises(ValueError):
        head(feats, np.array([[1.0, 2.0]]), query_frame=5)


@given(st.integers(0, 2**31 - 1), st.integers(-3, 3), st.integers(-3, 3))
def test_tracking_is_translation_consistent(seed, dx, dy):
    rng = np.random.default_rng(seed)
    head = _track_head(seed=seed % 3)
    N, C, H, W, pad = 3, 8, 20, 20, 4
    feats = np.zeros((N, C, H, W), np.float32)
    feats[:, :, pad:-pad, pad:-pad] = rng.normal(0, 2.0, size=(N, C, H - 2 * pad, W - 2 * pad))
    shifted = feats.copy()
    shifted[1:] = np.roll(feats[1:], (dy, dx), axis=(2, 3))
    q = np.array([[8.0, 9.0], [11.0, 7.0]])
    a = head(Tensor(feats), q)
    b = head(Tensor(shifted), q)
    # border-safe: all content stays inside the zero frame after the shift
    expected = a.positions.data[:, 1:] + np.array([dx, dy])
    assert np.abs(b.positions.data[:, 1:] - expected).max() < 0.5
    np.testing.assert_allclose(b.positions.data[:, 0], a.positions.data[:, 0], atol=1e-5)


# ---------------------------------------------------------------------------
# full model


def test_single_view_forward(rng):
    model = _perturbed_model(scale=0.05)
    out = full_forward(model, _images(rng, 1), np.array([[3.0, 4.0]]))
    g = out.camera.params.data[0]
    assert g[:7].tolist() == [0, 0, 0, 1, 0, 0, 0]
    assert out.dense.depth.shape == (1, 28, 28)
    assert out.tracks.positions.shape == (1, 1, 2)


def test_forward_is_deterministic(rng):
    imgs = _images(rng, 3)
    q = rng.uniform(0, 27, size=(4, 2))
    a = Model(SMALL, seed=5)(imgs, q)
    b = Model(SMALL, seed=5)(imgs, q)
    for x, y in [(a.camera.params, b.camera.params), (a.dense.depth, b.dense.depth),
                 (a.dense.points, b.dense.points), (a.tracks.positions, b.tracks.positions)]:
        assert np.array_equal(x.data, y.data)


def _per_frame_outputs(out):
    d = out.dense
    return {"camera": out.camera.params.data, "depth": d.depth.data, "depth_conf": d.depth_conf.data,
            "points": d.points.data, "points_conf": d.points_conf.data,
            "tracks": np.swapaxes(out.tracks.positions.data, 0, 1),
            "vis": out.tracks.vis_logits.data.T}


def test_all_heads_are_equivariant_for_later_frames(rng):
    # freshly initialised weights keep every output O(1), so an absolute bound is meaningful
    model = Model(SMALL, seed=3)
    imgs = _images(rng, 5)
    q = rng.uniform(0, 27, size=(3, 2))
    perm = [0, 4, 2, 1, 3]
    a = _per_frame_outputs(model(imgs, q))
    b = _per_frame_outputs(model(imgs[perm], q))
    for k in a:
        assert np.abs(a[k][perm] - b[k]).max() < 1e-5, k


def test_toy_forward_with_eight_frames_is_fast(rng):
    model = Model(ModelConfig(), seed=0)
    imgs = _images(rng, 8, 56)
    q = rng.uniform(0, 55, size=(16, 2))
    model(imgs[:2], q)  # warm up
    t0 = time.perf_counter()
    model(imgs, q)
    assert time.perf_counter() - t0 < 2.0


def test_state_dict_round_trip():
    a = Model(SMALL, seed=1)
    b = Model(SMALL, seed=2)
    b.load_state_dict(a.state_dict())
    assert all(np.array_equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
    state = a.state_dict()
    state.pop(next(iter(state)))
    with pytest.raises(KeyError):
        b.load_state_dict(state)
