import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mvaformer import autodiff as ad
from mvaformer.encoder import ToyVideoEncoder, extract_person_features, roi_align, roi_align_matrix
from mvaformer.errors import ConfigError, ContractError, ShapeError


def encoder64(channels=4, patch=4, seed=0):
    return ToyVideoEncoder(channels, patch, np.random.default_rng(seed), dtype=np.float64)


def straight_line_encode(enc, video):
    """Per-frame, per-patch loops: project, average frames, residual FFN, LayerNorm."""
    p = enc._patch
    t, height, width, _ = video.shape
    h, w = height // p, width // p
    w_p, b_p = enc.patch.weight.data, enc.patch.bias.data
    projected = np.zeros((t, h * w, w_p.shape[1]))
    for f in range(t):
        for i in range(h):
            for j in range(w):
                patch = video[f, i * p:(i + 1) * p, j * p:(j + 1) * p, :].reshape(-1)
                projected[f, i * w + j] = patch @ w_p + b_p
    x = projected.mean(axis=0)
    hidden = x @ enc.fc1.weight.data + enc.fc1.bias.data
    hidden = np.array([[ad.gelu(ad.Tensor(np.float64(v))).item() for v in row] for row in hidden])
    y = x + hidden @ enc.fc2.weight.data + enc.fc2.bias.data
    mu = y.mean(axis=-1, keepdims=True)
    var = ((y - mu) ** 2).mean(axis=-1, keepdims=True)
    return (y - mu) / np.sqrt(var + 1e-5) * enc.norm.gamma.data + enc.norm.beta.data


# -- encoder ----------------------------------------------------------------------
def test_zero_video_zero_bias_gives_zero_map():
    enc = encoder64()
    for lin in (enc.patch, enc.fc1, enc.fc2):
        lin.bias.data[:] = 0.0
    out = enc(np.zeros((1, 2, 8, 8, 3)))
    assert np.array_equal(out.data, np.zeros((1, 4, 4)))


def test_constant_video_gives_constant_map():
    out = encoder64()(np.full((1, 3, 12, 8, 3), 0.3)).data
    assert np.allclose(out, out[:, :1], atol=1e-12)


def test_matches_straight_line_reimplementation(rng):
    enc = encoder64(channels=8, patch=8)
    video = rng.uniform(0, 1, (8, 32, 32, 3))
    got = enc(video[None]).data[0]
    assert np.allclose(got, straight_line_encode(enc, video), atol=1e-6)


def test_encoder_is_deterministic_and_shared(rng):
    enc = encoder64()
    video = rng.uniform(0, 1, (2, 2, 8, 8, 3))
    assert np.array_equal(enc(video).data, enc(video).data)
    a = enc(video[:1]).data
    assert np.array_equal(enc(np.concatenate([video[:1], video[:1]])).data[1], a[0])


def test_cell_restriction_matches_full_map(rng):
    enc = ToyVideoEncoder(8, 4, np.random.default_rng(3))
    video = rng.uniform(0, 1, (3, 2, 16, 16, 3)).astype(np.float32)
    cells = rng.random((3, 16)) < 0.4
    full = enc(video).data
    part = enc(video, cells).data
    assert np.allclose(part[cells], full[cells], atol=1e-6)
    assert np.array_equal(part[~cells], np.zeros_like(part[~cells]))


def test_encoder_errors():
    enc = encoder64(patch=4)
    with pytest.raises(ConfigError):
        enc(np.zeros((1, 1, 10, 8, 3)))
    with pytest.raises(ShapeError):
        enc(np.zeros((1, 8, 8, 3)))


# -- RoIAlign ---------------------------------------------------------------------
@given(st.floats(-3, 3), st.floats(0, 0.8), st.floats(0, 0.8), st.floats(0.05, 0.2), st.floats(0.05, 0.2))
def test_constant_map_any_box(v, x1, y1, dw, dh):
    out = roi_align(np.full((5, 6, 2), v), (x1, y1, x1 + dw, y1 + dh)).data
    assert np.allclose(out, v, atol=1e-12)


def test_centre_sample_of_two_by_two_map():
    fmap = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]
    assert roi_align(fmap, (0, 0, 1, 1), out=1, samples=1).data.item() == pytest.approx(2.5)


def avg_pool_2x2_stride1(fmap):
    return (fmap[:-1, :-1] + fmap[1:, :-1] + fmap[:-1, 1:] + fmap[1:, 1:]) / 4


@given(st.integers(0, 4), st.integers(0, 4), st.integers(0, 2 ** 31 - 1))
def test_bin_aligned_box_is_average_pooling(top, left, seed):
    # a 7-cell span on a 12x12 map gives unit-width bins on integer feature coordinates,
    # where the bilinear surface averages to the four corner values of each bin
    fmap = np.random.default_rng(seed).standard_normal((12, 12, 3))
    box = (left / 11, top / 11, (left + 7) / 11, (top + 7) / 11)
    expected = avg_pool_2x2_stride1(fmap[top:top + 8, left:left + 8])
    assert np.allclose(roi_align(fmap, box).data, expected, atol=1e-5)


@given(st.floats(-2, 2), st.floats(-2, 2), st.integers(0, 2 ** 31 - 1))
def test_roi_align_is_linear(alpha, beta, seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((2, 5, 5, 3))
    x1, x2 = np.sort(r.uniform(0, 1, 2))
    y1, y2 = np.sort(r.uniform(0, 1, 2))
    box = (x1, y1, max(x2, x1 + 1e-3), max(y2, y1 + 1e-3))
    lhs = roi_align(alpha * a + beta * b, box).data
    rhs = alpha * roi_align(a, box).data + beta * roi_align(b, box).data
    assert np.allclose(lhs, rhs, atol=1e-5)


def test_matrix_rows_are_convex_weights():
    mat = roi_align_matrix(5, 7, (0.1, 0.2, 0.9, 0.6))
    assert mat.shape == (49, 35)
    assert np.all(mat >= 0) and np.allclose(mat.sum(axis=1), 1.0)


def test_roi_align_rejects_missing_and_bad_boxes():
    with pytest.raises(ContractError):
        roi_align(np.zeros((5, 5, 1)), None)
    with pytest.raises(ContractError):
        roi_align(np.zeros((5, 5, 1)), (0.5, 0.1, 0.4, 0.9))


def test_roi_align_gradient_reaches_map(rng):
    fmap = ad.Tensor(rng.standard_normal((4, 4, 2)))
    assert ad.grad_check(lambda m: roi_align(m, (0.1, 0.3, 0.8, 0.9)), [fmap]) < 1e-5


# -- person features --------------------------------------------------------------
def test_only_present_view_is_nonzero(rng):
    enc = encoder64()
    videos = rng.uniform(0, 1, (1, 4, 2, 16, 16, 3))
    boxes = np.full((1, 4, 4), np.nan)
    boxes[0, 1] = (0.1, 0.2, 0.6, 0.7)
    feats = extract_person_features(enc, videos, [0], boxes)
    assert feats.missing.tolist() == [[True, False, True, True]]
    data = feats.features.data
    assert np.array_equal(data[0, [0, 2, 3]], np.zeros((3, 7, 7, 4)))
    maps = enc(videos[0]).data.reshape(4, 4, 4, 4)
    assert np.allclose(data[0, 1], roi_align(maps[1], boxes[0, 1]).data, atol=1e-12)


def test_no_persons_gives_empty_set(rng):
    feats = extract_person_features(encoder64(), rng.uniform(0, 1, (1, 2, 1, 8, 8, 3)), [],
                                    np.zeros((0, 2, 4)))
    assert feats.features.shape == (0, 2, 7, 7, 4) and feats.missing.shape == (0, 2)


def test_identical_boxes_identical_features(rng):
    box = np.array([[0.2, 0.2, 0.7, 0.9], [0.0, 0.1, 0.5, 0.5]])
    feats = extract_person_features(encoder64(), rng.uniform(0, 1, (1, 2, 1, 8, 8, 3)), [0, 0],
                                    np.stack([box, box]))
    assert np.array_equal(feats.features.data[0], feats.features.data[1])


def test_extract_requires_views():
    with pytest.raises(ContractError):
        extract_person_features(encoder64(), np.zeros((1, 0, 1, 8, 8, 3)), [], np.zeros((0, 0, 4)))


def test_missing_views_stay_zero_with_any_encoder_state(rng):
    enc = encoder64(seed=9)
    for p in enc.parameters():
        p.data = p.data * 100.0
    boxes = np.full((2, 2, 4), np.nan)
    boxes[1, 0] = (0.0, 0.0, 1.0, 1.0)
    feats = extract_person_features(enc, rng.uniform(0, 1, (2, 2, 1, 8, 8, 3)), [0, 1], boxes)
    assert np.array_equal(feats.features.data[feats.missing], np.zeros((3, 7, 7, 4)))
