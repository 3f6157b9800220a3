import numpy as np
import pytest
from conftest import param_arrays, tiny_params, with_params

from attentive_matcher import tensor as T
from attentive_matcher.data import StrokeSequence
from attentive_matcher.encoder import (
    conv_features,
    embed_image,
    embed_images,
    embed_point_array,
    embed_points,
    positional_encoding,
)
from attentive_matcher.errors import ContractError, DimensionError
from attentive_matcher.tensor import Tensor


def test_positional_row_zero_alternates():
    pe = positional_encoding(5, 8)
    np.testing.assert_array_equal(pe[0], [0, 1] * 4)


def test_positional_closed_form(rng):
    n, d = 50, 16
    pe = positional_encoding(n, d)
    for _ in range(10):
        p, i = int(rng.integers(n)), int(rng.integers(d // 2))
        angle = p / 10000 ** (2 * i / d)
        assert abs(pe[p, 2 * i] - np.sin(angle)) <= 1e-7
        assert abs(pe[p, 2 * i + 1] - np.cos(angle)) <= 1e-7


def test_positional_odd_width():
    with pytest.raises(DimensionError):
        positional_encoding(4, 7)


def test_image_token_shape():
    params = tiny_params()
    tok = embed_images(params, np.zeros((3, 8, 8)))
    assert tok.shape == (3, 4, 8)
    seq = embed_image(np.zeros((8, 8)), params)
    assert (seq.n, seq.d) == (4, 8)


def test_image_size_mismatch():
    with pytest.raises(DimensionError):
        embed_images(tiny_params(), np.zeros((1, 12, 12)))


def test_blank_image_tokens_equal_positional_table():
    params = tiny_params()
    tok = embed_images(params, np.zeros((1, 8, 8)), positions=False).data[0]
    # zero input and zero biases give zero features everywhere
    np.testing.assert_array_equal(tok, 0.0)
    with_pe = embed_images(params, np.zeros((1, 8, 8))).data[0]
    np.testing.assert_allclose(with_pe, positional_encoding(4, 8))


def test_flatten_order_is_row_major(rng):
    params = tiny_params()
    img = rng.random((1, 8, 8))
    grid = conv_features(params, img).data[0]  # d, 2, 2
    tok = embed_images(params, img, positions=False).data[0]
    np.testing.assert_allclose(tok[1], grid[:, 0, 1])
    np.testing.assert_allclose(tok[2], grid[:, 1, 0])


def test_conv_features_shift_by_pool_factor():
    # zero biases make the background exactly zero, so zero padding is invisible
    params = tiny_params(image_size=32)
    for i in range(4):
        params[f"enc.conv{i}.b"].data[:] = 0.0
    img = np.zeros((32, 32))
    img[12:16, 12:16] = np.random.default_rng(0).random((4, 4))
    moved = np.roll(img, (4, 4), axis=(0, 1))
    f0 = conv_features(params, img[None]).data[0]
    f1 = conv_features(params, moved[None]).data[0]
    np.testing.assert_allclose(f1, np.roll(f0, (1, 1), axis=(1, 2)), atol=1e-12)


def test_point_dropout_replays_for_the_same_step(rng):
    params = tiny_params("points")
    pts = rng.uniform(-1, 1, (9, 2))
    a = embed_point_array(params, pts, train=True, seed=4, step=2).data
    b = embed_point_array(params, pts, train=True, seed=4, step=2).data
    c = embed_point_array(params, pts, train=True, seed=4, step=3).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_point_embedding_deterministic_in_eval(rng):
    params = tiny_params("points")
    pts = rng.uniform(-1, 1, (9, 2))
    a = embed_point_array(params, pts, seed=1).data
    b = embed_point_array(params, pts, seed=2).data
    np.testing.assert_array_equal(a, b)
    assert a.shape == (9, 8)


def test_point_embedding_rejects_bad_input():
    params = tiny_params("points")
    with pytest.raises(DimensionError):
        embed_point_array(params, np.zeros((4, 3)))
    empty = StrokeSequence(np.zeros((0, 2)), np.zeros(0, int), np.zeros(0, bool), np.zeros(0, bool))
    with pytest.raises(ContractError):
        embed_points(empty, params)


def test_image_encoder_gradient_reaches_every_layer(rng):
    params = tiny_params()
    loss = T.reduce_sum(embed_images(params, rng.random((2, 8, 8))))
    loss.backward()
    for i in range(4):
        assert params[f"enc.conv{i}.w"].grad is not None
        assert np.any(params[f"enc.conv{i}.w"].grad != 0)


def test_encoder_gradcheck(rng):
    params = tiny_params()
    names = ["enc.conv0.w", "enc.conv3.w"]
    fn = with_params(params, names, lambda p, x: embed_images(p, x))
    report = T.check_gradients(fn, [rng.random((1, 8, 8))] + param_arrays(params, names), max_entries=20)
    assert report.max_rel_error <= 1e-6, str(report)


def test_tokens_are_tensors():
    assert isinstance(embed_images(tiny_params(), np.zeros((1, 8, 8))), Tensor)


def test_full_size_image_gives_256_tokens_of_width_128(rng):
    from attentive_matcher.config import preset
    from attentive_matcher.params import init_params

    params = init_params(preset("paper"), 0, np.float32)
    img = (rng.random((1, 64, 64)) > 0.8).astype(np.float32)
    tok = embed_images(params, np.concatenate([img, img])).data
    assert tok.shape == (2, 256, 128)
    np.testing.assert_array_equal(tok[0], tok[1])


def test_point_character_gives_one_64_wide_token_per_point(rng):
    from attentive_matcher.config import preset
    from attentive_matcher.params import init_params

    params = init_params(preset("paper", "points"), 0, np.float32)
    pts = rng.uniform(-1, 1, (37, 2))
    a = embed_point_array(params, pts, train=True, seed=9, step=0).data
    assert a.shape == (37, 64)
    np.testing.assert_array_equal(a, embed_point_array(params, pts, train=True, seed=9, step=0).data)


def test_positional_range_and_small_table():
    assert np.abs(positional_encoding(300, 32)).max() <= 1.0
    pe = positional_encoding(4, 4)
    for i in range(2):
        angle = 3 / 10000 ** (2 * i / 4)
        assert abs(pe[3, 2 * i] - np.sin(angle)) <= 1e-7
        assert abs(pe[3, 2 * i + 1] - np.cos(angle)) <= 1e-7
