import numpy as np
import pytest

from dilres.convolution import (ConvSpec, PoolSpec, conv2d, conv2d_grad, conv_param_count, layer_geometry,
                                output_extents, receptive_field_of_network, spread_kernel)
from dilres.tensor import ShapeError
from oracles import central_difference, direct_conv2d, plain_conv2d


def arr(v, dtype=np.float64):
    return np.asarray(v, dtype=dtype)


def test_scalar_product():
    out = conv2d(arr([[[[2]]]]), arr([[[[3]]]]))
    assert out.tolist() == [[[[6.0]]]]


def test_identity_diagonal_kernel():
    x = arr(np.arange(1, 10).reshape(1, 1, 3, 3))
    k = arr([[[[1, 0], [0, 1]]]])
    assert conv2d(x, k)[0, 0].tolist() == [[6, 8], [12, 14]]


def test_dilation_two_on_5x5():
    x = arr(np.arange(25).reshape(1, 1, 5, 5))
    k = np.ones((1, 1, 3, 3))
    out = conv2d(x, k, spec=ConvSpec.square(3, dilation=2))
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 108


def test_bias_added():
    x = np.ones((1, 1, 2, 2))
    out = conv2d(x, np.ones((2, 1, 1, 1)), arr([1.0, -1.0]))
    assert out[0, 0].tolist() == [[2, 2], [2, 2]]
    assert out[0, 1].tolist() == [[0, 0], [0, 0]]


def test_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))


def test_effective_kernel_too_large():
    with pytest.raises(ShapeError):
        conv2d(np.ones((1, 1, 4, 4)), np.ones((1, 1, 3, 3)), spec=ConvSpec.square(3, dilation=3))
    # padding makes it fit
    out = conv2d(np.ones((1, 1, 4, 4)), np.ones((1, 1, 3, 3)), spec=ConvSpec.square(3, pad=2, dilation=3))
    assert out.shape == (1, 1, 2, 2)


def test_bad_spec_values():
    with pytest.raises(ValueError):
        ConvSpec.square(3, dilation=0)
    with pytest.raises(ValueError):
        ConvSpec.square(3, pad=-1)
    with pytest.raises(ValueError):
        ConvSpec.square(0)


def test_matches_oracles_random(rng):
    for _ in range(30):
        k = int(rng.choice([1, 3]))
        l = int(rng.integers(1, 4))
        s = int(rng.integers(1, 3))
        p = int(rng.integers(0, 4))
        H = int(rng.integers(k + (k - 1) * (l - 1), 10))
        x = rng.standard_normal((2, 3, H, H))
        w = rng.standard_normal((2, 3, k, k))
        b = rng.standard_normal(2)
        spec = ConvSpec.square(k, s, p, l)
        got = conv2d(x, w, b, spec)
        assert np.array_equal(got, direct_conv2d(x, w, b, s, p, l))
        if l == 1:
            assert np.array_equal(got, plain_conv2d(x, w, b, s, p))


def test_single_precision_bitwise(rng):
    x = rng.standard_normal((1, 2, 7, 7)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    got = conv2d(x, w, spec=ConvSpec.square(3, 1, 1))
    assert got.dtype == np.float32
    assert np.array_equal(got, plain_conv2d(x, w, None, 1, 1))


def test_spread_kernel_layout():
    k = arr([[[[1, 2], [3, 4]]]])
    assert spread_kernel(k, 3)[0, 0].tolist() == [[1, 0, 0, 2], [0, 0, 0, 0], [0, 0, 0, 0], [3, 0, 0, 4]]


def test_grad_scalar():
    gi, gk, gb = conv2d_grad(arr([[[[2]]]]), arr([[[[3]]]]), ConvSpec.square(1), arr([[[[1]]]]))
    assert gi.tolist() == [[[[3]]]] and gk.tolist() == [[[[2]]]] and gb.tolist() == [1]


def test_grad_zero_upstream(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((2, 2, 3, 3))
    spec = ConvSpec.square(3, 1, 2, 2)
    gi, gk, gb = conv2d_grad(x, w, spec, np.zeros((1, 2, 5, 5)))
    assert not gi.any() and not gk.any() and not gb.any()


def test_grad_shape_mismatch():
    with pytest.raises(ShapeError):
        conv2d_grad(np.ones((1, 1, 4, 4)), np.ones((1, 1, 3, 3)), ConvSpec.square(3), np.ones((1, 1, 4, 4)))


@pytest.mark.parametrize("dilation", [1, 2, 3])
def test_grad_finite_differences(rng, dilation):
    x = rng.standard_normal((2, 2, 7, 7))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    spec = ConvSpec.square(3, 2 if dilation == 1 else 1, dilation, dilation)
    up = rng.standard_normal(conv2d(x, w, b, spec).shape)
    gi, gk, gb = conv2d_grad(x, w, spec, up)

    # the objective is linear in each argument, so a large step has no truncation error
    def fd(f, v):
        return central_difference(f, v, h=1e-3)

    def rel(a, n):
        return np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8))

    assert rel(gi, fd(lambda v: np.sum(up * conv2d(v, w, b, spec)), x)) < 1e-6
    assert rel(gk, fd(lambda v: np.sum(up * conv2d(x, v, b, spec)), w)) < 1e-6
    assert rel(gb, fd(lambda v: np.sum(up * conv2d(x, w, v, spec)), b)) < 1e-6


def test_geometry_examples():
    assert layer_geometry((224, 224), ConvSpec.square(7, 2, 3)).output_h == 112
    assert ConvSpec.square(3, dilation=3).effective_kernel == (7, 7)
    g = layer_geometry((14, 14), ConvSpec.square(3, 1, 3, 3))
    assert (g.output_h, g.output_w) == (14, 14)


def test_geometry_error():
    with pytest.raises(ShapeError):
        layer_geometry((2, 2), ConvSpec.square(5))


def test_receptive_field_chain():
    one = receptive_field_of_network([ConvSpec.square(3, 1, 1)])
    assert one[-1].receptive_field == (3, 3) and one[-1].jump == (1, 1)
    two = receptive_field_of_network([ConvSpec.square(3, 1, 1)] * 2)
    assert two[-1].receptive_field == (5, 5)
    pooled = receptive_field_of_network([ConvSpec.square(3, 2, 1), PoolSpec(2, 2), ConvSpec.square(3, 1, 1)])
    assert [g.receptive_field[0] for g in pooled] == [3, 5, 13]
    with pytest.raises(ValueError):
        receptive_field_of_network([])


def test_param_count_ignores_dilation():
    counts = {conv_param_count(8, 16, ConvSpec.square(3, 1, l, l)) for l in (1, 2, 3)}
    assert counts == {8 * 16 * 9}


def test_output_extents_formula():
    assert output_extents(9, 7, ConvSpec(3, 1, 2, 1, 1, 0, 2)) == ((9 + 2 - 5) // 2 + 1, 7)


def test_receptive_field_without_extents_fits_every_layer():
    geo = receptive_field_of_network([PoolSpec(1, 2, 0), ConvSpec.square(3, 1, 0, 2)])
    assert (geo[-1].output_h, geo[-1].output_w) == (1, 1)
    assert geo[-1].receptive_field == (9, 9)
