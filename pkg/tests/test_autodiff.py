import numpy as np
import pytest

from regmlp import autodiff as ad
from regmlp.autodiff import (
    Tensor,
    backward,
    box_filter,
    concat,
    crop,
    gelu,
    grad_check,
    layer_norm,
    matmul,
    neighbor_stack,
    pad,
    relu,
    reshape,
    resize_linear,
    softmax,
    tmean,
    transpose,
    tsum,
    warp_linear,
)


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# elementwise family
# ---------------------------------------------------------------------------

def test_add_basic():
    out = Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


def test_gelu_zero_is_zero():
    assert gelu(Tensor(0.0)).item() == 0.0


def test_sum_of_ones_and_gradient():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    total = tsum(x)
    assert total.item() == 4.0
    backward(total)
    np.testing.assert_array_equal(x.grad, np.ones((2, 2)))


def test_broadcasting_shapes_and_unbroadcast_grad():
    a = Tensor(rng().uniform(-1, 1, (3, 1, 4)), requires_grad=True)
    b = Tensor(rng(1).uniform(-1, 1, (5, 4)), requires_grad=True)
    out = a * b
    assert out.shape == (3, 5, 4)
    backward(tsum(out))
    assert a.grad.shape == a.shape
    assert b.grad.shape == b.shape


def test_div_by_zero_raises_numeric_error():
    with pytest.raises(ad.NumericError):
        Tensor([1.0]) / Tensor([0.0])


def test_reduction_bit_reproducible():
    x = rng(7).uniform(-1, 1, (41, 13))
    s1 = tsum(Tensor(x)).item()
    s2 = tsum(Tensor(x.copy())).item()
    assert s1 == s2


@pytest.mark.parametrize(
    "fn",
    [
        lambda x: tsum(x * x),
        lambda x: tsum(ad.exp(x * 0.5)),
        lambda x: tsum(gelu(x)),
        lambda x: tsum(relu(x + 0.3) * x),
        lambda x: tsum(ad.sqrt(x * x + 1.0)),
        lambda x: tsum(tmean(x, axis=1, keepdims=True) * tmean(x, axis=0, keepdims=True)),
        lambda x: tsum(x / (x * x + 2.0)),
    ],
)
def test_elementwise_gradients_match_finite_differences(fn):
    x = rng(3).uniform(-1, 1, (5, 4))
    assert grad_check(fn, Tensor(x)) <= 1e-4


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = matmul(Tensor(np.eye(2)), m)
    np.testing.assert_array_equal(out.data, m.data)


def test_matmul_small_product():
    out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[11.0]])


def test_matmul_shape_error():
    with pytest.raises(ad.ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_vs_finite_differences():
    b = Tensor(rng(5).uniform(-1, 1, (4, 2)))
    a0 = rng(6).uniform(-1, 1, (3, 4))
    err = grad_check(lambda a: tsum(matmul(a, b)), Tensor(a0), step=1e-5)
    assert err <= 1e-6


def test_matmul_batched_gradient():
    b = Tensor(rng(8).uniform(-1, 1, (4, 3)))
    a0 = rng(9).uniform(-1, 1, (2, 5, 4))
    err = grad_check(lambda a: tsum(matmul(a, b) * 0.7), Tensor(a0))
    assert err <= 1e-4


# ---------------------------------------------------------------------------
# layer norm
# ---------------------------------------------------------------------------

def _ln(x, eps=1e-5):
    c = x.shape[-1]
    return layer_norm(x, Tensor(np.ones(c)), Tensor(np.zeros(c)), eps)


def test_layer_norm_constant_vector():
    out = _ln(Tensor([5.0, 5.0, 5.0]))
    np.testing.assert_allclose(out.data, [0.0, 0.0, 0.0], atol=1e-12)


def test_layer_norm_two_point():
    # mean 0, variance 1 analytically, so tiny eps leaves values untouched
    out = _ln(Tensor([1.0, -1.0]), eps=1e-14)
    np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-6)


def test_layer_norm_gradient():
    x = rng(11).uniform(-1, 1, (3, 6))
    err = grad_check(lambda t: tsum(_ln(t) * 0.3), Tensor(x))
    assert err <= 1e-5


def test_layer_norm_affine_params_gradient():
    x = Tensor(rng(12).uniform(-1, 1, (4, 5)))
    g0 = rng(13).uniform(0.5, 1.5, 5)

    def fn(gamma):
        return tsum(layer_norm(x, gamma, Tensor(np.zeros(5)), 1e-5))

    assert grad_check(fn, Tensor(g0)) <= 1e-5


# ---------------------------------------------------------------------------
# backward contract
# ---------------------------------------------------------------------------

def test_backward_analytic_square():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward(tsum(x * x))
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])


def test_backward_linear_all_ones():
    x = Tensor(rng(2).uniform(-1, 1, 7), requires_grad=True)
    backward(tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones(7))


def test_backward_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(tsum(x * x))
    first = x.grad.copy()
    backward(tsum(x * x))
    np.testing.assert_allclose(x.grad, 2.0 * first)


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ad.ShapeError):
        backward(x * x)


def test_backward_rejects_untracked():
    with pytest.raises(ValueError):
        backward(tsum(Tensor([1.0])))


def test_diamond_graph_gradient():
    x = Tensor([0.5, -0.25], requires_grad=True)
    y = x * x
    loss = tsum(y + y * x)  # x^2 + x^3
    backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.data + 3 * x.data**2)


# ---------------------------------------------------------------------------
# grad_check itself
# ---------------------------------------------------------------------------

def test_grad_check_quadratic():
    assert grad_check(lambda x: tsum(x * x), Tensor([1.0, 2.0]), 1e-5) <= 1e-6


def test_grad_check_linear_near_zero():
    assert grad_check(lambda x: tsum(x), Tensor([0.3, -0.7]), 1e-5) <= 1e-9


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def test_reshape_transpose_preserve_count_and_gradient():
    x0 = rng(20).uniform(-1, 1, (2, 3, 4))

    def fn(x):
        y = transpose(reshape(x, (6, 4)), (1, 0))
        return tsum(y * y * 0.5)

    assert grad_check(fn, Tensor(x0)) <= 1e-4


def test_concat_and_crop_roundtrip():
    a = Tensor(rng(21).uniform(-1, 1, (3, 2)))
    b = Tensor(rng(22).uniform(-1, 1, (3, 5)))
    joined = concat([a, b], axis=1)
    assert joined.shape == (3, 7)
    back = crop(joined, [(0, 3), (2, 7)])
    np.testing.assert_array_equal(back.data, b.data)


def test_pad_then_crop_is_identity():
    x = rng(23).uniform(-1, 1, (4, 5))
    padded = pad(Tensor(x), [(1, 2), (0, 3)])
    assert padded.shape == (7, 8)
    out = crop(padded, [(1, 5), (0, 5)])
    np.testing.assert_array_equal(out.data, x)


def test_pad_crop_concat_gradients():
    x0 = rng(24).uniform(-1, 1, (3, 4))

    def fn(x):
        p = pad(x, [(1, 1), (2, 0)])
        c = crop(p, [(0, 4), (1, 5)])
        j = concat([c, c * 2.0], axis=0)
        return tsum(j * j)

    assert grad_check(fn, Tensor(x0)) <= 1e-4


def test_softmax_rows_sum_to_one_and_gradient():
    x0 = rng(25).uniform(-1, 1, (3, 5))
    y = softmax(Tensor(x0), axis=-1)
    np.testing.assert_allclose(y.data.sum(axis=-1), np.ones(3), atol=1e-12)
    w = Tensor(rng(26).uniform(-1, 1, (3, 5)))
    assert grad_check(lambda t: tsum(softmax(t, -1) * w), Tensor(x0)) <= 1e-4


# ---------------------------------------------------------------------------
# spatial primitives vs brute-force oracles
# ---------------------------------------------------------------------------

def _box_filter_oracle(x, radii):
    out = np.zeros_like(x)
    for pos in np.ndindex(x.shape):
        acc = 0.0
        ranges = [
            range(max(0, p - r), min(n, p + r + 1))
            for p, r, n in zip(pos, radii, x.shape)
        ]
        for q in np.ndindex(*[len(r) for r in ranges]):
            idx = tuple(ranges[a][q[a]] for a in range(len(pos)))
            acc += x[idx]
        out[pos] = acc
    return out


def test_box_filter_matches_bruteforce():
    x = rng(30).uniform(-1, 1, (6, 7))
    got = box_filter(Tensor(x), (2, 1)).data
    np.testing.assert_allclose(got, _box_filter_oracle(x, (2, 1)), atol=1e-12)


def test_box_filter_3d_and_gradient():
    x = rng(31).uniform(-1, 1, (4, 5, 3))
    got = box_filter(Tensor(x), (1, 1, 1)).data
    np.testing.assert_allclose(got, _box_filter_oracle(x, (1, 1, 1)), atol=1e-12)
    w = Tensor(rng(32).uniform(-1, 1, (4, 5, 3)))
    err = grad_check(lambda t: tsum(box_filter(t, (1, 1, 1)) * w), Tensor(x))
    assert err <= 1e-4


def _neighbor_stack_oracle(x, radii):
    import itertools

    spatial = x.shape[:-1]
    offs = list(itertools.product(*(range(-r, r + 1) for r in radii)))
    out = np.zeros(spatial + (len(offs), x.shape[-1]))
    for pos in np.ndindex(*spatial):
        for j, d in enumerate(offs):
            q = tuple(p + dd for p, dd in zip(pos, d))
            if all(0 <= qq < n for qq, n in zip(q, spatial)):
                out[pos + (j,)] = x[q]
    return out


def test_neighbor_stack_matches_bruteforce():
    x = rng(33).uniform(-1, 1, (5, 4, 3))
    got = neighbor_stack(Tensor(x), (1, 2)).data
    np.testing.assert_array_equal(got, _neighbor_stack_oracle(x, (1, 2)))


def test_neighbor_stack_center_index_is_identity():
    x = rng(34).uniform(-1, 1, (4, 4, 2))
    out = neighbor_stack(Tensor(x), (1, 1)).data
    np.testing.assert_array_equal(out[..., 4, :], x)  # delta (0,0) of 9


def test_neighbor_stack_gradient():
    x0 = rng(35).uniform(-1, 1, (4, 3, 2))
    w = Tensor(rng(36).uniform(-1, 1, (4, 3, 9, 2)))
    err = grad_check(lambda t: tsum(neighbor_stack(t, (1, 1)) * w), Tensor(x0))
    assert err <= 1e-4


def test_warp_gradients_wrt_source_and_field():
    src0 = rng(40).uniform(-1, 1, (5, 6, 2))
    # keep sample points clear of voxel-center kinks and the clamped border
    fld0 = 0.3 + 0.2 * rng(41).uniform(-1, 1, (5, 6, 2))
    fld0[-2:, :, 0] = -0.4
    fld0[:, -2:, 1] = -0.4

    err_s = grad_check(
        lambda s: tsum(warp_linear(s, Tensor(fld0))), Tensor(src0)
    )
    assert err_s <= 1e-4
    w = Tensor(rng(42).uniform(-1, 1, (5, 6, 2)))
    err_f = grad_check(
        lambda f: tsum(warp_linear(Tensor(src0), f) * w), Tensor(fld0)
    )
    assert err_f <= 1e-4


def test_resize_linear_constant_preserved():
    x = np.full((4, 4, 3), 2.5)
    out = resize_linear(Tensor(x), (8, 8))
    np.testing.assert_allclose(out.data, 2.5, atol=1e-12)


def test_resize_linear_gradient():
    x0 = rng(43).uniform(-1, 1, (4, 5, 2))
    w = Tensor(rng(44).uniform(-1, 1, (8, 10, 2)))
    err = grad_check(lambda t: tsum(resize_linear(t, (8, 10)) * w), Tensor(x0))
    assert err <= 1e-4


# ---------------------------------------------------------------------------
# finite-check switch
# ---------------------------------------------------------------------------

def test_finite_checks_toggle():
    with ad.finite_checks(False):
        out = Tensor([1.0]) / Tensor([0.0])
        assert np.isinf(out.data).all()
    with pytest.raises(ad.NumericError):
        Tensor([1.0]) / Tensor([0.0])
