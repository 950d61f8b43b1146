import itertools

import numpy as np
import pytest

from regmlp.autodiff import ShapeError, Tensor, grad_check, tsum
from regmlp.correlation import local_correlation, num_channels, step_context_correlation


def rng(seed=0):
    return np.random.default_rng(seed)


def _bruteforce_correlation(a, b, radius, normalize, eps=1e-8, guard=1e-12):
    """Explicit nested-loop oracle for the correlation volume."""
    spatial = a.shape[:-1]
    rank = len(spatial)
    offsets = list(itertools.product(range(-radius, radius + 1), repeat=rank))
    out = np.zeros(spatial + (len(offsets),))
    for pos in np.ndindex(*spatial):
        for j, delta in enumerate(offsets):
            q = tuple(p + d for p, d in zip(pos, delta))
            if all(0 <= qq < n for qq, n in zip(q, spatial)):
                bq = b[q]
            else:
                bq = np.zeros(a.shape[-1])
            dot = float(np.dot(a[pos], bq))
            if normalize:
                na = np.sqrt(np.dot(a[pos], a[pos]) + guard)
                nb = np.sqrt(np.dot(bq, bq) + guard)
                dot = dot / (na * nb + eps)
            out[pos + (j,)] = dot
    return out


def test_channel_counts():
    assert num_channels(2, 2) == 25
    assert num_channels(1, 3) == 27


def test_self_correlation_center_channel_unit_norm():
    a = rng(1).normal(0, 1, (6, 6, 4))
    a /= np.linalg.norm(a, axis=-1, keepdims=True)
    corr = local_correlation(a, a, radius=1, normalize=True)
    center = corr.data[..., 4]
    np.testing.assert_allclose(center, 1.0, atol=1e-6)


def test_matches_bruteforce_oracle_2d():
    a = rng(2).uniform(-1, 1, (6, 6, 3))
    b = rng(3).uniform(-1, 1, (6, 6, 3))
    for radius in (0, 1, 2):
        for normalize in (False, True):
            got = local_correlation(a, b, radius=radius, normalize=normalize).data
            want = _bruteforce_correlation(a, b, radius, normalize)
            np.testing.assert_allclose(got, want, atol=1e-9)


def test_matches_bruteforce_oracle_3d():
    a = rng(4).uniform(-1, 1, (4, 5, 4, 2))
    b = rng(5).uniform(-1, 1, (4, 5, 4, 2))
    got = local_correlation(a, b, radius=1, normalize=True).data
    want = _bruteforce_correlation(a, b, 1, True)
    np.testing.assert_allclose(got, want, atol=1e-9)


def test_translation_argmax():
    # b equals a translated by (1, 0): interior argmax displacement is (1, 0)
    a = rng(6).normal(0, 1, (8, 8, 6))
    b = np.zeros_like(a)
    b[:-1, :, :] = a[1:, :, :]  # b(p) = a(p + (1,0))... so a(p) = b(p - (1,0))
    corr = local_correlation(a, b, radius=1, normalize=True).data
    offsets = list(itertools.product((-1, 0, 1), repeat=2))
    for i in range(2, 6):
        for j in range(2, 6):
            best = offsets[int(np.argmax(corr[i, j]))]
            assert best == (-1, 0)


def test_normalized_values_bounded():
    a = rng(7).uniform(-2, 2, (7, 7, 3))
    b = rng(8).uniform(-2, 2, (7, 7, 3))
    corr = local_correlation(a, b, radius=2, normalize=True).data
    assert np.all(corr <= 1.0 + 1e-12) and np.all(corr >= -1.0 - 1e-12)


def test_unnormalized_symmetry():
    # corr(a,b)(p, delta) == corr(b,a)(p+delta, -delta) at interior points
    a = rng(9).uniform(-1, 1, (6, 6, 3))
    b = rng(10).uniform(-1, 1, (6, 6, 3))
    r = 1
    cab = local_correlation(a, b, radius=r, normalize=False).data
    cba = local_correlation(b, a, radius=r, normalize=False).data
    offsets = list(itertools.product(range(-r, r + 1), repeat=2))
    for j, delta in enumerate(offsets):
        jneg = offsets.index((-delta[0], -delta[1]))
        for i in range(r, 6 - r):
            for k in range(r, 6 - r):
                p_shift = (i + delta[0], k + delta[1])
                np.testing.assert_allclose(
                    cab[i, k, j], cba[p_shift + (jneg,)], atol=1e-12
                )


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        local_correlation(np.zeros((4, 4, 2)), np.zeros((4, 4, 3)))


def test_gradients_wrt_both_inputs():
    a0 = rng(11).uniform(-1, 1, (5, 5, 3))
    b0 = rng(12).uniform(-1, 1, (5, 5, 3))
    w = Tensor(rng(13).uniform(-1, 1, (5, 5, 9)))

    err_a = grad_check(
        lambda a: tsum(local_correlation(a, Tensor(b0), radius=1) * w), Tensor(a0)
    )
    err_b = grad_check(
        lambda b: tsum(local_correlation(Tensor(a0), b, radius=1) * w), Tensor(b0)
    )
    assert err_a <= 1e-4 and err_b <= 1e-4


# ---------------------------------------------------------------------------
# step-level correlation
# ---------------------------------------------------------------------------

class _IdentityLift:
    def __call__(self, x):
        return x


def test_step_context_constant_context():
    cur = Tensor(rng(14).normal(0, 1, (8, 8, 3)))
    ctx = Tensor(np.full((4, 4, 3), 0.7))
    corr, up = step_context_correlation(cur, ctx, _IdentityLift(), radius=1)
    np.testing.assert_allclose(up.data, 0.7, atol=1e-12)
    # constant context: every displacement sees the same vector at interior
    interior = corr.data[1:-1, 1:-1, :]
    np.testing.assert_allclose(interior - interior[..., :1], 0.0, atol=1e-9)


def test_step_context_self_match_center_maximal():
    # "current" built as the upsampled context itself -> center channel max
    from regmlp.autodiff import resize_linear

    ctx = Tensor(rng(15).normal(0, 1, (4, 4, 3)))
    up = resize_linear(ctx, (8, 8))
    corr, _ = step_context_correlation(Tensor(up.data), ctx, _IdentityLift(), radius=1)
    c = corr.data
    center = c[..., 4]
    for i in range(1, 7):
        for j in range(1, 7):
            assert center[i, j] >= c[i, j].max() - 1e-9


def test_step_context_shapes():
    cur = Tensor(rng(16).normal(0, 1, (64, 64, 4)))
    ctx = Tensor(rng(17).normal(0, 1, (32, 32, 4)))
    corr, up = step_context_correlation(cur, ctx, _IdentityLift(), radius=2)
    assert corr.shape == (64, 64, 25)
    assert up.shape == (64, 64, 4)


def test_step_context_rejects_bad_extents():
    with pytest.raises(ShapeError):
        step_context_correlation(
            Tensor(np.zeros((8, 8, 3))), Tensor(np.zeros((3, 4, 3))), _IdentityLift()
        )
