import math

import numpy as np
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from neighbor_grpo.grpo import advantages_quasinorm, advantages_standard, clipped_terms
from neighbor_grpo.mathcore import RngStream, lp_norm, softmax_neg_sqdist
from neighbor_grpo.neighbor import leap_policy, perturb_noise
from oracles import clipped_sum_direct, softmax_neg_direct

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
groups = arrays(np.float64, st.integers(2, 16), elements=finite)
ps = st.floats(0.1, 2.0)


def spread(r):
    return np.std(r) > 1e-6 * max(1.0, np.max(np.abs(r)))


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(0, 1e4)))
def test_softmax_is_a_distribution_and_order_reversing(d):
    p = softmax_neg_sqdist(d)
    assert abs(p.sum() - 1) < 1e-12 and np.all(p >= 0)
    i, j = np.argmin(d), np.argmax(d)
    assert p[i] >= p[j]


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(0, 50)), st.floats(-100, 100))
def test_softmax_shift_invariant_and_matches_direct(d, c):
    assume(np.all(d + c >= 0))
    np.testing.assert_allclose(softmax_neg_sqdist(d + c), softmax_neg_sqdist(d), rtol=1e-9, atol=1e-300)
    np.testing.assert_allclose(softmax_neg_sqdist(d), softmax_neg_direct(d), rtol=1e-9, atol=1e-300)


@given(arrays(np.float64, st.integers(1, 10), elements=finite), ps, st.floats(1e-3, 1e3))
def test_lp_norm_is_absolutely_homogeneous(v, p, a):
    assume(np.any(v != 0))
    assert math.isclose(lp_norm(a * v, p), a * lp_norm(v, p), rel_tol=1e-9)
    assert math.isclose(lp_norm(-v, p), lp_norm(v, p), rel_tol=1e-12)


@given(groups, st.floats(-1e3, 1e3).filter(lambda a: abs(a) > 1e-3), finite)
def test_standard_advantages_affine_invariance(r, alpha, beta):
    assume(spread(r))
    a = advantages_standard(r).values
    b = advantages_standard(alpha * r + beta).values
    assume(np.std(alpha * r + beta) > 1e-6 * max(1.0, np.max(np.abs(alpha * r + beta))))
    np.testing.assert_allclose(b, np.sign(alpha) * a, atol=1e-6)


@given(groups)
def test_standard_advantages_centered_with_norm_sqrt_g(r):
    assume(spread(r))
    a = advantages_standard(r).values
    assert abs(a.sum()) < 1e-9 * len(a)
    assert math.isclose(np.linalg.norm(a), math.sqrt(len(a)), rel_tol=1e-9)


@given(groups, ps)
def test_quasinorm_preserves_sign_and_order(r, p):
    assume(spread(r))
    centered = r - r.mean()
    a = advantages_quasinorm(r, p).values
    assert math.isclose(lp_norm(a, p), 1.0, rel_tol=1e-9)
    big = np.abs(centered) > 1e-9 * np.max(np.abs(centered))
    assert np.all(np.sign(a[big]) == np.sign(centered[big]))
    dc, da = np.subtract.outer(centered, centered), np.subtract.outer(a, a)
    clear = np.abs(dc) > 1e-9 * np.max(np.abs(centered))
    assert np.all(np.sign(da[clear]) == np.sign(dc[clear]))


@given(groups)
def test_quasinorm_p2_is_standard_over_sqrt_g(r):
    assume(spread(r))
    np.testing.assert_allclose(advantages_quasinorm(r, 2.0).values * math.sqrt(len(r)),
                               advantages_standard(r).values, rtol=1e-9, atol=1e-9)


@given(st.integers(1, 8).map(lambda h: 2 * h), ps, ps)
def test_flat_group_shrinkage(G, p1, p2):
    r = np.r_[np.ones(G // 2), -np.ones(G // 2)]
    m = np.abs(advantages_quasinorm(r, p1).values)
    np.testing.assert_allclose(m, G ** (-1 / p1), rtol=1e-12)
    if p1 < p2:
        assert m[0] < abs(advantages_quasinorm(r, p2).values[0])


@st.composite
def clip_instances(draw):
    G = draw(st.integers(1, 10))
    A = draw(arrays(np.float64, G, elements=st.floats(-10, 10)))
    rho = draw(arrays(np.float64, G, elements=st.floats(1e-3, 10)))
    e1 = draw(st.floats(1e-4, 2.0))
    e2 = draw(st.floats(1e-4, 2.0))
    return A, rho, min(e1, e2), max(e1, e2)


@given(clip_instances())
def test_clipped_terms_monotone_in_eps_and_bounded_by_unclipped(inst):
    A, rho, small, large = inst
    t_small, _ = clipped_terms(A, rho, small)
    t_large, _ = clipped_terms(A, rho, large)
    unclipped = A * rho
    assert np.all(t_small <= t_large + 1e-12)
    assert np.all(t_large <= unclipped + 1e-12)
    assert math.isclose(t_small.sum(), clipped_sum_direct(A, rho, small), rel_tol=1e-9, abs_tol=1e-9)


@given(arrays(np.float64, (5, 3), elements=st.floats(-5, 5)), st.permutations(range(5)),
       arrays(np.float64, 3, elements=st.floats(-5, 5)))
def test_leap_policy_permutation_equivariant(X, perm, anchor):
    perm = np.array(perm)
    p = leap_policy(X, anchor).probs
    np.testing.assert_allclose(leap_policy(X[perm], anchor).probs, p[perm], rtol=1e-12, atol=1e-300)


@settings(max_examples=30)
@given(st.integers(0, 2**32), st.floats(1e-3, 1.0), st.integers(2, 6))
def test_perturb_noise_is_deterministic_given_stream(seed, sigma, G):
    eps = RngStream(seed).gaussian(4)
    a = perturb_noise(eps, sigma, G, RngStream(seed + 1)).members
    b = perturb_noise(eps, sigma, G, RngStream(seed + 1)).members
    assert np.array_equal(a, b)
    assert a.shape == (G, 4)
