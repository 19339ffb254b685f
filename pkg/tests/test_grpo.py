import math

import numpy as np
import pytest

from neighbor_grpo.grpo import (GrpoObjectiveConfig, advantages_quasinorm, advantages_standard, clipped_objective,
                                clipped_terms, compute_advantages, kl_surrogate)
from oracles import clipped_sum_direct, standard_advantages_direct


def test_standard_example():
    a = advantages_standard([0, 1, 2, 3]).values
    np.testing.assert_allclose(a, [-1.34164, -0.44721, 0.44721, 1.34164], atol=1e-4)
    np.testing.assert_allclose(a, standard_advantages_direct([0, 1, 2, 3]), rtol=1e-13)


def test_degenerate_group_is_zero():
    assert not advantages_standard([5, 5, 5, 5]).values.any()
    assert not advantages_quasinorm([5, 5, 5, 5], 0.8).values.any()


def test_standard_has_norm_sqrt_g():
    rng = np.random.default_rng(0)
    for G in (2, 4, 12, 31):
        r = rng.normal(size=G) * 3 + 1
        assert np.linalg.norm(advantages_standard(r).values) == pytest.approx(math.sqrt(G), abs=1e-9)


def test_group_size_and_finiteness_errors():
    with pytest.raises(ValueError):
        advantages_standard([1.0])
    with pytest.raises(ValueError):
        advantages_standard([1.0, np.nan])
    for p in (0.0, -1.0, 2.5):
        with pytest.raises(ValueError):
            advantages_quasinorm([0, 1], p)
    with pytest.raises(ValueError):
        compute_advantages([0, 1], mode="rank")


@pytest.mark.parametrize("p, magnitude", [(1.0, 0.25), (0.8, 4**-1.25)])
def test_quasinorm_flat_examples(p, magnitude):
    a = advantages_quasinorm([1, 1, -1, -1], p).values
    np.testing.assert_allclose(a, [magnitude, magnitude, -magnitude, -magnitude], atol=1e-12)
    assert magnitude == pytest.approx(0.176777, abs=1e-5) or p == 1.0


def test_quasinorm_p2_is_half_standard():
    q = advantages_quasinorm([0, 1, 2, 3], 2.0).values
    np.testing.assert_allclose(q, 0.5 * advantages_standard([0, 1, 2, 3]).values, rtol=1e-14)


def test_sample_std_option():
    a = advantages_standard([0, 1, 2, 3], ddof=1).values
    np.testing.assert_allclose(a, np.array([-1.5, -0.5, 0.5, 1.5]) / math.sqrt(5 / 3), rtol=1e-13)


def test_flat_shrinkage_closed_form():
    for p in (0.5, 0.8, 1.0, 2.0):
        mags = []
        for G in (2, 4, 8, 16):
            r = [1.0] * (G // 2) + [-1.0] * (G // 2)
            a = advantages_quasinorm(r, p).values
            np.testing.assert_allclose(np.abs(a), G ** (-1 / p), rtol=1e-12)
            mags.append(abs(a[0]))
        assert all(x > y for x, y in zip(mags, mags[1:]))
    by_p = [abs(advantages_quasinorm([1, 1, -1, -1], p).values[0]) for p in (0.5, 0.8, 1.0, 2.0)]
    assert all(x < y for x, y in zip(by_p, by_p[1:]))


def test_clip_worked_example():
    value, terms = clipped_objective([1.0, -1.0], [1.5, 0.5], GrpoObjectiveConfig(clip_eps=1e-4))
    assert value == pytest.approx(0.0002, abs=1e-12)
    np.testing.assert_allclose(terms, [1.0001, -0.9999], rtol=1e-14)


def test_clip_infinite_eps_is_plain_sum():
    A, rho = np.array([0.3, -1.2, 0.9]), np.array([1.7, 0.2, 1.01])
    value, _ = clipped_objective(A, rho, GrpoObjectiveConfig(clip_eps=math.inf))
    assert value == float(np.sum(A * rho))


def test_unit_ratios_give_sum_of_advantages():
    adv = advantages_standard([0.1, 2.0, -1.0, 0.4])
    value, _ = clipped_objective(adv, np.ones(4), GrpoObjectiveConfig())
    assert abs(value) < 1e-12


def test_clip_matches_direct_oracle():
    rng = np.random.default_rng(3)
    for _ in range(200):
        G = int(rng.integers(2, 10))
        A, rho = rng.normal(size=G), np.exp(rng.normal(scale=0.5, size=G))
        eps = float(rng.uniform(1e-4, 0.5))
        value, _ = clipped_objective(A, rho, GrpoObjectiveConfig(clip_eps=eps))
        assert value == pytest.approx(clipped_sum_direct(A, rho, eps), abs=1e-12)


def test_active_mask():
    _, active = clipped_terms(np.array([1.0, 1.0, -1.0, -1.0]), np.array([1.5, 0.5, 1.5, 0.5]), 0.1)
    # positive A is clipped above, negative A below
    assert active.tolist() == [False, True, True, False]


def test_objective_errors():
    with pytest.raises(ValueError):
        clipped_objective([1.0, -1.0], [1.0, 0.0], GrpoObjectiveConfig())
    with pytest.raises(ValueError):
        clipped_objective([1.0, -1.0], [1.0], GrpoObjectiveConfig())
    with pytest.raises(ValueError):
        GrpoObjectiveConfig(clip_eps=0.0)
    with pytest.raises(ValueError):
        GrpoObjectiveConfig(beta_kl=-1.0)


def test_kl_penalty_is_subtracted():
    A, rho = np.array([1.0, -1.0]), np.array([1.0, 1.0])
    kl = kl_surrogate([0.1, 0.3], [0.0, 0.0])
    assert kl == pytest.approx(0.5 * (0.01 + 0.09) / 2)
    off, _ = clipped_objective(A, rho, GrpoObjectiveConfig(), kl=kl)
    on, _ = clipped_objective(A, rho, GrpoObjectiveConfig(beta_kl=2.0), kl=kl)
    assert off == 0.0 and on == pytest.approx(-2.0 * kl)
