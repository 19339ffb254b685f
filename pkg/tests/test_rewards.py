import math

import numpy as np
import pytest

from neighbor_grpo.rewards import RewardFn, reward_eval
from neighbor_grpo.velocity import mixture_centers
from oracles import mixture_logpdf_direct


def test_plateau_is_constant_inside_radius():
    fn = RewardFn("flatness_probe", plateau_radius=1.0, plateau_value=2.5)
    pts = np.array([[0.0, 0.0], [0.3, -0.6], [0.0, 0.999]])
    assert np.all(fn(pts) == 2.5)
    assert reward_eval(fn, np.array([2.0, 0.0])) == pytest.approx(1.5)


def test_single_standard_gaussian_at_origin():
    fn = RewardFn(means=((0.0, 0.0),), std=1.0)
    assert reward_eval(fn, np.zeros(2)) == pytest.approx(-math.log(2 * math.pi), abs=1e-12)
    assert reward_eval(fn, np.zeros(2)) == pytest.approx(-1.83788, abs=1e-5)


def test_neg_mode_distance():
    fn = RewardFn("neg_mode_distance", mode_index=2)
    mu = mixture_centers()[2]
    assert reward_eval(fn, mu) == 0.0
    assert reward_eval(fn, mu + np.array([3.0, 4.0])) == pytest.approx(-5.0)
    # a one-hot condition selects the mode
    c = np.zeros(8)
    c[5] = 1.0
    assert reward_eval(fn, mixture_centers()[5], c) == 0.0


def test_mixture_log_density_matches_direct_sum():
    rng = np.random.default_rng(0)
    means = tuple(map(tuple, mixture_centers()[:3]))
    weights = (1.0, 2.0, 0.5)
    fn = RewardFn(means=means, std=0.5, weights=weights)
    for x in rng.normal(scale=2.0, size=(50, 2)):
        assert reward_eval(fn, x) == pytest.approx(mixture_logpdf_direct(x, means, 0.5, list(weights)), rel=1e-12)


def test_far_points_stay_finite():
    fn = RewardFn(std=0.15)
    r = fn(np.array([[1e3, -1e3], [40.0, 0.0]]))
    assert np.all(np.isfinite(r))


def test_errors():
    with pytest.raises(ValueError):
        RewardFn("bogus")
    with pytest.raises(ValueError):
        RewardFn(std=0.0)
    with pytest.raises(ValueError):
        RewardFn(means=((0.0, 0.0),), weights=(1.0, 2.0))
    with pytest.raises(ValueError):
        reward_eval(RewardFn(), np.array([np.nan, 0.0]))
    with pytest.raises(ValueError):
        reward_eval(RewardFn(), np.zeros((2, 2)))
