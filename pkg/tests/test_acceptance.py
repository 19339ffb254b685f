"""Acceptance criteria 1-11, each reported as one PASS/FAIL line.

The lines are printed by each test and repeated in the terminal summary.
"""

import time

import pytest

from conftest import ACCEPTANCE_LINES
from neighbor_grpo import checks


def report(n, result, limit=None):
    ok = result.passed and (limit is None or result.seconds < limit)
    budget = f" [budget {limit:.0f}s]" if limit else ""
    body = result.line().split("] ", 1)[1]
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {body}{budget}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert result.passed, line
    if limit is not None:
        assert result.seconds < limit, f"criterion {n} over its {limit}s budget"


def test_criterion_01_gradient_fidelity():
    r = checks.gradient_fidelity(n_instances=50)
    assert r.details["nll_max_rel_err"] < 1e-5 and r.details["objective_max_rel_err"] < 1e-4
    report(1, r, 30)


def test_criterion_02_solver_orders():
    r = checks.solver_orders()
    assert abs(r.details["euler_slope"] - 1.0) <= 0.25 and abs(r.details["dpmpp_slope"] - 2.0) <= 0.3
    report(2, r, 60)


def test_criterion_03_sde_marginal():
    r = checks.sde_marginal(n=50_000)
    assert abs(r.details["mean_z"]) <= 3 and abs(r.details["var_z"]) <= 3
    report(3, r, 60)


def test_criterion_04_contrastive_identity():
    r = checks.contrastive_identity()
    report(4, r, 10)


def test_criterion_05_anchor_estimator():
    r = checks.anchor_estimator(draws=1000)
    assert r.details["identity_gap"] < 1e-12
    report(5, r, 30)


def test_criterion_06_quasi_norm_algebra():
    report(6, checks.quasi_norm_algebra())


def test_criterion_07_nfe_accounting():
    r = checks.nfe_accounting()
    assert sorted(r.details.values()) == ["1.33", "14.00", "3.00", "4.00"]
    report(7, r)


def test_criterion_08_neighborhood_statistics():
    r = checks.neighborhood_stats(d=4096, G=12, sigma=0.3)
    report(8, r)


@pytest.fixture(scope="module")
def trained_pair(tmp_path_factory):
    t0 = time.perf_counter()
    neigh, sde = checks.train_pair(str(tmp_path_factory.mktemp("acceptance")))
    return neigh, sde, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_09_end_to_end(trained_pair):
    neigh, _, seconds = trained_pair
    cfg = neigh.config.train
    assert (cfg.G, cfg.sigma, cfg.B, cfg.p, cfg.T, cfg.K, cfg.iterations) == (12, 0.3, 4, 0.8, 8, 4, 300)
    assert neigh.config.reward_kind == "target_logdensity" and neigh.config.seeds == [0, 1, 2]
    r = checks.end_to_end(neigh)
    # the wall clock covers pretraining and both variants
    r.seconds = seconds
    report(9, r, 600)


@pytest.mark.slow
def test_criterion_10_comparative_convergence(trained_pair):
    neigh, sde, _ = trained_pair
    assert neigh.config.train.T == sde.config.train.T
    assert neigh.config.train.iterations == sde.config.train.iterations
    report(10, checks.comparative_convergence(neigh, sde))


@pytest.mark.slow
def test_criterion_11_determinism():
    report(11, checks.determinism())
