import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ibpg.schedules import (AVG_RATE, INSUFFICIENT, LAST_RATE, UNCLASSIFIED, VIBPG_RATE, ErrorAccumulator,
                            Rule, ScheduleError, ScheduleInvalidError, ThetaSchedule, ToleranceSchedule,
                            check_prefactor_bound, prefactor_bound, summability_class, theta_closed_form,
                            theta_root_find, tolerance_at, validate_theta, vartheta, vartheta_array,
                            vartheta_sum_bound, weighted_cesaro)


def test_closed_form_values():
    assert theta_closed_form(0) == 1.0
    assert theta_closed_form(1, alpha=5) == pytest.approx(0.8)
    assert theta_closed_form(4, alpha=5) == pytest.approx(0.5)
    with pytest.raises(ScheduleError):
        theta_closed_form(1, alpha=2.5, gamma=2)


@given(st.floats(1e-6, 1.0), st.sampled_from([1.0, 1.5, 2.0, 3.0]))
def test_root_find_residual(theta_prev, gamma):
    t = theta_root_find(theta_prev, gamma)
    target = theta_prev ** -gamma
    resid = (1 - t) / t ** gamma - target
    assert theta_prev / (1 + theta_prev) <= t <= theta_prev
    # the returned end keeps the slack nonnegative
    assert resid <= 0
    assert abs(resid) <= 1e-12 * target


def test_root_find_gamma_one_is_harmonic():
    # (1 - t)/t = 1/theta  gives  t = theta / (1 + theta), i.e. theta_k = 1/(k+1)
    s = ThetaSchedule("root_find", gamma=1.0)
    th = s.materialize(50)
    assert np.allclose(th, 1.0 / (np.arange(51) + 1), rtol=1e-13)


def test_root_find_gamma_two_matches_recurrence():
    # closed-form solution of (1-t)/t^2 = 1/p^2
    s = ThetaSchedule("root_find", gamma=2.0)
    th = s.materialize(200)
    p = 1.0
    for k in range(1, 201):
        p = 0.5 * (math.sqrt(p ** 4 + 4 * p ** 2) - p ** 2)
        assert th[k] == pytest.approx(p, rel=1e-12)


def test_vartheta_first_terms():
    s = ThetaSchedule("closed_form", gamma=2.0, alpha=5.0)
    assert vartheta(s, 0) == pytest.approx(1.0)
    # 1/theta_0^2 - (1 - 0.8)/0.64
    assert vartheta(s, 1) == pytest.approx(1 - 0.2 / 0.64)


def test_vartheta_rejects_invalid_schedule():
    # a sharp drop makes (1 - theta_k)/theta_k^2 exceed 1/theta_{k-1}^2
    s = ThetaSchedule("custom", gamma=2.0, func=lambda k: 0.9 if k == 1 else 0.1)
    with pytest.raises(ScheduleInvalidError):
        vartheta(s, 2)


@pytest.mark.parametrize("mode,gamma,alpha", [("closed_form", 1.0, 5.0), ("closed_form", 2.0, 5.0),
                                              ("closed_form", 2.0, 3.0), ("root_find", 2.0, None),
                                              ("root_find", 1.0, None)])
def test_validate_theta_passes(mode, gamma, alpha):
    rep = validate_theta(ThetaSchedule(mode, gamma, alpha), 5000)
    assert rep.passed, rep


def test_validate_theta_detects_each_condition():
    too_big = ThetaSchedule("custom", gamma=2.0, alpha=5.0, func=lambda k: 0.95)
    rep = validate_theta(too_big, 20)
    assert not rep.passed and rep.condition == "upper" and rep.first_violation == 1
    growing = ThetaSchedule("custom", gamma=2.0, func=lambda k: min(1.0, 0.3 + 0.1 * k))
    rep = validate_theta(growing, 20)
    assert not rep.passed and rep.condition == "vartheta"
    tiny = ThetaSchedule("custom", gamma=2.0, func=lambda k: 0.5 ** k)
    rep = validate_theta(tiny, 20)
    assert not rep.passed
    out = ThetaSchedule("custom", gamma=2.0, func=lambda k: 0.0)
    assert validate_theta(out, 3).condition == "range"


def test_prefactor_bound():
    assert prefactor_bound(5.0, 2.0) == pytest.approx(2 + 16 / 2)
    ok, worst, bound = check_prefactor_bound(ThetaSchedule("closed_form", 2.0, 5.0), 10_000)
    assert ok and worst <= bound
    assert vartheta_sum_bound(0, 2.0) == pytest.approx(2 + 9 / 2)


@given(st.integers(0, 2000))
def test_theta_lower_bound_closed_form(k):
    th = ThetaSchedule("closed_form", 2.0, 5.0)(k)
    assert th >= 1.0 / (k + 2.0)


def test_vartheta_array_matches_scalar():
    s = ThetaSchedule("closed_form", 2.0, 5.0)
    arr = vartheta_array(s.materialize(30), 2.0)
    assert np.allclose(arr, [vartheta(s, k) for k in range(31)], rtol=1e-12)


def test_schedule_config_errors():
    with pytest.raises(ScheduleError):
        ThetaSchedule("nope")
    with pytest.raises(ScheduleError):
        ThetaSchedule("custom")
    with pytest.raises(ScheduleError):
        Rule("power", p=0)
    with pytest.raises(ScheduleError):
        Rule("geometric", rate=1.5)
    with pytest.raises(ScheduleError):
        ToleranceSchedule(normalization="weird")


def test_tolerance_values_and_floor():
    sch = ToleranceSchedule.power(1.1)
    assert tolerance_at(sch, 0) == (0.0, 1.0, 0.0)
    assert tolerance_at(sch, 9)[1] == pytest.approx(10 ** -1.1)
    assert tolerance_at(sch, 10 ** 12)[1] == 1e-10


def test_iterate_normalized():
    sch = ToleranceSchedule(eta=Rule("power", p=2.0), normalization="iterate_normalized")
    eta, _, _ = tolerance_at(sch, 1, iterate_norms=3.0)
    assert eta == pytest.approx(0.25 / 4)
    with pytest.raises(ScheduleError):
        tolerance_at(sch, 1)


@pytest.mark.parametrize("p,labels", [
    (3.1, {AVG_RATE, LAST_RATE, VIBPG_RATE}),
    (2.1, {AVG_RATE, LAST_RATE, VIBPG_RATE}),
    (1.1, {AVG_RATE, VIBPG_RATE}),
    (0.1, {INSUFFICIENT}),
])
def test_summability_of_power_schedules(p, labels):
    assert summability_class(ToleranceSchedule.power(p)) == labels


def test_summability_eta_weighting():
    # eta ~ k^-2.5 is summable with weight k but not k^2
    sch = ToleranceSchedule(eta=Rule("power", p=2.5), mu=Rule("power", p=3.0))
    labels = summability_class(sch, "vibpg", gamma=2.0)
    assert VIBPG_RATE in labels
    assert VIBPG_RATE not in summability_class(sch, "vibpg", gamma=3.0)
    assert summability_class(ToleranceSchedule(mu=Rule("custom", func=lambda k: 0.0))) == {UNCLASSIFIED}


def test_weighted_cesaro():
    a = np.array([5.0, 1.0, 1.0, 1.0])
    assert np.allclose(weighted_cesaro(a), [0.0, 0.5, 1.0, 1.5])


def test_accumulator_single_term():
    acc = ErrorAccumulator(L=2.0)
    acc.update(eta=0.1, mu=0.2, nu=0.3, feas_norm=1.5)
    avg, last = acc.ibpg_rhs(dist0=4.0, ref_norm=2.0)
    expect = 2 * 4 + 0.1 * 1.5 + 0.1 * 2 + 2 * 0.2 + 0.3
    assert avg == pytest.approx(expect)
    assert last == pytest.approx(expect)  # the i * xi_i sum starts with i = 0


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 10)), min_size=1, max_size=20))
def test_accumulator_sums_nondecreasing(rows):
    acc = ErrorAccumulator(L=1.0, gamma=2.0)
    prev = None
    for i, (e, m, n, f) in enumerate(rows):
        acc.update(e, m, n, f, theta=4.0 / (i + 4))
        cur = (acc.sum_eta, acc.sum_mu, acc.sum_nu, acc.sum_k_xi, acc.sum_theta_eta_norm)
        if prev is not None:
            assert all(c >= p for c, p in zip(cur, prev))
        prev = cur
