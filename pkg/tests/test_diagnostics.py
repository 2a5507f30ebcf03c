import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy.signal import lfilter

from fracsv.diagnostics import (
    autocorrelation,
    compare,
    ess,
    ess_report,
    geyer,
    summarize,
)
from fracsv.errors import ConstantSeries, EmptyChain, InvalidParameter, MismatchedRuns
from fracsv.sampler import ChainOutput, HmcConfig, MassMatrix
from fracsv.sv_model import PARAM_NAMES


def ar1(phi, n, seed):
    e = np.random.default_rng(seed).standard_normal(n)
    return lfilter([1.0], [1.0, -phi], e)


def fake_chain(theta, z=None, seconds=1.0, dataset_id="d", n_leapfrog=10, blocks=1):
    n = theta.shape[0]
    z = np.zeros((n, 0)) if z is None else z
    return ChainOutput(
        theta=theta, u=theta.copy(), accept=np.ones((n, blocks), dtype=bool),
        delta_h=np.zeros((n, blocks)), timing=np.full(n, seconds / max(n, 1)),
        z_monitor=z, monitor_index=np.arange(z.shape[1]),
        config=HmcConfig(step_size=1.0 / n_leapfrog, horizon=1.0, n_iterations=n),
        mass=MassMatrix.identity(theta.shape[1]), dataset_id=dataset_id,
    )


def test_autocorrelation_matches_direct():
    x = np.random.default_rng(0).standard_normal(200)
    r = autocorrelation(x)
    xc = x - x.mean()
    for lag in (0, 1, 5, 17):
        direct = np.sum(xc[:200 - lag] * xc[lag:]) / np.sum(xc * xc)
        assert r[lag] == pytest.approx(direct, abs=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_iid_ess(seed):
    x = np.random.default_rng(seed).standard_normal(10_000)
    assert 0.8 <= ess(x) / x.size <= 1.2


@pytest.mark.parametrize("seed", range(3))
def test_ar1_ess(seed):
    x = ar1(0.9, 100_000, seed)
    ratio = ess(x) / x.size / (0.1 / 1.9)
    assert 0.8 < ratio < 1.2


def test_ar1_moderate_coefficient():
    # integrated autocorrelation (1 + phi)/(1 - phi) for phi = 0.5
    x = ar1(0.5, 50_000, 7)
    assert ess(x) / x.size == pytest.approx(1 / 3, rel=0.1)


def test_constant_series_raises():
    with pytest.raises(ConstantSeries):
        ess(np.full(100, 3.0))


def test_short_series_rejected():
    with pytest.raises(InvalidParameter):
        ess(np.arange(5.0))


def test_ess_capped_for_antithetic_series():
    x = np.tile([1.0, -1.0], 500) + 1e-3 * np.random.default_rng(0).standard_normal(1000)
    assert 0 < ess(x) <= x.size


@given(seed=st.integers(0, 10 ** 6), a=st.floats(-1e3, 1e3), b=st.floats(1e-3, 1e3),
       phi=st.floats(-0.5, 0.95))
@settings(max_examples=40, deadline=None)
def test_ess_affine_invariance(seed, a, b, phi):
    x = ar1(phi, 500, seed)
    assert ess(a + b * x) == pytest.approx(ess(x), rel=1e-6)


@given(seed=st.integers(0, 10 ** 6), phi=st.floats(-0.9, 0.99), n=st.integers(10, 2000))
@settings(max_examples=60, deadline=None)
def test_geyer_truncation_properties(seed, phi, n):
    x = ar1(phi, n, seed)
    assume(np.ptp(x) > 0)
    res = geyer(x)
    assert res.lag % 2 == 0
    assert 0 < res.ess <= n
    rho = autocorrelation(x)
    if res.lag + 1 < n:
        assert rho[res.lag] + rho[res.lag + 1] <= 0


def test_summary_identical_rows():
    chain = fake_chain(np.tile(np.arange(7.0), (50, 1)))
    s = summarize(chain)
    for arr in (s.mean, s.median, s.q025, s.q975):
        np.testing.assert_allclose(arr, np.arange(7.0))


def test_summary_normal_quantiles():
    draws = np.random.default_rng(1).standard_normal((100_000, 7))
    s = summarize(fake_chain(draws), burn_in=0.0)
    np.testing.assert_allclose(s.q025, -1.96, atol=0.05)
    np.testing.assert_allclose(s.q975, 1.96, atol=0.05)


def test_summary_type7_quantiles():
    draws = np.tile(np.array([[1.0], [2.0], [3.0], [4.0]]), (1, 7))
    s = summarize(fake_chain(draws), burn_in=0.0)
    # type 7: position (n - 1) p
    assert s.q025[0] == pytest.approx(1.075)
    assert s.median[0] == pytest.approx(2.5)


def test_summary_burn_in_and_empty():
    draws = np.vstack([np.full((20, 7), 100.0), np.zeros((80, 7))])
    assert np.all(summarize(fake_chain(draws)).mean == 0.0)
    with pytest.raises(EmptyChain):
        summarize(fake_chain(np.zeros((0, 7))))


@given(ps=st.lists(st.floats(0, 1), min_size=2, max_size=10))
@settings(max_examples=30, deadline=None)
def test_summary_quantiles_monotone(ps):
    draws = np.random.default_rng(2).standard_normal((500, 7))
    s = summarize(fake_chain(draws))
    ps = sorted(ps)
    q = s.quantile(ps)
    assert np.all(np.diff(q, axis=0) >= 0)
    assert np.all(s.q025 <= s.median) and np.all(s.median <= s.q975)


def test_ess_report_fields():
    rng = np.random.default_rng(3)
    theta = np.column_stack([ar1(0.5 + 0.05 * j, 2000, j) for j in range(7)])
    z = rng.standard_normal((2000, 4))
    rep = ess_report(fake_chain(theta, z, seconds=4.0))
    assert rep.n_draws == 1600
    assert rep.min_theta == pytest.approx(rep.ess.min())
    assert rep.overall_min == min(rep.min_theta, rep.min_z)
    assert rep.min_ess_per_second == pytest.approx(rep.min_theta / 4.0)
    np.testing.assert_allclose(rep.percent, 100 * rep.ess / 1600)
    assert set(rep.as_dict()["ess"]) == set(PARAM_NAMES)


def test_ess_report_stuck_series():
    theta = np.random.default_rng(0).standard_normal((100, 7))
    theta[:, 3] = 1.0
    rep = ess_report(fake_chain(theta))
    assert rep.constant == ("sigma_x",) and rep.min_theta == 0.0
    with pytest.raises(ConstantSeries):
        ess_report(fake_chain(theta), strict=True)


def test_compare_duplicated_run():
    theta = np.column_stack([ar1(0.3, 1000, j) for j in range(7)])
    chain = fake_chain(theta)
    table = compare([("a", chain, 2.0), ("b", chain, 2.0)])
    assert [r.relative for r in table.rows] == [1.0, 1.0]
    assert "min ESS/sec" in table.to_text().splitlines()[0]


def test_compare_ordering_and_columns():
    fast = fake_chain(np.column_stack([ar1(0.2, 1000, j) for j in range(7)]), n_leapfrog=10)
    slow = fake_chain(np.column_stack([ar1(0.9, 1000, j) for j in range(7)]), n_leapfrog=10,
                      blocks=2)
    table = compare([("fast", fast, 1.0), ("slow", slow, 1.0)])
    assert table.row("fast").relative > 1.0 and table.row("slow").relative == 1.0
    assert table.row("slow").leapfrogs == 20
    assert table.row("fast").seconds_per_iteration == pytest.approx(1e-3)


def test_compare_mismatched_data():
    theta = np.random.default_rng(0).standard_normal((100, 7))
    with pytest.raises(MismatchedRuns):
        compare([("a", fake_chain(theta, dataset_id="x"), 1.0),
                 ("b", fake_chain(theta, dataset_id="y"), 1.0)])
    with pytest.raises(InvalidParameter):
        compare([("a", fake_chain(theta), 1.0)])
