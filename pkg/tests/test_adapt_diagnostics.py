import math
from types import SimpleNamespace

import numpy as np
import pytest

from walnuts.adapt import (
    AdaptConfig,
    adapt_delta,
    adapt_macro_step,
    make_probes,
    no_halving_fraction,
    record_inflation,
    warmup,
    window_schedule,
)
from walnuts.diagnostics import (
    autocorrelation,
    binned_trend,
    ess,
    index_displacement_hist,
    matched_nuts_step,
    relative_displacement,
    stats_rows,
    summarize,
)
from walnuts.phase import MassMatrix
from walnuts.sampler import ChainStreams, WalnutsConfig, make_kernel, run_chain
from walnuts.targets import GaussianTarget


# ---------------------------------------------------------------- adapt


def test_record_inflation():
    buf = []
    assert record_inflation(SimpleNamespace(envelope=0.6), 0.3, buf) == pytest.approx(2.0)
    assert record_inflation(SimpleNamespace(envelope=0.0), 0.3, buf) == 0.0
    assert buf == [pytest.approx(2.0), 0.0]
    with pytest.raises(ValueError):
        record_inflation(SimpleNamespace(envelope=0.1), 0.0)


def test_adapt_delta_examples():
    assert adapt_delta([2.0] * 50, 0.6, 0.95) == pytest.approx(0.3)
    assert adapt_delta(np.arange(1, 101), 1.0, 0.95) == pytest.approx(1 / 95)
    assert adapt_delta(np.arange(1, 101), 2.0, 0.95) == pytest.approx(2 / 95)
    assert adapt_delta([0.0, 0.0], 0.6, 0.95) == 10.0
    assert adapt_delta([1e-12], 0.6, 0.95) == 10.0
    with pytest.raises(ValueError):
        adapt_delta([], 0.6, 0.95)


def test_adapt_delta_monotone_in_quantile():
    base = np.linspace(0.5, 3.0, 40)
    assert adapt_delta(base * 2, 0.6, 0.95) < adapt_delta(base, 0.6, 0.95)


def test_adapt_config_validation():
    with pytest.raises(ValueError):
        AdaptConfig(energy_budget=0.0)
    with pytest.raises(ValueError):
        AdaptConfig(p_a=1.0)
    with pytest.raises(ValueError):
        AdaptConfig(gamma=0.0)


def test_window_schedule():
    assert window_schedule(1000) == [25, 50, 100, 200, 400, 225]
    assert window_schedule(775) == [25, 50, 100, 200, 400]
    assert window_schedule(10) == [10]
    assert sum(window_schedule(1234)) == 1234


@pytest.fixture(scope="module")
def gauss_probes():
    m = GaussianTarget(1)
    M = MassMatrix.identity(1)
    rng = np.random.default_rng(0)
    return m, M, make_probes(m, M, m.draw(rng, size=400), 400, rng)


def test_step_search_hits_target_on_held_out(gauss_probes):
    m, M, probes = gauss_probes
    res = adapt_macro_step(m, M, 0.3, 0.8, probes[:200])
    assert res.bracketed
    assert res.no_halving >= 0.8
    held_out = no_halving_fraction(m, M, probes[200:], res.h, 0.3)
    assert abs(held_out - 0.8) <= 0.1


def test_step_search_extremes(gauss_probes, caplog):
    m, M, probes = gauss_probes
    near_one = adapt_macro_step(m, M, 0.3, 0.999, probes[:100])
    mid = adapt_macro_step(m, M, 0.3, 0.5, probes[:100])
    assert near_one.h < mid.h
    res = adapt_macro_step(m, M, 1e9, 0.8, probes[:50])
    assert not res.bracketed and res.h == 10.0
    assert "exceeded" in caplog.text


def test_step_search_scales_with_target():
    rng = np.random.default_rng(2)
    base = GaussianTarget(2)
    wide = GaussianTarget(2, scales=[3.0, 3.0])
    M = MassMatrix.identity(2)
    Mw = MassMatrix.diagonal([1 / 9, 1 / 9])
    thetas = base.draw(rng, size=200)
    p1 = make_probes(base, M, thetas, 200, np.random.default_rng(5))
    p2 = make_probes(wide, Mw, 3 * thetas, 200, np.random.default_rng(5))
    h1 = adapt_macro_step(base, M, 0.3, 0.8, p1).h
    h2 = adapt_macro_step(wide, Mw, 0.3, 0.8, p2).h
    # with M matched to the scale, time units are unchanged
    assert h2 == pytest.approx(h1, rel=1e-6)


def test_warmup_zero_and_determinism():
    m = GaussianTarget(5)
    M = MassMatrix.identity(5)
    cfg = WalnutsConfig(h=0.5)
    theta0 = np.zeros(5)
    same, theta, trace = warmup(m, M, cfg, AdaptConfig(warmup_iters=0), theta0, ChainStreams(0))
    assert same is cfg and trace.transitions == 0
    a = warmup(m, M, cfg, AdaptConfig(warmup_iters=100, probe_budget=50), theta0, ChainStreams(1))
    b = warmup(m, M, cfg, AdaptConfig(warmup_iters=100, probe_budget=50), theta0, ChainStreams(1))
    assert a[0] == b[0]
    assert np.array_equal(a[1], b[1])
    assert a[2].transitions == 100 and len(a[2].deltas) == 2


# ---------------------------------------------------------------- ESS


def test_ess_iid_near_n():
    x = np.random.default_rng(0).normal(size=20000)
    assert ess(x) == pytest.approx(20000, rel=0.1)


def test_ess_ar1():
    rng = np.random.default_rng(1)
    phi = 0.9
    x = np.empty(50000)
    x[0] = rng.normal()
    for t in range(1, x.size):
        x[t] = phi * x[t - 1] + rng.normal()
    expected = x.size * (1 - phi) / (1 + phi)
    assert ess(x) == pytest.approx(expected, rel=0.15)


def test_ess_clipped():
    assert ess(np.ones(100), return_flag=True) == (1.0, True)
    alternating = np.tile([1.0, -1.0], 50)
    assert 1.0 <= ess(alternating) <= 100
    with pytest.raises(ValueError):
        ess(np.ones(5))
    with pytest.raises(ValueError):
        ess(np.array([1.0] * 9 + [np.nan]))


def test_autocorrelation_lag0():
    rho = autocorrelation(np.random.default_rng(0).normal(size=100))
    assert rho[0] == pytest.approx(1.0)


# ---------------------------------------------------------------- other diagnostics


def _stats(m, i, grads=10, h=0.5):
    return SimpleNamespace(m=m, i=i, grads=grads, h=h)


def test_displacement_hist():
    stats = [_stats(3, 7), _stats(3, -7), _stats(2, 0), _stats(0, 0)]
    np.testing.assert_allclose(relative_displacement(stats), [1.0, 1.0, 0.0, 0.0])
    counts, edges = index_displacement_hist(stats, bins=4)
    assert counts.tolist() == [2, 0, 0, 2]
    assert edges[0] == 0.0 and edges[-1] == 1.0


def test_matched_nuts_step():
    # (2^3 - 1) * 0.5 / 35 = 0.1
    assert matched_nuts_step([_stats(3, 0, grads=35)]) == pytest.approx(0.1)


def test_binned_trend_spearman():
    x = np.arange(100.0)
    t = binned_trend(x, -2 * x + 1, bins=5)
    assert t.spearman == pytest.approx(-1.0)
    assert t.counts.sum() == 100 and len(t.centers) == 5
    assert np.all(np.diff(t.means) < 0)
    assert math.isnan(binned_trend([1.0], [2.0]).spearman)
    with pytest.raises(ValueError):
        binned_trend([1, 2], [1])


def test_summarize_and_rows():
    m = GaussianTarget(2)
    M = MassMatrix.identity(2)
    k = make_kernel("walnuts_d", m, M, 0.7)
    chains = [run_chain(k, np.zeros(2), 200, ChainStreams(0, c)) for c in range(2)]
    stats = [st for _, s in chains for st in s]
    out = summarize([d for d, _ in chains], stats, m.param_names)
    assert out["draws"] == 400
    assert out["total_gradients"] == sum(st.grads for st in stats)
    assert set(out["parameters"]) == set(m.param_names)
    assert 1 <= out["ess_sq_norm"] <= 400
    assert sum(out["terminations"].values()) == 400
    rows = stats_rows(stats[:3], include_coord=True, start=10)
    assert rows[0]["iter"] == 10 and "min_omega" in rows[0]
