import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize, stats

from sica.datamodel import PreconditionError
from sica.mixbase import (
    DEFAULT_RATIOS,
    LABEL,
    MixtureFit,
    fit_mixture,
    log_odds,
    selection_is_monotone,
    threshold_mixture,
)

N = 50_000


def _known_mixture():
    # 0.9 N(0, 1) + 0.1 (Gamma(3, 1) + 2)
    rng = np.random.default_rng(0)
    active = rng.random(N) < 0.1
    x = np.where(active, rng.gamma(3.0, 1.0, N) + 2.0, rng.standard_normal(N))
    return x, fit_mixture(x)


_KNOWN = _known_mixture()


@pytest.fixture
def known():
    return _KNOWN


def test_known_mixture_recovered(known):
    _, fit = known
    assert fit.weights[0] == pytest.approx(0.9, abs=0.02)
    assert fit.weights[1] == pytest.approx(0.1, abs=0.02)
    assert fit.weights[2] < 0.02
    assert fit.null_std == pytest.approx(1.0, abs=0.05)
    assert sum(fit.weights) == pytest.approx(1.0, abs=1e-9)
    assert fit.label == LABEL


def test_em_monotone(known):
    _, fit = known
    ll = np.array(fit.ll_trace)
    assert np.all(np.diff(ll) >= -1e-9 * np.abs(ll[1:]))
    assert fit.log_likelihood == pytest.approx(ll[-1])


def test_boundary_matches_analytic_crossing(known):
    x, fit = known
    # oracle: posterior odds from the true generating parameters
    odds = lambda v: np.log(0.1 * stats.gamma.pdf(v - 2.0, 3.0)) - np.log(0.9 * stats.norm.pdf(v))
    crossing = optimize.brentq(odds, 2.05, 6.0)
    sel = threshold_mixture(fit, x, 1.0)
    boundary = x[sel & (x > 0)].min()
    assert boundary == pytest.approx(crossing, abs=0.1)


def test_pure_gaussian():
    fit = fit_mixture(np.random.default_rng(1).standard_normal(N))
    assert fit.weights[1] < 0.02 and fit.weights[2] < 0.02


def test_location_equivariance():
    fit = fit_mixture(5.0 + np.random.default_rng(2).standard_normal(N))
    assert fit.null_mean == pytest.approx(5.0, abs=0.05)


def test_infinite_ratio_empty(known):
    x, fit = known
    assert not threshold_mixture(fit, x, np.inf).any()


def _collapsed_fit():
    return MixtureFit(
        weights=(1.0, 0.0, 0.0), null_mean=0.0, null_std=1.0,
        pos_shape=1.0, pos_scale=1.0, pos_shift=0.0,
        neg_shape=1.0, neg_scale=1.0, neg_shift=0.0,
        log_likelihood=0.0, n_em_iterations=1, collapsed=("positive", "negative"),
    )


@pytest.mark.parametrize("ratio", [1.0, 3.0, 50.0])
def test_collapsed_selects_nothing(ratio):
    x = np.linspace(-8, 8, 501)
    assert not threshold_mixture(_collapsed_fit(), x, ratio).any()


def test_one_sided_data_collapses_negative_class():
    rng = np.random.default_rng(4)
    x = np.concatenate([rng.standard_normal(20_000), 3.0 + rng.exponential(1.0, 2_000)])
    x = x[x > -1.0]  # no left tail at all
    fit = fit_mixture(x)
    assert fit.weights[2] < 1e-6
    if fit.weights[2] == 0.0:
        assert "negative" in fit.collapsed


@settings(max_examples=30, deadline=None)
@given(st.floats(0.2, 50.0), st.floats(0.2, 50.0))
def test_selection_monotone_in_ratio(r1, r2):
    x, fit = _KNOWN
    lo, hi = sorted((r1, r2))
    assert not np.any(threshold_mixture(fit, x, hi) & ~threshold_mixture(fit, x, lo))


def test_selection_is_single_tail(known):
    x, fit = known
    assert all(selection_is_monotone(fit, x, r) for r in DEFAULT_RATIOS if r >= 1.0)


def test_non_monotone_selection_detected():
    # narrow negative bump near -3: selected there but not further out
    fit = MixtureFit(
        weights=(0.999, 0.0, 0.001), null_mean=0.0, null_std=1.0,
        pos_shape=1.0, pos_scale=1.0, pos_shift=0.0,
        neg_shape=4.0, neg_scale=0.077, neg_shift=-2.73,
        log_likelihood=0.0, n_em_iterations=1, collapsed=("positive",),
    )
    x = np.linspace(-6.0, 0.0, 601)
    sel = threshold_mixture(fit, x, 0.2)
    assert sel.any() and not sel[0]
    assert not selection_is_monotone(fit, x, 0.2)


def test_log_odds_shape(known):
    x, fit = known
    assert log_odds(fit, x[:10]).shape == (10,)


def test_json_roundtrip(known):
    _, fit = known
    assert MixtureFit.from_json(fit.to_json()) == fit


@pytest.mark.parametrize("bad", [np.ones(500), np.arange(50.0), np.r_[np.arange(200.0), np.nan]])
def test_rejects_degenerate(bad):
    with pytest.raises(PreconditionError):
        fit_mixture(bad)


def test_ratio_must_be_positive(known):
    x, fit = known
    with pytest.raises(PreconditionError):
        threshold_mixture(fit, x, 0.0)

