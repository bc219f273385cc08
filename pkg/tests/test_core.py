import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, strategies as st

from volcal.core import (
    MarketFrame,
    OptionKind,
    OptionQuote,
    SurfaceJet,
    arbitrage_functional,
    balance_weights,
    bound_violation,
    classical_dupire_sigma,
    dupire_residual,
    eta_from_sigma,
    initial_payoff,
    scale_quote,
    unscale_coordinates,
    unscale_volatility,
)
from volcal.errors import DegenerateDensity, EmptyInput, InvalidInput, NegativeInput, OutOfDomain
from volcal.montecarlo import bs_closed_form, bs_scaled_jet

FRAME = MarketFrame(spot=1000.0, rate=0.04, k_max=3000.0, t_max=1.5)


def _k_decimal(strike, maturity, rate=0.04, k_max=3000):
    getcontext().prec = 40
    return float((Decimal(-rate) * Decimal(maturity)).exp() * Decimal(strike) / Decimal(k_max))


class TestMarketFrame:
    def test_rejects_nonpositive(self):
        with pytest.raises(InvalidInput):
            MarketFrame(0.0, 0.04, 3000, 1.5)
        with pytest.raises(InvalidInput):
            MarketFrame(1000, 0.04, 3000, 0.0)

    def test_rejects_negative_rate(self):
        with pytest.raises(InvalidInput):
            MarketFrame(1000, -0.01, 3000, 1.5)

    def test_zero_rate_and_small_k_max_allowed(self):
        MarketFrame(1000, 0.0, 500, 1.0)

    def test_from_quotes_takes_maxima(self):
        qs = [OptionQuote(10.0, 900, 0.5), OptionQuote(5.0, 1200, 0.25), OptionQuote(1.0, 1100, 2.0)]
        fr = MarketFrame.from_quotes(qs, 1000, 0.01)
        assert fr.k_max == 1200 and fr.t_max == 2.0


class TestScaleQuote:
    def test_identity_at_expiry(self):
        sq = scale_quote(OptionQuote(0.0, 3000.0, 0.0), FRAME)
        assert sq.k == 1.0 and sq.t == 0.0

    @pytest.mark.parametrize("strike,maturity,t_expected", [(1500.0, 1.5, 1.0), (500.0, 0.3, 0.2)])
    def test_against_extended_precision(self, strike, maturity, t_expected):
        sq = scale_quote(OptionQuote(1.0, strike, maturity), FRAME)
        assert sq.k == pytest.approx(_k_decimal(strike, maturity), rel=1e-14)
        assert sq.t == pytest.approx(t_expected, rel=1e-14)

    def test_worked_values(self):
        assert scale_quote(OptionQuote(1.0, 1500.0, 1.5), FRAME).k == pytest.approx(0.4708823, abs=5e-8)
        # e^{-0.012} / 6 = 0.16467862
        assert scale_quote(OptionQuote(1.0, 500.0, 0.3), FRAME).k == pytest.approx(0.1646786, abs=5e-8)

    def test_out_of_domain(self):
        with pytest.raises(OutOfDomain):
            scale_quote(OptionQuote(1.0, 3100.0, 0.0), FRAME)
        with pytest.raises(OutOfDomain):
            scale_quote(OptionQuote(1.0, 1000.0, 1.6), FRAME)

    @given(st.floats(1.0, 2999.0), st.floats(1e-3, 1.0), st.floats(0.0, 1.5))
    def test_monotone_in_strike(self, k1, dk, maturity):
        a = scale_quote(OptionQuote(0.0, k1, maturity), FRAME)
        b = scale_quote(OptionQuote(0.0, k1 + dk, maturity), FRAME)
        assert a.k < b.k

    @given(st.floats(1.0, 3000.0), st.floats(0.0, 1.49), st.floats(1e-3, 0.01))
    def test_monotone_in_maturity(self, strike, maturity, dt):
        a = scale_quote(OptionQuote(0.0, strike, maturity), FRAME)
        b = scale_quote(OptionQuote(0.0, strike, maturity + dt), FRAME)
        assert a.t < b.t

    def test_unscale_roundtrip(self):
        k, t = 0.3, 0.7
        strike, maturity = unscale_coordinates(k, t, FRAME)
        sq = scale_quote(OptionQuote(0.0, float(strike), float(maturity)), FRAME)
        assert sq.k == pytest.approx(k, rel=1e-14) and sq.t == pytest.approx(t, rel=1e-14)


class TestVolatilityScaling:
    def test_zero(self):
        assert unscale_volatility(0.0, 1.5) == 0.0

    def test_worked_value(self):
        assert unscale_volatility(0.0675, 1.5) == pytest.approx(0.3, rel=1e-14)
        assert eta_from_sigma(0.3, 1.5) == pytest.approx(0.0675, rel=1e-14)

    def test_roundtrip(self):
        assert abs(unscale_volatility(eta_from_sigma(0.45, 1.5), FRAME) - 0.45) < 1e-15

    def test_negative_eta(self):
        with pytest.raises(NegativeInput):
            unscale_volatility(-1e-3, 1.5)

    @given(st.floats(1e-4, 5.0), st.floats(0.01, 30.0))
    def test_roundtrip_property(self, sigma, t_max):
        back = unscale_volatility(eta_from_sigma(sigma, t_max), t_max)
        assert abs(back - sigma) <= 1e-14 * sigma


class TestPayoff:
    def test_call_far_strike(self):
        assert initial_payoff(1.0, FRAME) == 0.0

    def test_call_zero_strike(self):
        assert initial_payoff(0.0, FRAME) == 1000.0

    def test_put(self):
        put = MarketFrame(1000.0, 0.04, 3000.0, 1.5, OptionKind.PUT)
        assert initial_payoff(0.5, put) == pytest.approx(500.0)


class TestBounds:
    def test_call_above_spot(self):
        assert bound_violation(OptionQuote(1100.0, 900.0, 1.0), FRAME) is not None

    def test_within_tolerance(self):
        assert bound_violation(OptionQuote(1000.0 + 1e-7, 1.0, 1.0), FRAME) is None

    def test_put_above_strike(self):
        put = MarketFrame(1000.0, 0.04, 3000.0, 1.5, OptionKind.PUT)
        assert bound_violation(OptionQuote(901.0, 900.0, 1.0), put) is not None


def _jet(value=0.0, d_t=0.0, d_k=0.0, d_kk=0.0):
    return SurfaceJet(value, d_t, d_k, d_kk)


class TestDupireResidual:
    def test_constant_surface(self):
        assert dupire_residual(_jet(value=5.0), 0.7, 0.4) == 0.0

    def test_time_linear_surface(self):
        assert dupire_residual(_jet(d_t=1.0), 3.3, 0.2) == 1.0

    def test_black_scholes_r0(self):
        frame = MarketFrame(1000.0, 0.0, 3000.0, 1.5)
        rng = np.random.default_rng(11)
        k = rng.uniform(0.05, 0.95, 100)
        t = rng.uniform(0.05, 0.95, 100)
        jet = bs_scaled_jet(k, t, frame, 0.3)
        res = dupire_residual(jet, eta_from_sigma(0.3, frame.t_max), k)
        assert np.max(np.abs(res)) < 1e-6

    def test_black_scholes_with_rate(self):
        # the r K dC/dK term disappears in scaled coordinates
        rng = np.random.default_rng(12)
        k = rng.uniform(0.05, 0.95, 100)
        t = rng.uniform(0.05, 0.95, 100)
        jet = bs_scaled_jet(k, t, FRAME, 0.3)
        assert np.max(np.abs(dupire_residual(jet, eta_from_sigma(0.3, 1.5), k))) < 1e-6

    @given(*(st.floats(-1e3, 1e3) for _ in range(8)), st.floats(0, 2), st.floats(0, 1))
    def test_linear_in_jet(self, a0, a1, a2, a3, b0, b1, b2, b3, eta, k):
        ja, jb = SurfaceJet(a0, a1, a2, a3), SurfaceJet(b0, b1, b2, b3)
        lhs = dupire_residual(ja + jb, eta, k)
        rhs = dupire_residual(ja, eta, k) + dupire_residual(jb, eta, k)
        assert lhs == pytest.approx(rhs, abs=1e-9 * (1 + abs(lhs)))


class TestArbitrageFunctional:
    def test_flat(self):
        assert arbitrage_functional(_jet(), 0.5, FRAME) == 0.0

    def test_negative_slope_clipped(self):
        assert arbitrage_functional(_jet(d_t=0.2, d_k=-1.0), 0.7, FRAME) == pytest.approx(0.2)

    def test_black_scholes_is_feasible(self):
        rng = np.random.default_rng(13)
        k = rng.uniform(0.05, 0.95, 100)
        t = rng.uniform(0.05, 0.95, 100)
        assert np.min(arbitrage_functional(bs_scaled_jet(k, t, FRAME, 0.3), k, FRAME)) >= -1e-9

    @given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10), st.floats(0, 1))
    def test_linear_in_time_derivative(self, a, b, dk_a, k):
        # linear in d_t; the clipped d_k enters only through its positive part
        ja, jb = _jet(d_t=a, d_k=dk_a), _jet(d_t=b)
        lhs = arbitrage_functional(ja + jb, k, FRAME)
        rhs = arbitrage_functional(ja, k, FRAME) + arbitrage_functional(jb, k, FRAME)
        assert lhs == pytest.approx(rhs, abs=1e-12)


class TestBalanceWeights:
    def test_equal_values(self):
        np.testing.assert_allclose(balance_weights([3, 3, 3]), [2, 2, 2], rtol=0, atol=1e-15)

    def test_zero_value_worked_example(self):
        w = balance_weights([0.0, 1.0])
        np.testing.assert_allclose(w, [1 + 20 / 10.5, 1 + 1 / 10.5], rtol=1e-14)
        np.testing.assert_allclose(w, [2.90476, 1.09524], atol=5e-6)

    def test_all_zero(self):
        np.testing.assert_array_equal(balance_weights([0.0, 0.0, 0.0]), [2.0, 2.0, 2.0])

    def test_single_value(self):
        assert balance_weights([7.0])[0] == 2.0

    def test_empty(self):
        with pytest.raises(EmptyInput):
            balance_weights([])

    values = st.lists(st.one_of(st.just(0.0), st.floats(-1e6, 1e6, allow_subnormal=False)),
                      min_size=1, max_size=60)

    @given(values)
    def test_mean_two_and_range(self, v):
        w = balance_weights(v)
        assert abs(w.mean() - 2.0) < 1e-12
        assert np.all(w >= 1.01 - 1e-12) and np.all(w <= 101 + 1e-9)

    @given(values, st.randoms(use_true_random=False))
    def test_permutation_equivariant(self, v, rnd):
        perm = list(range(len(v)))
        rnd.shuffle(perm)
        np.testing.assert_allclose(balance_weights(np.array(v)[perm]), balance_weights(v)[perm], rtol=1e-13)

    @given(values, st.floats(1e-3, 1e3), st.booleans())
    def test_scale_invariant(self, v, c, negate):
        c = -c if negate else c
        np.testing.assert_allclose(balance_weights(np.array(v) * c), balance_weights(v), rtol=1e-9)


class TestClassicalDupire:
    def _original_jet(self, strike, maturity, sigma=0.3, rate=0.04):
        bs = bs_closed_form(1000.0, strike, maturity, rate, sigma)
        return SurfaceJet(bs.price, bs.d_T, bs.d_K, bs.d_KK)

    def test_recovers_constant_vol(self):
        rng = np.random.default_rng(5)
        for strike, maturity in zip(rng.uniform(600, 1600, 50), rng.uniform(0.2, 1.5, 50)):
            sigma = classical_dupire_sigma(self._original_jet(strike, maturity), strike, FRAME)
            assert abs(sigma - 0.3) < 1e-8

    def test_zero_numerator(self):
        assert classical_dupire_sigma(_jet(d_kk=1.0), 100.0, MarketFrame(100, 0.0, 200, 1)) == 0.0

    def test_zero_denominator(self):
        with pytest.raises(DegenerateDensity):
            classical_dupire_sigma(_jet(d_t=1.0), 100.0, FRAME)

    def test_matches_scaled_vol(self):
        # sigma from the scaled PDE agrees with the original-coordinate formula
        strike, maturity = 1200.0, 0.9
        sigma = classical_dupire_sigma(self._original_jet(strike, maturity), strike, FRAME)
        assert math.isclose(unscale_volatility(eta_from_sigma(sigma, 1.5), 1.5), 0.3, rel_tol=1e-8)
