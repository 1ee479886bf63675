import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import golden_section_min, lambert_w0_bisect, p_critical_bisect
from sebra.controllers import (
    INV_E,
    conserved_value,
    lambda_from_p_critical,
    lambert_w0,
    p_critical_from,
    select,
    upweight,
)
from sebra.errors import DomainError

# Frozen from the bisection oracles in oracles.py.
W0_MINUS_0_1 = -0.111832559158963
P_CRIT_LAM02_BETA1 = 0.771690974017694
LAMBDA_PC075_BETA125 = 0.228539782337444


class TestLambertW0:
    def test_zero(self):
        assert lambert_w0(0.0) == 0.0

    def test_branch_point(self):
        assert lambert_w0(-INV_E) == -1.0

    def test_against_bisection(self):
        assert lambert_w0(-0.1) == pytest.approx(W0_MINUS_0_1, abs=1e-12)
        assert lambert_w0_bisect(-0.1) == pytest.approx(W0_MINUS_0_1, abs=1e-12)

    @pytest.mark.parametrize("x", [0.1, -0.5, -1.0, float("nan")])
    def test_domain(self, x):
        with pytest.raises(DomainError):
            lambert_w0(x)

    @given(st.floats(min_value=-INV_E, max_value=0.0))
    def test_inverts_w_exp_w(self, x):
        w = lambert_w0(x)
        assert -1.0 <= w <= 0.0
        assert w * math.exp(w) == pytest.approx(x, abs=1e-12)

    def test_grid_roundtrip(self):
        xs = np.linspace(-1.0, 0.0, 1000)
        err = max(abs(lambert_w0(x * math.exp(x)) - x) for x in xs)
        assert err < 1e-9


class TestThreshold:
    def test_small_lambda_tends_to_one(self):
        assert p_critical_from(1e-12, 1.0) == pytest.approx(1.0, abs=1e-9)

    def test_value(self):
        assert p_critical_from(0.2, 1.0) == pytest.approx(P_CRIT_LAM02_BETA1, abs=1e-10)
        assert p_critical_bisect(0.2, 1.0) == pytest.approx(P_CRIT_LAM02_BETA1, abs=1e-10)

    def test_branch_point(self):
        for beta in (0.5, 1.25, 3.0):
            assert p_critical_from(beta / math.e, beta) == pytest.approx(math.exp(-beta), rel=1e-7)

    def test_lambda_too_large(self):
        with pytest.raises(DomainError):
            p_critical_from(0.5, 1.0)

    def test_inverse_value(self):
        assert lambda_from_p_critical(0.75, 1.25) == pytest.approx(LAMBDA_PC075_BETA125, abs=1e-12)

    def test_inverse_near_one(self):
        assert lambda_from_p_critical(1 - 1e-12, 1.0) == pytest.approx(0.0, abs=1e-10)

    def test_roundtrip_table_value(self):
        lam = lambda_from_p_critical(0.7, 1.42)
        assert p_critical_from(lam, 1.42) == pytest.approx(0.7, abs=1e-8)

    @pytest.mark.parametrize("p_c", [0.2, 1.0, 1.5])
    def test_inverse_domain(self, p_c):
        with pytest.raises(DomainError):
            lambda_from_p_critical(p_c, 1.0)

    @settings(max_examples=200)
    @given(st.floats(0.1, 5.0), st.floats(0.0, 1.0))
    def test_roundtrip_property(self, beta, frac):
        lo = math.exp(-beta)
        p_c = lo + (1 - lo) * (0.001 + 0.998 * frac)
        assert p_critical_from(lambda_from_p_critical(p_c, beta), beta) == pytest.approx(p_c, abs=1e-8)


class TestUpweight:
    def test_values(self):
        assert upweight(1.0, 0.7) == 1.0
        assert upweight(0.25, 0.5) == pytest.approx(0.0625)
        assert upweight(0.75, 1.25) == pytest.approx(0.7944178807866, abs=1e-12)

    @given(st.floats(1e-6, 1.0), st.floats(1e-6, 1.0), st.floats(0.1, 10.0))
    def test_monotone_into_unit_interval(self, a, b, beta):
        ua, ub = upweight(a, beta), upweight(b, beta)
        assert 0 < ua <= 1 and 0 < ub <= 1
        if a < b:
            assert ua <= ub


class TestConservedValue:
    def test_values(self):
        assert conserved_value(1.0, 0.0, 2.0) == pytest.approx(-2.0)
        assert conserved_value(1.0, 2.0, 1.0) == pytest.approx(1.0)

    def test_argmin_single(self):
        u = golden_section_min(lambda u: float(conserved_value(u, 1.0, 1.0)), 1e-12, 1.0)
        assert u == pytest.approx(0.367879, abs=1e-6)

    def test_argmin_is_upweight_of_p_y(self):
        rng = np.random.default_rng(5)
        for L, beta in zip(rng.uniform(1e-3, 5, 100), rng.uniform(0.5, 2, 100)):
            u = golden_section_min(lambda u: float(conserved_value(u, L, beta)), 1e-12, 1.0)
            assert u == pytest.approx(upweight(math.exp(-L), beta), abs=1e-4)


class TestSelect:
    def test_learned_sample_drops(self):
        assert select(0.9, 1, 0.75) == 0

    def test_unlearned_sample_stays(self):
        assert select(0.5, 1, 0.75) == 1

    @pytest.mark.parametrize("p", [0.0001, 0.5, 0.99])
    def test_dropped_stays_dropped(self, p):
        assert select(p, 0, 0.75) == 0

    def test_vectorised(self):
        out = select(np.array([0.9, 0.8, 0.5, 0.3]), np.array([1, 1, 1, 0]), 0.75)
        assert out.tolist() == [0, 0, 1, 0]

    def test_matches_sign_of_k(self):
        # v = 1 iff k = u*L - lambda >= 0, for p_y above exp(-beta)
        for beta in (0.5, 1.25, 3.0):
            p_c = 0.8
            lam = lambda_from_p_critical(p_c, beta)
            for p in np.linspace(math.exp(-beta), 1.0, 2001)[1:]:
                k = upweight(p, beta) * -math.log(p) - lam
                assert (k < 0) == (select(p, 1, p_c) == 0)
