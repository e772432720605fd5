import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgdpo import core_math as cm

pos = st.floats(min_value=1e-3, max_value=1e3, allow_nan=False)
betas = st.sampled_from([0.05, 0.1, 0.5, 1.0])


def mp_f(z, p1, p2, beta):
    mpmath.mp.dps = 50
    z, p1, p2, beta = map(mpmath.mpf, (z, p1, p2, beta))
    return float(p2 ** -beta * (z**beta + p2**beta) / (p1**beta * z**beta + 1))


def mp_dpo(x1, x2, beta):
    mpmath.mp.dps = 50
    x1, x2, b = map(mpmath.mpf, (x1, x2, beta))
    l = lambda a, c: mpmath.log(a**b / (a**b + c**b))
    return float(mpmath.diff(lambda a: l(a, x2), x1)), float(mpmath.diff(lambda c: l(x1, c), x2))


def test_log_sigmoid_tails():
    assert cm.log_sigmoid(0.0) == pytest.approx(-math.log(2), abs=1e-15)
    assert cm.log_sigmoid(800.0) == 0.0
    assert cm.log_sigmoid(-800.0) == pytest.approx(-800.0)
    assert np.isfinite(cm.log_sigmoid(np.array([-1e300, 1e300]))).all()


def test_log_sigmoid_rejects_nonfinite():
    with pytest.raises(ValueError):
        cm.log_sigmoid(float("nan"))
    with pytest.raises(ValueError):
        cm.log_sigmoid(np.array([0.0, np.inf]))


def test_sigmoid_symmetry():
    x = np.linspace(-50, 50, 101)
    assert np.allclose(cm.sigmoid(x) + cm.sigmoid(-x), 1.0, atol=1e-15)


def test_dpo_partials_at_unit_point():
    assert cm.dpo_partial_x1(1.0, 1.0, 0.1) == pytest.approx(0.05, rel=1e-14)
    assert cm.dpo_partial_x2(1.0, 1.0, 0.1) == pytest.approx(-0.05, rel=1e-14)


@pytest.mark.parametrize("x1,x2,beta", [(0.3, 1.2, 0.1), (2.0, 0.05, 0.5), (1.0, 1.0, 0.05)])
def test_dpo_partials_match_mpmath(x1, x2, beta):
    d1, d2 = mp_dpo(x1, x2, beta)
    assert cm.dpo_partial_x1(x1, x2, beta) == pytest.approx(d1, rel=1e-12)
    assert cm.dpo_partial_x2(x1, x2, beta) == pytest.approx(d2, rel=1e-12)


@given(pos, pos, betas)
def test_dpo_ratio_independent_of_beta(x1, x2, beta):
    r = abs(cm.dpo_partial_x1(x1, x2, beta) / cm.dpo_partial_x2(x1, x2, beta))
    assert r == pytest.approx(x2 / x1, rel=1e-10)
    assert cm.dpo_grad_ratio(x1, x2) == pytest.approx(x2 / x1, rel=1e-14)


@given(pos, pos, pos, betas)
def test_f_z_matches_high_precision(z, p1, p2, beta):
    assert cm.f_z(z, p1, p2, beta) == pytest.approx(mp_f(z, p1, p2, beta), rel=1e-12)


@given(pos, pos, pos, pos, betas)
@settings(max_examples=200)
def test_pilot_ratio_identity(x1, x2, y1, y2, beta):
    direct = abs(cm.pilot_partial_x1(x1, y2, beta) / cm.pilot_partial_x2(x2, y1, beta))
    assert direct == pytest.approx(cm.pilot_grad_ratio(x1, x2, y1, y2, beta), rel=1e-10)
    pt = cm.PilotPoint(x1, x2, y1, y2)
    assert direct == pytest.approx((x2 / x1) * cm.f_z(pt.z, pt.p1, pt.p2, beta), rel=1e-10)


def test_pilot_reduces_to_dpo_when_y_equals_x():
    x1, x2 = np.meshgrid(np.linspace(0.1, 2, 9), np.linspace(0.1, 2, 9))
    assert np.allclose(cm.pilot_partial_x1(x1, x2), cm.dpo_partial_x1(x1, x2), rtol=1e-14)
    assert np.allclose(cm.pilot_partial_x2(x2, x1), cm.dpo_partial_x2(x1, x2), rtol=1e-14)


def test_f_identity_and_z_one():
    z = np.logspace(-2, 2, 50)
    assert np.abs(cm.f_z(z, 1.0, 1.0, 0.1) - 1).max() < 1e-12
    # at z = 1 every f is (1 + p2^b) / (p2^b (p1^b + 1)) which is 1 when p1 p2 = 1
    assert cm.f_z(1.0, 2.0, 0.5, 0.3) == pytest.approx(1.0, abs=1e-12)


@given(st.floats(0.05, 0.95), st.floats(0.05, 5.0), betas)
def test_f_above_one_below_product_one(prod, p1, beta):
    p2 = prod / p1
    for z in (1e-3, 0.5, 1.0, 3.0, 1e3):
        assert cm.f_z(z, p1, p2, beta) > 1


def test_surrogate_partials_match_central_difference():
    x = np.linspace(0.05, 1.5, 30)
    x1, x2 = np.meshgrid(x, x)
    fd = cm.central_difference(lambda v: cm.l_dpo_surrogate(v, x2, 0.5), x1)
    assert np.max(np.abs(fd / cm.dpo_partial_x1(x1, x2, 0.5) - 1)) < 1e-6


def test_pilot_point_residuals_round_trip():
    pt = cm.PilotPoint.from_residuals(0.4, 0.8, 1.5, 0.25)
    assert (pt.p1, pt.p2) == pytest.approx((1.5, 0.25))
    assert pt.z == pytest.approx(0.5)


@pytest.mark.parametrize(
    "call",
    [
        lambda: cm.dpo_partial_x1(0.0, 1.0),
        lambda: cm.dpo_partial_x2(1.0, -1.0),
        lambda: cm.f_z(1.0, 1.0, 1.0, beta=0.0),
        lambda: cm.pilot_partial_x1(1.0, float("inf")),
        lambda: cm.RatioPoint(1.0, 0.0),
    ],
)
def test_domain_errors(call):
    with pytest.raises(ValueError):
        call()


def test_extreme_ratios_stay_finite():
    big, tiny = 1e300, 1e-300
    for v in (cm.dpo_partial_x1(tiny, big), cm.dpo_partial_x2(big, tiny), cm.f_z(big, tiny, big, 0.5)):
        assert np.isfinite(v)
