"""Closed-form reward-ratio calculus for DPO and the pilot (SGDPO) objective.

Every function accepts Python floats or numpy arrays (broadcast elementwise)
and returns the same kind. Ratios are positive reals at the API boundary but
are moved to log-space immediately, so ``x ** beta`` is always
``exp(beta * log(x))`` and sums of powers go through ``logaddexp``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_BETA = 0.1


def _out(value):
    value = np.asarray(value, dtype=np.float64)
    return float(value) if value.ndim == 0 else value


def _log(x, name: str):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)) or np.any(x <= 0):
        raise ValueError(f"{name} must be finite and strictly positive")
    return np.log(x)


def _check_beta(beta) -> float:
    beta = float(beta)
    if not (beta > 0 and np.isfinite(beta)):
        raise ValueError(f"beta must be a positive finite real, got {beta}")
    return beta


@dataclass(frozen=True)
class RatioPoint:
    """Chosen and rejected policy/reference probability ratios."""

    x1: float
    x2: float

    def __post_init__(self):
        if not (self.x1 > 0 and self.x2 > 0):
            raise ValueError("ratio point coordinates must be positive")


@dataclass(frozen=True)
class PilotPoint:
    """Full-sequence ratios (x1, x2) and pilot sub-sequence ratios (y1, y2)."""

    x1: float
    x2: float
    y1: float
    y2: float

    def __post_init__(self):
        if min(self.x1, self.x2, self.y1, self.y2) <= 0:
            raise ValueError("pilot point coordinates must be positive")

    @property
    def p1(self) -> float:
        return float(np.exp(np.log(self.x1) - np.log(self.y1)))

    @property
    def p2(self) -> float:
        return float(np.exp(np.log(self.x2) - np.log(self.y2)))

    @property
    def z(self) -> float:
        return float(np.exp(np.log(self.y1) - np.log(self.y2)))

    @classmethod
    def from_residuals(cls, y1: float, y2: float, p1: float, p2: float) -> "PilotPoint":
        return cls(x1=p1 * y1, x2=p2 * y2, y1=y1, y2=y2)


# ---------------------------------------------------------------------------
# stable primitives
# ---------------------------------------------------------------------------


def log_sigmoid(x):
    """log(1 / (1 + exp(-x))) without overflow in either tail."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("log_sigmoid requires finite input")
    return _out(np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x))))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return _out(np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)))


def _log_pow_sum(log_a, log_b, beta):
    # log(a**beta + b**beta)
    return np.logaddexp(beta * log_a, beta * log_b)


# ---------------------------------------------------------------------------
# DPO partials
# ---------------------------------------------------------------------------


def _dpo_x1(lx1, lx2, beta):
    return np.exp(np.log(beta) + beta * lx2 - lx1 - _log_pow_sum(lx1, lx2, beta))


def _dpo_x2(lx1, lx2, beta):
    return -np.exp(np.log(beta) + (beta - 1.0) * lx2 - _log_pow_sum(lx1, lx2, beta))


def dpo_partial_x1(x1, x2, beta=DEFAULT_BETA):
    """Derivative of the DPO log-likelihood w.r.t. the chosen ratio X1."""
    beta = _check_beta(beta)
    return _out(_dpo_x1(_log(x1, "x1"), _log(x2, "x2"), beta))


def dpo_partial_x2(x1, x2, beta=DEFAULT_BETA):
    """Derivative of the DPO log-likelihood w.r.t. the rejected ratio X2."""
    beta = _check_beta(beta)
    return _out(_dpo_x2(_log(x1, "x1"), _log(x2, "x2"), beta))


def dpo_grad_ratio(x1, x2):
    """|dl/dX1 / dl/dX2| for DPO, which is X2/X1 independent of beta."""
    return _out(np.exp(_log(x2, "x2") - _log(x1, "x1")))


# ---------------------------------------------------------------------------
# pilot partials
# ---------------------------------------------------------------------------


def pilot_partial_x1(x1, y2, beta=DEFAULT_BETA):
    """Derivative of the pilot objective w.r.t. X1; Y2 takes the place of X2."""
    beta = _check_beta(beta)
    return _out(_dpo_x1(_log(x1, "x1"), _log(y2, "y2"), beta))


def pilot_partial_x2(x2, y1, beta=DEFAULT_BETA):
    """Derivative of the pilot objective w.r.t. X2; Y1 takes the place of X1."""
    beta = _check_beta(beta)
    return _out(_dpo_x2(_log(y1, "y1"), _log(x2, "x2"), beta))


def _log_f_z(lz, lp1, lp2, beta):
    return -beta * lp2 + np.logaddexp(beta * lz, beta * lp2) - np.logaddexp(beta * (lp1 + lz), 0.0)


def f_z(z, p1, p2, beta=DEFAULT_BETA):
    """Factor by which the pilot objective rescales the DPO gradient ratio.

    ``f(z) = p2**-beta * (z**beta + p2**beta) / (p1**beta * z**beta + 1)``;
    increasing in z when p1*p2 < 1, decreasing when p1*p2 > 1.
    """
    beta = _check_beta(beta)
    return _out(np.exp(_log_f_z(_log(z, "z"), _log(p1, "p1"), _log(p2, "p2"), beta)))


def pilot_grad_ratio(x1, x2, y1, y2, beta=DEFAULT_BETA):
    """|dl_pilot/dX1 / dl_pilot/dX2| = (X2/X1) * f(Y1/Y2)."""
    beta = _check_beta(beta)
    lx1, lx2 = _log(x1, "x1"), _log(x2, "x2")
    ly1, ly2 = _log(y1, "y1"), _log(y2, "y2")
    log_ratio = lx2 - lx1 + _log_f_z(ly1 - ly2, lx1 - ly1, lx2 - ly2, beta)
    return _out(np.exp(log_ratio))


# ---------------------------------------------------------------------------
# surrogate objectives (finite-difference targets)
# ---------------------------------------------------------------------------


def l_dpo_surrogate(x1, x2, beta=DEFAULT_BETA):
    """log(X1**beta / (X1**beta + X2**beta))."""
    beta = _check_beta(beta)
    lx1, lx2 = _log(x1, "x1"), _log(x2, "x2")
    return _out(beta * lx1 - _log_pow_sum(lx1, lx2, beta))


def l_pilot_surrogate(x1, x2, y1, y2, beta=DEFAULT_BETA):
    """Pilot objective written in ratios, with Y1, Y2 held as constants."""
    beta = _check_beta(beta)
    lx1, lx2 = _log(x1, "x1"), _log(x2, "x2")
    ly1, ly2 = _log(y1, "y1"), _log(y2, "y2")
    first = beta * lx1 - _log_pow_sum(lx1, ly2, beta)
    second = beta * ly1 - _log_pow_sum(ly1, lx2, beta)
    return _out(first + second)


def central_difference(fn, x, rel_step: float = 1e-6):
    """Central difference of a scalar-or-array function, step 1e-6*max(1,|x|)."""
    x = np.asarray(x, dtype=np.float64)
    h = rel_step * np.maximum(1.0, np.abs(x))
    hi, lo = x + h, x - h
    return (np.asarray(fn(hi)) - np.asarray(fn(lo))) / (hi - lo)
