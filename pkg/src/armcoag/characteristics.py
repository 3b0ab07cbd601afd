"""Generating-function transport for the coagulation models.

The bivariate transform g_t(x, y) = sum c_t(a, m) x^a y^m of the
balanced oriented model rides along characteristics: it is the initial
transform evaluated at a moved base point u, where u solves the scalar
implicit equation

    (1 + t) u - t g_0(u, y) = x,        u in [0, 1].

The symmetric model's arm-weighted transform obeys the same transport
before its second-moment blow-up, with the size-biased shifted law in
place of the original one. Everything here reduces to that root-find
plus series evaluation, so the numerics are essentially exact; a
finite-difference residual helper is provided to check the transport
identity from the outside.

A separate entry point expands the implicit equation h = y g(p x + q h)
as a double power series two independent ways (explicit coefficient
formula vs fixed-point iteration on truncated polynomials) and insists
they agree; this is the combinatorial backbone of the closed forms and
serves as a self-test of the convolution-power machinery.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve as _convolve2d
from scipy.special import gammaln

from . import measures
from .closed_form import _power_window
from .errors import (
    DomainError,
    NormalizationError,
    SolverFailureError,
    ValidationError,
)
from .measures import DiscreteMeasure

__all__ = [
    "MonomerGF",
    "SeriesTable",
    "eval_gt",
    "eval_kt",
    "lagrange_series",
    "solve_h",
    "transport_residual",
]

_RESIDUAL_TOL = 1e-13
_FORM_AGREEMENT = 1e-10
_SMALL_T = 1e-6


@dataclass(frozen=True)
class MonomerGF:
    """Transform y * sum_a w(a) u^a of a monodisperse initial state."""

    measure: DiscreteMeasure

    def value(self, u: float, y: float) -> float:
        acc = 0.0
        for w in self.measure.weights[::-1]:
            acc = acc * u + w
        return y * acc

    def slope(self, u: float, y: float) -> float:
        """Partial derivative in u."""
        w = self.measure.weights
        acc = 0.0
        for a in range(len(w) - 1, 0, -1):
            acc = acc * u + a * w[a]
        return y * acc


def solve_h(gf: MonomerGF, t: float, x: float, y: float) -> float:
    """Root u in [0, 1] of (1+t) u - t gf(u, y) = x.

    The left side is strictly increasing whenever the transform's slope
    stays below (1+t)/t on [0, 1], which holds for every regime the
    callers expose. Bisection brings the bracket to 1e-10, a handful of
    Newton steps (analytic derivative, clamped to the bracket) polish to
    roundoff, and the final residual must clear 1e-13 or the call fails
    loudly rather than returning a doubtful root.
    """
    if t < 0.0:
        raise DomainError(f"time must be >= 0, got {t!r}")
    if not (0.0 <= x <= 1.0) or not (0.0 <= y <= 1.0):
        raise ValidationError(f"need (x, y) in [0,1]^2, got ({x!r}, {y!r})")

    def f(u: float) -> float:
        return (1.0 + t) * u - t * gf.value(u, y) - x

    lo, hi = 0.0, 1.0
    flo, fhi = f(lo), f(hi)
    if flo > _RESIDUAL_TOL or fhi < -_RESIDUAL_TOL:
        raise SolverFailureError(
            f"no root bracketed in [0,1] at t={t!r}, x={x!r}, y={y!r} "
            f"(f(0)={flo!r}, f(1)={fhi!r})"
        )
    while hi - lo > 1e-10:
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm < 0.0:
            lo = mid
        else:
            hi = mid
    u = 0.5 * (lo + hi)
    for _ in range(5):
        fu = f(u)
        if fu < 0.0:
            lo = max(lo, u)
        elif fu > 0.0:
            hi = min(hi, u)
        slope = (1.0 + t) - t * gf.slope(u, y)
        if slope <= 0.0:
            break
        step = fu / slope
        u_next = u - step
        if not (lo <= u_next <= hi):
            u_next = 0.5 * (lo + hi)
        if u_next == u:
            break
        u = u_next
    # When the root sits exactly on a bracket endpoint, roundoff can give
    # the computed f the wrong sign there (e.g. x = y = 1, where u = 1 and
    # f(1) = t * (1 - mass) up to cancellation). Newton then bounces off
    # the wall forever while the endpoint itself is already the answer, so
    # pick the best of the polished point and the bracket edges.
    residual = abs(f(u))
    for cand in (lo, hi):
        r = abs(f(cand))
        if r < residual:
            u, residual = cand, r
    if residual > _RESIDUAL_TOL:
        raise SolverFailureError(
            f"root residual {residual:.3e} above {_RESIDUAL_TOL:g} "
            f"at t={t!r}, x={x!r}, y={y!r}"
        )
    return u


def _transported(gf: MonomerGF, t: float, x: float, y: float, form: str) -> float:
    """Shared transport evaluation for both models' transforms."""
    if form not in ("auto", "composition", "rational"):
        raise ValidationError(f"unknown form {form!r}")
    if t == 0.0:
        if form == "rational":
            raise DomainError("rational form is undefined at t = 0")
        return gf.value(x, y)
    u = solve_h(gf, t, x, y)
    composition = gf.value(u, y) / (1.0 + t)
    if form == "composition":
        return composition
    rational = u / t - x / (t * (1.0 + t))
    if form == "rational":
        return rational
    # auto: the rational form loses digits to cancellation as t -> 0, so
    # switch to the series route there; elsewhere insist the two agree.
    if t <= _SMALL_T:
        return composition
    if abs(composition - rational) > _FORM_AGREEMENT:
        raise SolverFailureError(
            f"transport forms disagree by {abs(composition - rational):.3e} "
            f"at t={t!r}, x={x!r}, y={y!r}"
        )
    return composition


def eval_gt(mu: DiscreteMeasure, t: float, x: float, y: float, form: str = "auto") -> float:
    """Balanced oriented transform g_t(x, y).

    Needs the balanced normalization (unit mass and unit mean within
    1e-8); the unbalanced case does not reduce to this transport.
    """
    mom = measures.moments(mu)
    if abs(mom.mass - 1.0) > 1e-8 or abs(mom.mean - 1.0) > 1e-8:
        raise NormalizationError(
            f"transport needs unit mass and unit mean, got mass={mom.mass!r}, "
            f"mean={mom.mean!r}"
        )
    return _transported(MonomerGF(mu), t, x, y, form)


def eval_kt(mu: DiscreteMeasure, t: float, x: float, y: float, form: str = "auto") -> float:
    """Symmetric arm-weighted transform sum (a+1) c_t(a+1, m) x^a y^m.

    Defined strictly before the second-moment blow-up: the transported
    base point stays unique only while 1 + t (1 - M) > 0, where M is the
    mean of the size-biased shifted law.
    """
    mom = measures.moments(mu)
    if abs(mom.mean - 1.0) > 1e-8:
        raise NormalizationError(
            f"symmetric transport needs unit mean, got {mom.mean!r}"
        )
    big_m = mom.second_factorial
    if t < 0.0 or 1.0 + t * (1.0 - big_m) <= 0.0:
        raise DomainError(
            f"time {t!r} is outside the pre-blow-up window of the transform "
            f"(second-moment mean {big_m!r})"
        )
    nu = measures.arm_shift(mu)
    return _transported(MonomerGF(nu), t, x, y, form)


def transport_residual(
    mu: DiscreteMeasure,
    t: float,
    x: float,
    y: float,
    dt: float = 1e-5,
    dx: float = 1e-5,
) -> float:
    """Finite-difference residual of the transport identity for eval_gt.

    Central differences of g in t and x plugged into

        dg/dt - (g - x/(1+t)) dg/dx + g/(1+t)

    should vanish up to discretization error; callers use this as an
    external check that the implicit-equation solution really solves the
    evolution equation, not just its own algebra.
    """
    if t - dt <= 0.0 or not (dx <= x <= 1.0 - dx):
        raise ValidationError("differencing stencil leaves the valid domain")
    g = eval_gt(mu, t, x, y)
    g_t = (eval_gt(mu, t + dt, x, y) - eval_gt(mu, t - dt, x, y)) / (2.0 * dt)
    g_x = (eval_gt(mu, t, x + dx, y) - eval_gt(mu, t, x - dx, y)) / (2.0 * dx)
    return abs(g_t - (g - x / (1.0 + t)) * g_x + g / (1.0 + t))


# ---------------------------------------------------------------------------
# double power series of h = y g(p x + q h)


@dataclass(frozen=True)
class SeriesTable:
    """Coefficients of x^a y^m, a = 0..shape[0]-1, m = 1..shape[1].

    reconciliation records the worst coefficient gap between the two
    computation routes at build time.
    """

    coefficients: np.ndarray
    p: float
    q: float
    reconciliation: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["a", "m", "coefficient"])
            a_rows, m_cols = self.coefficients.shape
            for a in range(a_rows):
                for m in range(1, m_cols + 1):
                    writer.writerow([a, m, f"{self.coefficients[a, m - 1]:.17g}"])


def _validate_series_args(mu, p, q, a_max, m_max):
    if a_max < 0 or m_max < 1:
        raise ValidationError(f"need a_max >= 0, m_max >= 1, got {a_max!r}, {m_max!r}")
    if p < 0.0 or q < 0.0 or p + q > 1.0 + 1e-12:
        raise ValidationError(
            f"need p, q >= 0 with p + q <= 1, got p={p!r}, q={q!r}"
        )
    mass = measures.moments(mu).mass
    if mass > 1.0 + 1e-9:
        raise ValidationError(
            f"series expansion needs total mass <= 1, got {mass!r}"
        )


def _series_by_formula(
    mu: DiscreteMeasure, p: float, q: float, a_max: int, m_max: int
) -> np.ndarray:
    """coef(a, m) = (1/m) binom(m+a-1, a) q^(m-1) p^a  mu^{*m}(m+a-1)."""
    out = np.empty((a_max + 1, m_max))
    a = np.arange(a_max + 1, dtype=np.float64)
    p_pow = np.power(p, a)  # p = 0 gives the correct 0^0 = 1 at a = 0
    for m in range(1, m_max + 1):
        entries = _power_window(mu, m, m - 1, a_max + m - 1)
        binom = np.exp(gammaln(a + m) - gammaln(a + 1.0) - gammaln(m + 1.0))
        out[:, m - 1] = binom * p_pow * q ** (m - 1) * entries
    return out


def _series_by_iteration(
    mu: DiscreteMeasure, p: float, q: float, a_max: int, m_max: int
) -> np.ndarray:
    """Fixed point of h <- y g(p x + q h) on truncated coefficient arrays.

    Every product only raises degrees, so truncation never corrupts the
    retained coefficients; the y-degree <= k block is exact after k
    rounds, hence stabilization is guaranteed within m_max rounds.
    """
    shape = (a_max + 1, m_max + 1)  # y-degree 0..m_max

    def trunc_mul(f: np.ndarray, g: np.ndarray) -> np.ndarray:
        return _convolve2d(f, g, method="direct")[: shape[0], : shape[1]]

    w = mu.weights
    h = np.zeros(shape)
    cap = 10 * m_max
    for _ in range(cap):
        s = q * h
        if a_max >= 1:
            s[1, 0] += p
        comp = np.zeros(shape)
        power = np.zeros(shape)
        power[0, 0] = 1.0
        comp += w[0] * power
        for k in range(1, len(w)):
            power = trunc_mul(power, s)
            if w[k]:
                comp += w[k] * power
        h_new = np.zeros(shape)
        h_new[:, 1:] = comp[:, :m_max]
        if float(np.max(np.abs(h_new - h))) <= 1e-14:
            return h_new[:, 1:]
        h = h_new
    raise SolverFailureError(
        f"series iteration did not stabilize within {cap} rounds"
    )


def lagrange_series(
    mu: DiscreteMeasure, p: float, q: float, a_max: int, m_max: int
) -> SeriesTable:
    """Double power series of the implicit equation h = y g(p x + q h).

    Computed twice (closed coefficient formula and truncated fixed-point
    iteration) and cross-checked to 1e-12 before anything is returned;
    a disagreement means the convolution powers and the combinatorial
    formula no longer describe the same object, which is a bug worth a
    loud failure, never silent preference of one route.
    """
    _validate_series_args(mu, p, q, a_max, m_max)
    formula = _series_by_formula(mu, p, q, a_max, m_max)
    iterated = _series_by_iteration(mu, p, q, a_max, m_max)
    gap = float(np.max(np.abs(formula - iterated)))
    if gap > 1e-12:
        raise SolverFailureError(
            f"series routes disagree by {gap:.3e} (tolerance 1e-12)"
        )
    return SeriesTable(coefficients=formula, p=p, q=q, reconciliation=gap)
