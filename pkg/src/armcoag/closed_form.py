"""Exact concentration formulas for the two arm-limited coagulation models.

Both models start from unit-size particles whose arm counts follow a
discrete law. Concentrations c_t(a, m) (a arms, size m) admit closed
forms built from convolution powers of that law:

  oriented model   particle grabs another with one of its arms; the
                   merged particle keeps a + a' - 1 arms. Needs unit
                   total mass. Two regimes: balanced (mass == mean) and
                   unbalanced, selected by the conserved difference
                   D = mass - mean.
  symmetric model  a pair of arms, one per particle, is consumed; the
                   merged particle keeps a + a' - 2 arms. Needs unit
                   mean. Valid strictly before the blow-up time of the
                   second arm moment.

All factorial/binomial prefactors are assembled in log space (they
overflow doubles around m = 86 otherwise) and multiplied by the measure
entry kept in linear space, so tiny-but-nonzero entries survive.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from . import measures
from .errors import (
    DomainError,
    NormalizationError,
    SolverFailureError,
    UnsupportedRegimeError,
    ValidationError,
)
from .measures import DiscreteMeasure, MomentSummary

__all__ = [
    "CriticalTime",
    "ModelSpec",
    "critical_time",
    "model_spec",
    "normalize_model",
    "oriented_ct",
    "oriented_limit",
    "oriented_limit_table",
    "oriented_table",
    "oriented_totals",
    "series_moments",
    "size_marginal",
    "smoluchowski_reference",
    "symmetric_arm_moment",
    "symmetric_ct",
    "symmetric_limit",
    "symmetric_limit_table",
    "symmetric_second_factorial",
    "symmetric_table",
    "write_concentration_csv",
    "write_moments_csv",
]

# Below this, the balanced-regime formula is used: the unbalanced one
# degenerates as 0/0 and the continuity of the solution in D bounds the
# substitution error far below our tolerances.
CRITICAL_BAND = 1e-8

_NORM_TOL = 1e-9


@dataclass(frozen=True)
class ModelSpec:
    """A model kind plus its (normalized) initial arm law.

    case_tag is 'critical' or 'generic' for the oriented model (balanced
    vs unbalanced initial mass/mean), 'symmetric' otherwise. Build
    instances through model_spec() so the normalization is checked.
    """

    kind: str
    initial_measure: DiscreteMeasure
    case_tag: str


@dataclass(frozen=True)
class CriticalTime:
    """Blow-up time of the symmetric model's second arm moment.

    value is math.inf when the shifted arm law has mean <= 1 (no blow-up),
    else 1 / (mean - 1).
    """

    value: float

    @property
    def finite(self) -> bool:
        return math.isfinite(self.value)


def model_spec(kind: str, initial_measure: DiscreteMeasure) -> ModelSpec:
    """Validate normalization and tag the dispatch case.

    oriented:  total mass must be 1 within 1e-9 (time unit = grab rate
               per arm per unit concentration).
    symmetric: mean arm count must be 1 within 1e-9.
    """
    if kind not in ("oriented", "symmetric"):
        raise ValidationError(f"kind must be 'oriented' or 'symmetric', got {kind!r}")
    mom = measures.moments(initial_measure)
    if kind == "oriented":
        if abs(mom.mass - 1.0) > _NORM_TOL:
            raise NormalizationError(
                f"oriented model needs unit total mass, got {mom.mass!r}; "
                "use normalize_model to rescale and dilate time"
            )
        tag = "critical" if abs(mom.diff) < CRITICAL_BAND else "generic"
    else:
        if abs(mom.mean - 1.0) > _NORM_TOL:
            raise NormalizationError(
                f"symmetric model needs unit mean arm count, got {mom.mean!r}; "
                "use normalize_model to rescale and dilate time"
            )
        tag = "symmetric"
    return ModelSpec(kind=kind, initial_measure=initial_measure, case_tag=tag)


def normalize_model(kind: str, mu: DiscreteMeasure) -> tuple[ModelSpec, float]:
    """Rescale an arbitrary measure to the canonical normalization.

    Returns (spec, scale) where spec holds mu / scale and scale is the
    original total mass (oriented) or mean (symmetric). Solutions map back
    by the quadratic scaling of the dynamics:

        c_original(t) = scale * c_normalized(scale * t)

    so callers evaluate the normalized model at time scale * t and
    multiply concentrations by scale.
    """
    mom = measures.moments(mu)
    scale = mom.mass if kind == "oriented" else mom.mean
    if scale <= 0.0:
        raise NormalizationError(
            f"cannot normalize: required moment is {scale!r} for kind {kind!r}"
        )
    scaled = measures.make_measure(mu.weights / scale, tail_mass=mu.tail_mass / scale)
    return model_spec(kind, scaled), float(scale)


# ---------------------------------------------------------------------------
# measure-power plumbing


def _single_atom(mu: DiscreteMeasure):
    """(index, weight) if mu is a single point mass, else None."""
    nz = np.nonzero(mu.weights)[0]
    if nz.size == 1:
        return int(nz[0]), float(mu.weights[nz[0]])
    return None


def _power_window(mu: DiscreteMeasure, m: int, lo: int, hi: int) -> np.ndarray:
    """Entries lo..hi (inclusive) of the m-fold convolution power.

    Out-of-support indices come back as zeros. Point masses short-circuit:
    the m-th power of w*delta_k is w**m at index k*m, so no arrays are
    built (this keeps the huge single-atom tables cheap).
    """
    if hi < lo:
        return np.zeros(0)
    out = np.zeros(hi - lo + 1)
    atom = _single_atom(mu)
    if atom is not None:
        k, w = atom
        idx = k * m
        if lo <= idx <= hi:
            out[idx - lo] = w**m
        return out
    pw = measures.convolution_power(mu, m).weights
    src_lo = max(lo, 0)
    src_hi = min(hi, len(pw) - 1)
    if src_hi >= src_lo:
        out[src_lo - lo : src_hi - lo + 1] = pw[src_lo : src_hi + 1]
    return out


def _power_entry(mu: DiscreteMeasure, m: int, j: int) -> float:
    if j < 0:
        return 0.0
    return float(_power_window(mu, m, j, j)[0])


# ---------------------------------------------------------------------------
# oriented model


def _require_kind(spec: ModelSpec, kind: str, what: str) -> None:
    if spec.kind != kind:
        raise ValidationError(f"{what} needs a {kind} model, got {spec.kind!r}")


def oriented_totals(spec: ModelSpec, t: float) -> tuple[float, float]:
    """Total concentration and mean arm count at time t >= 0.

    The difference D = mass - mean is conserved. Balanced case decays as
    1/(1+t); otherwise exponential relaxation toward max(D, 0). Evaluated
    with expm1 so both signs of D stay accurate at large t.
    """
    _require_kind(spec, "oriented", "oriented_totals")
    if t < 0.0:
        raise DomainError(f"time must be >= 0, got {t!r}")
    mom = measures.moments(spec.initial_measure)
    if spec.case_tag == "critical":
        c = 1.0 / (1.0 + t)
        return c, c
    d = mom.diff
    if d > 0.0:
        # C = D e^{Dt} / (e^{Dt} - 1 + D), divided through by e^{Dt}.
        c = d / (-math.expm1(-d * t) + d * math.exp(-d * t))
    else:
        c = d * math.exp(d * t) / (math.expm1(d * t) + d)
    return c, c - d


def _log_binom_weight(a, m):
    """log of binom(a+m-1, a) / m, vectorized over a."""
    return gammaln(a + m) - gammaln(a + 1.0) - gammaln(m + 1.0)


def _critical_column(mu: DiscreteMeasure, t: float, m: int, a_hi: int) -> np.ndarray:
    """Balanced-case concentrations c_t(a, m) for a = 0..a_hi at one size m."""
    a = np.arange(a_hi + 1, dtype=np.float64)
    entries = _power_window(mu, m, m - 1, a_hi + m - 1)
    if t == 0.0:
        col = np.zeros(a_hi + 1)
        if m == 1:
            col[:] = entries
        return col
    logf = _log_binom_weight(a, m) + (m - 1) * math.log(t) - (a + m) * math.log1p(t)
    return np.exp(logf) * entries


def _generic_column(
    mu: DiscreteMeasure, d: float, t: float, m: int, a_hi: int
) -> np.ndarray:
    """Unbalanced-case concentrations for a = 0..a_hi at one size m.

    The textbook form multiplies powers of e^{Dt}; all of them are folded
    into bounded factors first so neither sign of D overflows:

      D > 0:  E = 1 - e^{-Dt},  F = E + D e^{-Dt}
              c = exp(-D t a) D^{a+1} E^{m-1} F^{-(a+m)} * binom / m * entry
      D < 0:  with B = -D, E' = 1 - e^{Dt} (both in (0,1)):
              c = exp(D t) B^{a+1} E'^{m-1} (E'+B)^{-(a+m)} * binom / m * entry
    and the sign factors cancel exactly.
    """
    a = np.arange(a_hi + 1, dtype=np.float64)
    entries = _power_window(mu, m, m - 1, a_hi + m - 1)
    if t == 0.0:
        col = np.zeros(a_hi + 1)
        if m == 1:
            col[:] = entries
        return col
    lb = _log_binom_weight(a, m)
    if d > 0.0:
        e = -math.expm1(-d * t)
        f = e + d * math.exp(-d * t)
        logf = (
            lb
            - d * t * a
            + (a + 1.0) * math.log(d)
            + (m - 1) * math.log(e)
            - (a + m) * math.log(f)
        )
    else:
        b = -d
        e = -math.expm1(d * t)
        logf = (
            lb
            + d * t
            + (a + 1.0) * math.log(b)
            + (m - 1) * math.log(e)
            - (a + m) * math.log(e + b)
        )
    return np.exp(logf) * entries


def _oriented_column(spec: ModelSpec, t: float, m: int, a_hi: int) -> np.ndarray:
    if spec.case_tag == "critical":
        return _critical_column(spec.initial_measure, t, m, a_hi)
    d = measures.moments(spec.initial_measure).diff
    return _generic_column(spec.initial_measure, d, t, m, a_hi)


def oriented_ct(spec: ModelSpec, t: float, a: int, m: int) -> float:
    """Concentration of (a arms, size m) particles at time t.

    Dispatches on the balanced/unbalanced case recorded in the spec; at
    t = 0 returns the initial condition exactly.
    """
    _require_kind(spec, "oriented", "oriented_ct")
    if t < 0.0:
        raise DomainError(f"time must be >= 0, got {t!r}")
    if a < 0 or m < 1:
        raise ValidationError(f"need a >= 0 and m >= 1, got a={a!r}, m={m!r}")
    if t == 0.0:
        return float(spec.initial_measure.weights[a]) if (m == 1 and a <= spec.initial_measure.support_bound) else 0.0
    return float(_oriented_column(spec, t, m, a)[a])


def oriented_table(spec: ModelSpec, t: float, a_max: int, m_max: int) -> np.ndarray:
    """Dense table of oriented concentrations, shape (a_max+1, m_max).

    Column j holds size m = j + 1 (sizes start at 1).
    """
    _require_kind(spec, "oriented", "oriented_table")
    if a_max < 0 or m_max < 1:
        raise ValidationError(f"need a_max >= 0 and m_max >= 1, got {a_max!r}, {m_max!r}")
    out = np.empty((a_max + 1, m_max))
    for m in range(1, m_max + 1):
        out[:, m - 1] = _oriented_column(spec, t, m, a_max)
    return out


def oriented_limit(spec: ModelSpec, a: int, m: int) -> float:
    """Long-time concentration for the arm-starved oriented model.

    Only particles with no arms survive: the limit is D/m times the
    (m-1) entry of the m-fold power of the arm law, at a = 0. Requires
    D = mass - mean > 0; no limit formula is known otherwise and we do
    not extrapolate one.
    """
    _require_kind(spec, "oriented", "oriented_limit")
    d = measures.moments(spec.initial_measure).diff
    if d <= CRITICAL_BAND:
        raise UnsupportedRegimeError(
            f"long-time limit needs mass - mean > 0, got {d!r}"
        )
    if a != 0:
        return 0.0
    if m < 1:
        raise ValidationError(f"size must be >= 1, got {m!r}")
    return d / m * _power_entry(spec.initial_measure, m, m - 1)


def oriented_limit_table(spec: ModelSpec, a_max: int, m_max: int) -> np.ndarray:
    out = np.zeros((a_max + 1, m_max))
    for m in range(1, m_max + 1):
        out[0, m - 1] = oriented_limit(spec, 0, m)
    return out


# ---------------------------------------------------------------------------
# symmetric model


def critical_time(spec: ModelSpec) -> CriticalTime:
    """Blow-up time of the second arm moment: 1/(M-1) when M > 1, else inf.

    M is the mean of the size-biased shifted law, i.e. sum a(a-1) mu(a).
    """
    _require_kind(spec, "symmetric", "critical_time")
    m2 = measures.moments(spec.initial_measure).second_factorial
    if not math.isfinite(m2):
        raise ValidationError("second factorial moment must be finite")
    if m2 <= 1.0:
        return CriticalTime(math.inf)
    return CriticalTime(1.0 / (m2 - 1.0))


def _check_symmetric_time(spec: ModelSpec, t: float) -> float:
    if t < 0.0:
        raise DomainError(f"time must be >= 0, got {t!r}")
    tcrit = critical_time(spec).value
    if t >= tcrit:
        raise DomainError(
            f"time {t!r} is not before the blow-up time {tcrit!r}; "
            "the solution formulas stop being valid there"
        )
    return tcrit


def symmetric_arm_moment(spec: ModelSpec, t: float) -> float:
    """Mean arm count 1/(1+t), valid strictly before the blow-up time."""
    _require_kind(spec, "symmetric", "symmetric_arm_moment")
    _check_symmetric_time(spec, t)
    return 1.0 / (1.0 + t)


def symmetric_second_factorial(spec: ModelSpec, t: float) -> float:
    """Second factorial arm moment M / ((1+t)(1+t(1-M))) before blow-up.

    This is the aggregate-identity route; series_moments sums the
    concentration table instead, and the two must agree.
    """
    _require_kind(spec, "symmetric", "symmetric_second_factorial")
    _check_symmetric_time(spec, t)
    m2 = measures.moments(spec.initial_measure).second_factorial
    return m2 / ((1.0 + t) * (1.0 + t * (1.0 - m2)))


def _symmetric_positive_column(
    nu: DiscreteMeasure, t: float, m: int, a_hi: int
) -> np.ndarray:
    """Concentrations for a = 1..a_hi (index 0 of the result is a = 1)."""
    if a_hi < 1:
        return np.zeros(0)
    a = np.arange(1, a_hi + 1, dtype=np.float64)
    entries = _power_window(nu, m, m - 1, a_hi + m - 2)
    if t == 0.0:
        col = np.zeros(a_hi)
        if m == 1:
            col[:] = entries / a  # nu(a-1)/a = mu(a)
        return col
    # (a+m-2)! / (a! m!)
    logf = (
        gammaln(a + m - 1.0)
        - gammaln(a + 1.0)
        - gammaln(m + 1.0)
        + (m - 1) * math.log(t)
        - (a + m - 1.0) * math.log1p(t)
    )
    return np.exp(logf) * entries


def _symmetric_zero_arm(spec: ModelSpec, nu: DiscreteMeasure, t: float, m: int) -> float:
    """c_t(0, m): constant mu(0) for m = 1, else the armless-debris formula.

    The formula also covers shifted laws with no mass at 0: the m-fold
    power then has no mass below m, so it correctly returns 0.
    """
    if m == 1:
        w = spec.initial_measure.weights
        return float(w[0]) if len(w) > 0 else 0.0
    if t == 0.0:
        return 0.0
    entry = _power_entry(nu, m, m - 2)
    if entry == 0.0:
        return 0.0
    logf = (1.0 - m) * math.log1p(1.0 / t) - math.log(m) - math.log(m - 1.0)
    return math.exp(logf) * entry


def symmetric_ct(spec: ModelSpec, t: float, a: int, m: int) -> float:
    """Concentration of (a arms, size m) particles at time t < blow-up."""
    _require_kind(spec, "symmetric", "symmetric_ct")
    _check_symmetric_time(spec, t)
    if a < 0 or m < 1:
        raise ValidationError(f"need a >= 0 and m >= 1, got a={a!r}, m={m!r}")
    nu = measures.arm_shift(spec.initial_measure)
    if a == 0:
        return _symmetric_zero_arm(spec, nu, t, m)
    return float(_symmetric_positive_column(nu, t, m, a)[a - 1])


def symmetric_table(spec: ModelSpec, t: float, a_max: int, m_max: int) -> np.ndarray:
    """Dense symmetric table, shape (a_max+1, m_max); column j is size j+1."""
    _require_kind(spec, "symmetric", "symmetric_table")
    _check_symmetric_time(spec, t)
    if a_max < 0 or m_max < 1:
        raise ValidationError(f"need a_max >= 0 and m_max >= 1, got {a_max!r}, {m_max!r}")
    nu = measures.arm_shift(spec.initial_measure)
    out = np.zeros((a_max + 1, m_max))
    for m in range(1, m_max + 1):
        out[0, m - 1] = _symmetric_zero_arm(spec, nu, t, m)
        if a_max >= 1:
            out[1:, m - 1] = _symmetric_positive_column(nu, t, m, a_max)
    return out


def symmetric_limit(spec: ModelSpec, a: int, m: int) -> float:
    """Long-time symmetric concentrations (no blow-up regime only).

    Everything ends up armless: the limit is 1/(m(m-1)) times the (m-2)
    entry of the m-fold power of the shifted law, at a = 0. Requires
    M <= 1 and some mass at 0 in the shifted law (otherwise the system
    is the trivial single-chain case handled by the finite-t formulas).
    m = 1 is allowed and returns the constant monomer concentration.
    """
    _require_kind(spec, "symmetric", "symmetric_limit")
    mom = measures.moments(spec.initial_measure)
    if mom.second_factorial > 1.0:
        raise UnsupportedRegimeError(
            f"long-time limit needs second factorial moment <= 1, got "
            f"{mom.second_factorial!r} (blow-up occurs)"
        )
    nu = measures.arm_shift(spec.initial_measure)
    if float(nu.weights[0]) == 0.0:
        raise UnsupportedRegimeError(
            "long-time limit needs the shifted arm law to put mass at 0"
        )
    if m < 1:
        raise ValidationError(f"size must be >= 1, got {m!r}")
    if a != 0:
        return 0.0
    if m == 1:
        return float(spec.initial_measure.weights[0])
    return _power_entry(nu, m, m - 2) / (m * (m - 1.0))


def symmetric_limit_table(spec: ModelSpec, a_max: int, m_max: int) -> np.ndarray:
    out = np.zeros((a_max + 1, m_max))
    for m in range(1, m_max + 1):
        out[0, m - 1] = symmetric_limit(spec, 0, m)
    return out


# ---------------------------------------------------------------------------
# marginals, references, series moments


def size_marginal(spec: ModelSpec, t: float, m: int) -> float:
    """Sum of c_t(a, m) over all arm counts a.

    The sum is finite because the m-fold power of the (truncated) arm law
    has finite support; every nonzero term is included.
    """
    if m < 1:
        raise ValidationError(f"size must be >= 1, got {m!r}")
    if spec.kind == "oriented":
        a_hi = spec.initial_measure.support_bound * m - (m - 1)
        if a_hi < 0:
            return 0.0
        return float(_oriented_column(spec, t, m, a_hi).sum())
    _check_symmetric_time(spec, t)
    nu = measures.arm_shift(spec.initial_measure)
    total = _symmetric_zero_arm(spec, nu, t, m)
    a_hi = nu.support_bound * m - (m - 2)
    if a_hi >= 1:
        total += float(_symmetric_positive_column(nu, t, m, a_hi).sum())
    return total


def smoluchowski_reference(kernel: str, t: float, m: int) -> float:
    """Classical single-variable coagulation solutions (monodisperse start).

    constant:       (1 + t/2)^-2 (t / (2+t))^(m-1)
    additive:       exp(-t) * borel(1 - exp(-t), m)
    multiplicative: borel(t, m) / m, defined for 0 <= t < 1 only
    """
    if m < 1 or m != int(m):
        raise ValidationError(f"size must be a positive integer, got {m!r}")
    if t < 0.0:
        raise DomainError(f"time must be >= 0, got {t!r}")
    if kernel == "constant":
        return (1.0 + t / 2.0) ** -2 * (t / (2.0 + t)) ** (m - 1)
    if kernel == "additive":
        return math.exp(-t) * measures.borel(-math.expm1(-t), m)
    if kernel == "multiplicative":
        if t >= 1.0:
            raise DomainError(
                f"multiplicative-kernel solution is pre-gelation only (t < 1), got {t!r}"
            )
        return measures.borel(t, m) / m
    raise ValidationError(
        f"kernel must be constant, additive or multiplicative, got {kernel!r}"
    )


def _atom_series_moments(
    j: int, w: float, t: float, rel_tol: float, chunk: int = 1 << 20
) -> MomentSummary:
    """Symmetric-model moments when the shifted law is w * delta_j, j >= 1.

    Occupied states sit on the line a = (j-1) m + 2, so the sums are one
    dimensional. Terms follow an exact rational ratio recurrence evaluated
    by chunked cumulative products; error stays near roundoff even for
    tens of millions of terms. The asymptotic term ratio

        q = w t j^j / (j-1)^(j-1) / (1+t)^j     (j^j/(j-1)^(j-1) -> 1 at j=1)

    is < 1 strictly before blow-up and bounds the discarded tail by
    last_term * q / (1 - q) times a slowly varying factor; we stop once
    that bound is below rel_tol of each accumulated moment.
    """
    if j < 1:
        raise ValidationError("atom series needs the shifted law at index >= 1")
    if j == 1:
        q = w * t / (1.0 + t)
    else:
        q = w * t * j**j / (j - 1.0) ** (j - 1) / (1.0 + t) ** j
    if q >= 1.0:
        raise DomainError(f"series does not converge here (asymptotic ratio {q:.6g})")
    # m = 1 term: a = j+1, c = w / ((j+1) (1+t)^(j+1))
    c1 = w / ((j + 1) * (1.0 + t) ** (j + 1))
    mass = mean = secfac = 0.0
    m_start = 1
    carry = c1
    guard = 1e5 if t == 0.0 else max(1e5, 64.0 / max(1.0 - q, 1e-12))
    while True:
        if m_start == 1:
            ms = np.arange(1, chunk + 1, dtype=np.float64)
            # ratio(m) multiplies term m to give term m+1
            ratios = np.empty(chunk)
            ratios[0] = 1.0
            mm = ms[:-1]
            num = np.ones(chunk - 1)
            for i in range(1, j + 1):
                num *= j * mm + i
            den = mm + 1.0
            for i in range(1, j):
                den *= (j - 1.0) * mm + 2.0 + i
            ratios[1:] = w * t / (1.0 + t) ** j * num / den
            terms = c1 * np.cumprod(ratios)
        else:
            ms = np.arange(m_start, m_start + chunk, dtype=np.float64)
            ratios = np.empty(chunk)
            mm = np.concatenate(([m_start - 1.0], ms[:-1]))
            num = np.ones(chunk)
            for i in range(1, j + 1):
                num *= j * mm + i
            den = mm + 1.0
            for i in range(1, j):
                den *= (j - 1.0) * mm + 2.0 + i
            ratios = w * t / (1.0 + t) ** j * num / den
            terms = carry * np.cumprod(ratios)
        a_line = (j - 1.0) * ms + 2.0
        mass += float(terms.sum())
        mean += float((a_line * terms).sum())
        sf_terms = a_line * (a_line - 1.0) * terms
        secfac += float(sf_terms.sum())
        carry = float(terms[-1])
        m_start += chunk
        if t == 0.0 or carry == 0.0:
            break
        tail_bound = sf_terms[-1] * q / max(1.0 - q, 1e-300) * 4.0
        if tail_bound <= rel_tol * max(secfac, 1e-300) and m_start > 256:
            break
        if m_start > guard * 1e3:
            raise SolverFailureError(
                f"atom series did not converge after {m_start} terms (ratio {q:.6g})"
            )
    return MomentSummary(mass=mass, mean=mean, second_factorial=secfac, diff=mass - mean)


def series_moments(
    spec: ModelSpec, t: float, rel_tol: float = 1e-8, max_terms: int = 20000
) -> MomentSummary:
    """Moments of the symmetric concentration state by summing the table.

    Independent of the aggregate identities: every value comes from the
    per-(a, m) closed form. Single-atom shifted laws use an exact ratio
    recurrence and can push tens of millions of sizes (needed close to
    blow-up, where the sums converge very slowly); general laws walk the
    convolution-power ladder and are capped at max_terms sizes.
    """
    _require_kind(spec, "symmetric", "series_moments")
    tcrit = _check_symmetric_time(spec, t)
    mu = spec.initial_measure
    nu = measures.arm_shift(mu)
    if t == 0.0:
        mom = measures.moments(mu)
        return mom
    atom = _single_atom(nu)
    zero_mass = float(mu.weights[0]) if len(mu.weights) > 0 else 0.0
    if atom is not None and atom[0] >= 1:
        out = _atom_series_moments(atom[0], atom[1], t, rel_tol)
        # armless debris: only mass contributes (a = 0); with no mass at 0
        # in the shifted law the debris column is empty except monomers.
        return MomentSummary(
            mass=out.mass + zero_mass,
            mean=out.mean,
            second_factorial=out.second_factorial,
            diff=out.mass + zero_mass - out.mean,
        )
    mass = zero_mass
    mean = 0.0
    secfac = 0.0
    # effective per-size decay: below blow-up the column sums shrink
    # geometrically; track a trailing window to decide when to stop.
    window: list[float] = []
    for m in range(1, max_terms + 1):
        a_hi = nu.support_bound * m - (m - 2)
        col_total = _symmetric_zero_arm(spec, nu, t, m) if m >= 2 else 0.0
        contrib_mass = col_total
        contrib_mean = 0.0
        contrib_sf = 0.0
        if a_hi >= 1:
            col = _symmetric_positive_column(nu, t, m, a_hi)
            a = np.arange(1, a_hi + 1, dtype=np.float64)
            contrib_mass += float(col.sum())
            contrib_mean = float((a * col).sum())
            contrib_sf = float((a * (a - 1.0) * col).sum())
        mass += contrib_mass
        mean += contrib_mean
        secfac += contrib_sf
        window.append(max(contrib_sf, contrib_mass, contrib_mean))
        if len(window) > 8:
            window.pop(0)
        scale = max(secfac, mean, mass, 1e-300)
        if m >= 16 and max(window) <= rel_tol * scale / 64.0:
            return MomentSummary(mass, mean, secfac, mass - mean)
    raise SolverFailureError(
        f"series did not converge within {max_terms} sizes at t={t!r} "
        f"(blow-up at {tcrit!r}); use a single-atom law or raise max_terms"
    )


# ---------------------------------------------------------------------------
# CSV export


def write_concentration_csv(path, blocks) -> None:
    """Write (t, table) blocks as CSV rows "t,a,m,c".

    blocks: iterable of (t, ndarray shape (A+1, M)); times must be
    ascending. Rows are ordered t, then m, then a. Floats use 17
    significant digits so values round-trip exactly.
    """
    blocks = list(blocks)
    times = [t for t, _ in blocks]
    if any(t1 >= t2 for t1, t2 in zip(times, times[1:])):
        raise ValidationError("table times must be strictly ascending")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "a", "m", "c"])
        for t, table in blocks:
            a_max = table.shape[0] - 1
            m_max = table.shape[1]
            for m in range(1, m_max + 1):
                for a in range(a_max + 1):
                    writer.writerow(
                        [f"{t:.17g}", a, m, f"{table[a, m - 1]:.17g}"]
                    )


def write_moments_csv(path, rows) -> None:
    """Write (t, C, A, M2) moment curves with header "t,C,A,M2"."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "C", "A", "M2"])
        for t, c, a, m2 in rows:
            writer.writerow([f"{t:.17g}", f"{c:.17g}", f"{a:.17g}", f"{m2:.17g}"])
