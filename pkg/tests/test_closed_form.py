"""Exact solution formulas: totals, tables, limits, reference laws."""

import math

import numpy as np
import pytest
from scipy import integrate as sint
from scipy import stats

from armcoag import closed_form, measures
from armcoag.errors import (
    DomainError,
    NormalizationError,
    UnsupportedRegimeError,
    ValidationError,
)

# Total concentration of the unbalanced oriented model with initial law
# 3/4 delta_0 + 1/4 delta_2 (count-minus-arm difference 1/2) at t = 1,
# frozen from the closed expression and confirmed against solve_ivp on
# dC/dt = dA/dt = -AC below.
UNBALANCED_C_AT_1 = 0.717633299196792


def spec_oriented(weights) -> closed_form.ModelSpec:
    return closed_form.model_spec("oriented", measures.make_measure(weights))


def spec_symmetric(weights) -> closed_form.ModelSpec:
    return closed_form.model_spec("symmetric", measures.make_measure(weights))


def test_model_spec_normalization_and_tags():
    assert spec_oriented([0.0, 1.0]).case_tag == "critical"
    assert spec_oriented([0.75, 0.0, 0.25]).case_tag == "generic"
    assert spec_symmetric([0.0, 1.0]).case_tag == "symmetric"
    with pytest.raises(NormalizationError):
        closed_form.model_spec("oriented", measures.dirac(1, mass=2.0))
    with pytest.raises(NormalizationError):
        closed_form.model_spec("symmetric", measures.dirac(2))  # mean 2
    with pytest.raises(ValidationError):
        closed_form.model_spec("sideways", measures.dirac(1))


def test_normalize_model_rescales_and_reports_scale():
    spec, scale = closed_form.normalize_model("oriented", measures.dirac(1, mass=2.0))
    assert scale == 2.0
    assert measures.moments(spec.initial_measure).mass == pytest.approx(1.0, abs=1e-15)
    spec, scale = closed_form.normalize_model("symmetric", measures.dirac(2))
    assert scale == 2.0
    assert measures.moments(spec.initial_measure).mean == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(NormalizationError):
        closed_form.normalize_model("symmetric", measures.dirac(0))  # mean 0


def test_oriented_totals_balanced_case():
    spec = spec_oriented([0.0, 1.0])
    for t in (0.0, 0.5, 1.0, 4.0, 20.0):
        C, A = closed_form.oriented_totals(spec, t)
        assert C == pytest.approx(1.0 / (1.0 + t), rel=1e-15)
        assert A == pytest.approx(1.0 / (1.0 + t), rel=1e-15)


def test_oriented_totals_unbalanced_frozen_and_ivp():
    spec = spec_oriented([0.75, 0.0, 0.25])
    C, A = closed_form.oriented_totals(spec, 1.0)
    assert C == pytest.approx(UNBALANCED_C_AT_1, abs=1e-15)
    assert C - A == pytest.approx(0.5, abs=1e-14)

    # independent route: integrate the pair ODE for the totals directly
    sol = sint.solve_ivp(
        lambda t, y: [-y[0] * y[1], -y[0] * y[1]],
        (0.0, 1.0),
        [1.0, 0.5],
        rtol=1e-12,
        atol=1e-14,
    )
    assert C == pytest.approx(float(sol.y[0, -1]), abs=1e-8)
    assert A == pytest.approx(float(sol.y[1, -1]), abs=1e-8)


def test_oriented_point_values():
    d1 = spec_oriented([0.0, 1.0])
    assert closed_form.oriented_ct(d1, 1.0, 1, 2) == pytest.approx(0.125, rel=1e-14)
    # monodisperse start: columns beyond the support line vanish
    assert closed_form.oriented_ct(d1, 1.0, 0, 2) == 0.0

    pois = closed_form.model_spec("oriented", measures.poisson_arms(1.0, 60))
    assert closed_form.oriented_ct(pois, 1.0, 0, 1) == pytest.approx(
        math.exp(-1.0) / 2.0, rel=1e-14
    )


def test_oriented_table_matches_point_evaluations():
    pois = closed_form.model_spec("oriented", measures.poisson_arms(1.0, 60))
    table = closed_form.oriented_table(pois, 0.8, 12, 10)
    assert table.shape == (13, 10)
    for a, m in ((0, 1), (3, 2), (7, 5), (12, 10)):
        assert table[a, m - 1] == pytest.approx(
            closed_form.oriented_ct(pois, 0.8, a, m), rel=1e-13, abs=1e-300
        )
    # at t = 0 the table is the initial condition: the law in column one
    t0 = closed_form.oriented_table(pois, 0.0, 12, 10)
    assert np.abs(t0[:, 0] - pois.initial_measure.weights[:13]).max() <= 1e-15
    assert np.abs(t0[:, 1:]).max() == 0.0


def test_oriented_unbalanced_table_structure():
    # The unbalanced-case entries factor as (binomial weight) x (m-fold
    # convolution of the law at a+m-1) x (geometric terms in a and m).
    # A negative binomial base makes the convolutions nbinom(m r, p),
    # which scipy evaluates independently; dividing them and the binomial
    # weight out must leave a pure two-variable geometric profile.
    nb = measures.negative_binomial_arms(2, 0.6, bound=80)
    spec = closed_form.model_spec("oriented", measures.make_measure(nb.weights))
    assert spec.case_tag == "generic"
    table = closed_form.oriented_table(spec, 0.5, 8, 6)

    a = np.arange(9, dtype=np.float64)
    a_steps = []
    m_steps = []
    for m in range(1, 7):
        pmf = stats.nbinom(2 * m, 0.6).pmf(np.arange(m - 1, m + 8))
        binom = np.exp(
            [math.lgamma(ai + m) - math.lgamma(ai + 1) - math.lgamma(m + 1) for ai in a]
        )
        profile = table[:, m - 1] / (binom * pmf)
        steps = profile[1:] / profile[:-1]
        assert np.abs(steps / steps[0] - 1.0).max() <= 1e-10
        a_steps.append(float(steps[0]))
        m_steps.append(float(profile[0]))
    # the a-ratio must not depend on m, and the m-profile must itself be
    # geometric; together these pin the closed form up to one constant
    assert np.abs(np.array(a_steps) / a_steps[0] - 1.0).max() <= 1e-10
    m_ratio = np.array(m_steps[1:]) / np.array(m_steps[:-1])
    assert np.abs(m_ratio / m_ratio[0] - 1.0).max() <= 1e-10

    # and the remaining constant: c(0, 1) solves c' = -A c directly, with
    # the arm total A from the pair ODE, nothing shared with the table code
    path = sint.solve_ivp(
        lambda t, y: [-y[0] * y[1], -y[0] * y[1], -y[1] * y[2]],
        (0.0, 0.5),
        [1.0, measures.moments(nb).mean, float(nb.weights[0])],
        rtol=1e-12,
        atol=1e-15,
    )
    assert closed_form.oriented_ct(spec, 0.5, 0, 1) == pytest.approx(
        float(path.y[2, -1]), abs=1e-9
    )


def test_oriented_limit_examples():
    half = spec_oriented([0.5, 0.5])
    for m in (1, 2, 5, 10, 30):
        assert closed_form.oriented_limit(half, 0, m) == pytest.approx(
            2.0 ** -(m + 1), rel=1e-14
        )
        assert closed_form.oriented_limit(half, 2, m) == 0.0
    assert closed_form.oriented_limit(spec_oriented([1.0]), 0, 1) == 1.0

    # balanced laws drain to zero concentration, no limit law to report
    with pytest.raises(UnsupportedRegimeError):
        closed_form.oriented_limit(spec_oriented([0.0, 1.0]), 0, 1)


def test_oriented_limit_mass_sums_to_one():
    for weights in ([0.5, 0.5], [0.75, 0.0, 0.25]):
        spec = spec_oriented(weights)
        total = sum(
            m * closed_form.oriented_limit(spec, 0, m) for m in range(1, 4000)
        )
        assert total == pytest.approx(1.0, abs=1e-8)


def test_critical_time_values():
    third3 = spec_symmetric([0.0, 0.0, 0.0, 1.0 / 3.0])
    ct = closed_form.critical_time(third3)
    assert ct.value == 1.0
    assert ct.finite

    pois = closed_form.model_spec("symmetric", measures.poisson_arms(1.0, 60))
    assert not closed_form.critical_time(pois).finite
    assert closed_form.critical_time(spec_symmetric([0.0, 1.0])).value == math.inf


def test_symmetric_arm_moment_and_blowup_guard():
    third3 = spec_symmetric([0.0, 0.0, 0.0, 1.0 / 3.0])
    for t in (0.0, 0.3, 0.9):
        assert closed_form.symmetric_arm_moment(third3, t) == pytest.approx(
            1.0 / (1.0 + t), rel=1e-14
        )
    with pytest.raises(DomainError):
        closed_form.symmetric_arm_moment(third3, 3.0)
    with pytest.raises(DomainError):
        closed_form.symmetric_ct(third3, 1.0, 3, 1)


def test_symmetric_second_factorial_against_series_route():
    # rational formula vs term-by-term series over the exact table: the two
    # computations share nothing past the initial law
    for weights in ([0.0, 0.5, 0.25], [0.3, 0.4, 0.2, 1.0 / 15.0]):
        spec = spec_symmetric(weights)
        for t in (0.5, 2.0):
            direct = closed_form.symmetric_second_factorial(spec, t)
            series = closed_form.series_moments(spec, t)
            assert direct == pytest.approx(series.second_factorial, abs=1e-8)
            assert series.mean == pytest.approx(1.0 / (1.0 + t), abs=1e-10)


def test_symmetric_point_values():
    d1 = spec_symmetric([0.0, 1.0])
    t = 0.7
    assert closed_form.symmetric_ct(d1, t, 0, 2) == pytest.approx(
        t / (2.0 * (1.0 + t)), rel=1e-14
    )
    assert closed_form.symmetric_ct(d1, t, 1, 1) == pytest.approx(
        1.0 / (1.0 + t), rel=1e-14
    )

    # two-arm chains: c(2, m) = t^(m-1) (1+t)^(-(m+1)) / 2, by induction on
    # the gain integral (verified by hand for m = 1, 2, 3)
    half2 = spec_symmetric([0.0, 0.0, 0.5])
    for m in range(1, 7):
        assert closed_form.symmetric_ct(half2, t, 2, m) == pytest.approx(
            0.5 * t ** (m - 1) * (1.0 + t) ** -(m + 1), rel=1e-13
        )

    # three-arm chains live on a = m + 2 with Catalan-like coefficients
    third3 = spec_symmetric([0.0, 0.0, 0.0, 1.0 / 3.0])
    for m in (1, 2, 5):
        coef = math.comb(2 * m, m) / ((m + 1) * (m + 2))
        assert closed_form.symmetric_ct(third3, t, m + 2, m) == pytest.approx(
            coef * t ** (m - 1) * (1.0 + t) ** -(2 * m + 1), rel=1e-12
        )
    assert closed_form.symmetric_ct(third3, t, 2, 1) == 0.0


def test_symmetric_zero_arm_matches_time_integral():
    # armless debris of a given size accumulates as a time integral of
    # single-arm pair products; scipy.quad reproduces the closed entry
    pois = closed_form.model_spec("symmetric", measures.poisson_arms(1.0, 60))

    def integrand(s):
        return closed_form.symmetric_ct(pois, s, 1, 1) * closed_form.symmetric_ct(
            pois, s, 1, 2
        )

    val, err = sint.quad(integrand, 0.0, 0.7, epsabs=1e-13, epsrel=1e-12)
    assert err < 1e-12
    assert closed_form.symmetric_ct(pois, 0.7, 0, 3) == pytest.approx(val, abs=1e-12)

    # laws with no mass below two arms produce no armless debris at finite t
    half2 = spec_symmetric([0.0, 0.0, 0.5])
    assert closed_form.symmetric_ct(half2, 0.7, 0, 2) == 0.0


def test_symmetric_limit_examples():
    d1 = spec_symmetric([0.0, 1.0])
    assert closed_form.symmetric_limit(d1, 0, 2) == pytest.approx(0.5, rel=1e-15)
    assert closed_form.symmetric_limit(d1, 0, 3) == 0.0
    assert closed_form.symmetric_limit(d1, 1, 2) == 0.0

    pois = closed_form.model_spec("symmetric", measures.poisson_arms(1.0, 60))
    assert closed_form.symmetric_limit(pois, 0, 1) == pytest.approx(
        math.exp(-1.0), rel=1e-14
    )
    for m in range(2, 31):
        assert closed_form.symmetric_limit(pois, 0, m) == pytest.approx(
            measures.borel(1.0, m) / m, rel=1e-12
        )

    # supercritical laws gel; the armless limit table is not available
    third3 = spec_symmetric([0.0, 0.0, 0.0, 1.0 / 3.0])
    with pytest.raises(UnsupportedRegimeError):
        closed_form.symmetric_limit(third3, 0, 2)


def test_size_marginal_reference_laws():
    # single-arm law: the merge intensity counts both arms of the pair, so
    # the classical constant-kernel clock runs at half speed
    d1 = spec_oriented([0.0, 1.0])
    for t in (0.5, 1.0, 2.0):
        for m in range(1, 31):
            ref = closed_form.smoluchowski_reference("constant", 2.0 * t, m)
            assert closed_form.size_marginal(d1, t, m) == pytest.approx(
                ref, abs=1e-12
            )

    # Poisson law: size columns follow the additive-kernel solution on the
    # logarithmic clock
    pois = closed_form.model_spec("oriented", measures.poisson_arms(1.0, 120))
    for t in (0.5, 1.0, 3.0):
        s = math.log1p(t)
        for m in range(1, 31):
            ref = closed_form.smoluchowski_reference("additive", s, m)
            assert closed_form.size_marginal(pois, t, m) == pytest.approx(
                ref, abs=1e-10
            )


def test_smoluchowski_reference_values():
    assert closed_form.smoluchowski_reference("constant", 0.0, 1) == 1.0
    assert closed_form.smoluchowski_reference("constant", 0.0, 2) == 0.0
    assert closed_form.smoluchowski_reference(
        "additive", math.log(2.0), 1
    ) == pytest.approx(0.5 * math.exp(-0.5), rel=1e-14)
    for m in (1, 2, 7):
        assert closed_form.smoluchowski_reference(
            "multiplicative", 0.6, m
        ) == pytest.approx(measures.borel(0.6, m) / m, rel=1e-14)
    with pytest.raises(DomainError):
        closed_form.smoluchowski_reference("multiplicative", 1.0, 1)
    with pytest.raises(ValidationError):
        closed_form.smoluchowski_reference("ballistic", 1.0, 1)


def test_concentration_and_moment_csv_schemas(tmp_path):
    spec = spec_oriented([0.0, 1.0])
    blocks = [(0.5, closed_form.oriented_table(spec, 0.5, 2, 3))]
    path = tmp_path / "table.csv"
    closed_form.write_concentration_csv(path, blocks)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "t,a,m,c"
    assert len(lines) == 1 + 3 * 3
    # entries restore bit-exactly through the 17-digit format
    _, a, m, c = lines[1].split(",")
    assert float(c) == blocks[0][1][int(a), int(m) - 1]

    path = tmp_path / "moments.csv"
    closed_form.write_moments_csv(path, [(0.5, 1.0, 0.5, 0.25)])
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "t,C,A,M2"
    assert [float(x) for x in lines[1].split(",")] == [0.5, 1.0, 0.5, 0.25]
