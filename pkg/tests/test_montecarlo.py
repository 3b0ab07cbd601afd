"""Stochastic merge simulation: exactness contracts and convergence."""

import csv
import math

import numpy as np
import pytest

from armcoag import closed_form, measures, montecarlo
from armcoag.errors import ValidationError


def third3() -> measures.DiscreteMeasure:
    return measures.make_measure([0.0, 0.0, 0.0, 1.0 / 3.0])


def test_simulate_validation():
    mu = measures.dirac(1)
    with pytest.raises(ValidationError):
        montecarlo.simulate("ballistic", mu, 100, 1.0, 0)
    with pytest.raises(ValidationError):
        montecarlo.simulate("oriented", mu, 1, 1.0, 0)
    with pytest.raises(ValidationError):
        montecarlo.simulate("oriented", mu, True, 1.0, 0)
    with pytest.raises(ValidationError):
        montecarlo.simulate("oriented", mu, 100.0, 1.0, 0)
    with pytest.raises(ValidationError):
        montecarlo.simulate("oriented", mu, 100, -1.0, 0)
    with pytest.raises(ValidationError):
        montecarlo.simulate("oriented", mu, 100, 1.0, -3)
    with pytest.raises(ValidationError):
        montecarlo.simulate("oriented", mu, 100, 1.0, True)
    with pytest.raises(ValidationError):
        montecarlo.simulate("oriented", mu, 100, 1.0, 0, snapshot_times=[0.2, 0.2])
    with pytest.raises(ValidationError):
        montecarlo.simulate("oriented", mu, 100, 1.0, 0, snapshot_times=[0.5, 1.5])
    with pytest.raises(ValidationError):
        montecarlo.simulate("oriented", mu, 100, 1.0, 0, snapshot_times=[-0.1, 0.5])


def test_simulate_deterministic_per_seed():
    mu = measures.dirac(1)
    a = montecarlo.simulate("oriented", mu, 2000, 0.5, 7, snapshot_times=[0.25, 0.5])
    b = montecarlo.simulate("oriented", mu, 2000, 0.5, 7, snapshot_times=[0.25, 0.5])
    assert a.events == b.events
    assert a.times == b.times
    for sa, sb in zip(a.states, b.states):
        for xa, xb in zip(sa, sb):
            assert np.array_equal(xa, xb)

    c = montecarlo.simulate("oriented", mu, 2000, 0.5, 8, snapshot_times=[0.25, 0.5])
    assert c.events != a.events or not all(
        np.array_equal(x, y) for x, y in zip(a.states[-1], c.states[-1])
    )


def test_simulate_armless_population_is_frozen():
    res = montecarlo.simulate(
        "symmetric", measures.dirac(0), 500, 2.0, 3, snapshot_times=[0.0, 1.0, 2.0]
    )
    assert res.events == 0
    assert res.times == [0.0, 1.0, 2.0]
    for a_u, m_u, cnt in res.states:
        assert np.array_equal(a_u, [0])
        assert np.array_equal(m_u, [1])
        assert np.array_equal(cnt, [500])
    mom = res.moments(-1)
    assert mom.mass == pytest.approx(1.0, abs=1e-15)
    assert mom.mean == 0.0


def test_simulate_initial_state_single_atom_exact():
    # one-third of triple-armed monomers: the initial sample is
    # deterministic and the estimate must reproduce the law exactly
    res = montecarlo.simulate("symmetric", third3(), 4000, 1e-9, 5, snapshot_times=[0.0])
    tab = res.table(0, 5, 3)
    assert tab[3, 0] == pytest.approx(1.0 / 3.0, abs=1e-15)
    assert float(np.abs(tab).sum()) == pytest.approx(1.0 / 3.0, abs=1e-15)
    mom = res.moments(0)
    assert mom.mean == pytest.approx(1.0, abs=1e-15)
    assert mom.second_factorial == pytest.approx(2.0, abs=1e-15)


def test_simulate_structural_invariants():
    # oriented merges of single-arm clusters keep exactly one arm, and the
    # total size mass is the population itself
    mu = measures.dirac(1)
    res = montecarlo.simulate("oriented", mu, 5000, 0.6, 1, snapshot_times=[0.3, 0.6])
    for k, (a_u, m_u, cnt) in enumerate(res.states):
        assert np.array_equal(np.unique(a_u), [1])
        assert int((m_u * cnt).sum()) == 5000
        mom = res.moments(k)
        assert mom.mass == mom.mean

    # symmetric triple-armed monomers live on the arms = size + 2 line
    res3 = montecarlo.simulate("symmetric", third3(), 6000, 0.5, 2, snapshot_times=[0.25, 0.5])
    for a_u, m_u, cnt in res3.states:
        assert np.abs(a_u - m_u - 2).max() == 0
        assert int((m_u * cnt).sum()) == 6000


def test_simulate_oriented_matches_closed_form():
    mu = measures.dirac(1)
    spec = closed_form.model_spec("oriented", mu)
    res = montecarlo.simulate("oriented", mu, 100000, 0.5, 11)
    tab = res.table(0, 2, 8)
    exact = closed_form.oriented_table(spec, 0.5, 2, 8)
    # everything off the single-arm row is structurally impossible
    assert float(np.abs(tab[0]).max()) == 0.0
    assert float(np.abs(tab[2]).max()) == 0.0
    for m in range(1, 9):
        se = math.sqrt(exact[1, m - 1] * res.scale / res.n)
        assert abs(tab[1, m - 1] - exact[1, m - 1]) <= 4.0 * se


def test_simulate_symmetric_matches_closed_form():
    mu = third3()
    spec = closed_form.model_spec("symmetric", mu)
    res = montecarlo.simulate("symmetric", mu, 100000, 0.5, 12)
    a_u, m_u, cnt = res.states[0]
    for m in range(1, 7):
        exact = closed_form.symmetric_ct(spec, 0.5, m + 2, m)
        got = res.scale * cnt[m_u == m].sum() / res.n
        se = math.sqrt(exact * res.scale / res.n)
        assert abs(got - exact) <= 4.0 * se
    mom = res.moments(0)
    assert mom.mean == pytest.approx(1.0 / 1.5, abs=5e-3)


def test_write_mc_csv_schema(tmp_path):
    res = montecarlo.simulate(
        "oriented", measures.dirac(1), 300, 0.4, 9, snapshot_times=[0.2, 0.4]
    )
    path = tmp_path / "mc.csv"
    montecarlo.write_mc_csv(res, path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "a", "m", "c_hat", "n", "seed"]
    body = rows[1:]
    assert len(body) == sum(len(s[0]) for s in res.states)
    assert all(r[4] == "300" and r[5] == "9" for r in body)
    # reconstruct the last snapshot and compare bit-exactly
    a_u, m_u, cnt = res.states[-1]
    expect = {(int(a), int(m)): res.scale * k / res.n for a, m, k in zip(a_u, m_u, cnt)}
    got = {
        (int(r[1]), int(r[2])): float(r[3]) for r in body if float(r[0]) == 0.4
    }
    assert got == expect
