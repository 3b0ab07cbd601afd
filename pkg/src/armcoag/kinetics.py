"""Adaptive integration of the truncated two-variable coagulation systems.

The state lives on a finite (arms, size) window. Merges whose product
falls outside the window are not silently lost: their mass and arm
counts drain into two scalar accumulators integrated alongside the grid,
so conservation can be checked and a leak threshold enforced.

Three right-hand-side strategies share the same semantics:

  dense    pair sums via one 2D FFT self-convolution per call
  sparse   explicit loop over nonzero ordered pairs (bincount); exact
           overflow split, no spectral roundoff; wins while the state
           stays thin
  compact  single-point initial laws confine the dynamics to the line
           a = alpha*m + beta, which the merge rules preserve; the state
           collapses to one vector indexed by size and the pair sum to a
           1D convolution. This is what makes very deep size windows
           (tens of thousands) affordable.

The stepper is the classic Dormand-Prince 5(4) embedded pair with FSAL
and a PI step controller, max-norm error control, exact landing on the
requested snapshot times, and clamping of the tiny negative undershoots
adaptive steps produce on cells near zero (tracked, never hidden).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from . import closed_form, measures
from .closed_form import ModelSpec
from .errors import (
    BlowUpError,
    DomainError,
    LeakToleranceError,
    SolverFailureError,
    ValidationError,
)
from .measures import MomentSummary

__all__ = [
    "ConcentrationGrid",
    "StepStats",
    "Trajectory",
    "TruncationSpec",
    "default_snapshot_times",
    "detect_gamma_r",
    "integrate",
    "reference_trajectory",
    "rhs_oriented",
    "rhs_symmetric",
    "weak_residual",
    "write_trajectory_csv",
]

NEGATIVE_SLACK = -1e-12


@dataclass(frozen=True)
class TruncationSpec:
    """Finite window 0 <= a <= a_max, 1 <= m <= m_max, plus the leak budget.

    leak_tol bounds the fraction of the initial size-mass allowed to
    escape through the window boundary before integration aborts.
    """

    a_max: int
    m_max: int
    leak_tol: float = 1e-6

    def __post_init__(self) -> None:
        if self.a_max < 0:
            raise ValidationError(f"a_max must be >= 0, got {self.a_max!r}")
        if self.m_max < 2:
            raise ValidationError(f"m_max must be >= 2, got {self.m_max!r}")
        if not (0.0 < self.leak_tol <= 1.0):
            raise ValidationError(f"leak_tol must be in (0, 1], got {self.leak_tol!r}")


@dataclass(frozen=True)
class ConcentrationGrid:
    """One concentration snapshot.

    values[a, m-1] is the concentration of (a arms, size m) particles.
    For compact (line-confined) runs, values is a windowed rendering and
    the full state is kept in compact_values along the line
    a = compact_line[0] * m + compact_line[1].
    """

    values: np.ndarray
    overflow_mass: float
    overflow_arms: float
    trunc: TruncationSpec
    compact_line: tuple[int, int] | None = None
    compact_values: np.ndarray | None = None

    def arm_moments(self) -> MomentSummary:
        """Count, mean arm count, and second factorial arm moment."""
        if self.compact_values is not None:
            u = self.compact_values
            alpha, beta = self.compact_line
            a = alpha * np.arange(1, len(u) + 1, dtype=np.float64) + beta
            mass = float(u.sum())
            mean = float((a * u).sum())
            secfac = float((a * (a - 1.0) * u).sum())
        else:
            a = np.arange(self.values.shape[0], dtype=np.float64)[:, None]
            mass = float(self.values.sum())
            mean = float((a * self.values).sum())
            secfac = float((a * (a - 1.0) * self.values).sum())
        return MomentSummary(mass=mass, mean=mean, second_factorial=secfac, diff=mass - mean)

    def size_mass(self) -> float:
        """Total mass sum(m * c) still inside the window."""
        if self.compact_values is not None:
            u = self.compact_values
            return float((np.arange(1, len(u) + 1, dtype=np.float64) * u).sum())
        m = np.arange(1, self.values.shape[1] + 1, dtype=np.float64)[None, :]
        return float((m * self.values).sum())

    def entry(self, a: int, m: int) -> float:
        """c(a, m), resolving compact storage transparently."""
        if self.compact_values is not None:
            alpha, beta = self.compact_line
            if 1 <= m <= len(self.compact_values) and a == alpha * m + beta:
                return float(self.compact_values[m - 1])
            return 0.0
        if 0 <= a < self.values.shape[0] and 1 <= m <= self.values.shape[1]:
            return float(self.values[a, m - 1])
        return 0.0


@dataclass
class StepStats:
    accepted: int = 0
    rejected: int = 0
    step_min: float = math.inf
    step_max: float = 0.0
    worst_negative: float = 0.0
    rhs_evals: int = 0


@dataclass
class Trajectory:
    """Snapshots plus bookkeeping from one integrate() run."""

    model: ModelSpec
    trunc: TruncationSpec
    times: list[float] = field(default_factory=list)
    grids: list[ConcentrationGrid] = field(default_factory=list)
    moments: list[MomentSummary] = field(default_factory=list)
    stats: StepStats = field(default_factory=StepStats)
    halted_at: float | None = None
    halted_reason: str | None = None

    def leak(self) -> list[float]:
        mass0 = measures.moments(self.model.initial_measure).mass
        return [g.overflow_mass / mass0 for g in self.grids]


# ---------------------------------------------------------------------------
# right-hand sides (dense / sparse / compact)


def _noise_clipped(conv: np.ndarray, input_l1: float) -> np.ndarray:
    """Zero FFT-convolution outputs below the roundoff floor, in place.

    FFT roundoff lands everywhere in the output at a scale proportional
    to the square of the input's l1 norm (measured around 1e-17 * l1^2
    per entry, with a log-size factor). Depositing it seeds far-off
    high-arm cells whose pair rates scale like a_max * A; the quadratic
    coupling amplifies the seed exponentially until spurious mass drowns
    the leak diagnostics (a 320x440 grid run with no floor blows through
    a 1e-8 leak budget before t = 0.2). The floor cannot be generous
    either: every clipped cell also discards true sub-floor gain, which
    biases the count and arm budgets and shows up as drift in conserved
    moment combinations (about 1.3e-7 per unit time at 4096 * eps on the
    same grid). 32 * eps sits a safe factor above observed noise peaks
    while keeping that drift a couple of orders below 1e-8.
    """
    floor = 32.0 * np.finfo(np.float64).eps * input_l1 * input_l1
    if floor > 0.0:
        np.copyto(conv, 0.0, where=conv < floor)
    return conv


def _dense_rhs(values: np.ndarray, kind: str) -> tuple[np.ndarray, float, float]:
    """Truncated pair-interaction RHS via one 2D self-convolution.

    Returns (dvalues, overflow_mass_rate, overflow_arms_rate). Overflow
    rates are computed from exact 1D marginal convolutions rather than
    from the 2D FFT result: subtracting the in-window FFT sum from the
    analytic total would expose FFT roundoff (order 1e-7 per call on a
    200x700 grid), swamping physically tiny leaks. Pairs violating both
    the size and the arm bound at once are counted twice, so the
    accumulated leak is a slight overestimate; the gate errs safe.
    """
    a_rows, m_cols = values.shape
    a_max = a_rows - 1
    a = np.arange(a_rows, dtype=np.float64)[:, None]
    m = np.arange(1, m_cols + 1, dtype=np.float64)[None, :]
    count = float(values.sum())
    arms = float((a * values).sum())

    gain = np.zeros_like(values)
    if kind == "oriented":
        # merge (a,m)+(a',m') -> (a+a'-1, m+m') at density (a+a') c c'
        # (ordered grabber form summed symmetrically)
        if a_max >= 1 and m_cols >= 2:
            conv = _noise_clipped(fftconvolve(values, values), count)
            rows = min(a_max + 1, 2 * a_max)  # need row index alpha+1 <= 2 a_max
            alpha = np.arange(rows, dtype=np.float64)[:, None]
            gain[:rows, 1:] = 0.5 * (alpha + 1.0) * conv[1 : rows + 1, : m_cols - 1]
        loss = values * (a * count + arms)

        # size-axis marginals, index j <-> size j+1; conv index k <-> size k+2
        c_m = values.sum(axis=0)
        a_m = (a * values).sum(axis=0)
        a2_m = (a * a * values).sum(axis=0)
        size = np.arange(2, 2 * m_cols + 1, dtype=np.float64)
        out_s = m_cols - 1  # first conv index with size > m_cols
        of_mass = float((size[out_s:] * np.convolve(a_m, c_m)[out_s:]).sum())
        of_arms = float(
            (
                np.convolve(a2_m, c_m) + np.convolve(a_m, a_m) - np.convolve(a_m, c_m)
            )[out_s:].sum()
        )
        # arm-axis marginals; conv index sigma = a + a', product keeps sigma-1 arms
        c_a = values.sum(axis=1)
        mc_a = (m * values).sum(axis=1)
        sigma = np.arange(2 * a_max + 1, dtype=np.float64)
        out_a = a_max + 2
        of_mass += float((sigma[out_a:] * np.convolve(mc_a, c_a)[out_a:]).sum())
        of_arms += float(
            ((sigma - 1.0) * 0.5 * sigma * np.convolve(c_a, c_a))[out_a:].sum()
        )
    else:
        weighted = a * values
        if a_max >= 0 and m_cols >= 2 and 2 * a_max >= 2:
            conv = _noise_clipped(fftconvolve(weighted, weighted), arms)
            rows = min(a_max + 1, 2 * a_max - 1)  # row index alpha+2 <= 2 a_max
            gain[:rows, 1:] = 0.5 * conv[2 : rows + 2, : m_cols - 1]
        loss = weighted * arms

        u_m = weighted.sum(axis=0)
        u2_m = (a * weighted).sum(axis=0)
        mu_m = np.arange(1, m_cols + 1, dtype=np.float64) * u_m
        out_s = m_cols - 1
        of_mass = float(np.convolve(mu_m, u_m)[out_s:].sum())
        of_arms = float((np.convolve(u2_m, u_m) - np.convolve(u_m, u_m))[out_s:].sum())
        # conv index sigma = a + a'; symmetric product keeps sigma-2 arms
        p_a = weighted.sum(axis=1)
        q_a = (m * weighted).sum(axis=1)
        sigma = np.arange(2 * a_max + 1, dtype=np.float64)
        out_a = a_max + 3
        of_mass += float(np.convolve(q_a, p_a)[out_a:].sum())
        of_arms += float(((sigma - 2.0) * 0.5 * np.convolve(p_a, p_a))[out_a:].sum())

    return gain - loss, of_mass, of_arms


def _sparse_rhs(values: np.ndarray, kind: str) -> tuple[np.ndarray, float, float]:
    """Same semantics as _dense_rhs via explicit nonzero-pair enumeration.

    Out-of-window products are split off exactly (no large-sum
    cancellation), which is the main reason this path exists beyond
    speed on thin states.
    """
    a_rows, m_cols = values.shape
    a_max = a_rows - 1
    ai, mi = np.nonzero(values)
    v = values[ai, mi]
    af = ai.astype(np.float64)
    sizes = mi + 1  # integer sizes
    count = float(v.sum())
    arms = float((af * v).sum())

    a_col = np.arange(a_rows, dtype=np.float64)[:, None]
    if kind == "oriented":
        loss = values * (a_col * count + arms)
    else:
        loss = a_col * values * arms

    flat_gain = np.zeros(a_rows * m_cols)
    of_mass = 0.0
    of_arms = 0.0
    n = len(v)
    if n:
        chunk = max(1, int(4_000_000 // n))
        for start in range(0, n, chunk):
            sl = slice(start, min(start + chunk, n))
            if kind == "oriented":
                # ordered pair (grabber i, grabbed j), weight a_i c_i c_j
                w = (af[sl] * v[sl])[:, None] * v[None, :]
                pa = ai[sl][:, None] + ai[None, :] - 1
            else:
                # unordered pair at a_i a_j c_i c_j; ordered sum halved
                w = 0.5 * (af[sl] * v[sl])[:, None] * (af * v)[None, :]
                pa = ai[sl][:, None] + ai[None, :] - 2
            pm = sizes[sl][:, None] + sizes[None, :]
            inside = (pa >= 0) & (pa <= a_max) & (pm <= m_cols)
            if inside.any():
                idx = pa[inside] * m_cols + (pm[inside] - 1)
                flat_gain += np.bincount(idx, weights=w[inside], minlength=a_rows * m_cols)
            out = ~inside
            if out.any():
                wo = w[out]
                of_mass += float((wo * pm[out]).sum())
                of_arms += float((wo * pa[out]).sum())
    gain = flat_gain.reshape(a_rows, m_cols)
    return gain - loss, of_mass, of_arms


def _compact_line(spec: ModelSpec) -> tuple[int, int, float] | None:
    """(alpha, beta, weight) when the dynamics live on a = alpha m + beta.

    Single-atom initial laws w*delta_j stay on that line forever:
    oriented merges preserve it with beta = 1 (alpha = j-1), symmetric
    with beta = 2 (alpha = j-2, so j >= 2 is needed).
    """
    nz = np.nonzero(spec.initial_measure.weights)[0]
    if nz.size != 1:
        return None
    j = int(nz[0])
    w = float(spec.initial_measure.weights[j])
    if spec.kind == "oriented":
        if j >= 1:
            return j - 1, 1, w
        return None
    if j >= 2:
        return j - 2, 2, w
    return None


def _compact_rhs(
    u: np.ndarray, alpha: int, beta: int, kind: str
) -> tuple[np.ndarray, float, float]:
    """Line-confined RHS; u[m-1] = c(alpha m + beta, m).

    The 1D convolution is done directly (exact arithmetic, no FFT
    noise) and the out-of-window part of the product distribution is
    summed explicitly, so overflow rates carry no cancellation error.
    """
    m_cols = len(u)
    a_line = alpha * np.arange(1, m_cols + 1, dtype=np.float64) + beta
    count = float(u.sum())
    arms = float((a_line * u).sum())
    sizes_prod = np.arange(2, 2 * m_cols + 1, dtype=np.float64)
    if kind == "oriented":
        conv = np.convolve(u, u)
        gain_all = 0.5 * (alpha * sizes_prod + 2 * beta) * conv
        loss = u * (a_line * count + arms)
        prod_arms = alpha * sizes_prod + 2 * beta - 1
    else:
        weighted = a_line * u
        gain_all = 0.5 * np.convolve(weighted, weighted)
        loss = a_line * u * arms
        prod_arms = alpha * sizes_prod + 2 * beta - 2
    du = -loss
    du[1:] += gain_all[: m_cols - 1]
    tail = gain_all[m_cols - 1 :]
    of_mass = float((sizes_prod[m_cols - 1 :] * tail).sum())
    of_arms = float((prod_arms[m_cols - 1 :] * tail).sum())
    return du, of_mass, of_arms


def rhs_oriented(values: np.ndarray, method: str = "dense"):
    """Time derivative of a truncated oriented-model grid.

    Returns (dvalues, overflow_mass_rate, overflow_arms_rate).
    """
    if method == "dense":
        return _dense_rhs(np.asarray(values, dtype=np.float64), "oriented")
    if method == "sparse":
        return _sparse_rhs(np.asarray(values, dtype=np.float64), "oriented")
    raise ValidationError(f"method must be 'dense' or 'sparse', got {method!r}")


def rhs_symmetric(values: np.ndarray, method: str = "dense"):
    """Time derivative of a truncated symmetric-model grid."""
    if method == "dense":
        return _dense_rhs(np.asarray(values, dtype=np.float64), "symmetric")
    if method == "sparse":
        return _sparse_rhs(np.asarray(values, dtype=np.float64), "symmetric")
    raise ValidationError(f"method must be 'dense' or 'sparse', got {method!r}")


def weak_residual(values: np.ndarray, derivative: np.ndarray, f, kind: str) -> float:
    """Consistency check of a grid derivative against the pair-sum form.

    For a test statistic f(a, m), the truncated dynamics must satisfy

      sum f dc/dt = sum over ordered reactant pairs of
                    rate * (f(product) [if product in window] - contribution
                    of the reactants' f)

    and this returns the absolute mismatch. f may be a callable f(a, m)
    or a precomputed table matching values' shape. Meant for small
    (test-scale) grids; the pair sum is O(nnz^2).
    """
    values = np.asarray(values, dtype=np.float64)
    a_rows, m_cols = values.shape
    a_max = a_rows - 1
    if callable(f):
        aa, mm = np.meshgrid(
            np.arange(a_rows, dtype=np.float64),
            np.arange(1, m_cols + 1, dtype=np.float64),
            indexing="ij",
        )
        f_tab = np.vectorize(f, otypes=[np.float64])(aa, mm)
    else:
        f_tab = np.asarray(f, dtype=np.float64)
        if f_tab.shape != values.shape:
            raise ValidationError("statistic table must match the grid shape")

    lhs = float((f_tab * np.asarray(derivative)).sum())

    ai, mi = np.nonzero(values)
    v = values[ai, mi]
    af = ai.astype(np.float64)
    sizes = mi + 1
    fv = f_tab[ai, mi]
    rhs = 0.0
    n = len(v)
    for i in range(n):
        if kind == "oriented":
            w = af[i] * v[i] * v  # i grabs j
            pa = ai[i] + ai - 1
        elif kind == "symmetric":
            w = 0.5 * af[i] * v[i] * af * v
            pa = ai[i] + ai - 2
        else:
            raise ValidationError(f"kind must be oriented or symmetric, got {kind!r}")
        pm = sizes[i] + sizes
        inside = (pa >= 0) & (pa <= a_max) & (pm <= m_cols)
        fp = np.zeros(n)
        fp[inside] = f_tab[pa[inside], pm[inside] - 1]
        if kind == "oriented":
            rhs += float((w * (fp - fv[i] - fv)).sum())
        else:
            # ordered double-count at half weight covers both removals
            rhs += float((w * (fp - fv[i] - fv)).sum())
    return abs(lhs - rhs)


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4) with FSAL + PI control

_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_E = np.array(
    [71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40]
)

_H_FLOOR = 1e-12
_H_INIT = 1e-4


def default_snapshot_times(t_end: float, count: int = 40) -> list[float]:
    """Snapshot schedule from 0 to t_end, denser toward t_end.

    Late times are where truncation leak and moment growth bite, so the
    quadratic ramp spends resolution there.
    """
    if t_end <= 0.0:
        raise ValidationError(f"t_end must be > 0, got {t_end!r}")
    if count < 2:
        raise ValidationError(f"count must be >= 2, got {count!r}")
    u = np.linspace(0.0, 1.0, count)
    return [float(t_end * (2.0 * s - s * s)) for s in u]


def _initial_dense(spec: ModelSpec, trunc: TruncationSpec) -> np.ndarray:
    w = spec.initial_measure.weights
    if len(w) - 1 > trunc.a_max:
        raise ValidationError(
            f"a_max={trunc.a_max} cannot hold the initial arm support "
            f"(max arm count {len(w) - 1})"
        )
    values = np.zeros((trunc.a_max + 1, trunc.m_max))
    values[: len(w), 0] = w
    return values


def integrate(
    spec: ModelSpec,
    trunc: TruncationSpec,
    t_end: float,
    tol: float = 1e-8,
    snapshot_times=None,
    method: str = "auto",
    snapshot_window: tuple[int, int] | None = None,
    explore_blowup: bool = False,
) -> Trajectory:
    """Integrate the truncated system to t_end with error tolerance tol.

    method: 'auto' picks the compact line solver for single-atom initial
    laws whose line fits in the window, otherwise switches per call
    between the sparse and dense pair sums based on how full the state
    is; 'dense', 'sparse', 'compact' force a path.

    snapshot_times defaults to a 40-point ramp toward t_end and must be
    ascending within [0, t_end]. snapshot_window (a_cap, m_cap) bounds
    the dense rendering stored per snapshot for compact runs.

    Aborts with LeakToleranceError when the escaped mass fraction passes
    trunc.leak_tol, and SolverFailureError when the controller collapses
    the step below the floor; explore_blowup=True returns the partial
    trajectory with halted_at/halted_reason instead of raising.
    """
    if t_end <= 0.0:
        raise ValidationError(f"t_end must be > 0, got {t_end!r}")
    if not (0.0 < tol <= 1e-1):
        raise ValidationError(f"tol must be in (0, 0.1], got {tol!r}")
    if method not in ("auto", "dense", "sparse", "compact"):
        raise ValidationError(f"unknown method {method!r}")

    if snapshot_times is None:
        snapshot_times = default_snapshot_times(t_end)
    snapshot_times = [float(t) for t in snapshot_times]
    if any(t2 <= t1 for t1, t2 in zip(snapshot_times, snapshot_times[1:])):
        raise ValidationError("snapshot times must be strictly ascending")
    if snapshot_times and (snapshot_times[0] < 0.0 or snapshot_times[-1] > t_end + 1e-12):
        raise ValidationError("snapshot times must lie within [0, t_end]")

    line = _compact_line(spec)
    compact_ok = line is not None and (
        line[0] >= 0 and trunc.a_max >= line[0] * trunc.m_max + line[1]
    )
    if method == "compact" and not compact_ok:
        raise ValidationError(
            "compact method needs a single-atom initial law whose line "
            "a = alpha*m + beta fits inside the window"
        )
    use_compact = method == "compact" or (method == "auto" and compact_ok)

    mass0 = measures.moments(spec.initial_measure).mass
    stats = StepStats()
    traj = Trajectory(model=spec, trunc=trunc, stats=stats)

    if use_compact:
        alpha, beta, w0 = line
        y_grid0 = np.zeros(trunc.m_max)
        y_grid0[0] = w0
        shape = None

        def rhs(flat: np.ndarray) -> np.ndarray:
            stats.rhs_evals += 1
            du, om, oa = _compact_rhs(flat[:-2], alpha, beta, spec.kind)
            return np.concatenate((du, [om, oa]))

    else:
        values0 = _initial_dense(spec, trunc)
        shape = values0.shape
        y_grid0 = values0.ravel()
        n_cells = values0.size

        def rhs(flat: np.ndarray) -> np.ndarray:
            stats.rhs_evals += 1
            values = flat[:-2].reshape(shape)
            if method == "dense":
                mode = "dense"
            elif method == "sparse":
                mode = "sparse"
            else:
                nnz = int(np.count_nonzero(values))
                budget = 16.0 * n_cells * math.log2(n_cells + 2)
                mode = "sparse" if nnz * nnz <= budget else "dense"
            dv, om, oa = _dense_rhs(values, spec.kind) if mode == "dense" else _sparse_rhs(
                values, spec.kind
            )
            return np.concatenate((dv.ravel(), [om, oa]))

    y = np.concatenate((y_grid0, [0.0, 0.0]))
    t = 0.0

    def snapshot(t_now: float, flat: np.ndarray) -> None:
        om, oa = float(flat[-2]), float(flat[-1])
        if use_compact:
            u = flat[:-2].copy()
            cap_a, cap_m = snapshot_window or (
                min(trunc.a_max, 400),
                min(trunc.m_max, 400),
            )
            window = np.zeros((cap_a + 1, cap_m))
            for m in range(1, cap_m + 1):
                a_line = alpha * m + beta
                if a_line <= cap_a:
                    window[a_line, m - 1] = u[m - 1]
            grid = ConcentrationGrid(
                values=window,
                overflow_mass=om,
                overflow_arms=oa,
                trunc=trunc,
                compact_line=(alpha, beta),
                compact_values=u,
            )
        else:
            grid = ConcentrationGrid(
                values=flat[:-2].reshape(shape).copy(),
                overflow_mass=om,
                overflow_arms=oa,
                trunc=trunc,
            )
        traj.times.append(t_now)
        traj.grids.append(grid)
        traj.moments.append(grid.arm_moments())

    def halt(reason: str, t_now: float):
        traj.halted_at = t_now
        traj.halted_reason = reason
        return traj

    snap_idx = 0
    while snap_idx < len(snapshot_times) and snapshot_times[snap_idx] <= 0.0:
        snapshot(0.0, y)
        snap_idx += 1

    h = min(_H_INIT, t_end)
    err_prev = 1.0
    k = [None] * 7
    k[0] = rhs(y)

    while t < t_end - 1e-14 * max(1.0, t_end):
        target = snapshot_times[snap_idx] if snap_idx < len(snapshot_times) else t_end
        h = min(h, t_end - t)
        hitting = False
        if target > t and t + h >= target - 1e-14 * max(1.0, target):
            h = target - t
            hitting = True

        for i in range(1, 6):
            yi = y + h * sum(_DP_A[i][j] * k[j] for j in range(i))
            k[i] = rhs(yi)
        y_new = y + h * (
            _DP_B[0] * k[0]
            + _DP_B[2] * k[2]
            + _DP_B[3] * k[3]
            + _DP_B[4] * k[4]
            + _DP_B[5] * k[5]
        )
        k[6] = rhs(y_new)
        err_vec = h * (
            _DP_E[0] * k[0]
            + _DP_E[2] * k[2]
            + _DP_E[3] * k[3]
            + _DP_E[4] * k[4]
            + _DP_E[5] * k[5]
            + _DP_E[6] * k[6]
        )
        scale = tol * (1.0 + np.maximum(np.abs(y), np.abs(y_new)))
        err = float(np.max(np.abs(err_vec) / scale))

        if not math.isfinite(err):
            if explore_blowup:
                return halt("state became non-finite", t)
            raise BlowUpError(f"state became non-finite at t={t!r}", last_time=t)

        if err <= 1.0:
            t_new = target if hitting else t + h
            neg_min = float(y_new.min())
            if neg_min < 0.0:
                # Undershoot of cells whose true value is ~0; magnitudes sit
                # far below the error-control floor, so the FSAL derivative
                # from the unclamped state stays valid.
                stats.worst_negative = min(stats.worst_negative, neg_min)
                np.maximum(y_new, 0.0, out=y_new)
            stats.accepted += 1
            stats.step_min = min(stats.step_min, h)
            stats.step_max = max(stats.step_max, h)
            y = y_new
            t = t_new
            k[0] = k[6]

            leak = float(y[-2]) / mass0
            if leak > trunc.leak_tol:
                if explore_blowup:
                    return halt(f"leak {leak:.3e} exceeded tolerance", t)
                raise LeakToleranceError(
                    f"escaped mass fraction {leak:.3e} exceeded "
                    f"{trunc.leak_tol:.3e} at t={t!r}",
                    time=t,
                    leak=leak,
                )
            while snap_idx < len(snapshot_times) and t >= snapshot_times[snap_idx] - 1e-14 * max(
                1.0, snapshot_times[snap_idx]
            ):
                snapshot(snapshot_times[snap_idx], y)
                snap_idx += 1

            if err == 0.0:
                factor = 5.0
            else:
                factor = 0.9 * err ** (-0.7 / 5.0) * err_prev ** (0.4 / 5.0)
            err_prev = max(err, 1e-10)
            h *= min(5.0, max(0.2, factor))
        else:
            stats.rejected += 1
            h *= max(0.2, 0.9 * err ** (-0.2))

        if h < _H_FLOOR:
            if explore_blowup:
                return halt("step size collapsed below floor", t)
            raise SolverFailureError(
                f"step size collapsed below {_H_FLOOR:g} at t={t!r}"
            )

    while snap_idx < len(snapshot_times):
        # end time reached within roundoff of remaining snapshots
        snapshot(snapshot_times[snap_idx], y)
        snap_idx += 1
    return traj


# ---------------------------------------------------------------------------
# trajectory utilities


def detect_gamma_r(trajectory: Trajectory, r: float) -> float | None:
    """First time the second arm moment sum(a^2 c) reaches level r.

    Linear interpolation between the bracketing snapshots; returns 0.0
    when the initial snapshot already sits at or above r, and None when
    the trajectory never gets there.
    """
    if r <= 0.0:
        raise ValidationError(f"level must be > 0, got {r!r}")
    if not trajectory.moments:
        raise ValidationError("trajectory has no snapshots")
    second = [mom.second_factorial + mom.mean for mom in trajectory.moments]
    times = trajectory.times
    if second[0] >= r:
        return 0.0
    for i in range(1, len(second)):
        if second[i] >= r:
            s0, s1 = second[i - 1], second[i]
            t0, t1 = times[i - 1], times[i]
            if s1 == s0:
                return t1
            return t0 + (r - s0) * (t1 - t0) / (s1 - s0)
    return None


def reference_trajectory(
    spec: ModelSpec,
    times,
    a_max: int = 8,
    m_max: int = 6,
    moment_rel_tol: float = 1e-8,
) -> Trajectory:
    """Trajectory-shaped view of the exact solution (no integration).

    Grids are closed-form tables on a small window; moment summaries are
    full series sums over the untruncated state, so moment-based
    detectors (detect_gamma_r) see the true solution rather than a
    window artifact. Symmetric models only for the moment curves.
    """
    times = [float(t) for t in times]
    if any(t2 <= t1 for t1, t2 in zip(times, times[1:])):
        raise ValidationError("times must be strictly ascending")
    trunc = TruncationSpec(a_max=max(a_max, spec.initial_measure.support_bound), m_max=max(m_max, 2))
    traj = Trajectory(model=spec, trunc=trunc)
    for t in times:
        if spec.kind == "oriented":
            table = closed_form.oriented_table(spec, t, trunc.a_max, trunc.m_max)
            grid = ConcentrationGrid(table, 0.0, 0.0, trunc)
            mom = grid.arm_moments()
        else:
            table = closed_form.symmetric_table(spec, t, trunc.a_max, trunc.m_max)
            grid = ConcentrationGrid(table, 0.0, 0.0, trunc)
            mom = closed_form.series_moments(spec, t, rel_tol=moment_rel_tol)
        traj.times.append(t)
        traj.grids.append(grid)
        traj.moments.append(mom)
    return traj


def write_trajectory_csv(traj: Trajectory, csv_path, json_path=None) -> None:
    """Write snapshot tables as "t,a,m,c" plus a JSON sidecar.

    The sidecar (default: csv path with .json suffix) carries the moment
    curves, overflow accumulators, leak fractions, step statistics, and
    halt information, which do not fit the flat CSV schema.
    """
    closed_form.write_concentration_csv(
        csv_path, [(t, g.values) for t, g in zip(traj.times, traj.grids)]
    )
    if json_path is None:
        json_path = str(csv_path)
        json_path = json_path[:-4] + ".json" if json_path.endswith(".csv") else json_path + ".json"
    sidecar = {
        "kind": traj.model.kind,
        "case": traj.model.case_tag,
        "a_max": traj.trunc.a_max,
        "m_max": traj.trunc.m_max,
        "leak_tol": traj.trunc.leak_tol,
        "t": traj.times,
        "C": [m.mass for m in traj.moments],
        "A": [m.mean for m in traj.moments],
        "M2": [m.second_factorial for m in traj.moments],
        "overflow_mass": [g.overflow_mass for g in traj.grids],
        "overflow_arms": [g.overflow_arms for g in traj.grids],
        "leak": traj.leak(),
        "stats": {
            "accepted": traj.stats.accepted,
            "rejected": traj.stats.rejected,
            "rhs_evals": traj.stats.rhs_evals,
            "step_min": traj.stats.step_min if traj.stats.accepted else None,
            "step_max": traj.stats.step_max if traj.stats.accepted else None,
            "worst_negative": traj.stats.worst_negative,
        },
        "halted_at": traj.halted_at,
        "halted_reason": traj.halted_reason,
    }
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")
