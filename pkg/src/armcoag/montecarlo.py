"""Exact stochastic simulation of the finite-population merge dynamics.

n particles start as unit-size samples of the initial arm law rescaled
to a probability. With chi the original law's total mass, merge clocks
run at

  oriented   chi * a_i / n        per ordered pair (grabber i, target j)
  symmetric  chi * a_i a_j / n    per unordered pair {i, j}

so that chi * (state counts) / n estimates the kinetic concentrations at
the same time variable used by the closed forms, for any input law (the
quadratic scaling of the dynamics is baked into the rates; no separate
time dilation is needed).

Selection uses two integer Fenwick trees over the fixed particle slots:
one holding arm counts, one holding alive flags. The oriented target is
drawn uniformly among the other alive slots with one draw via a
substitution trick (draw a rank among N-1; on collision with the
grabber, take the last alive rank), which is exactly uniform. The
symmetric pair rejects grabber == target and redraws, matching the
unordered-pair intensity. All randomness flows through one PCG64
generator, so runs are reproducible byte for byte given (seed, n).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import measures
from .errors import ValidationError
from .measures import DiscreteMeasure, MomentSummary

__all__ = ["MCResult", "simulate", "write_mc_csv"]


class _Fenwick:
    """Prefix-sum tree over fixed slots with integer weights."""

    __slots__ = ("n", "tree", "total", "_top_bit")

    def __init__(self, weights):
        self.n = len(weights)
        tree = [0] * (self.n + 1)
        total = 0
        for i, w in enumerate(weights):
            tree[i + 1] += w
            total += w
        for i in range(1, self.n + 1):
            j = i + (i & -i)
            if j <= self.n:
                tree[j] += tree[i]
        self.tree = tree
        self.total = total
        self._top_bit = 1 << (self.n.bit_length())

    def update(self, i: int, delta: int) -> None:
        self.total += delta
        i += 1
        tree = self.tree
        n = self.n
        while i <= n:
            tree[i] += delta
            i += i & -i

    def find(self, r: int) -> int:
        """Slot index (0-based) whose cumulative weight interval holds r.

        Requires 0 <= r < total; zero-weight slots own empty intervals
        and are never returned.
        """
        pos = 0
        bit = self._top_bit
        tree = self.tree
        n = self.n
        while bit:
            nxt = pos + bit
            if nxt <= n and tree[nxt] <= r:
                pos = nxt
                r -= tree[nxt]
            bit >>= 1
        return pos


@dataclass
class MCResult:
    """Snapshots of one simulation run.

    states[k] is (arm counts, sizes, occupation counts) for the distinct
    states alive at times[k]; multiply counts by scale / n to get the
    concentration estimate.
    """

    kind: str
    n: int
    seed: int
    scale: float
    times: list[float] = field(default_factory=list)
    states: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=list)
    events: int = 0

    def table(self, k: int, a_max: int, m_max: int) -> np.ndarray:
        """Concentration estimate on a window; states outside are dropped."""
        a_u, m_u, cnt = self.states[k]
        out = np.zeros((a_max + 1, m_max))
        inside = (a_u <= a_max) & (m_u <= m_max)
        out[a_u[inside], m_u[inside] - 1] = self.scale * cnt[inside] / self.n
        return out

    def moments(self, k: int) -> MomentSummary:
        a_u, _, cnt = self.states[k]
        w = self.scale * cnt / self.n
        mass = float(w.sum())
        mean = float((a_u * w).sum())
        secfac = float((a_u * (a_u - 1.0) * w).sum())
        return MomentSummary(mass=mass, mean=mean, second_factorial=secfac, diff=mass - mean)


def simulate(
    kind: str,
    mu: DiscreteMeasure,
    n: int,
    t_end: float,
    seed: int,
    snapshot_times=None,
) -> MCResult:
    """Run the n-particle merge process to t_end and snapshot it.

    Snapshot times must be ascending within [0, t_end] (default: just
    t_end) and record the state immediately before any event landing at
    the same instant. Once no admissible pair remains the state is
    frozen and the remaining snapshots reuse it.
    """
    if kind not in ("oriented", "symmetric"):
        raise ValidationError(f"kind must be 'oriented' or 'symmetric', got {kind!r}")
    if not isinstance(n, int) or isinstance(n, bool) or n < 2:
        raise ValidationError(f"population must be an int >= 2, got {n!r}")
    if t_end < 0.0:
        raise ValidationError(f"t_end must be >= 0, got {t_end!r}")
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ValidationError(f"seed must be a nonnegative int, got {seed!r}")
    if snapshot_times is None:
        snapshot_times = [t_end]
    snapshot_times = [float(s) for s in snapshot_times]
    if any(s2 <= s1 for s1, s2 in zip(snapshot_times, snapshot_times[1:])):
        raise ValidationError("snapshot times must be strictly ascending")
    if snapshot_times and (snapshot_times[0] < 0.0 or snapshot_times[-1] > t_end):
        raise ValidationError("snapshot times must lie within [0, t_end]")

    mom = measures.moments(mu)
    chi = mom.mass
    rng = np.random.Generator(np.random.PCG64(seed))
    probs = mu.weights / chi
    counts = rng.multinomial(n, probs)
    arms = np.repeat(np.arange(len(probs), dtype=np.int64), counts)
    sizes = np.ones(n, dtype=np.int64)
    alive = np.ones(n, dtype=bool)

    arm_tree = _Fenwick([int(a) for a in arms])
    alive_tree = _Fenwick([1] * n)
    total_arms = int(arms.sum())
    total_sq = int((arms * arms).sum()) if kind == "symmetric" else 0
    n_alive = n

    result = MCResult(kind=kind, n=n, seed=seed, scale=chi)

    def record(at: float) -> None:
        idx = np.flatnonzero(alive)
        key = arms[idx] * np.int64(n + 1) + sizes[idx]
        uniq, cnt = np.unique(key, return_counts=True)
        result.times.append(at)
        result.states.append(
            (uniq // (n + 1), (uniq % (n + 1)).astype(np.int64), cnt.astype(np.int64))
        )

    t = 0.0
    snap_idx = 0
    while True:
        if kind == "oriented":
            rate = chi * total_arms * (n_alive - 1) / n
        else:
            rate = chi * (total_arms * total_arms - total_sq) / (2 * n)
        if rate > 0.0 and n_alive > 1:
            t_next = t + rng.exponential(1.0 / rate)
        else:
            t_next = math.inf
        horizon = min(t_next, t_end)
        while snap_idx < len(snapshot_times) and snapshot_times[snap_idx] <= horizon:
            record(snapshot_times[snap_idx])
            snap_idx += 1
        if t_next > t_end:
            break
        t = t_next

        if kind == "oriented":
            i = arm_tree.find(int(rng.integers(total_arms)))
            j = alive_tree.find(int(rng.integers(n_alive - 1)))
            if j == i:
                j = alive_tree.find(n_alive - 1)
        else:
            while True:
                i = arm_tree.find(int(rng.integers(total_arms)))
                j = arm_tree.find(int(rng.integers(total_arms)))
                if i != j:
                    break

        ai = int(arms[i])
        aj = int(arms[j])
        new_ai = ai + aj - (1 if kind == "oriented" else 2)
        arm_tree.update(i, new_ai - ai)
        arm_tree.update(j, -aj)
        alive_tree.update(j, -1)
        total_arms += new_ai - ai - aj
        if kind == "symmetric":
            total_sq += new_ai * new_ai - ai * ai - aj * aj
        arms[i] = new_ai
        arms[j] = 0
        sizes[i] += sizes[j]
        alive[j] = False
        n_alive -= 1
        result.events += 1
    return result


def write_mc_csv(result: MCResult, path) -> None:
    """Write snapshots as "t,a,m,c_hat,n,seed" (t ascending, then m, then a)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "a", "m", "c_hat", "n", "seed"])
        for t, (a_u, m_u, cnt) in zip(result.times, result.states):
            order = np.lexsort((a_u, m_u))
            for k in order:
                c_hat = result.scale * cnt[k] / result.n
                writer.writerow(
                    [
                        f"{t:.17g}",
                        int(a_u[k]),
                        int(m_u[k]),
                        f"{c_hat:.17g}",
                        result.n,
                        result.seed,
                    ]
                )
