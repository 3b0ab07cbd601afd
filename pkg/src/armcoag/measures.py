"""Discrete measures on the nonnegative integers.

The whole library manipulates arm-count laws as finite nonnegative weight
vectors indexed by a = 0, 1, 2, ... Infinite-support families (Poisson,
negative binomial) are truncated at construction time with the discarded
tail mass recorded, so downstream error budgets stay auditable.

Convolution is direct O(K*K) summation, never transform-based: it keeps
entries exactly nonnegative and is plenty fast at the sizes we use.
"""

from __future__ import annotations

import csv
import json
import math
import threading
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .errors import NormalizationError, ValidationError

__all__ = [
    "DiscreteMeasure",
    "MomentSummary",
    "arm_shift",
    "binomial_arms",
    "borel",
    "convolution_power",
    "convolve",
    "dirac",
    "generating_function",
    "load_csv",
    "load_json",
    "make_measure",
    "moments",
    "negative_binomial_arms",
    "poisson_arms",
    "save_csv",
    "save_json",
]


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Nonnegative weights on {0, 1, 2, ...} with trailing zeros trimmed.

    ``weights[a]`` is the weight at integer a. ``tail_mass`` records mass
    discarded when an infinite-support family was truncated (0.0 for
    exactly represented measures). Instances are immutable; the weights
    array is marked read-only and safe to share between threads.
    """

    weights: np.ndarray
    tail_mass: float = 0.0

    @property
    def support_bound(self) -> int:
        return len(self.weights) - 1

    def cache_key(self) -> bytes:
        return self.weights.tobytes()


@dataclass(frozen=True)
class MomentSummary:
    """First moments of a measure or concentration state.

    mass:             total weight
    mean:             first moment (mean arm count, unnormalized)
    second_factorial: sum of a*(a-1) times the weight at a
    diff:             mass - mean, exactly as computed in doubles
    """

    mass: float
    mean: float
    second_factorial: float
    diff: float


def make_measure(weights, tail_mass: float = 0.0) -> DiscreteMeasure:
    """Build a measure from a weight sequence, trimming trailing zeros.

    Rejects empty, all-zero, negative or non-finite input; the error
    message names the first offending index. Accepted weights are stored
    bit-exactly.
    """
    arr = np.asarray(weights, dtype=np.float64)
    if arr.ndim != 1:
        raise ValidationError("weights must be a one-dimensional sequence")
    if arr.size == 0:
        raise ValidationError("weights must be nonempty")
    bad = np.nonzero(~np.isfinite(arr))[0]
    if bad.size:
        raise ValidationError(f"non-finite weight at index {bad[0]}")
    neg = np.nonzero(arr < 0.0)[0]
    if neg.size:
        raise ValidationError(f"negative weight at index {neg[0]} ({arr[neg[0]]!r})")
    nz = np.nonzero(arr > 0.0)[0]
    if nz.size == 0:
        raise ValidationError("all weights are zero; a measure needs some mass")
    arr = np.array(arr[: nz[-1] + 1], dtype=np.float64)  # own the storage
    arr.setflags(write=False)
    return DiscreteMeasure(arr, float(tail_mass))


def dirac(k: int, mass: float = 1.0) -> DiscreteMeasure:
    """Point mass at integer k with the given weight."""
    if k < 0 or k != int(k):
        raise ValidationError(f"atom index must be a nonnegative integer, got {k!r}")
    w = np.zeros(int(k) + 1)
    w[int(k)] = mass
    return make_measure(w)


def convolve(mu: DiscreteMeasure, rho: DiscreteMeasure) -> DiscreteMeasure:
    """Additive convolution: (mu * rho)(k) = sum_j mu(j) rho(k - j).

    Entries too small for double precision come out as exact zeros; they
    are far below every tolerance in this library. The recorded tail_mass
    is the first-order sum of the operands' truncation tails.
    """
    out = np.convolve(mu.weights, rho.weights)
    if out[-1] == 0.0:
        # Top entry underflowed (product of two tiny supports); retrim so the
        # support_bound invariant holds.
        nz = np.nonzero(out > 0.0)[0]
        if nz.size == 0:
            raise ValidationError("convolution underflowed to the zero vector")
        out = out[: nz[-1] + 1]
    out.setflags(write=False)
    return DiscreteMeasure(out, mu.tail_mass + rho.tail_mass)


# Cache of convolution-power ladders, keyed by the exact bytes of the base
# weights. Each value is the list [mu, mu*mu, mu*mu*mu, ...], extended on
# demand. Growing the ladder runs the same convolve sequence a cold call
# would, so cached and uncached results are bit-identical.
_POWER_LADDERS: dict[bytes, list[DiscreteMeasure]] = {}
_POWER_LOCK = threading.Lock()


def convolution_power(mu: DiscreteMeasure, m: int) -> DiscreteMeasure:
    """m-fold convolution of mu with itself, m >= 1.

    Computed as m - 1 successive convolve calls (memoized per base
    measure). The zeroth power is rejected: no caller needs it and
    defining it silently as a unit mass would mask bugs.
    """
    if not isinstance(m, (int, np.integer)) or isinstance(m, bool):
        raise ValidationError(f"power must be an integer, got {m!r}")
    if m < 1:
        raise ValidationError(f"power must be >= 1, got {m}")
    key = mu.cache_key()
    with _POWER_LOCK:
        ladder = _POWER_LADDERS.get(key)
        if ladder is None:
            ladder = [mu]
            _POWER_LADDERS[key] = ladder
        while len(ladder) < m:
            ladder.append(convolve(ladder[-1], mu))
        return ladder[m - 1]


def moments(mu: DiscreteMeasure) -> MomentSummary:
    """Exact finite sums over the support: mass, mean, sum a(a-1)w, mass-mean."""
    w = mu.weights
    a = np.arange(len(w), dtype=np.float64)
    mass = float(w.sum())
    mean = float((a * w).sum())
    secfac = float((a * (a - 1.0) * w).sum())
    return MomentSummary(mass=mass, mean=mean, second_factorial=secfac, diff=mass - mean)


def arm_shift(mu: DiscreteMeasure) -> DiscreteMeasure:
    """Size-biased downshift: result(a) = (a+1) * mu(a+1).

    Requires mean(mu) = 1 (within 1e-9), which makes the result a
    probability measure. This is the law of the remaining arms of a
    particle picked proportionally to its arm count, after one arm is
    consumed. For other means, rescale first (see
    closed_form.normalize_model) so that time units stay consistent.
    """
    m = moments(mu)
    if abs(m.mean - 1.0) > 1e-9:
        raise NormalizationError(
            f"arm_shift needs a unit-mean measure, got mean {m.mean!r}; "
            "rescale the model (normalize_model) and dilate time instead"
        )
    if mu.support_bound < 1:
        raise NormalizationError("arm_shift needs some mass at indices >= 1")
    a = np.arange(1, len(mu.weights), dtype=np.float64)
    return make_measure(a * mu.weights[1:], tail_mass=mu.tail_mass)


def generating_function(mu: DiscreteMeasure, x: float) -> float:
    """Horner evaluation of sum_a x**a * w[a] for x in [0, 1]."""
    if not (0.0 <= x <= 1.0):
        raise ValidationError(f"generating function argument must lie in [0, 1], got {x!r}")
    acc = 0.0
    for w in mu.weights[::-1]:
        acc = acc * x + w
    return float(acc)


def borel(lam: float, m: int) -> float:
    """(lam*m)**(m-1) * exp(-lam*m) / m!, evaluated in log space.

    This is the total-progeny law of a Poisson(lam) branching process.
    lam = 0 degenerates to a unit mass at m = 1.
    """
    if not (0.0 <= lam <= 1.0):
        raise ValidationError(f"borel parameter must lie in [0, 1], got {lam!r}")
    if m < 1 or m != int(m):
        raise ValidationError(f"borel index must be a positive integer, got {m!r}")
    m = int(m)
    if lam == 0.0:
        return 1.0 if m == 1 else 0.0
    return float(math.exp((m - 1) * math.log(lam * m) - lam * m - gammaln(m + 1)))


def binomial_arms(n: int, p: float | None = None) -> DiscreteMeasure:
    """Binomial(n, p) weights; p defaults to 1/n, which gives unit mean."""
    if n < 1 or n != int(n):
        raise ValidationError(f"binomial count must be a positive integer, got {n!r}")
    n = int(n)
    if p is None:
        p = 1.0 / n
    if not (0.0 < p < 1.0):
        raise ValidationError(f"binomial probability must lie in (0, 1), got {p!r}")
    w = [math.comb(n, a) * p**a * (1.0 - p) ** (n - a) for a in range(n + 1)]
    return make_measure(w)


def poisson_arms(rate: float, bound: int, tail_tol: float = 1e-12) -> DiscreteMeasure:
    """Poisson(rate) truncated at the given support bound.

    The discarded tail mass must not exceed tail_tol; it is recorded on
    the returned measure so downstream reports can account for it.
    """
    if rate <= 0.0 or not math.isfinite(rate):
        raise ValidationError(f"poisson rate must be positive and finite, got {rate!r}")
    if bound < 1 or bound != int(bound):
        raise ValidationError(f"truncation bound must be a positive integer, got {bound!r}")
    bound = int(bound)
    w = np.empty(bound + 1)
    w[0] = math.exp(-rate)
    for a in range(bound):
        w[a + 1] = w[a] * rate / (a + 1)
    tail = max(0.0, 1.0 - float(w.sum()))
    if tail > tail_tol:
        raise ValidationError(
            f"poisson truncation at {bound} leaves tail mass {tail:.3e} > {tail_tol:.3e};"
            " raise the bound or loosen the tolerance"
        )
    return make_measure(w, tail_mass=tail)


def negative_binomial_arms(
    r: float, p: float, bound: int, tail_tol: float = 1e-12
) -> DiscreteMeasure:
    """Negative binomial weights gamma(r+a)/(a! gamma(r)) p**r (1-p)**a, truncated.

    Mean is r(1-p)/p. Same truncation contract as poisson_arms.
    """
    if r <= 0.0 or not math.isfinite(r):
        raise ValidationError(f"negative binomial shape must be positive, got {r!r}")
    if not (0.0 < p < 1.0):
        raise ValidationError(f"negative binomial probability must lie in (0, 1), got {p!r}")
    if bound < 1 or bound != int(bound):
        raise ValidationError(f"truncation bound must be a positive integer, got {bound!r}")
    bound = int(bound)
    w = np.empty(bound + 1)
    w[0] = p**r
    for a in range(bound):
        w[a + 1] = w[a] * (r + a) / (a + 1) * (1.0 - p)
    tail = max(0.0, 1.0 - float(w.sum()))
    if tail > tail_tol:
        raise ValidationError(
            f"negative binomial truncation at {bound} leaves tail mass {tail:.3e} > "
            f"{tail_tol:.3e}; raise the bound or loosen the tolerance"
        )
    return make_measure(w, tail_mass=tail)


def save_json(mu: DiscreteMeasure, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(
            {"weights": [float(w) for w in mu.weights], "tail_mass": float(mu.tail_mass)},
            fh,
        )
        fh.write("\n")


def load_json(path) -> DiscreteMeasure:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict) or "weights" not in obj:
        raise ValidationError(f"{path}: expected an object with a 'weights' array")
    extra = set(obj) - {"weights", "tail_mass"}
    if extra:
        raise ValidationError(f"{path}: unknown keys {sorted(extra)}")
    return make_measure(obj["weights"], tail_mass=float(obj.get("tail_mass", 0.0)))


def save_csv(mu: DiscreteMeasure, path) -> None:
    """Two-column CSV (index, weight). tail_mass is not represented here;
    use JSON when the truncation record matters."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "weight"])
        for a, w in enumerate(mu.weights):
            writer.writerow([a, f"{w:.17g}"])


def load_csv(path) -> DiscreteMeasure:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["index", "weight"]:
        raise ValidationError(f"{path}: expected header 'index,weight'")
    weights: dict[int, float] = {}
    for row in rows[1:]:
        if not row:
            continue
        idx, val = int(row[0]), float(row[1])
        if idx < 0:
            raise ValidationError(f"{path}: negative index {idx}")
        weights[idx] = val
    if not weights:
        raise ValidationError(f"{path}: no data rows")
    arr = np.zeros(max(weights) + 1)
    for idx, val in weights.items():
        arr[idx] = val
    return make_measure(arr)
