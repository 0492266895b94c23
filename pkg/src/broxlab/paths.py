"""Sampling and exact piecewise-linear arithmetic for one-dimensional processes.

Every process in the package (Brownian motion, 3-d Bessel, squared Bessel of
dimension 0 and 2, drivers, environments) is carried by :class:`SamplePath`:
values on a strictly increasing knot grid, linearly interpolated in between.
Crossings, running extrema and exponential integrals are solved in closed form
on each linear segment, so the knot spacing is the single discretization
parameter anywhere downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DomainError, InvalidConfigError

__all__ = [
    "SamplePath",
    "SamplerConfig",
    "sample_brownian",
    "sample_bessel",
    "sq_bessel0_transition",
    "hitting_time",
    "oscillation_first_exceed",
    "reflect",
    "bessel_functionals",
    "argmin_on",
    "argmax_on",
    "min_on",
    "max_on",
    "last_at_or_above",
    "last_at_or_below",
    "first_at_or_below",
    "integral_exp",
    "write_csv",
    "read_csv",
]

# Stream tags used to derive independent generators from one seed.
_STREAM_RIGHT = 0
_STREAM_LEFT = 1


def _generator(seed, *stream: int) -> np.random.Generator:
    """Deterministic generator for (seed..., stream...). Streams are disjoint.

    `seed` may be an int or a tuple of ints (e.g. (base_seed, replicate)).
    """
    parts = seed if isinstance(seed, (tuple, list)) else (seed,)
    entropy = tuple(int(s) & 0xFFFFFFFFFFFFFFFF for s in parts) + tuple(
        int(s) for s in stream
    )
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


class SamplePath:
    """Piecewise-linear real path on a strictly increasing knot grid.

    Immutable after construction; the domain is [positions[0], positions[-1]]
    and evaluation between knots is linear interpolation.  A single-knot path
    is allowed (degenerate domain).
    """

    __slots__ = ("positions", "values")

    def __init__(self, positions, values, *, copy: bool = True, validate: bool = True):
        positions = np.array(positions, dtype=float, copy=copy)
        values = np.array(values, dtype=float, copy=copy)
        if validate:
            if positions.ndim != 1 or positions.shape != values.shape:
                raise InvalidConfigError("positions and values must be 1-d arrays of equal length")
            if positions.size == 0:
                raise InvalidConfigError("a path needs at least one knot")
            if not (np.all(np.isfinite(positions)) and np.all(np.isfinite(values))):
                raise InvalidConfigError("knots must be finite")
            if positions.size > 1 and not np.all(np.diff(positions) > 0.0):
                raise InvalidConfigError("knot positions must be strictly increasing")
        positions.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "values", values)

    def __setattr__(self, name, value):  # immutability guard
        raise AttributeError("SamplePath is immutable")

    @property
    def x_min(self) -> float:
        return float(self.positions[0])

    @property
    def x_max(self) -> float:
        return float(self.positions[-1])

    @property
    def n_knots(self) -> int:
        return int(self.positions.size)

    def contains(self, x: float) -> bool:
        return self.x_min <= x <= self.x_max

    def __call__(self, x):
        """Evaluate by linear interpolation; raises DomainError outside."""
        xa = np.asarray(x, dtype=float)
        if np.any(xa < self.x_min) or np.any(xa > self.x_max):
            raise DomainError(
                f"evaluation at {x} outside domain [{self.x_min}, {self.x_max}]"
            )
        out = np.interp(xa, self.positions, self.values)
        return float(out) if np.isscalar(x) or xa.ndim == 0 else out

    def restrict(self, lo: float, hi: float) -> "SamplePath":
        """Sub-path on [lo, hi] with interpolated end knots."""
        if lo > hi:
            raise DomainError(f"empty restriction [{lo}, {hi}]")
        if not (self.contains(lo) and self.contains(hi)):
            raise DomainError(f"[{lo}, {hi}] not inside [{self.x_min}, {self.x_max}]")
        i = np.searchsorted(self.positions, lo, side="right")
        j = np.searchsorted(self.positions, hi, side="left")
        xs = np.concatenate(([lo], self.positions[i:j], [hi]))
        vs = np.concatenate(([self(lo)], self.values[i:j], [self(hi)]))
        if xs.size >= 2 and xs[-1] == xs[-2]:  # hi coincides with a knot
            xs, vs = xs[:-1], vs[:-1]
        if xs.size >= 2 and xs[0] == xs[1]:
            xs, vs = xs[1:], vs[1:]
        return SamplePath(xs, vs, copy=False, validate=False)

    def equals(self, other: "SamplePath") -> bool:
        """Bitwise equality of knots."""
        return np.array_equal(self.positions, other.positions) and np.array_equal(
            self.values, other.values
        )

    def __repr__(self) -> str:
        return (
            f"SamplePath(n_knots={self.n_knots}, domain=[{self.x_min:g}, {self.x_max:g}])"
        )


@dataclass(frozen=True)
class SamplerConfig:
    """Knot spacing, seed and horizon for a process sampler.

    `step` is the knot spacing in the process's own time/space variable.  A
    zero horizon is allowed and yields the degenerate single-knot path.
    """

    step: float
    seed: int
    horizon: float

    def __post_init__(self):
        if not (self.step > 0.0) or not math.isfinite(self.step):
            raise InvalidConfigError(f"step must be positive and finite, got {self.step}")
        if self.horizon < 0.0 or not math.isfinite(self.horizon):
            raise InvalidConfigError(f"horizon must be >= 0 and finite, got {self.horizon}")

    @property
    def n_steps(self) -> int:
        if self.horizon == 0.0:
            return 0
        return max(1, int(math.ceil(self.horizon / self.step - 1e-12)))


def brownian_increments(gen: np.random.Generator, n: int, step: float) -> np.ndarray:
    """n Gaussian increments of variance `step` from an explicit generator."""
    return gen.standard_normal(n) * math.sqrt(step)


def sample_brownian(config: SamplerConfig, two_sided: bool = False) -> SamplePath:
    """Gaussian random walk path with variance `step` per knot, value 0 at 0.

    With ``two_sided`` the negative side is an independent walk drawn from its
    own seed stream, so the positive side is bitwise identical whether or not
    the negative side exists.
    """
    n = config.n_steps
    step = config.step
    right = _generator(config.seed, _STREAM_RIGHT)
    pos_r = step * np.arange(n + 1)
    val_r = np.concatenate(([0.0], np.cumsum(brownian_increments(right, n, step))))
    if not two_sided:
        return SamplePath(pos_r, val_r, copy=False, validate=False)
    left = _generator(config.seed, _STREAM_LEFT)
    val_l = np.concatenate(([0.0], np.cumsum(brownian_increments(left, n, step))))
    positions = np.concatenate((-pos_r[::-1], pos_r[1:]))
    values = np.concatenate((val_l[::-1], val_r[1:]))
    return SamplePath(positions, values, copy=False, validate=False)


def sq_bessel0_transition(
    z: np.ndarray, dt: float, gen: np.random.Generator
) -> np.ndarray:
    """One exact transition of the squared Bessel process of dimension 0.

    Given the current values ``z`` (vectorized), the next value is a
    Poisson(z/2dt)-mixed Gamma(shape=N, scale=2dt): zero stays zero, the state
    hits exactly 0 with probability exp(-z/2dt).
    """
    z = np.asarray(z, dtype=float)
    lam = z / (2.0 * dt)
    n = gen.poisson(lam)
    out = np.zeros_like(z)
    alive = n > 0
    if np.any(alive):
        out[alive] = gen.gamma(shape=n[alive], scale=2.0 * dt)
    return out


def sample_bessel(kind: str, start: float, config: SamplerConfig) -> SamplePath:
    """Sample a Bessel-type path with exact marginals at the knots.

    kind:
      * ``bessel3`` - Euclidean norm of three independent Gaussian walks,
        one of them offset by `start`.
      * ``sq_bessel_dim2`` - sum of two squared Gaussian walks (started at
        sqrt(start) in the first coordinate).
      * ``sq_bessel_dim0`` - exact Poisson-mixed-gamma transitions, absorbing
        at 0.
    """
    if start < 0.0:
        raise DomainError(f"start must be >= 0, got {start}")
    n = config.n_steps
    step = config.step
    pos = step * np.arange(n + 1)
    gen = _generator(config.seed, _STREAM_RIGHT)
    if kind == "bessel3":
        w = np.cumsum(gen.standard_normal((3, n)) * math.sqrt(step), axis=1)
        w = np.concatenate((np.zeros((3, 1)), w), axis=1)
        w[0] += start
        vals = np.sqrt(np.sum(w * w, axis=0))
    elif kind == "sq_bessel_dim2":
        w = np.cumsum(gen.standard_normal((2, n)) * math.sqrt(step), axis=1)
        w = np.concatenate((np.zeros((2, 1)), w), axis=1)
        w[0] += math.sqrt(start)
        vals = np.sum(w * w, axis=0)
    elif kind == "sq_bessel_dim0":
        vals = np.empty(n + 1)
        vals[0] = start
        z = np.array([start])
        for i in range(n):
            if z[0] == 0.0:
                vals[i + 1 :] = 0.0
                break
            z = sq_bessel0_transition(z, step, gen)
            vals[i + 1] = z[0]
    else:
        raise InvalidConfigError(f"unknown Bessel kind: {kind!r}")
    return SamplePath(pos, vals, copy=False, validate=False)


# ---------------------------------------------------------------------------
# Exact segment functionals
# ---------------------------------------------------------------------------


def _start_arrays(path: SamplePath, from_: float):
    """Knot arrays from `from_` on, with an interpolated virtual start knot."""
    if not path.contains(from_):
        raise DomainError(f"start {from_} outside domain [{path.x_min}, {path.x_max}]")
    j = np.searchsorted(path.positions, from_, side="right")
    xs = np.concatenate(([from_], path.positions[j:]))
    vs = np.concatenate(([path(from_)], path.values[j:]))
    return xs, vs


def hitting_time(path: SamplePath, level: float, from_: float) -> Optional[float]:
    """Exact first position >= `from_` where the path equals `level`.

    Returns None when the level is never reached within the domain.
    """
    xs, vs = _start_arrays(path, from_)
    d = vs - level
    if d[0] == 0.0:
        return float(xs[0])
    if xs.size == 1:
        return None
    cross = d[:-1] * d[1:] <= 0.0
    if not cross.any():
        return None
    i = int(np.argmax(cross))
    if d[i + 1] == 0.0:
        return float(xs[i + 1])
    slope = (vs[i + 1] - vs[i]) / (xs[i + 1] - xs[i])
    return float(xs[i] + (level - vs[i]) / slope)


def oscillation_first_exceed(
    path: SamplePath, from_: float, h: float, mode: str = "above_running_min"
) -> Optional[float]:
    """Exact first x >= `from_` where the oscillation reaches `h`.

    ``above_running_min`` tracks value - running minimum over [from_, x];
    ``below_running_max`` tracks running maximum - value.  Exact on linear
    segments: the crossing can only happen while moving away from the running
    extremum, where the deficit is linear in x.
    """
    if not (h > 0.0):
        raise DomainError(f"oscillation threshold must be > 0, got {h}")
    xs, vs = _start_arrays(path, from_)
    if xs.size == 1:
        return None
    if mode == "above_running_min":
        run = np.minimum.accumulate(vs)
        qual = vs[1:] - run[:-1] >= h
        if not qual.any():
            return None
        i = int(np.argmax(qual))
        target = run[i] + h
    elif mode == "below_running_max":
        run = np.maximum.accumulate(vs)
        qual = run[:-1] - vs[1:] >= h
        if not qual.any():
            return None
        i = int(np.argmax(qual))
        target = run[i] - h
    else:
        raise InvalidConfigError(f"unknown oscillation mode: {mode!r}")
    slope = (vs[i + 1] - vs[i]) / (xs[i + 1] - xs[i])
    return float(xs[i] + (target - vs[i]) / slope)


def reflect(path: SamplePath) -> SamplePath:
    """Mirror the path about 0: reflect(reflect(p)) is bitwise p."""
    return SamplePath(
        -path.positions[::-1], path.values[::-1].copy(), copy=False, validate=False
    )


def _interval_arrays(path: SamplePath, lo: float, hi: float):
    sub = path.restrict(lo, hi)
    return sub.positions, sub.values


def argmin_on(path: SamplePath, lo: float, hi: float) -> float:
    """Position of the minimum on [lo, hi]; ties broken by smallest position."""
    xs, vs = _interval_arrays(path, lo, hi)
    return float(xs[int(np.argmin(vs))])


def argmax_on(path: SamplePath, lo: float, hi: float) -> float:
    """Position of the maximum on [lo, hi]; ties broken by smallest position."""
    xs, vs = _interval_arrays(path, lo, hi)
    return float(xs[int(np.argmax(vs))])


def min_on(path: SamplePath, lo: float, hi: float) -> float:
    """Minimum value on [lo, hi]; +inf for a reversed (empty) interval."""
    if lo > hi:
        return math.inf
    _, vs = _interval_arrays(path, lo, hi)
    return float(np.min(vs))


def max_on(path: SamplePath, lo: float, hi: float) -> float:
    """Maximum value on [lo, hi]; -inf for a reversed (empty) interval."""
    if lo > hi:
        return -math.inf
    _, vs = _interval_arrays(path, lo, hi)
    return float(np.max(vs))


def last_at_or_above(
    path: SamplePath, lo: float, hi: float, level: float
) -> Optional[float]:
    """Exact last x in [lo, hi] with value >= level; None if the set is empty."""
    xs, vs = _interval_arrays(path, lo, hi)
    d = vs - level
    if d[-1] >= 0.0:
        return float(xs[-1])
    above = d >= 0.0
    if not above.any():
        return None
    k = int(xs.size - 1 - np.argmax(above[::-1]))
    # Value crosses the level downwards somewhere in (xs[k], xs[k+1]).
    slope = (vs[k + 1] - vs[k]) / (xs[k + 1] - xs[k])
    return float(xs[k] + (level - vs[k]) / slope)


def last_at_or_below(
    path: SamplePath, lo: float, hi: float, level: float
) -> Optional[float]:
    """Exact last x in [lo, hi] with value <= level; None if the set is empty."""
    xs, vs = _interval_arrays(path, lo, hi)
    d = vs - level
    if d[-1] <= 0.0:
        return float(xs[-1])
    below = d <= 0.0
    if not below.any():
        return None
    k = int(xs.size - 1 - np.argmax(below[::-1]))
    slope = (vs[k + 1] - vs[k]) / (xs[k + 1] - xs[k])
    return float(xs[k] + (level - vs[k]) / slope)


def first_at_or_below(
    path: SamplePath, lo: float, hi: float, level: float
) -> Optional[float]:
    """Exact first x in [lo, hi] with value <= level; None if the set is empty."""
    xs, vs = _interval_arrays(path, lo, hi)
    d = vs - level
    if d[0] <= 0.0:
        return float(xs[0])
    below = d <= 0.0
    if not below.any():
        return None
    k = int(np.argmax(below))
    slope = (vs[k] - vs[k - 1]) / (xs[k] - xs[k - 1])
    return float(xs[k - 1] + (level - vs[k - 1]) / slope)


def bessel_functionals(path: SamplePath, v: float):
    """Hitting, drawdown-from-future-minimum and last-contact functionals.

    For a nonnegative path R returns ``(tau, zeta, rho)``:

    * tau  - first x with R(x) >= v,
    * zeta - first x where R(x) minus the future minimum inf_{y>=x} R(y)
      (over the sampled domain) reaches v,
    * rho  - last x <= zeta where that deficit is exactly 0.

    The future minimum is computed by a right-to-left sweep over the sampled
    domain only, so results are horizon-truncated: None marks functionals the
    domain is too short to determine.
    """
    if np.any(path.values < 0.0):
        raise DomainError("bessel_functionals requires a nonnegative path")
    if not (v > 0.0):
        raise DomainError(f"level must be > 0, got {v}")
    xs, vs = path.positions, path.values
    if vs[0] >= v:
        tau = float(xs[0])
    else:
        tau = hitting_time(path, v, path.x_min)

    fut = np.minimum.accumulate(vs[::-1])[::-1]
    deficit = vs - fut
    zeta: Optional[float] = None
    if deficit[0] >= v:
        zeta = float(xs[0])
    elif xs.size > 1:
        qual = deficit[1:] >= v
        if qual.any():
            i = int(np.argmax(qual))
            # Crossing lies on the ascending segment (xs[i], xs[i+1]].
            slope = (vs[i + 1] - vs[i]) / (xs[i + 1] - xs[i])
            zeta = float(xs[i] + (fut[i + 1] + v - vs[i]) / slope)

    rho: Optional[float] = None
    if zeta is not None:
        zero = (deficit == 0.0) & (xs <= zeta)
        if zero.any():
            j = int(xs.size - 1 - np.argmax(zero[::-1]))
            if j == xs.size - 1 or fut[j + 1] <= vs[j]:
                rho = float(xs[j])
            else:
                slope = (vs[j + 1] - vs[j]) / (xs[j + 1] - xs[j])
                rho = float(xs[j] + (fut[j + 1] - vs[j]) / slope)
    return tau, zeta, rho


# ---------------------------------------------------------------------------
# Exact exponential integrals
# ---------------------------------------------------------------------------


def segment_exp_integrals(
    x0: np.ndarray, x1: np.ndarray, w0: np.ndarray, w1: np.ndarray, sign: float = 1.0
) -> np.ndarray:
    """Exact integral of exp(sign*w(x)) over linear segments w: (x0,w0)->(x1,w1).

    Uses expm1 so nearly-flat segments keep full relative precision.
    """
    dx = x1 - x0
    dw = sign * (w1 - w0)
    base = np.exp(sign * np.asarray(w0, dtype=float))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(dw == 0.0, dx, dx * np.expm1(dw) / np.where(dw == 0.0, 1.0, dw))
    return base * ratio


def integral_exp(
    path: SamplePath, lo: float, hi: float, sign: float = 1.0, shift: float = 0.0
) -> float:
    """Exact integral of exp(sign*W(x) + shift) over [lo, hi].

    Closed form on each linear segment, accumulated with compensated
    summation.  Reversed intervals (lo > hi) return 0.0 by the empty-interval
    convention; callers that need a flag should test lo > hi themselves.
    """
    if sign == 0.0:
        raise InvalidConfigError("sign must be nonzero")
    if lo > hi:
        return 0.0
    xs, vs = _interval_arrays(path, lo, hi)
    if xs.size < 2:
        return 0.0
    peak = float(np.max(sign * vs)) + shift
    if peak > 700.0:
        raise OverflowError(
            f"integral exponent peak {peak:.1f} too large; re-shift the integrand"
        )
    ws = vs + shift / sign  # fold the constant into the exponent
    parts = segment_exp_integrals(xs[:-1], xs[1:], ws[:-1], ws[1:], sign)
    return float(math.fsum(parts.tolist()))


# ---------------------------------------------------------------------------
# CSV interchange
# ---------------------------------------------------------------------------

_CSV_HEADER = "position,value"


def write_csv(path: SamplePath, file) -> None:
    """Write the knot table as CSV with header ``position,value``."""
    own = isinstance(file, (str, bytes))
    fh = open(file, "w", encoding="utf-8") if own else file
    try:
        fh.write(_CSV_HEADER + "\n")
        for x, w in zip(path.positions, path.values):
            fh.write(f"{x!r},{w!r}\n")
    finally:
        if own:
            fh.close()


def read_csv(file) -> SamplePath:
    """Read a knot table written by :func:`write_csv`; validates monotonicity."""
    own = isinstance(file, (str, bytes))
    fh = open(file, "r", encoding="utf-8") if own else file
    try:
        header = fh.readline().strip()
        if header != _CSV_HEADER:
            raise InvalidConfigError(f"bad path CSV header: {header!r}")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    finally:
        if own:
            fh.close()
    if not rows:
        raise InvalidConfigError("empty path CSV")
    positions = np.array([float(r[0]) for r in rows])
    values = np.array([float(r[1]) for r in rows])
    return SamplePath(positions, values, copy=False)  # validates monotonicity
