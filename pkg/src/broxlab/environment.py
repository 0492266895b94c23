"""Deterministic analysis of a sampled two-sided environment.

An :class:`Environment` holds one piecewise-linear path per side of the
origin (the left side stores the mirrored path, so both sides live on
[0, x_max] with value 0 at 0) plus per-side sampler state for reproducible
lazy extension.  On top of it sit the valley decomposition (nested first
points where the oscillation above the running minimum reaches a depth
threshold, their bottoms and steep back walls), the geometric regularity
events used to condition experiments, exact exponential integrals, the
ladder of successive valley bottoms and the localization target intervals.

All point operations are exact on linear segments; a lazy-extension budget
turns "not found yet" into an explicit truncation flag, never an exception,
so downstream event evaluation can distinguish false from unknown.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DomainError, InvalidConfigError
from .paths import (
    SamplePath,
    argmax_on,
    argmin_on,
    brownian_increments,
    first_at_or_below,
    hitting_time,
    integral_exp,
    last_at_or_above,
    last_at_or_below,
    max_on,
    min_on,
    oscillation_first_exceed,
    _generator,
)

__all__ = [
    "Environment",
    "Thresholds",
    "thresholds_from_constants",
    "constants_from_c",
    "ValleyDecomposition",
    "GammaReport",
    "LadderSequence",
    "valley_sequence",
    "a_point",
    "plus_valley",
    "decompose",
    "gamma_events",
    "exp_integral",
    "four_integrals",
    "ladder_sequence",
    "localization_sets",
    "LADDER_BASE_HEIGHT",
]

_SIDES = ("right", "left")
_STREAM_ENV = {"right": 10, "left": 11}

# First rung threshold of the ladder recursion.
LADDER_BASE_HEIGHT = 2.0


class Environment:
    """Two-sided environment with reproducible per-side lazy extension.

    Both sides are stored as one-sided paths on [0, x_max] with value 0 at
    the origin; the left side is the time-reversed environment.  Extension
    appends increments from the side's own generator, so existing knots are
    preserved bitwise and the realized path does not depend on the chunking
    of extension requests.
    """

    def __init__(
        self,
        right: SamplePath,
        left: SamplePath,
        *,
        step: float = 0.0,
        generators: Optional[dict] = None,
        extension_budget: int = 1_000_000,
        max_knots_per_side: int = 2_000_000,
    ):
        for name, p in (("right", right), ("left", left)):
            if p.x_min != 0.0 or p.values[0] != 0.0:
                raise InvalidConfigError(f"{name} side must start at (0, 0)")
        self._paths = {"right": right, "left": left}
        self.step = float(step)
        self._generators = generators or {}
        self.extension_budget = int(extension_budget)
        self.max_knots_per_side = int(max_knots_per_side)

    @classmethod
    def from_seed(
        cls,
        seed,
        step: float,
        horizon: float = 1.0,
        extension_budget: int = 1_000_000,
        max_knots_per_side: int = 2_000_000,
    ) -> "Environment":
        """Sample both sides as Gaussian walks from disjoint seed streams."""
        if step <= 0.0:
            raise InvalidConfigError(f"step must be positive, got {step}")
        gens = {s: _generator(seed, _STREAM_ENV[s]) for s in _SIDES}
        n = max(1, int(math.ceil(horizon / step - 1e-12))) if horizon > 0 else 0
        paths = {}
        for s in _SIDES:
            vals = np.concatenate(
                ([0.0], np.cumsum(brownian_increments(gens[s], n, step)))
            )
            paths[s] = SamplePath(step * np.arange(n + 1), vals, copy=False, validate=False)
        return cls(
            paths["right"],
            paths["left"],
            step=step,
            generators=gens,
            extension_budget=extension_budget,
            max_knots_per_side=max_knots_per_side,
        )

    @classmethod
    def from_paths(cls, right: SamplePath, left: Optional[SamplePath] = None) -> "Environment":
        """Deterministic environment from explicit paths (no extension possible)."""
        if left is None:
            left = SamplePath([0.0], [0.0])
        return cls(right, left)

    def side(self, side: str) -> SamplePath:
        if side not in _SIDES:
            raise InvalidConfigError(f"side must be 'right' or 'left', got {side!r}")
        return self._paths[side]

    @property
    def right(self) -> SamplePath:
        return self._paths["right"]

    @property
    def left(self) -> SamplePath:
        return self._paths["left"]

    def value(self, x: float) -> float:
        """Environment value at a signed coordinate."""
        return self.right(x) if x >= 0.0 else self.left(-x)

    def two_sided_path(self) -> SamplePath:
        """The current environment as one path on [-left.x_max, right.x_max]."""
        l, r = self.left, self.right
        positions = np.concatenate((-l.positions[::-1], r.positions[1:]))
        values = np.concatenate((l.values[::-1], r.values[1:]))
        return SamplePath(positions, values, copy=False, validate=False)

    def can_extend(self, side: str) -> bool:
        return side in self._generators

    def extend(self, side: str, n_knots: int) -> bool:
        """Append n_knots increments on one side; False if not extensible."""
        if side not in self._generators or n_knots <= 0:
            return False
        p = self.side(side)
        n_knots = min(n_knots, self.max_knots_per_side - p.n_knots)
        if n_knots <= 0:
            return False
        inc = brownian_increments(self._generators[side], n_knots, self.step)
        new_pos = p.x_max + self.step * np.arange(1, n_knots + 1)
        positions = np.concatenate((p.positions, new_pos))
        values = np.concatenate((p.values, p.values[-1] + np.cumsum(inc)))
        self._paths[side] = SamplePath(positions, values, copy=False, validate=False)
        return True


class _Allowance:
    """Per-request extension budget, in knots."""

    def __init__(self, env: Environment):
        self.env = env
        self.remaining = env.extension_budget

    def grow(self, side: str) -> bool:
        """Roughly double the side's domain; False once the budget is spent."""
        n = self.env.side(side).n_knots
        chunk = min(max(1024, n), self.remaining)
        if chunk <= 0:
            return False
        if not self.env.extend(side, chunk):
            return False
        self.remaining -= chunk
        return True


def _scan_oscillation(env, side, from_, h, allowance, mode="above_running_min"):
    while True:
        res = oscillation_first_exceed(env.side(side), from_, h, mode)
        if res is not None:
            return res
        if not allowance.grow(side):
            return None


def _scan_hitting(env, side, level, from_, allowance):
    while True:
        res = hitting_time(env.side(side), level, from_)
        if res is not None:
            return res
        if not allowance.grow(side):
            return None


# ---------------------------------------------------------------------------
# Threshold bookkeeping
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Thresholds:
    """Effective rise thresholds for a decomposition at height parameter v.

    depth - oscillation rise that closes a shallow valley (bottoms sequence),
    wall  - rise above a bottom that marks its steep back wall,
    tall  - oscillation rise that closes the enclosing taller valley.
    """

    depth: float
    wall: float
    tall: float

    def __post_init__(self):
        if not (self.depth > 0.0 and self.wall > 0.0 and self.tall > 0.0):
            raise InvalidConfigError(
                f"thresholds must be positive, got {self.depth}, {self.wall}, {self.tall}"
            )

    @property
    def margin(self) -> float:
        """Depth margin separating the tall valley edge from the shallow rise."""
        return self.tall - self.depth


def constants_from_c(c: float) -> tuple:
    """The coupled constants (2c+8, c+6, c+2) derived from a single c > 0."""
    if c <= 0.0:
        raise InvalidConfigError(f"c must be > 0, got {c}")
    return 2.0 * c + 8.0, c + 6.0, c + 2.0


def thresholds_from_constants(v: float, c1: float, c2: float, c3: float) -> Thresholds:
    """Effective thresholds (v - c1 log v, v - c2 log v, v + c3 log v).

    Requires v - c1 log v > 0 (with c1 >= c2 this makes all three positive);
    smaller v are rejected rather than guessed at.
    """
    if v <= 1.0:
        raise InvalidConfigError(f"height parameter must exceed 1, got {v}")
    if c1 < c2:
        raise InvalidConfigError(f"constants must satisfy c1 >= c2, got {c1} < {c2}")
    lg = math.log(v)
    depth = v - c1 * lg
    if depth <= 0.0:
        raise InvalidConfigError(
            f"validity requires v - c1 log v > 0: {v} - {c1}*log({v}) = {depth:.6g}"
        )
    return Thresholds(depth=depth, wall=v - c2 * lg, tall=v + c3 * lg)


# ---------------------------------------------------------------------------
# Valley decomposition
# ---------------------------------------------------------------------------


@dataclass
class ValleyDecomposition:
    """Nested valley points of one side at given thresholds.

    ``minus`` lists one (rise, bottom, wall) triple per shallow valley:
    rise is where the oscillation above the running minimum first reaches
    the depth threshold, bottom the exact argmin since the previous rise,
    wall the last point left of the bottom lying wall-threshold above it.
    ``plus`` holds (edge, bottom, rise, wall) for the enclosing tall valley.
    """

    side: str
    v: float
    thresholds: Thresholds
    rises: list = field(default_factory=list)      # b_1, b_2, ...
    bottoms: list = field(default_factory=list)    # m_1, m_2, ...
    walls: list = field(default_factory=list)      # a_1, a_2, ...
    plus: Optional[tuple] = None                   # (edge, bottom, rise, wall)
    truncated: bool = False

    @property
    def count(self) -> int:
        return len(self.rises)

    def to_dict(self) -> dict:
        return {
            "side": self.side,
            "v": self.v,
            "thresholds": {
                "depth": self.thresholds.depth,
                "wall": self.thresholds.wall,
                "tall": self.thresholds.tall,
            },
            "rises": list(self.rises),
            "bottoms": list(self.bottoms),
            "walls": list(self.walls),
            "plus": list(self.plus) if self.plus is not None else None,
            "truncated": self.truncated,
        }


def valley_sequence(
    env: Environment, side: str, depth_threshold: float, count: int
) -> tuple:
    """First `count` (rise, bottom) pairs of the valley recursion.

    Starting from 0, each rise is the exact first position where the value
    minus its running minimum (since the previous rise) reaches the depth
    threshold, and each bottom the exact argmin over that stretch.  Returns
    (pairs, truncated): on budget exhaustion the list is partial.
    """
    if not (depth_threshold > 0.0):
        raise InvalidConfigError(f"depth threshold must be > 0, got {depth_threshold}")
    if count < 1:
        raise InvalidConfigError(f"count must be >= 1, got {count}")
    allowance = _Allowance(env)
    pairs = []
    prev = 0.0
    for _ in range(count):
        b = _scan_oscillation(env, side, prev, depth_threshold, allowance)
        if b is None:
            return pairs, True
        m = argmin_on(env.side(side), prev, b)
        pairs.append((b, m))
        prev = b
    return pairs, False


def a_point(
    env: Environment, side: str, m: float, rise_threshold: float, floor: float
) -> float:
    """Exact last position <= m whose value is rise_threshold above the value
    at m, clamped below by `floor`."""
    if floor > m:
        raise DomainError(f"floor {floor} exceeds bottom {m}")
    path = env.side(side)
    if not path.contains(m):
        raise DomainError(f"bottom {m} outside sampled domain")
    if rise_threshold <= 0.0:
        return m
    res = last_at_or_above(path, floor, m, path(m) + rise_threshold)
    return floor if res is None else max(res, floor)


def plus_valley(
    env: Environment, side: str, thresholds: Thresholds
) -> tuple:
    """(edge, bottom, rise, wall) of the enclosing tall valley, plus a
    truncation flag.

    edge is the first position where the oscillation reaches the tall
    threshold, bottom the argmin up to the edge, rise the first point after
    the bottom lying depth-threshold above it, wall the last point before it
    lying wall-threshold above it (clamped at 0).
    """
    allowance = _Allowance(env)
    edge = _scan_oscillation(env, side, 0.0, thresholds.tall, allowance)
    if edge is None:
        return None, True
    path = env.side(side)
    bottom = argmin_on(path, 0.0, edge)
    rise = hitting_time(path, path(bottom) + thresholds.depth, bottom)
    wall = a_point(env, side, bottom, thresholds.wall, 0.0)
    return (edge, bottom, rise, wall), False


def decompose(
    env: Environment, side: str, v: float, thresholds: Thresholds, count: int = 3
) -> ValleyDecomposition:
    """Full one-sided decomposition: `count` shallow valleys plus the tall one."""
    dec = ValleyDecomposition(side=side, v=v, thresholds=thresholds)
    pairs, truncated = valley_sequence(env, side, thresholds.depth, count)
    path = env.side(side)
    prev = 0.0
    for b, m in pairs:
        dec.rises.append(b)
        dec.bottoms.append(m)
        dec.walls.append(a_point(env, side, m, thresholds.wall, prev))
        prev = b
    plus, plus_truncated = plus_valley(env, side, thresholds)
    dec.plus = plus
    dec.truncated = truncated or plus_truncated
    return dec


# ---------------------------------------------------------------------------
# Regularity events
# ---------------------------------------------------------------------------


def _and3(*vals):
    """Three-valued conjunction: False dominates, then None, else True."""
    if any(val is False for val in vals):
        return False
    if any(val is None for val in vals):
        return None
    return True


@dataclass
class GammaReport:
    """Clause-by-clause regularity report for both sides.

    ``clauses`` maps "<side>.<name>" to True/False/None (None = the sampled
    domain was too short to decide, i.e. indeterminate rather than false).
    The aggregate events combine the per-side events with three-valued logic.
    """

    v: float
    thresholds: Thresholds
    clauses: dict = field(default_factory=dict)
    g1: dict = field(default_factory=dict)
    g2: dict = field(default_factory=dict)
    g3: dict = field(default_factory=dict)
    gamma: Optional[bool] = None
    gamma_prime: Optional[bool] = None

    def failing_clauses(self) -> list:
        return sorted(k for k, val in self.clauses.items() if val is False)

    def to_dict(self) -> dict:
        return {
            "v": self.v,
            "clauses": dict(self.clauses),
            "g1": dict(self.g1),
            "g2": dict(self.g2),
            "g3": dict(self.g3),
            "gamma": self.gamma,
            "gamma_prime": self.gamma_prime,
        }


def _side_clauses(env, side, v, thresholds, dec):
    path = env.side(side)
    lg = math.log(v)
    c: dict = {}
    b = dec.rises
    m = dec.bottoms
    a = dec.walls

    have3 = dec.count >= 3
    have2 = dec.count >= 2
    plus = dec.plus

    if plus is not None and have3:
        c["edge_before_third_rise"] = plus[0] <= b[2]
    else:
        c["edge_before_third_rise"] = None
    if plus is not None and have2:
        c["edge_before_second_rise"] = plus[0] <= b[1]
    else:
        c["edge_before_second_rise"] = None
    if plus is not None and plus[2] is not None:
        edge, bottom, rise, _ = plus
        c["deep_margin_after_rise"] = (
            min_on(path, rise, edge) - path(bottom) >= thresholds.margin
        )
    else:
        c["deep_margin_after_rise"] = None

    c["third_rise_bounded"] = b[2] <= v**6 if have3 else None
    c["first_bottom_not_too_deep"] = path(m[0]) >= -(v**2) if dec.count >= 1 else None
    c["second_drop_bounded"] = (
        path(m[1]) - path(b[0]) >= -(v**2) if have2 else None
    )
    c["first_wall_separated"] = m[0] - a[0] >= v**-2 if dec.count >= 1 else None
    c["second_wall_separated"] = m[1] - a[1] >= v**-2 if have2 else None

    if plus is not None:
        edge, bottom, rise, wall = plus
        c["tall_valley_wide"] = edge - bottom >= v
        lo = max(edge - lg, bottom)
        c["edge_run_shallow"] = path(edge) - min_on(path, lo, edge) <= 2.0 * lg
    else:
        c["tall_valley_wide"] = None
        c["edge_run_shallow"] = None

    for i, name in ((0, "first_bottom_run_shallow"), (1, "second_bottom_run_shallow")):
        if dec.count > i:
            lo = max(m[i] - lg, a[i])
            c[name] = max_on(path, lo, m[i]) - path(m[i]) <= 2.0 * lg
        else:
            c[name] = None
    return c


_G1_CLAUSES = ("edge_before_third_rise", "deep_margin_after_rise")
_G3_CLAUSES = ("edge_before_second_rise", "deep_margin_after_rise")
_G2_CLAUSES = (
    "third_rise_bounded",
    "first_bottom_not_too_deep",
    "second_drop_bounded",
    "first_wall_separated",
    "second_wall_separated",
    "tall_valley_wide",
    "edge_run_shallow",
    "first_bottom_run_shallow",
    "second_bottom_run_shallow",
)


def gamma_events(
    env: Environment,
    v: float,
    thresholds: Thresholds,
    decompositions: Optional[dict] = None,
) -> GammaReport:
    """Evaluate every regularity clause literally on both sides.

    Truncated decompositions mark the affected clauses (and aggregates) as
    indeterminate (None) rather than false.  Pass precomputed per-side
    decompositions to avoid recomputing them.
    """
    report = GammaReport(v=v, thresholds=thresholds)
    for side in _SIDES:
        dec = (decompositions or {}).get(side) or decompose(env, side, v, thresholds)
        clauses = _side_clauses(env, side, v, thresholds, dec)
        for name, val in clauses.items():
            report.clauses[f"{side}.{name}"] = val
        report.g1[side] = _and3(*(clauses[k] for k in _G1_CLAUSES))
        report.g3[side] = _and3(*(clauses[k] for k in _G3_CLAUSES))
        report.g2[side] = _and3(*(clauses[k] for k in _G2_CLAUSES))
    report.gamma = _and3(
        report.g1["right"], report.g2["right"], report.g1["left"], report.g2["left"]
    )
    report.gamma_prime = _and3(
        report.g3["right"], report.g2["right"], report.g3["left"], report.g2["left"]
    )
    return report


# ---------------------------------------------------------------------------
# Integrals
# ---------------------------------------------------------------------------


def exp_integral(env: Environment, side: str, a: float, b: float, m: float) -> float:
    """Exact integral of exp(-W(x) + W(m)) over [a, b] on one side.

    Closed form per linear segment with compensated summation.  A reversed
    interval (a > b) returns 0.0 by the empty-interval convention.
    """
    path = env.side(side)
    if a > b:
        return 0.0
    if not (path.contains(a) and path.contains(b) and path.contains(m)):
        raise DomainError("integral endpoints outside sampled domain")
    return integral_exp(path, a, b, sign=-1.0, shift=path(m))


def four_integrals(
    env: Environment, right: ValleyDecomposition, left: ValleyDecomposition
) -> dict:
    """The four wall-to-rise integrals, their minimum and their sum.

    Per side: the first shallow valley integral over [wall_1, rise_1]
    recentred at bottom_1, and the tall valley integral over [wall, rise]
    recentred at its bottom.
    """
    out = {}
    for side, dec in (("right", right), ("left", left)):
        if dec.count >= 1:
            out[f"minus_{side}"] = exp_integral(
                env, side, dec.walls[0], dec.rises[0], dec.bottoms[0]
            )
        else:
            out[f"minus_{side}"] = None
        if dec.plus is not None and dec.plus[2] is not None:
            edge, bottom, rise, wall = dec.plus
            out[f"plus_{side}"] = exp_integral(env, side, wall, rise, bottom)
        else:
            out[f"plus_{side}"] = None
    vals = [out[k] for k in ("minus_right", "plus_right", "minus_left", "plus_left")]
    if any(v is None for v in vals):
        out["i_min"] = None
        out["i_sum"] = None
    else:
        out["i_min"] = min(vals)
        out["i_sum"] = sum(vals)
    return out


# ---------------------------------------------------------------------------
# Ladder of successive valley bottoms
# ---------------------------------------------------------------------------


@dataclass
class LadderSequence:
    """Successive valley bottoms and heights of one side.

    heights[0] = 2 and returns[0] = 0 seed the recursion; rung k >= 1 then
    has rises[k-1] (first point where the oscillation since returns[k-1]
    reaches heights[k-1]), bottoms[k-1] (argmin over that stretch),
    returns[k] (first return to the bottom level), exits[k-1] (first point 2
    above the bottom), peaks[k-1] (argmax between rise and return) and
    heights[k] = value at peak - value at bottom.
    """

    side: str
    heights: list = field(default_factory=lambda: [LADDER_BASE_HEIGHT])
    returns: list = field(default_factory=lambda: [0.0])
    rises: list = field(default_factory=list)
    bottoms: list = field(default_factory=list)
    exits: list = field(default_factory=list)
    peaks: list = field(default_factory=list)
    truncated: bool = False

    @property
    def n_rungs(self) -> int:
        return len(self.rises)

    def to_dict(self) -> dict:
        return {
            "side": self.side,
            "heights": list(self.heights),
            "returns": list(self.returns),
            "rises": list(self.rises),
            "bottoms": list(self.bottoms),
            "exits": list(self.exits),
            "peaks": list(self.peaks),
            "truncated": self.truncated,
        }


def ladder_sequence(
    env: Environment,
    side: str,
    n_max: int,
    base_height: float = LADDER_BASE_HEIGHT,
    exit_offset: float = LADDER_BASE_HEIGHT,
) -> LadderSequence:
    """Run the six-point ladder recursion exactly on segments up to n_max rungs.

    `base_height` seeds the first oscillation threshold and `exit_offset` the
    exit level above each bottom; both default to 2 (rescaled rung sampling
    passes 1 and 2/h respectively).
    """
    if n_max < 1:
        raise InvalidConfigError(f"n_max must be >= 1, got {n_max}")
    allowance = _Allowance(env)
    lad = LadderSequence(side=side, heights=[float(base_height)])
    for _ in range(n_max):
        g_prev = lad.returns[-1]
        h_prev = lad.heights[-1]
        beta = _scan_oscillation(env, side, g_prev, h_prev, allowance)
        if beta is None:
            lad.truncated = True
            return lad
        path = env.side(side)
        mu = argmin_on(path, g_prev, beta)
        gamma = _scan_hitting(env, side, env.side(side)(mu), beta, allowance)
        if gamma is None:
            lad.truncated = True
            return lad
        path = env.side(side)
        eta = hitting_time(path, path(mu) + exit_offset, mu)
        peak = argmax_on(path, beta, gamma)
        lad.rises.append(beta)
        lad.bottoms.append(mu)
        lad.returns.append(gamma)
        lad.exits.append(eta)
        lad.peaks.append(peak)
        lad.heights.append(path(peak) - path(mu))
    return lad


# ---------------------------------------------------------------------------
# Localization target sets
# ---------------------------------------------------------------------------


def _signed(side: str, x: float) -> float:
    return x if side == "right" else -x


def localization_sets(
    env: Environment,
    right: ValleyDecomposition,
    left: ValleyDecomposition,
    delta: float,
    width_mode: str = "paper_U",
    eps: float = 0.5,
) -> list:
    """Up to four localization intervals in signed coordinates.

    ``paper_U`` mode brackets each target bottom m by the first/last points
    (within its wall-to-rise stretch) where the value exceeds the bottom by
    at most log(1/delta).  ``theorem2`` mode uses symmetric intervals of
    half-width (log v)^(4+eps) around the bottoms.  Intervals from the left
    side are mirrored to the negative axis; the list may contain overlaps
    (take the union for measure queries).
    """
    if not (0.0 < delta < 1.0):
        raise InvalidConfigError(f"delta must be in (0, 1), got {delta}")
    if width_mode not in ("paper_U", "theorem2"):
        raise InvalidConfigError(f"unknown width mode: {width_mode!r}")
    bound = math.log(1.0 / delta)
    intervals = []
    for side, dec in (("right", right), ("left", left)):
        path = env.side(side)
        targets = []
        if dec.count >= 1:
            targets.append((dec.bottoms[0], dec.walls[0], dec.rises[0]))
        if dec.plus is not None and dec.plus[2] is not None:
            edge, bottom, rise, wall = dec.plus
            targets.append((bottom, wall, rise))
        for m, a, b in targets:
            if width_mode == "theorem2":
                w = math.log(dec.v) ** (4.0 + eps)
                lo, hi = m - w, m + w
            else:
                level = path(m) + bound
                d = last_at_or_below(path, m, b, level)
                e = first_at_or_below(path, a, m, level)
                lo, hi = e, d
            s_lo, s_hi = _signed(side, lo), _signed(side, hi)
            intervals.append((min(s_lo, s_hi), max(s_lo, s_hi)))
    return intervals


def merge_intervals(intervals: list) -> list:
    """Union of closed intervals as a sorted list of disjoint intervals."""
    if not intervals:
        return []
    ordered = sorted(intervals)
    out = [list(ordered[0])]
    for lo, hi in ordered[1:]:
        if lo <= out[-1][1]:
            out[-1][1] = max(out[-1][1], hi)
        else:
            out.append([lo, hi])
    return [tuple(iv) for iv in out]
