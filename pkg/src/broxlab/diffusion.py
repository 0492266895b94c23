"""Construction of the diffusion from (environment, driving Brownian path).

The diffusion is realized as the composition of the inverse scale map, the
driver, and the inverse time change: space is warped by S(x) = int_0^x e^W
and the clock by T(s) = int_0^s e^{-2W(S^{-1}(B(u)))} du.  Everything here is
exact for the piecewise-linear environment and driver:

* S, its inverse, and C(x) = int_0^x e^{-W} have closed forms per segment;
* since dC = e^{-2W} dS, a driver segment from B0 to B1 over du of driver
  time contributes exactly du * (C(B1) - C(B0)) / (B1 - B0) of diffusion
  time, and the restriction of that form to any overlap gives the exact
  occupation of any spatial interval (so the direct local time estimator
  integrates back to t exactly);
* the classical trapezoid rule on driver knots is kept as an alternative
  quadrature for refinement studies.

Because the spatial scale around a valley bottom shrinks like e^{W(bottom)},
a fixed driver step cannot resolve deep bottoms at affordable cost.  The
driver is therefore sampled at a coarse uniform step and refined by exact
Brownian-bridge bisection wherever a single segment would contribute more
than ``time_tol`` of diffusion time.  That bounds the knot count by roughly
(diffusion horizon) / time_tol regardless of depth, and the refined path is
still exactly Brownian in law.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .environment import Environment, ValleyDecomposition
from .errors import HorizonError, InvalidConfigError
from .paths import _generator

__all__ = [
    "DiffusionRealization",
    "LocalTimeField",
    "ProfileFlags",
    "scale",
    "scale_inverse",
    "profile_events",
]

_STREAM_DRIVER = 20
_STREAM_REFINE = 21


class _EnvTables:
    """Closed-form S, C and exponential tables over the two-sided environment.

    Arrays are rebuilt whenever the environment's knot count changes; growth
    events are logarithmic in the final size, so rebuilding stays cheap.
    """

    def __init__(self, env: Environment):
        self.env = env
        self._seen = (-1, -1)
        self.sync()

    def sync(self):
        key = (self.env.right.n_knots, self.env.left.n_knots)
        if key == self._seen:
            return
        path = self.env.two_sided_path()
        xs, ws = path.positions, path.values
        self.xs = xs
        self.ws = ws
        self.E = np.exp(ws)
        self.Einv = np.exp(-ws)
        dx = np.diff(xs)
        self.slope = np.diff(ws) / dx
        flat = self.slope == 0.0
        safe = np.where(flat, 1.0, self.slope)
        seg_s = np.where(flat, dx * self.E[:-1], np.diff(self.E) / safe)
        seg_c = np.where(flat, dx * self.Einv[:-1], -np.diff(self.Einv) / safe)
        # Accumulate outward from the origin on each side separately so that
        # rounding stays at the local magnitude: S-increments near a deep
        # bottom are ~e^{W(bottom)} and would be quantized away by a cumsum
        # anchored at the far end of the array.
        origin = int(np.searchsorted(xs, 0.0))
        self.S = self._origin_cumsum(seg_s, origin)
        self.C = self._origin_cumsum(seg_c, origin)
        self._seen = key

    @staticmethod
    def _origin_cumsum(seg: np.ndarray, origin: int) -> np.ndarray:
        out = np.empty(seg.size + 1)
        out[origin] = 0.0
        out[origin + 1 :] = np.cumsum(seg[origin:])
        out[:origin] = -np.cumsum(seg[:origin][::-1])[::-1]
        return out

    # -- index helpers ------------------------------------------------------

    def _ix_x(self, x):
        return np.clip(np.searchsorted(self.xs, x, side="right") - 1, 0, self.xs.size - 2)

    def _ix_s(self, s):
        return np.clip(np.searchsorted(self.S, s, side="right") - 1, 0, self.S.size - 2)

    def _safe_slope(self, i):
        sl = self.slope[i]
        return sl, sl == 0.0, np.where(sl == 0.0, 1.0, sl)

    # -- closed-form maps ----------------------------------------------------

    def s_at_x(self, x):
        x = np.asarray(x, dtype=float)
        i = self._ix_x(x)
        sl, flat, safe = self._safe_slope(i)
        dx = x - self.xs[i]
        ex = np.exp(self.ws[i] + sl * dx)
        return np.where(flat, self.S[i] + dx * self.E[i], self.S[i] + (ex - self.E[i]) / safe)

    def w_at_x(self, x):
        return np.interp(np.asarray(x, dtype=float), self.xs, self.ws)

    def x_at_s(self, s):
        s = np.asarray(s, dtype=float)
        i = self._ix_s(s)
        sl, flat, safe = self._safe_slope(i)
        et = np.maximum(self.E[i] + sl * (s - self.S[i]), 1e-300)
        return np.where(
            flat,
            self.xs[i] + (s - self.S[i]) * self.Einv[i],
            self.xs[i] + (np.log(et) - self.ws[i]) / safe,
        )

    def c_at_s(self, s):
        s = np.asarray(s, dtype=float)
        i = self._ix_s(s)
        sl, flat, safe = self._safe_slope(i)
        ds = s - self.S[i]
        et = np.maximum(self.E[i] + sl * ds, 1e-300)
        return np.where(
            flat,
            self.C[i] + ds * self.Einv[i] ** 2,
            self.C[i] + (self.Einv[i] - 1.0 / et) / safe,
        )

    def dcds_at_s(self, s):
        """e^{-2W} at the spatial point whose scale value is s."""
        s = np.asarray(s, dtype=float)
        i = self._ix_s(s)
        et = np.maximum(self.E[i] + self.slope[i] * (s - self.S[i]), 1e-300)
        return 1.0 / (et * et)

    def s_at_c(self, c):
        """Inverse of C o S^{-1}: scale value with given C value."""
        c = np.asarray(c, dtype=float)
        i = np.clip(np.searchsorted(self.C, c, side="right") - 1, 0, self.C.size - 2)
        sl = self.slope[i]
        flat = sl == 0.0
        safe = np.where(flat, 1.0, sl)
        dc = c - self.C[i]
        einvt = np.maximum(self.Einv[i] - sl * dc, 1e-300)
        return np.where(
            flat,
            self.S[i] + dc * self.E[i] ** 2,
            self.S[i] + (1.0 / einvt - self.E[i]) / safe,
        )

    @property
    def s_range(self):
        return float(self.S[0]), float(self.S[-1])

    @property
    def x_range(self):
        return float(self.xs[0]), float(self.xs[-1])


def _extend_env_range(env: Environment, tables: _EnvTables, *, x=None, s=None) -> None:
    """Grow the environment until the requested x- or scale-range is covered."""
    for _ in range(200):
        tables.sync()
        ok = True
        if x is not None:
            lo, hi = tables.x_range
            if x[0] < lo:
                ok &= env.extend("left", max(1024, env.left.n_knots))
            if x[1] > hi:
                ok &= env.extend("right", max(1024, env.right.n_knots))
            tables.sync()
            lo, hi = tables.x_range
            if not (x[0] >= lo and x[1] <= hi):
                if not ok:
                    raise HorizonError("environment not extensible to requested positions")
                continue
        if s is not None:
            lo, hi = tables.s_range
            grown = False
            if s[0] < lo:
                grown |= env.extend("left", max(1024, env.left.n_knots))
            if s[1] > hi:
                grown |= env.extend("right", max(1024, env.right.n_knots))
            tables.sync()
            lo, hi = tables.s_range
            if not (s[0] >= lo and s[1] <= hi):
                if not grown:
                    raise HorizonError("environment not extensible to requested scale range")
                continue
        return
    raise HorizonError("environment extension loop exhausted")


def scale(env: Environment, x) -> float:
    """S(x) = int_0^x e^W, exact per segment (signed x); extends env as needed."""
    t = _EnvTables(env)
    xa = np.atleast_1d(np.asarray(x, dtype=float))
    _extend_env_range(env, t, x=(float(np.min(xa)), float(np.max(xa))))
    out = t.s_at_x(xa)
    return float(out[0]) if np.ndim(x) == 0 else out


def scale_inverse(env: Environment, s) -> float:
    """Exact inverse of the scale map; extends env as needed."""
    t = _EnvTables(env)
    sa = np.atleast_1d(np.asarray(s, dtype=float))
    _extend_env_range(env, t, s=(float(np.min(sa)), float(np.max(sa))))
    out = t.x_at_s(sa)
    return float(out[0]) if np.ndim(s) == 0 else out


@dataclass
class LocalTimeField:
    """Binned spatial local time profile at a fixed diffusion time."""

    t: float
    x_lo: float
    bin_width: float
    L: np.ndarray
    estimator_tag: str

    @property
    def centers(self) -> np.ndarray:
        return self.x_lo + self.bin_width * (np.arange(self.L.size) + 0.5)

    def sup(self) -> float:
        return float(np.max(self.L)) if self.L.size else 0.0

    def total_mass(self) -> float:
        return float(np.sum(self.L) * self.bin_width)

    def value_at(self, x: float) -> float:
        i = int(np.floor((x - self.x_lo) / self.bin_width))
        if i < 0 or i >= self.L.size:
            return 0.0
        return float(self.L[i])

    def write_csv(self, file) -> None:
        own = isinstance(file, (str, bytes))
        fh = open(file, "w", encoding="utf-8") if own else file
        try:
            fh.write("x_center,width,L\n")
            for c, l in zip(self.centers, self.L):
                fh.write(f"{c!r},{self.bin_width!r},{l!r}\n")
        finally:
            if own:
                fh.close()


class DiffusionRealization:
    """Environment + driver + monotone scale and time-change tables.

    The driver is acquired in chunks from its own seed stream and (with the
    default segment-exact quadrature) refined by Brownian-bridge bisection so
    no single segment contributes more than ``time_tol`` diffusion time.
    All stopping operations report reached/truncated status instead of
    raising when the segment budget runs out.
    """

    def __init__(
        self,
        env: Environment,
        driver_seed: int,
        driver_step: float = 1e-4,
        quadrature: str = "segment_exact",
        time_tol: float = 0.0625,
        max_segments: int = 8_000_000,
        chunk_len: int = 4096,
    ):
        if quadrature not in ("segment_exact", "trapezoid"):
            raise InvalidConfigError(f"unknown quadrature: {quadrature!r}")
        if driver_step <= 0.0:
            raise InvalidConfigError(f"driver step must be positive, got {driver_step}")
        self.env = env
        self.tables = _EnvTables(env)
        self.driver_seed = tuple(driver_seed) if isinstance(driver_seed, (tuple, list)) else int(driver_seed)
        self.driver_step = float(driver_step)
        self.quadrature = quadrature
        self.time_tol = float(time_tol)
        self.max_segments = int(max_segments)
        self._chunk_len = int(chunk_len)
        self._gen = _generator(driver_seed, _STREAM_DRIVER)
        self._refine_gen = _generator(driver_seed, _STREAM_REFINE)
        self._B = np.zeros(1)  # knots; segment j runs from _B[j] to _B[j+1]
        self._du = np.zeros(0)
        self._dt = np.zeros(0)
        self._cum_du = np.zeros(0)
        self._cum_dt = np.zeros(0)
        self.truncated = False
        self.refine_saturated = False

    # -- basic state ---------------------------------------------------------

    @property
    def n_segments(self) -> int:
        return self._du.size

    @property
    def driver_time(self) -> float:
        return float(self._cum_du[-1]) if self.n_segments else 0.0

    @property
    def horizon_diffusion_time(self) -> float:
        return float(self._cum_dt[-1]) if self.n_segments else 0.0

    def scale(self, x):
        xa = np.atleast_1d(np.asarray(x, dtype=float))
        _extend_env_range(self.env, self.tables, x=(float(np.min(xa)), float(np.max(xa))))
        out = self.tables.s_at_x(xa)
        return float(out[0]) if np.ndim(x) == 0 else out

    def scale_inverse(self, s):
        out = self.tables.x_at_s(np.atleast_1d(np.asarray(s, dtype=float)))
        return float(out[0]) if np.ndim(s) == 0 else out

    # -- driver acquisition ----------------------------------------------------

    def _segment_dt(self, b0, b1, du):
        """Diffusion-time contribution of driver segments, closed form."""
        b0 = np.asarray(b0, dtype=float)
        b1 = np.asarray(b1, dtype=float)
        du = np.asarray(du, dtype=float)
        if self.quadrature == "trapezoid":
            return du * 0.5 * (self.tables.dcds_at_s(b0) + self.tables.dcds_at_s(b1))
        db = b1 - b0
        ref = np.maximum(np.maximum(np.abs(b0), np.abs(b1)), 1.0)
        degenerate = np.abs(db) <= 1e-13 * ref
        safe = np.where(degenerate, 1.0, db)
        ratio = (self.tables.c_at_s(b1) - self.tables.c_at_s(b0)) / safe
        return np.maximum(du * np.where(degenerate, self.tables.dcds_at_s(b0), ratio), 0.0)

    @staticmethod
    def _truncate_at_goal(arrays, dt, goal):
        """Keep the shortest prefix whose diffusion time reaches `goal`.

        Dropping the tail discards future driver increments that were never
        used; the kept prefix is still exactly a Brownian path, and the next
        chunk continues from its endpoint with fresh draws.
        """
        cum = np.cumsum(dt)
        if cum[-1] <= goal:
            return arrays, dt
        cut = int(np.searchsorted(cum, goal, side="left")) + 1
        return [a[:cut] for a in arrays], dt[:cut]

    def _dt_from_c(self, b0, b1, du, c0, c1):
        """dt per segment from cached endpoint C values."""
        db = b1 - b0
        ref = np.maximum(np.maximum(np.abs(b0), np.abs(b1)), 1.0)
        degenerate = np.abs(db) <= 1e-13 * ref
        safe = np.where(degenerate, 1.0, db)
        dt = du * (c1 - c0) / safe
        if degenerate.any():
            dt = np.where(degenerate, du * self.tables.dcds_at_s(b0), dt)
        return np.maximum(dt, 0.0)

    def _refine_chunk(self, knots: np.ndarray, du0: float, dt_goal: float):
        """Bridge-bisect segments until each contributes <= time_tol.

        Endpoint C values are carried along so each level only evaluates the
        new midpoints.  Work and output size stay bounded by dt_goal/time_tol:
        the chunk is truncated at every level once its cumulative diffusion
        time exceeds the goal, so a single coarse segment straddling a deep
        pocket cannot blow up the refinement.
        """
        b0 = knots[:-1].copy()
        b1 = knots[1:].copy()
        du = np.full(b0.size, du0)
        if self.quadrature == "trapezoid":
            dt = self._segment_dt(b0, b1, du)
            (b0, b1, du), dt = self._truncate_at_goal((b0, b1, du), dt, dt_goal)
            return b0, b1, du, dt
        ck = self.tables.c_at_s(knots)
        c0 = ck[:-1].copy()
        c1 = ck[1:].copy()
        dt = self._dt_from_c(b0, b1, du, c0, c1)
        for _ in range(600):
            (b0, b1, du, c0, c1), dt = self._truncate_at_goal((b0, b1, du, c0, c1), dt, dt_goal)
            need = (dt > self.time_tol) & (du > 1e-250)
            if not need.any():
                return b0, b1, du, dt
            k = int(need.sum())
            mid = 0.5 * (b0[need] + b1[need]) + self._refine_gen.standard_normal(k) * np.sqrt(
                du[need] / 4.0
            )
            lo = min(float(np.min(mid)), float(np.min(b0)))
            hi = max(float(np.max(mid)), float(np.max(b1)))
            _extend_env_range(self.env, self.tables, s=(lo, hi))
            c_mid = self.tables.c_at_s(mid)
            counts = need.astype(np.intp) + 1
            idx = np.repeat(np.arange(b0.size), counts)
            nb0, nb1, ndu = b0[idx], b1[idx], du[idx]
            nc0, nc1, ndt = c0[idx], c1[idx], dt[idx]
            first = (np.cumsum(counts) - counts)[need]
            nb1[first] = mid
            nb0[first + 1] = mid
            nc1[first] = c_mid
            nc0[first + 1] = c_mid
            ndu[first] = du[need] / 2.0
            ndu[first + 1] = du[need] / 2.0
            touched = np.concatenate((first, first + 1))
            ndt[touched] = self._dt_from_c(
                nb0[touched], nb1[touched], ndu[touched], nc0[touched], nc1[touched]
            )
            b0, b1, du, c0, c1, dt = nb0, nb1, ndu, nc0, nc1, ndt
        self.refine_saturated = True
        return b0, b1, du, dt

    def extend_driver(self, dt_goal: Optional[float] = None) -> bool:
        """Acquire one more driver chunk; False when the segment budget is spent.

        `dt_goal` is the additional diffusion time this chunk should deliver
        (the default doubles the current horizon); the chunk is truncated
        once the goal is exceeded so that acquisition work stays proportional
        to the time actually needed.
        """
        if self.n_segments >= self.max_segments:
            self.truncated = True
            return False
        if dt_goal is None or not (dt_goal > 0.0):
            dt_goal = max(256.0 * self.time_tol, 0.5 * self.horizon_diffusion_time)
        n = min(self._chunk_len, max(1, self.max_segments - self.n_segments))
        du0 = self.driver_step
        inc = self._gen.standard_normal(n) * math.sqrt(du0)
        last = float(self._B[-1])
        knots = np.concatenate(([last], last + np.cumsum(inc)))
        margin = 8.0 * math.sqrt(du0) + 1e-12
        _extend_env_range(
            self.env,
            self.tables,
            s=(float(np.min(knots)) - margin, float(np.max(knots)) + margin),
        )
        b0, b1, du, dt = self._refine_chunk(knots, du0, dt_goal)
        if b0.size > self.max_segments - self.n_segments:
            keep = self.max_segments - self.n_segments
            b0, b1, du, dt = b0[:keep], b1[:keep], du[:keep], dt[:keep]
            self.truncated = True
        # grow the coarse chunk only while it is consumed whole
        if b1.size and b1[-1] == knots[-1]:
            self._chunk_len = min(2 * self._chunk_len, 1 << 17)
        else:
            self._chunk_len = max(1024, self._chunk_len // 2)
        self._B = np.concatenate((self._B, b1))
        self._du = np.concatenate((self._du, du))
        self._dt = np.concatenate((self._dt, dt))
        base_u = self._cum_du[-1] if self._cum_du.size else 0.0
        base_t = self._cum_dt[-1] if self._cum_dt.size else 0.0
        self._cum_du = np.concatenate((self._cum_du, base_u + np.cumsum(du)))
        self._cum_dt = np.concatenate((self._cum_dt, base_t + np.cumsum(dt)))
        return True

    # -- stops ------------------------------------------------------------------
    # A stop is (segment_index, fraction of that segment's driver time); frac
    # maps linearly onto the driver value within the segment.

    def _b_at(self, stop) -> float:
        idx, frac = stop
        return float(self._B[idx] + frac * (self._B[idx + 1] - self._B[idx]))

    def _time_at(self, stop) -> float:
        idx, frac = stop
        base = self._cum_dt[idx - 1] if idx > 0 else 0.0
        if frac <= 0.0:
            return float(base)
        if frac >= 1.0:
            return float(base + self._dt[idx])
        b0 = float(self._B[idx])
        part = self._segment_dt(
            np.array([b0]), np.array([self._b_at(stop)]), np.array([frac * self._du[idx]])
        )
        return float(base + part[0])

    def _stop_at_time(self, t: float):
        """Stop (idx, frac) at diffusion time exactly t; requires t <= horizon."""
        if t < 0.0 or t > self.horizon_diffusion_time:
            raise HorizonError(f"diffusion time {t} beyond simulated horizon")
        if t == 0.0 or self.n_segments == 0:
            return (0, 0.0)
        idx = int(np.searchsorted(self._cum_dt, t, side="left"))
        idx = min(idx, self.n_segments - 1)
        base = self._cum_dt[idx - 1] if idx > 0 else 0.0
        need = t - base
        dt = float(self._dt[idx])
        if need <= 0.0:
            return (idx, 0.0)
        if need >= dt:
            return (idx, 1.0)
        b0, b1 = float(self._B[idx]), float(self._B[idx + 1])
        if self.quadrature == "trapezoid" or abs(b1 - b0) <= 1e-13 * max(abs(b0), abs(b1), 1.0):
            return (idx, need / dt)
        c0 = float(self.tables.c_at_s(np.array([b0]))[0])
        target_c = c0 + need * (b1 - b0) / float(self._du[idx])
        y = float(self.tables.s_at_c(np.array([target_c]))[0])
        frac = (y - b0) / (b1 - b0)
        return (idx, float(np.clip(frac, 0.0, 1.0)))

    def advance_until_time(self, t_target: float) -> bool:
        """Extend the driver until the diffusion clock reaches t_target."""
        while self.horizon_diffusion_time < t_target:
            remaining = t_target - self.horizon_diffusion_time
            if not self.extend_driver(dt_goal=1.0625 * remaining):
                return False
        return True

    # -- clock maps ----------------------------------------------------------

    def time_change(self, s: float) -> float:
        """T(s): diffusion time after driver time s (within the horizon)."""
        if s < 0.0 or s > self.driver_time:
            raise HorizonError(f"driver time {s} beyond simulated horizon")
        if s == 0.0 or self.n_segments == 0:
            return 0.0
        idx = int(np.searchsorted(self._cum_du, s, side="left"))
        idx = min(idx, self.n_segments - 1)
        base_u = self._cum_du[idx - 1] if idx > 0 else 0.0
        frac = (s - base_u) / self._du[idx]
        return self._time_at((idx, float(np.clip(frac, 0.0, 1.0))))

    def time_change_inverse(self, t: float) -> float:
        """T^{-1}(t): driver time at which the diffusion clock reads t."""
        if self.n_segments == 0 and t == 0.0:
            return 0.0
        idx, frac = self._stop_at_time(t)
        base_u = self._cum_du[idx - 1] if idx > 0 else 0.0
        return float(base_u + frac * self._du[idx])

    def diffusion_value(self, t: float) -> float:
        """X(t): spatial position of the diffusion at diffusion time t."""
        if t == 0.0:
            return 0.0
        stop = self._stop_at_time(t)
        return float(self.tables.x_at_s(np.array([self._b_at(stop)]))[0])

    # -- occupation ------------------------------------------------------------

    def _clipped_segments(self, stop):
        idx, frac = stop
        if frac >= 1.0:
            idx, frac = idx + 1, 0.0
        count = idx + (1 if frac > 0.0 else 0)
        b0 = self._B[:-1][:count].copy()
        b1 = self._B[1:][:count].copy()
        du = self._du[:count].copy()
        if frac > 0.0:
            b1[-1] = self._B[idx] + frac * (self._B[idx + 1] - self._B[idx])
            du[-1] = frac * self._du[idx]
        return b0, b1, du

    @staticmethod
    def _segment_geometry(b0, b1):
        lo = np.minimum(b0, b1)
        hi = np.maximum(b0, b1)
        db = hi - lo
        ref = np.maximum(np.maximum(np.abs(b0), np.abs(b1)), 1.0)
        degenerate = db <= 1e-13 * ref
        safe = np.where(degenerate, 1.0, db)
        return lo, hi, degenerate, safe

    def occupation_of_intervals(self, stop, intervals: Sequence) -> np.ndarray:
        """Exact diffusion-time occupation of spatial intervals up to a stop."""
        b0, b1, du = self._clipped_segments(stop)
        out = np.zeros(len(intervals))
        if b0.size == 0:
            return out
        lo, hi, degenerate, safe = self._segment_geometry(b0, b1)
        flat_dt = self._segment_dt(b0, b1, du)
        for k, (x_lo, x_hi) in enumerate(intervals):
            if x_hi <= x_lo:
                continue
            s_pair = self.tables.s_at_x(np.array([x_lo, x_hi]))
            s_lo, s_hi = float(s_pair[0]), float(s_pair[1])
            a = np.maximum(lo, s_lo)
            b = np.minimum(hi, s_hi)
            mask = b > a
            if not mask.any():
                continue
            ca = self.tables.c_at_s(a[mask])
            cb = self.tables.c_at_s(b[mask])
            inside = (lo[mask] >= s_lo) & (hi[mask] <= s_hi)
            contrib = np.where(
                degenerate[mask],
                np.where(inside, flat_dt[mask], 0.0),
                np.maximum(du[mask] * (cb - ca) / safe[mask], 0.0),
            )
            out[k] = float(np.sum(contrib))
        return out

    def _driver_density(self, stop):
        """Step-function density of driver time over scale space, plus atoms.

        Returns (ys, dens, cum, atom_y, atom_mass): dens[i] is the density on
        (ys[i], ys[i+1]) and cum[i] the total driver time spent below ys[i];
        cum is piecewise linear between breakpoints, so interval occupations
        are exact interpolation differences.
        """
        b0, b1, du = self._clipped_segments(stop)
        if b0.size == 0:
            z = np.zeros(0)
            return z, z, z, z, z
        lo, hi, degenerate, safe = self._segment_geometry(b0, b1)
        nd = ~degenerate
        rate = du[nd] / safe[nd]
        events_y = np.concatenate((lo[nd], hi[nd]))
        events_d = np.concatenate((rate, -rate))
        order = np.argsort(events_y, kind="stable")
        ys = events_y[order]
        dens = np.cumsum(events_d[order])
        if ys.size:
            cum = np.concatenate(([0.0], np.cumsum(dens[:-1] * np.diff(ys))))
        else:
            cum = np.zeros(0)
        return ys, dens, cum, b0[degenerate], du[degenerate]

    def driver_occupation_of_s_intervals(self, stop, s_intervals) -> np.ndarray:
        """Exact driver-time occupation of scale-space intervals up to a stop."""
        ys, _, cum, atom_y, atom_m = self._driver_density(stop)
        s_arr = np.asarray(s_intervals, dtype=float)
        out = np.zeros(s_arr.shape[0])
        if ys.size:
            o_hi = np.interp(s_arr[:, 1], ys, cum)
            o_lo = np.interp(s_arr[:, 0], ys, cum)
            out = o_hi - o_lo
        if atom_y.size:
            for k in range(s_arr.shape[0]):
                sel = (atom_y >= s_arr[k, 0]) & (atom_y <= s_arr[k, 1])
                out[k] += float(np.sum(atom_m[sel]))
        return out

    def occupied_x_range(self, stop) -> tuple:
        b0, b1, _ = self._clipped_segments(stop)
        if b0.size == 0:
            return (0.0, 0.0)
        s_lo = float(min(np.min(b0), np.min(b1)))
        s_hi = float(max(np.max(b0), np.max(b1)))
        xs = self.tables.x_at_s(np.array([s_lo, s_hi]))
        return float(xs[0]), float(xs[1])

    def local_time_field(
        self, t: float, bin_width: float, estimator: str = "direct"
    ) -> LocalTimeField:
        """Binned spatial local time at diffusion time t.

        direct: exact occupation of each x-bin divided by its width (the
        field integrates back to t exactly).  formula: driver occupation
        density in scale space on bins of width bin_width * e^{W(x)} around
        S(x), multiplied by e^{-W(x)}.
        """
        if bin_width <= 0.0:
            raise InvalidConfigError(f"bin width must be positive, got {bin_width}")
        if not self.advance_until_time(t):
            raise HorizonError(f"driver budget exhausted before diffusion time {t}")
        stop = self._stop_at_time(t)
        x_lo, x_hi = self.occupied_x_range(stop)
        n_bins = max(1, int(math.ceil((x_hi - x_lo) / bin_width - 1e-12)))
        edges = x_lo + bin_width * np.arange(n_bins + 1)
        _extend_env_range(self.env, self.tables, x=(float(edges[0]), float(edges[-1])))
        if estimator == "direct":
            masses = self._bin_masses_direct(stop, edges)
            L = masses / bin_width
            tag = "direct"
        elif estimator == "formula":
            centers = 0.5 * (edges[:-1] + edges[1:])
            w_c = self.tables.w_at_x(centers)
            s_c = self.tables.s_at_x(centers)
            half = 0.5 * bin_width * np.exp(w_c)
            occ = self.driver_occupation_of_s_intervals(
                stop, np.stack((s_c - half, s_c + half), axis=1)
            )
            L = np.exp(-w_c) * occ / (2.0 * half)
            tag = "formula"
        else:
            raise InvalidConfigError(f"unknown estimator: {estimator!r}")
        return LocalTimeField(t=t, x_lo=float(edges[0]), bin_width=bin_width, L=L, estimator_tag=tag)

    def _bin_masses_direct(self, stop, edges: np.ndarray) -> np.ndarray:
        """Exact occupation mass per x-bin.

        Integrates e^{-2W} times the driver's scale-space occupation density
        over each bin's scale image, in closed form on the common refinement
        of bin edges and density breakpoints.
        """
        n_bins = edges.size - 1
        ys, dens, _, atom_y, atom_m = self._driver_density(stop)
        masses = np.zeros(n_bins)
        s_edges = self.tables.s_at_x(edges)
        if ys.size:
            inner = ys[(ys > s_edges[0]) & (ys < s_edges[-1])]
            py = np.sort(np.concatenate((s_edges, inner)))
            mid = 0.5 * (py[:-1] + py[1:])
            d_idx = np.searchsorted(ys, mid, side="right") - 1
            d_val = np.where(d_idx >= 0, dens[np.clip(d_idx, 0, dens.size - 1)], 0.0)
            c_edges = self.tables.c_at_s(py)
            piece_mass = d_val * np.diff(c_edges)
            which = np.clip(np.searchsorted(s_edges, mid, side="right") - 1, 0, n_bins - 1)
            np.add.at(masses, which, piece_mass)
        if atom_y.size:
            which = np.clip(np.searchsorted(s_edges, atom_y, side="right") - 1, 0, n_bins - 1)
            in_range = (atom_y >= s_edges[0]) & (atom_y <= s_edges[-1])
            np.add.at(masses, which[in_range], atom_m[in_range])
        return masses

    # -- stopping times -----------------------------------------------------

    def hitting_time_diffusion(self, x: float) -> float:
        """First diffusion time at which the diffusion reaches x (exact)."""
        _extend_env_range(self.env, self.tables, x=(min(0.0, x), max(0.0, x)))
        level = float(self.tables.s_at_x(np.array([x]))[0])
        if level == 0.0:
            return 0.0
        scanned = 0
        while True:
            b0 = self._B[:-1][scanned:]
            b1 = self._B[1:][scanned:]
            if b0.size:
                crosses = (b0 - level) * (b1 - level) <= 0.0
                if crosses.any():
                    j = scanned + int(np.argmax(crosses))
                    bb0, bb1 = float(self._B[j]), float(self._B[j + 1])
                    frac = 0.0 if bb1 == bb0 else (level - bb0) / (bb1 - bb0)
                    return self._time_at((j, float(np.clip(frac, 0.0, 1.0))))
                scanned = self.n_segments
            if not self.extend_driver():
                raise HorizonError(f"driver budget exhausted before reaching {x}")

    def _first_occupation_stop(self, s_intervals, targets, scanned):
        """First stop (within current horizon, from segment `scanned` on) at
        which a monitored scale interval's driver occupation reaches its
        target.  Returns ((which, stop) | None, occupation accumulated)."""
        lo_iv = np.array([iv[0] for iv in s_intervals])
        hi_iv = np.array([iv[1] for iv in s_intervals])
        b0 = self._B[:-1][scanned:]
        b1 = self._B[1:][scanned:]
        du = self._du[scanned:]
        k = lo_iv.size
        if b0.size == 0:
            return None, np.zeros(k)
        lo, hi, degenerate, safe = self._segment_geometry(b0, b1)
        overlap = np.maximum(
            np.minimum(hi[:, None], hi_iv[None, :]) - np.maximum(lo[:, None], lo_iv[None, :]),
            0.0,
        )
        inside = (lo[:, None] >= lo_iv[None, :]) & (hi[:, None] <= hi_iv[None, :])
        occ = np.where(
            degenerate[:, None],
            np.where(inside, du[:, None], 0.0),
            du[:, None] * overlap / safe[:, None],
        )
        cum = np.cumsum(occ, axis=0)
        reach = cum >= targets[None, :]
        if not reach.any():
            return None, cum[-1]
        rows = np.where(reach.any(axis=0), reach.argmax(axis=0), np.iinfo(np.intp).max)
        which = int(np.argmin(rows))
        row = int(rows[which])
        j = scanned + row
        prev = cum[row - 1, which] if row > 0 else 0.0
        need = float(targets[which] - prev)
        bb0, bb1 = float(self._B[j]), float(self._B[j + 1])
        duj = float(self._du[j])
        if degenerate[row]:
            frac = min(1.0, need / duj) if duj > 0 else 1.0
        else:
            f_a = (lo_iv[which] - bb0) / (bb1 - bb0)
            f_b = (hi_iv[which] - bb0) / (bb1 - bb0)
            f_in = max(0.0, min(f_a, f_b))
            frac = f_in + need / duj
        return (which, (j, float(np.clip(frac, 0.0, 1.0)))), cum[-1]

    def run_until_occupation(self, s_intervals, targets):
        """Extend until a monitored interval reaches its occupation target.

        Returns (which, stop, reached); on budget exhaustion reached=False.
        """
        remaining = np.asarray(targets, dtype=float).copy()
        scanned = 0
        while True:
            res, acc = self._first_occupation_stop(s_intervals, remaining, scanned)
            if res is not None:
                which, stop = res
                return which, stop, True
            remaining -= acc
            scanned = self.n_segments
            if not self.extend_driver():
                return None, None, False

    def inverse_local_time(self, r: float, y: float, bin_width: float):
        """First diffusion time at which the local time at y reaches r.

        Metered as driver occupation of a scale-space bin of width
        bin_width * e^{W(y)} centred at S(y), divided by that width; the
        crossing is exact on segments and mapped through the time change.
        Returns (sigma, reached).
        """
        if r <= 0.0:
            raise InvalidConfigError(f"level must be positive, got {r}")
        w_y = float(self.tables.w_at_x(np.array([y]))[0])
        s_y = float(self.tables.s_at_x(np.array([y]))[0])
        width = bin_width * math.exp(w_y)
        target = r * math.exp(w_y) * width
        which, stop, reached = self.run_until_occupation(
            [(s_y - 0.5 * width, s_y + 0.5 * width)], np.array([target])
        )
        if not reached:
            return None, False
        return self._time_at(stop), True

    def composite_sigma(
        self,
        points: Sequence[float],
        labels: Sequence[str],
        r: float,
        v: float,
        bin_width: float,
    ):
        """Minimum over target points of the inverse local time at level r e^v.

        All points are monitored simultaneously; the first metered bin to
        reach its target achieves the minimum.  Returns
        (sigma, label, stop, reached).
        """
        pts = np.asarray(points, dtype=float)
        w_p = self.tables.w_at_x(pts)
        s_p = self.tables.s_at_x(pts)
        widths = bin_width * np.exp(w_p)
        if np.any(v + w_p > 700.0):
            raise OverflowError("inverse local time level overflows; rescale r")
        targets = r * np.exp(v + w_p) * widths
        ivs = [(s - 0.5 * w, s + 0.5 * w) for s, w in zip(s_p, widths)]
        which, stop, reached = self.run_until_occupation(ivs, np.asarray(targets))
        if not reached:
            return None, None, None, False
        return self._time_at(stop), labels[which], stop, True

    # -- metadata -----------------------------------------------------------

    def metadata(self) -> dict:
        seed = self.driver_seed
        return {
            "driver_seed": list(seed) if isinstance(seed, tuple) else seed,
            "driver_step": self.driver_step,
            "quadrature": self.quadrature,
            "time_tol": self.time_tol,
            "n_segments": self.n_segments,
            "driver_time": self.driver_time,
            "horizon_diffusion_time": self.horizon_diffusion_time,
            "truncated": self.truncated,
            "refine_saturated": self.refine_saturated,
        }

    def write_metadata(self, file) -> None:
        own = isinstance(file, (str, bytes))
        fh = open(file, "w", encoding="utf-8") if own else file
        try:
            json.dump(self.metadata(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        finally:
            if own:
                fh.close()


# ---------------------------------------------------------------------------
# Local time profile events around the decomposition points
# ---------------------------------------------------------------------------


@dataclass
class ProfileFlags:
    """Flags for the local time profile around one side's decomposition.

    band_1/band_2: within each wall-to-rise stretch, at the stretch's own
    inverse-local-time stop, the binned local time matches
    r e^{v - (W(x) - W(bottom))} within relative delta.  gap_1/gap_2: bins
    between the previous rise and the wall stay below delta r e^v.
    edge: bins between the tall rise and the tall edge stay below the same
    cap at the tall stop.  confined: no occupation beyond the tall edge.
    None marks events the decomposition or horizon could not determine.
    """

    band_1: Optional[bool] = None
    band_2: Optional[bool] = None
    gap_1: Optional[bool] = None
    gap_2: Optional[bool] = None
    edge: Optional[bool] = None
    confined: Optional[bool] = None

    def to_dict(self) -> dict:
        return {
            "band_1": self.band_1,
            "band_2": self.band_2,
            "gap_1": self.gap_1,
            "gap_2": self.gap_2,
            "edge": self.edge,
            "confined": self.confined,
        }


def _signed(side: str, x: float) -> float:
    return x if side == "right" else -x


def _interval_bins(side: str, lo: float, hi: float, bin_width: float):
    n = max(1, int(math.ceil((hi - lo) / bin_width - 1e-12)))
    edges = np.linspace(lo, hi, n + 1)
    signed = [_signed(side, e) for e in edges]
    ivs = [tuple(sorted((signed[i], signed[i + 1]))) for i in range(n)]
    return edges, ivs


def _band_check(real, stop, side, a, b, m, r, v, delta, bin_width):
    if b <= a:
        return True
    edges, ivs = _interval_bins(side, a, b, bin_width)
    masses = real.occupation_of_intervals(stop, ivs)
    L = masses / np.diff(edges)
    centers = 0.5 * (edges[:-1] + edges[1:])
    path = real.env.side(side)
    w_env = np.array([path(c) for c in centers])
    pred = r * np.exp(v - (w_env - path(m)))
    return bool(np.all(np.abs(L / pred - 1.0) <= delta))


def _cap_check(real, stop, side, lo, hi, cap, bin_width):
    if hi <= lo:
        return True
    edges, ivs = _interval_bins(side, lo, hi, bin_width)
    masses = real.occupation_of_intervals(stop, ivs)
    L = masses / np.diff(edges)
    return bool(np.all(L <= cap))


def profile_events(
    real: DiffusionRealization,
    stops: dict,
    dec: ValleyDecomposition,
    r: float,
    v: float,
    delta: float,
    bin_width: float,
    side: str = "right",
) -> ProfileFlags:
    """Evaluate the profile flags of one side.

    ``stops`` maps 'minus_1', 'minus_2', 'plus' to the stop at which the
    corresponding inverse local time was reached; missing or None entries
    leave the dependent flags indeterminate.
    """
    flags = ProfileFlags()
    cap = delta * r * math.exp(v)
    prev_rise = [0.0] + list(dec.rises)
    for i in (1, 2):
        stop = stops.get(f"minus_{i}")
        if stop is None or dec.count < i:
            continue
        a, b, m = dec.walls[i - 1], dec.rises[i - 1], dec.bottoms[i - 1]
        setattr(flags, f"band_{i}", _band_check(real, stop, side, a, b, m, r, v, delta, bin_width))
        setattr(flags, f"gap_{i}", _cap_check(real, stop, side, prev_rise[i - 1], a, cap, bin_width))
    stop_plus = stops.get("plus")
    if stop_plus is not None and dec.plus is not None and dec.plus[2] is not None:
        edge, bottom, rise, wall = dec.plus
        flags.edge = _cap_check(real, stop_plus, side, rise, edge, cap, bin_width)
        b0, b1, _ = real._clipped_segments(stop_plus)
        if b0.size:
            s_edge = float(real.tables.s_at_x(np.array([_signed(side, edge)]))[0])
            if side == "right":
                flags.confined = float(max(np.max(b0), np.max(b1))) <= s_edge
            else:
                flags.confined = float(min(np.min(b0), np.min(b1))) >= s_edge
        else:
            flags.confined = True
    return flags
