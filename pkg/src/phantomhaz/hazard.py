"""Piecewise-exponential hazards and intervention-censored wait-time densities.

All time arguments are days since discharge. Hazard intervals are
left-closed/right-open, so a time exactly on a breakpoint (or exactly at an
intervention time) uses the later interval's hazard. Everything here is
immutable and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

__all__ = [
    "DegenerateConditioningError",
    "PiecewiseHazard",
    "WaitTimeDensity",
    "InterventionItem",
    "InterventionSchedule",
    "PostTreatmentFamily",
    "NullPostFamily",
    "HazardJumpFamily",
    "CompositeWaitDistribution",
    "null_post_density",
    "composite_density_single",
    "composite_density_multi",
    "sample_wait_time",
    "adaptive_simpson",
]

DEFAULT_BREAKPOINTS = (7.0, 28.0, 63.0)
DEFAULT_TAIL_HORIZON = 3650.0


class DegenerateConditioningError(ValueError):
    """Raised when conditioning on an event of (numerically) zero probability."""


def adaptive_simpson(
    fn: Callable[[float], float],
    a: float,
    b: float,
    tol: float = 1e-9,
    max_depth: int = 40,
) -> float:
    """Adaptive Simpson quadrature of ``fn`` over [a, b] to absolute tolerance ``tol``."""
    if b <= a:
        return 0.0

    def simpson(x0, x2, f0, f1, f2):
        return (x2 - x0) / 6.0 * (f0 + 4.0 * f1 + f2)

    def recurse(x0, x2, f0, f1, f2, whole, eps, depth):
        xm = 0.5 * (x0 + x2)
        xl = 0.5 * (x0 + xm)
        xr = 0.5 * (xm + x2)
        fl = fn(xl)
        fr = fn(xr)
        left = simpson(x0, xm, f0, fl, f1)
        right = simpson(xm, x2, f1, fr, f2)
        if depth <= 0 or abs(left + right - whole) <= 15.0 * eps:
            return left + right + (left + right - whole) / 15.0
        return recurse(x0, xm, f0, fl, f1, left, 0.5 * eps, depth - 1) + recurse(
            xm, x2, f1, fr, f2, right, 0.5 * eps, depth - 1
        )

    mid = 0.5 * (a + b)
    fa, fm, fb = fn(a), fn(mid), fn(b)
    whole = simpson(a, b, fa, fm, fb)
    return recurse(a, b, fa, fm, fb, whole, tol, max_depth)


@dataclass(frozen=True)
class PiecewiseHazard:
    """Piecewise-constant hazard over left-closed/right-open day intervals.

    Parameters
    ----------
    breakpoints : sequence of float
        Strictly increasing positive times splitting [0, inf) into
        ``len(breakpoints) + 1`` intervals.
    log_hazards : sequence of float
        One log hazard (log events per day) per interval.

    The implied hazard is ``lambda(t) = exp(log_hazards[i])`` on
    ``[t_{i-1}, t_i)``, with cumulative hazard ``Lambda``, density
    ``f(t) = lambda(t) exp(-Lambda(t))`` and survival
    ``S(t) = exp(-Lambda(t))``. All of these are exact closed forms.
    """

    breakpoints: tuple[float, ...]
    log_hazards: tuple[float, ...]

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        lh = np.asarray(self.log_hazards, dtype=float)
        if bp.ndim != 1 or lh.ndim != 1:
            raise ValueError("breakpoints and log_hazards must be 1-d")
        if len(lh) != len(bp) + 1:
            raise ValueError("need exactly len(breakpoints) + 1 log hazards")
        if len(bp) and (np.any(bp <= 0) or np.any(np.diff(bp) <= 0)):
            raise ValueError("breakpoints must be strictly increasing and positive")
        if not np.all(np.isfinite(lh)):
            raise ValueError("log hazards must be finite")
        object.__setattr__(self, "breakpoints", tuple(bp.tolist()))
        object.__setattr__(self, "log_hazards", tuple(lh.tolist()))

    @classmethod
    def constant(cls, rate: float) -> "PiecewiseHazard":
        """Exponential model with a single hazard ``rate`` per day."""
        return cls(breakpoints=(), log_hazards=(float(np.log(rate)),))

    @property
    def n_intervals(self) -> int:
        return len(self.log_hazards)

    @property
    def hazards(self) -> np.ndarray:
        return np.exp(np.asarray(self.log_hazards))

    def interval_index(self, t) -> np.ndarray:
        """Index of the interval containing t (breakpoints belong to the later interval)."""
        return np.searchsorted(np.asarray(self.breakpoints), np.asarray(t), side="right")

    def hazard_at(self, t):
        self._check_domain(t)
        return self.hazards[self.interval_index(t)]

    def cumulative_hazard(self, t):
        """Lambda(t), exact. Raises on negative t."""
        self._check_domain(t)
        t = np.asarray(t, dtype=float)
        lower = np.concatenate([[0.0], self.breakpoints])
        upper = np.concatenate([self.breakpoints, [np.inf]])
        overlap = np.clip(t[..., None], lower, upper) - lower
        return overlap @ self.hazards

    def survival(self, t):
        return np.exp(-self.cumulative_hazard(t))

    def density(self, t):
        """f(t) = lambda(t) exp(-Lambda(t))."""
        return self.hazard_at(t) * self.survival(t)

    def inverse_cumulative_hazard(self, y):
        """Smallest t with Lambda(t) = y; Lambda is piecewise linear and increasing."""
        y = np.asarray(y, dtype=float)
        if np.any(y < 0):
            raise ValueError("cumulative hazard values must be nonnegative")
        lower = np.concatenate([[0.0], self.breakpoints])
        lengths = np.diff(np.concatenate([lower, [np.inf]]))
        cum = np.concatenate([[0.0], np.cumsum(self.hazards[:-1] * lengths[:-1])])
        idx = np.minimum(
            np.searchsorted(cum, y, side="right") - 1, self.n_intervals - 1
        )
        idx = np.maximum(idx, 0)
        return lower[idx] + (y - cum[idx]) / self.hazards[idx]

    def shifted(self, tau: float) -> "PiecewiseHazard":
        """Hazard of the remaining wait after tau: s -> lambda(tau + s)."""
        if tau < 0:
            raise ValueError("tau must be nonnegative")
        if tau == 0:
            return self
        idx = int(self.interval_index(tau))
        bp = tuple(b - tau for b in self.breakpoints[idx:])
        return PiecewiseHazard(bp, self.log_hazards[idx:])

    def with_log_shift(self, delta: float) -> "PiecewiseHazard":
        """Multiply the hazard everywhere by exp(delta)."""
        return PiecewiseHazard(
            self.breakpoints, tuple(lh + delta for lh in self.log_hazards)
        )

    def with_jumps(self, jumps: Sequence[tuple[float, float]]) -> "PiecewiseHazard":
        """Hazard with log-hazard offsets applied from each jump time onward.

        ``jumps`` is a sequence of (time, log offset); offsets at identical
        times add. The offset is active on [time, inf).
        """
        times = sorted({float(t) for t, _ in jumps if t > 0})
        bp = sorted(set(self.breakpoints) | set(times))
        starts = [0.0] + bp
        base = self.hazards
        base_idx = np.searchsorted(np.asarray(self.breakpoints), starts, side="right")
        offs = np.zeros(len(starts))
        for t, delta in jumps:
            offs += np.where(np.asarray(starts) >= t, delta, 0.0)
        log_h = np.log(base[base_idx]) + offs
        return PiecewiseHazard(tuple(bp), tuple(log_h.tolist()))

    def interval_masses(self) -> np.ndarray:
        """Probability mass of the event falling in each hazard interval.

        The last entry is the mass of the final (unbounded) interval, so the
        total is 1 whenever the terminal hazard is positive.
        """
        edges = np.concatenate([[0.0], self.breakpoints])
        s = np.exp(-self.cumulative_hazard(edges))
        return np.concatenate([-np.diff(s), [s[-1]]])

    @staticmethod
    def _check_domain(t):
        if np.any(np.asarray(t) < 0):
            raise ValueError("times must be nonnegative")


class WaitTimeDensity:
    """A wait-time density on [0, inf), either hazard-backed or a raw callable.

    Hazard-backed densities evaluate pdf/cdf/survival in closed form. A raw
    callable is integrated by adaptive Simpson quadrature (absolute tolerance
    1e-9); mass beyond ``tail_horizon`` is treated as a single survival lump.
    """

    def __init__(
        self,
        hazard: PiecewiseHazard | None = None,
        pdf_fn: Callable[[float], float] | None = None,
        survival_fn: Callable[[float], float] | None = None,
        tail_horizon: float = DEFAULT_TAIL_HORIZON,
    ):
        if (hazard is None) == (pdf_fn is None):
            raise ValueError("provide exactly one of hazard or pdf_fn")
        self.hazard = hazard
        self._pdf_fn = pdf_fn
        self._survival_fn = survival_fn
        self.tail_horizon = float(tail_horizon)

    @classmethod
    def from_hazard(cls, hazard: PiecewiseHazard, tail_horizon: float = DEFAULT_TAIL_HORIZON):
        return cls(hazard=hazard, tail_horizon=tail_horizon)

    @classmethod
    def from_callable(
        cls,
        pdf_fn: Callable[[float], float],
        tail_horizon: float = DEFAULT_TAIL_HORIZON,
        survival_fn: Callable[[float], float] | None = None,
    ):
        return cls(pdf_fn=pdf_fn, survival_fn=survival_fn, tail_horizon=tail_horizon)

    def pdf(self, t):
        if self.hazard is not None:
            return self.hazard.density(t)
        t_arr = np.asarray(t, dtype=float)
        if np.any(t_arr < 0):
            raise ValueError("times must be nonnegative")
        if t_arr.ndim == 0:
            return float(self._pdf_fn(float(t_arr)))
        return np.array([self._pdf_fn(float(ti)) for ti in t_arr])

    def survival(self, t):
        if self.hazard is not None:
            return self.hazard.survival(t)
        t_arr = np.asarray(t, dtype=float)
        if t_arr.ndim > 0:
            return np.array([self.survival(float(ti)) for ti in t_arr])
        t_val = float(t_arr)
        if t_val < 0:
            raise ValueError("times must be nonnegative")
        if self._survival_fn is not None:
            return float(self._survival_fn(t_val))
        t_val = min(t_val, self.tail_horizon)
        mass = adaptive_simpson(self._pdf_fn, 0.0, t_val)
        return float(np.clip(1.0 - mass, 0.0, 1.0))

    def cdf(self, t):
        return 1.0 - self.survival(t)

    def total_mass(self) -> float:
        """Integral of the density over [0, inf); should be 1 for a proper density."""
        if self.hazard is not None:
            return float(self.hazard.interval_masses().sum())
        inside = adaptive_simpson(self._pdf_fn, 0.0, self.tail_horizon)
        if self._survival_fn is not None:
            return inside + float(self._survival_fn(self.tail_horizon))
        return inside


@dataclass(frozen=True)
class InterventionItem:
    time: float
    category: str
    effect: float = 0.0  # log hazard ratio, active on [time, inf)


@dataclass(frozen=True)
class InterventionSchedule:
    """Ordered intervention times with category labels and log-hazard effects.

    Items are kept sorted by (time, category); simultaneous interventions
    compose by summing their log-hazard effects. ``admin_density`` is an
    optional density over the administration time, used only by the bias
    analysis tools.
    """

    items: tuple[InterventionItem, ...] = ()
    admin_density: object | None = None

    def __post_init__(self):
        items = tuple(sorted(self.items, key=lambda it: (it.time, it.category)))
        if any(it.time < 0 for it in items):
            raise ValueError("intervention times must be nonnegative")
        object.__setattr__(self, "items", items)

    @classmethod
    def of(cls, *items: tuple[float, str, float]) -> "InterventionSchedule":
        return cls(tuple(InterventionItem(float(t), str(c), float(e)) for t, c, e in items))

    def __len__(self) -> int:
        return len(self.items)

    @property
    def times(self) -> tuple[float, ...]:
        return tuple(it.time for it in self.items)

    def jumps(self) -> list[tuple[float, float]]:
        return [(it.time, it.effect) for it in self.items]


class PostTreatmentFamily(Protocol):
    """Density of the remaining wait after each prefix of applied interventions."""

    def after(self, prefix: tuple[InterventionItem, ...]) -> WaitTimeDensity: ...


class NullPostFamily:
    """Post-treatment densities that leave the wait-time law unchanged.

    After interventions up to time tau, the remaining wait follows the
    conditional density f_inf(tau + s) / S_inf(tau): exactly the no-effect
    condition, so the composite density collapses back to f_inf.
    """

    def __init__(self, f_inf: WaitTimeDensity):
        self.f_inf = f_inf

    def after(self, prefix: tuple[InterventionItem, ...]) -> WaitTimeDensity:
        if not prefix:
            return self.f_inf
        return null_post_density(self.f_inf, prefix[-1].time)


class HazardJumpFamily:
    """Post-treatment densities from persistent log-hazard-ratio jumps.

    After interventions (tau_1, e_1), ..., (tau_n, e_n) the remaining-wait
    hazard is s -> lambda(tau_n + s) * exp(e_1 + ... + e_n): every applied
    effect persists for all later times.
    """

    def __init__(self, base: PiecewiseHazard):
        self.base = base

    def after(self, prefix: tuple[InterventionItem, ...]) -> WaitTimeDensity:
        if not prefix:
            return WaitTimeDensity.from_hazard(self.base)
        tau = prefix[-1].time
        total = sum(it.effect for it in prefix)
        return WaitTimeDensity.from_hazard(self.base.shifted(tau).with_log_shift(total))


def null_post_density(f_inf: WaitTimeDensity, tau: float) -> WaitTimeDensity:
    """The unique post-treatment density with zero effect: f_inf(tau+s)/S_inf(tau).

    Raises DegenerateConditioningError when S_inf(tau) is numerically zero.
    """
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    s_tau = float(f_inf.survival(tau))
    if s_tau <= 1e-12:
        raise DegenerateConditioningError(
            f"survival at tau={tau} is {s_tau:.3e}; cannot condition on T >= tau"
        )
    if f_inf.hazard is not None:
        return WaitTimeDensity.from_hazard(f_inf.hazard.shifted(tau))
    return WaitTimeDensity.from_callable(
        lambda s: f_inf.pdf(tau + s) / s_tau,
        tail_horizon=max(f_inf.tail_horizon - tau, 1.0),
        survival_fn=lambda s: f_inf.survival(tau + s) / s_tau,
    )


class CompositeWaitDistribution:
    """Wait-time distribution when scheduled interventions modify the hazard.

    Before the first intervention the wait follows ``f_inf``. On reaching each
    scheduled time the intervention is applied (it materializes only if the
    event has not yet occurred) and the remaining wait follows the family's
    post-treatment density for the applied prefix, weighted by the probability
    of surviving to that point.

    Simultaneous interventions are applied together. Segment boundaries are
    left-closed: the post-treatment density governs t >= tau.
    """

    def __init__(
        self,
        f_inf: WaitTimeDensity,
        family: PostTreatmentFamily,
        schedule: InterventionSchedule,
    ):
        times = schedule.times
        if any(times[i] > times[i + 1] for i in range(len(times) - 1)):
            raise ValueError("schedule times must be nondecreasing")
        self.f_inf = f_inf
        self.family = family
        self.schedule = schedule
        # distinct jump times and the item prefix applied at each
        uniq: list[float] = []
        for t in times:
            if not uniq or t > uniq[-1]:
                uniq.append(t)
        self._jump_times = uniq
        self._prefixes = [
            tuple(it for it in schedule.items if it.time <= u) for u in uniq
        ]
        self._segments = [f_inf] + [self.family.after(p) for p in self._prefixes]
        self._entry_surv = self._entry_survivals()

    def _entry_survivals(self) -> list[float]:
        """Probability of reaching the start of each segment (1 minus earlier mass)."""
        surv = [1.0]
        bounds = [0.0] + self._jump_times
        for k, dens in enumerate(self._segments[:-1]):
            start = bounds[k]
            end = bounds[k + 1]
            if k == 0:
                seg_mass = float(dens.cdf(end))
            else:
                seg_mass = surv[k] * float(dens.cdf(end - start))
            surv.append(max(surv[k] - seg_mass, 0.0))
        return surv

    def _segment_of(self, t: float) -> int:
        return int(np.searchsorted(np.asarray(self._jump_times), t, side="right"))

    def pdf(self, t):
        t_arr = np.asarray(t, dtype=float)
        if t_arr.ndim > 0:
            return np.array([self.pdf(float(ti)) for ti in t_arr])
        t_val = float(t_arr)
        if t_val < 0:
            raise ValueError("times must be nonnegative")
        k = self._segment_of(t_val)
        if k == 0:
            return float(self.f_inf.pdf(t_val))
        start = self._jump_times[k - 1]
        return float(self._segments[k].pdf(t_val - start)) * self._entry_surv[k]

    def survival(self, t):
        t_arr = np.asarray(t, dtype=float)
        if t_arr.ndim > 0:
            return np.array([self.survival(float(ti)) for ti in t_arr])
        t_val = float(t_arr)
        if t_val < 0:
            raise ValueError("times must be nonnegative")
        k = self._segment_of(t_val)
        if k == 0:
            return float(self.f_inf.survival(t_val))
        start = self._jump_times[k - 1]
        return self._entry_surv[k] * float(self._segments[k].survival(t_val - start))

    def cdf(self, t):
        return 1.0 - self.survival(t)

    def total_mass(self) -> float:
        k = len(self._segments) - 1
        return 1.0 - self._entry_surv[k] * (1.0 - self._segments[k].total_mass())

    def sample(self, rng: np.random.Generator, size: int | None = None):
        """Inverse-CDF draws; requires every segment density to be hazard-backed."""
        hazards = [d.hazard for d in self._segments]
        if any(h is None for h in hazards):
            raise ValueError("sampling requires piecewise-exponential segment densities")
        n = 1 if size is None else int(size)
        e = rng.exponential(size=n)
        out = np.full(n, np.nan)
        remaining = e.copy()
        active = np.ones(n, dtype=bool)
        bounds = self._jump_times + [np.inf]
        start = 0.0
        for k, h in enumerate(hazards):
            width = bounds[k] - start
            cap = float(h.cumulative_hazard(width)) if np.isfinite(width) else np.inf
            stop_here = active & (remaining <= cap)
            if np.any(stop_here):
                out[stop_here] = start + h.inverse_cumulative_hazard(remaining[stop_here])
            active &= ~stop_here
            if not np.any(active):
                break
            if np.isfinite(width):
                remaining = np.where(active, remaining - cap, remaining)
                start = bounds[k]
        if size is None:
            return float(out[0])
        return out


def composite_density_single(
    f_inf: WaitTimeDensity, g: WaitTimeDensity, tau: float, t
) -> float:
    """Effective wait-time density for a single intervention at tau.

    Returns f_inf(t) for t < tau, and g(t - tau) * S_inf(tau) for t >= tau.
    """
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ValueError("times must be nonnegative")
    if t_arr.ndim > 0:
        return np.array([composite_density_single(f_inf, g, tau, float(ti)) for ti in t_arr])
    t_val = float(t_arr)
    if t_val < tau:
        return float(f_inf.pdf(t_val))
    return float(g.pdf(t_val - tau)) * float(f_inf.survival(tau))


def composite_density_multi(
    f_inf: WaitTimeDensity,
    gs: PostTreatmentFamily,
    schedule: InterventionSchedule,
    t,
):
    """Effective wait-time density under a schedule of interventions."""
    return CompositeWaitDistribution(f_inf, gs, schedule).pdf(t)


def sample_wait_time(
    f_inf: WaitTimeDensity,
    gs: PostTreatmentFamily,
    schedule: InterventionSchedule,
    rng_seed: int | np.random.Generator,
    size: int | None = None,
):
    """Draw wait times from the composite density; deterministic given the seed."""
    rng = (
        rng_seed
        if isinstance(rng_seed, np.random.Generator)
        else np.random.default_rng(rng_seed)
    )
    return CompositeWaitDistribution(f_inf, gs, schedule).sample(rng, size=size)
