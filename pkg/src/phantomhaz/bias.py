"""Quantify the phantom protective effect created by outcome-censored interventions.

An intervention administered at time tau can only be observed when the event
has not happened first, so even a null intervention appears protective in a
naive cross-tabulation. The functions here compute the apparent event
probability among intervention survivors, both the raw joint-mass form and
the properly conditioned form, plus the deliberately biased cross-tab
estimator for demonstrations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from phantomhaz.hazard import (
    DegenerateConditioningError,
    WaitTimeDensity,
    adaptive_simpson,
    null_post_density,
)

__all__ = [
    "PointMassDensity",
    "UniformDensity",
    "TabulatedDensity",
    "PhantomQuery",
    "EmptyStratumError",
    "CrosstabResult",
    "phantom_joint",
    "phantom_conditional",
    "naive_crosstab_effect",
    "conditional_wait_densities",
    "ConditionalWaitDensities",
]

_NORM_TOL = 1e-8


class EmptyStratumError(ValueError):
    """A cross-tab stratum contains no episodes."""


@dataclass(frozen=True)
class PointMassDensity:
    """All administration mass at a single day."""

    at: float

    def expectation(self, fn, lo: float = 0.0, hi: float = np.inf) -> float:
        if lo <= self.at <= hi:
            return float(fn(self.at))
        return 0.0

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.full(size, self.at)

    def total_mass(self) -> float:
        return 1.0


@dataclass(frozen=True)
class UniformDensity:
    """Administration time uniform on [a, b]."""

    a: float
    b: float

    def __post_init__(self):
        if not 0 <= self.a < self.b:
            raise ValueError("need 0 <= a < b")

    def expectation(self, fn, lo: float = 0.0, hi: float = np.inf) -> float:
        lo = max(lo, self.a)
        hi = min(hi, self.b)
        if hi <= lo:
            return 0.0
        width = self.b - self.a
        return adaptive_simpson(lambda t: fn(t) / width, lo, hi)

    def sample(self, rng, size):
        return rng.uniform(self.a, self.b, size=size)

    def total_mass(self) -> float:
        return 1.0


@dataclass(frozen=True)
class TabulatedDensity:
    """Histogram administration-time density: bin edges plus bin probabilities."""

    edges: tuple[float, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=float)
        probs = np.asarray(self.probs, dtype=float)
        if len(edges) != len(probs) + 1 or np.any(np.diff(edges) <= 0):
            raise ValueError("need strictly increasing edges, one prob per bin")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > _NORM_TOL:
            raise ValueError("bin probabilities must be nonnegative and sum to 1")
        object.__setattr__(self, "edges", tuple(edges.tolist()))
        object.__setattr__(self, "probs", tuple(probs.tolist()))

    def expectation(self, fn, lo: float = 0.0, hi: float = np.inf) -> float:
        total = 0.0
        for i, p in enumerate(self.probs):
            a, b = self.edges[i], self.edges[i + 1]
            seg_lo, seg_hi = max(lo, a), min(hi, b)
            if seg_hi <= seg_lo or p == 0.0:
                continue
            dens = p / (b - a)
            total += adaptive_simpson(lambda t: fn(t) * dens, seg_lo, seg_hi)
        return total

    def sample(self, rng, size):
        idx = rng.choice(len(self.probs), size=size, p=np.asarray(self.probs))
        lo = np.asarray(self.edges)[idx]
        hi = np.asarray(self.edges)[idx + 1]
        return rng.uniform(lo, hi)

    def total_mass(self) -> float:
        return float(np.sum(self.probs))


@dataclass(frozen=True)
class PhantomQuery:
    """Inputs for the phantom-effect formulas.

    f_inf: pre-treatment wait-time density. admin_density: density of the
    administration time tau. horizon: evaluation horizon c in days.
    """

    f_inf: WaitTimeDensity
    admin_density: object
    horizon: float

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if abs(self.admin_density.total_mass() - 1.0) > _NORM_TOL:
            raise ValueError("admin density must be normalized")


def phantom_joint(q: PhantomQuery) -> float:
    """Apparent cumulative event probability, raw joint-mass form.

    Computes the integral of (S_inf(tau) - S_inf(c)) against the
    administration density over [0, c], exactly as the phantom-effect
    formula is written. Note the result is a joint mass Pr(tau <= T <= c),
    not yet normalized by the probability of observing the intervention;
    see phantom_conditional for the properly conditioned quantity.
    """
    s_c = float(q.f_inf.survival(q.horizon))
    return q.admin_density.expectation(
        lambda tau: float(q.f_inf.survival(tau)) - s_c, 0.0, q.horizon
    )


def phantom_conditional(q: PhantomQuery) -> float:
    """Apparent event probability among episodes where the intervention was observed.

    phantom_joint divided by Pr(T >= tau) = int S_inf(tau) h(tau) dtau. With a
    point mass at day 7 and the 7%/17% cumulative shape this reproduces the
    (0.17 - 0.07) / (1 - 0.07) ~ 10.75% apparent rate of a null intervention.
    """
    denom = q.admin_density.expectation(lambda tau: float(q.f_inf.survival(tau)))
    if denom <= 1e-12:
        raise DegenerateConditioningError(
            "survival mass at administration times is zero"
        )
    return phantom_joint(q) / denom


class CrosstabResult(NamedTuple):
    rate_treated: float
    rate_untreated: float
    apparent_effect: float
    n_treated: int
    n_untreated: int

    def standard_error(self) -> float:
        """Binomial SE of the apparent effect (difference of the two rates)."""
        vt = self.rate_treated * (1 - self.rate_treated) / self.n_treated
        vu = self.rate_untreated * (1 - self.rate_untreated) / self.n_untreated
        return float(np.sqrt(vt + vu))


def naive_crosstab_effect(episodes: Sequence, horizon: float, category: str) -> CrosstabResult:
    """The deliberately biased two-group comparison of event rates.

    Cross-tabulates event-within-horizon against ever having received the
    given intervention category. Because receiving the intervention requires
    surviving until it, this estimator is negatively biased for a null
    intervention; it exists to demonstrate the bias, not to estimate effects.

    Episodes must be observed (event or censoring) through the horizon.
    """
    treated = []
    untreated = []
    for ep in episodes:
        event_within = bool(ep.event_observed) and ep.observed_time <= horizon
        if not event_within and ep.observed_time < horizon:
            raise ValueError(
                f"episode {ep.id!r} censored at {ep.observed_time} before horizon {horizon}"
            )
        got = any(it.category == category for it in ep.interventions.items)
        (treated if got else untreated).append(event_within)
    if not treated:
        raise EmptyStratumError(f"treated stratum for category {category!r} is empty")
    if not untreated:
        raise EmptyStratumError(f"untreated stratum for category {category!r} is empty")
    rate_t = float(np.mean(treated))
    rate_u = float(np.mean(untreated))
    return CrosstabResult(rate_t, rate_u, rate_t - rate_u, len(treated), len(untreated))


@dataclass(frozen=True)
class ConditionalWaitDensities:
    """Wait-time densities conditional on whether the intervention was observed.

    ``unobserved`` is the as-written form f_inf(T), which does not integrate
    to 1 over the conditioning event; ``unobserved_normalized`` is the
    truncation-normalized alternative. ``observed`` integrates to
    Pr(T >= tau) when the post-treatment densities are null (a defective
    density, by construction).
    """

    unobserved: Callable[[float], float]
    unobserved_normalized: Callable[[float], float]
    observed: Callable[[float], float]


def conditional_wait_densities(
    f_inf: WaitTimeDensity,
    admin_density,
    post_family=None,
) -> ConditionalWaitDensities:
    """Densities of T split by whether the intervention was observed.

    post_family supplies the post-treatment density given the administration
    time; defaults to the null (no effect) family.
    """
    if abs(admin_density.total_mass() - 1.0) > _NORM_TOL:
        raise ValueError("admin density must be normalized")

    def g_at(tau: float) -> WaitTimeDensity:
        if post_family is None:
            return null_post_density(f_inf, tau)
        from phantomhaz.hazard import InterventionItem

        return post_family.after((InterventionItem(tau, "em"),))

    def unobserved(t: float) -> float:
        return float(f_inf.pdf(t))

    z_trunc = admin_density.expectation(lambda tau: float(f_inf.cdf(tau)))

    def unobserved_normalized(t: float) -> float:
        mass_after_t = admin_density.expectation(lambda tau: 1.0, lo=t)
        if z_trunc <= 1e-12:
            raise DegenerateConditioningError("Pr(T < tau) is zero")
        return float(f_inf.pdf(t)) * mass_after_t / z_trunc

    def observed(t: float) -> float:
        def integrand(tau: float) -> float:
            return float(g_at(tau).pdf(t - tau)) * float(f_inf.survival(tau))

        return admin_density.expectation(integrand, 0.0, t)

    return ConditionalWaitDensities(unobserved, unobserved_normalized, observed)
