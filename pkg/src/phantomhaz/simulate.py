"""Synthetic cohort generator with known ground truth.

Episodes are drawn forward from the generative model: cohort cell and binary
covariates first, then intended intervention times per category, then the
wait time from the composite hazard in which an intervention only
materializes if the event has not yet occurred. Only materialized
interventions (tau strictly before the observed time) are recorded, which is
precisely the censoring mechanism that creates the survivors bias this
package corrects for.

All randomness flows from the config seed through named substreams, so the
wait-time draws are unchanged when the intervention mechanism is toggled (the
basis of the null-effect invariance check).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from phantomhaz.hazard import (
    InterventionItem,
    InterventionSchedule,
    PiecewiseHazard,
)
from phantomhaz.model import (
    EpisodeRecord,
    ModelConfig,
    ModelParams,
    PARAM_NAMES,
)
from phantomhaz.quilt import Axis

__all__ = [
    "TimingRule",
    "SimConfig",
    "SimResult",
    "sim_config_from_dict",
    "simulate",
    "calibrate_baseline",
    "make_truth",
]

_COV_STREAM = 0xC0
_TIMING_STREAM = 0x71
_WAIT_STREAM = 0xE1


@dataclass(frozen=True)
class TimingRule:
    """How intended intervention times arise for one category.

    kinds: ``point_mass`` (fixed day, with administration probability
    ``prob``), ``uniform`` (one time in [a, b], probability ``prob``),
    ``first_event`` (first arrival of a Poisson process at the episode's
    predicted rate), ``poisson_process`` (all arrivals of that process up to
    the censoring day, making the recorded counts exactly Poisson with the
    observed exposure).
    """

    kind: str
    day: float = 0.0
    a: float = 0.0
    b: float = 0.0
    prob: float = 1.0

    def __post_init__(self):
        if self.kind not in ("point_mass", "uniform", "first_event", "poisson_process"):
            raise ValueError(f"unknown timing rule {self.kind!r}")
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError("prob must be in [0, 1]")

    @classmethod
    def from_dict(cls, obj: dict) -> "TimingRule":
        kw = dict(obj)
        kind = kw.pop("kind")
        if "window" in kw:
            kw["a"], kw["b"] = kw.pop("window")
        return cls(kind=kind, **kw)


@dataclass
class SimConfig:
    n_episodes: int
    axes: tuple[Axis, ...]
    feature_rates: tuple[float, ...]
    categories: tuple[str, ...]
    timing: dict
    truth: ModelParams
    breakpoints: tuple[float, ...] = (7.0, 28.0, 63.0)
    cell_probs: np.ndarray | None = None
    censor_day: float = 365.0
    seed: int = 0
    horizons: tuple[float, ...] = (30.0, 90.0)
    pair_flip: float = 0.0
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.censor_day <= 0:
            raise ValueError("censor_day must be positive")
        rates = np.asarray(self.feature_rates, dtype=float)
        if np.any((rates < 0) | (rates > 1)):
            raise ValueError("feature rates must be probabilities")
        if not self.feature_names:
            self.feature_names = tuple(f"f{i:02d}" for i in range(len(rates)))
        shape = tuple(a.size for a in self.axes)
        if self.cell_probs is None:
            self.cell_probs = np.full(shape, 1.0 / int(np.prod(shape)))
        else:
            self.cell_probs = np.asarray(self.cell_probs, dtype=float).reshape(shape)
            if abs(self.cell_probs.sum() - 1.0) > 1e-9 or np.any(self.cell_probs < 0):
                raise ValueError("cell_probs must be a probability table")
        for cat in self.categories:
            if cat not in self.timing:
                raise ValueError(f"no timing rule for category {cat!r}")


def calibrate_baseline(targets: Sequence[tuple[float, float]]) -> PiecewiseHazard:
    """Per-interval hazards hitting given (day, cumulative probability) targets.

    Solves log-survival ratios segment by segment, so the resulting hazard's
    CDF passes through every target exactly. The final interval keeps the last
    segment's hazard.
    """
    if not targets:
        raise ValueError("need at least one target")
    prev_day, prev_s = 0.0, 1.0
    log_lams = []
    days = []
    for day, p in targets:
        if day <= prev_day:
            raise ValueError("target days must be strictly increasing")
        if not 0.0 <= p < 1.0:
            raise ValueError("target probabilities must lie in [0, 1)")
        s = 1.0 - p
        if s >= prev_s:
            raise ValueError(
                f"infeasible target ({day}, {p}): cumulative probability must increase"
            )
        log_lams.append(float(np.log(np.log(prev_s / s) / (day - prev_day))))
        days.append(float(day))
        prev_day, prev_s = day, s
    return PiecewiseHazard(tuple(days), tuple(log_lams + [log_lams[-1]]))


def make_truth(
    config: ModelConfig,
    spec: dict,
    rng: np.random.Generator,
    cell_probs: np.ndarray | None = None,
) -> ModelParams:
    """Ground-truth parameters from zero-order values plus centered heterogeneity.

    ``spec`` carries `<param>_zero` arrays and optionally
    ``first_order_sd[param]``; first-order terms are drawn Gaussian and the
    decomposition is canonicalized under the cell probabilities, so the
    zero-order values are exactly the population means (the identified
    quantity a fit recovers).
    """
    params = ModelParams.zeros(config)
    zero_defaults = {"alpha": -5.0}
    for name in PARAM_NAMES:
        dec = getattr(params, name)
        key = f"{name}_zero"
        zero = np.asarray(
            spec.get(key, zero_defaults.get(name, 0.0)), dtype=float
        )
        sd = spec.get("first_order_sd", {}).get(name, 0.0)
        if sd > 0:
            for subset in dec.subsets():
                if len(subset) == 1:
                    dec.terms[subset][...] = rng.normal(
                        scale=sd, size=dec.terms[subset].shape
                    )
            if cell_probs is not None:
                pos = config.axes_for(name)
                probs = np.asarray(cell_probs)
                w = [
                    probs.sum(axis=tuple(d for d in range(probs.ndim) if d != p))
                    for p in pos
                ]
                centered = dec.canonicalized(weights=w)
            else:
                centered = dec.canonicalized(
                    weights=[np.full(s, 1.0 / s) for s in dec.lattice.shape]
                )
            setattr(params, name, centered)
            dec = centered
        dec.terms[()][...] = np.broadcast_to(zero, dec.value_shape)
    return params


def _intended_times(cfg: SimConfig, cat: str, mu: np.ndarray, rng) -> list:
    """Per-episode lists of intended intervention times for one category."""
    n = cfg.n_episodes
    rule: TimingRule = cfg.timing[cat]
    out = [[] for _ in range(n)]
    if rule.kind == "point_mass":
        assigned = rng.random(n) < rule.prob
        for i in np.flatnonzero(assigned):
            out[i] = [rule.day]
    elif rule.kind == "uniform":
        assigned = rng.random(n) < rule.prob
        times = rng.uniform(rule.a, rule.b, size=n)
        for i in np.flatnonzero(assigned):
            out[i] = [float(times[i])]
    elif rule.kind == "first_event":
        waits = rng.exponential(size=n) * (365.0 / np.maximum(mu, 1e-12))
        for i in range(n):
            if waits[i] < cfg.censor_day:
                out[i] = [float(waits[i])]
    elif rule.kind == "poisson_process":
        counts = rng.poisson(mu * cfg.censor_day / 365.0)
        total = int(counts.sum())
        times = rng.uniform(0.0, cfg.censor_day, size=total)
        pos = 0
        for i in range(n):
            k = int(counts[i])
            out[i] = sorted(times[pos : pos + k].tolist())
            pos += k
    return out


def sim_config_from_dict(obj: dict, seed: int | None = None) -> SimConfig:
    """Build a SimConfig (including ground-truth parameters) from a config dict.

    The ``truth`` section gives zero-order arrays per parameter (or
    ``calibrate_targets`` for the baseline), optional first-order
    heterogeneity scales, and its own seed. ``seed`` overrides the config's
    simulation seed.
    """
    axes = tuple(Axis(a["name"], tuple(a["levels"])) for a in obj["axes"])
    feats = obj.get("features", [])
    if feats and isinstance(feats[0], dict):
        names = tuple(f["name"] for f in feats)
        rates = tuple(float(f["rate"]) for f in feats)
    else:
        rates = tuple(float(r) for r in obj.get("feature_rates", []))
        names = tuple(f"f{i:02d}" for i in range(len(rates)))
    categories = tuple(obj.get("categories", ()))
    breakpoints = tuple(obj.get("breakpoints", (7.0, 28.0, 63.0)))
    truth_spec = dict(obj.get("truth", {}))
    if "calibrate_targets" in truth_spec:
        pem = calibrate_baseline(
            [(float(d), float(p)) for d, p in truth_spec.pop("calibrate_targets")]
        )
        if pem.breakpoints != breakpoints:
            raise ValueError(
                "calibrate_targets days must equal the simulation breakpoints"
            )
        truth_spec["alpha_zero"] = list(pem.log_hazards)
    max_orders = truth_spec.pop("max_orders", None) or {
        p: 2 for p in ("alpha", "beta", "gamma", "eta", "nu", "xi")
    }
    mcfg = ModelConfig(
        axes=axes,
        feature_names=names,
        categories=categories,
        breakpoints=breakpoints,
        max_orders=max_orders,
    )
    cell_probs = obj.get("cell_probs")
    if cell_probs is not None:
        cell_probs = np.asarray(cell_probs, dtype=float).reshape(
            tuple(a.size for a in axes)
        )
    truth_rng = np.random.default_rng(int(truth_spec.pop("seed", 0)))
    truth = make_truth(mcfg, truth_spec, truth_rng, cell_probs=cell_probs)
    timing = {
        cat: TimingRule.from_dict(rule) for cat, rule in obj.get("timing", {}).items()
    }
    return SimConfig(
        n_episodes=int(obj["n_episodes"]),
        axes=axes,
        feature_rates=rates,
        categories=categories,
        timing=timing,
        truth=truth,
        breakpoints=breakpoints,
        cell_probs=cell_probs,
        censor_day=float(obj.get("censor_day", 365.0)),
        seed=int(obj["seed"] if seed is None else seed),
        horizons=tuple(obj.get("horizons", (30.0, 90.0))),
        pair_flip=float(obj.get("pair_flip", 0.0)),
        feature_names=names,
    )


@dataclass
class SimResult:
    """Episodes plus ground truth; unpacks like (episodes, truth).

    ``true_risks`` maps column names (true_risk_<horizon>) to the event
    probability within that horizon under the true hazard and the episode's
    recorded interventions, for scoring oracles.
    """

    episodes: list
    truth: ModelParams
    true_risks: dict

    def __iter__(self):
        yield self.episodes
        yield self.truth


def simulate(cfg: SimConfig) -> SimResult:
    """Draw a cohort from the generative model; returns (episodes, truth).

    Recorded interventions satisfy tau < observed time by construction;
    intervention counts are the recorded counts and exposure is the observed
    time, so the output feeds the model likelihood with no transformation.
    True event risks at the configured horizons are attached for scoring
    oracles (see ``episode.extras`` equivalents on the emitted table).
    """
    truth = cfg.truth
    n = cfg.n_episodes
    n_feat = len(cfg.feature_rates)
    cats = cfg.categories
    shape = tuple(a.size for a in cfg.axes)

    rng_cov = np.random.default_rng(np.random.SeedSequence((cfg.seed, _COV_STREAM)))
    rng_tim = np.random.default_rng(np.random.SeedSequence((cfg.seed, _TIMING_STREAM)))
    rng_wait = np.random.default_rng(np.random.SeedSequence((cfg.seed, _WAIT_STREAM)))

    cells = rng_cov.choice(
        int(np.prod(shape)), size=n, p=cfg.cell_probs.ravel()
    )
    kappa_idx = np.column_stack(np.unravel_index(cells, shape)) if n else np.zeros((0, len(shape)), dtype=int)
    x = (rng_cov.random((n, n_feat)) < np.asarray(cfg.feature_rates)[None, :]).astype(
        float
    )
    if cfg.pair_flip > 0 and n_feat > 1:
        flip = rng_cov.random((n, n_feat - 1)) < cfg.pair_flip
        for j in range(1, n_feat):
            x[:, j] = np.where(flip[:, j - 1], x[:, j - 1], x[:, j])

    def resolve(name):
        dec = getattr(truth, name)
        pos = truth.kappa_positions(name)
        return dec.lookup_batch(kappa_idx[:, pos])

    alpha = resolve("alpha")
    beta = resolve("beta")
    gamma = resolve("gamma")
    eta = resolve("eta")
    nu = resolve("nu")
    xi = resolve("xi")
    xb = np.einsum("nj,nj->n", x, beta) if n_feat else np.zeros(n)
    if cats:
        mu = np.exp(nu + np.einsum("nkj,nj->nk", xi, x))
        sel = np.einsum("nk,nk->n", eta, mu)
    else:
        mu = np.zeros((n, 0))
        sel = np.zeros(n)
    base_log_h = alpha + (xb + sel)[:, None]

    intended = {cat: _intended_times(cfg, cat, mu[:, k] if cats else None, rng_tim)
                for k, cat in enumerate(cats)}
    e_draws = rng_wait.exponential(size=n)

    bp = np.asarray(cfg.breakpoints)
    episodes = []
    risks = {c: np.zeros(n) for c in cfg.horizons}
    axes_levels = [a.levels for a in cfg.axes]
    for i in range(n):
        base = PiecewiseHazard(cfg.breakpoints, tuple(base_log_h[i].tolist()))
        jumps = []
        for k, cat in enumerate(cats):
            for tau in intended[cat][i]:
                adm = int(np.searchsorted(bp, tau, side="right"))
                jumps.append((tau, float(gamma[i, k, adm]), cat))
        jumps.sort()
        walker = base.with_jumps([(t, e) for t, e, _ in jumps]) if jumps else base
        t_true = float(walker.inverse_cumulative_hazard(e_draws[i]))
        event = t_true <= cfg.censor_day
        t_obs = min(t_true, cfg.censor_day)
        recorded = [(t, e, c) for t, e, c in jumps if t < t_obs]
        rec_hazard = (
            base.with_jumps([(t, e) for t, e, _ in recorded]) if recorded else base
        )
        for c in cfg.horizons:
            risks[c][i] = 1.0 - float(rec_hazard.survival(c))
        counts = np.zeros(len(cats))
        for _, _, cat in recorded:
            counts[cats.index(cat)] += 1.0
        episodes.append(
            EpisodeRecord(
                id=f"ep{i:07d}",
                covariates=x[i],
                kappa=tuple(
                    axes_levels[d][kappa_idx[i, d]] for d in range(len(cfg.axes))
                ),
                interventions=InterventionSchedule(
                    tuple(InterventionItem(t, c, e) for t, e, c in recorded)
                ),
                intervention_counts=counts,
                observed_time=t_obs,
                event_observed=bool(event),
                exposure=t_obs,
            )
        )
    return SimResult(
        episodes, truth, {f"true_risk_{c:g}": risks[c] for c in cfg.horizons}
    )
