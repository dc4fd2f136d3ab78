"""Acceptance suite: one test per criterion, at the stated tolerance and budget.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion
PASS/FAIL lines. Criteria 3 and 4 fit full synthetic cohorts and take a few
minutes combined; everything else is fast.
"""

import json
import time
from importlib import resources

import numpy as np
import pytest
from scipy import integrate

from phantomhaz.bias import (
    PhantomQuery,
    PointMassDensity,
    naive_crosstab_effect,
    phantom_conditional,
)
from phantomhaz.features import EM_CATEGORY_RANGES, UNCATEGORIZED, em_category, fit_quantizer
from phantomhaz.hazard import (
    CompositeWaitDistribution,
    HazardJumpFamily,
    InterventionItem,
    InterventionSchedule,
    NullPostFamily,
    PiecewiseHazard,
    WaitTimeDensity,
    composite_density_multi,
)
from phantomhaz.inference import FitConfig, fit, stabilize_loglik
from phantomhaz.metrics import auprc, auroc
from phantomhaz.model import (
    CompiledDataset,
    EpisodeRecord,
    ModelConfig,
    ModelParams,
    ParamPacker,
    batch_logpost_and_grad,
    dataset_logpost,
    gradient,
    horizon_scores,
)
from phantomhaz.quilt import Axis
from phantomhaz.simulate import calibrate_baseline, sim_config_from_dict, simulate

_cache = {}


def _report(num, desc, t0, budget_s):
    elapsed = time.perf_counter() - t0
    line = f"[criterion {num:2d}] PASS in {elapsed:6.1f}s (budget {budget_s:g}s): {desc}"
    print(line)
    assert elapsed < budget_s, f"criterion {num} exceeded its {budget_s}s budget"


def _preset(name):
    return json.loads(
        resources.files("phantomhaz.presets").joinpath(f"{name}.json").read_text()
    )


def example1_pem():
    return calibrate_baseline([(7.0, 0.07), (30.0, 0.17)])


def test_criterion_01_example1_phantom():
    t0 = time.perf_counter()
    f_inf = WaitTimeDensity.from_hazard(example1_pem())
    q = PhantomQuery(f_inf, PointMassDensity(7.0), 30.0)
    value = phantom_conditional(q)
    assert value == pytest.approx(0.10753, abs=1e-4)
    _report(1, f"phantom_conditional = {value:.5f} (0.10753 +- 1e-4)", t0, 1.0)


def test_criterion_02_null_effect_identity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    grid = np.linspace(0.0, 400.0, 1000)
    worst = 0.0
    for _ in range(20):
        k = int(rng.integers(0, 4))
        bp = tuple(np.sort(rng.uniform(1.0, 120.0, size=k)).tolist())
        lh = tuple(rng.uniform(-8.0, -3.0, size=k + 1).tolist())
        pem = PiecewiseHazard(bp, lh)
        f_inf = WaitTimeDensity.from_hazard(pem)
        n_iv = int(rng.integers(1, 4))
        taus = np.sort(rng.uniform(0.5, 150.0, size=n_iv))
        sched = InterventionSchedule.of(*[(float(t), "em", 0.0) for t in taus])
        vals = composite_density_multi(f_inf, NullPostFamily(f_inf), sched, grid)
        worst = max(worst, float(np.abs(vals - f_inf.pdf(grid)).max()))
    assert worst < 1e-9
    _report(2, f"null-composite sup error {worst:.2e} < 1e-9 over 20 random PEMs", t0, 5.0)


def test_criterion_03_bias_demo_end_to_end():
    t0 = time.perf_counter()
    sim_cfg = sim_config_from_dict(_preset("example1_sim"))
    res = simulate(sim_cfg)
    episodes = res.episodes
    assert len(episodes) == 100_000

    # the deliberately biased estimator reproduces the phantom arithmetic
    ct = naive_crosstab_effect(episodes, 30.0, "em")
    pem = example1_pem()
    q = PhantomQuery(WaitTimeDensity.from_hazard(pem), PointMassDensity(7.0), 30.0)
    expected_apparent = phantom_conditional(q) - (1.0 - float(pem.survival(30.0)))
    assert abs(ct.apparent_effect - expected_apparent) < 3 * ct.standard_error()
    assert ct.apparent_effect < 0

    # the corrected likelihood shows no effect
    fit_preset = _preset("example1_fit")
    mcfg = ModelConfig(
        axes=sim_cfg.axes,
        feature_names=sim_cfg.feature_names,
        categories=sim_cfg.categories,
        breakpoints=tuple(fit_preset["model"]["breakpoints"]),
        max_orders=fit_preset["model"]["max_orders"],
    )
    report = fit(episodes, FitConfig.from_dict(fit_preset["fit"]), model_config=mcfg)
    gamma0 = report.params.gamma.canonicalized().terms[()]
    assert np.abs(gamma0).max() < 0.03
    _report(
        3,
        f"naive effect {ct.apparent_effect:+.4f} ~ {expected_apparent:+.4f}; "
        f"fitted max |gamma0| = {np.abs(gamma0).max():.4f} < 0.03",
        t0,
        300.0,
    )


def _recovery_run():
    """Simulate + fit the recovery cohort once; shared by criteria 4 and 8."""
    if "recovery" not in _cache:
        sim_cfg = sim_config_from_dict(_preset("recovery_sim"))
        res = simulate(sim_cfg)
        fit_preset = _preset("recovery_fit")
        mcfg = ModelConfig(
            axes=sim_cfg.axes,
            feature_names=sim_cfg.feature_names,
            categories=sim_cfg.categories,
            breakpoints=tuple(fit_preset["model"]["breakpoints"]),
            max_orders=fit_preset["model"]["max_orders"],
        )
        report = fit(
            res.episodes, FitConfig.from_dict(fit_preset["fit"]), model_config=mcfg
        )
        _cache["recovery"] = (res, report)
    return _cache["recovery"]


def test_criterion_04_parameter_recovery():
    t0 = time.perf_counter()
    res, report = _recovery_run()
    errors = {}
    for name in ("alpha", "beta", "gamma"):
        est = report.params.decomps()[name].canonicalized().terms[()]
        tru = res.truth.decomps()[name].terms[()]
        errors[name] = float(np.abs(est - tru).max())
    assert all(err < 0.1 for err in errors.values()), errors
    _report(
        4,
        "zero-order recovery max errors "
        + ", ".join(f"{k}={v:.3f}" for k, v in errors.items())
        + " (all < 0.1)",
        t0,
        600.0,
    )


def test_criterion_05_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(55)
    worst = 0.0
    for _ in range(100):
        cfg = ModelConfig(
            axes=(Axis("site", ("s0", "s1")),),
            feature_names=tuple(f"f{j}" for j in range(int(rng.integers(0, 3)))),
            categories=tuple(f"em{k}" for k in range(int(rng.integers(0, 2)))),
            breakpoints=(7.0, 28.0),
            max_orders={p: 1 for p in ("alpha", "beta", "gamma", "eta", "nu", "xi")},
        )
        episodes = []
        for i in range(3):
            n_iv = int(rng.integers(0, 3)) if cfg.n_categories else 0
            T = float(rng.uniform(2.0, 90.0))
            items = tuple(
                InterventionItem(float(t), "em0")
                for t in rng.uniform(0.0, T - 0.5, size=n_iv)
            )
            counts = np.array([float(len(items))] * cfg.n_categories)
            episodes.append(
                EpisodeRecord(
                    id=str(i),
                    covariates=rng.integers(0, 2, cfg.n_features).astype(float),
                    kappa=(str(rng.choice(("s0", "s1"))),),
                    interventions=InterventionSchedule(items),
                    intervention_counts=counts,
                    observed_time=T,
                    event_observed=bool(rng.integers(0, 2)),
                    exposure=T,
                )
            )
        params = ModelParams.zeros(cfg, episodes)
        for dec in params.decomps().values():
            for subset in dec.subsets():
                dec.terms[subset][...] = rng.normal(scale=0.4, size=dec.terms[subset].shape)
                if subset != ():
                    floor = np.asarray(dec.prior_variances(subset, cfg.prior)) <= 1e-8
                    dec.terms[subset][floor] = 0.0
        params.alpha.terms[()][...] = rng.uniform(-6.0, -4.0, size=cfg.n_intervals)

        packer = ParamPacker(params)
        x0 = packer.pack(params)
        g = packer.pack_grads(gradient(params, episodes))
        h = 1e-5
        for i in range(len(x0)):
            d = np.zeros_like(x0)
            d[i] = h
            fd = (
                dataset_logpost(packer.unpack(x0 + d), episodes)
                - dataset_logpost(packer.unpack(x0 - d), episodes)
            ) / (2 * h)
            rel = abs(g[i] - fd) / max(abs(g[i]), abs(fd), 1e-6)
            worst = max(worst, rel)
    assert worst < 1e-5
    _report(5, f"max relative gradient error {worst:.2e} over 100 instances", t0, 60.0)


def test_criterion_06_density_validity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(66)
    worst = 0.0
    for _ in range(50):
        k = int(rng.integers(0, 4))
        bp = tuple(np.sort(rng.uniform(1.0, 100.0, size=k)).tolist())
        lh = tuple(rng.uniform(-7.5, -3.0, size=k + 1).tolist())
        pem = PiecewiseHazard(bp, lh)
        f_inf = WaitTimeDensity.from_hazard(pem)
        n_iv = int(rng.integers(0, 4))
        taus = np.sort(rng.uniform(0.5, 120.0, size=n_iv))
        effects = rng.uniform(-0.8, 0.4, size=n_iv)
        sched = InterventionSchedule.of(
            *[(float(t), "em", float(e)) for t, e in zip(taus, effects)]
        )
        comp = CompositeWaitDistribution(f_inf, HazardJumpFamily(pem), sched)
        horizon = 400.0
        pts = sorted(set(list(bp) + [float(t) for t in taus]))
        mass, _ = integrate.quad(comp.pdf, 0.0, horizon, points=pts, limit=400)
        total = mass + comp.survival(horizon)
        worst = max(worst, abs(total - 1.0))
    assert worst < 1e-6
    _report(6, f"max |integral - 1| = {worst:.2e} over 50 composite densities", t0, 10.0)


def test_criterion_07_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(77)
    checked = 0
    for _ in range(40):
        n = int(rng.integers(2, 1001))
        if rng.random() < 0.5:
            scores = rng.choice([0.1, 0.3, 0.5, 0.7, 0.9], size=n)  # force ties
        else:
            scores = rng.random(n)
        labels = rng.integers(0, 2, size=n)
        if labels.sum() in (0, n):
            continue
        pos = scores[labels == 1][:, None]
        neg = scores[labels == 0][None, :]
        oracle_auroc = (np.sum(pos > neg) + 0.5 * np.sum(pos == neg)) / (
            pos.size * neg.size
        )
        assert auroc(scores, labels) == oracle_auroc

        n_pos = int(labels.sum())
        out = 0.0
        prev_recall = 0.0
        for th in sorted(set(scores.tolist()), reverse=True):
            mask = scores >= th
            tp = int(labels[mask].sum())
            out += (tp / n_pos - prev_recall) * (tp / int(mask.sum()))
            prev_recall = tp / n_pos
        assert auprc(scores, labels) == out
        checked += 1
    assert checked >= 30
    _report(7, f"AUROC/AUPRC equal brute-force oracles on {checked} fixtures", t0, 10.0)


def test_criterion_08_discrimination_sanity():
    res, report = _recovery_run()  # cached when criterion 4 ran first
    t0 = time.perf_counter()  # the budget is post-fit scoring time
    scores, labels, excluded = horizon_scores(report.params, res.episodes, 30.0)
    assert excluded == 0
    model_auroc = auroc(scores, labels)
    bayes_scores = res.true_risks["true_risk_30"]
    bayes_auroc = auroc(bayes_scores, labels)
    assert abs(model_auroc - bayes_auroc) < 0.02
    _report(
        8,
        f"30-day AUROC {model_auroc:.4f} vs Bayes-optimal {bayes_auroc:.4f} (+-0.02)",
        t0,
        60.0,
    )


def test_criterion_09_preprocessing_fidelity():
    t0 = time.perf_counter()
    spec = fit_quantizer({"f": [1, 1, 2, 5, 9, 9, 9, 20]}, grid=(25, 50, 75, 90))
    assert spec.cutoffs["f"] == (5.0, 9.0, 20.0)

    # nearest-rank oracle on random count data
    import math

    rng = np.random.default_rng(99)
    for _ in range(50):
        values = rng.integers(0, 25, size=int(rng.integers(2, 120)))
        sv = sorted(values)
        grid = (25.0, 50.0, 75.0, 90.0, 95.0, 99.0)
        oracle = sorted(
            {sv[min(max(math.ceil(p * len(sv) / 100.0), 1), len(sv)) - 1] for p in grid}
            - {sv[0]}
        )
        got = list(fit_quantizer({"v": values}, grid).cutoffs.get("v", ()))
        assert got == [float(v) for v in oracle]

    # every code in the published span maps per first-match precedence
    order = list(EM_CATEGORY_RANGES)
    for code in range(99202, 99500):
        expected = UNCATEGORIZED
        for name, ranges in order:
            if any(lo <= code <= hi for lo, hi in ranges):
                expected = name
                break
        assert em_category(code) == expected
    _report(9, "quantizer matches nearest-rank oracle; E/M map verified on 99202-99499", t0, 1.0)


def test_criterion_10_stability_rule():
    t0 = time.perf_counter()
    np.testing.assert_allclose(
        stabilize_loglik([-2.0, -5.0, -np.inf], 100.0), [-2.0, -5.0, -105.0]
    )
    np.testing.assert_allclose(
        stabilize_loglik([np.nan, -1.0], 100.0), [-101.0, -1.0]
    )

    # fitting proceeds to completion through an overflow-poisoned episode
    rng = np.random.default_rng(10)
    cfg = ModelConfig(
        axes=(Axis("cohort", ("all",)),),
        feature_names=("f0",),
        categories=(),
        breakpoints=(),
        max_orders={p: 0 for p in ("alpha", "beta", "gamma", "eta", "nu", "xi")},
    )
    episodes = [
        EpisodeRecord(
            id=str(i),
            covariates=np.array([float(i % 2)]),
            kappa=("all",),
            interventions=InterventionSchedule(),
            intervention_counts=np.zeros(0),
            observed_time=float(rng.uniform(5, 300)),
            event_observed=bool(rng.integers(0, 2)),
            exposure=100.0,
        )
        for i in range(200)
    ]
    from phantomhaz.inference import default_init

    init = default_init(cfg, episodes)
    init.beta.terms[()][...] = 800.0  # exp(800) overflows for half the episodes
    batch = CompiledDataset.compile(episodes, init)
    lp, _, info = batch_logpost_and_grad(init, batch, 1.0, clamp_offset=100.0)
    vals_raw = batch_logpost_and_grad(init, batch, 1.0, None)[2]["values"]
    clamped = stabilize_loglik(vals_raw, 100.0)
    floor = vals_raw[np.isfinite(vals_raw)].min() - 100.0
    assert np.all(clamped[~np.isfinite(vals_raw)] == floor)

    report = fit(
        episodes,
        FitConfig(seed=1, max_epochs=8, minibatch_size=100),
        init=init,
    )
    assert report.numeric_warnings["clamped_loglik"] > 0
    assert np.all(np.isfinite(report.epoch_losses))
    assert report.epochs_run > 0
    _report(10, "divergent values clamped to (min finite - 100); fit completed", t0, 10.0)
