"""Survivors-bias-corrected estimation of intervention effects on time-to-event outcomes.

A readmission-style outcome censors any intervention scheduled after it: the
intervention can only be observed in episodes that survived long enough to
receive it. Naive cross-tabulation therefore attributes a protective "phantom
effect" to interventions that do nothing. This package provides

* piecewise-exponential hazards and the intervention-censored composite
  wait-time densities (:mod:`phantomhaz.hazard`),
* closed-form and Monte Carlo quantification of the phantom effect
  (:mod:`phantomhaz.bias`),
* an additive multi-index ("quilted") parameter decomposition with
  count-weighted shrinkage priors (:mod:`phantomhaz.quilt`),
* the joint survival + treatment-assignment generative model and its analytic
  gradients (:mod:`phantomhaz.model`),
* minibatch MAP / mean-field VI fitting (:mod:`phantomhaz.inference`),
* quantile binarization and E/M service-category coding
  (:mod:`phantomhaz.features`),
* a synthetic cohort simulator with known ground truth
  (:mod:`phantomhaz.simulate`),
* horizon AUROC/AUPRC metrics with bootstrap uncertainty
  (:mod:`phantomhaz.metrics`),
* a CLI orchestrating all of the above (:mod:`phantomhaz.cli`).
"""

from phantomhaz.hazard import (
    InterventionSchedule,
    PiecewiseHazard,
    WaitTimeDensity,
    composite_density_multi,
    composite_density_single,
    null_post_density,
    sample_wait_time,
)

__all__ = [
    "PiecewiseHazard",
    "WaitTimeDensity",
    "InterventionSchedule",
    "null_post_density",
    "composite_density_single",
    "composite_density_multi",
    "sample_wait_time",
]

__version__ = "0.1.0"
