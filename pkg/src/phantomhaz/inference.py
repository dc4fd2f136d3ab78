"""Stochastic-gradient MAP estimation and mean-field variational inference.

Training follows a fixed schedule: adaptive moment (Adam) updates over
minibatches sampled without replacement each epoch, starting learning rate
0.0015, decayed by 10 percent every epoch whose mean batch loss fails to
improve on the best epoch so far, stopping after 3 non-improving epochs or 50
epochs. Per-episode log-likelihoods are stabilized by replacing divergent
values with (minimum finite value - 100) before summation. In VI mode the
mean-field Gaussian ELBO is estimated with 16 parameter samples per step and
a soft-plus bijector keeps the scales positive.

Everything is deterministic given (seed, config, data).
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from phantomhaz.model import (
    CompiledDataset,
    EpisodeRecord,
    ModelConfig,
    ModelParams,
    ParamPacker,
    batch_logpost_and_grad,
    clamp_log_values,
)
from phantomhaz.quilt import HorseshoeSpec, PriorSpec, softplus

__all__ = [
    "FitConfig",
    "FitReport",
    "fit",
    "stabilize_loglik",
    "two_stage_expand",
    "default_init",
]


@dataclass(frozen=True)
class FitConfig:
    minibatch_size: int = 5000
    initial_lr: float = 0.0015
    lr_decay_factor: float = 0.9
    patience_epochs: int = 3
    max_epochs: int = 50
    vi_sample_size: int = 16
    seed: int = 0
    clamp_offset: float = 100.0
    mode: str = "map"  # "map" | "meanfield_vi"
    checkpoint_every: int = 5

    def __post_init__(self):
        if min(
            self.minibatch_size,
            self.patience_epochs,
            self.max_epochs,
            self.vi_sample_size,
            self.clamp_offset,
        ) <= 0:
            raise ValueError("all FitConfig quantities must be positive")
        if self.initial_lr < 0:
            raise ValueError("initial_lr must be nonnegative")
        if not 0.0 < self.lr_decay_factor < 1.0:
            raise ValueError("lr_decay_factor must lie in (0, 1)")
        if self.mode not in ("map", "meanfield_vi"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @classmethod
    def from_dict(cls, obj: dict) -> "FitConfig":
        return cls(**{k: obj[k] for k in obj if k in cls.__dataclass_fields__})


@dataclass
class FitReport:
    epoch_losses: list
    params: ModelParams
    convergence_reason: str
    wall_time_s: float
    numeric_warnings: dict
    initial_loss: float
    final_loss: float
    final_grad_norm: float
    mode: str = "map"
    vi_scales_summary: dict | None = None
    selected_features: list | None = None
    empty_expansion: bool = False
    epochs_run: int = 0

    def to_json_dict(self, include_params: bool = True) -> dict:
        out = {
            "epoch_losses": [float(v) for v in self.epoch_losses],
            "convergence_reason": self.convergence_reason,
            "wall_time_s": self.wall_time_s,
            "numeric_warnings": dict(self.numeric_warnings),
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "final_grad_norm": self.final_grad_norm,
            "mode": self.mode,
            "vi_scales_summary": self.vi_scales_summary,
            "selected_features": self.selected_features,
            "empty_expansion": self.empty_expansion,
            "epochs_run": self.epochs_run,
        }
        if include_params:
            out["params"] = self.params.to_json_dict()
        return out


def stabilize_loglik(values, clamp_offset: float = 100.0) -> np.ndarray:
    """Replace non-finite per-episode log-likelihoods by (min finite - offset).

    Idempotent; raises FloatingPointError when no finite value exists.
    """
    return clamp_log_values(np.asarray(values, dtype=float), clamp_offset)


def default_init(model_config: ModelConfig, episodes: Sequence[EpisodeRecord]) -> ModelParams:
    """Zero coefficients except null-model maximum-likelihood intercepts.

    The zero-order baseline starts at the per-interval pooled rate
    log(events in interval / person-days in interval), the saturated-null
    MLE; starting the level right keeps the covariate and selection terms
    from having to absorb it, which they do only slowly because the
    reallocation direction is nearly flat. The intervention intercepts
    likewise start at the pooled count rate per category.
    """
    params = ModelParams.zeros(model_config, episodes)
    edges = np.concatenate([[0.0], model_config.breakpoints, [np.inf]])
    events = np.zeros(model_config.n_intervals)
    days = np.zeros(model_config.n_intervals)
    for ep in episodes:
        t = ep.observed_time
        for i in range(model_config.n_intervals):
            lo, hi = edges[i], edges[i + 1]
            days[i] += max(min(t, hi) - lo, 0.0)
            if ep.event_observed and lo <= t < hi:
                events[i] += 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        rate = np.log(events / days)
    pooled = (
        np.log(events.sum() / days.sum()) if events.sum() and days.sum() else -8.0
    )
    params.alpha.terms[()][...] = np.where(np.isfinite(rate), rate, pooled)
    if model_config.n_categories:
        counts = np.sum([ep.intervention_counts for ep in episodes], axis=0)
        exposure = sum(max(ep.exposure, 1e-12) for ep in episodes)
        with np.errstate(divide="ignore"):
            nu0 = np.log(counts * 365.0 / exposure)
        params.nu.terms[()][...] = np.where(np.isfinite(nu0), nu0, -2.0)
    return params


def _validate_episodes(episodes: Sequence[EpisodeRecord]):
    if not episodes:
        raise ValueError("cannot fit on an empty episode list")
    bad = []
    for ep in episodes:
        vals = np.concatenate(
            [
                np.atleast_1d(ep.covariates).astype(float).ravel(),
                [ep.observed_time, ep.exposure],
                np.atleast_1d(ep.intervention_counts).astype(float).ravel(),
            ]
        )
        if not np.all(np.isfinite(vals)):
            bad.append(ep.id)
    if bad:
        shown = ", ".join(map(str, bad[:5]))
        raise ValueError(f"non-finite data in {len(bad)} episode(s): {shown}")


class _Adam:
    def __init__(self, n, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, x, grad):
        """One ascent step along grad."""
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return x + self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self):
        return {"m": self.m.tolist(), "v": self.v.tolist(), "t": self.t, "lr": self.lr}

    def load(self, state):
        self.m = np.asarray(state["m"])
        self.v = np.asarray(state["v"])
        self.t = int(state["t"])
        self.lr = float(state["lr"])


def _full_data_loss(packer, x, dataset, clamp_offset):
    p = packer.unpack(x)
    lp, _, _ = batch_logpost_and_grad(p, dataset, 1.0, clamp_offset)
    return -lp / dataset.n


def fit(
    episodes: Sequence[EpisodeRecord],
    config: FitConfig,
    model_config: ModelConfig | None = None,
    init: ModelParams | None = None,
    masks: dict | None = None,
    checkpoint_dir=None,
    resume_from=None,
) -> FitReport:
    """MAP (default) or mean-field VI fit of the full generative model.

    Provide either ``init`` parameters or a ``model_config`` to build the
    default initialization from. ``masks`` freeze decomposition-term entries
    (used by the two-stage expansion). Checkpoints carrying parameters,
    optimizer moments and RNG state are written every ``checkpoint_every``
    epochs when ``checkpoint_dir`` is set; ``resume_from`` restores one and
    continues the identical trajectory.
    """
    t_start = time.perf_counter()
    _validate_episodes(episodes)
    if init is None:
        if model_config is None:
            raise ValueError("need model_config when no init parameters are given")
        init = default_init(model_config, episodes)
    params = init.copy()
    packer = ParamPacker(params, masks)
    dataset = CompiledDataset.compile(episodes, params)
    n = dataset.n

    rng = np.random.default_rng(config.seed)
    x = packer.pack(params)
    if config.mode == "meanfield_vi":
        return _fit_vi(x, packer, dataset, config, rng, t_start)

    adam = _Adam(packer.n_params, config.initial_lr)
    best_loss = np.inf
    since_improve = 0
    losses = []
    warn_totals = {"clamped_loglik": 0, "clamped_rate": 0}
    start_epoch = 0
    initial_loss = _full_data_loss(packer, x, dataset, config.clamp_offset)

    if resume_from is not None:
        state = json.loads(Path(resume_from).read_text())
        x = np.asarray(state["x"])
        adam.load(state["adam"])
        adam.lr = float(state["adam"]["lr"])
        best_loss = float(state["best_loss"])
        since_improve = int(state["since_improve"])
        losses = list(state["epoch_losses"])
        start_epoch = int(state["epoch"])
        initial_loss = float(state["initial_loss"])
        rng.bit_generator.state = state["rng_state"]

    reason = "max_epochs"
    epoch = start_epoch
    for epoch in range(start_epoch, config.max_epochs):
        order = rng.permutation(n)
        batch_losses = []
        for lo in range(0, n, config.minibatch_size):
            idx = order[lo : lo + config.minibatch_size]
            batch = dataset.subset(idx)
            scale = n / len(idx)
            p = packer.unpack(x)
            lp, grads, info = batch_logpost_and_grad(
                p, batch, scale, config.clamp_offset
            )
            warn_totals["clamped_loglik"] += info["n_clamped"]
            warn_totals["clamped_rate"] += info["n_rate_clamped"]
            g = packer.pack_grads(grads)
            x = adam.step(x, g)
            batch_losses.append(-lp / n)
        epoch_loss = float(np.mean(batch_losses))
        losses.append(epoch_loss)
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            since_improve = 0
        else:
            since_improve += 1
            adam.lr *= config.lr_decay_factor
        if checkpoint_dir is not None and (epoch + 1) % config.checkpoint_every == 0:
            _write_checkpoint(
                checkpoint_dir, epoch + 1, x, adam, best_loss, since_improve,
                losses, initial_loss, rng, config,
            )
        if since_improve >= config.patience_epochs:
            reason = "no_improvement"
            epoch += 1
            break
    else:
        epoch = config.max_epochs

    params = packer.unpack(x)
    final_loss = _full_data_loss(packer, x, dataset, config.clamp_offset)
    _, grads, _ = batch_logpost_and_grad(params, dataset, 1.0, config.clamp_offset)
    grad_norm = float(np.linalg.norm(packer.pack_grads(grads) / n))
    return FitReport(
        epoch_losses=losses,
        params=params,
        convergence_reason=reason,
        wall_time_s=time.perf_counter() - t_start,
        numeric_warnings=warn_totals,
        initial_loss=initial_loss,
        final_loss=final_loss,
        final_grad_norm=grad_norm,
        mode="map",
        epochs_run=epoch,
    )


def _write_checkpoint(directory, epoch, x, adam, best_loss, since_improve,
                      losses, initial_loss, rng, config):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = {
        "epoch": epoch,
        "x": x.tolist(),
        "adam": adam.state(),
        "best_loss": best_loss,
        "since_improve": since_improve,
        "epoch_losses": [float(v) for v in losses],
        "initial_loss": initial_loss,
        "rng_state": rng.bit_generator.state,
        "fit_config": asdict(config),
    }
    (directory / f"checkpoint_epoch{epoch:04d}.json").write_text(
        json.dumps(state)
    )


def _fit_vi(x0, packer, dataset, config, rng, t_start):
    """Mean-field Gaussian VI: optimize (means, raw scales) on the ELBO."""
    n = dataset.n
    means = x0.copy()
    raw_scales = np.full(packer.n_params, _inv_softplus(0.01))
    adam = _Adam(2 * packer.n_params, config.initial_lr)
    best_loss = np.inf
    since_improve = 0
    losses = []
    warn_totals = {"clamped_loglik": 0, "clamped_rate": 0}
    initial_loss = _full_data_loss(packer, means, dataset, config.clamp_offset)
    s = config.vi_sample_size
    reason = "max_epochs"
    epoch = 0
    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        batch_losses = []
        for lo in range(0, n, config.minibatch_size):
            idx = order[lo : lo + config.minibatch_size]
            batch = dataset.subset(idx)
            scale = n / len(idx)
            sigma = softplus(raw_scales)
            eps = rng.standard_normal((s, packer.n_params))
            g_mean = np.zeros(packer.n_params)
            g_eps = np.zeros(packer.n_params)
            lp_mean = 0.0
            for k in range(s):
                theta = means + sigma * eps[k]
                p = packer.unpack(theta)
                lp, grads, info = batch_logpost_and_grad(
                    p, batch, scale, config.clamp_offset
                )
                warn_totals["clamped_loglik"] += info["n_clamped"]
                warn_totals["clamped_rate"] += info["n_rate_clamped"]
                g = packer.pack_grads(grads)
                g_mean += g / s
                g_eps += g * eps[k] / s
                lp_mean += lp / s
            entropy = float(np.sum(np.log(sigma)))
            elbo = lp_mean + entropy
            d_sig = 1.0 / (1.0 + np.exp(-raw_scales))
            g_raw = g_eps * d_sig + d_sig / sigma
            z = adam.step(
                np.concatenate([means, raw_scales]),
                np.concatenate([g_mean, g_raw]),
            )
            means, raw_scales = z[: packer.n_params], z[packer.n_params :]
            batch_losses.append(-elbo / n)
        epoch_loss = float(np.mean(batch_losses))
        losses.append(epoch_loss)
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            since_improve = 0
        else:
            since_improve += 1
            adam.lr *= config.lr_decay_factor
        if since_improve >= config.patience_epochs:
            reason = "no_improvement"
            epoch += 1
            break
    else:
        epoch = config.max_epochs

    params = packer.unpack(means)
    final_loss = _full_data_loss(packer, means, dataset, config.clamp_offset)
    _, grads, _ = batch_logpost_and_grad(params, dataset, 1.0, config.clamp_offset)
    grad_norm = float(np.linalg.norm(packer.pack_grads(grads) / n))
    sigma = softplus(raw_scales)
    return FitReport(
        epoch_losses=losses,
        params=params,
        convergence_reason=reason,
        wall_time_s=time.perf_counter() - t_start,
        numeric_warnings=warn_totals,
        initial_loss=initial_loss,
        final_loss=final_loss,
        final_grad_norm=grad_norm,
        mode="meanfield_vi",
        vi_scales_summary={
            "mean": float(sigma.mean()),
            "max": float(sigma.max()),
            "min": float(sigma.min()),
        },
        epochs_run=epoch,
    )


def _inv_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


def two_stage_expand(
    episodes: Sequence[EpisodeRecord],
    config: FitConfig,
    model_config: ModelConfig,
    top_k: int = 60,
) -> FitReport:
    """Horseshoe-guided two-stage fit of the covariate coefficients.

    Stage 1 restricts beta to its leading (zero-order) term under a
    regularized horseshoe prior and fits; the ``top_k`` features with the
    largest absolute fitted coefficients are selected. Stage 2 refits with
    beta's higher-order decomposition terms trainable only for the selected
    features, warm-started from stage 1.
    """
    import warnings as _warnings

    if model_config.prior.horseshoe is None:
        model_config = ModelConfig(
            axes=model_config.axes,
            feature_names=model_config.feature_names,
            categories=model_config.categories,
            breakpoints=model_config.breakpoints,
            max_orders=model_config.max_orders,
            param_axes=model_config.param_axes,
            prior=PriorSpec(model_config.prior.base_variance, HorseshoeSpec()),
        )
    n_feat = model_config.n_features
    if top_k > n_feat:
        _warnings.warn(
            f"top_k={top_k} exceeds the {n_feat} available features; using all"
        )
        top_k = n_feat

    template = default_init(model_config, episodes)
    stage1_masks = _beta_higher_order_masks(template, keep=np.zeros(n_feat, dtype=bool))
    stage1 = fit(episodes, config, init=template, masks=stage1_masks)

    beta0 = stage1.params.beta.terms[()]
    ranked = np.argsort(-np.abs(beta0))
    selected = np.sort(ranked[:top_k])
    keep = np.zeros(n_feat, dtype=bool)
    keep[selected] = True

    stage2_masks = _beta_higher_order_masks(stage1.params, keep=keep)
    stage2_init = stage1.params.copy()
    if stage2_init.hs_raw is not None:
        # deeply shrunk local scales from stage 1 would trap the expanded fit
        # (vanishing gradients through softplus); restart them neutral
        stage2_init.hs_raw[...] = float(np.log(np.e - 1.0))
    stage2 = fit(episodes, config, init=stage2_init, masks=stage2_masks)
    stage2.selected_features = [model_config.feature_names[i] for i in selected]
    stage2.empty_expansion = top_k == 0
    return stage2


def _beta_higher_order_masks(params: ModelParams, keep: np.ndarray) -> dict:
    """Trainability masks: beta's order >= 1 terms restricted to kept features."""
    masks = {}
    for subset in params.beta.subsets():
        if subset == ():
            continue
        mask = np.zeros(params.beta.terms[subset].shape, dtype=bool)
        mask[..., keep] = True
        masks[("beta", subset)] = mask
    return masks
