"""Command-line orchestration: simulate, quantize, fit, phantom, evaluate, report.

Model structure lives in a JSON or TOML config file; flags carry only paths,
the seed, and verbosity. Outputs are deterministic given identical inputs and
seed (wall-clock metadata is confined to dedicated fields). Exit codes:
0 success, 2 config or data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from phantomhaz.bias import (
    PhantomQuery,
    PointMassDensity,
    TabulatedDensity,
    UniformDensity,
    phantom_conditional,
    phantom_joint,
)
from phantomhaz.features import (
    DEFAULT_QUANTILE_GRID,
    read_episode_csv,
    write_episode_csv,
    quantize_table,
)
from phantomhaz.hazard import PiecewiseHazard, WaitTimeDensity
from phantomhaz.metrics import UndefinedMetricError, evaluate_horizon
from phantomhaz.model import (
    ModelConfig,
    ModelParams,
    episodes_from_table,
    episodes_to_table,
    horizon_scores,
)
from phantomhaz.quilt import Axis, HorseshoeSpec, PriorSpec
from phantomhaz.inference import FitConfig, fit, two_stage_expand
from phantomhaz.simulate import calibrate_baseline, sim_config_from_dict, simulate

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

_PRESET_DIR = Path(__file__).parent / "presets"


class ConfigError(ValueError):
    pass


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    if path.startswith("preset:"):
        target = _PRESET_DIR / f"{path[len('preset:'):]}.json"
        if not target.exists():
            names = sorted(p.stem for p in _PRESET_DIR.glob("*.json"))
            raise ConfigError(f"unknown preset {path!r}; available: {names}")
        return json.loads(target.read_text())
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    if p.suffix.lower() == ".toml":
        return tomllib.loads(p.read_text())
    return json.loads(p.read_text())


def _require_seed(args, cfg: dict) -> int:
    if args.seed is not None:
        return args.seed
    if "seed" in cfg:
        return int(cfg["seed"])
    if "fit" in cfg and "seed" in cfg["fit"]:
        return int(cfg["fit"]["seed"])
    raise ConfigError("a seed is required (--seed or config)")


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")


def cmd_simulate(args) -> int:
    cfg_dict = _load_config(args.config)
    seed = _require_seed(args, cfg_dict)
    sim_cfg = sim_config_from_dict(cfg_dict, seed=seed)
    out = _out_dir(args)
    res = simulate(sim_cfg)
    mcfg = ModelConfig(
        axes=sim_cfg.axes,
        feature_names=sim_cfg.feature_names,
        categories=sim_cfg.categories,
        breakpoints=sim_cfg.breakpoints,
    )
    table = episodes_to_table(res.episodes, mcfg, extras=res.true_risks)
    write_episode_csv(table, out / "episodes.csv")
    _write_json(out / "truth.json", res.truth.to_json_dict())
    rates = {
        f"event_rate_{h:g}d": float(
            np.mean(
                [e.event_observed and e.observed_time <= h for e in res.episodes]
            )
        )
        if res.episodes
        else 0.0
        for h in sim_cfg.horizons
    }
    _write_json(
        out / "sim_meta.json",
        {
            "n_episodes": len(res.episodes),
            "seed": seed,
            **rates,
            "generated_unix_time": time.time(),
        },
    )
    if args.verbose:
        print(f"wrote {len(res.episodes)} episodes to {out/'episodes.csv'}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    cfg = _load_config(args.config)
    if args.input is None:
        raise ConfigError("quantize requires --input (raw episode CSV)")
    table = read_episode_csv(args.input)
    if not table.raw:
        raise ConfigError("input CSV has no feat_ columns to quantize")
    grid = tuple(cfg.get("grid", DEFAULT_QUANTILE_GRID))
    spec, binary = quantize_table(table, grid=grid)
    out = _out_dir(args)
    _write_json(out / "quantizer.json", spec.to_json_dict())
    write_episode_csv(binary, out / "episodes_binary.csv")
    if args.verbose:
        print(f"{len(spec.feature_names_out())} binary columns")
    return EXIT_OK


def _model_config_from(cfg: dict, table) -> ModelConfig:
    model = cfg.get("model", {})
    if "axes" in model:
        axes = tuple(Axis(a["name"], tuple(a["levels"])) for a in model["axes"])
    else:
        levels = [sorted({k[d] for k in table.kappa}) for d in range(len(table.axis_names))]
        axes = tuple(Axis(n, tuple(lv)) for n, lv in zip(table.axis_names, levels))
    if "categories" in model:
        categories = tuple(model["categories"])
    else:
        categories = tuple(sorted({c for items in table.interventions for _, c in items}))
    prior_cfg = model.get("prior", {})
    hs = prior_cfg.get("horseshoe")
    prior = PriorSpec(
        base_variance=float(prior_cfg.get("base_variance", 1.0)),
        horseshoe=HorseshoeSpec(**hs) if hs else None,
    )
    return ModelConfig(
        axes=axes,
        feature_names=tuple(table.feature_names),
        categories=categories,
        breakpoints=tuple(model.get("breakpoints", (7.0, 28.0, 63.0))),
        max_orders=model.get(
            "max_orders",
            {"alpha": 3, "beta": 2, "gamma": 3, "eta": 2, "nu": 2, "xi": 2},
        ),
        param_axes=(
            {k: tuple(v) for k, v in model["param_axes"].items()}
            if model.get("param_axes")
            else None
        ),
        prior=prior,
    )


def cmd_fit(args) -> int:
    cfg = _load_config(args.config)
    if args.input is None:
        raise ConfigError("fit requires --input (episode CSV)")
    table = read_episode_csv(args.input)
    if table.raw:
        raise ConfigError("input CSV carries raw features; run quantize first")
    mcfg = _model_config_from(cfg, table)
    episodes = episodes_from_table(table, mcfg)
    fit_dict = dict(cfg.get("fit", {}))
    if args.seed is not None:
        fit_dict["seed"] = args.seed
    if "seed" not in fit_dict:
        raise ConfigError("a seed is required (--seed or config fit.seed)")
    fit_cfg = FitConfig.from_dict(fit_dict)
    out = _out_dir(args)
    two_stage = cfg.get("two_stage")
    if two_stage:
        report = two_stage_expand(
            episodes, fit_cfg, mcfg, top_k=int(two_stage.get("top_k", 60))
        )
    else:
        report = fit(
            episodes,
            fit_cfg,
            model_config=mcfg,
            checkpoint_dir=out / "checkpoints",
            resume_from=args.resume,
        )
    _write_json(out / "params.json", report.params.to_json_dict())
    _write_json(out / "fit_report.json", report.to_json_dict(include_params=False))
    if args.verbose:
        print(
            f"fit: {report.epochs_run} epochs ({report.convergence_reason}), "
            f"final loss {report.final_loss:.6f}"
        )
    return EXIT_OK


def _baseline_from(cfg: dict) -> WaitTimeDensity:
    base = cfg.get("baseline", {})
    if "calibrate_targets" in base:
        pem = calibrate_baseline([(float(d), float(p)) for d, p in base["calibrate_targets"]])
    elif "exponential_rate" in base:
        pem = PiecewiseHazard.constant(float(base["exponential_rate"]))
    elif "breakpoints" in base:
        pem = PiecewiseHazard(tuple(base["breakpoints"]), tuple(base["log_hazards"]))
    else:
        raise ConfigError("phantom config needs a baseline section")
    return WaitTimeDensity.from_hazard(pem)


def _admin_density_from(spec: dict):
    kind = spec.get("kind")
    if kind == "point_mass":
        return PointMassDensity(float(spec.get("at", spec.get("day", 0.0))))
    if kind == "uniform":
        return UniformDensity(float(spec["a"]), float(spec["b"]))
    if kind == "tabulated":
        return TabulatedDensity(tuple(spec["edges"]), tuple(spec["probs"]))
    raise ConfigError(f"unknown admin density kind {kind!r}")


def cmd_phantom(args) -> int:
    cfg = _load_config(args.config)
    f_inf = _baseline_from(cfg)
    horizons = [float(h) for h in cfg.get("horizons", (30.0,))]
    rows = []
    for c in horizons:
        for tau in cfg.get("tau_grid", ()):
            q = PhantomQuery(f_inf, PointMassDensity(float(tau)), c)
            rows.append(
                {
                    "admin": f"point_mass@{tau:g}",
                    "tau": float(tau),
                    "horizon": c,
                    "phantom_joint": phantom_joint(q),
                    "phantom_conditional": phantom_conditional(q),
                }
            )
        if "admin_density" in cfg:
            h = _admin_density_from(cfg["admin_density"])
            q = PhantomQuery(f_inf, h, c)
            rows.append(
                {
                    "admin": json.dumps(cfg["admin_density"], sort_keys=True),
                    "tau": None,
                    "horizon": c,
                    "phantom_joint": phantom_joint(q),
                    "phantom_conditional": phantom_conditional(q),
                }
            )
    out = _out_dir(args)
    _write_json(out / "phantom.json", {"rows": rows})
    with open(out / "phantom.csv", "w") as fh:
        fh.write("admin,tau,horizon,phantom_joint,phantom_conditional\n")
        for r in rows:
            tau = "" if r["tau"] is None else f"{r['tau']!r}"
            fh.write(
                f"\"{r['admin']}\",{tau},{r['horizon']!r},"
                f"{r['phantom_joint']!r},{r['phantom_conditional']!r}\n"
            )
    if args.verbose:
        print(f"{len(rows)} phantom rows")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config)
    if args.input is None:
        raise ConfigError("evaluate requires --input (episode CSV)")
    params_path = args.params or cfg.get("params")
    if params_path is None:
        raise ConfigError("evaluate needs fitted parameters (--params or config)")
    seed = _require_seed(args, cfg)
    params = ModelParams.from_json(Path(params_path).read_text())
    table = read_episode_csv(args.input)
    episodes = episodes_from_table(table, params.config)
    horizons = [float(h) for h in cfg.get("horizons", (30.0, 90.0))]
    n_boot = int(cfg.get("n_boot", 200))
    reports = []
    for c in horizons:
        scores, labels, excluded = horizon_scores(params, episodes, c)
        reports.extend(
            r.to_json_dict()
            for r in evaluate_horizon(
                scores, labels, c, n_excluded=excluded, n_boot=n_boot, seed=seed
            )
        )
    out = _out_dir(args)
    _write_json(out / "metrics.json", {"metrics": reports})
    if args.verbose:
        for r in reports:
            print(
                f"{r['metric']} @ {r['horizon']:g}d: {r['value']:.4f} "
                f"(sd {r['bootstrap_sd']:.4f}, n={r['n']}, excluded {r['n_excluded']})"
            )
    return EXIT_OK


def cmd_report(args) -> int:
    src = Path(args.input or args.out or ".")
    out = _out_dir(args)
    lines = ["# phantomhaz run report", ""]
    meta = src / "sim_meta.json"
    if meta.exists():
        m = json.loads(meta.read_text())
        lines.append("## Simulation")
        for k, v in m.items():
            if k != "generated_unix_time":
                lines.append(f"- {k}: {v}")
        lines.append("")
    fr = src / "fit_report.json"
    if fr.exists():
        r = json.loads(fr.read_text())
        lines += [
            "## Fit",
            f"- mode: {r['mode']}",
            f"- epochs: {r['epochs_run']} ({r['convergence_reason']})",
            f"- loss: {r['initial_loss']:.6f} -> {r['final_loss']:.6f}",
            f"- gradient norm at convergence: {r['final_grad_norm']:.3e}",
            f"- numeric warnings: {r['numeric_warnings']}",
            "",
        ]
    mt = src / "metrics.json"
    if mt.exists():
        lines.append("## Metrics")
        lines.append("| metric | horizon | value | bootstrap sd | n | excluded |")
        lines.append("|---|---|---|---|---|---|")
        for r in json.loads(mt.read_text())["metrics"]:
            lines.append(
                f"| {r['metric']} | {r['horizon']:g} | {r['value']:.4f} "
                f"| {r['bootstrap_sd']:.4f} | {r['n']} | {r['n_excluded']} |"
            )
        lines.append("")
    ph = src / "phantom.json"
    if ph.exists():
        lines.append("## Phantom effect")
        lines.append("| admin | horizon | joint | conditional |")
        lines.append("|---|---|---|---|")
        for r in json.loads(ph.read_text())["rows"]:
            lines.append(
                f"| {r['admin']} | {r['horizon']:g} | {r['phantom_joint']:.5f} "
                f"| {r['phantom_conditional']:.5f} |"
            )
        lines.append("")
    if len(lines) <= 2:
        raise ConfigError(f"no artifacts found under {src}")
    (out / "report.md").write_text("\n".join(lines))
    if args.verbose:
        print((out / "report.md").read_text())
    return EXIT_OK


_COMMANDS = {
    "simulate": cmd_simulate,
    "quantize": cmd_quantize,
    "fit": cmd_fit,
    "phantom": cmd_phantom,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phantomhaz",
        description="Survivors-bias-corrected intervention effect estimation",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON/TOML config path or preset:<name>")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", help="output directory (default: cwd)")
        p.add_argument("--input", "-i", help="input file/directory")
        p.add_argument("--params", help="fitted parameter JSON (evaluate)")
        p.add_argument("--resume", help="checkpoint to resume from (fit)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (FloatingPointError, UndefinedMetricError, ArithmeticError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
