"""Command-line front end: ``solve``, ``simulate`` and ``reproduce``.

Configs are TOML documents; see ``configs/example.toml`` for every key.
Exit codes: 0 on success (warnings included), 2 for configuration errors,
3 when the exponent solver fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .expfam import BERNOULLI, GAUSSIAN, DomainError, InstanceSpec, ObservationModel
from .exponent import (
    SolverError,
    bound_subgaussian,
    ratio_bound,
    solve_gamma_beta,
    solve_gamma_star,
    uniform_rate_gaussian,
)
from .rules import RULE_NAMES, RuleConfig, RuleError
from .sim import (
    Cadence,
    StoppingSpec,
    aggregate,
    run_trials,
    write_rows_csv,
    write_summary_csv,
    write_trace_csv,
)

log = logging.getLogger("toptwo")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3
OUT_ENV = "TOPTWO_OUT"
DEFAULT_LEVELS = (0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99, 0.999)
FIGURES = ("fig1a", "fig1b", "fig2a", "fig2b")


class ConfigError(ValueError):
    pass


SCHEMA = {
    "instance": {"model", "sigma", "mean_domain", "means"},
    "rules": {"name", "beta", "mc_samples", "quadrature_points", "resample_cap", "utility",
              "ttts_fallback", "psi", "explore"},
    "stopping": {"mode", "delta", "horizon", "cap"},
    "seeds": {"count", "base"},
    "output": {"directory", "cadence_dense_until", "cadence_every", "levels", "write_traces"},
    "simulation": {"belief", "prior_var", "grid_points", "grid_bounds"},
    "solver": {"betas", "tol", "validate"},
}


@dataclass
class RuleEntry:
    name: str
    config: RuleConfig
    psi: object = None
    explore: Optional[int] = None


@dataclass
class ExperimentConfig:
    instance: InstanceSpec
    rules: list
    stopping: StoppingSpec
    seed_count: int = 1
    seed_base: int = 0
    out_dir: str = "out"
    cadence: Cadence = field(default_factory=Cadence)
    levels: tuple = DEFAULT_LEVELS
    write_traces: bool = True
    belief: str = "conjugate"
    prior_var: Optional[float] = None
    grid_points: int = 1001
    grid_bounds: Optional[tuple] = None
    betas: tuple = (0.5,)
    tol: float = 1e-6
    validate: bool = False

    @property
    def seeds(self) -> list:
        return list(range(self.seed_base, self.seed_base + self.seed_count))

    def trial_kwargs(self) -> dict:
        return {
            "belief": self.belief,
            "cadence": self.cadence,
            "prior_var": self.prior_var,
            "grid_points": self.grid_points,
            "grid_bounds": self.grid_bounds,
        }


def _section(doc: dict, name: str, required: bool = False) -> dict:
    sec = doc.get(name)
    if sec is None:
        if required:
            raise ConfigError(f"missing required section [{name}]")
        return {}
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    _reject_unknown(sec, SCHEMA[name], name)
    return sec


def _reject_unknown(sec: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(sec) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")


def _build_instance(sec: dict) -> InstanceSpec:
    kind = sec.get("model")
    if kind not in (BERNOULLI, GAUSSIAN):
        raise ConfigError(f"instance.model must be 'bernoulli' or 'gaussian', got {kind!r}")
    if "means" not in sec:
        raise ConfigError("instance.means is required")
    try:
        if kind == BERNOULLI:
            if "sigma" in sec or "mean_domain" in sec:
                raise ConfigError("instance.sigma / instance.mean_domain apply to gaussian models only")
            model = ObservationModel.bernoulli()
        else:
            model = ObservationModel.gaussian(sec.get("sigma", 1.0), tuple(sec.get("mean_domain", (-10.0, 10.0))))
        return InstanceSpec(model, tuple(sec["means"]))
    except DomainError as exc:
        raise ConfigError(f"instance.means: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"instance: {exc}") from exc


def _build_rule(entry: dict, i: int) -> RuleEntry:
    if not isinstance(entry, dict):
        raise ConfigError(f"rules[{i}] must be a table")
    _reject_unknown(entry, SCHEMA["rules"], f"rules[{i}]")
    name = entry.get("name")
    if name not in RULE_NAMES:
        raise ConfigError(f"rules[{i}].name must be one of {', '.join(RULE_NAMES)}, got {name!r}")
    keys = ("beta", "mc_samples", "quadrature_points", "resample_cap", "utility", "ttts_fallback")
    try:
        cfg = RuleConfig(**{k: entry[k] for k in keys if k in entry})
    except RuleError as exc:
        raise ConfigError(f"rules[{i}]: {exc}") from exc
    psi = entry.get("psi")
    if name == "fixed" and psi is None:
        raise ConfigError(f"rules[{i}].psi is required for the fixed rule (a vector or \"optimal\")")
    return RuleEntry(name, cfg, psi, entry.get("explore"))


def _build_stopping(sec: dict) -> StoppingSpec:
    try:
        mode = sec.get("mode")
        if mode == "fixed_horizon":
            return StoppingSpec("fixed_horizon", horizon=sec.get("horizon"), cap=sec.get("cap"))
        if mode == "confidence":
            return StoppingSpec("confidence", delta=sec.get("delta"), cap=sec.get("cap", 100_000))
        raise ConfigError(f"stopping.mode must be 'fixed_horizon' or 'confidence', got {mode!r}")
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"stopping: {exc}") from exc


def parse_config(doc: dict) -> ExperimentConfig:
    """Validate a parsed TOML document into an ``ExperimentConfig``."""
    _reject_unknown(doc, set(SCHEMA), "top level")
    instance = _build_instance(_section(doc, "instance", required=True))
    rules_doc = doc.get("rules", [])
    if not isinstance(rules_doc, list):
        raise ConfigError("rules must be an array of tables ([[rules]])")
    rules = [_build_rule(e, i) for i, e in enumerate(rules_doc)]
    stop_sec = _section(doc, "stopping")
    stopping = _build_stopping(stop_sec) if stop_sec else StoppingSpec.fixed(1000)
    seeds = _section(doc, "seeds")
    out = _section(doc, "output")
    simu = _section(doc, "simulation")
    solver = _section(doc, "solver")
    try:
        cfg = ExperimentConfig(
            instance=instance,
            rules=rules,
            stopping=stopping,
            seed_count=int(seeds.get("count", 1)),
            seed_base=int(seeds.get("base", 0)),
            out_dir=str(out.get("directory", "out")),
            cadence=Cadence(int(out.get("cadence_dense_until", 1000)), int(out.get("cadence_every", 10))),
            levels=tuple(float(c) for c in out.get("levels", DEFAULT_LEVELS)),
            write_traces=bool(out.get("write_traces", True)),
            belief=str(simu.get("belief", "conjugate")),
            prior_var=simu.get("prior_var"),
            grid_points=int(simu.get("grid_points", 1001)),
            grid_bounds=tuple(simu["grid_bounds"]) if "grid_bounds" in simu else None,
            betas=tuple(float(b) for b in solver.get("betas", (0.5,))),
            tol=float(solver.get("tol", 1e-6)),
            validate=bool(solver.get("validate", False)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.seed_count < 1:
        raise ConfigError("seeds.count must be positive")
    if cfg.belief not in ("conjugate", "grid"):
        raise ConfigError("simulation.belief must be 'conjugate' or 'grid'")
    if any(not 0.0 < c < 1.0 for c in cfg.levels):
        raise ConfigError("output.levels must lie in (0, 1)")
    if any(not 0.0 < b < 1.0 for b in cfg.betas):
        raise ConfigError("solver.betas must lie in (0, 1)")
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc
    return parse_config(doc)


def _out_dir(args, cfg: Optional[ExperimentConfig]) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    return Path(cfg.out_dir if cfg else "out")


# -- solve -------------------------------------------------------------------

def solve_report(cfg: ExperimentConfig) -> dict:
    inst = cfg.instance
    star = solve_gamma_star(inst, tol=cfg.tol, validate=cfg.validate)
    half = solve_gamma_beta(inst, 0.5)
    per_beta = []
    for b in cfg.betas:
        entry = solve_gamma_beta(inst, b).to_dict()
        entry["ratio_bound"] = ratio_bound(b, star.beta)
        per_beta.append(entry)
    gaps = np.delete(inst.gaps, inst.best)
    bounds = {
        "gamma_star_over_gamma_half": star.gamma / half.gamma,
        "two_gamma_half": 2.0 * half.gamma,
        "subgaussian_lower_bound": bound_subgaussian(inst.model.sigma, gaps),
    }
    if inst.model.kind == GAUSSIAN:
        bounds["uniform_rate"] = uniform_rate_gaussian(gaps, inst.k, inst.model.sigma)
    return {
        "instance": {"model": inst.model.to_dict(), "means": list(inst.means), "best": inst.best},
        "betas": per_beta,
        "gamma_star": star.gamma,
        "beta_star": star.beta,
        "psi_star": [float(v) for v in star.psi],
        "bounds": bounds,
    }


def cmd_solve(args) -> int:
    cfg = load_config(args.config)
    report = solve_report(cfg)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "exponents.json"
    path.write_text(json.dumps(report, indent=2) + "\n")
    print(f"gamma_star={report['gamma_star']:.8g} beta_star={report['beta_star']:.6f} -> {path}")
    return EXIT_OK


# -- simulate ----------------------------------------------------------------

def _simulate_rule(cfg: ExperimentConfig, entry: RuleEntry, seeds, threads: int) -> list:
    kwargs = cfg.trial_kwargs()
    if entry.psi is not None:
        kwargs["psi"] = entry.psi
    if entry.explore is not None:
        kwargs["explore"] = int(entry.explore)
    return run_trials(cfg.instance, entry.name, entry.config, cfg.stopping, seeds, threads=threads, **kwargs)


def _label(entry: RuleEntry, entries: list) -> str:
    same = [e for e in entries if e.name == entry.name]
    return entry.name if len(same) == 1 else f"{entry.name}_{same.index(entry) + 1}"


def run_experiment(cfg: ExperimentConfig, out: Path, threads: int = 1) -> dict:
    """Run every rule over every seed; write traces and summaries; return per-rule traces."""
    results, hitting, effort, evidence = {}, [], [], []
    for entry in cfg.rules:
        label = _label(entry, cfg.rules)
        traces = _simulate_rule(cfg, entry, cfg.seeds, threads)
        for t in traces:
            t.rule = label
            if cfg.write_traces:
                write_trace_csv(t, out / label / f"seed_{t.seed}" / "trace.csv")
        results[label] = traces
        hitting += aggregate(traces, "hitting", cfg.levels)
        effort += aggregate(traces, "effort")
        evidence += aggregate(traces, "evidence")
        _digest(label, traces, cfg)
    write_summary_csv(hitting, out / "summary.csv")
    write_rows_csv(effort, out / "effort.csv", ("rule", "arm", "mean_count", "mean_share"))
    write_rows_csv(evidence, out / "evidence.csv", ("rule", "arm", "mean_log10_inv_alpha"))
    return results


def _digest(label: str, traces: list, cfg: ExperimentConfig) -> None:
    lengths = np.array([t.length for t in traces], dtype=float)
    done = np.array([not t.censored for t in traces])
    shares = np.mean([t.final_counts() / t.length for t in traces], axis=0)
    tau = lengths[done].mean() if done.any() else float("nan")
    psi = " ".join(f"{v:.4f}" for v in shares)
    print(f"{label}: trials={len(traces)} mean_tau={tau:.1f} censored={int((~done).sum())} psibar=[{psi}]")
    if (~done).sum() > 0.5 * len(traces):
        print(f"WARNING: {label}: {int((~done).sum())} of {len(traces)} trials hit the cap before stopping")


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    if args.seeds is not None:
        cfg.seed_count = args.seeds
    if not cfg.rules:
        raise ConfigError("simulate needs at least one [[rules]] entry")
    run_experiment(cfg, _out_dir(args, cfg), threads=args.threads)
    return EXIT_OK


# -- reproduce ---------------------------------------------------------------

FIVE_ARM_MEANS = (0.1, 0.2, 0.3, 0.4, 0.5)


def figure_config(figure: str, seeds: Optional[int] = None) -> ExperimentConfig:
    """Built-in five-arm Bernoulli experiment behind each figure.

    Thompson sampling in ``fig1a`` stops at confidence 0.99, since reaching
    0.999 takes it prohibitively many measurements.
    """
    inst = InstanceSpec(ObservationModel.bernoulli(), FIVE_ARM_MEANS)
    cfg = RuleConfig(beta=0.5)
    if figure == "fig1a":
        rules = [RuleEntry("ttts", cfg), RuleEntry("ts", cfg)]
        levels = tuple(c for c in DEFAULT_LEVELS if c <= 0.99)
    else:
        names = ("ttts", "ttps", "ttvs", "uniform")
        rules = [RuleEntry(n, cfg) for n in names]
        levels = DEFAULT_LEVELS
    return ExperimentConfig(
        instance=inst,
        rules=rules,
        stopping=StoppingSpec.confidence(0.001, cap=100_000),
        seed_count=seeds or 100,
        levels=levels,
        write_traces=False,
    )


def _ts_stopping(figure: str, entry: RuleEntry, stopping: StoppingSpec) -> StoppingSpec:
    if figure == "fig1a" and entry.name == "ts":
        return StoppingSpec.confidence(0.01, cap=stopping.cap)
    return stopping


def reproduce(figure: str, out: Path, seeds: Optional[int] = None, threads: int = 1) -> Path:
    if figure not in FIGURES:
        raise ConfigError(f"unknown figure {figure!r}; expected one of {', '.join(FIGURES)}")
    cfg = figure_config(figure, seeds)
    rows = []
    for entry in cfg.rules:
        stopping = _ts_stopping(figure, entry, cfg.stopping)
        traces = run_trials(cfg.instance, entry.name, entry.config, stopping, cfg.seeds, threads=threads)
        _digest(entry.name, traces, cfg)
        if figure.startswith("fig1"):
            for r in aggregate(traces, "hitting", cfg.levels):
                rows.append({"rule": r["rule"], "level": r["level"], "mean_samples": r["mean_hit"],
                             "se_samples": r["se_hit"], "n_censored": r["n_censored"]})
        elif figure == "fig2a":
            rows += aggregate(traces, "effort")
        else:
            rows += aggregate(traces, "evidence")
    columns = {
        "fig1a": ("rule", "level", "mean_samples", "se_samples", "n_censored"),
        "fig1b": ("rule", "level", "mean_samples", "se_samples", "n_censored"),
        "fig2a": ("rule", "arm", "mean_count", "mean_share"),
        "fig2b": ("rule", "arm", "mean_log10_inv_alpha"),
    }[figure]
    path = out / f"{figure}.csv"
    write_rows_csv(rows, path, columns)
    print(f"wrote {path}")
    return path


def cmd_reproduce(args) -> int:
    reproduce(args.figure, _out_dir(args, None), seeds=args.seeds, threads=args.threads)
    return EXIT_OK


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toptwo", description="Top-two best-arm identification experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required: bool):
        if config_required:
            p.add_argument("--config", required=True, help="TOML experiment config")
        p.add_argument("--out", help=f"output directory (overrides ${OUT_ENV} and the config)")
        p.add_argument("--seeds", type=int, help="number of seeds (overrides the config)")
        p.add_argument("--threads", type=int, default=1, help="worker processes for trials")

    common(sub.add_parser("solve", help="solve for optimal exponents and allocations"), True)
    common(sub.add_parser("simulate", help="run seeded trials and write CSV traces/summaries"), True)
    rep = sub.add_parser("reproduce", help="run a built-in figure experiment")
    rep.add_argument("figure", choices=FIGURES)
    common(rep, False)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    handlers = {"solve": cmd_solve, "simulate": cmd_simulate, "reproduce": cmd_reproduce}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
