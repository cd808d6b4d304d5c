"""Seeded trial runner, traces and summary statistics.

A trial loops select -> observe -> update on a fixed instance until a horizon
or a confidence stopping rule fires. Optimal-action probabilities are kept in
log space by an ``AlphaTracker`` so that error masses far below 1e-300 can
still be regressed against ``n`` when fitting convergence exponents.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import special

from .expfam import BERNOULLI, InstanceSpec, sample_observation
from .optprob import AlphaTracker
from .posterior import BeliefState, update
from .rules import RuleConfig, RuleError, TwoStageSchedule, make_policy, needs_normal

FIXED_HORIZON = "fixed_horizon"
CONFIDENCE = "confidence"
BELIEFS = ("conjugate", "grid")

# Error masses below this are not trusted from the conjugate Beta pipeline,
# whose incomplete-beta CDF underflows near the smallest double.
BETA_PIPELINE_FLOOR = 1e-300


@dataclass(frozen=True)
class StoppingSpec:
    """When a trial ends: after ``horizon`` steps, or once ``max alpha > 1 - delta``.

    ``cap`` bounds the length of confidence runs; hitting it marks the trace
    censored.
    """

    mode: str
    horizon: Optional[int] = None
    delta: Optional[float] = None
    cap: Optional[int] = None

    def __post_init__(self):
        if self.mode == FIXED_HORIZON:
            if self.horizon is None or self.horizon < 1:
                raise ValueError("fixed_horizon needs N >= 1")
            cap = self.horizon if self.cap is None else self.cap
            if cap < self.horizon:
                raise ValueError("cap must be at least N for a fixed horizon")
            object.__setattr__(self, "cap", int(cap))
        elif self.mode == CONFIDENCE:
            if self.delta is None or not 0.0 < self.delta < 1.0:
                raise ValueError("confidence stopping needs 0 < delta < 1")
            if self.cap is None or self.cap < 1:
                raise ValueError("confidence stopping needs a positive cap")
        else:
            raise ValueError(f"unknown stopping mode {self.mode!r}")

    @classmethod
    def fixed(cls, horizon: int) -> "StoppingSpec":
        return cls(FIXED_HORIZON, horizon=int(horizon))

    @classmethod
    def confidence(cls, delta: float, cap: int = 100_000) -> "StoppingSpec":
        return cls(CONFIDENCE, delta=float(delta), cap=int(cap))


@dataclass(frozen=True)
class Cadence:
    """Which steps record the optimal-action probabilities."""

    dense_until: int = 1000
    every: int = 10

    def __post_init__(self):
        if self.dense_until < 0 or self.every < 1:
            raise ValueError("cadence needs dense_until >= 0 and every >= 1")

    def records(self, n: int) -> bool:
        return n <= self.dense_until or n % self.every == 0


EVERY_STEP = Cadence(dense_until=0, every=1)


@dataclass
class Trace:
    """Per-step choices and observations plus probabilities at recorded steps.

    ``arms`` and ``ys`` hold every step. ``rec_n`` lists the recorded step
    indices (1-based: the number of observations taken so far) and the rows of
    ``log_alpha`` and ``counts`` belong to them. Cumulative effort is tracked
    as observation counts, which sum to ``n`` exactly.
    """

    rule: str
    seed: int
    fingerprint: str
    best: int
    arms: np.ndarray
    ys: np.ndarray
    rec_n: np.ndarray
    log_alpha: np.ndarray
    counts: np.ndarray
    censored: bool = False
    stopped_at: Optional[int] = None
    log_floor: Optional[float] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.log_alpha.shape[1]

    @property
    def length(self) -> int:
        return int(self.arms.size)

    @property
    def alpha(self) -> np.ndarray:
        return np.exp(self.log_alpha)

    @property
    def psibar(self) -> np.ndarray:
        return self.counts / self.rec_n[:, None]

    @property
    def log10_inv_alpha(self) -> np.ndarray:
        return -self.log_alpha / math.log(10.0)

    def final_counts(self) -> np.ndarray:
        return np.bincount(self.arms, minlength=self.k)


def _initial_state(instance: InstanceSpec, belief: str, prior_var, grid_points: int, grid_bounds) -> BeliefState:
    model = instance.model
    if belief == "grid":
        return BeliefState.grid_prior(model, instance.k, grid_points, grid_bounds)
    if belief != "conjugate":
        raise ValueError(f"belief must be one of {BELIEFS}")
    if model.kind == BERNOULLI:
        return BeliefState.beta_prior(instance.k)
    lo, hi = model.mean_domain
    var = ((hi - lo) / 4.0) ** 2 if prior_var is None else float(prior_var)
    return BeliefState.normal_prior(model, instance.k, mean=0.5 * (lo + hi), var=var)


def run_trial(
    instance: InstanceSpec,
    rule: str,
    cfg: Optional[RuleConfig] = None,
    stopping: Optional[StoppingSpec] = None,
    seed: int = 0,
    *,
    belief: str = "conjugate",
    psi=None,
    cadence: Optional[Cadence] = None,
    prior_var: Optional[float] = None,
    grid_points: int = 1001,
    grid_bounds=None,
    explore: Optional[int] = None,
) -> Trace:
    """Run one seeded trial and return its trace.

    Observation noise and the policy's own randomness come from two streams
    spawned from ``seed``, so a run is fully determined by its arguments.
    ``psi`` is the allocation for the ``fixed`` rule (a vector or
    ``"optimal"``); ``explore`` overrides the two-stage exploration length.
    Confidence stopping checks (and records) every step regardless of
    ``cadence``.
    """
    cfg = cfg or RuleConfig()
    stopping = stopping or StoppingSpec.fixed(1000)
    cadence = cadence or Cadence()
    if needs_normal(rule) and (belief != "conjugate" or instance.model.kind == BERNOULLI):
        raise RuleError(f"rule {rule!r} needs conjugate Normal beliefs")
    state = _initial_state(instance, belief, prior_var, grid_points, grid_bounds)

    schedule = None
    if rule == "two_stage":
        budget = stopping.horizon if stopping.mode == FIXED_HORIZON else stopping.cap
        schedule = TwoStageSchedule(budget, explore)
    policy = make_policy(rule, cfg, psi=psi, instance=instance, schedule=schedule)

    obs_seq, pol_seq = np.random.SeedSequence(seed).spawn(2)
    obs_rng, pol_rng = np.random.default_rng(obs_seq), np.random.default_rng(pol_seq)
    tracker = AlphaTracker(state, points=cfg.quadrature_points)
    confidence = stopping.mode == CONFIDENCE
    limit = stopping.cap if confidence else stopping.horizon
    log_target = math.log1p(-stopping.delta) if confidence else None

    k, means, model = instance.k, instance.means, instance.model
    arms = np.empty(limit, dtype=np.int64)
    ys = np.empty(limit)
    counts = np.zeros(k, dtype=np.int64)
    rec_n, rec_la, rec_counts = [], [], []
    fallbacks = 0
    stopped_at = None

    for n in range(1, limit + 1):
        out = policy(state, pol_rng, tracker.estimate)
        arm = out.chosen
        fallbacks += out.fallback
        y = sample_observation(model, means[arm], obs_rng)
        state = update(state, arm, y)
        tracker.sync(state, arm)
        arms[n - 1], ys[n - 1] = arm, y
        counts[arm] += 1
        if confidence or cadence.records(n):
            la = tracker.estimate().log_alpha
            rec_n.append(n)
            rec_la.append(la)
            rec_counts.append(counts.copy())
            if confidence and la.max() > log_target:
                stopped_at = n
                break

    length = stopped_at or limit
    floor = BETA_PIPELINE_FLOOR if state.kind == "beta" else None
    return Trace(
        rule=rule,
        seed=int(seed),
        fingerprint=instance.fingerprint(),
        best=instance.best,
        arms=arms[:length],
        ys=ys[:length],
        rec_n=np.array(rec_n, dtype=np.int64),
        log_alpha=np.array(rec_la).reshape(-1, k),
        counts=np.array(rec_counts, dtype=np.int64).reshape(-1, k),
        censored=confidence and stopped_at is None,
        stopped_at=stopped_at,
        log_floor=None if floor is None else math.log(floor),
        diagnostics={"fallbacks": fallbacks, "regrids": tracker.regrids, "belief": state.kind},
    )


def _trial_job(args):
    instance, rule, cfg, stopping, seed, kwargs = args
    return run_trial(instance, rule, cfg, stopping, seed, **kwargs)


def run_trials(
    instance: InstanceSpec,
    rule: str,
    cfg: Optional[RuleConfig],
    stopping: StoppingSpec,
    seeds: Iterable[int],
    threads: int = 1,
    **kwargs,
) -> list:
    """Independent trials over ``seeds``, returned sorted by seed.

    With ``threads > 1`` trials run in worker processes; results are
    identical to a serial run.
    """
    jobs = [(instance, rule, cfg, stopping, int(s), kwargs) for s in seeds]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            traces = list(pool.map(_trial_job, jobs))
    else:
        traces = [_trial_job(j) for j in jobs]
    return sorted(traces, key=lambda t: t.seed)


# -- metrics -----------------------------------------------------------------

def hitting_times(trace: Trace, levels: Sequence[float]) -> np.ndarray:
    """First recorded step with ``max_i alpha_i >= c`` for each level ``c``.

    Exact when the trace recorded every step; otherwise the first recorded
    crossing. Levels never reached are ``nan`` (censored).
    """
    levels = np.asarray(levels, dtype=float)
    if np.any((levels <= 0) | (levels > 1)):
        raise ValueError("levels must lie in (0, 1]")
    running = np.maximum.accumulate(trace.log_alpha.max(axis=1))
    with np.errstate(divide="ignore"):
        log_levels = np.log(levels)
    out = np.full(levels.size, np.nan)
    for j, lc in enumerate(log_levels):
        # alpha < 1 for continuous posteriors, so c = 1 is never reached
        if levels[j] >= 1.0:
            continue
        idx = np.searchsorted(running, lc, side="left")
        if idx < running.size:
            out[j] = trace.rec_n[idx]
    return out


def log_error_mass(trace: Trace) -> np.ndarray:
    """Natural log of the posterior mass off the true best arm at each recorded step."""
    others = np.delete(trace.log_alpha, trace.best, axis=1)
    return special.logsumexp(others, axis=1)


@dataclass(frozen=True)
class ExponentFit:
    rate: float
    points: int
    truncated: bool
    window: tuple

    def __float__(self):
        return self.rate


def fit_exponent(trace: Trace, tail_fraction: float = 0.5, floor: Optional[float] = None) -> ExponentFit:
    """Least-squares slope of ``-log(error mass)`` against ``n`` over the trace tail.

    The window is the recorded steps with ``n >= (1 - tail_fraction) * n_last``.
    If the error mass drops below the pipeline's precision floor (or to an
    exact zero) the window is cut at that point and ``truncated`` is set.
    """
    if not 0.0 < tail_fraction <= 1.0:
        raise ValueError("tail_fraction must lie in (0, 1]")
    if trace.censored:
        raise ValueError("cannot fit an exponent on a censored trace")
    lm = log_error_mass(trace)
    n = trace.rec_n.astype(float)
    sel = n >= (1.0 - tail_fraction) * n[-1]
    log_floor = math.log(floor) if floor is not None else trace.log_floor
    bad = ~np.isfinite(lm)
    if log_floor is not None:
        bad |= lm < log_floor
    truncated = False
    if np.any(bad & sel):
        first = np.flatnonzero(bad & sel)[0]
        sel &= np.arange(n.size) < first
        truncated = True
    if sel.sum() < 2:
        raise ValueError("fewer than two usable points in the regression window")
    slope = np.polyfit(n[sel], -lm[sel], 1)[0]
    return ExponentFit(float(slope), int(sel.sum()), truncated, (int(n[sel][0]), int(n[sel][-1])))


def _check_homogeneous(traces: Sequence[Trace]) -> list:
    if not traces:
        raise ValueError("no traces to aggregate")
    keys = {(t.rule, t.fingerprint) for t in traces}
    if len(keys) > 1:
        raise ValueError(f"cannot aggregate mixed rules/instances: {sorted(keys)}")
    return sorted(traces, key=lambda t: t.seed)


def _describe(values: np.ndarray) -> dict:
    ok = values[np.isfinite(values)]
    n = ok.size
    if n == 0:
        return {"mean": math.nan, "se": math.nan, "median": math.nan, "q10": math.nan, "q90": math.nan}
    se = float(ok.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    q10, med, q90 = np.quantile(ok, [0.1, 0.5, 0.9])
    return {"mean": float(ok.mean()), "se": se, "median": float(med), "q10": float(q10), "q90": float(q90)}


def aggregate(traces: Sequence[Trace], statistic: str, levels: Optional[Sequence[float]] = None) -> list:
    """Summary rows over homogeneous traces.

    ``hitting``: one row per level with mean/se/median/quantiles of hitting
    times; censored trials are left out and counted. ``effort``: one row per
    arm with the terminal measurement count and share. ``evidence``: one row
    per arm with terminal ``log10(1/alpha)``.
    """
    traces = _check_homogeneous(traces)
    rule = traces[0].rule
    rows = []
    if statistic == "hitting":
        if levels is None:
            raise ValueError("hitting statistic needs levels")
        hits = np.array([hitting_times(t, levels) for t in traces])
        for j, c in enumerate(levels):
            d = _describe(hits[:, j])
            rows.append({
                "rule": rule, "level": float(c), "mean_hit": d["mean"], "se_hit": d["se"],
                "median_hit": d["median"], "q10_hit": d["q10"], "q90_hit": d["q90"],
                "n_censored": int(np.isnan(hits[:, j]).sum()), "n_trials": len(traces),
            })
    elif statistic == "effort":
        counts = np.array([t.final_counts() for t in traces], dtype=float)
        shares = counts / counts.sum(axis=1, keepdims=True)
        for i in range(counts.shape[1]):
            d = _describe(shares[:, i])
            rows.append({
                "rule": rule, "arm": i + 1, "mean_count": float(counts[:, i].mean()),
                "mean_share": d["mean"], "se_share": d["se"], "median_share": d["median"],
                "q10_share": d["q10"], "q90_share": d["q90"],
            })
    elif statistic == "evidence":
        ev = np.array([t.log10_inv_alpha[-1] for t in traces])
        for i in range(ev.shape[1]):
            d = _describe(ev[:, i])
            rows.append({
                "rule": rule, "arm": i + 1, "mean_log10_inv_alpha": d["mean"], "se": d["se"],
                "median": d["median"],
            })
    else:
        raise ValueError(f"unknown statistic {statistic!r}; expected hitting, effort or evidence")
    return rows


# -- CSV emission --------------------------------------------------------------

TRACE_COLUMNS = ("n", "arm", "y")
SUMMARY_COLUMNS = ("rule", "level", "mean_hit", "se_hit", "n_censored")


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def trace_header(k: int) -> list:
    return list(TRACE_COLUMNS) + [f"alpha_{i}" for i in range(1, k + 1)] + [f"psibar_{i}" for i in range(1, k + 1)]


def write_trace_csv(trace: Trace, path) -> None:
    """One row per recorded step: ``n, arm, y, alpha_1..k, psibar_1..k`` (arms 1-based)."""
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    alpha, psibar = trace.alpha, trace.psibar
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trace_header(trace.k))
        for r, n in enumerate(trace.rec_n):
            row = [int(n), int(trace.arms[n - 1]) + 1, _fmt(trace.ys[n - 1])]
            row += [_fmt(v) for v in alpha[r]] + [_fmt(v) for v in psibar[r]]
            w.writerow(row)


def write_rows_csv(rows: Sequence[dict], path, columns: Sequence[str]) -> None:
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([row[c] if isinstance(row[c], str) else _fmt(row[c]) for c in columns])


def write_summary_csv(rows: Sequence[dict], path) -> None:
    """Hitting-time summary with columns ``rule, level, mean_hit, se_hit, n_censored``."""
    write_rows_csv(rows, path, SUMMARY_COLUMNS)
