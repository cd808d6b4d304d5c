"""Allocation rules: which arm to measure next.

Every ``select_*`` function returns a ``SelectionOutcome``. Rules that need
optimal-action probabilities accept an ``estimator``: a zero-argument callable
returning an ``OptimalityEstimate`` for the current state (the simulator
passes a cached incremental one). Without it, the probabilities are computed
from scratch by quadrature.

Ties are broken toward the lowest arm index, except where a rule draws from
the posterior: argmax ties between posterior draws (possible only for grid
beliefs) are split uniformly, matching how the optimal-action probabilities
of grid beliefs are defined.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import special

from .expfam import MIN_TOP_GAP, InstanceSpec
from .exponent import solve_gamma_beta, solve_gamma_star
from .optprob import OptimalityEstimate, alpha_quadrature, QuadratureGrid, sample_approx, resolve_utility
from .posterior import BeliefState, NormalBelief, sample_means

log = logging.getLogger(__name__)

RULE_NAMES = ("ts", "ttts", "ttps", "ttvs", "uniform", "fixed", "two_stage", "ei", "map_toptwo")
TOP_TWO_RULES = ("ttts", "ttps", "ttvs", "map_toptwo")
FALLBACKS = ("sample_approx", "conditional")

Estimator = Callable[[], OptimalityEstimate]


class RuleError(ValueError):
    pass


@dataclass
class RuleConfig:
    """Tuning for the allocation rules.

    ``ttts_fallback`` decides what TTTS does once ``resample_cap`` redraws all
    returned the leader: ``sample_approx`` takes the runner-up of a fresh
    Monte Carlo batch; ``conditional`` draws the challenger from the optimal-
    action probabilities restricted to the other arms, which is the exact law
    of the unbounded redraw loop.
    """

    beta: float = 0.5
    mc_samples: int = 10_000
    quadrature_points: int = 1001
    resample_cap: int = 1_000_000
    utility: str = "identity"
    ttts_fallback: str = "sample_approx"

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise RuleError(f"beta must lie in (0, 1], got {self.beta}")
        if self.mc_samples < 1 or self.quadrature_points < 3 or self.resample_cap < 1:
            raise RuleError("mc_samples >= 1, quadrature_points >= 3 and resample_cap >= 1 required")
        if self.ttts_fallback not in FALLBACKS:
            raise RuleError(f"ttts_fallback must be one of {FALLBACKS}")
        if not callable(self.utility) and self.utility not in ("identity", "natural"):
            raise RuleError(f"unknown utility {self.utility!r}")


@dataclass
class SelectionOutcome:
    chosen: int
    top: Optional[int] = None
    alternative: Optional[int] = None
    psi_n: Optional[np.ndarray] = None
    fallback: bool = False


def _argmax_draws(theta: np.ndarray, state: BeliefState, rng: np.random.Generator) -> np.ndarray:
    """Row-wise argmax of posterior draws with uniform tie-splitting for grid beliefs."""
    theta = np.atleast_2d(theta)
    win = theta.argmax(axis=1)
    if state.kind == "grid":
        ties = theta == theta.max(axis=1, keepdims=True)
        multi = ties.sum(axis=1) > 1
        if np.any(multi):
            keys = rng.random(ties.shape)
            keys[~ties] = -1.0
            win = np.where(multi, keys.argmax(axis=1), win)
    return win


def _runner_up(scores: np.ndarray, top: int) -> int:
    masked = np.array(scores, dtype=float)
    masked[top] = -np.inf
    return int(np.argmax(masked))


def _coin(top: int, alt: int, beta: float, rng: np.random.Generator, k: int) -> SelectionOutcome:
    psi = np.zeros(k)
    psi[top] = beta
    psi[alt] += 1.0 - beta
    chosen = top if rng.random() < beta else alt
    return SelectionOutcome(chosen, top=top, alternative=alt, psi_n=psi)


def _default_estimator(state: BeliefState, cfg: RuleConfig) -> Estimator:
    def est():
        grid = None if state.kind == "grid" else QuadratureGrid.covering(state, cfg.quadrature_points)
        return alpha_quadrature(state, grid)

    return est


# -- Thompson family ---------------------------------------------------------

def select_ts(state: BeliefState, cfg: RuleConfig, rng: np.random.Generator, estimator=None) -> SelectionOutcome:
    """Play the argmax of one posterior draw."""
    i = int(_argmax_draws(sample_means(state, rng), state, rng)[0])
    return SelectionOutcome(i, top=i)


def select_ttts(state: BeliefState, cfg: RuleConfig, rng: np.random.Generator, estimator: Optional[Estimator] = None) -> SelectionOutcome:
    """Top-two Thompson sampling.

    Redraws are taken in growing vectorized batches; the first draw whose
    argmax differs from the leader is the challenger, exactly as in a one-at-a-
    time loop.
    """
    k = state.k
    leader = int(_argmax_draws(sample_means(state, rng), state, rng)[0])
    if rng.random() < cfg.beta:
        return SelectionOutcome(leader, top=leader)
    if k == 2:
        # the redraw loop can only ever stop at the other arm
        return SelectionOutcome(1 - leader, top=leader, alternative=1 - leader)
    drawn, batch = 0, 8
    while drawn < cfg.resample_cap:
        size = min(batch, cfg.resample_cap - drawn)
        win = _argmax_draws(sample_means(state, rng, size=size), state, rng)
        hits = np.flatnonzero(win != leader)
        if hits.size:
            alt = int(win[hits[0]])
            return SelectionOutcome(alt, top=leader, alternative=alt)
        drawn += size
        batch *= 4
    if cfg.ttts_fallback == "conditional":
        est = (estimator or _default_estimator(state, cfg))()
        others = np.array([j for j in range(k) if j != leader])
        la = est.log_alpha[others]
        p = np.exp(la - special.logsumexp(la))
        alt = int(others[rng.choice(others.size, p=p / p.sum())])
    else:
        est = sample_approx(state, cfg.mc_samples, "identity", rng)
        alt = _runner_up(est.alpha, leader)
    log.debug("ttts: %d redraws all returned arm %d; %s fallback chose %d", drawn, leader, cfg.ttts_fallback, alt)
    return SelectionOutcome(alt, top=leader, alternative=alt, fallback=True)


def psi_ttts_formula(alpha: Sequence[float], beta: float) -> np.ndarray:
    """Per-arm probability that top-two Thompson sampling measures each arm."""
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha < 0) or abs(alpha.sum() - 1.0) > 1e-9:
        raise RuleError("alpha must be a probability vector")
    if np.any(alpha >= 1.0):
        raise RuleError("the formula is undefined when some alpha equals 1")
    ratio = alpha / (1.0 - alpha)
    return alpha * (beta + (1.0 - beta) * (ratio.sum() - ratio))


# -- deterministic top-two ---------------------------------------------------

def select_ttps(state: BeliefState, cfg: RuleConfig, rng: np.random.Generator, estimator: Optional[Estimator] = None) -> SelectionOutcome:
    """Top-two probability sampling: leader and runner-up by optimal-action probability."""
    est = (estimator or _default_estimator(state, cfg))()
    top = int(np.argmax(est.log_alpha))
    return _coin(top, _runner_up(est.log_alpha, top), cfg.beta, rng, state.k)


def select_ttvs(state: BeliefState, cfg: RuleConfig, rng: np.random.Generator, estimator=None) -> SelectionOutcome:
    """Top-two value sampling with Monte Carlo value estimates."""
    est = sample_approx(state, cfg.mc_samples, cfg.utility, rng)
    top = int(np.argmax(est.value))
    alt = _runner_up(est.value, top)
    if estimator is not None:
        # challengers tied on the Monte Carlo value (typically all zero once the
        # leader wins every draw) are ranked by the quadrature optimality probability
        tied = np.flatnonzero(est.value == est.value[alt])
        tied = tied[tied != top]
        if tied.size > 1:
            alt = int(tied[np.argmax(estimator().log_alpha[tied])])
    return _coin(top, alt, cfg.beta, rng, state.k)


# -- non-adaptive --------------------------------------------------------------

def select_uniform(state: BeliefState, cfg: RuleConfig, rng: np.random.Generator, estimator=None) -> SelectionOutcome:
    k = state.k
    return SelectionOutcome(int(rng.integers(k)), psi_n=np.full(k, 1.0 / k))


def check_allocation(psi, k: Optional[int] = None) -> np.ndarray:
    psi = np.asarray(psi, dtype=float)
    if psi.ndim != 1 or (k is not None and psi.size != k):
        raise RuleError(f"allocation must be a vector of length {k}")
    if np.any(psi < 0) or abs(psi.sum() - 1.0) > 1e-9:
        raise RuleError("allocation must be a probability vector")
    return psi / psi.sum()


def select_fixed(psi, rng: np.random.Generator) -> SelectionOutcome:
    psi = check_allocation(psi)
    return SelectionOutcome(int(rng.choice(psi.size, p=psi)), psi_n=psi)


@dataclass
class TwoStageSchedule:
    """Exploration length and the plug-in allocation of a two-stage rule."""

    budget: int
    explore: Optional[int] = None
    psi_hat: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.budget < 1:
            raise RuleError("two-stage budget must be positive")
        if self.explore is None:
            self.explore = math.ceil(self.budget ** (2.0 / 3.0))


def _separate(means: np.ndarray, state: BeliefState) -> np.ndarray:
    # enforce strictly increasing sorted means with the top gap above the solver floor
    out = means.astype(float).copy()
    order = np.argsort(out, kind="stable")
    for r in range(1, out.size):
        lo = out[order[r - 1]] + 2 * MIN_TOP_GAP
        if out[order[r]] < lo:
            out[order[r]] = lo
    d_lo, d_hi = state.model.mean_domain
    if out.max() >= d_hi or out.min() <= d_lo:
        raise RuleError("plug-in means cannot be separated inside the domain")
    return out


def plug_in_allocation(state: BeliefState) -> np.ndarray:
    """Unconstrained optimal allocation with posterior means standing in for the truth."""
    means = _separate(state.means(), state)
    inst = InstanceSpec(state.model, tuple(means))
    return solve_gamma_star(inst).psi


def select_two_stage(state: BeliefState, cfg: RuleConfig, schedule: TwoStageSchedule, rng: np.random.Generator, estimator=None) -> SelectionOutcome:
    """Uniform exploration for ``schedule.explore`` steps, then a fixed plug-in allocation."""
    step = state.n + 1
    if step <= schedule.explore:
        return select_uniform(state, cfg, rng)
    if schedule.psi_hat is None:
        schedule.psi_hat = plug_in_allocation(state)
    return select_fixed(schedule.psi_hat, rng)


# -- Gaussian-only baselines ---------------------------------------------------

def _normal_params(state: BeliefState):
    if state.kind != "normal":
        raise RuleError("this rule requires conjugate Normal beliefs")
    m = np.array([a.mean for a in state.arms])
    v = np.array([a.var for a in state.arms])
    return m, v


def expected_improvement(state: BeliefState) -> np.ndarray:
    """Expected improvement of each arm over the largest posterior mean.

    ``E[max(theta_i - m*, 0)] = s_i phi(z_i) + (m_i - m*) Phi(z_i)`` with
    ``z_i = (m_i - m*) / s_i`` and ``m* = max_j m_j``, so the incumbent scores
    ``s_I phi(0)``.
    """
    m, v = _normal_params(state)
    s = np.sqrt(v)
    d = m - m.max()
    with np.errstate(divide="ignore", invalid="ignore"):
        z = d / s
        ei = d * special.ndtr(z) + s * np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    return np.where(s > 0, ei, 0.0)


def select_ei(state: BeliefState, cfg: Optional[RuleConfig] = None, rng=None, estimator=None) -> SelectionOutcome:
    """Expected-improvement baseline (deterministic given the state)."""
    return SelectionOutcome(int(np.argmax(expected_improvement(state))))


def map_challenger(state: BeliefState):
    """Leader and constrained-MAP challenger for independent Normal beliefs.

    Returns ``(leader, challenger, penalties)``. The cheapest way to make the
    leader non-optimal pools one rival with it at their precision-weighted
    mean; the log-density cost of doing so with arm j is the penalty.
    """
    m, v = _normal_params(state)
    top = int(np.argmax(m))
    pen = (m[top] - m) ** 2 / (2.0 * (v[top] + v))
    pen[top] = np.inf
    j = int(np.argmin(pen))
    x = (m[top] / v[top] + m[j] / v[j]) / (1.0 / v[top] + 1.0 / v[j])
    theta = m.copy()
    theta[top] = theta[j] = x
    theta[top] = -np.inf
    rival = int(np.argmax(theta))
    challenger = rival if theta[rival] > x else j
    return top, challenger, pen


def select_map_toptwo(state: BeliefState, cfg: RuleConfig, rng: np.random.Generator, estimator=None) -> SelectionOutcome:
    top, alt, _ = map_challenger(state)
    return _coin(top, alt, cfg.beta, rng, state.k)


# -- dispatch ----------------------------------------------------------------

Policy = Callable[[BeliefState, np.random.Generator, Optional[Estimator]], SelectionOutcome]


def make_policy(
    name: str,
    cfg: Optional[RuleConfig] = None,
    *,
    psi=None,
    instance: Optional[InstanceSpec] = None,
    schedule: Optional[TwoStageSchedule] = None,
) -> Policy:
    """Bind a rule name and its configuration into a ``policy(state, rng, estimator)`` callable.

    ``fixed`` takes ``psi`` as a vector, or ``psi="optimal"`` for the
    constrained optimum of ``instance`` at ``cfg.beta``. ``two_stage`` needs a
    ``schedule`` (a fresh one per trial, since it stores the plug-in allocation).
    """
    cfg = cfg or RuleConfig()
    simple = {
        "ts": select_ts,
        "ttts": select_ttts,
        "ttps": select_ttps,
        "ttvs": select_ttvs,
        "uniform": select_uniform,
        "ei": select_ei,
        "map_toptwo": select_map_toptwo,
    }
    if name in simple:
        fn = simple[name]
        return lambda state, rng, estimator=None: fn(state, cfg, rng, estimator)
    if name == "fixed":
        if isinstance(psi, str) and psi == "optimal":
            if instance is None:
                raise RuleError("psi='optimal' needs the instance")
            psi = solve_gamma_beta(instance, cfg.beta).psi
        if psi is None:
            raise RuleError("the fixed rule needs an allocation psi")
        vec = check_allocation(psi)
        return lambda state, rng, estimator=None: select_fixed(vec, rng)
    if name == "two_stage":
        if schedule is None:
            raise RuleError("the two-stage rule needs a schedule")
        return lambda state, rng, estimator=None: select_two_stage(state, cfg, schedule, rng)
    raise RuleError(f"unknown rule {name!r}; expected one of {RULE_NAMES}")


def needs_normal(name: str) -> bool:
    return name in ("ei", "map_toptwo")
