"""Probabilities that each arm is optimal, and posterior value measures.

For independent beliefs the probability that arm ``i`` is best reduces to the
1-D integral of ``f_i(x) * prod_{j != i} F_j(x)``. Everything is evaluated in
log space so that probabilities far below 1e-308 keep their exponent, which
is what the convergence-rate experiments need.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy import special

from .expfam import ObservationModel, natural_parameter
from .posterior import BeliefState, BetaBelief, GridBelief, NormalBelief, log_beta_pdf, logsumexp, sample_means

# Half-width, in posterior standard deviations, of the region a quadrature
# grid must cover around every arm.
BULK_WIDTH = 12.0


@dataclass(frozen=True)
class QuadratureGrid:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 3:
            raise ValueError("a quadrature grid needs at least 3 points")
        steps = np.diff(pts)
        if np.any(steps <= 0):
            raise ValueError("quadrature points must be strictly increasing")
        object.__setattr__(self, "points", pts)

    @property
    def m(self) -> int:
        return self.points.size

    @property
    def step(self) -> float:
        return float(self.points[1] - self.points[0])

    @classmethod
    def uniform(cls, lo: float, hi: float, m: int = 1001) -> "QuadratureGrid":
        """``m`` midpoints of an equal partition of ``(lo, hi)``."""
        h = (hi - lo) / m
        return cls(lo + h * (np.arange(m) + 0.5))

    @classmethod
    def covering(cls, state: BeliefState, m: int = 1001, width: float = BULK_WIDTH) -> "QuadratureGrid":
        """Uniform grid spanning every arm's posterior bulk, clipped to the domain."""
        means, sds = state.means(), state.sds()
        d_lo, d_hi = state.model.mean_domain
        lo = max(d_lo, float(np.min(means - width * sds)))
        hi = min(d_hi, float(np.max(means + width * sds)))
        return cls.uniform(lo, hi, m)


@dataclass
class OptimalityEstimate:
    alpha: np.ndarray
    value: Optional[np.ndarray] = None
    method: str = "quadrature"
    samples_or_points: int = 0
    log_alpha: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.log_alpha is None:
            with np.errstate(divide="ignore"):
                self.log_alpha = np.log(self.alpha)


# -- per-arm log density / log CDF ------------------------------------------

def arm_log_pdf_cdf(belief, x: np.ndarray):
    with np.errstate(divide="ignore"):
        if isinstance(belief, BetaBelief):
            return log_beta_pdf(belief.a, belief.b, x), np.log(special.betainc(belief.a, belief.b, x))
        if isinstance(belief, NormalBelief):
            z = (x - belief.mean) / belief.sd
            return -0.5 * z * z - math.log(belief.sd * math.sqrt(2.0 * math.pi)), special.log_ndtr(z)
    raise TypeError(f"no continuous density for {type(belief).__name__}")


def _excluding_sums(rows: np.ndarray) -> np.ndarray:
    # out[i] = sum_{j != i} rows[j], built from prefix and suffix sums so that
    # -inf entries never meet a subtraction
    k = rows.shape[0]
    out = np.empty_like(rows)
    acc = np.zeros(rows.shape[1])
    for i in range(k):
        out[i] = acc
        acc = acc + rows[i]
    acc = np.zeros(rows.shape[1])
    for i in range(k - 1, -1, -1):
        out[i] = out[i] + acc
        acc = acc + rows[i]
    return out


def _normalize_log(log_alpha: np.ndarray) -> np.ndarray:
    return log_alpha - logsumexp(log_alpha)


def log_alpha_continuous(log_f: np.ndarray, log_cdf: np.ndarray, step: float) -> np.ndarray:
    """Normalized log optimal-action probabilities from gridded log pdf/cdf rows."""
    terms = log_f + _excluding_sums(log_cdf)
    raw = logsumexp(terms, axis=1) + math.log(step)
    return _normalize_log(raw)


def _grid_arm_logs(belief: GridBelief):
    lw = belief.log_weights
    incl = np.logaddexp.accumulate(lw)
    strict = np.empty_like(incl)
    strict[0] = -np.inf
    strict[1:] = incl[:-1]
    return lw, strict


def log_alpha_discrete(log_p: np.ndarray, log_below: np.ndarray) -> np.ndarray:
    """Exact log optimal-action probabilities for beliefs on a shared support.

    Ties at a support point are split uniformly among the tied arms, so the
    result is a proper probability vector. For arm ``i`` the tie-split
    indicator integrates to ``int_0^1 prod_{j != i} (P(X_j < x) + P(X_j = x) z) dz``.
    Each factor is scaled by ``max(P(X_j < x), P(X_j = x))``; the scaled
    integral then lies in ``[1/k, 1]`` and is safe to form in linear space.
    """
    k, m = log_p.shape
    log_scale = np.maximum(log_p, log_below)
    dead = np.isneginf(log_scale)
    shift = np.where(dead, 0.0, log_scale)
    a = np.where(dead, 1.0, np.exp(log_below - shift))
    b = np.where(dead, 0.0, np.exp(log_p - shift))
    log_rest = _excluding_sums(log_scale)
    inv = 1.0 / np.arange(1, k + 1)[:, None]
    out = np.empty(k)
    for i in range(k):
        coef = np.zeros((k, m))
        coef[0] = 1.0
        deg = 0
        for j in range(k):
            if j == i:
                continue
            coef[1 : deg + 2] = coef[1 : deg + 2] * a[j] + coef[: deg + 1] * b[j]
            coef[0] *= a[j]
            deg += 1
        integral = (coef * inv).sum(axis=0)
        with np.errstate(divide="ignore"):
            out[i] = logsumexp(log_p[i] + log_rest[i] + np.log(integral))
    return _normalize_log(out)


# -- public operations -------------------------------------------------------

def alpha_quadrature(state: BeliefState, grid: Optional[QuadratureGrid] = None) -> OptimalityEstimate:
    """Probability each arm is optimal, by 1-D quadrature on ``grid``.

    Grid beliefs ignore ``grid`` and are evaluated exactly on their support.
    Without a grid, one covering the posterior bulk is built.
    """
    if state.kind == "grid":
        logs = [_grid_arm_logs(a) for a in state.arms]
        la = log_alpha_discrete(np.array([l[0] for l in logs]), np.array([l[1] for l in logs]))
        m = state.arms[0].points.size
    else:
        if grid is None:
            grid = QuadratureGrid.covering(state)
        rows = [arm_log_pdf_cdf(a, grid.points) for a in state.arms]
        la = log_alpha_continuous(np.array([r[0] for r in rows]), np.array([r[1] for r in rows]), grid.step)
        m = grid.m
    return OptimalityEstimate(alpha=np.exp(la), method="quadrature", samples_or_points=m, log_alpha=la)


Utility = Union[str, Callable[[np.ndarray], np.ndarray]]


def resolve_utility(u: Utility, model: ObservationModel) -> Callable[[np.ndarray], np.ndarray]:
    """Named utilities: ``identity`` (the mean itself) and ``natural`` (natural parameter)."""
    if callable(u):
        return u
    if u == "identity":
        return lambda x: x
    if u == "natural":
        return lambda x: natural_parameter(model, x)
    raise ValueError(f"unknown utility {u!r}; expected 'identity', 'natural' or a callable")


def sample_approx(state: BeliefState, m: int, u: Utility, rng: np.random.Generator) -> OptimalityEstimate:
    """Monte Carlo estimates of optimal-action probabilities and values from ``m`` joint draws.

    Argmax ties (possible only for grid beliefs) are broken uniformly at random.
    """
    if m < 1:
        raise ValueError("need at least one posterior sample")
    theta = sample_means(state, rng, size=m)
    util = np.asarray(resolve_utility(u, state.model)(theta), dtype=float)
    k = state.k
    top = theta.max(axis=1)
    ties = theta == top[:, None]
    if state.kind == "grid" and np.any(ties.sum(axis=1) > 1):
        keys = rng.random((m, k))
        keys[~ties] = -1.0
        win = keys.argmax(axis=1)
    else:
        win = theta.argmax(axis=1)
    counts = np.bincount(win, minlength=k)
    second = np.partition(util, k - 2, axis=1)[:, k - 2]
    gain = util[np.arange(m), win] - second
    value = np.bincount(win, weights=gain, minlength=k) / m
    return OptimalityEstimate(alpha=counts / m, value=value, method="monte_carlo", samples_or_points=m)


def posterior_error_mass(estimate: OptimalityEstimate, best: int) -> float:
    """Posterior mass on "some arm other than ``best`` is optimal"."""
    return float(1.0 - estimate.alpha[best])


def log_posterior_error_mass(estimate: OptimalityEstimate, best: int) -> float:
    """Natural log of the error mass, accurate far below double-precision underflow."""
    others = np.delete(estimate.log_alpha, best)
    return float(logsumexp(others))


class AlphaTracker:
    """Incrementally maintained quadrature of the optimal-action probabilities.

    Per-arm log pdf/cdf rows on a fixed grid are cached, and only the arm that
    received an observation is recomputed. The grid is rebuilt to cover the
    posterior bulk when some posterior becomes narrower than ``min_sd_steps``
    grid steps or drifts out of the covered range. Grid beliefs use their own
    support and the exact discrete computation.
    """

    def __init__(self, state: BeliefState, points: int = 1001, min_sd_steps: float = 1.0):
        self.points = int(points)
        self.min_sd_steps = float(min_sd_steps)
        self.regrids = 0
        self._estimate: Optional[OptimalityEstimate] = None
        self.state = state
        if state.kind == "grid":
            self.grid = QuadratureGrid(state.arms[0].points)
        else:
            lo, hi = state.model.mean_domain
            if state.kind == "beta":
                self.grid = QuadratureGrid.uniform(lo, hi, self.points)
                if self._needs_regrid(state):
                    self.grid = QuadratureGrid.covering(state, self.points)
            else:
                self.grid = QuadratureGrid.covering(state, self.points)
        self._rows = [self._arm_rows(a) for a in state.arms]
        self._dirty: set = set()

    def _arm_rows(self, belief):
        if isinstance(belief, GridBelief):
            return _grid_arm_logs(belief)
        return arm_log_pdf_cdf(belief, self.grid.points)

    def _needs_regrid(self, state: BeliefState) -> bool:
        if state.kind == "grid":
            return False
        means, sds = state.means(), state.sds()
        pts, h = self.grid.points, self.grid.step
        lo, hi = pts[0] - h / 2, pts[-1] + h / 2
        d_lo, d_hi = state.model.mean_domain
        margin = BULK_WIDTH / 2
        too_narrow = np.any(sds < self.min_sd_steps * h)
        low_escape = lo > d_lo + h and np.any(means - margin * sds < lo)
        high_escape = hi < d_hi - h and np.any(means + margin * sds > hi)
        return bool(too_narrow or low_escape or high_escape)

    def sync(self, state: BeliefState, changed: Optional[int] = None) -> None:
        """Record that ``state`` is current; ``changed`` names the only updated arm.

        Work is deferred until the next ``estimate`` call, so steps that never
        ask for the probabilities cost nothing here.
        """
        self.state = state
        self._estimate = None
        if changed is None:
            self._dirty = set(range(state.k))
        else:
            self._dirty.add(int(changed))

    def _refresh(self) -> None:
        if self._needs_regrid(self.state):
            self.grid = QuadratureGrid.covering(self.state, self.points)
            self.regrids += 1
            self._dirty = set(range(self.state.k))
        for i in self._dirty:
            self._rows[i] = self._arm_rows(self.state.arms[i])
        self._dirty = set()

    def estimate(self) -> OptimalityEstimate:
        if self._estimate is None:
            self._refresh()
            a = np.array([r[0] for r in self._rows])
            b = np.array([r[1] for r in self._rows])
            if self.state.kind == "grid":
                la = log_alpha_discrete(a, b)
            else:
                la = log_alpha_continuous(a, b, self.grid.step)
            self._estimate = OptimalityEstimate(
                alpha=np.exp(la), method="quadrature", samples_or_points=self.grid.m, log_alpha=la
            )
        return self._estimate
