"""Independent per-arm posterior beliefs.

Three representations share one interface: conjugate Beta (Bernoulli arms),
conjugate Normal (Gaussian arms with known noise) and a bounded grid whose
weights live in log space. A ``BeliefState`` is a value: ``update`` returns a
new state and leaves the old one untouched.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import special

from .expfam import BERNOULLI, GAUSSIAN, DomainError, ObservationModel

LOG_NORM_TOL = 1e-10


@dataclass(frozen=True)
class BetaBelief:
    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise DomainError(f"Beta parameters must be positive, got ({self.a}, {self.b})")

    @property
    def mean(self) -> float:
        return self.a / (self.a + self.b)

    @property
    def sd(self) -> float:
        s = self.a + self.b
        return math.sqrt(self.a * self.b / (s * s * (s + 1.0)))

    def params(self) -> dict:
        return {"a": self.a, "b": self.b}


@dataclass(frozen=True)
class NormalBelief:
    mean: float
    var: float
    noise_var: float

    def __post_init__(self):
        if not (self.var > 0 and self.noise_var > 0):
            raise DomainError("Normal belief variances must be positive")

    @property
    def sd(self) -> float:
        return math.sqrt(self.var)

    def params(self) -> dict:
        return {"mean": self.mean, "var": self.var, "noise_var": self.noise_var}


class GridBelief:
    """Discrete posterior on fixed support points, normalized in log space."""

    __slots__ = ("points", "log_weights", "_cdf")

    def __init__(self, points, log_weights, normalize: bool = True):
        points = np.asarray(points, dtype=float)
        log_weights = np.asarray(log_weights, dtype=float)
        if points.ndim != 1 or points.shape != log_weights.shape or points.size < 1:
            raise DomainError("grid points and log-weights must be matching 1-D arrays")
        if np.any(np.diff(points) <= 0):
            raise DomainError("grid points must be strictly increasing")
        if normalize:
            log_weights = log_weights - special.logsumexp(log_weights)
        self.points = points
        self.log_weights = log_weights
        self._cdf = None

    @classmethod
    def _trusted(cls, points: np.ndarray, log_weights: np.ndarray) -> "GridBelief":
        # skips validation; points already checked, weights already normalized
        obj = cls.__new__(cls)
        obj.points = points
        obj.log_weights = log_weights
        obj._cdf = None
        return obj

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def cdf(self) -> np.ndarray:
        if self._cdf is None:
            c = np.cumsum(self.weights)
            self._cdf = c / c[-1]
        return self._cdf

    @property
    def mean(self) -> float:
        return float(np.dot(self.weights, self.points))

    @property
    def sd(self) -> float:
        w = self.weights
        m = np.dot(w, self.points)
        return float(math.sqrt(max(np.dot(w, (self.points - m) ** 2), 0.0)))

    def params(self) -> dict:
        return {"points": self.points.tolist(), "log_weights": self.log_weights.tolist()}

    def __eq__(self, other):
        return (
            isinstance(other, GridBelief)
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.log_weights, other.log_weights)
        )

    def __repr__(self):
        return f"GridBelief(M={self.points.size}, mean={self.mean:.6g}, sd={self.sd:.3g})"


ArmBelief = Union[BetaBelief, NormalBelief, GridBelief]
_KIND_OF = {BetaBelief: "beta", NormalBelief: "normal", GridBelief: "grid"}


@dataclass(frozen=True)
class BeliefState:
    model: ObservationModel
    arms: tuple
    n: int = 0

    def __post_init__(self):
        arms = tuple(self.arms)
        object.__setattr__(self, "arms", arms)
        if len(arms) < 2:
            raise DomainError("a belief state needs at least two arms")
        kinds = {type(a) for a in arms}
        if len(kinds) != 1:
            raise DomainError("all arms must share one belief representation")
        kind = kinds.pop()
        if kind is BetaBelief and self.model.kind != BERNOULLI:
            raise DomainError("Beta beliefs require a Bernoulli model")
        if kind is NormalBelief and self.model.kind != GAUSSIAN:
            raise DomainError("Normal beliefs require a Gaussian model")
        if kind is GridBelief:
            pts = arms[0].points
            if any(not np.array_equal(a.points, pts) for a in arms[1:]):
                raise DomainError("grid beliefs must share one support")
            self.model.check_mean(pts)

    @property
    def k(self) -> int:
        return len(self.arms)

    @property
    def kind(self) -> str:
        return _KIND_OF[type(self.arms[0])]

    def means(self) -> np.ndarray:
        return np.array([a.mean for a in self.arms])

    def sds(self) -> np.ndarray:
        return np.array([a.sd for a in self.arms])

    # -- constructors -------------------------------------------------------
    @classmethod
    def beta_prior(cls, k: int, a: float = 1.0, b: float = 1.0) -> "BeliefState":
        return cls(ObservationModel.bernoulli(), tuple(BetaBelief(a, b) for _ in range(k)))

    @classmethod
    def normal_prior(cls, model: ObservationModel, k: int, mean: float = 0.0, var: float = 1.0) -> "BeliefState":
        return cls(model, tuple(NormalBelief(mean, var, model.variance) for _ in range(k)))

    @classmethod
    def grid_prior(cls, model: ObservationModel, k: int, m: int = 1001, bounds=None) -> "BeliefState":
        """Uniform prior on ``m`` equispaced points, endpoints excluded by a half step."""
        pts = default_grid_points(model, m, bounds)
        arm = GridBelief(pts, np.full(m, -math.log(m)), normalize=False)
        return cls(model, tuple(arm for _ in range(k)))


def logsumexp(a: np.ndarray, axis=None) -> np.ndarray:
    """Plain log-sum-exp; much cheaper per call than the SciPy version on small arrays."""
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out.item() if axis is None else np.squeeze(out, axis=axis)


def default_grid_points(model: ObservationModel, m: int, bounds=None) -> np.ndarray:
    lo, hi = bounds if bounds is not None else model.mean_domain
    if not (model.mean_domain[0] <= lo < hi <= model.mean_domain[1]):
        raise DomainError(f"grid bounds ({lo}, {hi}) must lie inside the mean domain {model.mean_domain}")
    h = (hi - lo) / m
    return lo + h * (np.arange(m) + 0.5)


def _loglik(model: ObservationModel, y: float, x: np.ndarray) -> np.ndarray:
    if model.kind == BERNOULLI:
        return np.log(x) if y == 1.0 else np.log1p(-x)
    return -((y - x) ** 2) / (2.0 * model.variance)


def update_arm(model: ObservationModel, belief: ArmBelief, y: float) -> ArmBelief:
    if model.kind == BERNOULLI and y not in (0.0, 1.0):
        raise DomainError(f"Bernoulli observation must be 0 or 1, got {y}")
    if isinstance(belief, BetaBelief):
        return BetaBelief(belief.a + y, belief.b + 1.0 - y)
    if isinstance(belief, NormalBelief):
        prec = 1.0 / belief.var + 1.0 / belief.noise_var
        mean = (belief.mean / belief.var + y / belief.noise_var) / prec
        return NormalBelief(mean, 1.0 / prec, belief.noise_var)
    lw = belief.log_weights + _loglik(model, y, belief.points)
    return GridBelief._trusted(belief.points, lw - logsumexp(lw))


def update(state: BeliefState, arm: int, y: float) -> BeliefState:
    """Bayes update of a single arm after observing ``y``."""
    if not 0 <= arm < state.k:
        raise DomainError(f"arm index {arm} out of range for k={state.k}")
    arms = list(state.arms)
    arms[arm] = update_arm(state.model, arms[arm], float(y))
    # same model and representation as ``state``, so revalidation is skipped
    new = object.__new__(BeliefState)
    object.__setattr__(new, "model", state.model)
    object.__setattr__(new, "arms", tuple(arms))
    object.__setattr__(new, "n", state.n + 1)
    return new


def sample_means(state: BeliefState, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """One independent posterior draw per arm, shape ``(k,)`` or ``(size, k)``."""
    shape = (state.k,) if size is None else (size, state.k)
    kind = state.kind
    if kind == "beta":
        a = np.array([b.a for b in state.arms])
        b = np.array([b.b for b in state.arms])
        return rng.beta(a, b, size=shape)
    if kind == "normal":
        m = np.array([b.mean for b in state.arms])
        s = np.array([b.sd for b in state.arms])
        return m + s * rng.standard_normal(shape)
    u = rng.random(shape)
    out = np.empty(shape)
    pts = state.arms[0].points
    for i, arm in enumerate(state.arms):
        idx = np.searchsorted(arm.cdf, u[..., i], side="right")
        out[..., i] = pts[np.minimum(idx, pts.size - 1)]
    return out


def marginal_pdf_cdf(state: BeliefState, arm: int, x):
    """Posterior density and CDF of one arm's mean at ``x``.

    Grid beliefs return the point mass at ``x`` (zero off-support) and the
    cumulative mass of support points ``<= x``.
    """
    state.model.check_mean(x)
    b = state.arms[arm]
    x = np.asarray(x, dtype=float)
    if isinstance(b, BetaBelief):
        pdf = np.exp(log_beta_pdf(b.a, b.b, x))
        cdf = special.betainc(b.a, b.b, x)
    elif isinstance(b, NormalBelief):
        z = (x - b.mean) / b.sd
        pdf = np.exp(-0.5 * z * z) / (b.sd * math.sqrt(2.0 * math.pi))
        cdf = special.ndtr(z)
    else:
        idx = np.searchsorted(b.points, x, side="right")
        cdf = np.where(idx > 0, b.cdf[np.maximum(idx - 1, 0)], 0.0)
        hit = (idx > 0) & (b.points[np.maximum(idx - 1, 0)] == x)
        pdf = np.where(hit, b.weights[np.maximum(idx - 1, 0)], 0.0)
    if x.ndim == 0:
        return float(pdf), float(cdf)
    return pdf, cdf


def log_beta_pdf(a: float, b: float, x):
    return special.xlogy(a - 1.0, x) + special.xlog1py(b - 1.0, -x) - special.betaln(a, b)


def posterior_mass_near(state: BeliefState, arm: int, center: float, radius: float) -> float:
    """Posterior probability that the arm's mean lies in ``(center - radius, center + radius)``."""
    b = state.arms[arm]
    lo, hi = center - radius, center + radius
    if isinstance(b, BetaBelief):
        lo, hi = max(lo, 0.0), min(hi, 1.0)
        return float(special.betainc(b.a, b.b, hi) - special.betainc(b.a, b.b, lo))
    if isinstance(b, NormalBelief):
        return float(special.ndtr((hi - b.mean) / b.sd) - special.ndtr((lo - b.mean) / b.sd))
    inside = (b.points > lo) & (b.points < hi)
    return float(b.weights[inside].sum())


# -- serialization --------------------------------------------------------

def to_json(state: BeliefState) -> str:
    doc = {
        "model": state.model.to_dict(),
        "kind": state.kind,
        "arms": [a.params() for a in state.arms],
        "n": state.n,
    }
    return json.dumps(doc)


def from_json(text: str) -> BeliefState:
    doc = json.loads(text)
    model = ObservationModel.from_dict(doc["model"])
    kind = doc["kind"]
    if kind == "beta":
        arms = [BetaBelief(p["a"], p["b"]) for p in doc["arms"]]
    elif kind == "normal":
        arms = [NormalBelief(p["mean"], p["var"], p["noise_var"]) for p in doc["arms"]]
    elif kind == "grid":
        arms = [GridBelief(p["points"], p["log_weights"], normalize=False) for p in doc["arms"]]
    else:
        raise DomainError(f"unknown belief kind {kind!r}")
    return BeliefState(model, tuple(arms), int(doc["n"]))
