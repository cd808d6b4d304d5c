"""Observation models in mean parameterization.

Two one-parameter exponential families are supported: Bernoulli and
Gaussian with known noise scale. Everything here takes and returns means,
never natural parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

BERNOULLI = "bernoulli"
GAUSSIAN = "gaussian"
KINDS = (BERNOULLI, GAUSSIAN)

# Bernoulli means are clamped to [EPS, 1 - EPS] before taking logs.
EPS = 1e-12

# Top-two gaps smaller than this are rejected by InstanceSpec.
MIN_TOP_GAP = 1e-9


class DomainError(ValueError):
    """A mean (or other argument) falls outside the valid domain."""


@dataclass(frozen=True)
class ObservationModel:
    """An observation distribution family with its valid mean interval.

    ``sigma`` is only meaningful for the Gaussian kind. ``mean_domain`` is the
    open interval of admissible means; for Bernoulli it is always (0, 1).
    """

    kind: str
    sigma: float = 1.0
    mean_domain: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        lo, hi = (float(v) for v in self.mean_domain)
        if self.kind == BERNOULLI:
            if (lo, hi) != (0.0, 1.0):
                raise DomainError("Bernoulli mean domain is fixed at (0, 1)")
            object.__setattr__(self, "sigma", 0.5)
        elif not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise DomainError(f"Gaussian noise scale must be positive, got {self.sigma}")
        if not lo < hi:
            raise DomainError(f"empty mean domain ({lo}, {hi})")
        object.__setattr__(self, "mean_domain", (lo, hi))

    @classmethod
    def bernoulli(cls) -> "ObservationModel":
        return cls(BERNOULLI)

    @classmethod
    def gaussian(cls, sigma: float = 1.0, mean_domain: tuple[float, float] = (-10.0, 10.0)) -> "ObservationModel":
        return cls(GAUSSIAN, float(sigma), mean_domain)

    @property
    def variance(self) -> float:
        """Noise variance for Gaussian; the worst-case (p=1/2) variance for Bernoulli."""
        return self.sigma**2

    def contains(self, mean) -> bool:
        lo, hi = self.mean_domain
        m = np.asarray(mean, dtype=float)
        return bool(np.all((m > lo) & (m < hi)))

    def check_mean(self, mean) -> None:
        if not self.contains(mean):
            raise DomainError(f"mean {mean} outside the open domain {self.mean_domain}")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == GAUSSIAN:
            d["sigma"] = self.sigma
            d["mean_domain"] = list(self.mean_domain)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ObservationModel":
        if d["kind"] == BERNOULLI:
            return cls.bernoulli()
        return cls.gaussian(d.get("sigma", 1.0), tuple(d.get("mean_domain", (-10.0, 10.0))))


@dataclass(frozen=True)
class InstanceSpec:
    """True arm means of a best-arm problem. The best arm must be unique."""

    model: ObservationModel
    means: tuple[float, ...]

    def __post_init__(self):
        means = tuple(float(m) for m in self.means)
        object.__setattr__(self, "means", means)
        if len(means) < 2:
            raise DomainError("an instance needs at least k = 2 arms")
        self.model.check_mean(means)
        if len(set(means)) != len(means):
            raise DomainError("true means must be pairwise distinct (the best arm must be unique)")
        top2 = sorted(means)[-2:]
        if top2[1] - top2[0] < MIN_TOP_GAP:
            raise DomainError(f"top two means are within {MIN_TOP_GAP}; exponent would be unreliable")

    @property
    def k(self) -> int:
        return len(self.means)

    @property
    def best(self) -> int:
        return int(np.argmax(self.means))

    @property
    def gaps(self) -> np.ndarray:
        """Gap to the best mean for every arm (zero at the best arm)."""
        m = np.asarray(self.means)
        return m[self.best] - m

    def fingerprint(self) -> str:
        body = ",".join(f"{m:.12g}" for m in self.means)
        return f"{self.model.kind}(sigma={self.model.sigma:g})[{body}]"


def sample_observation(model: ObservationModel, mean: float, rng: np.random.Generator) -> float:
    """Draw one observation with the given mean."""
    model.check_mean(mean)
    if model.kind == BERNOULLI:
        return float(rng.random() < mean)
    return float(mean + model.sigma * rng.standard_normal())


def _kl_scalar(kind: str, sigma: float, p: float, q: float) -> float:
    if kind == GAUSSIAN:
        return (p - q) ** 2 / (2.0 * sigma * sigma)
    p = min(max(p, EPS), 1.0 - EPS)
    q = min(max(q, EPS), 1.0 - EPS)
    return p * math.log(p / q) + (1.0 - p) * math.log((1.0 - p) / (1.0 - q))


def _kl_array(kind: str, sigma: float, p, q):
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if kind == GAUSSIAN:
        return (p - q) ** 2 / (2.0 * sigma * sigma)
    p = np.clip(p, EPS, 1.0 - EPS)
    q = np.clip(q, EPS, 1.0 - EPS)
    return p * np.log(p / q) + (1.0 - p) * np.log((1.0 - p) / (1.0 - q))


def kl(model: ObservationModel, p, q):
    """KL divergence (nats) between the distributions with means ``p`` and ``q``.

    Accepts scalars or broadcastable arrays.
    """
    model.check_mean(p)
    model.check_mean(q)
    if np.ndim(p) == 0 and np.ndim(q) == 0:
        return _kl_scalar(model.kind, model.sigma, float(p), float(q))
    return _kl_array(model.kind, model.sigma, p, q)


def _c_scalar(kind: str, sigma: float, beta: float, psi: float, top: float, alt: float) -> float:
    w = beta + psi
    if w <= 0.0:
        return 0.0
    mbar = (beta * top + psi * alt) / w
    return beta * _kl_scalar(kind, sigma, top, mbar) + psi * _kl_scalar(kind, sigma, alt, mbar)


def c_cost(model: ObservationModel, beta, psi, mean_top, mean_alt):
    """Evidence rate for ruling out ``mean_alt`` against ``mean_top``.

    Minimum over x of ``beta * d(top || x) + psi * d(alt || x)``. The minimizer
    is the effort-weighted mean, so no optimization is needed. Returns 0 when
    ``beta + psi == 0``.
    """
    model.check_mean(mean_top)
    model.check_mean(mean_alt)
    if np.any(np.asarray(beta) < 0) or np.any(np.asarray(psi) < 0):
        raise DomainError("efforts must be nonnegative")
    if all(np.ndim(v) == 0 for v in (beta, psi, mean_top, mean_alt)):
        return _c_scalar(model.kind, model.sigma, float(beta), float(psi), float(mean_top), float(mean_alt))
    beta, psi, top, alt = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (beta, psi, mean_top, mean_alt)))
    w = beta + psi
    safe = np.where(w > 0, w, 1.0)
    mbar = (beta * top + psi * alt) / safe
    val = beta * _kl_array(model.kind, model.sigma, top, mbar) + psi * _kl_array(model.kind, model.sigma, alt, mbar)
    return np.where(w > 0, val, 0.0)


def c_gaussian_closed_form(beta, psi, delta, sigma=1.0):
    """Gaussian evidence rate ``beta*psi/(beta+psi) * delta**2 / (2 sigma**2)``."""
    beta = np.asarray(beta, dtype=float)
    psi = np.asarray(psi, dtype=float)
    if np.any(beta < 0) or np.any(psi < 0) or np.any(beta + psi <= 0):
        raise DomainError("need beta, psi >= 0 and not both zero")
    if np.any(np.asarray(sigma) <= 0):
        raise DomainError("sigma must be positive")
    out = beta * psi / (beta + psi) * np.asarray(delta, dtype=float) ** 2 / (2.0 * np.asarray(sigma, dtype=float) ** 2)
    return float(out) if out.ndim == 0 else out


def natural_parameter(model: ObservationModel, mean):
    """Map means to natural parameters (logit for Bernoulli, mean/sigma^2 for Gaussian)."""
    m = np.asarray(mean, dtype=float)
    if model.kind == BERNOULLI:
        m = np.clip(m, EPS, 1.0 - EPS)
        return np.log(m) - np.log1p(-m)
    return m / model.variance


def make_instance(model: ObservationModel, means: Sequence[float]) -> InstanceSpec:
    return InstanceSpec(model, tuple(means))
