"""Optimal posterior-convergence exponents and allocations.

``solve_gamma_beta`` finds the allocation that equalizes the pairwise evidence
rates across all suboptimal arms subject to the best arm receiving a fixed
fraction ``beta`` of effort. ``solve_gamma_star`` additionally optimizes over
``beta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .expfam import InstanceSpec, _c_scalar, DomainError

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class SolverError(RuntimeError):
    """Root bracketing failed; carries the diagnostics needed to reproduce it."""


@dataclass
class ExponentSolution:
    gamma: float
    beta: float
    psi: np.ndarray
    c_values: np.ndarray
    best: int
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "beta": self.beta,
            "psi": [float(v) for v in self.psi],
            "c_values": [float(v) for v in self.c_values],
            "best": self.best,
        }


def _rate_fn(instance: InstanceSpec):
    kind, sigma = instance.model.kind, instance.model.sigma
    top = instance.means[instance.best]

    def rate(i: int, beta: float, psi: float) -> float:
        return _c_scalar(kind, sigma, beta, psi, top, instance.means[i])

    return rate


def _invert(rate, i: int, beta: float, c: float, psi_hi: float, xtol: float) -> float:
    # smallest psi with C_i(beta, psi) = c; C_i is strictly increasing in psi
    if c <= 0.0:
        return 0.0
    f_hi = rate(i, beta, psi_hi) - c
    if f_hi <= 0.0:
        return psi_hi
    return brentq(lambda p: rate(i, beta, p) - c, 0.0, psi_hi, xtol=xtol, rtol=4 * np.finfo(float).eps)


def solve_gamma_beta(instance: InstanceSpec, beta: float, xtol: float = 1e-14) -> ExponentSolution:
    """Constrained max-min allocation with ``psi[best] == beta``.

    For a candidate common rate ``c`` each suboptimal arm's effort is the
    inverse of its (monotone) evidence rate; the outer root-find matches the
    total suboptimal effort to ``1 - beta``.
    """
    if not 0.0 < beta < 1.0:
        raise DomainError(f"beta must lie in (0, 1), got {beta}")
    best = instance.best
    others = [i for i in range(instance.k) if i != best]
    rate = _rate_fn(instance)
    budget = 1.0 - beta

    c_hi = min(rate(i, beta, budget) for i in others)

    def excess(c: float) -> float:
        return sum(_invert(rate, i, beta, c, budget, xtol) for i in others) - budget

    lo_val, hi_val = excess(0.0), excess(c_hi)
    if not (lo_val < 0.0 <= hi_val):
        raise SolverError(
            f"bracket failure for beta={beta}: excess(0)={lo_val}, excess({c_hi})={hi_val}, "
            f"means={instance.means}"
        )
    if hi_val == 0.0:
        c = c_hi
    else:
        c = brentq(excess, 0.0, c_hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)

    psi = np.zeros(instance.k)
    psi[best] = beta
    for i in others:
        psi[i] = _invert(rate, i, beta, c, budget, xtol)
    c_values = np.array([rate(i, beta, psi[i]) for i in others])
    return ExponentSolution(
        gamma=float(c_values.min()),
        beta=float(beta),
        psi=psi,
        c_values=c_values,
        best=best,
        diagnostics={"sum_error": float(psi.sum() - 1.0), "spread": float(np.ptp(c_values))},
    )


def min_rate(instance: InstanceSpec, psi) -> float:
    """``min_i C_i(psi[best], psi[i])`` for an arbitrary allocation."""
    rate = _rate_fn(instance)
    best = instance.best
    return min(rate(i, psi[best], psi[i]) for i in range(instance.k) if i != best)


def golden_section_max(f, lo: float, hi: float, tol: float = 1e-6):
    """Maximize a unimodal ``f`` on [lo, hi]; returns (argmax, max)."""
    a, b = lo, hi
    x1 = b - _GOLDEN * (b - a)
    x2 = a + _GOLDEN * (b - a)
    f1, f2 = f(x1), f(x2)
    while b - a > tol:
        if f1 < f2:
            a, x1, f1 = x1, x2, f2
            x2 = a + _GOLDEN * (b - a)
            f2 = f(x2)
        else:
            b, x2, f2 = x2, x1, f1
            x1 = b - _GOLDEN * (b - a)
            f1 = f(x1)
    x = 0.5 * (a + b)
    return x, f(x)


def solve_gamma_star(instance: InstanceSpec, tol: float = 1e-6, validate: bool = False) -> ExponentSolution:
    """Unconstrained optimum: maximize the constrained exponent over ``beta``.

    With ``validate=True`` the golden-section result is checked against a
    500-point scan of ``beta``; a scan value exceeding it raises SolverError.
    """
    cache: dict[float, ExponentSolution] = {}

    def gamma_at(b: float) -> float:
        sol = solve_gamma_beta(instance, b)
        cache[b] = sol
        return sol.gamma

    b_star, _ = golden_section_max(gamma_at, 1e-9, 1.0 - 1e-9, tol)
    sol = cache.get(b_star) or solve_gamma_beta(instance, b_star)
    if validate:
        grid = np.linspace(0.001, 0.999, 500)
        scan = np.array([solve_gamma_beta(instance, b).gamma for b in grid])
        if scan.max() > sol.gamma * (1 + 1e-6):
            raise SolverError(
                f"golden-section optimum {sol.gamma} at beta={b_star} beaten by scan "
                f"{scan.max()} at beta={grid[scan.argmax()]}"
            )
        sol.diagnostics["scan_max"] = float(scan.max())
    return sol


def ratio_bound(beta: float, beta_star: float) -> float:
    """Upper bound on ``Gamma* / Gamma*_beta`` in terms of the tuning parameter."""
    for name, v in (("beta", beta), ("beta_star", beta_star)):
        if not 0.0 < v < 1.0:
            raise DomainError(f"{name} must lie in (0, 1), got {v}")
    return max(beta_star / beta, (1.0 - beta_star) / (1.0 - beta))


def bound_subgaussian(sigma: float, gaps) -> float:
    """Lower bound on the beta = 1/2 exponent for sigma-sub-Gaussian observations."""
    gaps = np.asarray(gaps, dtype=float)
    if sigma <= 0 or np.any(gaps <= 0):
        raise DomainError("need sigma > 0 and strictly positive gaps")
    return float(1.0 / (16.0 * sigma**2 * np.sum(gaps**-2.0)))


def uniform_rate_gaussian(gaps, k: int, sigma: float) -> float:
    """Exponent of the uniform allocation for Gaussian arms: ``min gap^2 / (4 k sigma^2)``."""
    gaps = np.asarray(gaps, dtype=float)
    if sigma <= 0 or k < 2 or np.any(gaps <= 0):
        raise DomainError("need sigma > 0, k >= 2 and strictly positive gaps")
    return float(gaps.min() ** 2 / (4.0 * k * sigma**2))
