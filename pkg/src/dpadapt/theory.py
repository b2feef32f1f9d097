"""Closed-form bound and concentration calculators.

These evaluate the guarantees' expressions (with a user-supplied constant
in place of the hidden big-O factor) so measured curves can be compared
against predicted shapes. All logarithms are natural.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

GD, RMSPROP, ADAM = "GD", "RMSPROP", "ADAM"
_VARIANTS = (GD, RMSPROP, ADAM)


@dataclass(frozen=True)
class ConcentrationSpec:
    """Inputs of the noisy-gradient concentration statement."""

    p: int
    sigma: float
    mu: float
    T: int

    def __post_init__(self):
        if self.p < 1 or self.T < 1 or self.sigma <= 0 or self.mu < 0:
            raise ValueError("need p >= 1, T >= 1, sigma > 0, mu >= 0")


@dataclass(frozen=True)
class BoundReport:
    """Concentration radius/failure mass plus bound values at one setting."""

    alpha: float
    xi: float
    union_failure: float
    population_bound: float
    empirical_bound: float
    constant_factor: float


def concentration(spec: ConcentrationSpec) -> tuple[float, float]:
    """Per-step radius and failure mass:

    alpha = sqrt(p) sigma (1 + mu),  xi = 4 p exp(-mu^2 / 2).
    """
    alpha = math.sqrt(spec.p) * spec.sigma * (1.0 + spec.mu)
    xi = 4.0 * spec.p * math.exp(-spec.mu ** 2 / 2.0)
    return alpha, xi


def union_failure(spec: ConcentrationSpec) -> float:
    """min(1, T xi): failure mass for the any-step deviation event."""
    _, xi = concentration(spec)
    return min(1.0, spec.T * xi)


def mu_for_failure(beta: float, p: int, T: int) -> float:
    """mu = sqrt(2 ln(4 p T / beta)); makes the union failure exactly beta.

    Meaningful failure probabilities are beta < 1, but the inversion is
    defined (and accepted) for any beta < 4 p T; beyond 1 the resulting
    guarantee is vacuous.
    """
    if p < 1 or T < 1:
        raise ValueError("need p >= 1 and T >= 1")
    if not (0.0 < beta < 4.0 * p * T):
        raise ValueError(f"beta must lie in (0, 4pT), got {beta}")
    return math.sqrt(2.0 * math.log(4.0 * p * T / beta))


def _check_positive(**kwargs):
    for name, val in kwargs.items():
        if val <= 0:
            raise ValueError(f"{name} must be positive, got {val}")


def population_bound(variant: str, n: float, p: float, eps: float, delta: float,
                     beta: float, G: float, L: float,
                     constant: float = 1.0) -> float:
    """Bound on E|grad f(w_R)|^2 (squared population gradient norm).

    GD carries an extra sqrt(L); the adaptive variants do not:
    constant * G sqrt(p [L] ln(1/delta)) ln(n p eps / beta) / (n eps).
    """
    variant = variant.upper()
    if variant not in _VARIANTS:
        raise ValueError(f"variant must be one of {_VARIANTS}, got {variant!r}")
    _check_positive(n=n, p=p, eps=eps, delta=delta, beta=beta, G=G, L=L,
                    constant=constant)
    root = math.sqrt(p * L * math.log(1.0 / delta)) if variant == GD \
        else math.sqrt(p * math.log(1.0 / delta))
    return constant * G * root * math.log(n * p * eps / beta) / (n * eps)


def empirical_bound(variant: str, n: float, p: float, eps: float, delta: float,
                    G: float, L: float, constant: float = 1.0) -> float:
    """Bound on E|grad fhat(w_R)|^2 (squared empirical gradient norm).

    GD: constant sqrt(L) G sqrt(p ln(1/delta)) / (n eps); the adaptive
    variants replace sqrt(L) G by G^2.
    """
    variant = variant.upper()
    if variant not in _VARIANTS:
        raise ValueError(f"variant must be one of {_VARIANTS}, got {variant!r}")
    _check_positive(n=n, p=p, eps=eps, delta=delta, G=G, L=L, constant=constant)
    root = math.sqrt(p * math.log(1.0 / delta))
    scale = math.sqrt(L) * G if variant == GD else G * G
    return constant * scale * root / (n * eps)


def uniform_convergence_bound(p: float, n: float, constant: float = 1.0) -> float:
    """Worst-case-over-w empirical-to-population gradient gap: constant sqrt(p/n)."""
    _check_positive(p=p, n=n, constant=constant)
    return constant * math.sqrt(p / n)


def bound_report(variant: str, spec: ConcentrationSpec, n: float, eps: float,
                 delta: float, beta: float, G: float, L: float,
                 constant: float = 1.0) -> BoundReport:
    alpha, xi = concentration(spec)
    return BoundReport(
        alpha=alpha, xi=xi, union_failure=union_failure(spec),
        population_bound=population_bound(variant, n, spec.p, eps, delta, beta,
                                          G, L, constant),
        empirical_bound=empirical_bound(variant, n, spec.p, eps, delta, G, L,
                                        constant),
        constant_factor=constant,
    )


@dataclass(frozen=True)
class PreconditionReport:
    """Which of the concentration statement's preconditions hold.

    The delta condition is checked in its stricter published form (factor
    26 in the denominator); the companion statement uses 13. Reported for
    flagging only; the experiments run either way.
    """

    eps_ok: bool
    delta_ok: bool
    n_ok: bool

    @property
    def all_ok(self) -> bool:
        return self.eps_ok and self.delta_ok and self.n_ok


def concentration_preconditions(sigma: float, mu: float, eps: float,
                                delta: float, n: int) -> PreconditionReport:
    """eps <= sigma/13, delta <= sigma e^{-mu^2/2} / (26 ln(26/sigma)),
    n >= 2 ln(8/delta) / eps^2."""
    _check_positive(sigma=sigma, eps=eps, delta=delta, n=n)
    if mu < 0:
        raise ValueError(f"mu must be >= 0, got {mu}")
    eps_ok = eps <= sigma / 13.0
    log_term = math.log(26.0 / sigma)
    delta_ok = log_term > 0 and delta <= sigma * math.exp(-mu ** 2 / 2.0) / (26.0 * log_term)
    n_ok = n >= 2.0 * math.log(8.0 / delta) / eps ** 2
    return PreconditionReport(eps_ok, delta_ok, n_ok)
