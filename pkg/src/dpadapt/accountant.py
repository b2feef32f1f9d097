"""Privacy accounting for composed (sub)sampled Gaussian mechanisms.

Tracks log moments of the privacy-loss random variable across steps and
converts them to an (epsilon, delta) guarantee; also inverts the relation
to calibrate the noise multiplier for a target budget, and provides the
classical advanced-composition baseline for comparison.

Conventions: ``noise_multiplier`` is the Gaussian standard deviation in
units of the per-query sensitivity. Callers apply their own sensitivity
(e.g. 2G/n for a replace-one full-batch mean, or the clip bound C for a
per-example-clipped sum).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

DEFAULT_MAX_ORDER = 128
DEFAULT_NODES = 10_000

_SIGMA_BRACKET = (1e-4, 1e8)


class CalibrationError(RuntimeError):
    """Privacy calibration failed (nonfinite moments or unreachable budget)."""


@dataclass(frozen=True)
class PrivacyBudget:
    """An (epsilon, delta) differential-privacy guarantee."""

    epsilon: float
    delta: float

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ValueError(f"epsilon must be a positive finite real, got {self.epsilon}")
        if not (0.0 < self.delta < 1.0):
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class MechanismSpec:
    """T adaptive releases of a Gaussian mechanism with sampling rate q.

    sampling_rate = 1 means full-batch releases; q < 1 means each step
    touches a uniformly subsampled fraction q of the data.
    """

    noise_multiplier: float
    sampling_rate: float = 1.0
    steps: int = 1
    sensitivity_note: str = ""

    def __post_init__(self):
        if not (self.noise_multiplier > 0 and math.isfinite(self.noise_multiplier)):
            raise ValueError(f"noise_multiplier must be positive, got {self.noise_multiplier}")
        if not (0.0 < self.sampling_rate <= 1.0):
            raise ValueError(f"sampling_rate must lie in (0, 1], got {self.sampling_rate}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")


@dataclass
class MomentLedger:
    """Log moments alpha(order) of the accumulated privacy loss.

    ``log_moments`` holds (order, value) pairs for integer orders
    1..max_order. Composition adds nonnegative per-step values, so ledger
    entries never decrease as steps accumulate.
    """

    log_moments: list[tuple[int, float]] = field(default_factory=list)
    max_order: int = DEFAULT_MAX_ORDER

    def values(self) -> np.ndarray:
        return np.array([v for _, v in self.log_moments], dtype=float)

    def scaled(self, steps: int) -> "MomentLedger":
        """Ledger after composing ``steps`` identical releases."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        return MomentLedger(
            [(lam, steps * v) for lam, v in self.log_moments], self.max_order
        )

    def add(self, other: "MomentLedger") -> "MomentLedger":
        if [lam for lam, _ in self.log_moments] != [lam for lam, _ in other.log_moments]:
            raise ValueError("ledgers must carry the same moment orders")
        return MomentLedger(
            [(lam, a + b) for (lam, a), (_, b) in zip(self.log_moments, other.log_moments)],
            self.max_order,
        )


def _log_moment_gaussian(sigma: float, order: int) -> float:
    # Full-batch Gaussian mechanism: alpha(lam) = lam(lam+1)/(2 sigma^2).
    return order * (order + 1) / (2.0 * sigma * sigma)


def _log_moment_subsampled(q: float, sigma: float, order: int, nodes: int) -> float:
    """Log moment of the q-subsampled Gaussian at one integer order.

    Both moment directions are integrated over a fixed uniform grid in log
    space: mu0 = N(0, sigma^2) against the mixture (1-q) mu0 + q N(1, sigma^2).
    The grid spans all mass of both integrands (the larger one concentrates
    near z = order + 1).
    """
    lo = -12.0 * sigma - 2.0
    hi = order + 1.0 + 12.0 * sigma + 2.0
    zs = np.linspace(lo, hi, nodes)
    log_dz = math.log(zs[1] - zs[0])
    norm = math.log(sigma * math.sqrt(2.0 * math.pi))
    log_p0 = -0.5 * (zs / sigma) ** 2 - norm
    log_p1 = -0.5 * ((zs - 1.0) / sigma) ** 2 - norm
    log_1mq = math.log1p(-q) if q < 1.0 else -math.inf
    log_mix = np.logaddexp(log_1mq + log_p0, math.log(q) + log_p1)
    log_e1 = logsumexp(log_p0 + order * (log_p0 - log_mix)) + log_dz
    log_e2 = logsumexp(log_mix + order * (log_mix - log_p0)) + log_dz
    return max(log_e1, log_e2)


def compose_step_log_moments(
    spec: MechanismSpec,
    max_order: int = DEFAULT_MAX_ORDER,
    nodes: int = DEFAULT_NODES,
) -> MomentLedger:
    """Per-step log moments alpha(order) for orders 1..max_order."""
    if max_order < 2:
        raise ValueError("max_order must be >= 2")
    entries = []
    for lam in range(1, max_order + 1):
        if spec.sampling_rate == 1.0:
            val = _log_moment_gaussian(spec.noise_multiplier, lam)
        else:
            val = _log_moment_subsampled(
                spec.sampling_rate, spec.noise_multiplier, lam, nodes
            )
        if not math.isfinite(val):
            raise CalibrationError(
                f"log moment at order {lam} is not finite "
                f"(noise multiplier {spec.noise_multiplier} too small for this order)"
            )
        entries.append((lam, val))
    return MomentLedger(entries, max_order)


@dataclass(frozen=True)
class EpsilonReport:
    epsilon: float
    best_order: int
    strained: bool


def validity_strained(spec: MechanismSpec, order: int) -> bool:
    """Whether the chosen order strains the accountant's asymptotic regime.

    The closed-form subsampled-Gaussian moment bound assumes roughly
    order <= sigma^2 ln(1/(q sigma)); outside it the numerically computed
    moments are still exact, so this only flags, never rejects.
    """
    q, sigma = spec.sampling_rate, spec.noise_multiplier
    if q == 1.0:
        return False
    if q * sigma >= 1.0:
        return True
    return order > sigma * sigma * math.log(1.0 / (q * sigma))


def eps_report(
    spec: MechanismSpec,
    delta: float,
    max_order: int = DEFAULT_MAX_ORDER,
    nodes: int = DEFAULT_NODES,
) -> EpsilonReport:
    """Epsilon for the target delta, with the optimizing order and a validity flag."""
    if not (0.0 < delta < 1.0):
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    ledger = compose_step_log_moments(spec, max_order=max_order, nodes=nodes)
    total = ledger.scaled(spec.steps)
    log_inv_delta = math.log(1.0 / delta)
    best_eps, best_order = math.inf, 0
    for lam, val in total.log_moments:
        eps = (val + log_inv_delta) / lam
        if eps < best_eps:
            best_eps, best_order = eps, lam
    if not math.isfinite(best_eps):
        raise CalibrationError("all moment orders produced nonfinite epsilon")
    return EpsilonReport(best_eps, best_order, validity_strained(spec, best_order))


def eps_for_delta(
    spec: MechanismSpec,
    delta: float,
    max_order: int = DEFAULT_MAX_ORDER,
    nodes: int = DEFAULT_NODES,
) -> float:
    """epsilon = min over orders of (T alpha(order) + ln(1/delta)) / order."""
    return eps_report(spec, delta, max_order=max_order, nodes=nodes).epsilon


def sigma_for_budget(
    epsilon: float,
    delta: float,
    steps: int,
    sampling_rate: float = 1.0,
    max_order: int = DEFAULT_MAX_ORDER,
    nodes: int = DEFAULT_NODES,
) -> float:
    """Smallest noise multiplier whose accountant epsilon is <= the target.

    Bisection on the noise multiplier, tightened to well within 1% relative.
    """
    budget = PrivacyBudget(epsilon, delta)

    def eps_at(sigma: float) -> float:
        return eps_for_delta(
            MechanismSpec(sigma, sampling_rate, steps), budget.delta,
            max_order=max_order, nodes=nodes,
        )

    lo, hi = _SIGMA_BRACKET
    if eps_at(hi) > budget.epsilon:
        raise CalibrationError(
            f"target epsilon {epsilon} unreachable within noise bracket {_SIGMA_BRACKET}"
        )
    if eps_at(lo) <= budget.epsilon:
        return lo
    while hi / lo > 1.002:
        mid = math.sqrt(lo * hi)
        if eps_at(mid) <= budget.epsilon:
            hi = mid
        else:
            lo = mid
    return hi


def advanced_composition_eps(
    per_step: PrivacyBudget, steps: int, delta_slack: float
) -> PrivacyBudget:
    """Budget after T-fold advanced composition of identical mechanisms.

    epsilon' = sqrt(2 T ln(1/delta')) eps0 + T eps0 (e^eps0 - 1),
    delta'   = T delta0 + delta_slack.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not (0.0 < delta_slack < 1.0):
        raise ValueError(f"delta_slack must lie in (0, 1), got {delta_slack}")
    e0 = per_step.epsilon
    eps = math.sqrt(2.0 * steps * math.log(1.0 / delta_slack)) * e0 + steps * e0 * math.expm1(e0)
    delta = steps * per_step.delta + delta_slack
    return PrivacyBudget(eps, min(delta, 1.0 - 1e-15))


def gaussian_eps_for_delta(sigma: float, delta: float) -> float:
    """Single-release classical Gaussian bound: eps = sqrt(2 ln(1.25/delta)) / sigma."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if not (0.0 < delta < 1.0):
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    return math.sqrt(2.0 * math.log(1.25 / delta)) / sigma


def subsampled_step_budget(eps0: float, delta0: float, q: float) -> tuple[float, float]:
    """Privacy amplification by uniform subsampling at rate q."""
    if not (0.0 < q <= 1.0):
        raise ValueError(f"sampling rate must lie in (0, 1], got {q}")
    if q == 1.0:
        return eps0, delta0
    return math.log1p(q * math.expm1(eps0)), q * delta0


def ac_eps_for_delta(spec: MechanismSpec, delta: float) -> float:
    """Advanced-composition epsilon at total failure probability delta.

    The budget is split evenly: half funds the per-step Gaussian deltas,
    half the composition slack.
    """
    if not (0.0 < delta < 1.0):
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    q, steps = spec.sampling_rate, spec.steps
    delta0 = delta / (2.0 * steps * q)
    eps0 = gaussian_eps_for_delta(spec.noise_multiplier, delta0)
    eps_step, delta_step = subsampled_step_budget(eps0, delta0, q)
    return advanced_composition_eps(
        PrivacyBudget(eps_step, max(delta_step, 1e-300)), steps, delta / 2.0
    ).epsilon
