"""Private adaptive gradient descent.

One generic loop covers DP GD, DP RMSprop, and DP Adam: each step releases
a noisy (possibly clipped, possibly mini-batch) empirical gradient, feeds
it to a pair of averaging functions (first moment m, second moment v), and
updates w <- w - eta * m / (sqrt(min(v, lambda)) + nu) coordinate-wise.
The three methods differ only in the averaging recursions:

    GD:       m = g,                          v = ones
    RMSprop:  m = g,                          v = b2 v + (1 - b2) g^2
    Adam:     m = b1 m + (1 - b1) g,          v = b2 v + (1 - b2) g^2

i.e. the exponentially weighted sums (1-b) sum_j b^(t-j) g_j with no bias
correction; weights sum to 1 - b^t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import accountant
from .models import Dataset, LossModel, empirical_gradient
from .streams import stream

GD, RMSPROP, ADAM = "GD", "RMSPROP", "ADAM"
_KINDS = (GD, RMSPROP, ADAM)


class ParameterInfeasibleError(ValueError):
    """A theory-prescribed parameter constraint is violated."""


@dataclass(frozen=True)
class AveragingKind:
    """Which averaging pair (m, v) the loop runs, with its decay rates."""

    tag: str
    beta1: float | None = None
    beta2: float | None = None

    def __post_init__(self):
        if self.tag not in _KINDS:
            raise ValueError(f"tag must be one of {_KINDS}, got {self.tag!r}")
        if self.tag == ADAM:
            # beta1 = 0 is admitted: it collapses Adam's first moment to
            # the RMSprop one and is used as an equivalence check.
            if self.beta1 is None or not (0.0 <= self.beta1 < 1.0):
                raise ValueError(f"Adam needs beta1 in [0, 1), got {self.beta1}")
        if self.tag in (RMSPROP, ADAM):
            if self.beta2 is None or not (0.0 < self.beta2 < 1.0):
                raise ValueError(f"{self.tag} needs beta2 in (0, 1), got {self.beta2}")


def gd_kind() -> AveragingKind:
    return AveragingKind(GD)


def rmsprop_kind(beta2: float = 0.999) -> AveragingKind:
    return AveragingKind(RMSPROP, beta2=beta2)


def adam_kind(beta1: float = 0.9, beta2: float = 0.999) -> AveragingKind:
    return AveragingKind(ADAM, beta1=beta1, beta2=beta2)


@dataclass(frozen=True)
class OptimizerConfig:
    """All loop hyperparameters.

    ``sigma`` is the per-coordinate noise standard deviation added to the
    averaged gradient in full-batch mode. In mini-batch mode (batch_size
    set) it is the noise *multiplier*: noise N(0, (sigma clip)^2 I) is added
    to the clipped gradient sum and divided by the batch size, so the
    effective per-coordinate std is sigma * clip_bound / batch_size.
    """

    eta: float
    nu: float
    lambda_clamp: float
    sigma: float
    steps: int
    kind: AveragingKind
    batch_size: int | None = None
    clip_bound: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.nu < 0 or self.lambda_clamp <= 0 or self.sigma < 0:
            raise ValueError("need nu >= 0, lambda_clamp > 0, sigma >= 0")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.kind.tag == GD:
            if self.nu != 0.0 or self.lambda_clamp != 1.0:
                raise ValueError("GD requires nu = 0 and lambda_clamp = 1 "
                                 "(unit denominator)")
        elif self.nu <= 0.0:
            raise ValueError(f"{self.kind.tag} requires nu > 0")
        if self.batch_size is not None:
            if self.batch_size < 1:
                raise ValueError("batch_size must be >= 1")
            if self.clip_bound is None:
                raise ValueError("mini-batch mode requires a clip_bound")
        if self.clip_bound is not None and self.clip_bound <= 0:
            raise ValueError("clip_bound must be positive")

    def effective_sigma(self) -> float:
        if self.batch_size is not None:
            return self.sigma * self.clip_bound / self.batch_size
        return self.sigma


@dataclass
class OptimizerState:
    """Iterate plus raw (unclamped) accumulators; clamping happens at use."""

    w: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass
class TrajectoryRecord:
    """Per-step log of a run plus the uniformly selected iterate.

    Arrays have length T. Population columns are NaN when the model has no
    analytic population gradient; emp_grad_sq/loss are NaN when full-set
    logging is off (mini-batch training mode).
    """

    t: np.ndarray
    emp_grad_sq: np.ndarray
    pop_grad_sq: np.ndarray
    noise_dev: np.ndarray
    total_dev: np.ndarray
    loss: np.ndarray
    r_index: int
    w_r: np.ndarray
    final_w: np.ndarray
    config: OptimizerConfig

    def mean_emp_grad_sq(self) -> float:
        return float(np.mean(self.emp_grad_sq))

    def mean_pop_grad_sq(self) -> float:
        return float(np.mean(self.pop_grad_sq))


def noisy_gradient(empirical_grad: np.ndarray, sigma: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Gradient plus N(0, sigma^2 I) from the given per-step stream."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0.0:
        return empirical_grad
    return empirical_grad + sigma * rng.standard_normal(empirical_grad.shape)


def averaging(kind: AveragingKind, m_prev: np.ndarray, v_prev: np.ndarray,
              g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One recursion of the (m, v_raw) accumulators; equals the explicit
    exponentially weighted sums at every t."""
    if kind.tag == GD:
        return g, np.ones_like(g)
    v = kind.beta2 * v_prev + (1.0 - kind.beta2) * g * g
    if kind.tag == RMSPROP:
        return g, v
    m = kind.beta1 * m_prev + (1.0 - kind.beta1) * g
    return m, v


def step(state: OptimizerState, config: OptimizerConfig,
         g: np.ndarray) -> OptimizerState:
    """Advance one iteration using the noisy gradient g."""
    if state.t >= config.steps:
        raise ValueError(f"state already at t={state.t} of {config.steps} steps")
    m, v_raw = averaging(config.kind, state.m, state.v, g)
    v_used = np.minimum(v_raw, config.lambda_clamp)
    w = state.w - config.eta * m / (np.sqrt(v_used) + config.nu)
    return OptimizerState(w=w, m=m, v=v_raw, t=state.t + 1)


def run(model: LossModel, data: Dataset, config: OptimizerConfig,
        w0: np.ndarray | None = None,
        log_full_gradients: bool = True) -> TrajectoryRecord:
    """Execute the full T-step loop and log the trajectory.

    Per-step entry t records quantities at the pre-update point w_t (the
    point where the step-t gradient was queried); w_R is one of those
    points, drawn uniformly from its own named stream of the run seed.
    """
    T, seed = config.steps, config.seed
    if w0 is not None:
        w = np.array(w0, dtype=float, copy=True)
        if w.size != model.dimension:
            raise ValueError(f"w0 has size {w.size}, model dimension is {model.dimension}")
    else:
        w = model.initial_point(stream(seed, "init"))
    if config.batch_size is not None and config.batch_size > data.n:
        raise ValueError(f"batch_size {config.batch_size} exceeds n={data.n}")

    state = OptimizerState(w=w, m=np.zeros_like(w), v=np.zeros_like(w))
    r_index = int(stream(seed, "select-r").integers(1, T + 1))
    w_r = None

    emp_sq = np.full(T, np.nan)
    pop_sq = np.full(T, np.nan)
    noise_dev = np.full(T, np.nan)
    total_dev = np.full(T, np.nan)
    loss = np.full(T, np.nan)

    for t in range(1, T + 1):
        if t == r_index:
            w_r = state.w.copy()
        if config.batch_size is not None:
            idx = stream(seed, "batch", t).choice(data.n, size=config.batch_size,
                                                  replace=False)
            g_hat = empirical_gradient(model, data, state.w, idx, config.clip_bound)
        else:
            idx = None
            g_hat = empirical_gradient(model, data, state.w,
                                       clip_bound=config.clip_bound)
        g_tilde = noisy_gradient(g_hat, config.effective_sigma(),
                                 stream(seed, "noise", t))
        noise_dev[t - 1] = np.linalg.norm(g_tilde - g_hat)

        if log_full_gradients:
            if idx is None and config.clip_bound is None:
                g_full = g_hat
            else:
                g_full = empirical_gradient(model, data, state.w)
            emp_sq[t - 1] = g_full @ g_full
            g_pop = model.population_gradient_exact(state.w)
            if g_pop is not None:
                pop_sq[t - 1] = g_pop @ g_pop
                d = g_tilde - g_pop
                total_dev[t - 1] = math.sqrt(d @ d)
            full_loss = getattr(model, "full_loss", None)
            if full_loss is not None:
                loss[t - 1] = full_loss(data, state.w)
            else:
                X, y = (data.features, data.labels)
                loss[t - 1] = float(np.mean(model.loss(state.w, X, y)))
        elif idx is not None:
            X, y = data.subset(idx)
            loss[t - 1] = float(np.mean(model.loss(state.w, X, y)))

        state = step(state, config, g_tilde)

    return TrajectoryRecord(
        t=np.arange(1, T + 1), emp_grad_sq=emp_sq, pop_grad_sq=pop_sq,
        noise_dev=noise_dev, total_dev=total_dev, loss=loss,
        r_index=r_index, w_r=w_r, final_w=state.w, config=config,
    )


# theory-prescribed parameter rules ----------------------------------------

GD_POP, RMSPROP_POP, ADAM_POP = "GD_POP", "RMSPROP_POP", "ADAM_POP"
GD_EMP, RMSPROP_EMP, ADAM_EMP = "GD_EMP", "RMSPROP_EMP", "ADAM_EMP"
_THEOREMS = (GD_POP, RMSPROP_POP, ADAM_POP, GD_EMP, RMSPROP_EMP, ADAM_EMP)


def adam_eta_bracket(beta1: float) -> float:
    """The Adam step-size coefficient (sqrt(1/2 + 4 b1/(1-b1)^2) - 1/2) (1-b1)^2 / b1."""
    if not (0.0 < beta1 < 1.0):
        raise ValueError(f"beta1 must lie in (0, 1), got {beta1}")
    r = 4.0 * beta1 / (1.0 - beta1) ** 2
    return (math.sqrt(0.5 + r) - 0.5) * (1.0 - beta1) ** 2 / beta1


def set_params_from_theory(theorem: str, n: int, p: int, eps: float, delta: float,
                           G: float, L: float, nu: float = 0.1,
                           beta1: float = 0.9, beta2: float = 0.999,
                           lambda_clamp: float = 1.0, t_scale: float = 1.0,
                           seed: int = 0,
                           max_order: int = accountant.DEFAULT_MAX_ORDER
                           ) -> OptimizerConfig:
    """Full-batch configuration prescribed by the convergence analyses.

    T and eta follow the stated rules per variant; the noise std is
    calibrated by the accountant at sampling rate 1 for (eps, delta, T) and
    scaled by the replace-one full-batch sensitivity 2G/n. ``t_scale``
    rescales T to absorb the unspecified constant inside the O(.) for T.
    """
    theorem = theorem.upper()
    if theorem not in _THEOREMS:
        raise ValueError(f"theorem must be one of {_THEOREMS}, got {theorem!r}")
    for name, val in (("n", n), ("p", p), ("eps", eps), ("delta", delta),
                      ("G", G), ("L", L)):
        if val <= 0:
            raise ValueError(f"{name} must be positive, got {val}")

    root = math.sqrt(p * math.log(1.0 / delta))
    if theorem in (GD_POP, GD_EMP):
        t_raw = n * eps * math.sqrt(L) / (G * root)
    else:
        t_raw = n * eps / (G * root)
    steps = max(1, math.ceil(t_scale * t_raw))

    if theorem == GD_POP:
        eta, kind, nu_used, lam = 1.0 / (4.0 * L), gd_kind(), 0.0, 1.0
    elif theorem == GD_EMP:
        eta, kind, nu_used, lam = 1.0 / L, gd_kind(), 0.0, 1.0
    elif theorem == RMSPROP_POP:
        eta, kind, nu_used, lam = nu / (4.0 * L), rmsprop_kind(beta2), nu, lambda_clamp
    elif theorem == RMSPROP_EMP:
        if 1.0 - beta2 > nu ** 2 / (16.0 * G ** 2):
            raise ParameterInfeasibleError(
                f"1 - beta2 <= nu^2 / (16 G^2) violated: 1 - {beta2} = "
                f"{1.0 - beta2:.6g} > {nu ** 2 / (16.0 * G ** 2):.6g}"
            )
        eta, kind, nu_used, lam = nu / (2.0 * L), rmsprop_kind(beta2), nu, lambda_clamp
    else:  # ADAM_POP / ADAM_EMP share the step-size rule
        eta = adam_eta_bracket(beta1) * nu / (4.0 * L)
        kind, nu_used, lam = adam_kind(beta1, beta2), nu, lambda_clamp

    sigma_mult = accountant.sigma_for_budget(eps, delta, steps, 1.0,
                                             max_order=max_order)
    sigma = sigma_mult * (2.0 * G / n)
    return OptimizerConfig(eta=eta, nu=nu_used, lambda_clamp=lam, sigma=sigma,
                           steps=steps, kind=kind, seed=seed)


def with_seed(config: OptimizerConfig, seed: int) -> OptimizerConfig:
    return replace(config, seed=seed)
