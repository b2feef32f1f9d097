"""Validation experiments: concentration, convergence scaling, the
uniform-convergence lower bound, and mini-batch training comparisons.

Every experiment derives all randomness from named counter-based streams
of the plan seed and aggregates results keyed by grid coordinates, so
runs are replayable byte-for-byte at any thread count.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import accountant, theory
from .models import (Dataset, QuadraticModel, SigmoidClusterModel, MLPModel,
                     bernoulli_means, empirical_gradient,
                     sample_cluster_classification, load_idx)
from .optimizer import (OptimizerConfig, averaging, gd_kind, rmsprop_kind,
                        adam_kind, noisy_gradient, run, set_params_from_theory,
                        with_seed)
from .streams import stream, subseed

KINDS = ("CONCENTRATION", "SCALING", "LOWER_BOUND", "TRAIN_COMPARE")

CONCENTRATION_HEADER = ["n", "p", "sigma", "mu", "alpha", "xi_union",
                        "observed_fail_freq", "trials"]
SCALING_HEADER = ["axis", "value", "mean_emp_grad_sq", "mean_pop_grad_sq",
                  "bound_value"]
LOWER_BOUND_HEADER = ["p", "n", "trial", "D", "D_over_sqrt_p_over_n"]
TRAIN_HEADER = ["method", "sigma", "epoch", "train_acc_mean", "train_acc_std",
                "test_acc_mean", "test_acc_std", "epsilon"]


@dataclass
class ExperimentPlan:
    """What to run: grid axes, trial count, master seed, output target."""

    kind: str
    grid: dict[str, list] = field(default_factory=dict)
    trials: int = 1
    seed: int = 0
    output_path: str | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


@dataclass(frozen=True)
class ScalingFit:
    """Log-log regression of a measured quantity against one swept axis."""

    exponent: float
    intercept: float
    r_squared: float


def fit_loglog(xs, ys) -> ScalingFit:
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.size < 2 or np.unique(xs).size < 2:
        raise ValueError("degenerate fit: need at least two distinct x values")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise ValueError("log-log fit needs positive values")
    lx, ly = np.log(xs), np.log(ys)
    slope, intercept = np.polyfit(lx, ly, 1)
    residuals = ly - (slope * lx + intercept)
    ss_res = float(residuals @ residuals)
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0.0 else max(0.0, min(1.0, 1.0 - ss_res / ss_tot))
    return ScalingFit(float(slope), float(intercept), r2)


def _keyed_map(fn, keys, threads: int) -> dict:
    # Results are gathered by key, never by completion order.
    if threads <= 1:
        return {k: fn(k) for k in keys}
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = {k: pool.submit(fn, k) for k in keys}
        return {k: f.result() for k, f in futures.items()}


# ---------------------------------------------------------------------------
# gradient concentration


def concentration_experiment(plan: ExperimentPlan, threads: int = 1
                             ) -> tuple[list[str], list[list], list[str]]:
    """Frequency of any-step deviation |g_noisy - g_pop| >= alpha vs the bound.

    Grid axes: n, p, sigma. Params: steps (T), beta (target union failure,
    sets the tail parameter mu), eta (GD step size on the quadratic), and
    optionally eps/delta, in which case each grid point is checked against
    the concentration statement's preconditions and flagged (never skipped)
    in the returned notes.
    """
    steps = int(plan.params.get("steps", 100))
    beta = float(plan.params.get("beta", 0.05))
    eta = float(plan.params.get("eta", 0.25))
    eps = plan.params.get("eps")
    delta = plan.params.get("delta")
    axes = [plan.grid.get(k) for k in ("n", "p", "sigma")]
    if any(a is None or len(a) == 0 for a in axes):
        raise ValueError("concentration grid needs nonempty n, p, sigma axes")

    points = list(itertools.product(*axes))
    notes: list[str] = []

    def run_point(point):
        n, p, sigma = int(point[0]), int(point[1]), float(point[2])
        point_seed = subseed(plan.seed, "conc", n, p, repr(sigma))
        mu_tail = theory.mu_for_failure(beta, p, steps)
        spec = theory.ConcentrationSpec(p=p, sigma=sigma, mu=mu_tail, T=steps)
        alpha, _ = theory.concentration(spec)
        if eps is not None and delta is not None:
            pre = theory.concentration_preconditions(sigma, mu_tail, float(eps),
                                                     float(delta), n)
            if not pre.all_ok:
                held = [name for name, ok in (("eps", pre.eps_ok),
                                              ("delta", pre.delta_ok),
                                              ("n", pre.n_ok)) if not ok]
                notes.append(f"n={n} p={p} sigma={sigma:g}: preconditions "
                             f"violated ({', '.join(held)}); ran anyway")
        model = QuadraticModel(bernoulli_means(p, point_seed))
        config = OptimizerConfig(eta=eta, nu=0.0, lambda_clamp=1.0, sigma=sigma,
                                 steps=steps, kind=gd_kind())

        def one_trial(k):
            data = Dataset(model.sample(n, stream(point_seed, "trial", k, "data"))[0])
            rec = run(model, data, with_seed(config, subseed(point_seed, "trial", k)))
            return bool(np.any(rec.total_dev >= alpha))

        fails = _keyed_map(one_trial, range(plan.trials), threads)
        observed = sum(fails.values()) / plan.trials
        return [n, p, sigma, mu_tail, alpha, theory.union_failure(spec),
                observed, plan.trials]

    rows = [run_point(pt) for pt in points]
    return CONCENTRATION_HEADER, rows, notes


# ---------------------------------------------------------------------------
# convergence scaling


def _base_variant(variant: str) -> str:
    return variant.upper().split("_")[0]


def scaling_experiment(plan: ExperimentPlan, threads: int = 1
                       ) -> tuple[list[str], list[list], dict[str, ScalingFit]]:
    """Mean squared gradient norm at theory parameters, swept per axis.

    Grid axes: any of p, n (each swept with the other held at params p0/n0).
    Params: eps, delta, variant (parameter rule), t_scale, nu/beta1/beta2
    for the adaptive rules.
    """
    if not plan.grid:
        raise ValueError("scaling grid needs at least one of p, n")
    eps = float(plan.params.get("eps", 1.0))
    delta = float(plan.params.get("delta", 1e-5))
    variant = str(plan.params.get("variant", "GD_EMP")).upper()
    t_scale = float(plan.params.get("t_scale", 1.0))
    beta = float(plan.params.get("beta", 0.05))
    n0 = int(plan.params.get("n0", 10_000))
    p0 = int(plan.params.get("p0", 16))
    kw = {k: float(plan.params[k]) for k in ("nu", "beta1", "beta2")
          if k in plan.params}

    def measure(axis, value):
        p = int(value) if axis == "p" else p0
        n = int(value) if axis == "n" else n0
        model = SigmoidClusterModel(p, seed=subseed(plan.seed, "model", p))
        config = set_params_from_theory(variant, n, p, eps, delta,
                                        model.grad_bound_G, model.lipschitz_L,
                                        t_scale=t_scale, **kw)
        point_seed = subseed(plan.seed, "scaling", axis, int(value))

        def one_trial(k):
            X, y = model.sample(n, stream(point_seed, "trial", k, "data"))
            rec = run(model, Dataset(X, y),
                      with_seed(config, subseed(point_seed, "trial", k)))
            return rec.mean_emp_grad_sq(), rec.mean_pop_grad_sq()

        results = _keyed_map(one_trial, range(plan.trials), threads)
        emp = float(np.mean([results[k][0] for k in range(plan.trials)]))
        pop = float(np.mean([results[k][1] for k in range(plan.trials)]))
        base = _base_variant(variant)
        if variant.endswith("_POP"):
            bound = theory.population_bound(base, n, p, eps, delta, beta,
                                            model.grad_bound_G, model.lipschitz_L)
        else:
            bound = theory.empirical_bound(base, n, p, eps, delta,
                                           model.grad_bound_G, model.lipschitz_L)
        return emp, pop, bound

    rows, fits = [], {}
    for axis in sorted(plan.grid):
        values = plan.grid[axis]
        if axis not in ("p", "n"):
            raise ValueError(f"unknown scaling axis {axis!r}")
        measured = []
        for value in values:
            emp, pop, bound = measure(axis, value)
            rows.append([axis, value, emp, pop, bound])
            measured.append(emp)
        fits[axis] = fit_loglog(values, measured)
    return SCALING_HEADER, rows, fits


# ---------------------------------------------------------------------------
# uniform-convergence lower bound


@dataclass(frozen=True)
class LowerBoundSummary:
    mean_d2: float
    se_d2: float
    reference_d2: float
    ratio_to_p_over_n: float
    tail_fractions: dict[float, float]


def lower_bound_experiment(p: int, n: int, trials: int, seed: int,
                           c_grid: tuple[float, ...] = (0.3, 0.35, 0.4, 0.45, 0.5),
                           w_probes: int = 5, threads: int = 1
                           ) -> tuple[list[str], list[list], LowerBoundSummary]:
    """Distribution of D = |mu - mean(S)| over product-Bernoulli datasets.

    For the quadratic loss, D equals the empirical-population gradient gap
    at every w; this is asserted at ``w_probes`` random points per trial.
    """
    if p < 1 or n < 1 or trials < 1:
        raise ValueError("p, n, trials must all be >= 1")
    mu = bernoulli_means(p, seed)
    model = QuadraticModel(mu)
    scale = math.sqrt(p / n)

    def one_trial(k):
        trial_rng = stream(seed, "trial", k, "data")
        data = Dataset(model.sample(n, trial_rng)[0])
        d = float(np.linalg.norm(mu - data.feature_mean))
        probe_rng = stream(seed, "trial", k, "probe")
        for _ in range(w_probes):
            w = probe_rng.uniform(-2.0, 2.0, size=p)
            gap = float(np.linalg.norm(
                empirical_gradient(model, data, w)
                - model.population_gradient_exact(w)))
            if abs(gap - d) > 1e-12 * max(1.0, d):
                raise AssertionError(
                    f"w-dependence detected: gap {gap!r} != D {d!r} at trial {k}"
                )
        return d

    results = _keyed_map(one_trial, range(trials), threads)
    ds = np.array([results[k] for k in range(trials)])
    rows = [[p, n, k, float(ds[k]), float(ds[k] / scale)] for k in range(trials)]
    d2 = ds ** 2
    reference = float(np.sum(mu * (1.0 - mu)) / n)
    summary = LowerBoundSummary(
        mean_d2=float(d2.mean()),
        se_d2=float(d2.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0,
        reference_d2=reference,
        ratio_to_p_over_n=float(d2.mean() / (p / n)),
        tail_fractions={c: float(np.mean(ds >= c * scale)) for c in c_grid},
    )
    return LOWER_BOUND_HEADER, rows, summary


# ---------------------------------------------------------------------------
# training comparison


_METHOD_KINDS = {"sgd": "GD", "rmsprop": "RMSPROP", "adam": "ADAM"}


def _method_kind(method: str, beta1: float, beta2: float):
    tag = _METHOD_KINDS.get(method.lower())
    if tag is None:
        raise ValueError(f"unknown method {method!r}; expected one of "
                         f"{sorted(_METHOD_KINDS)}")
    if tag == "GD":
        return gd_kind()
    if tag == "RMSPROP":
        return rmsprop_kind(beta2)
    return adam_kind(beta1, beta2)


@dataclass
class TrainRunResult:
    train_acc: np.ndarray  # per epoch
    test_acc: np.ndarray
    final_train_loss: float


def _train_one(model: MLPModel, train: Dataset, test: Dataset, method: str,
               eta0: float, sigma_mult: float, epochs: int, batch_size: int,
               clip_bound: float, seed: int, nu: float, lam: float,
               beta1: float, beta2: float, lr_decay_every: int,
               lr_decay: float) -> TrainRunResult:
    """One mini-batch DPAGD training run with epoch-end accuracy evals.

    Noise: N(0, (sigma_mult * clip)^2 I) on the clipped gradient sum,
    divided by the batch size. DP SGD uses the unit denominator (nu = 0,
    lambda = 1); the adaptive methods use their clamped second moment.
    """
    kind = _method_kind(method, beta1, beta2)
    if kind.tag == "GD":
        nu, lam = 0.0, 1.0
    n = train.n
    steps_per_epoch = math.ceil(n / batch_size)
    eff_sigma = sigma_mult * clip_bound / batch_size

    w = model.initial_point(stream(seed, "init"))
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    train_acc = np.zeros(epochs)
    test_acc = np.zeros(epochs)
    t = 0
    for epoch in range(1, epochs + 1):
        eta = eta0 * (lr_decay ** ((epoch - 1) // lr_decay_every))
        for _ in range(steps_per_epoch):
            t += 1
            idx = stream(seed, "batch", t).choice(n, size=batch_size, replace=False)
            X, y = train.subset(idx)
            g_hat = model.clipped_mean_gradient(w, X, y, clip_bound)
            g = noisy_gradient(g_hat, eff_sigma, stream(seed, "noise", t))
            m, v = averaging(kind, m, v, g)
            w = w - eta * m / (np.sqrt(np.minimum(v, lam)) + nu)
        train_acc[epoch - 1] = model.accuracy(w, train.features, train.labels)
        test_acc[epoch - 1] = model.accuracy(w, test.features, test.labels)
    final_loss = float(np.mean(model.loss(w, train.features, train.labels)))
    return TrainRunResult(train_acc, test_acc, final_loss)


def _train_epsilon_per_epoch(sigma_mult: float, q: float, steps_per_epoch: int,
                             epochs: int, delta: float) -> list[float]:
    if sigma_mult == 0.0:
        return [math.inf] * epochs
    spec = accountant.MechanismSpec(sigma_mult, q, 1)
    ledger = accountant.compose_step_log_moments(spec)
    log_inv_delta = math.log(1.0 / delta)
    out = []
    for epoch in range(1, epochs + 1):
        t = epoch * steps_per_epoch
        out.append(min((t * val + log_inv_delta) / lam
                       for lam, val in ledger.log_moments))
    return out


def _build_train_data(plan: ExperimentPlan) -> tuple[MLPModel, Dataset, Dataset]:
    data_cfg = dict(plan.params.get("data", {}))
    kind = data_cfg.get("kind", "clusters")
    n_train = int(plan.params.get("n_train", 10_000))
    if kind == "idx":
        train = load_idx(data_cfg["train_images"], data_cfg["train_labels"])
        mean = train.generator_spec["norm_mean"]
        std = train.generator_spec["norm_std"]
        test = load_idx(data_cfg["test_images"], data_cfg["test_labels"],
                        stats=(mean, std))
        if n_train < train.n:
            keep = stream(plan.seed, "subset").choice(train.n, size=n_train,
                                                      replace=False)
            train = Dataset(train.features[keep], train.labels[keep],
                            train.generator_spec | {"subset": n_train})
        n_classes = int(max(train.labels.max(), test.labels.max())) + 1
        model = MLPModel(train.features.shape[1], n_classes=n_classes)
        return model, train, test
    if kind == "clusters":
        input_dim = int(data_cfg.get("input_dim", 64))
        n_classes = int(data_cfg.get("n_classes", 10))
        n_test = int(data_cfg.get("n_test", 2_000))
        separation = float(data_cfg.get("separation", 1.1))
        scale_decay = float(data_cfg.get("scale_decay", 2.0))
        rng = stream(plan.seed, "train-data")
        X, y = sample_cluster_classification(n_train + n_test, input_dim,
                                             n_classes, rng, separation,
                                             scale_decay)
        train = Dataset(X[:n_train], y[:n_train],
                        {"kind": "clusters", "n": n_train, "seed": plan.seed})
        test = Dataset(X[n_train:], y[n_train:], {"kind": "clusters-test"})
        return MLPModel(input_dim, n_classes=n_classes), train, test
    raise ValueError(f"unknown training data kind {kind!r}")


def train_compare(plan: ExperimentPlan, threads: int = 1
                  ) -> tuple[list[str], list[list], dict]:
    """DP SGD vs DP RMSprop vs DP Adam at matched clip/noise/batch/epochs.

    The step size is picked per (method, sigma) from a small grid by the
    lowest final training loss, then ``trials`` repeat runs produce the
    reported mean and standard deviation per epoch. Returns the selected
    rates in the details dict.
    """
    model, train, test = _build_train_data(plan)
    sigmas = [float(s) for s in plan.grid.get("sigma", [0.0])]
    methods = list(plan.params.get("methods", ["sgd", "rmsprop", "adam"]))
    epochs = int(plan.params.get("epochs", 20))
    batch_size = int(plan.params.get("batch_size", 128))
    clip_bound = float(plan.params.get("clip", 1.0))
    lr_grid = [float(v) for v in plan.params.get("lr_grid", (0.1, 0.01, 0.001))]
    delta = float(plan.params.get("delta", 1e-5))
    beta1 = float(plan.params.get("beta1", 0.9))
    beta2 = float(plan.params.get("beta2", 0.99))
    nu = float(plan.params.get("nu", 0.04))
    lam = float(plan.params.get("lambda", 1.0))
    lr_decay_every = int(plan.params.get("lr_decay_every", 30))
    lr_decay = float(plan.params.get("lr_decay", 0.1))

    steps_per_epoch = math.ceil(train.n / batch_size)
    q = batch_size / train.n
    rows, details = [], {"selected_lr": {}, "final_train_loss": {}}

    for sigma_mult in sigmas:
        eps_per_epoch = _train_epsilon_per_epoch(sigma_mult, q, steps_per_epoch,
                                                 epochs, delta)
        for method in methods:
            def train_with(eta0, seed):
                return _train_one(model, train, test, method, eta0, sigma_mult,
                                  epochs, batch_size, clip_bound, seed, nu, lam,
                                  beta1, beta2, lr_decay_every, lr_decay)

            select_seed = subseed(plan.seed, "select", method, repr(sigma_mult))
            selection = _keyed_map(
                lambda lr: train_with(lr, subseed(select_seed, repr(lr))),
                lr_grid, threads)
            chosen_lr = min(lr_grid, key=lambda lr: (selection[lr].final_train_loss, lr))
            details["selected_lr"][(method, sigma_mult)] = chosen_lr
            details["final_train_loss"][(method, sigma_mult)] = \
                selection[chosen_lr].final_train_loss

            repeat_seed = subseed(plan.seed, "repeat", method, repr(sigma_mult))
            repeats = _keyed_map(
                lambda k: train_with(chosen_lr, subseed(repeat_seed, k)),
                range(plan.trials), threads)
            train_curves = np.stack([repeats[k].train_acc for k in range(plan.trials)])
            test_curves = np.stack([repeats[k].test_acc for k in range(plan.trials)])
            for epoch in range(1, epochs + 1):
                rows.append([
                    method, sigma_mult, epoch,
                    float(train_curves[:, epoch - 1].mean()),
                    float(train_curves[:, epoch - 1].std()),
                    float(test_curves[:, epoch - 1].mean()),
                    float(test_curves[:, epoch - 1].std()),
                    eps_per_epoch[epoch - 1],
                ])
    return TRAIN_HEADER, rows, details
