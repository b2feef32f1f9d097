"""Command-line entry point.

Subcommands: accountant, bounds, train, concentration, scaling,
lowerbound, traincompare. Human-readable logs go to stderr; machine
output is CSV, written atomically to --out (default stdout). File outputs
get a JSON run manifest alongside, and experiment outputs also get a
rendered figure unless --no-figures is set.

Exit codes: 0 success, 1 configuration error, 2 runtime or calibration
error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__, accountant, harness, report, theory
from .models import build_model_and_data
from .optimizer import (OptimizerConfig, adam_kind, gd_kind, rmsprop_kind, run,
                        set_params_from_theory)


class ConfigError(ValueError):
    """Bad flags, bad config file, or inconsistent options."""


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 1, not argparse's 2
        raise _UsageError(message)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v != ""]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v != ""]


def _strings(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def load_config(path: str) -> dict[str, str]:
    """Flat ``key = value`` file with # comments; returns raw string values."""
    values: dict[str, str] = {}
    try:
        with open(path) as f:
            lines = f.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = text.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def _resolve(defaults: dict, parsers: dict, file_values: dict[str, str],
             flag_values: dict, config_path: str | None) -> dict:
    """defaults <- config file <- explicit flags; unknown keys rejected."""
    resolved = dict(defaults)
    for key, raw in file_values.items():
        if key not in parsers:
            raise ConfigError(
                f"{config_path}: unknown key {key!r} (known: {', '.join(sorted(parsers))})"
            )
        try:
            resolved[key] = parsers[key](raw)
        except ValueError as exc:
            raise ConfigError(f"{config_path}: key {key!r}: {exc}") from exc
    for key, val in flag_values.items():
        if val is not None:
            resolved[key] = val
    return resolved


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest_path(out: str) -> str:
    root, _ = os.path.splitext(out)
    return root + ".manifest.json"


def _write_manifest(out: str | None, subcommand: str, resolved: dict) -> None:
    if out is None or out == "-":
        return
    digests = {}
    for key in ("idx_train_images", "idx_train_labels", "idx_test_images",
                "idx_test_labels"):
        path = resolved.get(key)
        if path:
            digests[path] = _sha256(path)
    payload = {
        "tool_version": __version__,
        "subcommand": subcommand,
        "config": {k: v for k, v in sorted(resolved.items())},
        "seed": resolved.get("seed"),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "input_digests": digests,
    }
    with open(manifest_path(out), "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def replay_manifest(path: str, out: str | None = None) -> int:
    """Re-run the subcommand recorded in a manifest; outputs are identical."""
    with open(path) as f:
        payload = json.load(f)
    sub = payload["subcommand"]
    resolved = payload["config"]
    if out is not None:
        resolved = dict(resolved, out=out)
    runner, defaults, parsers = _SUBCOMMANDS[sub]
    merged = dict(defaults)
    for key, val in resolved.items():
        if key in parsers and isinstance(val, str) and not isinstance(defaults.get(key), str):
            merged[key] = parsers[key](val)
        else:
            merged[key] = val
    return runner(merged)


# ---------------------------------------------------------------------------
# subcommand: accountant


_ACCOUNTANT_DEFAULTS = {
    "sigma": None, "q": 1.0, "steps": 1, "delta": 1e-5, "target_eps": None,
    "max_order": accountant.DEFAULT_MAX_ORDER, "nodes": accountant.DEFAULT_NODES,
    "method": "ma", "out": "-", "seed": 0, "threads": 0, "figures": None,
}
_ACCOUNTANT_PARSERS = {
    "sigma": float, "q": float, "steps": int, "delta": float,
    "target_eps": float, "max_order": int, "nodes": int, "method": str,
    "out": str, "seed": int, "threads": int, "figures": bool,
}


def _run_accountant(cfg: dict) -> int:
    if (cfg["sigma"] is None) == (cfg["target_eps"] is None):
        raise ConfigError("give exactly one of --sigma and --target-eps")
    methods = _strings(cfg["method"])
    for m in methods:
        if m not in ("ma", "ac"):
            raise ConfigError(f"method must be ma or ac, got {m!r}")
    if cfg["target_eps"] is not None:
        sigma = accountant.sigma_for_budget(
            cfg["target_eps"], cfg["delta"], cfg["steps"], cfg["q"],
            max_order=cfg["max_order"], nodes=cfg["nodes"])
        _log(f"calibrated noise multiplier {sigma:.6g} for target epsilon "
             f"{cfg['target_eps']}")
    else:
        sigma = cfg["sigma"]
    spec = accountant.MechanismSpec(sigma, cfg["q"], cfg["steps"])
    rows = []
    for m in methods:
        if m == "ma":
            rep = accountant.eps_report(spec, cfg["delta"],
                                        max_order=cfg["max_order"],
                                        nodes=cfg["nodes"])
            if rep.strained:
                _log(f"note: optimizing moment order {rep.best_order} strains the "
                     "accountant's asymptotic validity regime (reported anyway)")
            eps = rep.epsilon
        else:
            eps = accountant.ac_eps_for_delta(spec, cfg["delta"])
        rows.append([sigma, cfg["q"], cfg["steps"], cfg["delta"], eps, m])
    report.write_csv(cfg["out"], ["sigma", "q", "steps", "delta", "epsilon", "method"],
                     rows)
    _write_manifest(cfg["out"], "accountant", cfg)
    return 0


# ---------------------------------------------------------------------------
# subcommand: bounds


_BOUNDS_DEFAULTS = {
    "variant": "gd", "n": [10_000], "p": [16], "eps": [1.0], "delta": 1e-5,
    "beta": 0.05, "G": 1.0, "L": 1.0, "constant": 1.0, "out": "-", "seed": 0,
    "threads": 0, "figures": None,
}
_BOUNDS_PARSERS = {
    "variant": str, "n": _ints, "p": _ints, "eps": _floats, "delta": float,
    "beta": float, "G": float, "L": float, "constant": float, "out": str,
    "seed": int, "threads": int, "figures": bool,
}


def _run_bounds(cfg: dict) -> int:
    header = ["axis", "value", "population_bound", "empirical_bound",
              "uniform_convergence", "variant", "n", "p", "eps"]
    swept = [k for k in ("n", "p", "eps") if len(cfg[k]) > 1] or ["n"]
    rows = []
    base = {"n": cfg["n"][0], "p": cfg["p"][0], "eps": cfg["eps"][0]}
    for axis in swept:
        for value in cfg[axis]:
            pt = dict(base, **{axis: value})
            pop = theory.population_bound(cfg["variant"], pt["n"], pt["p"],
                                          pt["eps"], cfg["delta"], cfg["beta"],
                                          cfg["G"], cfg["L"], cfg["constant"])
            emp = theory.empirical_bound(cfg["variant"], pt["n"], pt["p"],
                                         pt["eps"], cfg["delta"], cfg["G"],
                                         cfg["L"], cfg["constant"])
            uc = theory.uniform_convergence_bound(pt["p"], pt["n"], cfg["constant"])
            rows.append([axis, value, pop, emp, uc, cfg["variant"].upper(),
                         pt["n"], pt["p"], pt["eps"]])
    report.write_csv(cfg["out"], header, rows)
    if _want_figures(cfg):
        report.render_bounds(rows, header, report.figure_path(cfg["out"]))
    _write_manifest(cfg["out"], "bounds", cfg)
    return 0


# ---------------------------------------------------------------------------
# subcommand: train (single optimization run -> trajectory CSV)


_TRAIN_DEFAULTS = {
    "model": "quadratic", "p": 16, "n": 1000, "mu_spec": "uniform",
    "kind": "gd", "eta": 0.1, "nu": 0.0, "lambda": 1.0, "beta1": 0.9,
    "beta2": 0.999, "sigma": None, "eps": None, "delta": 1e-5,
    "steps": None, "epochs": None, "batch_size": None, "clip": None,
    "seed": 0, "out": "-", "threads": 0, "figures": None,
    "max_order": accountant.DEFAULT_MAX_ORDER,
}
_TRAIN_PARSERS = {
    "model": str, "p": int, "n": int, "mu_spec": str, "kind": str,
    "eta": float, "nu": float, "lambda": float, "beta1": float, "beta2": float,
    "sigma": float, "eps": float, "delta": float, "steps": int, "epochs": int,
    "batch_size": int, "clip": float, "seed": int, "out": str, "threads": int,
    "figures": bool, "max_order": int,
}


def _train_kind(cfg: dict):
    kind = cfg["kind"].lower()
    if kind in ("gd", "sgd"):
        return gd_kind()
    if kind == "rmsprop":
        return rmsprop_kind(cfg["beta2"])
    if kind == "adam":
        return adam_kind(cfg["beta1"], cfg["beta2"])
    raise ConfigError(f"unknown kind {cfg['kind']!r} (gd, rmsprop, adam)")


def _run_train(cfg: dict) -> int:
    model, data = build_model_and_data(cfg["model"], cfg["p"], cfg["n"],
                                       cfg["seed"], mu_spec=cfg["mu_spec"])
    if (cfg["steps"] is None) == (cfg["epochs"] is None):
        raise ConfigError("give exactly one of steps and epochs")
    if cfg["epochs"] is not None:
        if cfg["batch_size"] is None:
            raise ConfigError("epochs needs batch_size to define an epoch")
        steps = cfg["epochs"] * math.ceil(data.n / cfg["batch_size"])
    else:
        steps = cfg["steps"]

    if (cfg["sigma"] is None) == (cfg["eps"] is None):
        raise ConfigError("give exactly one of sigma and eps (with delta)")
    if cfg["eps"] is not None:
        if cfg["batch_size"] is not None:
            q = cfg["batch_size"] / data.n
            sigma = accountant.sigma_for_budget(cfg["eps"], cfg["delta"], steps,
                                                q, max_order=cfg["max_order"])
            _log(f"calibrated noise multiplier {sigma:.6g} at q={q:.6g}")
        else:
            if model.grad_bound_G is None:
                raise ConfigError("eps calibration needs a model gradient bound G")
            mult = accountant.sigma_for_budget(cfg["eps"], cfg["delta"], steps,
                                               1.0, max_order=cfg["max_order"])
            sigma = mult * 2.0 * model.grad_bound_G / data.n
            _log(f"calibrated noise std {sigma:.6g} "
                 f"(multiplier {mult:.6g}, sensitivity 2G/n)")
    else:
        sigma = cfg["sigma"]

    kind = _train_kind(cfg)
    config = OptimizerConfig(
        eta=cfg["eta"], nu=cfg["nu"] if kind.tag != "GD" else 0.0,
        lambda_clamp=cfg["lambda"] if kind.tag != "GD" else 1.0,
        sigma=sigma, steps=steps, kind=kind, batch_size=cfg["batch_size"],
        clip_bound=cfg["clip"], seed=cfg["seed"])
    record = run(model, data, config,
                 log_full_gradients=cfg["batch_size"] is None or data.n <= 20_000)
    header = ["t", "emp_grad_sq", "pop_grad_sq", "noise_dev", "total_dev", "loss"]
    rows = [[int(t), record.emp_grad_sq[i], record.pop_grad_sq[i],
             record.noise_dev[i], record.total_dev[i], record.loss[i]]
            for i, t in enumerate(record.t)]
    report.write_csv(cfg["out"], header, rows)
    _log(f"selected iterate R={record.r_index} of T={steps}")
    if _want_figures(cfg):
        _render_trajectory(rows, report.figure_path(cfg["out"]))
    _write_manifest(cfg["out"], "train", cfg)
    return 0


def _render_trajectory(rows, out_png):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ts = [r[0] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 4))
    emp = np.array([r[1] for r in rows])
    pop = np.array([r[2] for r in rows])
    if np.isfinite(emp).any():
        ax1.semilogy(ts, emp, label="empirical grad$^2$")
    if np.isfinite(pop).any():
        ax1.semilogy(ts, pop, label="population grad$^2$")
    ax1.set_xlabel("t")
    ax1.legend()
    loss = np.array([r[5] for r in rows])
    if np.isfinite(loss).any():
        ax2.plot(ts, loss, label="loss")
    ax2.set_xlabel("t")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)


# ---------------------------------------------------------------------------
# experiment subcommands


_CONC_DEFAULTS = {
    "n": [10_000], "p": [64], "sigma": [0.05], "steps": 100, "beta": 0.05,
    "eta": 0.25, "eps": None, "delta": None, "trials": 100, "seed": 0,
    "out": "-", "threads": 0, "figures": None,
}
_CONC_PARSERS = {
    "n": _ints, "p": _ints, "sigma": _floats, "steps": int, "beta": float,
    "eta": float, "eps": float, "delta": float, "trials": int, "seed": int,
    "out": str, "threads": int, "figures": bool,
}


def _run_concentration(cfg: dict) -> int:
    params = {"steps": cfg["steps"], "beta": cfg["beta"], "eta": cfg["eta"]}
    if cfg["eps"] is not None and cfg["delta"] is not None:
        params["eps"], params["delta"] = cfg["eps"], cfg["delta"]
    plan = harness.ExperimentPlan(
        kind="CONCENTRATION",
        grid={"n": cfg["n"], "p": cfg["p"], "sigma": cfg["sigma"]},
        trials=cfg["trials"], seed=cfg["seed"], output_path=cfg["out"],
        params=params)
    header, rows, notes = harness.concentration_experiment(plan,
                                                           threads=_threads(cfg))
    for note in notes:
        _log(f"note: {note}")
    report.write_csv(cfg["out"], header, rows)
    if _want_figures(cfg):
        report.render_concentration(rows, report.figure_path(cfg["out"]))
    _write_manifest(cfg["out"], "concentration", cfg)
    return 0


_SCALING_DEFAULTS = {
    "p_grid": [], "n_grid": [], "n0": 10_000, "p0": 16, "eps": 1.0,
    "delta": 1e-5, "variant": "GD_EMP", "t_scale": 1.0, "trials": 20,
    "nu": None, "beta1": None, "beta2": None,
    "seed": 0, "out": "-", "threads": 0, "figures": None,
}
_SCALING_PARSERS = {
    "p_grid": _ints, "n_grid": _ints, "n0": int, "p0": int, "eps": float,
    "delta": float, "variant": str, "t_scale": float, "trials": int,
    "nu": float, "beta1": float, "beta2": float,
    "seed": int, "out": str, "threads": int, "figures": bool,
}


def _run_scaling(cfg: dict) -> int:
    grid = {}
    if cfg["p_grid"]:
        grid["p"] = cfg["p_grid"]
    if cfg["n_grid"]:
        grid["n"] = cfg["n_grid"]
    if not grid:
        raise ConfigError("give at least one of p_grid and n_grid")
    params = {"eps": cfg["eps"], "delta": cfg["delta"], "variant": cfg["variant"],
              "t_scale": cfg["t_scale"], "n0": cfg["n0"], "p0": cfg["p0"]}
    for k in ("nu", "beta1", "beta2"):
        if cfg[k] is not None:
            params[k] = cfg[k]
    plan = harness.ExperimentPlan(kind="SCALING", grid=grid, trials=cfg["trials"],
                                  seed=cfg["seed"], output_path=cfg["out"],
                                  params=params)
    header, rows, fits = harness.scaling_experiment(plan, threads=_threads(cfg))
    for axis, fit in sorted(fits.items()):
        _log(f"{axis}-sweep: log-log slope {fit.exponent:.4f} "
             f"(intercept {fit.intercept:.4f}, r^2 {fit.r_squared:.4f})")
    report.write_csv(cfg["out"], header, rows)
    if _want_figures(cfg):
        report.render_scaling(rows, fits, report.figure_path(cfg["out"]))
    _write_manifest(cfg["out"], "scaling", cfg)
    return 0


_LOWER_DEFAULTS = {
    "p": 100, "n": 1000, "trials": 500, "seed": 0, "out": "-", "threads": 0,
    "figures": None,
}
_LOWER_PARSERS = {
    "p": int, "n": int, "trials": int, "seed": int, "out": str, "threads": int,
    "figures": bool,
}


def _run_lowerbound(cfg: dict) -> int:
    header, rows, summary = harness.lower_bound_experiment(
        cfg["p"], cfg["n"], cfg["trials"], cfg["seed"], threads=_threads(cfg))
    _log(f"mean D^2 {summary.mean_d2:.6g} (reference {summary.reference_d2:.6g}, "
         f"se {summary.se_d2:.3g}); ratio to p/n {summary.ratio_to_p_over_n:.4f}")
    for c, frac in sorted(summary.tail_fractions.items()):
        _log(f"fraction of trials with D >= {c:g} sqrt(p/n): {frac:.3f}")
    report.write_csv(cfg["out"], header, rows)
    if _want_figures(cfg):
        report.render_lower_bound(rows, report.figure_path(cfg["out"]))
    _write_manifest(cfg["out"], "lowerbound", cfg)
    return 0


_TRAINCMP_DEFAULTS = {
    "sigma": [8.0], "methods": ["sgd", "rmsprop", "adam"], "epochs": 20,
    "batch_size": 128, "clip": 1.0, "lr_grid": [0.1, 0.01, 0.001],
    "repeats": 5, "delta": 1e-5, "beta1": 0.9, "beta2": 0.99, "nu": 0.04,
    "lambda": 1.0, "data_kind": "clusters", "input_dim": 64, "n_classes": 10,
    "n_train": 10_000, "n_test": 2_000, "separation": 1.1, "scale_decay": 2.0,
    "idx_train_images": None, "idx_train_labels": None,
    "idx_test_images": None, "idx_test_labels": None,
    "seed": 0, "out": "-", "threads": 0, "figures": None,
}
_TRAINCMP_PARSERS = {
    "sigma": _floats, "methods": _strings, "epochs": int, "batch_size": int,
    "clip": float, "lr_grid": _floats, "repeats": int, "delta": float,
    "beta1": float, "beta2": float, "nu": float, "lambda": float,
    "data_kind": str, "input_dim": int, "n_classes": int, "n_train": int,
    "n_test": int, "separation": float, "scale_decay": float,
    "idx_train_images": str, "idx_train_labels": str, "idx_test_images": str,
    "idx_test_labels": str, "seed": int, "out": str, "threads": int,
    "figures": bool,
}


def _run_traincompare(cfg: dict) -> int:
    if cfg["data_kind"] == "idx":
        for k in ("idx_train_images", "idx_train_labels", "idx_test_images",
                  "idx_test_labels"):
            if not cfg[k]:
                raise ConfigError(f"data_kind=idx requires {k}")
        data = {"kind": "idx", "train_images": cfg["idx_train_images"],
                "train_labels": cfg["idx_train_labels"],
                "test_images": cfg["idx_test_images"],
                "test_labels": cfg["idx_test_labels"]}
    else:
        data = {"kind": "clusters", "input_dim": cfg["input_dim"],
                "n_classes": cfg["n_classes"], "n_test": cfg["n_test"],
                "separation": cfg["separation"],
                "scale_decay": cfg["scale_decay"]}
    plan = harness.ExperimentPlan(
        kind="TRAIN_COMPARE", grid={"sigma": cfg["sigma"]},
        trials=cfg["repeats"], seed=cfg["seed"], output_path=cfg["out"],
        params={"data": data, "n_train": cfg["n_train"], "epochs": cfg["epochs"],
                "batch_size": cfg["batch_size"], "clip": cfg["clip"],
                "lr_grid": cfg["lr_grid"], "methods": cfg["methods"],
                "delta": cfg["delta"], "beta1": cfg["beta1"],
                "beta2": cfg["beta2"], "nu": cfg["nu"],
                "lambda": cfg["lambda"]})
    header, rows, details = harness.train_compare(plan, threads=_threads(cfg))
    for (method, sigma), lr in sorted(details["selected_lr"].items()):
        _log(f"{method} @ sigma={sigma:g}: selected step size {lr:g} "
             f"(final train loss {details['final_train_loss'][(method, sigma)]:.4f})")
    report.write_csv(cfg["out"], header, rows)
    if _want_figures(cfg):
        report.render_train_compare(rows, report.figure_path(cfg["out"]))
    _write_manifest(cfg["out"], "traincompare", cfg)
    return 0


# ---------------------------------------------------------------------------
# dispatch


def _threads(cfg: dict) -> int:
    t = cfg.get("threads", 0)
    return os.cpu_count() or 1 if t in (0, None) else t


def _want_figures(cfg: dict) -> bool:
    if cfg.get("out") in (None, "-"):
        return False
    fig = cfg.get("figures")
    return True if fig is None else bool(fig)


_SUBCOMMANDS = {
    "accountant": (_run_accountant, _ACCOUNTANT_DEFAULTS, _ACCOUNTANT_PARSERS),
    "bounds": (_run_bounds, _BOUNDS_DEFAULTS, _BOUNDS_PARSERS),
    "train": (_run_train, _TRAIN_DEFAULTS, _TRAIN_PARSERS),
    "concentration": (_run_concentration, _CONC_DEFAULTS, _CONC_PARSERS),
    "scaling": (_run_scaling, _SCALING_DEFAULTS, _SCALING_PARSERS),
    "lowerbound": (_run_lowerbound, _LOWER_DEFAULTS, _LOWER_PARSERS),
    "traincompare": (_run_traincompare, _TRAINCMP_DEFAULTS, _TRAINCMP_PARSERS),
}

_FLAG_HELP = {
    "accountant": "privacy loss of T (sub)sampled Gaussian releases",
    "bounds": "closed-form convergence bound values over a grid",
    "train": "one optimization run; writes the trajectory CSV",
    "concentration": "noisy-gradient concentration experiment",
    "scaling": "convergence scaling experiment in p and n",
    "lowerbound": "dataset-deviation lower-bound experiment",
    "traincompare": "DP SGD / RMSprop / Adam training comparison",
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="dpadapt",
                     description="Differentially private adaptive gradient toolkit")
    sub = parser.add_subparsers(dest="subcommand")
    for name, (_, defaults, parsers) in _SUBCOMMANDS.items():
        sp = sub.add_parser(name, help=_FLAG_HELP[name], add_help=True)
        sp.register("type", None, str)
        for key, parse_fn in parsers.items():
            flag = "--" + key.replace("_", "-")
            if parse_fn is bool:
                group = sp.add_mutually_exclusive_group()
                group.add_argument(flag, dest=key, action="store_true",
                                   default=None)
                group.add_argument("--no-" + key.replace("_", "-"), dest=key,
                                   action="store_false", default=None)
            else:
                sp.add_argument(flag, dest=key, type=parse_fn, default=None)
        sp.add_argument("--config", dest="config", type=str, default=None,
                        help="flat key = value file; flags take precedence")
    return parser


def dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        ns = parser.parse_args(argv)
    except _UsageError as exc:
        _log(f"error: {exc}")
        parser.print_usage(sys.stderr)
        return 1
    if ns.subcommand is None:
        parser.print_usage(sys.stderr)
        return 1
    runner, defaults, parsers = _SUBCOMMANDS[ns.subcommand]
    try:
        file_values = load_config(ns.config) if ns.config else {}
        flag_values = {k: getattr(ns, k) for k in parsers}
        resolved = _resolve(defaults, parsers, file_values, flag_values, ns.config)
    except ConfigError as exc:
        _log(f"configuration error: {exc}")
        return 1
    try:
        return runner(resolved)
    except accountant.CalibrationError as exc:
        _log(f"calibration error: {exc}")
        return 2
    except (ConfigError, ValueError) as exc:
        _log(f"configuration error: {exc}")
        return 1
    except Exception as exc:  # anything else is a runtime failure
        _log(f"runtime error: {exc}")
        return 2


def main(argv: list[str] | None = None) -> int:
    return dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
