"""Delimited output and companion figures.

CSV files are written atomically (temp file + rename) with a canonical
float encoding, so identical experiments produce byte-identical files.
Each experiment schema has a figure renderer that draws the corresponding
summary plot next to the CSV.
"""

from __future__ import annotations

import math
import os
import tempfile
from collections import defaultdict

import numpy as np


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        f = float(v)
        if math.isnan(f):
            return "nan"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return repr(f)
    return str(v)


def csv_text(header: list[str], rows: list[list]) -> str:
    lines = [",".join(header)]
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"row width {len(row)} != header width {len(header)}")
        lines.append(",".join(format_value(v) for v in row))
    return "\n".join(lines) + "\n"


def write_csv(path: str | None, header: list[str], rows: list[list]) -> None:
    """Write to ``path`` atomically; path None or '-' streams to stdout."""
    text = csv_text(header, rows)
    if path is None or path == "-":
        import sys

        sys.stdout.write(text)
        return
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".csv")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def figure_path(csv_path: str) -> str:
    root, _ = os.path.splitext(csv_path)
    return root + ".png"


def render_concentration(rows: list[list], out_png: str) -> None:
    # rows: n,p,sigma,mu,alpha,xi_union,observed_fail_freq,trials
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = range(len(rows))
    ax.plot(xs, [r[6] for r in rows], "o-", label="observed any-step failure")
    ax.plot(xs, [r[5] for r in rows], "s--", label="union bound")
    ax.set_xticks(list(xs))
    ax.set_xticklabels([f"n={r[0]}\np={r[1]}\n$\\sigma$={r[2]:.3g}" for r in rows],
                       fontsize=7)
    ax.set_ylabel("failure frequency")
    ax.set_title("Noisy-gradient concentration: observed vs bound")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)


def render_scaling(rows: list[list], fits: dict, out_png: str) -> None:
    # rows: axis,value,mean_emp_grad_sq,mean_pop_grad_sq,bound_value
    plt = _pyplot()
    by_axis = defaultdict(list)
    for r in rows:
        by_axis[r[0]].append(r)
    fig, axes = plt.subplots(1, max(1, len(by_axis)), figsize=(6 * len(by_axis), 4))
    if len(by_axis) == 1:
        axes = [axes]
    for ax, (axis, pts) in zip(axes, sorted(by_axis.items())):
        xs = np.array([p[1] for p in pts], dtype=float)
        ys = np.array([p[2] for p in pts], dtype=float)
        bound = np.array([p[4] for p in pts], dtype=float)
        ax.loglog(xs, ys, "o-", label="measured mean grad$^2$")
        ax.loglog(xs, bound * ys[0] / bound[0], "--",
                  label="bound shape (matched at first point)")
        fit = fits.get(axis)
        if fit is not None:
            ax.set_title(f"{axis}-sweep: slope {fit.exponent:.3f} "
                         f"(r$^2$={fit.r_squared:.3f})")
        ax.set_xlabel(axis)
        ax.set_ylabel("mean squared gradient norm")
        ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)


def render_lower_bound(rows: list[list], out_png: str) -> None:
    # rows: p,n,trial,D,D_over_sqrt_p_over_n
    plt = _pyplot()
    ratios = [r[4] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(ratios, bins=30)
    ax.set_xlabel(r"$D / \sqrt{p/n}$")
    ax.set_ylabel("trials")
    ax.set_title("Gradient deviation of the quadratic loss (all w)")
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)


def render_train_compare(rows: list[list], out_png: str) -> None:
    # rows: method,sigma,epoch,train_acc_mean,train_acc_std,test_acc_mean,test_acc_std,epsilon
    plt = _pyplot()
    sigmas = sorted({r[1] for r in rows})
    fig, axes = plt.subplots(1, len(sigmas), figsize=(5.5 * len(sigmas), 4),
                             squeeze=False)
    for ax, sigma in zip(axes[0], sigmas):
        for method in sorted({r[0] for r in rows}):
            pts = [r for r in rows if r[0] == method and r[1] == sigma]
            pts.sort(key=lambda r: r[2])
            epochs = [r[2] for r in pts]
            mean = np.array([r[3] for r in pts])
            std = np.array([r[4] for r in pts])
            ax.plot(epochs, mean, label=method)
            ax.fill_between(epochs, mean - std, mean + std, alpha=0.2)
        eps = next((r[7] for r in rows if r[1] == sigma), float("nan"))
        label = "non-private" if sigma == 0 else rf"$\epsilon\approx${eps:.3g}"
        ax.set_title(f"noise multiplier {sigma:g} ({label})")
        ax.set_xlabel("epoch")
        ax.set_ylabel("train accuracy")
        ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)


def render_bounds(rows: list[list], header: list[str], out_png: str) -> None:
    # rows from the bounds sweep: axis,value,population_bound,empirical_bound,...
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    by_axis = defaultdict(list)
    for r in rows:
        by_axis[r[0]].append(r)
    for axis, pts in sorted(by_axis.items()):
        xs = [p[1] for p in pts]
        ax.loglog(xs, [p[2] for p in pts], "o-", label=f"population bound vs {axis}")
        ax.loglog(xs, [p[3] for p in pts], "s--", label=f"empirical bound vs {axis}")
    ax.set_ylabel("bound value")
    ax.set_title("Convergence-bound calculators")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
