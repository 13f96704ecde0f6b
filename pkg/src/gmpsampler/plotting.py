"""PNG figures rendered from the exported plot CSVs."""

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _columns(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        return None
    header, body = rows[0], rows[1:]
    return {h: [float(r[i]) if r[i] != "" else float("nan") for r in body]
            for i, h in enumerate(header) if h != "coords"}


def _curve(plots, name, key, ylabel):
    data = _columns(os.path.join(plots, name))
    if data is None:
        return None
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(data["step"], data[key], alpha=0.4, label=key)
    ax.plot(data["step"], data[f"{key}_avg"], label="running average")
    ax.set_xlabel("training step")
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    out = os.path.join(plots, name.replace(".csv", ".png"))
    fig.savefig(out, dpi=110)
    plt.close(fig)
    return out


def _scatter(plots):
    data = _columns(os.path.join(plots, "scatter.csv"))
    if data is None or "x1" not in data:
        return None
    fig, ax = plt.subplots(figsize=(4.2, 4.2))
    ax.scatter(data["x0"], data["x1"], c=data["component"], s=3, cmap="tab10", alpha=0.6)
    ax.set_xlabel("x0")
    ax.set_ylabel("x1")
    fig.tight_layout()
    out = os.path.join(plots, "scatter.png")
    fig.savefig(out, dpi=110)
    plt.close(fig)
    return out


def _histogram(plots):
    data = _columns(os.path.join(plots, "magnetization_hist.csv"))
    if data is None:
        return None
    left, right = data["bin_left"], data["bin_right"]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(left, data["mass"], width=[b - a for a, b in zip(left, right)], align="edge")
    ax.set_xlabel("magnetization M")
    ax.set_ylabel("fraction of samples")
    fig.tight_layout()
    out = os.path.join(plots, "magnetization_hist.png")
    fig.savefig(out, dpi=110)
    plt.close(fig)
    return out


def render_figures(plots):
    """Render every figure whose data file is non-empty; returns {name: path}."""
    made = {
        "elbo_curve.png": _curve(plots, "elbo_curve.csv", "elbo", "ELBO"),
        "ess_curve.png": _curve(plots, "ess_curve.csv", "ess", "ESS"),
        "scatter.png": _scatter(plots),
        "magnetization_hist.png": _histogram(plots),
    }
    return {k: v for k, v in made.items() if v is not None}
