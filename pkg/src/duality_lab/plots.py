"""Figure rendering for run outputs.

Reads the delimited tables a run emitted and writes PNG files next to
them.  Plotting never happens inside the run itself; this is a separate,
optional report path.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

FIG_SIZE = (6.4, 4.0)


def _read_csv(path: str) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return [row for row in csv.DictReader(fh)]


def plot_continuity(csv_path: str, out_png: str) -> bool:
    rows = _read_csv(csv_path)
    if not rows:
        return False
    by_t: dict = {}
    for r in rows:
        by_t.setdefault(float(r["t"]), []).append(
            (float(r["eps"]), float(r["value"]), float(r["se"])))
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    for t, pts in sorted(by_t.items()):
        pts.sort()
        eps = [p[0] for p in pts]
        val = [p[1] for p in pts]
        se = [p[2] for p in pts]
        ax.errorbar(eps, val, yerr=se, marker="o", capsize=3, label=f"t = {t:g}")
    ax.set_xlabel("perturbation size")
    ax.set_ylabel("indirect utility")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return True


def plot_convergence(csv_path: str, out_png: str) -> bool:
    rows = _read_csv(csv_path)
    rows = [r for r in rows if r["mean_error"] not in ("", "nan")]
    if not rows:
        return False
    dts = [float(r["dt"]) for r in rows]
    errs = [float(r["mean_error"]) for r in rows]
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    ax.loglog(dts, errs, "o-", label="decomposition error")
    ref = [errs[0] * dt / dts[0] for dt in dts]
    ax.loglog(dts, ref, "k--", alpha=0.6, label="first order")
    ax.set_xlabel("step size")
    ax.set_ylabel("mean pathwise error")
    ax.legend()
    ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return True


def plot_sensitivity(csv_path: str, out_png: str) -> bool:
    rows = _read_csv(csv_path)
    if not rows:
        return False
    by_t: dict = {}
    for r in rows:
        by_t.setdefault(float(r["t"]), []).append(
            (float(r["eps"]), float(r["value"]), float(r["se"])))
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    for t, pts in sorted(by_t.items()):
        pts.sort()
        ax.errorbar([p[0] for p in pts], [p[1] for p in pts],
                    yerr=[p[2] for p in pts], marker="s", capsize=3,
                    label=f"t = {t:g}")
    ax.set_xlabel("perturbation size")
    ax.set_ylabel("indirect utility (finite-difference ladder)")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return True


def render_report(out_dir: str) -> list[str]:
    """Render every available figure for a run directory; returns the paths
    written."""
    written = []
    jobs = [
        ("continuity.csv", "continuity.png", plot_continuity),
        ("convergence.csv", "convergence.png", plot_convergence),
        ("sensitivity.csv", "sensitivity.png", plot_sensitivity),
    ]
    for src, dst, fn in jobs:
        src_path = os.path.join(out_dir, src)
        if not os.path.exists(src_path):
            continue
        dst_path = os.path.join(out_dir, dst)
        if fn(src_path, dst_path):
            written.append(dst_path)
    return written
