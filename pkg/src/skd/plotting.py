"""Figure output for comparison tables and annotation sweeps.

Figures are written as SVG with the plotted numbers embedded as a CSV block
inside an XML comment, so a figure can be diffed and re-read without the run
directories it came from.
"""

from __future__ import annotations

import io
import os
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 4.0),
    "font.size": 10,
    "axes.labelsize": 11,
    "axes.titlesize": 11,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 9,
    "legend.frameon": False,
    "lines.linewidth": 1.6,
    "lines.markersize": 5,
    "svg.hashsalt": "skd",
    "svg.fonttype": "none",
}

SETTING_COLORS = {
    "baseline": "#4d4d4d",
    "kd": "#8da0cb",
    "kd_weak": "#66c2a5",
    "selective": "#fc8d62",
    "selective_weak": "#e78ac3",
}

SETTING_LABELS = {
    "baseline": "Baseline",
    "kd": "KD",
    "kd_weak": "KD*",
    "selective": "SelectiveKD",
    "selective_weak": "SelectiveKD*",
}


def _data_comment(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(str(v) for v in row) + "\n")
    # "--" is not allowed inside XML comments
    return "<!-- data\n" + buf.getvalue().replace("--", "- -") + "-->\n"


def save_svg(fig, path: str | os.PathLike, header, rows) -> Path:
    path = Path(path)
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    svg = buf.getvalue()
    cut = svg.index("<svg")
    path.write_text(svg[:cut] + _data_comment(header, rows) + svg[cut:], encoding="utf-8")
    return path


def read_svg_data(path: str | os.PathLike) -> list[dict]:
    text = Path(path).read_text(encoding="utf-8")
    start = text.index("<!-- data\n") + len("<!-- data\n")
    block = text[start:text.index("-->", start)]
    lines = block.strip().splitlines()
    header = lines[0].split(",")
    return [dict(zip(header, line.split(","))) for line in lines[1:]]


def plot_sweep(summary: Sequence[dict], path: str | os.PathLike) -> Path:
    """AUC (seed mean, min/max band) against the annotated fraction.

    ``summary`` rows: setting, fraction, mean_auc, min_auc, max_auc, n_seeds.
    A dotted line marks the baseline at the largest fraction.
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        settings = [s for s in SETTING_LABELS if any(r["setting"] == s for r in summary)]
        for s in settings:
            rows = sorted((r for r in summary if r["setting"] == s), key=lambda r: r["fraction"])
            x = [100 * r["fraction"] for r in rows]
            ax.plot(x, [r["mean_auc"] for r in rows], marker="o",
                    color=SETTING_COLORS[s], label=SETTING_LABELS[s])
            ax.fill_between(x, [r["min_auc"] for r in rows], [r["max_auc"] for r in rows],
                            color=SETTING_COLORS[s], alpha=0.12, linewidth=0)
        base = [r for r in summary if r["setting"] == "baseline"]
        if base:
            top = max(base, key=lambda r: r["fraction"])
            ax.axhline(top["mean_auc"], color=SETTING_COLORS["baseline"], linestyle=":",
                       linewidth=1.0)
        ax.set_xlabel("Annotated exams (%)")
        ax.set_ylabel("Test ROC AUC")
        ax.legend(loc="lower right")
        fig.tight_layout()
    header = ["setting", "fraction", "mean_auc", "min_auc", "max_auc", "n_seeds"]
    return save_svg(fig, path, header, [[r[h] for h in header] for r in summary])


def plot_comparison(rows: Sequence[dict], domains: Sequence[str],
                    path: str | os.PathLike) -> Path:
    """Grouped AUC bars with CI whiskers, one group per domain.

    ``rows``: run, setting, and per-domain ``auc``/``ci_low``/``ci_high``
    under ``rows[i]["domains"][d]`` (None for undefined domains).
    """
    n = max(len(rows), 1)
    width = 0.8 / n
    flat = []
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(domains), 4.0))
        for i, row in enumerate(rows):
            xs, ys, lo, hi = [], [], [], []
            for j, d in enumerate(domains):
                m = row["domains"].get(d)
                if m is None:
                    continue
                xs.append(j - 0.4 + width * (i + 0.5))
                ys.append(m["auc"])
                lo.append(m["auc"] - m["ci_low"])
                hi.append(m["ci_high"] - m["auc"])
                flat.append([row["run"], d, m["auc"], m["ci_low"], m["ci_high"]])
            color = SETTING_COLORS.get(row.get("setting"), None)
            ax.bar(xs, ys, width=width * 0.9, yerr=[lo, hi], capsize=2,
                   color=color, label=row["run"])
        ax.set_xticks(range(len(domains)), list(domains))
        ax.set_ylim(0.0, 1.0)
        ax.set_ylabel("ROC AUC (95% CI)")
        ax.legend(loc="lower right", fontsize=8)
        fig.tight_layout()
    return save_svg(fig, path, ["run", "domain", "auc", "ci_low", "ci_high"], flat)
