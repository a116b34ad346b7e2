"""Deterministic SVG figures for an evaluation report."""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {
    "svg.hashsalt": "evlab",
    "svg.fonttype": "none",
    "font.family": "DejaVu Sans",
    "figure.dpi": 100,
}


def _svg(fig, description=""):
    buf = io.StringIO()
    meta = {"Date": None, "Creator": None}
    if description:
        meta["Description"] = description
    fig.savefig(buf, format="svg", metadata=meta, bbox_inches="tight")
    plt.close(fig)
    return buf.getvalue()


def detection_rates(report):
    attacks = report.attacks
    models = sorted({a["model"] for a in attacks})
    strategies = sorted({a["strategy"] for a in attacks})
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / (len(strategies) + 1)
    x = np.arange(len(models))
    seed = [report.seed_rates[m]["rate"] for m in models]
    ax.bar(x, seed, width, label="seed")
    for i, s in enumerate(strategies):
        vals = [next(a["adversarial_rate"] for a in attacks if a["model"] == m and a["strategy"] == s) for m in models]
        ax.bar(x + (i + 1) * width, vals, width, label=s)
    ax.set_xticks(x + width * len(strategies) / 2, models)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("detection rate")
    ax.legend(fontsize=8)
    return fig


def rate_curve(report):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    N = [p["N"] for p in report.curve]
    r = [p["rate"] for p in report.curve]
    s = [p["std"] for p in report.curve]
    ax.errorbar(N, r, yerr=s, marker="o", capsize=3)
    ax.set_xlabel("manipulated features N")
    ax.set_ylabel("detection rate")
    ax.set_ylim(-0.02, 1.05)
    return fig


def transfer_heatmap(tm):
    rates = np.asarray(tm.rates)
    fig, ax = plt.subplots(figsize=(1.6 * len(tm.names) + 2, 1.3 * len(tm.names) + 1.2))
    im = ax.imshow(rates, vmin=0, vmax=1, cmap="viridis")
    for i in range(rates.shape[0]):
        for j in range(rates.shape[1]):
            color = "white" if rates[i, j] < 0.5 else "black"
            ax.text(j, i, f"{rates[i, j]:.2f}\n({tm.cosine[i][j]:.2f})", ha="center", va="center", color=color, fontsize=8)
    ax.set_xticks(range(len(tm.names)), tm.names, rotation=30)
    ax.set_yticks(range(len(tm.names)), tm.names)
    ax.set_xlabel("target")
    ax.set_ylabel("generator")
    fig.colorbar(im, ax=ax, label="detection rate")
    return fig


def drop_hist(h):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    items = sorted(h.bins.items())
    ax.bar([b for b, _ in items], [c for _, c in items], width=h.bin_width * 0.8)
    ax.set_xlabel("detection rate drop (pp, bin upper edge)")
    ax.set_ylabel("detectors")
    return fig


def case_traces(report):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for tr in report.case_traces:
        ax.plot([p["N"] for p in tr["points"]], [p["probability"] for p in tr["points"]], marker=".", label=tr["sample_id"])
    ax.axhline(0.5, color="grey", linestyle="--", linewidth=0.8)
    ax.set_xlabel("N")
    ax.set_ylabel("probability (malicious)")
    ax.legend(fontsize=7)
    return fig


def hardening(report):
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    base = [r for r in report.hardening if r["ranking"] == "base"]
    for rname, style in (("amm", "-"), ("sage", "--")):
        rows = sorted((r for r in report.hardening if r["ranking"] == rname), key=lambda r: r["k"])
        rows = base + rows
        k = [r["k"] for r in rows]
        ax.plot(k, [r["seed_rate"] for r in rows], style, marker="o", label=f"{rname} seed")
        ax.plot(k, [r["adversarial_rate"] for r in rows], style, marker="s", label=f"{rname} adversarial")
    ax.set_xlabel("excluded features k")
    ax.set_ylabel("detection rate")
    ax.set_ylim(-0.02, 1.05)
    ax.legend(fontsize=7)
    return fig


def render_all(report):
    """SVG text per file name for every non-empty section of the report."""
    desc = f"config_hash {report.config_digest}" if report.config_digest else ""
    jobs = []
    if report.attacks:
        jobs.append(("detection_rates.svg", detection_rates, report))
    if report.curve:
        jobs.append(("rate_vs_n.svg", rate_curve, report))
    if report.transfer is not None:
        jobs.append(("transfer_heatmap.svg", transfer_heatmap, report.transfer))
    if report.drop_histogram is not None and report.drop_histogram.bins:
        jobs.append(("drop_histogram.svg", drop_hist, report.drop_histogram))
    if report.case_traces:
        jobs.append(("case_traces.svg", case_traces, report))
    if report.hardening:
        jobs.append(("hardening.svg", hardening, report))
    out = {}
    with plt.rc_context(_RC):
        for name, fn, data in jobs:
            out[name] = _svg(fn(data), desc)
    return out
