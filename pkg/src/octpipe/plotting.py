"""Report figures rendered headless with matplotlib."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_registration(rows, path, baseline=None):
    """Per-frame correlation with the reference, optionally against the unregistered values."""
    idx = [r["frame_index"] for r in rows]
    corr = [r["correlation"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    if baseline is not None:
        ax.plot(idx, baseline, color="0.6", lw=1, label="unregistered")
    ax.plot(idx, corr, color="tab:blue", lw=1.5, label=rows[0]["method"] if rows else "registered")
    failed = [r["frame_index"] for r in rows if str(r["status"]).startswith("failed")]
    if failed:
        ax.scatter(failed, [corr[idx.index(i)] for i in failed], color="tab:red", s=12,
                   label="failed", zorder=3)
    ax.set_xlabel("frame")
    ax.set_ylabel("correlation with reference")
    ax.set_ylim(min(0.0, np.nanmin(corr) if corr else 0.0), 1.02)
    ax.legend(loc="lower right", fontsize=8)
    _save(fig, path)


def plot_alpha_trace(trace, path, alpha_star=None):
    a = [t["alpha"] for t in trace]
    j = [t["J"] for t in trace]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(a, j, marker=".", lw=1)
    if alpha_star is not None:
        ax.axvline(alpha_star, color="tab:red", ls="--", lw=1)
    ax.set_xlabel("alpha")
    ax.set_ylabel("objective J")
    _save(fig, path)


def plot_histograms(before, after, path):
    """Gray-level histograms of two HistogramStats on a log count axis."""
    levels = np.arange(256)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.step(levels, np.maximum(before.histogram, 1), where="mid", lw=1, label="before")
    ax.step(levels, np.maximum(after.histogram, 1), where="mid", lw=1, label="after")
    ax.set_yscale("log")
    ax.set_xlabel("gray level")
    ax.set_ylabel("pixels")
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_thickness(report, path):
    """Mean layer thickness in microns with std error bars and any reference values."""
    layers = report.layers
    names = [l.name for l in layers]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(x - 0.2, [l.mean_um for l in layers], 0.4,
           yerr=[l.std_px * report.axial_res_um_per_px for l in layers], label="measured")
    ref = [l.reference_um if l.reference_um is not None else np.nan for l in layers]
    if np.isfinite(ref).any():
        ax.bar(x + 0.2, ref, 0.4, label="reference")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("thickness (um)")
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_enface(img, path, regions=None):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.imshow(img, cmap="gray", aspect="auto", vmin=0, vmax=255)
    for r in regions or []:
        ax.plot([r.col_start, r.col_end - 1], [r.frame_index] * 2, color="tab:red", lw=1)
    ax.set_xlabel("column")
    ax.set_ylabel("frame")
    _save(fig, path)
