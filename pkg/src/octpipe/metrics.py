"""Image quality metrics: Pearson correlation, SNR in dB, Dice overlap."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConstantInput, DimensionMismatch

SNR_CAP_DB = 99.0


@dataclass
class MetricReport:
    values: list[float]
    labels: dict[int, str] = field(default_factory=dict)

    @property
    def mean(self):
        v = np.asarray(self.values, dtype=float)
        return float(np.nanmean(v)) if np.isfinite(v).any() else float("nan")

    @property
    def min(self):
        return float(np.nanmin(self.values))

    @property
    def max(self):
        return float(np.nanmax(self.values))


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise DimensionMismatch(f"shapes differ: {a.shape} vs {b.shape}")


def pearson_correlation(a, b):
    """Pearson coefficient over all pixels of two equally sized images.

    Returns 0.0 when exactly one input is constant; raises ConstantInput
    when both are.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    da = a.ravel() - a.mean()
    db = b.ravel() - b.mean()
    na = np.sqrt(da @ da)
    nb = np.sqrt(db @ db)
    if na == 0 and nb == 0:
        raise ConstantInput("correlation of two constant images is undefined")
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip((da @ db) / (na * nb), -1.0, 1.0))


def otsu_threshold(values, bins=256):
    """Otsu threshold on a 256-bin histogram spanning the value range."""
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(v.min()), float(v.max())
    if lo == hi:
        return lo
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centers)
    mean0 = m0 / np.maximum(w0, 1)
    mean1 = (m0[-1] - m0) / np.maximum(w1, 1)
    between = w0 * w1 * (mean0 - mean1) ** 2
    k = int(np.argmax(between[:-1]))
    # threshold sits on the upper edge of the last background bin
    return float(edges[k + 1])


def snr_db(img):
    """20*log10(foreground mean / background std) with an Otsu split.

    Foreground is every pixel at or above the Otsu threshold.  A zero
    background spread caps the result at 99 dB.
    """
    v = np.asarray(img, dtype=np.float64).ravel()
    t = otsu_threshold(v)
    fg = v[v >= t]
    bg = v[v < t]
    if bg.size < 2 or fg.size == 0:
        return SNR_CAP_DB
    sigma = bg.std()
    mu = fg.mean()
    if sigma == 0:
        return SNR_CAP_DB
    if mu <= 0:
        return -SNR_CAP_DB
    return float(np.clip(20.0 * np.log10(mu / sigma), -SNR_CAP_DB, SNR_CAP_DB))


def dice(a, b):
    """2|a and b| / (|a| + |b|); 1.0 when both masks are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    _check_shapes(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def correlation_report(frames, reference_index):
    ref = frames[reference_index]
    return MetricReport([pearson_correlation(f, ref) for f in frames])
