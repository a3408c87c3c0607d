"""Inner limiting membrane tracing and the slab quadrilateral."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi

from ..errors import AllGaps, NoSlab


@dataclass
class IlmTrace:
    depths: np.ndarray  # per column, NaN marks a gap

    @property
    def mean_height(self):
        return float(np.nanmean(self.depths))

    @property
    def valid(self):
        return np.isfinite(self.depths)


def _vertical_gradient(frame, sigma):
    f = ndi.gaussian_filter(np.asarray(frame, dtype=np.float64), sigma, mode="nearest")
    g = np.zeros_like(f)
    g[1:-1] = 0.5 * (f[2:] - f[:-2])
    return g


def _subpixel(g, rows, cols):
    """Log-parabola (local Gaussian) vertex offset, plain parabola as fallback."""
    h = g.shape[0]
    r = np.clip(rows, 1, h - 2)
    gm, g0, gp = np.abs(g[r - 1, cols]), np.abs(g[r, cols]), np.abs(g[r + 1, cols])
    delta = np.zeros(len(rows))
    pos = (gm > 0) & (g0 > 0) & (gp > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        lm, l0, lp = np.log(gm), np.log(g0), np.log(gp)
        den = lm - 2 * l0 + lp
        d_log = 0.5 * (lm - lp) / den
        den_p = gm - 2 * g0 + gp
        d_par = 0.5 * (gm - gp) / den_p
    use_log = pos & (den < 0)
    delta[use_log] = d_log[use_log]
    use_par = ~use_log & (den_p < 0)
    delta[use_par] = d_par[use_par]
    return r + np.clip(np.nan_to_num(delta), -0.5, 0.5)


def _first_strong_peak(g, floor, rel):
    """Row of the first local maximum of ``g`` reaching ``rel`` of its column maximum."""
    colmax = g.max(axis=0)
    thr = np.maximum(rel * colmax, floor)
    local = np.zeros_like(g, dtype=bool)
    local[1:-1] = (g[1:-1] >= g[:-2]) & (g[1:-1] >= g[2:])
    cand = local & (g >= thr[None, :]) & (colmax[None, :] >= floor)
    has = cand.any(axis=0)
    rows = np.argmax(cand, axis=0)
    return rows, has


def trace_ilm(frame, noise_floor=4.0, rel=0.5, sigma=(1.5, 2.0)):
    """Top-down search for the first sharp dark-to-bright edge in every column.

    ``noise_floor`` is the minimum smoothed gradient (gray levels per row)
    accepted as an edge; weaker columns become gaps.
    """
    g = _vertical_gradient(frame, sigma)
    rows, has = _first_strong_peak(g, noise_floor, rel)
    # constant columns carry no edge even if smoothing bleeds one in from neighbours
    raw = np.asarray(frame)
    has &= raw.max(axis=0) > raw.min(axis=0)
    cols = np.flatnonzero(has)
    if cols.size == 0:
        raise AllGaps("no column has a detectable ILM edge")
    depths = np.full(g.shape[1], np.nan)
    depths[cols] = _subpixel(g, rows[cols], cols)
    return IlmTrace(depths)


def trace_bottom(frame, noise_floor=4.0, rel=0.25, sigma=(1.5, 2.0)):
    """Deepest strong bright-to-dark edge per column (NaN where absent)."""
    g = -_vertical_gradient(frame, sigma)
    gf = g[::-1]
    rows, has = _first_strong_peak(gf, noise_floor, rel)
    depths = np.full(g.shape[1], np.nan)
    cols = np.flatnonzero(has)
    if cols.size:
        depths[cols] = (g.shape[0] - 1) - _subpixel(gf, rows[cols], cols)
    return depths


def robust_line(xs, ys, tol=3.0, rounds=5):
    """Least-squares line with iterative rejection of points far from the fit."""
    keep = np.ones(len(xs), dtype=bool)
    coef = np.array([0.0, np.median(ys)])
    for _ in range(rounds):
        if keep.sum() < 2:
            break
        coef = np.polyfit(xs[keep], ys[keep], 1)
        res = np.abs(np.polyval(coef, xs) - ys)
        scale = max(tol, 3.0 * 1.4826 * np.median(res[keep]))
        new = res <= scale
        if np.array_equal(new, keep):
            break
        keep = new
    return coef


def estimate_slab_quad(frame, min_columns=8):
    """Four corners (TL, TR, BR, BL) of the retinal slab as (x, y) pairs.

    The top edge follows the ILM trace and the bottom edge the deepest strong
    negative gradient; each edge is a robust line fit evaluated at the
    outermost columns where that trace exists.
    """
    try:
        top = trace_ilm(frame).depths
    except AllGaps as exc:
        raise NoSlab("no ILM edge") from exc
    bottom = trace_bottom(frame)
    bottom[np.isfinite(top) & np.isfinite(bottom) & (bottom <= top + 2)] = np.nan
    corners = []
    for trace in (top, bottom):
        cols = np.flatnonzero(np.isfinite(trace))
        if cols.size < min_columns:
            raise NoSlab("slab edge trace is empty")
        coef = robust_line(cols.astype(float), trace[cols])
        x0, x1 = float(cols[0]), float(cols[-1])
        corners.append(((x0, float(np.polyval(coef, x0))), (x1, float(np.polyval(coef, x1)))))
    (tl, tr), (bl, br) = corners
    return np.array([tl, tr, br, bl])
