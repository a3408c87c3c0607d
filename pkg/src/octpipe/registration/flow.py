"""Dense coarse-to-fine Lucas-Kanade flow and flow-driven warping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi

from ..core import to_uint8
from ..errors import DimensionMismatch
from .homography import sample_bilinear


@dataclass
class FlowField:
    u: np.ndarray  # horizontal displacement, px
    v: np.ndarray  # vertical displacement, px

    @property
    def shape(self):
        return self.u.shape

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape))


def _pyramid(img, levels):
    pyr = [img]
    for _ in range(levels - 1):
        if min(pyr[-1].shape) < 16:
            break
        pyr.append(ndi.gaussian_filter(pyr[-1], 1.0)[::2, ::2])
    return pyr


def _resize_flow(u, v, shape):
    """Bilinear resize of the flow to ``shape`` with displacements rescaled."""
    h0, w0 = u.shape
    h1, w1 = shape
    sy, sx = h0 / h1, w0 / w1
    yy = (np.arange(h1) + 0.5) * sy - 0.5
    xx = (np.arange(w1) + 0.5) * sx - 0.5
    gy, gx = np.meshgrid(yy, xx, indexing="ij")
    coords = [np.clip(gy, 0, h0 - 1), np.clip(gx, 0, w0 - 1)]
    return (ndi.map_coordinates(u, coords, order=1) / sx,
            ndi.map_coordinates(v, coords, order=1) / sy)


def _lk_level(ref, tgt, u, v, window, iterations, reg):
    h, w = ref.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(iterations):
        warped = ndi.map_coordinates(tgt, [yy + v, xx + u], order=1, mode="nearest")
        avg = 0.5 * (warped + ref)
        iy, ix = np.gradient(avg)
        it = warped - ref
        sxx = ndi.uniform_filter(ix * ix, window)
        syy = ndi.uniform_filter(iy * iy, window)
        sxy = ndi.uniform_filter(ix * iy, window)
        sxt = ndi.uniform_filter(ix * it, window)
        syt = ndi.uniform_filter(iy * it, window)
        damp = reg * (sxx + syy) + 1e-6
        sxx += damp
        syy += damp
        det = sxx * syy - sxy * sxy
        du = -(syy * sxt - sxy * syt) / det
        dv = -(sxx * syt - sxy * sxt) / det
        u = u + np.clip(du, -1.0, 1.0)
        v = v + np.clip(dv, -1.0, 1.0)
        if max(np.abs(du).max(), np.abs(dv).max()) < 1e-3:
            break
    return u, v


def _keep_inside(u, v):
    """Clamp displacements so every match lands inside the target image."""
    h, w = u.shape
    x = np.arange(w, dtype=np.float64)[None, :]
    y = np.arange(h, dtype=np.float64)[:, None]
    return np.clip(u, -x, w - 1 - x), np.clip(v, -y, h - 1 - y)


def optical_flow(reference, target, levels=3, window=15, iterations=10, reg=0.1, median=5):
    """Flow (u, v) such that ``reference(x, y) ~ target(x + u, y + v)``.

    ``reg`` damps each window's 2x2 system by that fraction of its gradient
    energy, which holds back the poorly constrained direction of edge-like
    windows (flat layers constrain v but barely u).
    """
    ref = np.asarray(reference, dtype=np.float64) / 255.0
    tgt = np.asarray(target, dtype=np.float64) / 255.0
    if ref.shape != tgt.shape:
        raise DimensionMismatch(f"shapes differ: {ref.shape} vs {tgt.shape}")
    pr, pt = _pyramid(ref, levels), _pyramid(tgt, levels)
    u = np.zeros(pr[-1].shape)
    v = np.zeros(pr[-1].shape)
    for lvl in range(len(pr) - 1, -1, -1):
        if u.shape != pr[lvl].shape:
            u, v = _resize_flow(u, v, pr[lvl].shape)
        u, v = _lk_level(pr[lvl], pt[lvl], u, v, window, iterations, reg)
        if median:
            u = ndi.median_filter(u, median, mode="nearest")
            v = ndi.median_filter(v, median, mode="nearest")
        u, v = _keep_inside(u, v)
    return FlowField(u, v)


def flow_coordinates(flow):
    h, w = flow.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return xx + flow.u, yy + flow.v


def warp_flow(img, flow):
    """Resample ``img`` at (x + u, y + v); samples outside the image are 0."""
    img = np.asarray(img)
    if img.shape != flow.shape:
        raise DimensionMismatch(f"image {img.shape} vs flow {flow.shape}")
    xs, ys = flow_coordinates(flow)
    out = sample_bilinear(img, xs, ys)
    return to_uint8(out) if img.dtype == np.uint8 else out
