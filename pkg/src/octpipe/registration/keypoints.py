"""Keypoint detectors and descriptors written against numpy/scipy only.

Three detectors are provided:

* ``dog``        difference-of-Gaussians extrema with a 128-value gradient
                 orientation histogram descriptor (SIFT-style)
* ``fast_brief`` FAST segment test on the 16-pixel circle plus an unsteered
                 BRIEF bit string
* ``orb``        FAST, Harris ranking, intensity-centroid orientation and
                 BRIEF pairs rotated by that orientation
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage as ndi

from ..errors import BadParams, ImageTooSmall

MIN_SIZE = 32
ALGOS = ("dog", "fast_brief", "orb")

# Bresenham circle of radius 3, clockwise from 12 o'clock, as (dx, dy).
CIRCLE = np.array([
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
])

PATCH_RADIUS = 15


@dataclass
class Keypoint:
    x: float
    y: float
    score: float
    orientation: float = 0.0


@dataclass
class Features:
    """Keypoints with their descriptor rows (bool for binary, float for real)."""

    keypoints: list = field(default_factory=list)
    descriptors: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __len__(self):
        return len(self.keypoints)

    def __iter__(self):
        return iter(zip(self.keypoints, self.descriptors))

    @property
    def points(self):
        return np.array([(k.x, k.y) for k in self.keypoints], dtype=float).reshape(-1, 2)


# --- FAST ------------------------------------------------------------------

def _circle_stack(img):
    h, w = img.shape
    return np.stack([img[3 + dy:h - 3 + dy, 3 + dx:w - 3 + dx] for dx, dy in CIRCLE])


def _longest_circular_run(flags):
    """Longest run of True along axis 0, wrapping around."""
    n = flags.shape[0]
    ext = np.concatenate([flags, flags[:-1]])
    run = np.zeros(flags.shape[1:], dtype=np.int16)
    best = np.zeros_like(run)
    for k in range(ext.shape[0]):
        run = (run + 1) * ext[k]
        np.maximum(best, run, out=best)
    return np.minimum(best, n)


def fast_segment_test(img, threshold=20, arc=12):
    """Boolean map of pixels passing the FAST segment test.

    A pixel is a corner when ``arc`` contiguous circle pixels are all
    brighter than ``I_p + threshold`` or all darker than ``I_p - threshold``.
    The 3-pixel border is never a corner.
    """
    img = np.asarray(img, dtype=np.int16)
    h, w = img.shape
    out = np.zeros((h, w), dtype=bool)
    if h < 7 or w < 7:
        return out
    c = _circle_stack(img)
    p = img[3:h - 3, 3:w - 3]
    bright = _longest_circular_run(c > p + threshold) >= arc
    dark = _longest_circular_run(c < p - threshold) >= arc
    out[3:h - 3, 3:w - 3] = bright | dark
    return out


def fast_score(img, threshold=20):
    """Sum of circle differences beyond the threshold (larger = stronger corner)."""
    img = np.asarray(img, dtype=np.int32)
    h, w = img.shape
    score = np.zeros((h, w), dtype=np.float64)
    if h < 7 or w < 7:
        return score
    c = _circle_stack(img)
    p = img[3:h - 3, 3:w - 3]
    sb = np.maximum(c - p - threshold, 0).sum(axis=0)
    sd = np.maximum(p - c - threshold, 0).sum(axis=0)
    score[3:h - 3, 3:w - 3] = np.maximum(sb, sd)
    return score


def fast_corners(img, threshold=20, arc=12, nonmax=True):
    """(rows, cols, scores) of FAST corners, optionally after 3x3 non-max suppression."""
    mask = fast_segment_test(img, threshold, arc)
    score = np.where(mask, fast_score(img, threshold), 0.0)
    if nonmax:
        mask &= score >= ndi.maximum_filter(score, size=3, mode="constant")
    rows, cols = np.nonzero(mask)
    return rows, cols, score[rows, cols]


def harris_response(img, k=0.04, sigma=1.5):
    f = np.asarray(img, dtype=np.float64)
    gx = ndi.sobel(f, axis=1)
    gy = ndi.sobel(f, axis=0)
    sxx = ndi.gaussian_filter(gx * gx, sigma)
    syy = ndi.gaussian_filter(gy * gy, sigma)
    sxy = ndi.gaussian_filter(gx * gy, sigma)
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


# --- BRIEF -----------------------------------------------------------------

def brief_pattern(bits=256, seed=0):
    """Fixed sampling pairs inside the patch circle, shape (bits, 2, 2) as (dx, dy)."""
    if bits not in (128, 256, 512):
        raise BadParams("BRIEF length must be 128, 256 or 512 bits")
    rng = np.random.default_rng(seed)
    sigma = (2 * PATCH_RADIUS + 1) / 5.0
    pts = []
    while len(pts) < 2 * bits:
        p = rng.normal(0.0, sigma, size=2)
        if p @ p <= (PATCH_RADIUS - 1) ** 2:
            pts.append(p)
    return np.array(pts).reshape(bits, 2, 2)


def brief_descriptors(smoothed, xs, ys, angles, pattern):
    """Bit strings comparing smoothed intensities at (rotated) pair locations."""
    cos, sin = np.cos(angles)[:, None], np.sin(angles)[:, None]
    values = []
    for end in (0, 1):
        dx, dy = pattern[:, end, 0][None, :], pattern[:, end, 1][None, :]
        px = xs[:, None] + cos * dx - sin * dy
        py = ys[:, None] + sin * dx + cos * dy
        values.append(ndi.map_coordinates(smoothed, [py.ravel(), px.ravel()], order=1,
                                          mode="nearest").reshape(px.shape))
    return values[0] > values[1]


def centroid_orientation(img, xs, ys, radius=PATCH_RADIUS):
    """Angle from the keypoint to the intensity centroid of its circular patch."""
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    disk = (xx ** 2 + yy ** 2) <= radius ** 2
    dx, dy = xx[disk], yy[disk]
    xi = np.round(xs).astype(int)
    yi = np.round(ys).astype(int)
    vals = np.asarray(img, dtype=np.float64)[yi[:, None] + dy[None, :], xi[:, None] + dx[None, :]]
    m10 = (vals * dx).sum(axis=1)
    m01 = (vals * dy).sum(axis=1)
    return np.arctan2(m01, m10)


def _binary_features(img, threshold, arc, bits, max_keypoints, oriented, rank_by, pattern_seed):
    img = np.asarray(img)
    h, w = img.shape
    rows, cols, scores = fast_corners(img, threshold, arc, nonmax=True)
    border = PATCH_RADIUS + 2
    keep = (rows >= border) & (rows < h - border) & (cols >= border) & (cols < w - border)
    rows, cols, scores = rows[keep], cols[keep], scores[keep]
    if rank_by == "harris":
        scores = harris_response(img)[rows, cols]
    order = np.lexsort((cols, rows, -scores))[:max_keypoints]
    rows, cols, scores = rows[order], cols[order], scores[order]
    xs, ys = cols.astype(float), rows.astype(float)
    if len(xs) == 0:
        return Features([], np.zeros((0, bits), dtype=bool))
    angles = centroid_orientation(img, xs, ys) if oriented else np.zeros(len(xs))
    smoothed = ndi.gaussian_filter(np.asarray(img, dtype=np.float64), 2.0)
    desc = brief_descriptors(smoothed, xs, ys, angles, brief_pattern(bits, pattern_seed))
    kps = [Keypoint(float(x), float(y), float(s), float(a)) for x, y, s, a in zip(xs, ys, scores, angles)]
    return Features(kps, desc)


# --- DoG -------------------------------------------------------------------

def _dog_octave(base, scales, sigma0):
    k = 2.0 ** (1.0 / scales)
    gauss = [base]
    prev_sigma = sigma0
    for i in range(1, scales + 3):
        sigma = sigma0 * k ** i
        gauss.append(ndi.gaussian_filter(gauss[-1], np.sqrt(sigma ** 2 - prev_sigma ** 2)))
        prev_sigma = sigma
    gauss = np.stack(gauss)
    return gauss, gauss[1:] - gauss[:-1]


def _dog_descriptors(gauss_img, xs, ys, sigmas):
    """Orientation assignment and 4x4x8 gradient histograms for one scale image."""
    gy, gx = np.gradient(gauss_img)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)

    # dominant orientation from a 36-bin histogram in a Gaussian window
    orientations = np.empty(len(xs))
    for i, (x, y, s) in enumerate(zip(xs, ys, sigmas)):
        r = int(round(3 * 1.5 * s))
        y0, y1 = max(int(y) - r, 0), min(int(y) + r + 1, gauss_img.shape[0])
        x0, x1 = max(int(x) - r, 0), min(int(x) + r + 1, gauss_img.shape[1])
        yy, xx = np.mgrid[y0:y1, x0:x1]
        wgt = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * (1.5 * s) ** 2)) * mag[y0:y1, x0:x1]
        bins = ((ang[y0:y1, x0:x1] + np.pi) / (2 * np.pi) * 36).astype(int) % 36
        hist = np.bincount(bins.ravel(), wgt.ravel(), minlength=36)
        hist = np.convolve(np.concatenate([hist[-1:], hist, hist[:1]]), [1 / 3] * 3, "valid")
        b = int(np.argmax(hist))
        left, mid, right = hist[b - 1], hist[b], hist[(b + 1) % 36]
        den = left - 2 * mid + right
        off = 0.5 * (left - right) / den if den < 0 else 0.0
        orientations[i] = (b + 0.5 + off) / 36 * 2 * np.pi - np.pi

    # 16x16 sample grid, rotated with the keypoint, 4x4 cells of 8 bins
    g = (np.arange(16) - 7.5) / 4.0  # cell units, -1.875 .. 1.875
    cu, cv = np.meshgrid(g, g)
    cell = (np.floor(cv + 2).astype(int) * 4 + np.floor(cu + 2).astype(int)).ravel()
    gauss_w = np.exp(-(cu ** 2 + cv ** 2) / (2 * 2.0 ** 2)).ravel()
    desc = np.zeros((len(xs), 128))
    for i, (x, y, s, th) in enumerate(zip(xs, ys, sigmas, orientations)):
        step = 3.0 * s
        c, sn = np.cos(th), np.sin(th)
        px = x + step * (c * cu - sn * cv)
        py = y + step * (sn * cu + c * cv)
        coords = [py.ravel(), px.ravel()]
        m = ndi.map_coordinates(mag, coords, order=1, mode="nearest")
        a = ndi.map_coordinates(np.cos(ang), coords, order=1, mode="nearest")
        b = ndi.map_coordinates(np.sin(ang), coords, order=1, mode="nearest")
        rel = (np.arctan2(b, a) - th) % (2 * np.pi)
        obin = (rel / (2 * np.pi) * 8).astype(int) % 8
        hist = np.bincount(cell * 8 + obin, m * gauss_w, minlength=128)
        n = np.linalg.norm(hist)
        if n > 0:
            hist = np.minimum(hist / n, 0.2)
            hist /= max(np.linalg.norm(hist), 1e-12)
        desc[i] = hist
    return orientations, desc


def _dog_features(img, octaves=3, scales=3, sigma0=1.6, contrast=0.02, edge_ratio=10.0,
                  max_keypoints=500):
    base = np.asarray(img, dtype=np.float64) / 255.0
    base = ndi.gaussian_filter(base, np.sqrt(sigma0 ** 2 - 0.5 ** 2))
    found = []  # (abs response, x, y, sigma_px, octave, level)
    pyramid = []
    for o in range(octaves):
        if min(base.shape) < 16:
            break
        gauss, dog = _dog_octave(base, scales, sigma0)
        pyramid.append(gauss)
        mx = ndi.maximum_filter(dog, size=3, mode="nearest")
        mn = ndi.minimum_filter(dog, size=3, mode="nearest")
        ext = ((dog == mx) | (dog == mn)) & (np.abs(dog) > contrast * 0.5)
        ext[0] = ext[-1] = False
        ext[:, :5] = ext[:, -5:] = False
        ext[:, :, :5] = ext[:, :, -5:] = False
        lv, ys, xs = np.nonzero(ext)
        if len(xs):
            d = dog[lv]
            dxx = d[np.arange(len(xs)), ys, xs + 1] + d[np.arange(len(xs)), ys, xs - 1] - 2 * dog[lv, ys, xs]
            dyy = d[np.arange(len(xs)), ys + 1, xs] + d[np.arange(len(xs)), ys - 1, xs] - 2 * dog[lv, ys, xs]
            dxy = 0.25 * (d[np.arange(len(xs)), ys + 1, xs + 1] - d[np.arange(len(xs)), ys + 1, xs - 1]
                          - d[np.arange(len(xs)), ys - 1, xs + 1] + d[np.arange(len(xs)), ys - 1, xs - 1])
            tr, det = dxx + dyy, dxx * dyy - dxy ** 2
            ok = (det > 0) & (tr ** 2 * edge_ratio < (edge_ratio + 1) ** 2 * det)
            resp = np.abs(dog[lv, ys, xs])
            ok &= resp > contrast
            for l, y, x, r in zip(lv[ok], ys[ok], xs[ok], resp[ok]):
                found.append((r, x, y, sigma0 * 2 ** (l / scales), o, l))
        base = gauss[scales][::2, ::2]

    if not found:
        return Features([], np.zeros((0, 128)))
    found.sort(key=lambda t: (-t[0], t[4], t[5], t[2], t[1]))
    found = found[:max_keypoints]

    kps, descs = [], []
    for o in range(len(pyramid)):
        sel = [f for f in found if f[4] == o]
        for level in sorted({f[5] for f in sel}):
            group = [f for f in sel if f[5] == level]
            xs = np.array([f[1] for f in group], dtype=float)
            ys = np.array([f[2] for f in group], dtype=float)
            sig = np.array([f[3] for f in group])
            th, d = _dog_descriptors(pyramid[o][level], xs, ys, sig)
            scale = 2.0 ** o
            for f, t, row in zip(group, th, d):
                kps.append(Keypoint(f[1] * scale, f[2] * scale, float(f[0]), float(t)))
                descs.append(row)
    order = sorted(range(len(kps)), key=lambda i: (-kps[i].score, kps[i].y, kps[i].x))
    return Features([kps[i] for i in order], np.array([descs[i] for i in order]))


def detect_keypoints(img, algo="orb", **params):
    """Detect keypoints and compute descriptors with one of ``dog``, ``fast_brief``, ``orb``."""
    img = np.asarray(img)
    if img.ndim != 2 or min(img.shape) < MIN_SIZE:
        raise ImageTooSmall(f"keypoint detection needs at least {MIN_SIZE}x{MIN_SIZE} pixels")
    if algo == "dog":
        return _dog_features(img, **params)
    if algo == "fast_brief":
        opts = dict(threshold=20, arc=12, bits=256, max_keypoints=500, oriented=False,
                    rank_by="fast", pattern_seed=0)
        opts.update(params)
        return _binary_features(img, **opts)
    if algo == "orb":
        opts = dict(threshold=20, arc=9, bits=256, max_keypoints=500, oriented=True,
                    rank_by="harris", pattern_seed=0)
        opts.update(params)
        return _binary_features(img, **opts)
    raise BadParams(f"unknown keypoint algorithm {algo!r}")
