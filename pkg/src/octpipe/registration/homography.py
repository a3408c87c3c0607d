"""Projective transforms: exact 4-point solve, normalized DLT, RANSAC and warping."""

from __future__ import annotations

import numpy as np
from scipy import ndimage as ndi

from ..core import to_uint8
from ..errors import Degenerate, InsufficientMatches

_BOUNDS_EPS = 1e-6


def normalize(h):
    h = np.asarray(h, dtype=np.float64)
    if abs(h[2, 2]) < 1e-15:
        raise Degenerate("homography has a zero bottom-right entry")
    return h / h[2, 2]


def check_invertible(h):
    if not np.all(np.isfinite(h)) or abs(np.linalg.det(h)) <= 1e-12:
        raise Degenerate("homography is singular")


def apply_homography(h, pts):
    """Map (N, 2) points through ``h``."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    p = pts @ h[:, :2].T + h[:, 2]
    return p[:, :2] / p[:, 2:3]


def translation(dx, dy):
    return np.array([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]])


def _similarity_normalizer(pts):
    """Hartley normalization: centroid to origin, mean distance sqrt(2)."""
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def _collinear(p, tol=1e-9):
    """True if any three of the points in ``p`` (..., 4, 2) are collinear."""
    p = np.asarray(p, dtype=np.float64)
    scale = np.abs(p).max(axis=(-1, -2), keepdims=True)[..., 0] + 1.0
    bad = np.zeros(p.shape[:-2], dtype=bool)
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        a = p[..., j, :] - p[..., i, :]
        b = p[..., k, :] - p[..., i, :]
        area = np.abs(a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0])
        bad |= area <= tol * scale[..., 0] ** 2
    return bad


def _four_point_systems(src, dst):
    """Stacked 8x8 systems A h = b (h33 fixed to 1) for (..., 4, 2) inputs."""
    x, y = src[..., 0], src[..., 1]
    u, v = dst[..., 0], dst[..., 1]
    zeros = np.zeros_like(x)
    ones = np.ones_like(x)
    rows_u = np.stack([x, y, ones, zeros, zeros, zeros, -u * x, -u * y], axis=-1)
    rows_v = np.stack([zeros, zeros, zeros, x, y, ones, -v * x, -v * y], axis=-1)
    a = np.concatenate([rows_u, rows_v], axis=-2)
    b = np.concatenate([u, v], axis=-1)
    return a, b


def homography_from_quad(src, dst):
    """Exact homography taking the four ``src`` corners onto ``dst``."""
    src = np.asarray(src, dtype=np.float64).reshape(4, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(4, 2)
    if _collinear(src) or _collinear(dst):
        raise Degenerate("three of the four anchor points are collinear")
    ts, td = _similarity_normalizer(src), _similarity_normalizer(dst)
    sn = apply_homography(ts, src)
    dn = apply_homography(td, dst)
    a, b = _four_point_systems(sn, dn)
    try:
        h = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise Degenerate(str(exc)) from exc
    hn = np.append(h, 1.0).reshape(3, 3)
    out = normalize(np.linalg.inv(td) @ hn @ ts)
    check_invertible(out)
    return out


def dlt(src, dst):
    """Least-squares homography from >= 4 correspondences (normalized DLT)."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) < 4:
        raise InsufficientMatches(f"need at least 4 correspondences, got {len(src)}")
    ts, td = _similarity_normalizer(src), _similarity_normalizer(dst)
    s = apply_homography(ts, src)
    d = apply_homography(td, dst)
    n = len(s)
    a = np.zeros((2 * n, 9))
    a[0::2, 0:2] = s
    a[0::2, 2] = 1
    a[0::2, 6:8] = -d[:, :1] * s
    a[0::2, 8] = -d[:, 0]
    a[1::2, 3:5] = s
    a[1::2, 5] = 1
    a[1::2, 6:8] = -d[:, 1:2] * s
    a[1::2, 8] = -d[:, 1]
    _, sv, vt = np.linalg.svd(a)
    if n == 4 and sv[-2] < 1e-12:
        raise Degenerate("correspondences do not determine a homography")
    hn = vt[-1].reshape(3, 3)
    return normalize(np.linalg.inv(td) @ hn @ ts)


def symmetric_transfer_error(h, src, dst):
    """Per-pair RMS of forward and backward reprojection distances."""
    hs = np.asarray(h, dtype=np.float64)[None]
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    return _transfer(hs, np.linalg.inv(hs), src, dst)[0]


def _transfer(hs, hinv, src, dst):
    src_h = np.column_stack([src, np.ones(len(src))])
    dst_h = np.column_stack([dst, np.ones(len(dst))])
    with np.errstate(divide="ignore", invalid="ignore"):
        fwd = np.einsum("kij,nj->kni", hs, src_h)
        fwd = fwd[..., :2] / fwd[..., 2:3]
        bwd = np.einsum("kij,nj->kni", hinv, dst_h)
        bwd = bwd[..., :2] / bwd[..., 2:3]
        e = ((fwd - dst) ** 2).sum(-1) + ((bwd - src) ** 2).sum(-1)
        err = np.sqrt(0.5 * e)
    return np.where(np.isfinite(err), err, np.inf)


def estimate_homography_ransac(src, dst, iterations=2000, inlier_tol_px=2.0, seed=0):
    """Robust homography from putative correspondences.

    Returns ``(H, inlier_mask)``.  All minimal samples are drawn up front from
    ``seed``, so the result does not depend on evaluation order.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    if n < 4:
        raise InsufficientMatches(f"need at least 4 correspondences, got {n}")

    rng = np.random.default_rng(seed)
    keys = rng.random((iterations, n))
    samples = np.argpartition(keys, 3, axis=1)[:, :4] if n > 4 else np.tile(np.arange(4), (iterations, 1))

    ts, td = _similarity_normalizer(src), _similarity_normalizer(dst)
    sn = apply_homography(ts, src)
    dn = apply_homography(td, dst)
    s4, d4 = sn[samples], dn[samples]
    ok = ~(_collinear(s4) | _collinear(d4))
    if not ok.any():
        raise Degenerate("every minimal sample is collinear")

    a, b = _four_point_systems(s4[ok], d4[ok])
    cond_ok = np.linalg.cond(a) < 1e10
    idx = np.flatnonzero(ok)[cond_ok]
    if idx.size == 0:
        raise Degenerate("no minimal sample gives a well-conditioned homography")
    hn = np.linalg.solve(a[cond_ok], b[cond_ok][..., None])[..., 0]
    hn = np.concatenate([hn, np.ones((len(hn), 1))], axis=1).reshape(-1, 3, 3)
    hs = np.linalg.inv(td)[None] @ hn @ ts[None]
    dets = np.linalg.det(hs)
    good = np.isfinite(dets) & (np.abs(dets) > 1e-12 * np.abs(hs[:, 2, 2]) ** 3)
    hs, idx = hs[good], idx[good]
    if len(hs) == 0:
        raise Degenerate("no invertible candidate model")

    err = _transfer(hs, np.linalg.inv(hs), src, dst)
    inl = err <= inlier_tol_px
    counts = inl.sum(axis=1)
    resid = np.where(inl, err, 0.0).sum(axis=1)
    # most inliers, then lowest inlier residual, then earliest sample
    order = np.lexsort((idx, resid, -counts))
    best = order[0]
    mask = inl[best]
    h = normalize(hs[best])

    for _ in range(5):
        if mask.sum() < 4:
            break
        try:
            refit = dlt(src[mask], dst[mask])
        except (Degenerate, np.linalg.LinAlgError):
            break
        new_mask = symmetric_transfer_error(refit, src, dst) <= inlier_tol_px
        if new_mask.sum() < mask.sum():
            break
        h = refit
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
    check_invertible(h)
    return h, mask


def sample_bilinear(img, xs, ys, fill=0.0):
    """Bilinear samples of ``img`` at (xs, ys); samples outside the grid get ``fill``."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    outside = ~np.isfinite(xs) | ~np.isfinite(ys)
    xs = np.where(outside, 0.0, xs)
    ys = np.where(outside, 0.0, ys)
    out = ndi.map_coordinates(img, [ys, xs], order=1, mode="nearest")
    outside |= (xs < -_BOUNDS_EPS) | (xs > w - 1 + _BOUNDS_EPS) | (ys < -_BOUNDS_EPS) | (ys > h - 1 + _BOUNDS_EPS)
    out[outside] = fill
    return out


def warp_perspective(img, h, output_shape=None):
    """Inverse-mapped bilinear warp; ``h`` maps input coordinates to output coordinates."""
    h = np.asarray(h, dtype=np.float64)
    check_invertible(h)
    hinv = np.linalg.inv(h)
    rows, cols = output_shape or img.shape
    yy, xx = np.mgrid[0:rows, 0:cols].astype(np.float64)
    den = hinv[2, 0] * xx + hinv[2, 1] * yy + hinv[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = (hinv[0, 0] * xx + hinv[0, 1] * yy + hinv[0, 2]) / den
        sy = (hinv[1, 0] * xx + hinv[1, 1] * yy + hinv[1, 2]) / den
    bad = ~np.isfinite(sx) | ~np.isfinite(sy) | (den <= 0)
    sx[bad] = -1e9
    sy[bad] = -1e9
    out = sample_bilinear(img, sx, sy)
    if np.asarray(img).dtype == np.uint8:
        return to_uint8(out)
    return out
