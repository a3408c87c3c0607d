import numpy as np
import pytest
from scipy import ndimage as ndi

from octpipe.errors import ImageTooSmall
from octpipe.registration.homography import warp_perspective
from octpipe.registration.keypoints import CIRCLE, brief_pattern, detect_keypoints, fast_corners, fast_segment_test
from octpipe.registration.matching import match_descriptors


def brute_force_fast(img, t, n):
    """Per-pixel contiguous-arc check written independently of the vectorised detector."""
    img = img.astype(int)
    h, w = img.shape
    out = set()
    for y in range(3, h - 3):
        for x in range(3, w - 3):
            p = img[y, x]
            ring = [img[y + dy, x + dx] for dx, dy in CIRCLE]
            for sign in (1, -1):
                ok = [(v - p) * sign > t for v in ring]
                run = best = 0
                for v in ok + ok:
                    run = run + 1 if v else 0
                    best = max(best, run)
                if min(best, 16) >= n:
                    out.add((y, x))
                    break
    return out


def test_circle_is_bresenham_radius_3():
    assert len(CIRCLE) == 16 and len({tuple(c) for c in CIRCLE}) == 16
    assert np.allclose(np.hypot(*CIRCLE.T), 3, atol=0.2)


@pytest.mark.parametrize("seed", range(5))
def test_fast_matches_oracle_small(seed):
    img = np.random.default_rng(seed).integers(0, 256, (24, 24)).astype(np.uint8)
    got = {tuple(p) for p in np.argwhere(fast_segment_test(img, 30, 9))}
    assert got == brute_force_fast(img, 30, 9)


def _nearest_detection(img, t, n, corner):
    rows, cols, _ = fast_corners(img, threshold=t, arc=n)
    got = {(int(r), int(c)) for r, c in zip(rows, cols)}
    assert got <= brute_force_fast(img, t, n)
    return np.hypot(rows - corner[0], cols - corner[1]).min() if len(rows) else np.inf


def test_fast_l_corner():
    img = np.zeros((64, 64), np.uint8)
    img[20:, 20:] = 200
    # a right-angle step corner covers at most 11 contiguous circle pixels
    assert brute_force_fast(img, 10, 12) == set()
    assert not fast_segment_test(img, 10, 12).any()
    assert _nearest_detection(img, 10, 9, (20, 20)) <= 1.0


def test_fast12_acute_corner():
    yy, xx = np.mgrid[0:64, 0:64]
    img = ((yy >= 20) & (xx - 20 >= 1.5 * (yy - 20))).astype(np.uint8) * 200
    assert _nearest_detection(img, 10, 12, (20, 20)) <= 1.0


def test_uniform_image_has_no_keypoints():
    img = np.full((64, 64), 90, np.uint8)
    for algo in ("dog", "fast_brief", "orb"):
        assert len(detect_keypoints(img, algo)) == 0


def test_too_small():
    with pytest.raises(ImageTooSmall):
        detect_keypoints(np.zeros((31, 64), np.uint8))


def test_brief_lengths():
    for bits in (128, 256, 512):
        p = brief_pattern(bits)
        assert p.shape == (bits, 2, 2) and np.all(np.hypot(p[..., 0], p[..., 1]) < 15)


def _blobs(seed=0, size=192):
    r = np.random.default_rng(seed)
    img = ndi.gaussian_filter(r.normal(0, 1, (size, size)), 3)
    img = (img - img.min()) / np.ptp(img) * 255
    return img.astype(np.uint8)


def test_orb_orientation_follows_rotation():
    img = _blobs(1, 256)
    th = np.deg2rad(15)
    c = (256 - 1) / 2
    rot = np.array([[np.cos(th), -np.sin(th), 0], [np.sin(th), np.cos(th), 0], [0, 0, 1]])
    t = np.array([[1, 0, c], [0, 1, c], [0, 0, 1.0]])
    h = t @ rot @ np.linalg.inv(t)
    img2 = warp_perspective(img, h)
    fa = detect_keypoints(img, "orb", threshold=10)
    fb = detect_keypoints(img2, "orb", threshold=10)
    m = match_descriptors(fa.descriptors, fb.descriptors)
    assert len(m) >= 10
    diffs = []
    for i, j, _ in m:
        a, b = fa.keypoints[i], fb.keypoints[j]
        pa = h @ [a.x, a.y, 1]
        if np.hypot(pa[0] - b.x, pa[1] - b.y) < 2:
            diffs.append(np.angle(np.exp(1j * (b.orientation - a.orientation))))
    assert len(diffs) >= 8
    assert np.rad2deg(np.median(diffs)) == pytest.approx(15, abs=3)


@pytest.mark.parametrize("algo", ["dog", "fast_brief", "orb"])
def test_descriptor_kinds(algo):
    f = detect_keypoints(_blobs(2), algo, **({} if algo == "dog" else {"threshold": 10}))
    assert len(f) > 0
    assert f.descriptors.shape == (len(f), 128 if algo == "dog" else 256)
    assert (f.descriptors.dtype == bool) == (algo != "dog")
    pts = f.points
    assert np.all((pts >= 0) & (pts < 192))
