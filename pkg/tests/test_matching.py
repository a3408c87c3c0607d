import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays

from octpipe.errors import MixedDescriptorKinds
from octpipe.registration.homography import apply_homography, warp_perspective
from octpipe.registration.keypoints import detect_keypoints
from octpipe.registration.matching import distance_matrix, hamming_matrix, match_descriptors


def test_self_match_zero():
    d = np.random.default_rng(0).random((10, 256)) > 0.5
    m = match_descriptors(d[3:4], d)
    assert m == [(0, 3, 0.0)]


def test_complement_distance():
    a = np.random.default_rng(1).random((1, 256)) > 0.5
    assert hamming_matrix(a, ~a)[0, 0] == 256


def test_mixed_kinds():
    with pytest.raises(MixedDescriptorKinds):
        distance_matrix(np.zeros((2, 256), bool), np.zeros((2, 128)))


@settings(max_examples=40, deadline=None)
@given(arrays(bool, (3, 64)))
def test_hamming_metric(d):
    m = hamming_matrix(d, d)
    assert np.array_equal(m, m.T)
    assert m[0, 2] <= m[0, 1] + m[1, 2]


def test_known_warp_matches(textured_pair):
    img = np.clip(textured_pair, 0, 255).astype(np.uint8)
    h = np.array([[1.0, 0.02, 4.0], [-0.015, 1.0, 6.0], [0, 0, 1]])
    img2 = warp_perspective(img, h)
    fa = detect_keypoints(img, "orb", threshold=8)
    fb = detect_keypoints(img2, "orb", threshold=8)
    m = match_descriptors(fa.descriptors, fb.descriptors)
    pa = fa.points[[i for i, _, _ in m]]
    pb = fb.points[[j for _, j, _ in m]]
    good = np.hypot(*(apply_homography(h, pa) - pb).T) <= 2
    assert good.sum() >= 8
