"""Nearest-neighbour descriptor matching with ratio test and mutual check."""

import numpy as np

from ..errors import MixedDescriptorKinds


def hamming_matrix(a, b):
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    return a @ (1.0 - b).T + (1.0 - a) @ b.T


def euclidean_matrix(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(d2, 0.0))


def distance_matrix(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    binary_a, binary_b = a.dtype == bool, b.dtype == bool
    if binary_a != binary_b or (a.ndim == 2 and b.ndim == 2 and a.shape[1] != b.shape[1]):
        raise MixedDescriptorKinds("descriptors differ in kind or length")
    if binary_a:
        return hamming_matrix(a, b)
    return euclidean_matrix(a, b)


def match_descriptors(a, b, ratio=0.75, mutual=True):
    """Return ``[(index_a, index_b, distance), ...]`` sorted by index_a."""
    a = np.asarray(a)
    b = np.asarray(b)
    if len(a) == 0 or len(b) == 0:
        distance_matrix(a.reshape(len(a), -1), b.reshape(len(b), -1))
        return []
    d = distance_matrix(a, b)
    nearest = np.argmin(d, axis=1)
    rows = np.arange(len(a))
    d1 = d[rows, nearest]
    if d.shape[1] > 1:
        d2 = np.partition(d, 1, axis=1)[:, 1]
    else:
        d2 = np.full(len(a), np.inf)
    keep = d1 < ratio * d2
    if mutual:
        back = np.argmin(d, axis=0)
        keep &= back[nearest] == rows
    return [(int(i), int(nearest[i]), float(d1[i])) for i in np.flatnonzero(keep)]
