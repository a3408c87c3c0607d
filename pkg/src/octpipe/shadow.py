"""Shadow column detection, classical baselines, pixel lifting and alpha search."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi

from .errors import BadParams, Malformed, NoMatchingFrames, NoRegions, RegionOutOfBounds

log = logging.getLogger(__name__)

MODES = ("complement_boost", "verbatim")
BIT_DEPTH = 8


@dataclass
class ShadowRegion:
    frame_index: int
    col_start: int
    col_end: int
    row_start: int | None = None
    row_end: int | None = None
    source: str = "auto"

    @property
    def width(self):
        return self.col_end - self.col_start

    def rows(self, height):
        lo = 0 if self.row_start is None else self.row_start
        hi = height if self.row_end is None else self.row_end
        return lo, hi


@dataclass
class AlphaSearch:
    alpha_min: float = 1.0
    alpha_max: float = 2.0
    alpha_step: float = 0.05
    w_mean: float = 1.0
    w_std: float = 1.0
    w_zero: float = 1.0
    mode: str = "complement_boost"

    def __post_init__(self):
        if self.alpha_min > self.alpha_max:
            raise BadParams("alpha_min must not exceed alpha_max")
        if not self.alpha_step > 0:
            raise BadParams("alpha_step must be positive")
        weights = (self.w_mean, self.w_std, self.w_zero)
        if min(weights) < 0 or max(weights) <= 0:
            raise BadParams("weights must be non-negative with at least one positive")
        if self.mode not in MODES:
            raise BadParams(f"unknown mode {self.mode!r}")

    def grid(self):
        n = int(math.floor((self.alpha_max - self.alpha_min) / self.alpha_step + 1e-9))
        return [round(self.alpha_min + k * self.alpha_step, 10) for k in range(n + 1)]


# --- detection -------------------------------------------------------------

def _runs(flags):
    """(start, end) of consecutive True runs."""
    padded = np.concatenate([[False], flags, [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    return list(zip(edges[0::2], edges[1::2]))


def detect_shadow_columns(frame, dip_fraction=0.25, median_window=51, min_width=2,
                          max_width_frac=0.2, frame_index=0):
    """Find dark vertical bands from the per-column mean intensity.

    Columns whose smoothed mean falls below ``(1 - dip_fraction)`` of the
    running median are seeds; each seeded interval is then widened or
    narrowed to the half-depth level of its own dip on the raw profile.
    """
    frame = np.asarray(frame, dtype=np.float64)
    w = frame.shape[1]
    if w <= median_window:
        raise BadParams(f"frame width {w} must exceed median_window {median_window}")
    profile = frame.mean(axis=0)
    smooth = ndi.uniform_filter1d(profile, 5, mode="nearest")
    baseline = ndi.median_filter(profile, size=median_window, mode="nearest")
    ratio = np.divide(profile, baseline, out=np.ones_like(profile), where=baseline > 0)
    marked = smooth < (1.0 - dip_fraction) * baseline

    intervals = []
    for s, e in _runs(marked):
        depth = 1.0 - ratio[s:e].min()
        edge = ratio < 1.0 - depth / 2.0
        while s > 0 and edge[s - 1]:
            s -= 1
        while e < w and edge[e]:
            e += 1
        while s < e and not edge[s]:
            s += 1
        while e > s and not edge[e - 1]:
            e -= 1
        if e > s:
            intervals.append([s, e])

    merged = []
    for s, e in sorted(intervals):
        if merged and s <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], e)
        else:
            merged.append([s, e])
    max_w = max_width_frac * w
    return [
        ShadowRegion(frame_index, int(s), int(e))
        for s, e in merged
        if min_width <= e - s <= max_w
    ]


def detect_stack(stack, threads=1, **params):
    from .core import map_frames
    per_frame = map_frames(
        lambda i: detect_shadow_columns(stack.frames[i], frame_index=i, **params),
        range(len(stack)), threads)
    return [r for regions in per_frame for r in regions]


# --- classical baselines ---------------------------------------------------

_VERTICAL_EDGE = np.array([[-1, 0, 1], [-1, 0, 1], [-1, 0, 1]], dtype=float)


def _clamp(x):
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def classical_baseline(img, method, **params):
    """The simple whole-image shadow filters kept around for comparison."""
    img = np.asarray(img, dtype=np.float64)
    if method == "vertical_edge":
        kernel = np.asarray(params.get("kernel", _VERTICAL_EDGE), dtype=float)
        if kernel.shape != (3, 3):
            raise BadParams("kernel must be 3x3")
        return _clamp(ndi.convolve(img, kernel, mode="nearest"))
    if method == "rolling_avg":
        n = int(params.get("n", 10))
        if n < 1:
            raise BadParams("window n must be >= 1")
        return _clamp(ndi.uniform_filter1d(img, n, axis=0, mode="nearest"))
    if method == "value_scale":
        alpha = float(params.get("alpha", 1.3))
        if alpha < 0:
            raise BadParams("alpha must be >= 0")
        return _clamp(alpha * img)
    if method == "column_diff":
        out = np.zeros_like(img)
        out[:, 1:] = img[:, 1:] - img[:, :-1]
        return _clamp(np.maximum(out, 0))
    if method == "blur_threshold":
        t = float(params.get("threshold", 50))
        if not 0 <= t <= 255:
            raise BadParams("threshold must lie in 0..255")
        blurred = ndi.uniform_filter(img, 3, mode="nearest")
        return _clamp(np.where(blurred < t, 0.0, blurred))
    raise BadParams(f"unknown baseline {method!r}")


# --- COCO ingestion --------------------------------------------------------

def import_coco_regions(json_path, stack):
    """Read rectangular shadow boxes from a COCO-style annotation file."""
    try:
        doc = json.loads(Path(json_path).read_text())
    except (OSError, ValueError) as exc:
        raise Malformed(f"{json_path}: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("images"), list) \
            or not isinstance(doc.get("annotations"), list):
        raise Malformed(f"{json_path}: missing 'images' or 'annotations' array")

    by_label = {Path(lbl).name: i for i, lbl in enumerate(stack.source_labels)}
    from .core import FRAME_TEMPLATE
    for i in range(len(stack)):
        by_label.setdefault(FRAME_TEMPLATE.format(i), i)

    frame_of = {}
    unmatched = []
    for im in doc["images"]:
        try:
            name = Path(im["file_name"]).name
            img_id = im["id"]
        except (KeyError, TypeError) as exc:
            raise Malformed(f"image entry lacks {exc}") from exc
        if name in by_label:
            frame_of[img_id] = by_label[name]
        else:
            unmatched.append(name)
    if unmatched:
        log.warning("COCO images without a matching frame: %s", ", ".join(unmatched))

    regions = []
    for ann in doc["annotations"]:
        try:
            img_id = ann["image_id"]
            x, y, bw, bh = (float(v) for v in ann["bbox"])
        except (KeyError, TypeError, ValueError) as exc:
            raise Malformed(f"bad annotation {ann!r}") from exc
        if img_id not in frame_of:
            continue
        c0 = max(0, int(math.floor(x)))
        c1 = min(stack.width, int(math.ceil(x + bw)))
        r0 = max(0, int(math.floor(y)))
        r1 = min(stack.height, int(math.ceil(y + bh)))
        if c1 <= c0 or r1 <= r0:
            continue
        regions.append(ShadowRegion(frame_of[img_id], c0, c1, r0, r1, source="coco"))
    if not regions:
        raise NoMatchingFrames(f"{json_path}: no annotation maps onto a frame of the stack")
    regions.sort(key=lambda r: (r.frame_index, r.col_start))
    return regions


# --- suppression -----------------------------------------------------------

def lift_lut(alpha, mode="complement_boost"):
    """256-entry lookup table of the in-shadow pixel update."""
    old = np.arange(256, dtype=np.float64)
    if mode == "complement_boost":
        new = old + alpha * (255.0 - old) / 255.0
    elif mode == "verbatim":
        half = 2.0 ** (BIT_DEPTH - 1)
        new = alpha * (half - old) / half
    else:
        raise BadParams(f"unknown mode {mode!r}")
    return _clamp(new)


def region_mask(shape, regions):
    h, w = shape
    mask = np.zeros(shape, dtype=bool)
    for r in regions:
        r0, r1 = r.rows(h)
        if not (0 <= r.col_start < r.col_end <= w and 0 <= r0 < r1 <= h):
            raise RegionOutOfBounds(f"{r} does not fit a {w}x{h} frame")
        mask[r0:r1, r.col_start:r.col_end] = True
    return mask


def suppress_shadows(img, regions, alpha, mode="complement_boost"):
    """Lift pixels inside ``regions``; every other pixel is returned untouched."""
    if not alpha > 0:
        raise BadParams("alpha must be positive")
    img = np.asarray(img, dtype=np.uint8)
    mask = region_mask(img.shape, regions)
    out = img.copy()
    out[mask] = lift_lut(alpha, mode)[img[mask]]
    return out


def stack_masks(stack, regions):
    masks = np.zeros(stack.frames.shape, dtype=bool)
    for i in {r.frame_index for r in regions}:
        if not 0 <= i < len(stack):
            raise RegionOutOfBounds(f"frame index {i} outside the stack")
        masks[i] = region_mask((stack.height, stack.width), [r for r in regions if r.frame_index == i])
    return masks


def suppress_stack(stack, regions, alpha, mode="complement_boost"):
    if not alpha > 0:
        raise BadParams("alpha must be positive")
    masks = stack_masks(stack, regions)
    frames = stack.frames.copy()
    frames[masks] = lift_lut(alpha, mode)[frames[masks]]
    return stack.replace_frames(frames)


# --- alpha optimisation ----------------------------------------------------

def _stats_from_hist(hist):
    levels = np.arange(256, dtype=np.float64)
    n = hist.sum()
    mean = hist @ levels / n
    std = math.sqrt(max(hist @ (levels - mean) ** 2 / n, 0.0))
    return float(mean), std, int(hist[0])


def _ratio(after, before):
    return after / before if before else 0.0


def optimize_alpha(stack, regions, search=None):
    """Exhaustive grid search of the lift strength.

    Minimises ``w_zero*zeros_ratio + w_std*std_ratio - w_mean*mean_ratio``
    over the whole stack; returns ``(alpha_star, trace)`` where ``trace`` is
    a list of dicts with keys alpha, J, mean, std, zeros.
    """
    search = search or AlphaSearch()
    if not regions:
        raise NoRegions("alpha search needs at least one shadow region")
    masks = stack_masks(stack, regions)
    inside = np.bincount(stack.frames[masks], minlength=256).astype(np.int64)
    total = np.bincount(stack.frames.ravel(), minlength=256).astype(np.int64)
    outside = total - inside
    mean0, std0, zeros0 = _stats_from_hist(total)

    trace = []
    for alpha in search.grid():
        lut = lift_lut(alpha, search.mode)
        hist = outside + np.bincount(lut, weights=inside, minlength=256).astype(np.int64)
        mean, std, zeros = _stats_from_hist(hist)
        j = (search.w_zero * _ratio(zeros, zeros0) if search.w_zero else 0.0) \
            + (search.w_std * _ratio(std, std0) if search.w_std else 0.0) \
            - (search.w_mean * _ratio(mean, mean0) if search.w_mean else 0.0)
        trace.append({"alpha": alpha, "J": j, "mean": mean, "std": std, "zeros": zeros})
    best = min(range(len(trace)), key=lambda k: (trace[k]["J"], trace[k]["alpha"]))
    return trace[best]["alpha"], trace


def flank_matched_alpha(stack, regions):
    """Complement-boost strength that lifts the in-region mean to the flanking-column mean.

    Flanks are the columns of equal width on either side of every region,
    minus any column that lies in a region of the same frame.  With
    ``new = old + a (255 - old) / 255`` the mean moves linearly in ``a``, so
    ``a = 255 (m_flank - m_in) / (255 - m_in)``.  Returns 0.0 when the
    regions are not darker than their flanks.
    """
    if not regions:
        raise NoRegions("flank matching needs at least one shadow region")
    masks = stack_masks(stack, regions)
    flank = np.zeros_like(masks)
    w = stack.width
    for r in regions:
        r0, r1 = r.rows(stack.height)
        width = r.col_end - r.col_start
        flank[r.frame_index, r0:r1, max(r.col_start - width, 0):r.col_start] = True
        flank[r.frame_index, r0:r1, r.col_end:min(r.col_end + width, w)] = True
    flank &= ~masks
    if not flank.any():
        return 0.0
    m_in = float(stack.frames[masks].mean())
    m_fl = float(stack.frames[flank].mean())
    if m_fl <= m_in or m_in >= 255.0:
        return 0.0
    return 255.0 * (m_fl - m_in) / (255.0 - m_in)
