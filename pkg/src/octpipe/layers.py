"""Boundary tracing from line masks, gap filling and layer thickness reports."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage as ndi

from .core import DEFAULT_AXIAL_RES_UM, map_frames
from .errors import BadParams, FilledMask, NoBoundaries, NoOverlapColumns, UnknownLayer
from .metrics import dice, otsu_threshold
from .phantom import MOUSE_LAYERS, boundary_names

DEFAULT_LAYERS = tuple(name for name, _, _ in MOUSE_LAYERS)
DEFAULT_BOUNDARIES = tuple(boundary_names(DEFAULT_LAYERS))
DEFAULT_GROUPS = {"INL + OPL": ("INL", "OPL")}
TOTAL = "total"

# BalbC female retina: per-layer pixel counts with estimated and literature thicknesses
REFERENCE_PIXELS = {name: px for name, px, _ in MOUSE_LAYERS}
REFERENCE_TOTAL_PX = 251
REFERENCE_AI_UM = [
    ("RNFL", 16.72), ("GCL+IPL", 44.31), ("INL + OPL", 38.4), ("ONL", 43.47),
    ("ELM", 10.03), ("PR", 67.72), (TOTAL, 209.20),
]
REFERENCE_LITERATURE_UM = [
    ("RNFL", 19.32), ("GCL+IPL", 45.09), ("INL + OPL", 41.92), ("ONL", 46.09),
    ("PR", 59.86), (TOTAL, 209.20),
]
REFERENCE_OVERALL_ERROR_PCT = 6.0

FILLED_RUN_FRACTION = 0.25
_MIN_FILLED_RUN = 4
_NO_REFERENCE_COST = 1e6


@dataclass
class BoundaryMap:
    """Per-boundary, per-column subpixel depths; NaN marks a gap."""

    names: list
    depths: np.ndarray  # (boundaries, width)
    flags: list = field(default_factory=list)

    def __post_init__(self):
        self.names = list(self.names)
        self.depths = np.asarray(self.depths, dtype=np.float64)
        if self.depths.ndim != 2 or self.depths.shape[0] != len(self.names):
            raise BadParams("depths must be (len(names), width)")

    @property
    def width(self):
        return self.depths.shape[1]

    def gaps(self):
        return ~np.isfinite(self.depths)

    def depth(self, name):
        return self.depths[self.names.index(name)]

    def to_mask(self, shape):
        """1-px line mask with depths rounded half-up."""
        mask = np.zeros(shape, dtype=bool)
        cols = np.arange(self.width)
        for d in self.depths:
            ok = np.isfinite(d)
            rows = np.floor(d[ok] + 0.5).astype(int)
            inside = (rows >= 0) & (rows < shape[0])
            mask[rows[inside], cols[ok][inside]] = True
        return mask


# --- tracing ----------------------------------------------------------------

def _column_runs(mask):
    """Per column: (centres, lengths) of the foreground runs, top-down."""
    pad = np.zeros((1, mask.shape[1]), dtype=np.int8)
    d = np.diff(np.vstack([pad, mask.astype(np.int8), pad]), axis=0)
    starts_r, starts_c = np.nonzero(d == 1)
    ends_r, ends_c = np.nonzero(d == -1)
    # nonzero walks row-major; sort by column so each column's runs are contiguous
    so = np.lexsort((starts_r, starts_c))
    eo = np.lexsort((ends_r, ends_c))
    starts_r, starts_c, ends_r = starts_r[so], starts_c[so], ends_r[eo]
    out = [(np.empty(0), np.empty(0, dtype=int))] * mask.shape[1]
    bounds = np.searchsorted(starts_c, np.arange(mask.shape[1] + 1))
    for c in range(mask.shape[1]):
        s, e = starts_r[bounds[c]:bounds[c + 1]], ends_r[bounds[c]:bounds[c + 1]]
        out[c] = ((s + e - 1) / 2.0, e - s)
    return out


def _check_not_filled(runs, height):
    spans = [r[0][-1] - r[0][0] for r in runs if len(r[0]) >= 2]
    slab = float(np.median(spans)) if spans else float(height)
    limit = max(FILLED_RUN_FRACTION * slab, _MIN_FILLED_RUN)
    thick = sum(1 for _, lengths in runs if len(lengths) and lengths.max() > limit)
    occupied = sum(1 for _, lengths in runs if len(lengths))
    if thick * 2 > occupied:
        raise FilledMask("mask looks like filled layer regions, expected 1-px boundary lines")


def _monotone_match(cost):
    """Order-preserving assignment of every row of ``cost`` (a <= b) to a distinct column."""
    a, b = cost.shape
    dp = np.full((a + 1, b + 1), np.inf)
    dp[0, :] = 0.0
    take = np.zeros((a + 1, b + 1), dtype=bool)
    for i in range(1, a + 1):
        for j in range(i, b + 1):
            skip = dp[i, j - 1]
            use = dp[i - 1, j - 1] + cost[i - 1, j - 1]
            if use <= skip:
                dp[i, j], take[i, j] = use, True
            else:
                dp[i, j] = skip
    pairs = []
    i, j = a, b
    while i > 0:
        if take[i, j]:
            pairs.append((i - 1, j - 1))
            i -= 1
        j -= 1
    return pairs[::-1]


def _nearest_present(depths, col):
    """Per boundary, the depth at the nearest column where it is present (NaN if none)."""
    out = np.full(depths.shape[0], np.nan)
    cols = np.arange(depths.shape[1])
    for k, row in enumerate(depths):
        ok = np.flatnonzero(np.isfinite(row))
        if ok.size:
            j = ok[np.argmin(np.abs(cols[ok] - col) * 2 + (cols[ok] > col))]
            out[k] = row[j]
    return out


def trace_boundaries(mask, expected_count, names=None):
    """Boundary depths from a binary boundary-line mask.

    Every foreground run contributes its centre.  Columns holding exactly
    ``expected_count`` runs are assigned in order.  The others are resolved
    outward from those columns by an order-preserving match against the
    nearest known depth of each boundary: with too few runs the unmatched
    boundaries become gaps, with too many the surplus runs are dropped.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise BadParams("mask must be a 2-D image")
    if expected_count < 2:
        raise BadParams("expected_count must be at least 2")
    if names is None:
        names = list(DEFAULT_BOUNDARIES) if expected_count == len(DEFAULT_BOUNDARIES) \
            else [f"B{k}" for k in range(expected_count)]
    if len(names) != expected_count:
        raise BadParams("names must have expected_count entries")
    if not mask.any():
        raise NoBoundaries("mask has no foreground pixels")

    h, w = mask.shape
    runs = _column_runs(mask)
    _check_not_filled(runs, h)
    k = expected_count
    depths = np.full((k, w), np.nan)
    counts = np.array([len(r[0]) for r in runs])
    flags = []

    seed = np.flatnonzero(counts == k)
    if seed.size == 0:
        # no complete column: seed from the fullest columns, aligned to the top boundaries
        best = counts.max()
        seed = np.flatnonzero(counts == best)
        flags.append({"reason": "no_complete_column", "runs": int(best)})
        n = min(int(best), k)
        for c in seed:
            depths[:n, c] = runs[c][0][:n]
    else:
        for c in seed:
            depths[:, c] = runs[c][0]

    pending = np.setdiff1d(np.flatnonzero(counts > 0), seed)
    dist = np.abs(pending[:, None] - seed[None, :]).min(axis=1) if pending.size else pending
    for c in pending[np.lexsort((pending, dist))]:
        centres = runs[c][0]
        ref = _nearest_present(depths, c)
        cost = np.abs(centres[:, None] - ref[None, :])
        cost[:, ~np.isfinite(ref)] = _NO_REFERENCE_COST
        if len(centres) <= k:
            for i, j in _monotone_match(cost):
                depths[j, c] = centres[i]
        else:
            for j, i in _monotone_match(cost.T):
                depths[j, c] = centres[i]
    return BoundaryMap(names, depths, flags)


def trace_stack(masks, expected_count, names=None, threads=1):
    return map_frames(lambda m: trace_boundaries(m, expected_count, names), list(masks), threads)


def interpolate_gaps(bmap, max_gap_cols=40):
    """Linearly fill gaps with known depths on both sides, at most ``max_gap_cols`` wide.

    Gaps touching the image edge or wider than the limit stay and are listed
    in the returned map's flags.
    """
    depths = bmap.depths.copy()
    flags = [f for f in bmap.flags if "boundary" not in f]
    w = depths.shape[1]
    for k, row in enumerate(depths):
        gap = ~np.isfinite(row)
        if not gap.any():
            continue
        pad = np.concatenate([[False], gap, [False]]).astype(np.int8)
        edges = np.flatnonzero(np.diff(pad))
        for s, e in zip(edges[0::2], edges[1::2]):
            if s == 0 or e == w:
                reason = "edge"
            elif e - s > max_gap_cols:
                reason = "too_wide"
            else:
                row[s:e] = np.interp(np.arange(s, e), [s - 1, e], [row[s - 1], row[e]])
                continue
            flags.append({"boundary": bmap.names[k], "col_start": int(s), "col_end": int(e),
                          "reason": reason})
    return BoundaryMap(bmap.names, depths, flags)


# --- thickness ----------------------------------------------------------------

@dataclass
class LayerThickness:
    name: str
    mean_px: float
    std_px: float
    mean_um: float
    columns: int
    percent_error: float | None = None
    reference_um: float | None = None

    def as_dict(self):
        return {
            "name": self.name, "mean_px": self.mean_px, "std_px": self.std_px,
            "mean_um": self.mean_um, "columns": self.columns,
            "reference_um": self.reference_um, "percent_error": self.percent_error,
        }


@dataclass
class ThicknessReport:
    layers: list
    total: LayerThickness
    axial_res_um_per_px: float
    mare_pct: float | None = None
    flags: list = field(default_factory=list)

    def layer(self, name):
        if name == TOTAL:
            return self.total
        for entry in self.layers:
            if entry.name == name:
                return entry
        raise UnknownLayer(f"no layer named {name!r}")

    def as_dict(self):
        return {
            "axial_res_um_per_px": self.axial_res_um_per_px,
            "layers": [l.as_dict() for l in self.layers],
            "total": self.total.as_dict(),
            "mean_absolute_relative_error_pct": self.mare_pct,
            "flags": list(self.flags),
        }


def _layer_names_for(bmap):
    if list(bmap.names) == list(DEFAULT_BOUNDARIES):
        return list(DEFAULT_LAYERS)
    return [f"{a}..{b}" for a, b in zip(bmap.names[:-1], bmap.names[1:])]


def _span(maps, upper, lower, name, res):
    parts = [m.depths[lower] - m.depths[upper] for m in maps]
    t = np.concatenate(parts)
    t = t[np.isfinite(t)]
    if t.size == 0:
        raise NoOverlapColumns(f"{name}: no column has both bounding boundaries")
    mean = float(t.mean())
    return LayerThickness(name, mean, float(t.std()), mean * res, int(t.size))


def compute_thickness(bmap, axial_res_um_per_px=DEFAULT_AXIAL_RES_UM, layer_names=None,
                      groups=None):
    """Thickness of every layer, of each named layer group and of the full span.

    ``bmap`` may be one BoundaryMap or a list of maps sharing boundary names
    (columns are pooled).  Layer ``k`` lies between boundaries ``k`` and
    ``k + 1``; a group spans from its first layer's top to its last layer's
    bottom.
    """
    maps = [bmap] if isinstance(bmap, BoundaryMap) else list(bmap)
    if not maps:
        raise NoBoundaries("no boundary maps given")
    names = maps[0].names
    if len(names) < 2:
        raise BadParams("thickness needs at least two boundaries")
    if any(m.names != names for m in maps):
        raise BadParams("boundary maps disagree on boundary names")
    layer_names = list(layer_names) if layer_names is not None else _layer_names_for(maps[0])
    if len(layer_names) != len(names) - 1:
        raise BadParams("need one layer name per adjacent boundary pair")
    if groups is None:
        groups = DEFAULT_GROUPS if set(layer_names) >= {"INL", "OPL"} else {}

    res = float(axial_res_um_per_px)
    layers = [_span(maps, k, k + 1, n, res) for k, n in enumerate(layer_names)]
    for gname, members in groups.items():
        idx = sorted(layer_names.index(m) for m in members)
        layers.append(_span(maps, idx[0], idx[-1] + 1, gname, res))
    total = _span(maps, 0, len(names) - 1, TOTAL, res)
    flags = [f for m in maps for f in m.flags if "boundary" in f]
    return ThicknessReport(layers, total, res, flags=flags)


def compare_reference(report, reference, flag_tolerance_um=None):
    """Percent error of every referenced layer and their mean absolute relative error.

    The full span gets a percent error but stays out of the mean, which
    averages individual layers only.

    ``reference`` is a list of ``(layer, um)``; the name ``total`` refers to
    the full span.  When ``flag_tolerance_um`` is given, layers differing by
    more than it are listed in the report flags.
    """
    errors = []
    flags = [f for f in report.flags if f.get("reason") != "reference_mismatch"]
    for name, ref_um in reference:
        entry = report.layer(name)
        entry.reference_um = float(ref_um)
        entry.percent_error = abs(entry.mean_um - ref_um) / ref_um * 100.0
        if name != TOTAL:
            errors.append(entry.percent_error)
        if flag_tolerance_um is not None and abs(entry.mean_um - ref_um) > flag_tolerance_um:
            flags.append({"reason": "reference_mismatch", "layer": name,
                          "computed_um": entry.mean_um, "reference_um": float(ref_um)})
    report.mare_pct = float(np.mean(errors)) if errors else None
    report.flags = flags
    return report


def reference_table_flags(axial_res_um_per_px=DEFAULT_AXIAL_RES_UM):
    """Arithmetic inconsistencies inside the BalbC reference thickness table."""
    res = axial_res_um_per_px
    ai = dict(REFERENCE_AI_UM)
    flags = []
    px_sum = sum(REFERENCE_PIXELS.values())
    if px_sum != REFERENCE_TOTAL_PX:
        flags.append({"reason": "pixel_sum", "sum_of_layers_px": px_sum,
                      "stated_total_px": REFERENCE_TOTAL_PX})
    total_um = REFERENCE_TOTAL_PX * res
    if round(total_um, 2) != ai[TOTAL]:
        flags.append({"reason": "total_conversion", "stated_total_px": REFERENCE_TOTAL_PX,
                      "converted_um": total_um, "printed_um": ai[TOTAL]})
    for gname, members in DEFAULT_GROUPS.items():
        um = sum(REFERENCE_PIXELS[m] for m in members) * res
        if round(um, 2) != ai[gname]:
            flags.append({"reason": "group_print", "layer": gname, "converted_um": um,
                          "printed_um": ai[gname]})
    return flags


# --- stand-in segmenter -----------------------------------------------------

def segment_boundaries(frame, sigma=(1.5, 3.0), threshold=None, min_run=4):
    """Boundary-line mask from a two-class intensity segmentation.

    The frame is smoothed, split at ``threshold`` (Otsu by default) and
    cleaned with vertical opening/closing of ``min_run`` rows.  Wherever the
    class changes down a column, the boundary is placed on the steepest
    smoothed gradient next to the change, rounded half-up to a row.
    """
    f = ndi.gaussian_filter(np.asarray(frame, dtype=np.float64), sigma)
    t = otsu_threshold(f) if threshold is None else float(threshold)
    fg = f > t
    se = np.ones((min_run, 1), dtype=bool)
    fg = ndi.binary_closing(ndi.binary_opening(fg, se), se)
    grad = np.abs(np.gradient(f, axis=0))
    rows, cols = np.nonzero(fg[1:] != fg[:-1])
    rows = rows + 1  # first row of the new class
    h = f.shape[0]
    # steepest gradient among the two rows around the change, parabola refined
    lo = np.clip(rows - 1, 0, h - 1)
    hi = np.clip(rows, 0, h - 1)
    peak = np.where(grad[lo, cols] >= grad[hi, cols], lo, hi)
    up = grad[np.clip(peak - 1, 0, h - 1), cols]
    mid = grad[peak, cols]
    down = grad[np.clip(peak + 1, 0, h - 1), cols]
    den = up - 2 * mid + down
    off = np.where(den < 0, 0.5 * (up - down) / np.where(den < 0, den, -1.0), 0.0)
    depth = peak + np.clip(off, -0.5, 0.5)
    mask = np.zeros(f.shape, dtype=bool)
    r = np.clip(np.floor(depth + 0.5).astype(int), 0, h - 1)
    mask[r, cols] = True
    return mask


def mask_dice(bmap, truth_mask):
    """Dice of the rendered boundary map against a ground-truth line mask."""
    return dice(bmap.to_mask(truth_mask.shape), truth_mask)
