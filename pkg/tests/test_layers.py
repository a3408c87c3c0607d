import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from octpipe.errors import FilledMask, NoBoundaries, NoOverlapColumns, UnknownLayer
from octpipe.layers import (
    DEFAULT_BOUNDARIES, REFERENCE_AI_UM, REFERENCE_LITERATURE_UM, BoundaryMap, compare_reference,
    compute_thickness, interpolate_gaps, reference_table_flags, segment_boundaries, trace_boundaries,
)
from octpipe.phantom import PhantomSpec, generate_phantom


def line_mask(depths, height):
    m = np.zeros((height, len(depths[0])), bool)
    for d in depths:
        m[np.floor(np.asarray(d) + 0.5).astype(int), np.arange(len(d))] = True
    return m


# --- tracing ----------------------------------------------------------------

def test_trace_matches_ground_truth():
    s, gt = generate_phantom(PhantomSpec(frame_count=2, tilt_px_per_col=0.03, jitter=[0, 7]))
    for i in range(2):
        mask = gt.boundary_mask(i, (s.height, s.width))
        bmap = trace_boundaries(mask, len(gt.boundary_names))
        truth = np.floor(gt.boundaries[i] + 0.5)
        ok = np.abs(bmap.depths - truth) <= 0.5
        assert ok.mean() >= 0.99


def test_trace_erased_run_gives_one_gap():
    cols = 80
    depths = [np.full(cols, 10.0), np.full(cols, 30.0), np.full(cols, 55.0)]
    mask = line_mask(depths, 80)
    mask[30, 17] = False
    bmap = trace_boundaries(mask, 3)
    gaps = bmap.gaps()
    assert gaps.sum() == 1 and gaps[1, 17]
    assert np.array_equal(bmap.depths[:, 16], [10, 30, 55])


def test_trace_empty_and_filled():
    with pytest.raises(NoBoundaries):
        trace_boundaries(np.zeros((50, 50), bool), 3)
    filled = np.zeros((100, 60), bool)
    filled[20:40] = True
    filled[60:90] = True
    with pytest.raises(FilledMask):
        trace_boundaries(filled, 2)


def test_trace_default_names():
    s, gt = generate_phantom(PhantomSpec(width=64))
    bmap = trace_boundaries(gt.boundary_mask(0, (s.height, s.width)), 8)
    assert bmap.names == list(DEFAULT_BOUNDARIES)


# --- interpolation ------------------------------------------------------------

def test_interpolate_linear():
    d = np.full((1, 30), np.nan)
    d[0, :11] = 100
    d[0, 14:] = 104
    d[0, 10] = 100
    out = interpolate_gaps(BoundaryMap(["a"], d))
    assert out.depths[0, 11:14].tolist() == [101, 102, 103]
    assert out.flags == []


def test_interpolate_gap_free_unchanged():
    d = np.arange(40, dtype=float).reshape(2, 20)
    out = interpolate_gaps(BoundaryMap(["a", "b"], d))
    assert np.array_equal(out.depths, d)


def test_interpolate_wide_and_edge_gaps_flagged():
    d = np.full((1, 120), 50.0)
    d[0, 30:90] = np.nan
    d[0, :3] = np.nan
    out = interpolate_gaps(BoundaryMap(["a"], d), max_gap_cols=40)
    assert np.isnan(out.depths[0, 30:90]).all()
    reasons = {(f["col_start"], f["col_end"]): f["reason"] for f in out.flags}
    assert reasons == {(30, 90): "too_wide", (0, 3): "edge"}


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_interpolate_keeps_known_columns(seed):
    rng = np.random.default_rng(seed)
    d = rng.uniform(0, 100, (3, 64))
    d[rng.random(d.shape) < 0.3] = np.nan
    out = interpolate_gaps(BoundaryMap(["a", "b", "c"], d), max_gap_cols=int(rng.integers(1, 10)))
    known = np.isfinite(d)
    assert np.array_equal(out.depths[known], d[known])


# --- thickness ----------------------------------------------------------------

def two_lines(top, thickness, width=50):
    return BoundaryMap(["a", "b"], np.vstack([np.full(width, top), np.full(width, top + thickness)]))


def test_thickness_examples():
    r = compute_thickness(two_lines(30.0, 20.0))
    assert r.layers[0].mean_px == 20 and r.layers[0].mean_um == pytest.approx(16.72, abs=1e-9)
    assert compute_thickness(two_lines(10.0, 251.0)).total.mean_um == pytest.approx(209.836, abs=1e-9)
    z = compute_thickness(two_lines(10.0, 0.0))
    assert z.total.mean_px == 0 and z.total.mean_um == 0


def test_thickness_errors():
    d = np.vstack([np.r_[np.full(10, 5.0), np.full(10, np.nan)], np.r_[np.full(10, np.nan), np.full(10, 9.0)]])
    with pytest.raises(NoOverlapColumns):
        compute_thickness(BoundaryMap(["a", "b"], d))
    with pytest.raises(UnknownLayer):
        compute_thickness(two_lines(1.0, 3.0)).layer("ONL")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 40))
def test_thickness_translation_invariant(seed, k):
    rng = np.random.default_rng(seed)
    base = np.cumsum(rng.uniform(3, 20, (4, 1)), axis=0) + rng.uniform(-2, 2, (4, 60))
    base = np.sort(base, axis=0)
    mask = line_mask(base, 200)
    a = compute_thickness(trace_boundaries(mask, 4))
    b = compute_thickness(trace_boundaries(np.roll(mask, k, axis=0), 4))
    for la, lb in zip(a.layers, b.layers):
        assert abs(la.mean_px - lb.mean_px) <= 0.5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.5, 5.0))
def test_thickness_sums_and_units(seed, res):
    rng = np.random.default_rng(seed)
    d = np.cumsum(rng.uniform(0, 30, (6, 40)), axis=0)
    r = compute_thickness(BoundaryMap(list("abcdef"), d), axial_res_um_per_px=res)
    assert abs(sum(l.mean_px for l in r.layers) - r.total.mean_px) <= 0.5
    for l in r.layers + [r.total]:
        assert l.mean_um == l.mean_px * res


# --- reference comparison -------------------------------------------------------

def test_percent_error_examples():
    r = compute_thickness(two_lines(0.0, 20.0), layer_names=["RNFL"])
    compare_reference(r, [("RNFL", 19.32)])
    assert r.layer("RNFL").percent_error == pytest.approx(13.457, abs=0.01)
    compare_reference(r, [("RNFL", 16.72)])
    assert r.layer("RNFL").percent_error == pytest.approx(0.0, abs=1e-9)


def test_full_table_comparison():
    ai = dict(REFERENCE_AI_UM)
    errs = [abs(ai[n] - lit) / lit * 100 for n, lit in REFERENCE_LITERATURE_UM if n != "total"]
    assert np.mean(errs) == pytest.approx(8.48, abs=0.01)
    names = ["RNFL", "GCL+IPL", "INL + OPL", "ONL", "ELM", "PR"]
    bounds = np.cumsum([0.0] + [ai[n] for n in names])[:, None] * np.ones((1, 5))
    r = compute_thickness(BoundaryMap(list("abcdefg"), bounds), axial_res_um_per_px=1.0,
                          layer_names=names, groups={})
    compare_reference(r, REFERENCE_LITERATURE_UM)
    assert r.mare_pct == pytest.approx(np.mean(errs), abs=1e-9)
    assert r.layer("PR").percent_error == pytest.approx(13.13, abs=0.01)
    assert r.layer("ELM").percent_error is None


def test_reference_table_flags():
    reasons = {f["reason"] for f in reference_table_flags()}
    assert reasons == {"pixel_sum", "total_conversion", "group_print"}


# --- stand-in segmenter ---------------------------------------------------------

def test_segmenter_on_clean_phantom():
    layers = [["RNFL", 20, 200], ["GCL+IPL", 53, 90], ["INL", 25, 190], ["OPL", 21, 70],
              ["ONL", 52, 180], ["ELM", 12, 60], ["PR", 81, 170]]
    s, gt = generate_phantom(PhantomSpec(width=128, layer_stack=layers, speckle=0.1, seed=3))
    bmap = trace_boundaries(segment_boundaries(s.frames[0]), 8)
    err = np.abs(bmap.depths - gt.boundaries[0])
    assert np.nanmedian(err) <= 1.0
