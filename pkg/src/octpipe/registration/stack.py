"""Frame-to-reference alignment and the two-pass stack registration."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..core import map_frames, to_uint8
from ..errors import BadParams, InsufficientMatches, Malformed, OctError
from ..metrics import MetricReport, pearson_correlation
from .flow import optical_flow
from .homography import (
    apply_homography,
    estimate_homography_ransac,
    homography_from_quad,
    sample_bilinear,
    warp_perspective,
)
from .ilm import estimate_slab_quad, trace_ilm
from .keypoints import ALGOS, detect_keypoints
from .matching import match_descriptors

METHODS = ("height", "keypoint", "flow", "hybrid")


@dataclass
class Alignment:
    """Where each output pixel samples its input: coordinate maps ``xs``, ``ys``.

    NaN coordinates mark output pixels with no source (they render as 0).
    """

    xs: np.ndarray
    ys: np.ndarray

    @classmethod
    def identity(cls, shape):
        yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
        return cls(xx, yy)

    @classmethod
    def from_homography(cls, h, shape):
        """Alignment for warping by ``h`` (input -> output coordinates)."""
        ident = cls.identity(shape)
        return cls(*_map_points(np.linalg.inv(h), ident.xs, ident.ys))

    def apply(self, img):
        out = sample_bilinear(img, self.xs, self.ys)
        return to_uint8(out) if np.asarray(img).dtype == np.uint8 else out

    def then(self, second):
        """Alignment equal to applying ``self`` first and ``second`` to its output."""
        xs = sample_bilinear(self.xs, second.xs, second.ys, fill=np.nan)
        ys = sample_bilinear(self.ys, second.xs, second.ys, fill=np.nan)
        return Alignment(xs, ys)


def _map_points(h, xs, ys):
    den = h[2, 0] * xs + h[2, 1] * ys + h[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        mx = (h[0, 0] * xs + h[0, 1] * ys + h[0, 2]) / den
        my = (h[1, 0] * xs + h[1, 1] * ys + h[1, 2]) / den
    bad = den <= 0
    mx[bad] = np.nan
    my[bad] = np.nan
    return mx, my


@dataclass
class RegistrationPlan:
    pass1_refs: list
    pass2_ref: int
    method: str = "hybrid"
    algo: str = "orb"
    seed: int = 0
    detector_params: dict = field(default_factory=dict)
    flow_params: dict = field(default_factory=dict)
    ransac_iterations: int = 2000
    inlier_tol_px: float = 2.0
    ratio: float = 0.75
    # frame index -> [TL, TR, BR, BL] (x, y) corners replacing the detected slab quad in pass 1
    slab_quads: dict = field(default_factory=dict)

    def __post_init__(self):
        self.slab_quads = {int(k): v for k, v in self.slab_quads.items()}

    @classmethod
    def default(cls, n_frames, **kw):
        c = n_frames // 2
        return cls(pass1_refs=[c], pass2_ref=c, **kw)

    def validate(self, n_frames):
        if self.method not in METHODS:
            raise BadParams(f"unknown registration method {self.method!r}")
        if self.algo not in ALGOS:
            raise BadParams(f"unknown keypoint algorithm {self.algo!r}")
        if not self.pass1_refs:
            raise BadParams("at least one pass-1 reference is needed")
        for r in list(self.pass1_refs) + [self.pass2_ref]:
            if not 0 <= r < n_frames:
                raise BadParams(f"reference index {r} outside 0..{n_frames - 1}")
        for i, q in self.slab_quads.items():
            if not 0 <= int(i) < n_frames:
                raise BadParams(f"slab quad for frame {i} outside 0..{n_frames - 1}")
            if np.shape(q) != (4, 2):
                raise BadParams(f"slab quad for frame {i} must be 4 (x, y) corners")

    def quad_for(self, i):
        q = self.slab_quads.get(i)
        return None if q is None else np.asarray(q, dtype=np.float64)


# --- Case 1: height adjustment ----------------------------------------------

def _round_half_up(x):
    return int(np.floor(x + 0.5))


def ilm_heights(stack, threads=1):
    return np.array(map_frames(lambda f: trace_ilm(f).mean_height, stack.frames, threads))


def select_reference_frames(stack, drop_threshold_px=4.0, window=5, threads=1):
    """Frames where the ILM height jumps by more than the threshold, plus the centre.

    Within every run of ``window`` successive frames the first frame whose
    mean ILM depth differs from the run's first frame by more than
    ``drop_threshold_px`` is flagged.
    """
    n = len(stack)
    if n < window:
        raise BadParams(f"need at least {window} frames, got {n}")
    h = ilm_heights(stack, threads)
    flagged = {n // 2}
    for i in range(n - window + 1):
        for j in range(i + 1, i + window):
            if abs(h[j] - h[i]) > drop_threshold_px:
                flagged.add(j)
                break
    return sorted(flagged)


def height_adjust_register(stack, reference_index=None, threads=1):
    """Shift every frame vertically so its mean ILM height matches the reference's.

    Returns the registered stack and the applied integer shifts (positive
    moves content down); exposed rows are zero.
    """
    ref = len(stack) // 2 if reference_index is None else reference_index
    h = ilm_heights(stack, threads)
    offsets = [_round_half_up(h[ref] - hi) for hi in h]
    frames = np.zeros_like(stack.frames)
    for i, k in enumerate(offsets):
        if k > 0:
            frames[i, k:] = stack.frames[i, :-k]
        elif k < 0:
            frames[i, :k] = stack.frames[i, -k:]
        else:
            frames[i] = stack.frames[i]
    return stack.replace_frames(frames), offsets


# --- pairwise alignment -----------------------------------------------------

class PairAligner:
    """Aligns targets onto one reference with a fixed method; reference work is cached."""

    def __init__(self, reference, plan, quad=None):
        self.plan = plan
        self.reference = np.asarray(reference)
        self.shape = self.reference.shape
        m = plan.method
        if m == "height":
            self.ref_height = trace_ilm(self.reference).mean_height
        elif m == "keypoint":
            self.ref_features = detect_keypoints(self.reference, plan.algo, **plan.detector_params)
        elif m == "hybrid":
            self.ref_quad = estimate_slab_quad(self.reference) if quad is None else quad

    def align(self, target, seed, quad=None):
        m = self.plan.method
        if m == "height":
            k = _round_half_up(self.ref_height - trace_ilm(target).mean_height)
            ident = Alignment.identity(self.shape)
            return Alignment(ident.xs, ident.ys - k)
        if m == "keypoint":
            return Alignment.from_homography(self.keypoint_homography(target, seed), self.shape)
        if m == "flow":
            flow = optical_flow(self.reference, target, **self.plan.flow_params)
            ident = Alignment.identity(self.shape)
            return Alignment(ident.xs + flow.u, ident.ys + flow.v)
        # hybrid: slab-corner homography first, flow refinement on the coarse result
        if quad is None:
            quad = estimate_slab_quad(target)
        h = homography_from_quad(quad, self.ref_quad)
        coarse = warp_perspective(np.asarray(target, dtype=np.float64), h)
        flow = optical_flow(self.reference, coarse, **self.plan.flow_params)
        ident = Alignment.identity(self.shape)
        xs, ys = _map_points(np.linalg.inv(h), ident.xs + flow.u, ident.ys + flow.v)
        return Alignment(xs, ys)

    def keypoint_homography(self, target, seed):
        p = self.plan
        feats = detect_keypoints(target, p.algo, **p.detector_params)
        if len(feats) < 4 or len(self.ref_features) < 4:
            raise InsufficientMatches("too few keypoints")
        matches = match_descriptors(feats.descriptors, self.ref_features.descriptors, p.ratio)
        if len(matches) < 4:
            raise InsufficientMatches(f"only {len(matches)} descriptor matches")
        ia = [m[0] for m in matches]
        ib = [m[1] for m in matches]
        h, mask = estimate_homography_ransac(feats.points[ia], self.ref_features.points[ib],
                                             p.ransac_iterations, p.inlier_tol_px, seed)
        if mask.sum() < 4:
            raise InsufficientMatches("RANSAC found fewer than 4 inliers")
        _check_plausible(h, self.shape)
        return h


def _check_plausible(h, shape):
    """Reject homographies that fold or wildly stretch the frame."""
    rows, cols = shape
    corners = np.array([[0, 0], [cols - 1, 0], [cols - 1, rows - 1], [0, rows - 1]], dtype=float)
    mapped = apply_homography(h, corners)
    area = lambda p: 0.5 * abs(np.dot(p[:, 0], np.roll(p[:, 1], 1)) - np.dot(p[:, 1], np.roll(p[:, 0], 1)))
    ratio = area(mapped) / area(corners)
    if not np.isfinite(ratio) or not 0.5 < ratio < 2.0:
        raise InsufficientMatches(f"implausible homography (area ratio {ratio:.2f})")


# --- two-pass stack registration -------------------------------------------

@dataclass
class RegistrationReport(MetricReport):
    rows: list = field(default_factory=list)
    pass2_ref: int = 0


def _safe_corr(a, b):
    try:
        return pearson_correlation(a, b)
    except OctError:
        return float("nan")


def load_slab_quads(path):
    """Read ``{"<frame index>": [[x, y] x 4], ...}`` corner overrides (TL, TR, BR, BL)."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise Malformed(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise Malformed(f"{path}: expected an object keyed by frame index")
    quads = {}
    for key, corners in doc.items():
        try:
            q = np.asarray(corners, dtype=np.float64)
            i = int(key)
        except (TypeError, ValueError) as exc:
            raise Malformed(f"{path}: bad entry {key!r}") from exc
        if q.shape != (4, 2):
            raise Malformed(f"{path}: frame {key} needs 4 (x, y) corners")
        quads[i] = q.tolist()
    return quads


def nearest_reference(i, refs):
    return min(refs, key=lambda r: (abs(r - i), r))


def register_stack(stack, plan, threads=1):
    """Two-pass registration.

    Pass 1 aligns each frame to its nearest pass-1 reference (by index);
    pass 2 aligns the result to the central reference.  Frames whose pass-1
    reference already is the pass-2 reference are not aligned twice.  Slab
    quads supplied in the plan replace detection in pass 1 only, where frames
    are still in their original geometry.  Each
    frame is resampled once, through the composed alignment.  Frames whose
    alignment fails are passed through and flagged.
    """
    n = len(stack)
    plan.validate(n)
    refs = sorted(set(plan.pass1_refs))
    c = plan.pass2_ref
    shape = (stack.height, stack.width)
    ident = Alignment.identity(shape)

    assign = [nearest_reference(i, refs) for i in range(n)]
    status = ["ok"] * n
    aligners = {}

    def aligner_for(r, img):
        if r not in aligners:
            aligners[r] = PairAligner(img, plan, plan.quad_for(r))
        return aligners[r]

    # build reference-side state up front so worker threads only read it
    for r in refs:
        try:
            aligner_for(r, stack.frames[r])
        except OctError as exc:
            aligners[r] = exc

    def pass1(i):
        r = assign[i]
        if i == r:
            return ident, None
        al = aligners[r]
        if isinstance(al, Exception):
            return ident, f"failed:pass1:{type(al).__name__}"
        try:
            return al.align(stack.frames[i], [plan.seed, i, 1], plan.quad_for(i)), None
        except OctError as exc:
            return ident, f"failed:pass1:{type(exc).__name__}"

    first = map_frames(pass1, range(n), threads)
    inter = [first[i][0].apply(stack.frames[i]) if first[i][0] is not ident else stack.frames[i]
             for i in range(n)]

    try:
        central = PairAligner(inter[c], plan)
    except OctError as exc:
        central = exc

    def pass2(i):
        if i == c or assign[i] == c:
            return ident, None
        if isinstance(central, Exception):
            return ident, f"failed:pass2:{type(central).__name__}"
        try:
            return central.align(inter[i], [plan.seed, i, 2]), None
        except OctError as exc:
            return ident, f"failed:pass2:{type(exc).__name__}"

    second = map_frames(pass2, range(n), threads)

    out = np.empty_like(stack.frames)
    for i in range(n):
        a1, e1 = first[i]
        a2, e2 = second[i]
        errs = [e for e in (e1, e2) if e]
        if errs:
            status[i] = ";".join(errs)
        if a1 is ident and a2 is ident:
            out[i] = stack.frames[i]
        elif a2 is ident:
            out[i] = inter[i]
        else:
            out[i] = a1.then(a2).apply(stack.frames[i]) if a1 is not ident else a2.apply(stack.frames[i])
    status[c] = "reference"

    values = [_safe_corr(out[i], out[c]) for i in range(n)]
    rows = [
        {"frame_index": i, "method": plan.method, "reference_index": c,
         "correlation": values[i], "status": status[i]}
        for i in range(n)
    ]
    return stack.replace_frames(out), RegistrationReport(values, rows=rows, pass2_ref=c)
