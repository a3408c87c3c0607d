"""Seeded synthetic retina B-scan stacks with exact ground truth.

Each frame is a set of horizontal bands (one per retinal layer) with a short
linear intensity ramp at every boundary.  Frames are then shifted (integer
jitter), optionally warped by a homography, darkened under shadow columns and
finally multiplied by log-normal speckle.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import Stack, to_uint8
from .errors import SpecInvalid
from .registration.homography import apply_homography, translation, warp_perspective
from .shadow import ShadowRegion

# BalbC layer pixel counts; intensities are a plausible mouse-retina contrast pattern.
MOUSE_LAYERS = (
    ("RNFL", 20, 200),
    ("GCL+IPL", 53, 120),
    ("INL", 25, 60),
    ("OPL", 21, 150),
    ("ONL", 52, 50),
    ("ELM", 12, 170),
    ("PR", 81, 110),
)


def boundary_names(layer_names):
    """ILM, then one name per interface, ending with '<last>-end'."""
    names = ["ILM"]
    for upper, lower in zip(layer_names[:-1], layer_names[1:]):
        names.append(f"{upper}/{lower}")
    names.append(f"{layer_names[-1]}-end")
    return names


@dataclass
class PhantomSpec:
    width: int = 512
    height: int = 512
    frame_count: int = 1
    layer_stack: list = field(default_factory=lambda: [list(l) for l in MOUSE_LAYERS])
    ilm_depth_px: float = 40.0
    tilt_px_per_col: float = 0.0
    jitter: object = None
    warp: object = None
    shadows: list = field(default_factory=list)
    speckle: float = 0.0
    seed: int = 0
    vitreous_intensity: float = 0.0
    deep_intensity: float = 30.0
    deep_decay_px: float = 60.0
    ramp_px: float = 2.0

    def __post_init__(self):
        self.layer_stack = [tuple(l) for l in self.layer_stack]
        self.shadows = [tuple(s) for s in self.shadows]
        self.validate()

    @property
    def layer_names(self):
        return [l[0] for l in self.layer_stack]

    def validate(self):
        if self.width < 1 or self.height < 1 or self.frame_count < 1:
            raise SpecInvalid("width, height and frame_count must be positive")
        if not self.layer_stack:
            raise SpecInvalid("layer_stack is empty")
        for name, thick, inten in self.layer_stack:
            if not thick > 0:
                raise SpecInvalid(f"layer {name}: thickness must be positive")
            if not 0 <= inten <= 255:
                raise SpecInvalid(f"layer {name}: intensity outside 0..255")
        total = sum(l[1] for l in self.layer_stack)
        deepest = self.ilm_depth_px + max(0.0, self.tilt_px_per_col * (self.width - 1))
        shallowest = self.ilm_depth_px + min(0.0, self.tilt_px_per_col * (self.width - 1))
        if shallowest < 0 or deepest + total >= self.height:
            raise SpecInvalid("layers do not fit inside the frame height")
        for start, width, att in self.shadows:
            if not 0 < att <= 1:
                raise SpecInvalid("shadow attenuation must lie in (0, 1]")
            if start < 0 or width < 1 or start + width > self.width:
                raise SpecInvalid(f"shadow ({start}, {width}) outside the frame")
        if self.speckle < 0:
            raise SpecInvalid("speckle strength must be >= 0")
        if isinstance(self.jitter, (list, tuple)) and len(self.jitter) != self.frame_count:
            raise SpecInvalid("jitter list needs one offset per frame")
        if isinstance(self.warp, (list, tuple)) and len(self.warp) != self.frame_count:
            raise SpecInvalid("warp list needs one matrix per frame")

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**d)
        except TypeError as exc:
            raise SpecInvalid(str(exc)) from exc

    def to_dict(self):
        d = asdict(self)
        d["layer_stack"] = [list(l) for l in self.layer_stack]
        d["shadows"] = [list(s) for s in self.shadows]
        return d


@dataclass
class GroundTruth:
    boundary_names: list
    boundaries: np.ndarray  # (frames, boundaries, width) subpixel depths
    offsets: list
    warps: list
    shadow_regions: list

    def to_dict(self, decimals=4):
        return {
            "boundary_names": list(self.boundary_names),
            "boundaries": np.round(self.boundaries, decimals).tolist(),
            "offsets": [int(o) for o in self.offsets],
            "warps": [np.asarray(w).tolist() for w in self.warps],
            "shadow_regions": [asdict(r) for r in self.shadow_regions],
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            d = json.load(fh)
        return cls(
            d["boundary_names"],
            np.asarray(d["boundaries"], dtype=float),
            d["offsets"],
            [np.asarray(w) for w in d["warps"]],
            [ShadowRegion(**r) for r in d["shadow_regions"]],
        )

    def boundary_mask(self, frame_index, shape, names=None):
        """1-px boundary-line mask for one frame (depths rounded half-up)."""
        mask = np.zeros(shape, dtype=bool)
        keep = range(len(self.boundary_names)) if names is None else [self.boundary_names.index(n) for n in names]
        cols = np.arange(shape[1])
        for k in keep:
            d = self.boundaries[frame_index, k]
            ok = np.isfinite(d)
            rows = np.floor(d[ok] + 0.5).astype(int)
            inside = (rows >= 0) & (rows < shape[0])
            mask[rows[inside], cols[ok][inside]] = True
        return mask


def _frame_offsets(spec):
    j = spec.jitter
    n = spec.frame_count
    if j is None:
        return [0] * n
    if isinstance(j, (list, tuple)):
        return [int(round(v)) for v in j]
    if isinstance(j, dict) and "steps" in j:
        offsets = [0] * n
        for start, delta in j["steps"]:
            for i in range(int(start), n):
                offsets[i] += int(delta)
        return offsets
    if isinstance(j, dict) and "random_max_px" in j:
        m = int(j["random_max_px"])
        return [int(np.random.default_rng([spec.seed, i, 2]).integers(-m, m + 1)) for i in range(n)]
    raise SpecInvalid(f"unrecognised jitter schedule: {j!r}")


def random_warp(rng, width, height, max_shift_px=0.0, max_shift_x_px=0.0, max_rot_deg=0.0,
                max_scale=0.0, max_persp=0.0):
    """Homography about the image centre with uniformly drawn small parameters."""
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    dy = rng.uniform(-max_shift_px, max_shift_px)
    dx = rng.uniform(-max_shift_x_px, max_shift_x_px)
    th = np.deg2rad(rng.uniform(-max_rot_deg, max_rot_deg))
    sy = 1.0 + rng.uniform(-max_scale, max_scale)
    p = rng.uniform(-max_persp, max_persp) / width
    rot = np.array([[np.cos(th), -np.sin(th), 0], [np.sin(th), np.cos(th), 0], [0, 0, 1]])
    scale = np.diag([1.0, sy, 1.0])
    persp = np.array([[1, 0, 0], [0, 1, 0], [p, 0, 1]], dtype=float)
    h = translation(cx + dx, cy + dy) @ rot @ scale @ persp @ translation(-cx, -cy)
    return h / h[2, 2]


def _frame_warps(spec):
    w = spec.warp
    n = spec.frame_count
    if w is None:
        return [None] * n
    if isinstance(w, (list, tuple)):
        return [None if m is None else np.asarray(m, dtype=float) for m in w]
    if isinstance(w, dict):
        params = dict(w)
        keep_center = params.pop("identity_center", True)
        out = []
        for i in range(n):
            if keep_center and i == n // 2:
                out.append(None)
                continue
            out.append(random_warp(np.random.default_rng([spec.seed, i, 1]), spec.width, spec.height, **params))
        return out
    raise SpecInvalid(f"unrecognised warp: {w!r}")


def _base_boundaries(spec):
    cols = np.arange(spec.width, dtype=float)
    top = spec.ilm_depth_px + spec.tilt_px_per_col * cols
    depths = [top]
    for _, thick, _ in spec.layer_stack:
        depths.append(depths[-1] + thick)
    return np.stack(depths)


def _render(spec, depths):
    """Noise-free layered frame for (boundaries, width) depth curves."""
    levels = [spec.vitreous_intensity] + [l[2] for l in spec.layer_stack] + [spec.deep_intensity]
    rows = np.arange(spec.height, dtype=float)[:, None]
    img = np.full((spec.height, spec.width), float(levels[0]))
    last = depths.shape[0] - 1
    for k in range(last):
        step = levels[k + 1] - levels[k]
        img += step * np.clip((rows - depths[k][None, :]) / spec.ramp_px + 0.5, 0.0, 1.0)
    # below the retina the signal fades with depth
    below = rows - depths[last][None, :]
    deep = levels[-1]
    if spec.deep_decay_px:
        deep = deep * np.exp(-np.maximum(below, 0.0) / spec.deep_decay_px)
    img += (deep - levels[-2]) * np.clip(below / spec.ramp_px + 0.5, 0.0, 1.0)
    return img


def _roll_rows(img, k):
    out = np.zeros_like(img)
    if k > 0:
        out[k:] = img[:-k]
    elif k < 0:
        out[:k] = img[-k:]
    else:
        out[:] = img
    return out


def _warp_curves(h, depths, width):
    """Push boundary curves through ``h`` and resample them on integer columns."""
    xs = np.linspace(-0.5 * width, 1.5 * width, 4 * width + 1)
    cols = np.arange(width, dtype=float)
    out = np.empty_like(depths)
    base_cols = np.arange(width, dtype=float)
    for k, d in enumerate(depths):
        ys = np.interp(xs, base_cols, d, left=np.nan, right=np.nan)
        ok = np.isfinite(ys)
        p = apply_homography(h, np.column_stack([xs[ok], ys[ok]]))
        order = np.argsort(p[:, 0])
        out[k] = np.interp(cols, p[order, 0], p[order, 1], left=np.nan, right=np.nan)
    return out


def generate_phantom(spec):
    """Render a phantom stack and its ground truth; same spec and seed give identical output."""
    if isinstance(spec, dict):
        spec = PhantomSpec.from_dict(spec)
    spec.validate()
    offsets = _frame_offsets(spec)
    warps = _frame_warps(spec)
    base = _base_boundaries(spec)
    names = boundary_names(spec.layer_names)

    frames = np.empty((spec.frame_count, spec.height, spec.width), dtype=np.uint8)
    gt_bounds = np.empty((spec.frame_count,) + base.shape)
    regions = []
    for i in range(spec.frame_count):
        img = _roll_rows(_render(spec, base), offsets[i])
        depths = base + offsets[i]
        if warps[i] is not None:
            img = warp_perspective(img, warps[i])
            depths = _warp_curves(warps[i], depths, spec.width)
        rows = np.arange(spec.height)[:, None]
        for start, width, att in spec.shadows:
            cols = slice(int(start), int(start + width))
            # the vessel sits in the nerve fibre layer; everything beneath it is darkened
            top = np.nan_to_num(depths[1, cols], nan=0.0)
            below = rows >= np.floor(top + 0.5)[None, :]
            img[:, cols] = np.where(below, img[:, cols] * att, img[:, cols])
            regions.append(ShadowRegion(i, int(start), int(start + width)))
        if spec.speckle > 0:
            rng = np.random.default_rng([spec.seed, i, 0])
            s = spec.speckle
            img = img * np.exp(s * rng.standard_normal(img.shape) - 0.5 * s * s)
        frames[i] = to_uint8(img)
        gt_bounds[i] = depths

    gt = GroundTruth(
        names,
        gt_bounds,
        offsets,
        [np.eye(3) if w is None else w for w in warps],
        regions,
    )
    labels = [f"phantom_{i:04d}" for i in range(spec.frame_count)]
    return Stack(frames, source_labels=labels), gt
