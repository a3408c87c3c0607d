"""Stack data model, on-disk format, averaging, enface projection and histograms.

Images are plain 2-D ``uint8`` numpy arrays (rows = depth, columns = lateral
position).  A :class:`Stack` keeps its frames as one ``(N, H, W)`` array.
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import DecodeError, DimensionMismatch, GroupMismatch, IoError, NoFrames

log = logging.getLogger(__name__)

DEFAULT_AXIAL_RES_UM = 0.836
FRAME_TEMPLATE = "bscan_{:04d}.png"
SIDECAR = "stack.json"

_INDEX_RE = re.compile(r"(\d+)(?=\.[A-Za-z0-9]+$)")


def to_uint8(values):
    """Round half-up and saturate to the 8-bit range."""
    return np.clip(np.floor(np.asarray(values, dtype=np.float64) + 0.5), 0, 255).astype(np.uint8)


@dataclass
class Stack:
    frames: np.ndarray
    axial_res_um_per_px: float = DEFAULT_AXIAL_RES_UM
    source_labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim == 2:
            frames = frames[None]
        if frames.ndim != 3:
            raise DimensionMismatch(f"expected (N, H, W) frames, got shape {frames.shape}")
        if frames.shape[0] == 0:
            raise NoFrames("stack has no frames")
        if frames.shape[1] < 1 or frames.shape[2] < 1:
            raise DimensionMismatch("frames must be at least 1x1")
        if frames.dtype != np.uint8:
            if frames.min() < 0 or frames.max() > 255:
                raise ValueError("frame values must lie in 0..255")
            frames = frames.astype(np.uint8)
        self.frames = frames
        if not self.axial_res_um_per_px > 0:
            raise ValueError("axial_res_um_per_px must be positive")
        if not self.source_labels:
            self.source_labels = [FRAME_TEMPLATE.format(i) for i in range(len(frames))]
        elif len(self.source_labels) != len(frames):
            raise ValueError("one source label per frame is required")

    def __len__(self):
        return self.frames.shape[0]

    def __getitem__(self, i):
        return self.frames[i]

    @property
    def height(self):
        return self.frames.shape[1]

    @property
    def width(self):
        return self.frames.shape[2]

    def replace_frames(self, frames):
        """New stack with the same metadata and different pixels."""
        return Stack(np.asarray(frames), self.axial_res_um_per_px, list(self.source_labels))


def _frame_index(name):
    m = _INDEX_RE.search(name)
    return None if m is None else int(m.group(1))


def _decode(path):
    try:
        with PILImage.open(path) as im:
            if im.mode not in ("L", "1"):
                raise DecodeError(f"{path}: expected 8-bit grayscale, got mode {im.mode}")
            return np.array(im.convert("L"), dtype=np.uint8)
    except DecodeError:
        raise
    except Exception as exc:
        raise DecodeError(f"{path}: {exc}") from exc


def _read_tiff(path):
    pages = []
    try:
        with PILImage.open(path) as im:
            for i in range(getattr(im, "n_frames", 1)):
                im.seek(i)
                if im.mode != "L":
                    raise DecodeError(f"{path} page {i}: expected 8-bit grayscale, got {im.mode}")
                pages.append(np.array(im, dtype=np.uint8))
    except DecodeError:
        raise
    except Exception as exc:
        raise DecodeError(f"{path}: {exc}") from exc
    return pages


def _read_sidecar(directory):
    meta_path = Path(directory) / SIDECAR
    if not meta_path.exists():
        return {}
    try:
        return json.loads(meta_path.read_text())
    except (OSError, ValueError) as exc:
        raise DecodeError(f"{meta_path}: {exc}") from exc


def load_stack(path, pattern="*.png"):
    """Load a stack from a directory of frames or a multi-page TIFF.

    Frames are ordered by the zero-padded index in their file names; a
    duplicated index is an error rather than being reordered.  Files without
    an index (figures saved next to the frames) are skipped.
    """
    path = Path(path)
    if path.is_file() and path.suffix.lower() in (".tif", ".tiff"):
        pages = _read_tiff(path)
        if not pages:
            raise NoFrames(f"{path}: no pages")
        shapes = {p.shape for p in pages}
        if len(shapes) > 1:
            raise DimensionMismatch(f"{path}: pages differ in size {sorted(shapes)}")
        meta = _read_sidecar(path.parent)
        labels = [f"{path.name}#{i}" for i in range(len(pages))]
        return Stack(np.stack(pages), meta.get("axial_res_um_per_px", DEFAULT_AXIAL_RES_UM), labels)

    if not path.is_dir():
        raise NoFrames(f"{path}: not a directory")
    files = sorted(p for p in path.glob(pattern) if p.is_file() and p.name != SIDECAR)
    if not files:
        raise NoFrames(f"{path}: no files match {pattern!r}")

    indexed = {}
    for f in files:
        idx = _frame_index(f.name)
        if idx is None:
            log.info("skipping %s: no frame index in file name", f.name)
            continue
        if idx in indexed:
            raise DecodeError(f"duplicate frame index {idx}: {indexed[idx].name}, {f.name}")
        indexed[idx] = f
    if not indexed:
        raise NoFrames(f"{path}: no file name carries a frame index")
    order = sorted(indexed)
    frames = [_decode(indexed[i]) for i in order]
    shapes = {fr.shape for fr in frames}
    if len(shapes) > 1:
        raise DimensionMismatch(f"{path}: frames differ in size {sorted(shapes)}")

    meta = _read_sidecar(path)
    res = float(meta.get("axial_res_um_per_px", DEFAULT_AXIAL_RES_UM))
    return Stack(np.stack(frames), res, [indexed[i].name for i in order])


def save_stack(stack, path):
    """Write one PNG per frame plus the ``stack.json`` sidecar."""
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        for old in path.glob("bscan_*.png"):
            old.unlink()
        for i, frame in enumerate(stack.frames):
            PILImage.fromarray(frame, mode="L").save(path / FRAME_TEMPLATE.format(i))
        meta = {
            "width": stack.width,
            "height": stack.height,
            "frames": len(stack),
            "axial_res_um_per_px": stack.axial_res_um_per_px,
        }
        (path / SIDECAR).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write stack to {path}: {exc}") from exc


def group_average(stack, group_size):
    """Average adjacent groups of ``group_size`` frames (half-up rounding)."""
    g = int(group_size)
    if g < 1:
        raise GroupMismatch("group_size must be positive")
    n = len(stack)
    if n % g:
        raise GroupMismatch(f"{n} frames are not divisible into groups of {g}")
    sums = stack.frames.reshape(n // g, g, stack.height, stack.width).sum(axis=1, dtype=np.int64)
    out = ((2 * sums + g) // (2 * g)).astype(np.uint8)
    labels = ["+".join(stack.source_labels[i * g:(i + 1) * g]) for i in range(n // g)]
    return Stack(out, stack.axial_res_um_per_px, labels)


def enface(stack):
    """Mean projection over depth: one output row per frame."""
    frames = stack.frames if isinstance(stack, Stack) else np.asarray(stack)
    if frames.ndim != 3 or frames.shape[0] == 0:
        raise NoFrames("enface needs a non-empty stack")
    h = frames.shape[1]
    sums = frames.sum(axis=1, dtype=np.int64)
    return ((2 * sums + h) // (2 * h)).astype(np.uint8)


@dataclass
class HistogramStats:
    mean: float
    std_dev: float
    zero_count: int
    histogram: np.ndarray

    def as_dict(self):
        return {"mean": self.mean, "std_dev": self.std_dev, "zero_count": self.zero_count}


def histogram_stats(target):
    """Mean, population std-dev, zero count and 256-bin histogram of all pixels."""
    pixels = target.frames if isinstance(target, Stack) else np.asarray(target)
    pixels = pixels.astype(np.uint8, copy=False).ravel()
    hist = np.bincount(pixels, minlength=256).astype(np.int64)
    levels = np.arange(256, dtype=np.float64)
    total = hist.sum()
    if total == 0:
        return HistogramStats(0.0, 0.0, 0, hist)
    mean = float(hist @ levels / total)
    var = float(hist @ (levels - mean) ** 2 / total)
    return HistogramStats(mean, var ** 0.5, int(hist[0]), hist)


def map_frames(fn, frames, threads=1):
    """Apply ``fn`` to each item, optionally on a thread pool; order preserved."""
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, frames))
    return [fn(f) for f in frames]
