import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from octpipe.core import (
    Stack, enface, group_average, histogram_stats, load_stack, map_frames, save_stack, to_uint8,
)
from octpipe.errors import DecodeError, DimensionMismatch, GroupMismatch, IoError, NoFrames

frames_strategy = arrays(np.uint8, st.tuples(st.integers(1, 4), st.integers(1, 12), st.integers(1, 12)))


def _write(path, name, arr):
    Image.fromarray(arr, mode="L").save(path / name)


def test_load_orders_by_index(tmp_path):
    for i in (2, 0, 10, 1):
        _write(tmp_path, f"bscan_{i:04d}.png", np.full((4, 5), i, np.uint8))
    s = load_stack(tmp_path)
    assert len(s) == 4 and (s.height, s.width) == (4, 5)
    assert [int(f[0, 0]) for f in s.frames] == [0, 1, 2, 10]


def test_load_360_frames(tmp_path):
    img = np.zeros((8, 8), np.uint8)
    for i in range(360):
        _write(tmp_path, f"bscan_{i:04d}.png", img)
    assert len(load_stack(tmp_path)) == 360


def test_empty_dir_no_frames(tmp_path):
    with pytest.raises(NoFrames):
        load_stack(tmp_path)


def test_mixed_sizes(tmp_path):
    _write(tmp_path, "bscan_0000.png", np.zeros((16, 16), np.uint8))
    _write(tmp_path, "bscan_0001.png", np.zeros((16, 16), np.uint8))
    _write(tmp_path, "bscan_0002.png", np.zeros((8, 8), np.uint8))
    with pytest.raises(DimensionMismatch):
        load_stack(tmp_path)


def test_duplicate_index_is_error(tmp_path):
    _write(tmp_path, "a_0001.png", np.zeros((4, 4), np.uint8))
    _write(tmp_path, "b_0001.png", np.zeros((4, 4), np.uint8))
    with pytest.raises(DecodeError):
        load_stack(tmp_path)


def test_undecodable_file(tmp_path):
    (tmp_path / "bscan_0000.png").write_bytes(b"not a png")
    with pytest.raises(DecodeError):
        load_stack(tmp_path)


def test_round_trip_and_sidecar(tmp_path):
    frames = np.random.default_rng(1).integers(0, 256, (3, 20, 30), dtype=np.uint8)
    save_stack(Stack(frames), tmp_path)
    meta = json.loads((tmp_path / "stack.json").read_text())
    assert meta == {"width": 30, "height": 20, "frames": 3, "axial_res_um_per_px": 0.836}
    back = load_stack(tmp_path)
    assert np.array_equal(back.frames, frames)
    assert back.axial_res_um_per_px == 0.836


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_read_only_target(tmp_path):
    ro = tmp_path / "ro"
    ro.mkdir()
    ro.chmod(0o500)
    with pytest.raises(IoError):
        save_stack(Stack(np.zeros((1, 4, 4), np.uint8)), ro / "x")


def test_unwritable_target_is_ioerror(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(IoError):
        save_stack(Stack(np.zeros((1, 4, 4), np.uint8)), blocker / "sub")


def test_multipage_tiff(tmp_path):
    pages = [Image.fromarray(np.full((6, 7), v, np.uint8)) for v in (5, 6, 7)]
    pages[0].save(tmp_path / "s.tif", save_all=True, append_images=pages[1:])
    s = load_stack(tmp_path / "s.tif")
    assert [int(f[0, 0]) for f in s.frames] == [5, 6, 7]


@settings(max_examples=25, deadline=None)
@given(frames_strategy)
def test_round_trip_property(tmp_path_factory, frames):
    d = tmp_path_factory.mktemp("rt")
    save_stack(Stack(frames), d)
    assert np.array_equal(load_stack(d).frames, frames)


def test_group_average_examples():
    s = Stack(np.zeros((1080, 2, 2), np.uint8))
    assert len(group_average(s, 3)) == 360
    assert np.all(group_average(Stack(np.full((3, 4, 4), 10, np.uint8)), 3).frames == 10)
    px = Stack(np.array([0, 255, 255], np.uint8).reshape(3, 1, 1))
    assert group_average(px, 3).frames[0, 0, 0] == 170
    with pytest.raises(GroupMismatch):
        group_average(Stack(np.zeros((4, 2, 2), np.uint8)), 3)


def test_group_average_half_up():
    s = Stack(np.array([1, 2], np.uint8).reshape(2, 1, 1))
    assert group_average(s, 2).frames[0, 0, 0] == 2


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, (6, 5, 5), elements=st.integers(0, 200)), st.integers(0, 55))
def test_group_average_offset_commutes(frames, c):
    a = group_average(Stack(frames), 3).frames.astype(int)
    b = group_average(Stack(frames + np.uint8(c)), 3).frames.astype(int)
    assert np.abs(b - a - c).max() <= 1


def test_enface_examples():
    assert np.all(enface(Stack(np.full((3, 8, 9), 64, np.uint8))) == 64)
    f = np.zeros((1, 10, 6), np.uint8)
    f[0, :, 2] = 255
    e = enface(Stack(f))
    assert e.shape == (1, 6) and e[0, 2] == 255 and e.sum() == 255


def test_enface_shows_phantom_shadows():
    from octpipe.phantom import PhantomSpec, generate_phantom
    stack, gt = generate_phantom(PhantomSpec(frame_count=3, shadows=[(100, 10, 0.4), (300, 20, 0.5)]))
    e = enface(stack).astype(float)
    dark = e[0] < 0.85 * np.median(e[0])
    truth = np.zeros(512, bool)
    truth[100:110] = truth[300:320] = True
    assert np.array_equal(dark, truth)


@settings(max_examples=25, deadline=None)
@given(arrays(np.uint8, (5, 7), elements=st.integers(0, 255)), st.integers(1, 4))
def test_enface_identical_frames(frame, n):
    e = enface(Stack(np.repeat(frame[None], n, axis=0)))
    col = np.floor(frame.astype(float).mean(axis=0) + 0.5)
    assert np.array_equal(e, np.repeat(col[None], n, 0).astype(np.uint8))


def test_histogram_examples():
    z = histogram_stats(np.zeros((4, 6), np.uint8))
    assert (z.mean, z.std_dev, z.zero_count) == (0.0, 0.0, 24)
    h = histogram_stats(np.array([[0, 255]], np.uint8))
    assert h.mean == 127.5 and h.std_dev == 127.5 and h.zero_count == 1


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 20), st.integers(1, 20))))
def test_histogram_invariants(img):
    h = histogram_stats(img)
    assert h.histogram.sum() == img.size and h.zero_count == h.histogram[0]
    assert h.mean == pytest.approx(img.mean()) and h.std_dev == pytest.approx(img.std())


def test_to_uint8_rounds_half_up():
    assert list(to_uint8([0.5, 1.5, 2.49, -3, 300])) == [1, 2, 2, 0, 255]


def test_map_frames_keeps_order():
    assert map_frames(lambda x: x * x, range(20), threads=4) == [x * x for x in range(20)]


def test_unindexed_files_are_skipped(tmp_path):
    save_stack(Stack(np.zeros((2, 4, 4), np.uint8)), tmp_path)
    _write(tmp_path, "figure.png", np.zeros((9, 9), np.uint8))
    assert len(load_stack(tmp_path)) == 2
