import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from inbetween.media import render_scene
from inbetween.optflow import (
    FlowError,
    FlowParams,
    estimate_flow,
    flow_to_color,
    read_flo,
    segment_flow,
    warp,
    write_flo,
)

from conftest import one_sprite_spec


def epe(est, truth, mask):
    return np.hypot(*(est - truth)[mask].T).mean()


def test_identical_frames_zero_flow(rng):
    a = rng.random((32, 32, 3))
    assert np.abs(estimate_flow(a, a)).max() == 0.0


def test_square_translation_epe():
    truth = render_scene(one_sprite_spec(velocity=(2.0, 0.0), frames=2))
    flow = estimate_flow(*truth.clip.frames)
    assert epe(flow, truth.flows[0], truth.masks[0][0]) < 0.5


def test_textured_upward_motion():
    truth = render_scene(one_sprite_spec(velocity=(0.0, -1.0), texture="checker", start=(15, 16), frames=2))
    flow = estimate_flow(*truth.clip.frames)
    mask = truth.masks[0][0]
    close = np.hypot(flow[..., 0], flow[..., 1] + 1.0)[mask] <= 0.5
    assert close.mean() >= 0.9


def test_dimension_mismatch(rng):
    with pytest.raises(FlowError):
        estimate_flow(rng.random((32, 32, 3)), rng.random((32, 16, 3)))


def test_pyramid_too_deep(rng):
    a = rng.random((16, 16, 3))
    with pytest.raises(FlowError):
        estimate_flow(a, a, FlowParams(pyramid_levels=3))


@pytest.mark.parametrize("kw", [{"smoothness_weight": 0}, {"iterations": 0}, {"pyramid_levels": 0}])
def test_flow_params_validation(kw):
    with pytest.raises(FlowError):
        FlowParams(**kw)


def test_shift_equivariance():
    truth = render_scene(
        one_sprite_spec(velocity=(1.0, 1.0), start=(14, 14), texture="checker", frames=2, background_pattern=0.1)
    )
    a, b = truth.clip.frames
    # shift aligned with the coarsest pyramid grid; border rows wrap, so compare the interior
    s, m = 4, 8
    base = estimate_flow(a, b)
    shifted = estimate_flow(np.roll(a, (s, s), (0, 1)), np.roll(b, (s, s), (0, 1)))
    inner = np.roll(shifted, (-s, -s), (0, 1))[m:-m, m:-m]
    assert np.abs(inner - base[m:-m, m:-m]).max() < 0.1


def test_warp_integer_shift(rng):
    img = rng.random((10, 10))
    flow = np.zeros((10, 10, 2))
    flow[..., 0] = 1.0
    np.testing.assert_allclose(warp(img, flow)[:, :-1], img[:, 1:])


def test_segment_zero_flow():
    assert not segment_flow(np.zeros((16, 16, 2)), 0.5).any()


def test_segment_block():
    flow = np.zeros((24, 24, 2))
    flow[5:13, 7:15, 0] = 3.0
    mask = segment_flow(flow, 1.0)
    expected = np.zeros((24, 24), bool)
    expected[5:13, 7:15] = True
    np.testing.assert_array_equal(mask, expected)


def test_segment_largest_component():
    flow = np.zeros((32, 32, 2))
    flow[2:10, 2:10, 0] = 2.0
    flow[20:24, 20:24, 1] = 2.0
    mask = segment_flow(flow, 1.0, largest_k=1)
    np.testing.assert_array_equal(mask, _flood(segment_flow(flow, 1.0), (2, 2)))


def _flood(mask, seed):
    """4-connected flood fill from ``seed`` (explicit stack, independent of ndimage.label)."""
    out = np.zeros_like(mask)
    stack = [seed]
    while stack:
        y, x = stack.pop()
        if 0 <= y < mask.shape[0] and 0 <= x < mask.shape[1] and mask[y, x] and not out[y, x]:
            out[y, x] = True
            stack += [(y + 1, x), (y - 1, x), (y, x + 1), (y, x - 1)]
    return out


@settings(max_examples=30, deadline=None)
@given(
    flow=arrays(np.float64, (12, 12, 2), elements=st.floats(-3, 3)),
    t1=st.floats(0, 3),
    t2=st.floats(0, 3),
)
def test_segment_threshold_monotone(flow, t1, t2):
    lo, hi = sorted((t1, t2))
    a = segment_flow(flow, lo, morphology=False)
    b = segment_flow(flow, hi, morphology=False)
    assert not (b & ~a).any()


def test_color_black_and_red():
    np.testing.assert_array_equal(flow_to_color(np.zeros((1, 1, 2)), 4.0)[0, 0], (0, 0, 0))
    np.testing.assert_allclose(flow_to_color(np.array([[[4.0, 0.0]]]), 4.0)[0, 0], (1, 0, 0))


@settings(max_examples=40, deadline=None)
@given(
    angle=st.floats(-np.pi, np.pi),
    mag=st.floats(0.1, 10),
    phi=st.floats(-np.pi, np.pi),
)
def test_color_clamp_and_rotation(angle, mag, phi):
    from matplotlib.colors import rgb_to_hsv

    m = 2.0
    v = np.array([[[mag * np.cos(angle), mag * np.sin(angle)]]])
    if mag >= m:
        np.testing.assert_allclose(flow_to_color(v, m), flow_to_color(2 * v, m), atol=1e-12)
    rot = np.array([[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]])
    h0 = rgb_to_hsv(flow_to_color(v, m))[0, 0, 0]
    h1 = rgb_to_hsv(flow_to_color(v @ rot.T, m))[0, 0, 0]
    d = (h1 - h0 - phi / (2 * np.pi)) % 1.0
    assert min(d, 1 - d) < 1e-6


@settings(max_examples=20, deadline=None)
@given(flow=arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(2)), elements=st.floats(-1e6, 1e6, width=32)))
def test_flo_roundtrip(tmp_path_factory, flow):
    path = tmp_path_factory.mktemp("flo") / "f.flo"
    write_flo(flow, path)
    assert read_flo(path).tobytes() == flow.astype("<f4").tobytes()


def test_flo_layout(tmp_path):
    flow = np.arange(12, dtype=np.float32).reshape(2, 3, 2)
    write_flo(flow, tmp_path / "f.flo")
    data = (tmp_path / "f.flo").read_bytes()
    assert data[:4] == b"PIEH"
    assert np.frombuffer(data[4:12], "<i4").tolist() == [3, 2]
    assert np.frombuffer(data[12:], "<f4").tolist() == list(range(12))


def test_flo_bad_magic(tmp_path):
    (tmp_path / "f.flo").write_bytes(b"XXXX" + bytes(24))
    with pytest.raises(FlowError, match="not a flo file"):
        read_flo(tmp_path / "f.flo")


def test_flo_truncated(tmp_path):
    write_flo(np.zeros((2, 2, 2), np.float32), tmp_path / "f.flo")
    data = (tmp_path / "f.flo").read_bytes()
    (tmp_path / "f.flo").write_bytes(data[:-4])
    with pytest.raises(FlowError, match="truncated"):
        read_flo(tmp_path / "f.flo")
