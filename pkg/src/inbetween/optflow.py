"""Dense optical flow, flow segmentation and flow color coding.

Flow fields are ``(H, W, 2)`` arrays holding the per-pixel displacement
``(u, v)`` in pixels, ``u`` along columns (x) and ``v`` along rows (y).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb
from scipy import ndimage

from .media import luminance

FLO_MAGIC = b"PIEH"

# Horn-Schunck neighbourhood average (weights sum to 1)
_HS_KERNEL = np.array(
    [[1 / 12, 1 / 6, 1 / 12], [1 / 6, 0.0, 1 / 6], [1 / 12, 1 / 6, 1 / 12]]
)
_CENTRAL_X = np.array([[-0.5, 0.0, 0.5]])
_STRUCT_3x3 = np.ones((3, 3), dtype=bool)


class FlowError(ValueError):
    pass


@dataclass(frozen=True)
class FlowParams:
    """Coarse-to-fine Horn-Schunck settings.

    ``smoothness_weight`` is the Horn-Schunck alpha, expressed for luminance on
    an 8-bit (0-255) scale.
    """

    smoothness_weight: float = 15.0
    iterations: int = 100
    pyramid_levels: int = 3
    warp_steps_per_level: int = 1

    def __post_init__(self):
        if self.smoothness_weight <= 0:
            raise FlowError("smoothness_weight must be positive")
        if self.iterations < 1 or self.pyramid_levels < 1 or self.warp_steps_per_level < 1:
            raise FlowError("iterations, pyramid_levels and warp_steps_per_level must be >= 1")


def _level_shapes(shape, levels):
    shapes = [tuple(shape)]
    for _ in range(levels - 1):
        h, w = shapes[-1]
        shapes.append(((h + 1) // 2, (w + 1) // 2))
    return shapes


def _resize(img: np.ndarray, shape) -> np.ndarray:
    """Bilinear resize with pixel-center alignment."""
    h, w = img.shape
    nh, nw = shape
    if (h, w) == (nh, nw):
        return img.copy()
    ys = (np.arange(nh) + 0.5) * (h / nh) - 0.5
    xs = (np.arange(nw) + 0.5) * (w / nw) - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(img, [gy, gx], order=1, mode="nearest")


def _downsample(img: np.ndarray, shape) -> np.ndarray:
    return _resize(ndimage.gaussian_filter(img, 1.0, mode="nearest"), shape)


def warp(img: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Backward-warp ``img`` so that ``out[y, x] = img[y + v, x + u]`` (bilinear)."""
    h, w = img.shape[:2]
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = [gy + flow[..., 1], gx + flow[..., 0]]
    if img.ndim == 2:
        return ndimage.map_coordinates(img, coords, order=1, mode="nearest")
    return np.stack(
        [ndimage.map_coordinates(img[..., c], coords, order=1, mode="nearest") for c in range(img.shape[2])],
        axis=-1,
    )


def _horn_schunck_level(a, b, u, v, alpha2, iterations, warp_steps):
    for _ in range(warp_steps):
        b_w = warp(b, np.stack([u, v], axis=-1))
        mean = 0.5 * (a + b_w)
        ix = ndimage.correlate(mean, _CENTRAL_X, mode="nearest")
        iy = ndimage.correlate(mean, _CENTRAL_X.T, mode="nearest")
        it = b_w - a
        u0, v0 = u.copy(), v.copy()
        denom = alpha2 + ix**2 + iy**2
        # Jacobi sweeps on the increment (u - u0, v - v0), smoothness on total flow
        for _ in range(iterations):
            ubar = ndimage.correlate(u, _HS_KERNEL, mode="nearest")
            vbar = ndimage.correlate(v, _HS_KERNEL, mode="nearest")
            resid = (ix * (ubar - u0) + iy * (vbar - v0) + it) / denom
            u = ubar - ix * resid
            v = vbar - iy * resid
    return u, v


def estimate_flow(a: np.ndarray, b: np.ndarray, params: FlowParams | None = None) -> np.ndarray:
    """Coarse-to-fine Horn-Schunck flow from frame ``a`` to frame ``b``."""
    params = params or FlowParams()
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise FlowError(f"frame dimensions differ: {a.shape} vs {b.shape}")
    la = luminance(a) * 255.0 if a.ndim == 3 else a * 255.0
    lb = luminance(b) * 255.0 if b.ndim == 3 else b * 255.0
    shapes = _level_shapes(la.shape, params.pyramid_levels)
    if min(shapes[-1]) < 8:
        raise FlowError(
            f"{params.pyramid_levels} pyramid levels leave a coarsest level of {shapes[-1]}, below 8x8"
        )

    pyr_a, pyr_b = [la], [lb]
    for shape in shapes[1:]:
        pyr_a.append(_downsample(pyr_a[-1], shape))
        pyr_b.append(_downsample(pyr_b[-1], shape))

    alpha2 = params.smoothness_weight**2
    u = np.zeros(shapes[-1])
    v = np.zeros(shapes[-1])
    for level in range(params.pyramid_levels - 1, -1, -1):
        shape = shapes[level]
        if u.shape != shape:
            sy = shape[0] / u.shape[0]
            sx = shape[1] / u.shape[1]
            u = _resize(u, shape) * sx
            v = _resize(v, shape) * sy
        u, v = _horn_schunck_level(
            pyr_a[level], pyr_b[level], u, v, alpha2, params.iterations, params.warp_steps_per_level
        )
    return np.stack([u, v], axis=-1)


def estimate_clip_flows(frames, params: FlowParams | None = None) -> list[np.ndarray]:
    """Flows between consecutive frames of a clip (``F - 1`` fields)."""
    frames = getattr(frames, "frames", frames)
    return [estimate_flow(frames[k], frames[k + 1], params) for k in range(len(frames) - 1)]


# ---------------------------------------------------------------------------
# segmentation


def segment_flow(
    flow: np.ndarray,
    magnitude_threshold: float,
    largest_k: int | None = None,
    morphology: bool = True,
) -> np.ndarray:
    """Boolean mask of pixels whose flow magnitude reaches the threshold.

    The raw threshold mask is cleaned with one 3x3 opening followed by one
    3x3 closing. With ``largest_k`` set, only the k largest 4-connected
    components survive (ties resolved in raster order of first pixel).
    """
    if magnitude_threshold < 0:
        raise FlowError("magnitude_threshold must be >= 0")
    mag = np.hypot(flow[..., 0], flow[..., 1])
    mask = mag >= magnitude_threshold
    if morphology:
        mask = ndimage.binary_erosion(mask, _STRUCT_3x3, border_value=1)
        mask = ndimage.binary_dilation(mask, _STRUCT_3x3)
        mask = ndimage.binary_dilation(mask, _STRUCT_3x3)
        mask = ndimage.binary_erosion(mask, _STRUCT_3x3, border_value=1)
    if largest_k is not None:
        if largest_k < 1:
            raise FlowError("largest_k must be >= 1")
        labels, n = ndimage.label(mask)
        if n > largest_k:
            sizes = np.bincount(labels.ravel())[1:]
            order = sorted(range(n), key=lambda i: (-sizes[i], i))
            keep = np.array(order[:largest_k]) + 1
            mask = np.isin(labels, keep)
    return mask


# ---------------------------------------------------------------------------
# color coding


def flow_to_color(flow: np.ndarray, max_magnitude: float, value_floor: float = 0.0) -> np.ndarray:
    """HSV color wheel: hue = direction, value = speed / max_magnitude, zero -> black.

    ``value_floor`` raises the value of every pixel to at least that level
    (0 keeps zero motion black).
    """
    if max_magnitude <= 0:
        raise FlowError("max_magnitude must be positive")
    flow = np.asarray(flow, dtype=np.float64)
    u, v = flow[..., 0], flow[..., 1]
    hue = np.mod(np.arctan2(v, u) / (2 * np.pi), 1.0)
    value = np.minimum(np.hypot(u, v) / max_magnitude, 1.0)
    if value_floor:
        value = np.maximum(value, value_floor)
    hsv = np.stack([hue, np.ones_like(hue), value], axis=-1)
    return hsv_to_rgb(hsv)


# ---------------------------------------------------------------------------
# Middlebury .flo


def write_flo(flow: np.ndarray, path) -> None:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise FlowError(f"flow must be H x W x 2, got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC)
        fh.write(struct.pack("<ii", w, h))
        fh.write(flow.astype("<f4").tobytes(order="C"))


def read_flo(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != FLO_MAGIC:
        raise FlowError(f"not a flo file: {path}")
    w, h = struct.unpack("<ii", data[4:12])
    if w <= 0 or h <= 0:
        raise FlowError(f"invalid flo dimensions {w}x{h}")
    expected = 2 * w * h * 4
    payload = data[12:]
    if len(payload) < expected:
        raise FlowError(f"truncated flo payload: expected {expected} bytes, got {len(payload)}")
    return np.frombuffer(payload[:expected], dtype="<f4").reshape(h, w, 2).astype(np.float32)
