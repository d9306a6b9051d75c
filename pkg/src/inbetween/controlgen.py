"""Control-signal generators: trajectories, sparse RGB point controls, guide pixels.

Points are ``(x, y)`` in pixel coordinates (x = column, y = row).
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.morphology import convex_hull_image

from .media import MediaError, SceneTruth, VideoClip, luminance, read_clip, read_frame, write_clip, write_frame
from .optflow import FlowParams, estimate_flow, flow_to_color, segment_flow

MAX_INTERIOR_KEYFRAMES = 5


class ControlError(ValueError):
    pass


class CurriculumStage(enum.IntEnum):
    KEYFRAMES_ONLY = 1
    DENSE_FLOW = 2
    SPARSE_MOTION = 3
    GUIDE_PIXELS = 4


@dataclass
class Trajectory:
    """Time-indexed 2D point path: ``frames[i]`` is the frame index of ``xy[i]``."""

    frames: np.ndarray
    xy: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64).reshape(-1)
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        if len(self.frames) != len(self.xy):
            raise ControlError("trajectory frames and points differ in length")
        if len(self.frames) == 0:
            raise ControlError("trajectory must have at least one point")
        if np.any(np.diff(self.frames) <= 0):
            raise ControlError("trajectory frame indices must be strictly increasing")

    @classmethod
    def from_points(cls, xy, start_frame: int = 0) -> "Trajectory":
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        return cls(np.arange(start_frame, start_frame + len(xy)), xy)

    def __len__(self):
        return len(self.frames)

    def reversed(self) -> "Trajectory":
        """Same frame indices, points visited in the opposite order."""
        return Trajectory(self.frames.copy(), self.xy[::-1].copy())

    def point_at(self, k: int):
        idx = np.searchsorted(self.frames, k)
        if idx < len(self.frames) and self.frames[idx] == k:
            return self.xy[idx]
        return None

    def to_dict(self) -> dict:
        return {"points": [[int(k), float(x), float(y)] for k, (x, y) in zip(self.frames, self.xy)]}

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        pts = np.asarray(d["points"], dtype=np.float64).reshape(-1, 3)
        return cls(pts[:, 0].astype(np.int64), pts[:, 1:])


def save_trajectories(trajectories, path) -> None:
    payload = {"trajectories": [t.to_dict() for t in trajectories]}
    Path(path).write_text(json.dumps(payload, indent=1), encoding="utf-8")


def load_trajectories(path) -> list[Trajectory]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return [Trajectory.from_dict(t) for t in payload["trajectories"]]


def save_mask(mask: np.ndarray, path) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def load_mask(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L")) > 0


# ---------------------------------------------------------------------------
# Sparse Motion Generator


def sample_bilinear(field: np.ndarray, x: float, y: float) -> np.ndarray:
    """Bilinearly sample an ``(H, W, C)`` field at ``(x, y)``, clamping at the border."""
    coords = [[y], [x]]
    return np.array(
        [ndimage.map_coordinates(field[..., c], coords, order=1, mode="nearest")[0] for c in range(field.shape[2])]
    )


def select_seeds(
    flow: np.ndarray, count: int, min_separation: float = 2.0, magnitude_floor: float = 0.5
) -> list[tuple[float, float]]:
    """Greedy non-max suppression over flow magnitude.

    Candidates below ``magnitude_floor`` are ignored; ties break in raster order.
    A candidate is rejected if it lies closer than ``min_separation`` to an
    accepted seed.
    """
    if count < 1:
        raise ControlError("count must be >= 1")
    mag = np.hypot(flow[..., 0], flow[..., 1]).ravel()
    order = np.argsort(-mag, kind="stable")
    w = flow.shape[1]
    seeds: list[tuple[float, float]] = []
    for idx in order:
        if mag[idx] < magnitude_floor:
            break
        y, x = divmod(int(idx), w)
        if all((x - sx) ** 2 + (y - sy) ** 2 >= min_separation**2 for sx, sy in seeds):
            seeds.append((float(x), float(y)))
            if len(seeds) == count:
                break
    return seeds


def track_features(flows, seeds) -> list[Trajectory]:
    """Follow each seed through consecutive flows: p_{k+1} = clamp(p_k + flow_k(p_k))."""
    flows = list(flows)
    if not flows:
        raise ControlError("need at least one flow field")
    h, w = flows[0].shape[:2]
    out = []
    for sx, sy in seeds:
        if not (0 <= sx <= w - 1 and 0 <= sy <= h - 1):
            raise ControlError(f"seed ({sx}, {sy}) outside the {w}x{h} frame")
        pts = [(float(sx), float(sy))]
        for flow in flows:
            x, y = pts[-1]
            u, v = sample_bilinear(flow, x, y)
            pts.append((min(max(x + u, 0.0), w - 1.0), min(max(y + v, 0.0), h - 1.0)))
        out.append(Trajectory.from_points(pts))
    return out


def render_sparse_controls(
    trajectories,
    dims: tuple[int, int, int],
    sigma: float = 1.5,
    max_magnitude: float = 4.0,
    value_floor: float = 0.2,
) -> np.ndarray:
    """Splat each trajectory point as a flow-colored truncated Gaussian.

    Returns an ``(F, H, W, 3)`` array that is zero away from the splats.
    Overlapping splats combine by per-pixel maximum.
    """
    if sigma <= 0:
        raise ControlError("sigma must be positive")
    h, w, nframes = dims
    out = np.zeros((nframes, h, w, 3))
    radius = 3.0 * sigma
    r_int = int(np.ceil(radius))
    for traj in trajectories:
        disp = np.zeros_like(traj.xy)
        if len(traj) > 1:
            disp[:-1] = np.diff(traj.xy, axis=0)
            disp[-1] = disp[-2]
        colors = flow_to_color(disp, max_magnitude, value_floor=value_floor)
        for (k, (px, py)), color in zip(zip(traj.frames, traj.xy), colors):
            if not 0 <= k < nframes:
                continue
            y0, y1 = max(int(np.floor(py)) - r_int, 0), min(int(np.ceil(py)) + r_int, h - 1)
            x0, x1 = max(int(np.floor(px)) - r_int, 0), min(int(np.ceil(px)) + r_int, w - 1)
            if y0 > y1 or x0 > x1:
                continue
            ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1].astype(np.float64)
            d2 = (xs - px) ** 2 + (ys - py) ** 2
            weight = np.where(d2 <= radius**2, np.exp(-d2 / (2 * sigma**2)), 0.0)
            patch = weight[..., None] * color
            region = out[k, y0 : y1 + 1, x0 : x1 + 1]
            np.maximum(region, patch, out=region)
    return out


def auto_trajectories(
    first: np.ndarray,
    last: np.ndarray,
    count: int = 3,
    frames: int = 8,
    params: FlowParams | None = None,
    min_separation: float = 2.0,
) -> list[Trajectory]:
    """Straight-line trajectories between matched points of two frames.

    Flow from ``first`` to ``last`` picks ``count`` seeds; each trajectory moves
    linearly from its seed to seed + flow(seed) over ``frames`` steps.
    """
    if frames < 2:
        raise ControlError("frames must be >= 2")
    flow = estimate_flow(first, last, params)
    h, w = flow.shape[:2]
    out = []
    for sx, sy in select_seeds(flow, count, min_separation):
        end = np.array([sx, sy]) + flow[int(sy), int(sx)]
        s = np.linspace(0.0, 1.0, frames)[:, None]
        xy = (1 - s) * np.array([sx, sy]) + s * end
        xy[:, 0] = np.clip(xy[:, 0], 0, w - 1)
        xy[:, 1] = np.clip(xy[:, 1], 0, h - 1)
        out.append(Trajectory.from_points(xy))
    return out


# ---------------------------------------------------------------------------
# Augmented Frame Generator


@dataclass
class GuideFrameSet:
    """Guide-pixel frames; ``frame_indices[j]`` is the clip slot of ``frames[j]``."""

    frames: np.ndarray
    source_mask: np.ndarray
    source_frame_index: int
    frame_indices: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.frame_indices = np.asarray(self.frame_indices, dtype=np.int64)
        if len(self.frames) != len(self.frame_indices):
            raise ControlError("guide frames and slot indices differ in length")


def make_guide_frames(
    keyframe: np.ndarray,
    mask: np.ndarray,
    trajectory: Trajectory,
    n: int,
    source_frame_index: int = 0,
) -> GuideFrameSet:
    """Copy the masked keyframe region along ``n`` evenly spaced trajectory samples.

    Each guide frame holds the region translated by the rounded displacement
    ``p_k - p_0``; pixels pushed out of bounds are dropped, the rest is zero.
    """
    keyframe = np.asarray(keyframe, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != keyframe.shape[:2]:
        raise ControlError("mask and keyframe dimensions differ")
    if not mask.any():
        raise ControlError("empty guide region")
    if n < 1:
        raise ControlError("n must be >= 1")
    h, w = mask.shape
    samples = np.unique(np.round(np.linspace(0, len(trajectory) - 1, n)).astype(int))
    ys, xs = np.nonzero(mask)
    values = keyframe[ys, xs]
    frames = []
    for j in samples:
        dx, dy = np.round(trajectory.xy[j] - trajectory.xy[0]).astype(int)
        ty, tx = ys + dy, xs + dx
        keep = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
        g = np.zeros_like(keyframe)
        g[ty[keep], tx[keep]] = values[keep]
        frames.append(g)
    return GuideFrameSet(
        frames=np.stack(frames),
        source_mask=mask.copy(),
        source_frame_index=source_frame_index,
        frame_indices=trajectory.frames[samples],
    )


# ---------------------------------------------------------------------------
# condition bundles


@dataclass
class ConditionConfig:
    sigma: float = 1.5
    max_magnitude: float = 4.0
    value_floor: float = 0.2
    max_trajectories: int = 3
    min_separation: float = 2.0
    segment_floor: float = 0.5
    segment_relative: float = 0.3
    change_threshold: float = 0.01
    guide_samples: int = 4


def motion_region(first: np.ndarray, second: np.ndarray, flow: np.ndarray, cfg: ConditionConfig | None = None) -> np.ndarray:
    """Mask of the dominant moving region between two frames.

    The largest flow segment is intersected with the pixels whose luminance
    changed, and the convex hull of that overlap is returned. Horn-Schunck
    spreads motion into flat surroundings; the change test discards that
    spill while the hull restores flat sprite interiors. Falls back to the
    plain flow segment when nothing changed inside it.
    """
    cfg = cfg or ConditionConfig()
    mag = np.hypot(flow[..., 0], flow[..., 1])
    threshold = max(cfg.segment_floor, cfg.segment_relative * float(mag.max()))
    seg = segment_flow(flow, threshold, largest_k=1)
    changed = np.abs(luminance(np.asarray(second, float)) - luminance(np.asarray(first, float))) > cfg.change_threshold
    core = seg & changed
    if not core.any():
        return seg
    return convex_hull_image(core)


@dataclass
class ConditionBundle:
    """Everything the denoiser is conditioned on for one clip of ``num_frames`` frames."""

    num_frames: int
    keyframes: dict[int, np.ndarray]
    sparse_motion: np.ndarray
    guide: GuideFrameSet | None = None
    dense_flow_video: np.ndarray | None = None
    prompt_label: int | None = None
    trajectories: list[Trajectory] = field(default_factory=list)

    def validate(self, strict: bool = True) -> None:
        """Check shapes; ``strict`` also enforces the training keyframe rule."""
        for k in self.keyframes:
            if not 0 <= k < self.num_frames:
                raise ControlError(f"keyframe index {k} outside [0, {self.num_frames})")
        if self.sparse_motion.shape[0] != self.num_frames:
            raise ControlError("sparse motion clip length differs from num_frames")
        if strict:
            if 0 not in self.keyframes or self.num_frames - 1 not in self.keyframes:
                raise ControlError("keyframes must include the first and last frame")
            if not 2 <= len(self.keyframes) <= 2 + MAX_INTERIOR_KEYFRAMES:
                raise ControlError("keyframe count must lie in [2, 7]")

    @property
    def frame_shape(self) -> tuple[int, int]:
        return self.sparse_motion.shape[1:3]

    def with_sparse_motion(self, sparse_motion, trajectories=()) -> "ConditionBundle":
        return ConditionBundle(
            num_frames=self.num_frames,
            keyframes=dict(self.keyframes),
            sparse_motion=np.asarray(sparse_motion, dtype=np.float64),
            guide=self.guide,
            dense_flow_video=self.dense_flow_video,
            prompt_label=self.prompt_label,
            trajectories=list(trajectories),
        )


def sample_keyframe_indices(num_frames: int, rng: np.random.Generator) -> list[int]:
    interior = np.arange(1, num_frames - 1)
    n = int(rng.integers(0, min(MAX_INTERIOR_KEYFRAMES, len(interior)) + 1))
    picked = rng.choice(interior, size=n, replace=False) if n else []
    return sorted({0, num_frames - 1, *(int(i) for i in picked)})


def dense_flow_video(flows, max_magnitude: float) -> np.ndarray:
    """Color-coded flow clip; the last frame repeats the final flow."""
    colored = [flow_to_color(f, max_magnitude) for f in flows]
    colored.append(colored[-1])
    return np.stack(colored)


def build_condition(
    clip,
    flows,
    rng_seed,
    stage: CurriculumStage,
    cfg: ConditionConfig | None = None,
    prompt_label: int | None = None,
) -> ConditionBundle:
    """Training-time condition bundle for one clip.

    ``clip`` may be a :class:`VideoClip`, an ``(F, H, W, 3)`` array or a
    ``SceneTruth`` (whose ground-truth flows are used when ``flows`` is None).
    """
    cfg = cfg or ConditionConfig()
    if isinstance(clip, SceneTruth):
        if flows is None:
            flows = clip.flows
        if prompt_label is None:
            prompt_label = clip.spec.label or None
        clip = clip.clip
    frames = np.asarray(getattr(clip, "frames", clip), dtype=np.float64)
    nframes, h, w = frames.shape[:3]
    if nframes < 2:
        raise ControlError("clip needs at least 2 frames")
    stage = CurriculumStage(stage)
    rng = np.random.default_rng(rng_seed)

    keyframes = {k: frames[k] for k in sample_keyframe_indices(nframes, rng)}
    sparse = np.zeros((nframes, h, w, 3))
    bundle = ConditionBundle(nframes, keyframes, sparse, prompt_label=prompt_label)
    if stage == CurriculumStage.KEYFRAMES_ONLY:
        return bundle
    flows = list(flows)
    if stage == CurriculumStage.DENSE_FLOW:
        bundle.dense_flow_video = dense_flow_video(flows, cfg.max_magnitude)
        return bundle

    count = int(rng.integers(1, cfg.max_trajectories + 1))
    seeds = select_seeds(flows[0], count, cfg.min_separation)
    if seeds:
        bundle.trajectories = track_features(flows, seeds)
        bundle.sparse_motion = render_sparse_controls(
            bundle.trajectories, (h, w, nframes), cfg.sigma, cfg.max_magnitude, cfg.value_floor
        )
    if stage == CurriculumStage.GUIDE_PIXELS and bundle.trajectories:
        mask = motion_region(frames[0], frames[1], flows[0], cfg)
        if mask.any():
            bundle.guide = make_guide_frames(frames[0], mask, bundle.trajectories[0], cfg.guide_samples)
    return bundle


# ---------------------------------------------------------------------------
# bundle directories


def save_bundle(bundle: ConditionBundle, path) -> None:
    """Write a bundle as clip directories plus ``bundle.json``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    h, w = bundle.frame_shape
    meta = {
        "num_frames": bundle.num_frames,
        "height": h,
        "width": w,
        "keyframes": sorted(int(k) for k in bundle.keyframes),
        "prompt_label": bundle.prompt_label,
        "has_dense_flow": bundle.dense_flow_video is not None,
        "guide": None,
    }
    kdir = root / "keyframes"
    kdir.mkdir(exist_ok=True)
    for k, frame in bundle.keyframes.items():
        write_frame(frame, kdir / f"frame_{k:04d}.png")
    write_clip(VideoClip(np.clip(bundle.sparse_motion, 0, 1)), root / "sparse")
    if bundle.dense_flow_video is not None:
        write_clip(VideoClip(bundle.dense_flow_video), root / "dense")
    if bundle.guide is not None:
        gdir = root / "guide"
        gdir.mkdir(exist_ok=True)
        for j, g in zip(bundle.guide.frame_indices, bundle.guide.frames):
            write_frame(g, gdir / f"frame_{int(j):04d}.png")
        save_mask(bundle.guide.source_mask, root / "guide_mask.png")
        meta["guide"] = {
            "frame_indices": [int(j) for j in bundle.guide.frame_indices],
            "source_frame_index": bundle.guide.source_frame_index,
        }
    save_trajectories(bundle.trajectories, root / "trajectories.json")
    (root / "bundle.json").write_text(json.dumps(meta, indent=1), encoding="utf-8")


def load_bundle(path) -> ConditionBundle:
    root = Path(path)
    meta = json.loads((root / "bundle.json").read_text(encoding="utf-8"))
    keyframes = {k: read_frame(root / "keyframes" / f"frame_{k:04d}.png") for k in meta["keyframes"]}
    sparse = read_clip(root / "sparse").frames
    dense = read_clip(root / "dense").frames if meta.get("has_dense_flow") else None
    guide = None
    if meta.get("guide"):
        idx = meta["guide"]["frame_indices"]
        guide = GuideFrameSet(
            frames=np.stack([read_frame(root / "guide" / f"frame_{j:04d}.png") for j in idx]),
            source_mask=load_mask(root / "guide_mask.png"),
            source_frame_index=meta["guide"]["source_frame_index"],
            frame_indices=idx,
        )
    trajectories = load_trajectories(root / "trajectories.json") if (root / "trajectories.json").exists() else []
    if sparse.shape[0] != meta["num_frames"]:
        raise MediaError("sparse clip length does not match bundle.json")
    return ConditionBundle(
        num_frames=meta["num_frames"],
        keyframes=keyframes,
        sparse_motion=sparse,
        guide=guide,
        dense_flow_video=dense,
        prompt_label=meta.get("prompt_label"),
        trajectories=trajectories,
    )
