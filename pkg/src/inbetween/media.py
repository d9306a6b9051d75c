"""Frames, clips, clip-directory I/O and the synthetic moving-sprite corpus.

Frames are ``(H, W, 3)`` float arrays with values in ``[0, 1]``. A clip stacks
them into an ``(F, H, W, 3)`` array. Pixels are only quantized to 8 bits at the
file boundary.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

MIN_SIDE = 8
SHAPES = ("circle", "square")
PATH_KINDS = ("linear", "parabolic", "sinusoidal")
TEXTURES = ("flat", "checker", "noise")


class MediaError(ValueError):
    """Raised for malformed frames, clips, scene specs or clip directories."""


def check_frame(frame) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise MediaError(f"frame must be H x W x 3, got shape {frame.shape}")
    if frame.shape[0] < MIN_SIDE or frame.shape[1] < MIN_SIDE:
        raise MediaError(f"frame must be at least {MIN_SIDE}x{MIN_SIDE}, got {frame.shape[:2]}")
    if not np.all(np.isfinite(frame)) or frame.min() < 0.0 or frame.max() > 1.0:
        raise MediaError("frame values must lie in [0, 1]")
    return frame


def luminance(frame: np.ndarray) -> np.ndarray:
    """Rec. 601 luma of an RGB frame (or stack of frames)."""
    frame = np.asarray(frame, dtype=np.float64)
    return frame[..., 0] * 0.299 + frame[..., 1] * 0.587 + frame[..., 2] * 0.114


@dataclass
class VideoClip:
    """An ordered stack of equally sized RGB frames."""

    frames: np.ndarray
    fps: float = 8.0

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise MediaError(f"clip must be F x H x W x 3, got shape {frames.shape}")
        if frames.shape[0] < 2:
            raise MediaError("a clip needs at least 2 frames")
        for frame in frames:
            check_frame(frame)
        if self.fps <= 0:
            raise MediaError("fps must be positive")
        self.frames = frames

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    def __len__(self):
        return self.num_frames

    def __getitem__(self, k):
        return self.frames[k]


# ---------------------------------------------------------------------------
# clip directories

_FRAME_RE = re.compile(r"^frame_(\d+)\.(png|ppm)$")


def write_clip(clip: VideoClip, path, ext: str = "png") -> list[Path]:
    """Write ``frame_%04d.<ext>`` files (8-bit RGB) into ``path``."""
    if ext not in ("png", "ppm"):
        raise MediaError(f"unsupported frame format {ext!r}")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for k, frame in enumerate(clip.frames):
        target = out / f"frame_{k:04d}.{ext}"
        write_frame(frame, target)
        written.append(target)
    return written


def write_frame(frame: np.ndarray, path) -> None:
    data = np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def read_frame(path) -> np.ndarray:
    with Image.open(path) as img:
        data = np.asarray(img.convert("RGB"), dtype=np.float64)
    return data / 255.0


def read_clip(path, fps: float = 8.0) -> VideoClip:
    """Read a directory of numbered frames written by :func:`write_clip`."""
    root = Path(path)
    if not root.is_dir():
        raise MediaError(f"not a directory: {root}")
    indexed = {}
    for entry in root.iterdir():
        m = _FRAME_RE.match(entry.name)
        if m:
            idx = int(m.group(1))
            if idx in indexed:
                raise MediaError(f"duplicate frame index {idx}")
            indexed[idx] = entry
    if not indexed:
        raise MediaError(f"no frames found in {root}")
    order = sorted(indexed)
    if order != list(range(len(order))):
        raise MediaError(f"non-contiguous frame index in {root}: {order}")
    frames = [read_frame(indexed[k]) for k in order]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise MediaError(f"inconsistent frame dimensions: {sorted(shapes)}")
    return VideoClip(np.stack(frames), fps=fps)


# ---------------------------------------------------------------------------
# synthetic sprite scenes


@dataclass
class SpritePath:
    """Parametric center path evaluated at integer frame indices.

    ``linear``: start + velocity * k
    ``parabolic``: start + velocity * k + accel * k^2 / 2
    ``sinusoidal``: start + velocity * k + amplitude * sin(2 pi k / period + phase)
    """

    kind: str = "linear"
    start: tuple[float, float] = (0.0, 0.0)
    velocity: tuple[float, float] = (0.0, 0.0)
    accel: tuple[float, float] = (0.0, 0.0)
    amplitude: tuple[float, float] = (0.0, 0.0)
    period: float = 8.0
    phase: float = 0.0

    def __post_init__(self):
        if self.kind not in PATH_KINDS:
            raise MediaError(f"unknown path kind {self.kind!r}")
        if self.kind == "sinusoidal" and self.period == 0:
            raise MediaError("sinusoidal path needs a nonzero period")

    def at(self, k) -> np.ndarray:
        k = np.asarray(k, dtype=np.float64)[..., None]
        pos = np.asarray(self.start, float) + np.asarray(self.velocity, float) * k
        if self.kind == "parabolic":
            pos = pos + 0.5 * np.asarray(self.accel, float) * k**2
        elif self.kind == "sinusoidal":
            pos = pos + np.asarray(self.amplitude, float) * np.sin(
                2 * np.pi * k / self.period + self.phase
            )
        return pos

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "start": list(self.start), "velocity": list(self.velocity)}
        if self.kind == "parabolic":
            d["accel"] = list(self.accel)
        if self.kind == "sinusoidal":
            d.update(amplitude=list(self.amplitude), period=self.period, phase=self.phase)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SpritePath":
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


@dataclass
class Sprite:
    shape: str
    size: int
    color: tuple[float, float, float]
    path: SpritePath
    texture: str = "flat"

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise MediaError(f"unknown sprite shape {self.shape!r}")
        if self.texture not in TEXTURES:
            raise MediaError(f"unknown sprite texture {self.texture!r}")
        if self.size < 1:
            raise MediaError("sprite size must be positive")
        if any(not 0.0 <= c <= 1.0 for c in self.color):
            raise MediaError("sprite color must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "shape": self.shape,
            "size": self.size,
            "color": list(self.color),
            "path": self.path.to_dict(),
            "texture": self.texture,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Sprite":
        return cls(
            shape=d["shape"],
            size=int(d["size"]),
            color=tuple(float(c) for c in d["color"]),
            path=SpritePath.from_dict(d["path"]),
            texture=d.get("texture", "flat"),
        )


@dataclass
class SpriteSceneSpec:
    canvas: tuple[int, int]
    background: tuple[float, float, float]
    sprites: list[Sprite]
    frame_count: int
    seed: int = 0
    label: int = 0
    background_pattern: float = 0.0
    pattern_wavelength: float = 16.0

    def validate(self) -> None:
        h, w = self.canvas
        if h < MIN_SIDE or w < MIN_SIDE:
            raise MediaError(f"canvas must be at least {MIN_SIDE}x{MIN_SIDE}, got {self.canvas}")
        if self.frame_count < 2:
            raise MediaError("frame_count must be >= 2")
        if self.seed < 0:
            raise MediaError("seed must be unsigned")
        if self.background_pattern < 0 or self.pattern_wavelength <= 0:
            raise MediaError("background pattern needs amplitude >= 0 and wavelength > 0")
        ks = np.arange(self.frame_count)
        for sprite in self.sprites:
            centers = sprite.path.at(ks)
            if not np.all(np.isfinite(centers)):
                raise MediaError("sprite path produced a non-finite center")
            lo, hi = -sprite.size, np.array([w, h]) + sprite.size
            if np.any(centers < lo) or np.any(centers > hi):
                raise MediaError("sprite path leaves the canvas expanded by the sprite size")

    def to_dict(self) -> dict:
        return {
            "canvas": list(self.canvas),
            "background": list(self.background),
            "sprites": [s.to_dict() for s in self.sprites],
            "frame_count": self.frame_count,
            "seed": self.seed,
            "label": self.label,
            "background_pattern": self.background_pattern,
            "pattern_wavelength": self.pattern_wavelength,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpriteSceneSpec":
        return cls(
            canvas=tuple(int(v) for v in d["canvas"]),
            background=tuple(float(c) for c in d["background"]),
            sprites=[Sprite.from_dict(s) for s in d["sprites"]],
            frame_count=int(d["frame_count"]),
            seed=int(d["seed"]),
            label=int(d.get("label", 0)),
            background_pattern=float(d.get("background_pattern", 0.0)),
            pattern_wavelength=float(d.get("pattern_wavelength", 16.0)),
        )


def load_scene_spec(path) -> SpriteSceneSpec:
    with open(path, encoding="utf-8") as fh:
        return SpriteSceneSpec.from_dict(json.load(fh))


def save_scene_spec(spec: SpriteSceneSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, indent=2)


@dataclass
class SceneTruth:
    """Rendered clip plus analytic ground truth.

    ``flows[k]`` maps frame k to frame k+1 (``(H, W, 2)``, pixels as (u, v)).
    ``trajectories[i]`` is the ``(F, 2)`` center path of sprite i as (x, y).
    ``masks[i]`` is the ``(F, H, W)`` occupancy of sprite i (ignoring occlusion).
    """

    clip: VideoClip
    flows: list[np.ndarray]
    trajectories: list[np.ndarray]
    masks: list[np.ndarray]
    spec: SpriteSceneSpec | None = field(default=None, repr=False)


def sprite_mask(sprite: Sprite, center, height: int, width: int) -> np.ndarray:
    # pixel centers sit at integer coordinates; hard edges, no anti-aliasing
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    cx, cy = center
    half = sprite.size / 2.0
    if sprite.shape == "square":
        return (xs >= cx - half) & (xs < cx + half) & (ys >= cy - half) & (ys < cy + half)
    return (xs - cx) ** 2 + (ys - cy) ** 2 < half**2


def background_image(spec: SpriteSceneSpec) -> np.ndarray:
    """Static background: flat color plus an optional smooth two-wave pattern.

    The pattern gives the flow estimator something to lock on to, so static
    background reads as zero motion instead of inheriting sprite flow.
    """
    h, w = spec.canvas
    img = np.empty((h, w, 3))
    img[:] = np.asarray(spec.background, dtype=np.float64)
    if spec.background_pattern > 0:
        rng = np.random.default_rng([spec.seed, 1])
        phase = rng.uniform(0, 2 * np.pi, size=2)
        theta = rng.uniform(0, np.pi, size=2)
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        lam = (spec.pattern_wavelength, 0.7 * spec.pattern_wavelength)
        waves = sum(
            np.sin(2 * np.pi * (xs * np.cos(theta[i]) + ys * np.sin(theta[i])) / lam[i] + phase[i])
            for i in range(2)
        )
        img = np.clip(img + 0.5 * spec.background_pattern * waves[..., None], 0.0, 1.0)
    return img


def _sprite_pattern(sprite: Sprite, rng: np.random.Generator) -> np.ndarray:
    n = sprite.size + 2
    color = np.asarray(sprite.color, dtype=np.float64)
    if sprite.texture == "flat":
        return np.broadcast_to(color, (n, n, 3)).copy()
    if sprite.texture == "checker":
        iy, ix = np.mgrid[0:n, 0:n]
        shade = np.where(((iy // 2) + (ix // 2)) % 2 == 0, 1.0, 0.5)
        return color * shade[..., None]
    shade = rng.uniform(0.35, 1.0, size=(n, n, 1))
    return color * shade


def _paint(img, sprite, pattern, center, mask):
    ys, xs = np.nonzero(mask)
    # texture is anchored to the sprite's top-left corner so it moves rigidly
    left = center[0] - sprite.size / 2.0
    top = center[1] - sprite.size / 2.0
    ty = np.clip(np.floor(ys - top).astype(int), 0, pattern.shape[0] - 1)
    tx = np.clip(np.floor(xs - left).astype(int), 0, pattern.shape[1] - 1)
    img[ys, xs] = pattern[ty, tx]


def render_scene(spec: SpriteSceneSpec) -> SceneTruth:
    """Render a sprite scene and its analytic flows, center paths and masks.

    Later sprites occlude earlier ones. Ground-truth flow at a pixel is the
    displacement of the topmost sprite covering it in the source frame, else 0.
    """
    spec.validate()
    h, w = spec.canvas
    nframes = spec.frame_count
    rng = np.random.default_rng(spec.seed)
    patterns = [_sprite_pattern(s, rng) for s in spec.sprites]
    ks = np.arange(nframes)
    centers = [s.path.at(ks) for s in spec.sprites]

    frames = np.empty((nframes, h, w, 3), dtype=np.float64)
    frames[:] = background_image(spec)
    masks = [np.zeros((nframes, h, w), dtype=bool) for _ in spec.sprites]
    top = np.full((nframes, h, w), -1, dtype=int)
    for i, sprite in enumerate(spec.sprites):
        for k in range(nframes):
            m = sprite_mask(sprite, centers[i][k], h, w)
            masks[i][k] = m
            top[k][m] = i
            _paint(frames[k], sprite, patterns[i], centers[i][k], m)

    flows = []
    for k in range(nframes - 1):
        flow = np.zeros((h, w, 2), dtype=np.float64)
        for i in range(len(spec.sprites)):
            flow[top[k] == i] = centers[i][k + 1] - centers[i][k]
        flows.append(flow)

    return SceneTruth(
        clip=VideoClip(frames),
        flows=flows,
        trajectories=[c.copy() for c in centers],
        masks=masks,
        spec=spec,
    )


def random_scene_spec(
    rng: np.random.Generator,
    canvas: tuple[int, int] = (32, 32),
    frame_count: int = 8,
    max_sprites: int = 2,
    max_speed: float = 2.5,
    min_speed: float = 0.75,
    kinds: tuple[str, ...] = PATH_KINDS,
    textures: tuple[str, ...] = ("flat", "checker", "noise"),
    size_range: tuple[int, int] = (6, 10),
    background_pattern: float = 0.0,
) -> SpriteSceneSpec:
    """Draw a random scene whose sprites stay on the canvas for the whole clip."""
    h, w = canvas
    background = tuple(float(c) for c in rng.uniform(0.0, 0.35, size=3))
    n_sprites = int(rng.integers(1, max_sprites + 1))
    sprites = []
    for _ in range(n_sprites):
        size = int(rng.integers(size_range[0], size_range[1] + 1))
        color = tuple(float(c) for c in rng.uniform(0.5, 1.0, size=3))
        kind = str(rng.choice(list(kinds)))
        # keep the whole path inside a margin so sprites never leave the frame
        for _attempt in range(50):
            speed = rng.uniform(min_speed, max_speed)
            angle = rng.uniform(0, 2 * np.pi)
            vel = (speed * np.cos(angle), speed * np.sin(angle))
            path = SpritePath(kind=kind, velocity=vel)
            if kind == "parabolic":
                path.accel = tuple(rng.uniform(-0.3, 0.3, size=2))
            elif kind == "sinusoidal":
                path.amplitude = tuple(rng.uniform(-2.0, 2.0, size=2))
                path.period = float(rng.uniform(4, 12))
                path.phase = 0.0
            rel = path.at(np.arange(frame_count))
            margin = size / 2.0 + 1
            lo_x = margin - rel[:, 0].min()
            hi_x = w - 1 - margin - rel[:, 0].max()
            lo_y = margin - rel[:, 1].min()
            hi_y = h - 1 - margin - rel[:, 1].max()
            if lo_x <= hi_x and lo_y <= hi_y:
                path.start = (
                    float(np.round(rng.uniform(lo_x, hi_x))),
                    float(np.round(rng.uniform(lo_y, hi_y))),
                )
                break
        else:
            path = SpritePath(kind="linear", start=(w / 2.0, h / 2.0), velocity=(0.0, 0.0))
        sprites.append(
            Sprite(
                shape=str(rng.choice(SHAPES)),
                size=size,
                color=color,
                path=path,
                texture=str(rng.choice(list(textures))),
            )
        )
    label = 1 + SHAPES.index(sprites[-1].shape)
    return SpriteSceneSpec(
        canvas=(h, w),
        background=background,
        sprites=sprites,
        frame_count=frame_count,
        seed=int(rng.integers(0, 2**31)),
        label=label,
        background_pattern=background_pattern,
        pattern_wavelength=float(rng.uniform(12.0, 20.0)),
    )
