"""Dual-branch conditional denoiser.

Data flow per clip: frames -> space-to-depth latent -> (content branch:
noisy latent | keyframe/guide latent | indicator channels) and (motion
branch: encoded sparse controls or dense-flow colors) -> per-branch patch
embedders -> channel concat -> fusion linear -> + timestep/label embedding
-> backbone -> output head -> unpatchify.

Latent tensors are channel-last: ``(F, H', W', C)`` per clip, with a leading
batch axis inside the network.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .controlgen import ConditionBundle
from .media import VideoClip

CKPT_MAGIC = b"CTLV"
CKPT_VERSION = 1
PARAMETERIZATIONS = ("eps", "clean", "residual")


class ModelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# latent codec


@dataclass(frozen=True)
class LatentCodec:
    """Parameter-free space-to-depth: ``(H, W, 3) -> (H/s, W/s, 3 s^2)``."""

    spatial_factor: int = 2

    @property
    def channels(self) -> int:
        return 3 * self.spatial_factor**2

    def encode(self, frames) -> np.ndarray:
        x = np.asarray(getattr(frames, "frames", frames))
        s = self.spatial_factor
        *lead, h, w, c = x.shape
        if h % s or w % s:
            raise ModelError(f"frame size {h}x{w} not divisible by {s}")
        x = x.reshape(*lead, h // s, s, w // s, s, c)
        x = np.moveaxis(x, -4, -3)  # (..., h/s, w/s, s, s, c)
        return x.reshape(*lead, h // s, w // s, s * s * c)

    def decode(self, latent) -> np.ndarray:
        z = np.asarray(latent)
        s = self.spatial_factor
        *lead, hs, ws, cs = z.shape
        if cs % (s * s):
            raise ModelError(f"latent channels {cs} not divisible by {s * s}")
        z = z.reshape(*lead, hs, ws, s, s, cs // (s * s))
        z = np.moveaxis(z, -3, -4)
        return z.reshape(*lead, hs * s, ws * s, cs // (s * s))


def encode_latent(clip, codec: LatentCodec = LatentCodec()) -> np.ndarray:
    return codec.encode(clip)


def decode_latent(latent, codec: LatentCodec = LatentCodec(), fps: float = 8.0) -> VideoClip:
    return VideoClip(codec.decode(latent), fps=fps)


def to_signed(x):
    """Map pixel range [0, 1] to the diffusion range [-1, 1]."""
    return x * 2.0 - 1.0


def from_signed(x):
    return (x + 1.0) / 2.0


# ---------------------------------------------------------------------------
# condition tensors


def content_condition(bundle: ConditionBundle, codec: LatentCodec, dropout_active: bool = False) -> np.ndarray:
    """Condition latent plus keyframe / guide indicator channels, ``(F, H', W', C + 2)``.

    Condition frames are encoded in the signed diffusion range so keyframe slots match x0.
    """
    nframes = bundle.num_frames
    h, w = bundle.frame_shape
    s = codec.spatial_factor
    out = np.zeros((nframes, h // s, w // s, codec.channels + 2))
    if bundle.guide is not None and not dropout_active:
        for k, g in zip(bundle.guide.frame_indices, bundle.guide.frames):
            if not 0 <= k < nframes:
                raise ModelError(f"guide slot {k} out of range")
            if k in bundle.keyframes:
                continue
            out[k, ..., :-2] = to_signed(codec.encode(g))
            out[k, ..., -1] = 1.0
    for k, frame in bundle.keyframes.items():
        if not 0 <= k < nframes:
            raise ModelError(f"keyframe index {k} out of range")
        out[k, ..., :-2] = to_signed(codec.encode(frame))
        out[k, ..., -2] = 1.0
        out[k, ..., -1] = 0.0
    return out


def assemble_content_latent(noisy, bundle: ConditionBundle, dropout_active: bool, codec: LatentCodec = LatentCodec()):
    """``[noisy | condition latent | keyframe indicator | guide indicator]`` per frame slot."""
    cond = content_condition(bundle, codec, dropout_active)
    if tuple(noisy.shape[:-1]) != cond.shape[:-1]:
        raise ModelError(f"noisy latent {tuple(noisy.shape)} does not match bundle {cond.shape}")
    return np.concatenate([np.asarray(noisy), cond], axis=-1)


def motion_condition(bundle: ConditionBundle, codec: LatentCodec) -> np.ndarray:
    """Encoded motion clip: dense flow colors if present, else sparse point controls."""
    clip = bundle.dense_flow_video if bundle.dense_flow_video is not None else bundle.sparse_motion
    return codec.encode(clip)


# ---------------------------------------------------------------------------
# network


@dataclass
class ModelConfig:
    frames: int = 8
    height: int = 32
    width: int = 32
    spatial_factor: int = 2
    patch_size: int = 4
    token_dim: int = 64
    layers: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    num_labels: int = 2
    single_branch: bool = False
    backbone: str = "transformer"
    parameterization: str = "residual"
    diffusion_steps: int = 50

    def __post_init__(self):
        s, p = self.spatial_factor, self.patch_size
        if self.height % s or self.width % s:
            raise ModelError("frame size must be divisible by the codec factor")
        if (self.height // s) % p or (self.width // s) % p:
            raise ModelError("latent size must be divisible by the patch size")
        if self.token_dim % self.heads:
            raise ModelError("token_dim must be divisible by heads")
        if self.token_dim % 4:
            raise ModelError("token_dim must be divisible by 4 for the positional encoding")
        if self.backbone not in BACKBONES:
            raise ModelError(f"unknown backbone {self.backbone!r}")
        if self.parameterization not in PARAMETERIZATIONS:
            raise ModelError(f"unknown parameterization {self.parameterization!r}")
        if self.diffusion_steps < 1:
            raise ModelError("diffusion_steps must be >= 1")

    @property
    def latent_channels(self) -> int:
        return 3 * self.spatial_factor**2

    @property
    def grid(self) -> tuple[int, int]:
        s, p = self.spatial_factor, self.patch_size
        return self.height // s // p, self.width // s // p

    @property
    def num_tokens(self) -> int:
        gh, gw = self.grid
        return self.frames * gh * gw

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def patchify(x: torch.Tensor, p: int) -> torch.Tensor:
    """``(B, F, H, W, C) -> (B, F * H/p * W/p, p * p * C)``."""
    b, f, h, w, c = x.shape
    if h % p or w % p:
        raise ModelError(f"spatial size {h}x{w} not divisible by patch size {p}")
    x = x.reshape(b, f, h // p, p, w // p, p, c).permute(0, 1, 2, 4, 3, 5, 6)
    return x.reshape(b, f * (h // p) * (w // p), p * p * c)


def unpatchify(tokens: torch.Tensor, frames: int, h: int, w: int, p: int) -> torch.Tensor:
    b, _, pc = tokens.shape
    c = pc // (p * p)
    x = tokens.reshape(b, frames, h // p, w // p, p, p, c).permute(0, 1, 2, 4, 3, 5, 6)
    return x.reshape(b, frames, h, w, c)


def sinusoid(positions: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = positions.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def space_time_encoding(frames: int, gh: int, gw: int, dim: int) -> torch.Tensor:
    """Separable fixed encoding: temporal sinusoid + (row, column) sinusoids."""
    t = sinusoid(torch.arange(frames), dim)
    rows = sinusoid(torch.arange(gh), dim // 2)
    cols = sinusoid(torch.arange(gw), dim // 2)
    spatial = torch.cat(
        [rows[:, None, :].expand(gh, gw, dim // 2), cols[None, :, :].expand(gh, gw, dim // 2)], dim=-1
    )
    pe = t[:, None, None, :] + spatial[None]
    return pe.reshape(frames * gh * gw, dim)


def keyframe_blend(latents: torch.Tensor, key: torch.Tensor) -> torch.Tensor:
    """Per frame, linear interpolation in time between the nearest keyframes on each side.

    ``latents`` is ``(B, F, H', W', C)`` with keyframe content at keyframe slots;
    ``key`` is ``(B, F)`` with 1 at keyframe slots. Frames outside the keyframe
    span copy the nearest keyframe; clips without keyframes give zeros.
    """
    b, f = key.shape
    idx = torch.arange(f, dtype=latents.dtype)
    is_key = key > 0.5
    big = torch.tensor(float(f) * 2, dtype=latents.dtype)
    # nearest keyframe index at or before / at or after each slot
    prev = torch.where(is_key, idx, -big).cummax(dim=1).values
    nxt = torch.where(is_key, idx, big).flip(1).cummin(dim=1).values.flip(1)
    has_prev, has_next = prev >= 0, nxt < f
    prev = torch.where(has_prev, prev, nxt)
    nxt = torch.where(has_next, nxt, prev)
    span = (nxt - prev).clamp(min=1)
    w_next = torch.where(nxt > prev, (idx - prev) / span, torch.zeros_like(span))
    valid = (has_prev | has_next).to(latents.dtype)
    rows = torch.arange(b)[:, None]
    before = latents[rows, prev.clamp(0, f - 1).long()]
    after = latents[rows, nxt.clamp(0, f - 1).long()]
    w = w_next[..., None, None, None]
    return ((1 - w) * before + w * after) * valid[..., None, None, None]


class Backbone(Protocol):
    """Maps ``(B, N, d)`` tokens and a ``(B, d)`` conditioning vector to ``(B, N, d)``."""

    def __call__(self, tokens: torch.Tensor, cond: torch.Tensor) -> torch.Tensor: ...


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class TransformerBackbone(nn.Module):
    """Pre-norm transformer; the conditioning vector is added to every token."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            Block(cfg.token_dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers)
        )

    def forward(self, tokens, cond):
        x = tokens + cond[:, None, :]
        for block in self.blocks:
            x = block(x)
        return x


class MixerBackbone(nn.Module):
    """Token-wise MLPs with mean-pooled global mixing. Small alternative backbone."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.token_dim
        self.norms = nn.ModuleList(nn.LayerNorm(d) for _ in range(cfg.layers))
        self.mlps = nn.ModuleList(
            nn.Sequential(nn.Linear(2 * d, cfg.mlp_ratio * d), nn.GELU(), nn.Linear(cfg.mlp_ratio * d, d))
            for _ in range(cfg.layers)
        )

    def forward(self, tokens, cond):
        x = tokens + cond[:, None, :]
        for norm, mlp in zip(self.norms, self.mlps):
            h = norm(x)
            pooled = h.mean(dim=1, keepdim=True).expand_as(h)
            x = x + mlp(torch.cat([h, pooled], dim=-1))
        return x


BACKBONES = {"transformer": TransformerBackbone, "mixer": MixerBackbone}


class Denoiser(nn.Module):
    """epsilon-prediction network over latent clips."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c, p, d = cfg.latent_channels, cfg.patch_size, cfg.token_dim
        content_in = p * p * (2 * c + 2)
        motion_in = p * p * c
        if cfg.single_branch:
            self.shared_embed = nn.Linear(content_in + motion_in, d)
        else:
            self.content_embed = nn.Linear(content_in, d)
            self.motion_embed = nn.Linear(motion_in, d)
            self.fuse = nn.Linear(2 * d, d)
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        # label 0 means "no label" and maps to a fixed zero vector
        self.label_embed = nn.Embedding(cfg.num_labels + 1, d, padding_idx=0)
        self.backbone = BACKBONES[cfg.backbone](cfg)
        self.out_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, p * p * c)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        if cfg.parameterization != "eps":
            # zero-initialized gate: training starts as plain eps-prediction
            self.gate = nn.Linear(d, 1)
            nn.init.zeros_(self.gate.weight)
            nn.init.zeros_(self.gate.bias)
            from .diffusion import default_schedule

            sched = default_schedule(cfg.diffusion_steps)
            abar = torch.tensor([sched.alpha_bar(t) for t in range(cfg.diffusion_steps + 1)], dtype=torch.float64)
            self.register_buffer("alpha_bar", abar, persistent=False)
        gh, gw = cfg.grid
        self.register_buffer("pos", space_time_encoding(cfg.frames, gh, gw, d).float(), persistent=False)

    def embed(self, branch: str, x: torch.Tensor) -> torch.Tensor:
        """Patchify ``(B, F, H', W', C)`` and project to tokens with the branch's linear layer."""
        layer = {"content": "content_embed", "motion": "motion_embed", "shared": "shared_embed"}[branch]
        return getattr(self, layer)(patchify(x, self.cfg.patch_size))

    def forward(self, noisy, t, content_cond, motion, labels=None):
        cfg = self.cfg
        b, f, h, w, c = noisy.shape
        if (f, h, w, c) != (cfg.frames, cfg.height // cfg.spatial_factor, cfg.width // cfg.spatial_factor, cfg.latent_channels):
            raise ModelError(f"noisy latent shape {tuple(noisy.shape)} does not match the model config")
        if content_cond.shape[:-1] != noisy.shape[:-1] or content_cond.shape[-1] != c + 2:
            raise ModelError(f"content condition shape {tuple(content_cond.shape)} mismatched")
        if motion.shape != noisy.shape:
            raise ModelError(f"motion latent shape {tuple(motion.shape)} mismatched")
        content = torch.cat([noisy, content_cond], dim=-1)
        if cfg.single_branch:
            tokens = self.embed("shared", torch.cat([content, motion], dim=-1))
        else:
            tokens = self.fuse(torch.cat([self.embed("content", content), self.embed("motion", motion)], dim=-1))
        tokens = tokens + self.pos.to(tokens.dtype)
        t = torch.as_tensor(t).reshape(-1)
        temb = self.time_mlp(sinusoid(t, cfg.token_dim).to(tokens.dtype))
        if labels is None:
            labels = torch.zeros(b, dtype=torch.long)
        cond = temb + self.label_embed(torch.as_tensor(labels, dtype=torch.long).reshape(-1))
        x = self.backbone(tokens, cond)
        out = unpatchify(self.head(self.out_norm(x)), f, h, w, cfg.patch_size)
        if cfg.parameterization == "eps":
            return out
        if t.min() < 1 or t.max() > cfg.diffusion_steps:
            raise ModelError(f"timesteps must lie in 1..{cfg.diffusion_steps}")
        # the head predicts the clean latent, or its offset from the keyframe blend
        key = content_cond[..., c : c + 1]
        clean = out
        if cfg.parameterization == "residual":
            clean = out + keyframe_blend(content_cond[..., :c], key[..., 0, 0, 0])
        # keyframe slots take the given keyframe
        clean = key * content_cond[..., :c] + (1 - key) * clean
        abar = self.alpha_bar[t].to(out.dtype).reshape(b, 1, 1, 1, 1)
        gate = self.gate(temb).reshape(b, 1, 1, 1, 1)
        return gate * (noisy - abar.sqrt() * clean) / (1 - abar).sqrt() + (1 - gate) * out


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def gradients(loss: torch.Tensor, model: nn.Module) -> dict[str, torch.Tensor]:
    """Gradient of a scalar loss w.r.t. every parameter, in enumeration order."""
    named = list(model.named_parameters())
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return {
        name: (g if g is not None else torch.zeros_like(p)) for (name, p), g in zip(named, grads)
    }


# ---------------------------------------------------------------------------
# bundle-level helpers


def bundle_tensors(bundles, codec: LatentCodec, dropout=None, dtype=torch.float32):
    """Stack content conditions, motion latents and labels for a list of bundles."""
    dropout = dropout if dropout is not None else [False] * len(bundles)
    content = np.stack([content_condition(b, codec, d) for b, d in zip(bundles, dropout)])
    motion = np.stack([motion_condition(b, codec) for b in bundles])
    labels = [b.prompt_label or 0 for b in bundles]
    return (
        torch.as_tensor(content, dtype=dtype),
        torch.as_tensor(motion, dtype=dtype),
        torch.as_tensor(labels, dtype=torch.long),
    )


@torch.no_grad()
def denoise(model: Denoiser, noisy, t: int, bundle: ConditionBundle) -> np.ndarray:
    """eps prediction for a single ``(F, H', W', C)`` noisy latent."""
    codec = LatentCodec(model.cfg.spatial_factor)
    dtype = next(model.parameters()).dtype
    content, motion, labels = bundle_tensors([bundle], codec, dtype=dtype)
    x = torch.as_tensor(np.asarray(noisy)[None], dtype=dtype)
    return model(x, torch.tensor([t]), content, motion, labels)[0].double().numpy()


@torch.no_grad()
def generate(model: Denoiser, bundles, schedule, seed: int = 0, paste_keyframes: bool = True) -> list[VideoClip]:
    """Ancestral sampling for a batch of bundles; keyframe slots are restored afterwards."""
    from .diffusion import ddpm_step

    bundles = list(bundles)
    cfg = model.cfg
    codec = LatentCodec(cfg.spatial_factor)
    dtype = next(model.parameters()).dtype
    content, motion, labels = bundle_tensors(bundles, codec, dtype=dtype)
    s = cfg.spatial_factor
    shape = (len(bundles), cfg.frames, cfg.height // s, cfg.width // s, cfg.latent_channels)
    gen = torch.Generator().manual_seed(int(seed))
    x = torch.randn(shape, generator=gen, dtype=torch.float64)
    for t in range(schedule.T, 0, -1):
        eps_hat = model(x.to(dtype), torch.full((len(bundles),), t), content, motion, labels).double()
        noise = torch.randn(shape, generator=gen, dtype=torch.float64) if t > 1 else None
        x = ddpm_step(x, eps_hat, t, schedule, noise)
    frames = np.clip(from_signed(codec.decode(x.numpy())), 0.0, 1.0)
    clips = []
    for frames_i, bundle in zip(frames, bundles):
        if paste_keyframes:
            for k, kf in bundle.keyframes.items():
                frames_i[k] = kf
        clips.append(VideoClip(frames_i))
    return clips


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: Denoiser, meta: dict | None = None, optimizer_state=None) -> None:
    """Binary checkpoint: magic, version, JSON header, float32 LE parameters.

    ``optimizer_state`` (optional) is a list of ``(exp_avg, exp_avg_sq)`` pairs in
    parameter order, appended after the parameters in the same encoding.
    """
    named = list(model.named_parameters())
    header = {
        "config": asdict(model.cfg),
        "params": [[name, list(p.shape)] for name, p in named],
        "meta": meta or {},
        "has_optimizer": optimizer_state is not None,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for _, p in named:
            fh.write(p.detach().cpu().numpy().astype("<f4").tobytes())
        if optimizer_state is not None:
            for m, v in optimizer_state:
                fh.write(np.asarray(m, dtype="<f4").tobytes())
                fh.write(np.asarray(v, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Returns ``(model, meta, optimizer_state_or_None)``."""
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ModelError(f"not a checkpoint file: {path}")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != CKPT_VERSION:
        raise ModelError(f"unsupported checkpoint version {version}")
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    model = Denoiser(ModelConfig.from_dict(header["config"]))
    offset = 12 + hlen

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape)) if shape else 1
        end = offset + 4 * n
        if end > len(data):
            raise ModelError("truncated checkpoint")
        arr = np.frombuffer(data[offset:end], dtype="<f4").reshape(shape)
        offset = end
        return torch.from_numpy(arr.astype(np.float32))

    params = dict(model.named_parameters())
    shapes = []
    with torch.no_grad():
        for name, shape in header["params"]:
            if name not in params or list(params[name].shape) != shape:
                raise ModelError(f"checkpoint parameter {name} {shape} does not fit the model")
            params[name].copy_(take(shape))
            shapes.append(shape)
    opt_state = None
    if header.get("has_optimizer"):
        opt_state = [(take(shape), take(shape)) for shape in shapes]
    return model, header["meta"], opt_state
