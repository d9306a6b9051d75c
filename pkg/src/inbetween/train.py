"""Curriculum training: keyframes -> dense flow -> sparse motion -> guide pixels.

Every random draw of a training step comes from a generator keyed by
``(seed, stage, stage_step)``, so a run can be stopped and resumed from a
checkpoint at any step and reproduce the uninterrupted loss curve.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .controlgen import ConditionConfig, CurriculumStage, build_condition
from .diffusion import NoiseSchedule, default_schedule, epsilon_loss, forward_noise_batch
from .media import SpriteSceneSpec, random_scene_spec, render_scene
from .model import (
    Denoiser,
    LatentCodec,
    ModelConfig,
    bundle_tensors,
    load_checkpoint,
    save_checkpoint,
    to_signed,
)
from .optflow import FlowParams, estimate_clip_flows

log = logging.getLogger(__name__)

Stage = CurriculumStage


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    stage_steps: tuple[int, int, int, int] = (5000, 200, 500, 500)
    batch_size: int = 8
    content_dropout_prob: float = 0.2
    seed: int = 0
    checkpoint_every: int = 0
    grad_clip: float = 1.0
    diffusion_steps: int = 50
    model: ModelConfig = field(default_factory=ModelConfig)
    condition: ConditionConfig = field(default_factory=ConditionConfig)

    def __post_init__(self):
        if not 0.0 <= self.content_dropout_prob <= 1.0:
            raise TrainingError("content_dropout_prob must lie in [0, 1]")
        if len(self.stage_steps) != 4 or any(s < 0 for s in self.stage_steps):
            raise TrainingError("stage_steps needs four non-negative integers")
        if self.batch_size < 1 or self.diffusion_steps < 1:
            raise TrainingError("batch_size and diffusion_steps must be >= 1")
        self.adam_betas = tuple(self.adam_betas)
        self.stage_steps = tuple(int(s) for s in self.stage_steps)
        # the clean-latent parameterization converts with this schedule, so the model follows it
        if self.model.diffusion_steps != self.diffusion_steps:
            self.model = dataclasses.replace(self.model, diffusion_steps=self.diffusion_steps)

    @property
    def schedule(self) -> NoiseSchedule:
        return default_schedule(self.diffusion_steps)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise TrainingError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        if "model" in kw:
            kw["model"] = ModelConfig.from_dict(kw["model"])
        if "condition" in kw:
            kw["condition"] = ConditionConfig(**kw["condition"])
        return cls(**kw)


def load_config(path) -> TrainConfig:
    return TrainConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# corpus


@dataclass
class Corpus:
    """Clips ``(N, F, H, W, 3)`` with estimated flows ``(N, F-1, H, W, 2)`` and labels."""

    clips: np.ndarray
    flows: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.clips)

    def save(self, path) -> None:
        np.savez_compressed(path, clips=self.clips, flows=self.flows, labels=self.labels)

    @classmethod
    def load(cls, path) -> "Corpus":
        with np.load(path) as z:
            return cls(z["clips"], z["flows"], z["labels"])


def corpus_specs(
    size: int,
    seed: int = 1234,
    canvas: tuple[int, int] = (32, 32),
    frames: int = 8,
    background_pattern: float = 0.1,
    **scene_kw,
) -> list[SpriteSceneSpec]:
    """The scene specs behind :func:`make_corpus` with the same arguments."""
    if size < 1:
        raise TrainingError("corpus must be nonempty")
    rng = np.random.default_rng(seed)
    return [
        random_scene_spec(rng, canvas, frames, background_pattern=background_pattern, **scene_kw)
        for _ in range(size)
    ]


def make_corpus(
    size: int,
    seed: int = 1234,
    canvas: tuple[int, int] = (32, 32),
    frames: int = 8,
    background_pattern: float = 0.1,
    flow_params: FlowParams | None = None,
    **scene_kw,
) -> Corpus:
    """Random sprite scenes plus flows estimated from the rendered frames."""
    clips, flows, labels = [], [], []
    for spec in corpus_specs(size, seed, canvas, frames, background_pattern, **scene_kw):
        truth = render_scene(spec)
        clips.append(truth.clip.frames.astype(np.float32))
        flows.append(np.stack(estimate_clip_flows(truth.clip, flow_params)).astype(np.float32))
        labels.append(spec.label)
    return Corpus(np.stack(clips), np.stack(flows), np.asarray(labels, dtype=np.int64))


# ---------------------------------------------------------------------------
# per-step randomness


@dataclass
class StepPlan:
    indices: np.ndarray
    timesteps: np.ndarray
    dropout: np.ndarray
    condition_seeds: np.ndarray
    noise: np.ndarray


def step_plan(cfg: TrainConfig, stage: Stage, stage_step: int, corpus_size: int) -> StepPlan:
    """All random draws for one training step, keyed by ``(seed, stage, step)``."""
    rng = np.random.default_rng([cfg.seed, int(stage), int(stage_step)])
    b = cfg.batch_size
    m = cfg.model
    s = m.spatial_factor
    indices = rng.integers(0, corpus_size, size=b)
    timesteps = rng.integers(1, cfg.diffusion_steps + 1, size=b)
    dropout = rng.random(b) < cfg.content_dropout_prob
    seeds = rng.integers(0, 2**63 - 1, size=b)
    noise = rng.standard_normal((b, m.frames, m.height // s, m.width // s, m.latent_channels))
    return StepPlan(indices, timesteps, dropout, seeds, noise.astype(np.float32))


# ---------------------------------------------------------------------------
# training state


@dataclass
class TrainState:
    model: Denoiser
    optimizer: torch.optim.Adam
    completed_stage: int = 0
    stage: int = 0
    stage_step: int = 0
    global_step: int = 0
    curve: list[tuple[int, int, float]] = field(default_factory=list)


def new_state(cfg: TrainConfig) -> TrainState:
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        model = Denoiser(cfg.model)
    return TrainState(model, make_optimizer(model, cfg))


def make_optimizer(model: Denoiser, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas, eps=cfg.adam_eps, foreach=False
    )


def save_state(state: TrainState, path) -> None:
    params = [p for p in state.model.parameters()]
    opt_state, adam_steps = [], []
    for p in params:
        st = state.optimizer.state.get(p)
        if st:
            opt_state.append((st["exp_avg"].numpy(), st["exp_avg_sq"].numpy()))
            adam_steps.append(float(st["step"]))
        else:
            opt_state.append((np.zeros(p.shape, np.float32), np.zeros(p.shape, np.float32)))
            adam_steps.append(0.0)
    meta = {
        "completed_stage": state.completed_stage,
        "stage": state.stage,
        "stage_step": state.stage_step,
        "global_step": state.global_step,
        "adam_steps": adam_steps,
    }
    save_checkpoint(path, state.model, meta, opt_state)


def load_state(path, cfg: TrainConfig) -> TrainState:
    model, meta, opt_state = load_checkpoint(path)
    optimizer = make_optimizer(model, cfg)
    if opt_state is not None:
        for p, (m, v), n in zip(model.parameters(), opt_state, meta.get("adam_steps", [])):
            if n > 0:
                optimizer.state[p] = {
                    "step": torch.tensor(n),
                    "exp_avg": m.clone(),
                    "exp_avg_sq": v.clone(),
                }
    return TrainState(
        model,
        optimizer,
        completed_stage=meta.get("completed_stage", 0),
        stage=meta.get("stage", 0),
        stage_step=meta.get("stage_step", 0),
        global_step=meta.get("global_step", 0),
    )


def write_curve(curve, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "stage", "loss"])
        for step, stage, loss in curve:
            writer.writerow([step, stage, repr(float(loss))])


def read_curve(path) -> list[tuple[int, int, float]]:
    with open(path, encoding="utf-8") as fh:
        return [(int(r["step"]), int(r["stage"]), float(r["loss"])) for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# loops


def train_step(state: TrainState, cfg: TrainConfig, stage: Stage, corpus: Corpus, plan: StepPlan) -> float:
    codec = LatentCodec(cfg.model.spatial_factor)
    clips = corpus.clips[plan.indices]
    bundles = [
        build_condition(
            corpus.clips[i], corpus.flows[i], int(seed), stage, cfg.condition, int(corpus.labels[i]) or None
        )
        for i, seed in zip(plan.indices, plan.condition_seeds)
    ]
    dropout = plan.dropout if stage == Stage.GUIDE_PIXELS else None
    content, motion, labels = bundle_tensors(bundles, codec, dropout)
    x0 = torch.as_tensor(to_signed(codec.encode(clips)), dtype=torch.float32)
    eps = torch.from_numpy(plan.noise)
    t = torch.as_tensor(plan.timesteps)
    x_t = forward_noise_batch(x0, t, eps, cfg.schedule)

    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    loss = epsilon_loss(state.model(x_t, t, content, motion, labels), eps)
    value = float(loss.detach())
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss at stage {int(stage)} step {state.stage_step}")
    loss.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(state.model.parameters(), cfg.grad_clip)
    state.optimizer.step()
    return value


def train_stage(
    state: TrainState,
    stage: Stage,
    corpus: Corpus,
    cfg: TrainConfig,
    steps: int | None = None,
    allow_skip: bool = False,
    checkpoint_dir=None,
    stop_after: int | None = None,
) -> TrainState:
    """Run (or continue) one curriculum stage.

    Resumes from ``state.stage_step`` when ``state.stage`` equals ``stage``.
    ``stop_after`` interrupts after that many steps of this call (for resume tests).
    """
    stage = Stage(stage)
    if len(corpus) == 0:
        raise TrainingError("empty corpus")
    if not allow_skip and state.completed_stage < int(stage) - 1 and state.stage != int(stage):
        raise TrainingError(
            f"stage {int(stage)} needs a checkpoint from stage {int(stage) - 1}; "
            f"this state completed stage {state.completed_stage}"
        )
    total = cfg.stage_steps[int(stage) - 1] if steps is None else steps
    if state.stage != int(stage):
        state.stage, state.stage_step = int(stage), 0
    done = 0
    while state.stage_step < total:
        if stop_after is not None and done >= stop_after:
            return state
        plan = step_plan(cfg, stage, state.stage_step, len(corpus))
        loss = train_step(state, cfg, stage, corpus, plan)
        state.curve.append((state.global_step, int(stage), loss))
        state.stage_step += 1
        state.global_step += 1
        done += 1
        if state.stage_step % 100 == 0:
            log.info("stage %d step %d/%d loss %.4f", int(stage), state.stage_step, total, loss)
        if checkpoint_dir and cfg.checkpoint_every and state.stage_step % cfg.checkpoint_every == 0:
            save_state(state, Path(checkpoint_dir) / f"stage{int(stage)}_step{state.stage_step:06d}.ckpt")
    state.completed_stage = max(state.completed_stage, int(stage))
    return state


def run_curriculum(cfg: TrainConfig, corpus: Corpus, out_dir=None, state: TrainState | None = None):
    """All four stages in order; writes ``stage{k}.ckpt`` and ``loss.csv`` to ``out_dir``.

    Returns ``(state, {stage: checkpoint_path})``.
    """
    state = state or new_state(cfg)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    checkpoints = {}
    for stage in Stage:
        if state.completed_stage >= int(stage):
            continue
        train_stage(state, stage, corpus, cfg, checkpoint_dir=out)
        if out:
            path = out / f"stage{int(stage)}.ckpt"
            save_state(state, path)
            checkpoints[int(stage)] = path
    if out:
        write_curve(state.curve, out / "loss.csv")
    return state, checkpoints


def train_direct_ablation(cfg: TrainConfig, corpus: Corpus, stage1: TrainState | None = None, out_dir=None):
    """Keyframe stage, then sparse motion directly (no dense-flow pre-stage).

    The sparse phase runs for the combined budget of stages 2-4, so the total
    step count equals the curriculum's. Pass ``stage1`` to reuse a finished
    keyframe-stage state (it is copied, not modified).
    """
    if stage1 is None:
        state = new_state(cfg)
        train_stage(state, Stage.KEYFRAMES_ONLY, corpus, cfg)
    else:
        state = _clone_state(stage1, cfg)
    sparse_steps = sum(cfg.stage_steps[1:])
    train_stage(state, Stage.SPARSE_MOTION, corpus, cfg, steps=sparse_steps, allow_skip=True)
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_state(state, out / "direct.ckpt")
        write_curve(state.curve, out / "direct_loss.csv")
    return state


def train_single_branch_ablation(cfg: TrainConfig, corpus: Corpus, out_dir=None):
    """Same curriculum with motion latents concatenated into one shared embedder."""
    model_cfg = ModelConfig.from_dict({**asdict(cfg.model), "single_branch": True})
    single_cfg = TrainConfig.from_dict({**cfg.to_dict(), "model": asdict(model_cfg)})
    state, _ = run_curriculum(single_cfg, corpus, out_dir)
    return state


def _clone_state(src: TrainState, cfg: TrainConfig) -> TrainState:
    model = Denoiser(src.model.cfg)
    model.load_state_dict(src.model.state_dict())
    optimizer = make_optimizer(model, cfg)
    for p_new, p_old in zip(model.parameters(), src.model.parameters()):
        st = src.optimizer.state.get(p_old)
        if st:
            optimizer.state[p_new] = {k: v.clone() for k, v in st.items()}
    return TrainState(
        model,
        optimizer,
        completed_stage=src.completed_stage,
        stage=src.stage,
        stage_step=src.stage_step,
        global_step=src.global_step,
        curve=list(src.curve),
    )
