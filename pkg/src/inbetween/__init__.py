"""Motion-controlled video inbetweening at toy scale.

Sprite corpus and I/O (``media``), Horn-Schunck flow (``optflow``), sparse
motion controls (``controlgen``), DDPM math (``diffusion``), the dual-branch
denoiser (``model``), curriculum training (``train``) and evaluation
(``metrics``).
"""
from .controlgen import ConditionBundle, CurriculumStage, Trajectory
from .diffusion import NoiseSchedule, default_schedule
from .media import SpriteSceneSpec, VideoClip, render_scene
from .model import Denoiser, ModelConfig
from .optflow import FlowParams, estimate_flow

__all__ = [
    "ConditionBundle",
    "CurriculumStage",
    "Denoiser",
    "FlowParams",
    "ModelConfig",
    "NoiseSchedule",
    "SpriteSceneSpec",
    "Trajectory",
    "VideoClip",
    "default_schedule",
    "estimate_flow",
    "render_scene",
]
