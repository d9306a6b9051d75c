"""``inbetween`` command line: synthesize, estimate flow, build controls, train, generate, evaluate.

Exit codes: 0 success, 2 invalid input, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import controlgen as cg
from . import media, metrics, optflow
from .controlgen import ConditionBundle, ConditionConfig, Trajectory
from .diffusion import default_schedule

log = logging.getLogger("inbetween")


class UsageError(ValueError):
    pass


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _flow_params(args) -> optflow.FlowParams:
    if getattr(args, "config", None):
        return optflow.FlowParams(**_read_json(args.config))
    return optflow.FlowParams()


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError(f"{args.command}: missing {', '.join(missing)}")


def _out(args) -> Path:
    _require(args, "out")
    return Path(args.out)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> None:
    """Render scenes to ``<out>/scene_NNNN/`` (frames, scene.json, ground-truth flows and paths)."""
    out = _out(args)
    if args.config:
        specs = [media.load_scene_spec(args.config)]
    else:
        rng = np.random.default_rng(args.seed)
        kw = {"background_pattern": args.background_pattern}
        if args.frames is not None:
            kw["frame_count"] = args.frames
        specs = [media.random_scene_spec(rng, **kw) for _ in range(args.count or 1)]
    for i, spec in enumerate(specs):
        truth = media.render_scene(spec)
        d = out / f"scene_{i:04d}"
        media.write_clip(truth.clip, d)
        media.save_scene_spec(spec, d / "scene.json")
        fdir = d / "flows"
        fdir.mkdir(exist_ok=True)
        for k, flow in enumerate(truth.flows):
            optflow.write_flo(flow, fdir / f"flow_{k:04d}.flo")
        cg.save_trajectories([Trajectory.from_points(t) for t in truth.trajectories], d / "trajectories.json")
    print(f"wrote {len(specs)} scene(s) to {out}")


def cmd_flow(args) -> None:
    _require(args, "a", "b", "out")
    flow = optflow.estimate_flow(media.read_frame(args.a), media.read_frame(args.b), _flow_params(args))
    optflow.write_flo(flow, args.out)
    mag = np.hypot(flow[..., 0], flow[..., 1])
    print(f"flow {flow.shape[1]}x{flow.shape[0]} max |d| {mag.max():.3f} -> {args.out}")


def cmd_segment(args) -> None:
    _require(args, "flow", "out")
    flow = optflow.read_flo(args.flow).astype(np.float64)
    threshold = args.threshold
    if threshold is None:
        mag = np.hypot(flow[..., 0], flow[..., 1])
        cfg = ConditionConfig()
        threshold = max(cfg.segment_floor, cfg.segment_relative * float(mag.max()))
    mask = optflow.segment_flow(flow, threshold, largest_k=args.count)
    cg.save_mask(mask, args.out)
    print(f"mask: {int(mask.sum())} pixels at threshold {threshold:.3f} -> {args.out}")


def cmd_traj(args) -> None:
    _require(args, "first", "last", "out")
    trajs = cg.auto_trajectories(
        media.read_frame(args.first),
        media.read_frame(args.last),
        count=args.count if args.count is not None else 3,
        frames=args.frames if args.frames is not None else 8,
        params=_flow_params(args),
    )
    cg.save_trajectories(trajs, args.out)
    print(f"wrote {len(trajs)} trajectories -> {args.out}")


def _sparse(trajs, shape, frames, cfg: ConditionConfig) -> np.ndarray:
    h, w = shape
    return cg.render_sparse_controls(trajs, (h, w, frames), cfg.sigma, cfg.max_magnitude, cfg.value_floor)


def cmd_controls(args) -> None:
    """Bundle directory from keyframe(s), a trajectory file and an optional guide mask."""
    _require(args, "traj", "first", "out")
    cfg = ConditionConfig()
    first = media.read_frame(args.first)
    trajs = cg.load_trajectories(args.traj)
    frames = args.frames if args.frames is not None else max(int(t.frames[-1]) for t in trajs) + 1
    keyframes = {0: first}
    if args.last:
        keyframes[frames - 1] = media.read_frame(args.last)
    bundle = ConditionBundle(
        frames, keyframes, _sparse(trajs, first.shape[:2], frames, cfg), prompt_label=args.label, trajectories=trajs
    )
    if args.mask:
        if not trajs:
            raise UsageError("a guide mask needs at least one trajectory")
        bundle.guide = cg.make_guide_frames(first, cg.load_mask(args.mask), trajs[0], cfg.guide_samples)
    bundle.validate(strict=args.last is not None)
    cg.save_bundle(bundle, args.out)
    print(f"bundle with {len(trajs)} trajectories -> {args.out}")


def _load_corpus_dir(path) -> list[media.SceneTruth]:
    dirs = sorted(p for p in Path(path).glob("scene_*") if p.is_dir())
    if not dirs:
        raise UsageError(f"no scene_* directories in {path}")
    return [media.render_scene(media.load_scene_spec(d / "scene.json")) for d in dirs]


def cmd_train(args) -> None:
    from . import train

    out = _out(args)
    cfg = train.load_config(args.config) if args.config else train.TrainConfig()
    if args.seed is not None and args.seed != cfg.seed:
        cfg = train.TrainConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    out.mkdir(parents=True, exist_ok=True)
    if args.corpus:
        truths = _load_corpus_dir(args.corpus)
        corpus = train.Corpus(
            np.stack([t.clip.frames for t in truths]).astype(np.float32),
            np.stack([np.stack(optflow.estimate_clip_flows(t.clip)) for t in truths]).astype(np.float32),
            np.array([t.spec.label for t in truths], dtype=np.int64),
        )
    else:
        m = cfg.model
        corpus = train.make_corpus(args.count or 256, seed=cfg.seed + 1234, canvas=(m.height, m.width), frames=m.frames)
    if args.stage is None:
        state, ckpts = train.run_curriculum(cfg, corpus, out)
        print(f"curriculum done: {', '.join(str(p) for p in ckpts.values())}")
        return
    stage = train.Stage(args.stage)
    if args.ckpt:
        state = train.load_state(args.ckpt, cfg)
    elif stage == train.Stage.KEYFRAMES_ONLY:
        state = train.new_state(cfg)
    else:
        raise UsageError(f"stage {int(stage)} needs --ckpt from stage {int(stage) - 1}")
    train.train_stage(state, stage, corpus, cfg, checkpoint_dir=out)
    train.save_state(state, out / f"stage{int(stage)}.ckpt")
    train.write_curve(state.curve, out / f"loss_stage{int(stage)}.csv")
    print(f"stage {int(stage)} done -> {out / f'stage{int(stage)}.ckpt'}")


def _load_model(args):
    from .model import load_checkpoint

    _require(args, "ckpt")
    model, _, _ = load_checkpoint(args.ckpt)
    model.eval()
    return model


def _generate(model, bundle: ConditionBundle, seed: int, steps: int | None):
    from .model import generate

    return generate(model, [bundle], default_schedule(steps or 50), seed=seed)[0]


def cmd_generate(args) -> None:
    _require(args, "bundle", "out")
    model = _load_model(args)
    clip = _generate(model, cg.load_bundle(args.bundle), args.seed, args.diffusion_steps)
    media.write_clip(clip, args.out)
    print(f"generated {clip.num_frames} frames -> {args.out}")


def cmd_eval(args) -> None:
    """Motion metric, PSNR/SSIM and sensitivity over a synthesized corpus.

    Without ``--ckpt`` the ground-truth clips themselves are scored.
    """
    _require(args, "corpus", "out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    truths = _load_corpus_dir(args.corpus)
    model = _load_model(args) if args.ckpt else None
    schedule = default_schedule(args.diffusion_steps or 50)
    rows = []
    for i, truth in enumerate(truths):
        bundle = metrics.commanded_bundle(truth)
        traj = bundle.trajectories[0]
        sens = float("nan")
        if model is None:
            clip = truth.clip
        else:
            clip = _generate(model, bundle, args.seed, args.diffusion_steps)
            sens = metrics.motion_sensitivity(model, (bundle, metrics.opposite_bundle(bundle)), schedule, args.seed)
        rows.append(
            metrics.EvalRow(
                f"scene_{i:04d}",
                metrics.motion_metric(clip, traj),
                metrics.psnr(clip, truth.clip),
                metrics.ssim(clip, truth.clip),
                sens,
            )
        )
    summary = metrics.write_report(rows, out / "report.csv", out / "summary.json")
    print(json.dumps(summary))


def _recipe_bundle(args) -> ConditionBundle:
    cfg = ConditionConfig()
    nframes = args.frames if args.frames is not None else 8
    count = args.count if args.count is not None else 3
    kind = args.kind
    if kind == "loop":
        _require(args, "first")
        frame = media.read_frame(args.first)
        trajs = cg.load_trajectories(args.traj) if args.traj else []
        keyframes = {0: frame, nframes - 1: frame.copy()}
    elif kind == "animate":
        _require(args, "first", "traj")
        frame = media.read_frame(args.first)
        trajs = cg.load_trajectories(args.traj)
        keyframes = {0: frame}
    elif kind == "camera":
        _require(args, "first", "last")
        frame = media.read_frame(args.first)
        last = media.read_frame(args.last)
        trajs = cg.auto_trajectories(frame, last, count, nframes)
        keyframes = {0: frame, nframes - 1: last}
    else:
        _require(args, "clip", "missing")
        clip = media.read_clip(args.clip)
        nframes = clip.num_frames
        missing = {int(k) for k in args.missing.split(",") if k.strip()}
        if not missing or min(missing) <= 0 or max(missing) >= nframes - 1:
            raise UsageError("--missing must list interior frame indices")
        present = [k for k in range(nframes) if k not in missing]
        keyframes = {k: clip.frames[k] for k in present}
        frame = clip.frames[0]
        trajs = []
        for p, q in zip(present, present[1:]):
            if q - p < 2:
                continue
            for t in cg.auto_trajectories(clip.frames[p], clip.frames[q], count, q - p + 1):
                trajs.append(Trajectory.from_points(t.xy, start_frame=p))
    sparse = _sparse(trajs, frame.shape[:2], nframes, cfg)
    bundle = ConditionBundle(nframes, keyframes, sparse, prompt_label=args.label, trajectories=trajs)
    if args.mask and trajs:
        bundle.guide = cg.make_guide_frames(frame, cg.load_mask(args.mask), trajs[0], cfg.guide_samples)
    # a single-frame animation deliberately breaks the first+last keyframe rule
    bundle.validate(strict=kind in ("loop", "camera"))
    return bundle


def cmd_recipe(args) -> None:
    out = _out(args)
    bundle = _recipe_bundle(args)
    cg.save_bundle(bundle, out / "bundle")
    msg = f"{args.kind} bundle -> {out / 'bundle'}"
    if args.ckpt:
        clip = _generate(_load_model(args), bundle, args.seed, args.diffusion_steps)
        media.write_clip(clip, out / "generated")
        msg += f", generated -> {out / 'generated'}"
    print(msg)


COMMANDS = {
    "synth": cmd_synth,
    "flow": cmd_flow,
    "segment": cmd_segment,
    "traj": cmd_traj,
    "controls": cmd_controls,
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "recipe": cmd_recipe,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config (scene spec, flow params or TrainConfig)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out")
    common.add_argument("--ckpt")
    common.add_argument("--mask")
    common.add_argument("--traj")
    common.add_argument("--label", type=int)
    common.add_argument("--frames", type=int)
    common.add_argument("--count", type=int)
    common.add_argument("--stage", type=int, choices=range(1, 5))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="inbetween", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="render sprite scenes")
    p.add_argument("--background-pattern", type=float, default=0.1)
    p = sub.add_parser("flow", parents=[common], help="optical flow between two frames")
    p.add_argument("--a")
    p.add_argument("--b")
    p = sub.add_parser("segment", parents=[common], help="moving-region mask from a .flo file")
    p.add_argument("--flow")
    p.add_argument("--threshold", type=float)
    p = sub.add_parser("traj", parents=[common], help="automatic trajectories between two frames")
    p.add_argument("--first")
    p.add_argument("--last")
    p = sub.add_parser("controls", parents=[common], help="condition bundle from trajectories")
    p.add_argument("--first")
    p.add_argument("--last")
    p = sub.add_parser("train", parents=[common], help="curriculum training")
    p.add_argument("--corpus", help="directory written by synth (default: generated corpus)")
    p = sub.add_parser("generate", parents=[common], help="sample a clip for a bundle")
    p.add_argument("--bundle")
    p.add_argument("--diffusion-steps", type=int)
    p = sub.add_parser("eval", parents=[common], help="evaluation report over a scene corpus")
    p.add_argument("--corpus")
    p.add_argument("--diffusion-steps", type=int)
    p = sub.add_parser("recipe", parents=[common], help="loop / animate / camera / inpaint bundles")
    p.add_argument("kind", choices=["loop", "animate", "camera", "inpaint"])
    p.add_argument("--first")
    p.add_argument("--last")
    p.add_argument("--clip")
    p.add_argument("--missing", help="comma-separated missing interior frame indices")
    p.add_argument("--diffusion-steps", type=int)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return 2
    try:
        COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
