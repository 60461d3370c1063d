"""Command-line entry point: ``volnav <subcommand> ...``.

Every subcommand accepts ``--config FILE`` (default: ``$VOLNAV_CONFIG``)
and repeated ``--set key=value`` overrides. Usage and configuration errors
exit with status 2, runtime failures with status 1; either way a single
diagnostic line goes to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import __version__
from .annotate import AnnotationError, generate_annotations, read_annotations, write_annotation
from .config import ConfigError, load_config
from .encoder import (
    EncoderError,
    VolumeFeature,
    encode_ver,
    load_params,
    multiscale_heads,
    predict_annotations,
    render_view_features,
    seeded_params,
    seeded_view_features,
    supervision_grid,
)
from .metrics import (
    detection_metrics,
    fidelity_metrics,
    layout_iou,
    nav_metrics,
    occupancy_metrics,
)
from .policy import PolicyError, load_policy_params, parse_memory, seeded_policy_params
from .scene import Instruction, SceneError, generate_synthetic_scene, load_scene, save_scene
from .sim import (
    SimError,
    SimOptions,
    decide_at,
    read_episodes,
    read_trajectories,
    run_episode,
    sample_episodes,
    write_episodes,
    write_trajectories,
)
from .tensorio import TensorFileError, load_tensors, save_tensors

RUNTIME_ERRORS = (SceneError, AnnotationError, EncoderError, PolicyError, SimError, TensorFileError,
                  ValueError, OSError, KeyError)


class UsageError(Exception):
    pass


# --- shared loaders ----------------------------------------------------------

def _seed_spec(text: str):
    """``seed:N`` -> N, anything else -> None (a file path)."""
    if text.startswith("seed:"):
        try:
            return int(text[5:])
        except ValueError:
            raise UsageError(f"bad seed specification {text!r}") from None
    return None


def encoder_params(spec: str, cfg):
    seed = _seed_spec(spec)
    if seed is not None:
        return seeded_params(cfg.encoder_config(), seed)
    params = load_params(spec, cfg.upsample, cfg.activation)
    if params.config.dim != cfg.dim:
        raise EncoderError(f"{spec}: parameter width {params.config.dim} != configured dim {cfg.dim}")
    return params


def policy_params(spec: str, cfg):
    seed = _seed_spec(spec)
    if seed is not None:
        return seeded_policy_params(cfg.policy_config(), seed, cfg.w_g)
    return load_policy_params(spec)


def instruction(spec: str, cfg) -> Instruction:
    seed = _seed_spec(spec)
    if seed is not None:
        return Instruction.random(seed, cfg.instruction_length, cfg.dim)
    tensors = load_tensors(spec)
    if "tokens" not in tensors:
        raise TensorFileError(f"{spec}: instruction file has no 'tokens' tensor")
    return Instruction(tensors["tokens"])


def view_features(scene, viewpoint, cfg):
    if cfg.view_features == "render":
        return render_view_features(scene, viewpoint, cfg.view_dim, cfg.view_seed)
    return seeded_view_features(scene.cameras[viewpoint], cfg.view_dim, cfg.view_seed)


def _viewpoint(scene, name):
    if name not in scene.graph.positions:
        raise SimError(f"viewpoint {name!r} is not in the scene graph")
    return name


# --- subcommands -------------------------------------------------------------

def cmd_gen_scene(args, cfg) -> None:
    seed = cfg.seed if args.seed is None else args.seed
    scene = generate_synthetic_scene(seed, args.rooms, args.objects, args.spacing)
    save_scene(scene, args.out)
    print(f"scene {args.out}: {len(scene.cloud)} points, {len(scene.graph.nodes)} viewpoints, "
          f"{len(scene.objects)} objects")
    if args.episodes:
        eps = sample_episodes(scene, args.num_episodes, seed, cfg.dim, cfg.instruction_length, cfg.max_steps)
        write_episodes(eps, args.episodes)
        print(f"episodes {args.episodes}: {len(eps)}")


def _annotate_one(scene_path: str, viewpoint: str, grid) -> bytes:
    import io

    buf = io.BytesIO()
    write_annotation(generate_annotations(_cached_scene(scene_path), viewpoint, grid), buf)
    return buf.getvalue()


@lru_cache(maxsize=2)
def _cached_scene(path: str):
    return load_scene(path)


def cmd_annotate(args, cfg) -> None:
    scene = _cached_scene(str(args.scene))
    vps = scene.graph.nodes if args.viewpoint == "all" else [_viewpoint(scene, args.viewpoint)]
    out = Path(args.out) if args.out else Path(args.scene) / "annotations.vna"
    grid = cfg.grid()
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            records = list(pool.map(_annotate_one, [str(args.scene)] * len(vps), vps, [grid] * len(vps)))
    else:
        records = [_annotate_one(str(args.scene), vp, grid) for vp in vps]
    out.write_bytes(b"".join(records))
    print(f"annotations {out}: {len(records)} viewpoints")


def cmd_encode(args, cfg) -> None:
    scene = load_scene(args.scene)
    vp = _viewpoint(scene, args.viewpoint)
    params = encoder_params(args.params, cfg)
    origin = scene.graph.positions[vp]
    pyramid = encode_ver(view_features(scene, vp, cfg), params, origin)
    tensors = {"origin": origin}
    for f in pyramid:
        s = f.spec
        tensors[f"level.{f.level}"] = f.data
        tensors[f"level.{f.level}.grid"] = np.array([*s.x_range, *s.y_range, *s.z_range, s.resolution])
    save_tensors(tensors, args.out)
    print(f"ver {args.out}: " + " -> ".join("x".join(map(str, f.dims)) for f in pyramid))
    if args.annotations:
        gts = {a.viewpoint: a for a in read_annotations(args.annotations)}
        if vp not in gts:
            raise AnnotationError(f"{args.annotations} has no annotation for viewpoint {vp!r}")
        scores = multiscale_heads(pyramid, gts[vp], params)
        for lvl, loss in zip(range(len(pyramid) - len(scores.level_losses), len(pyramid)), scores.level_losses):
            print(f"focal.level{lvl} {loss!r}")
        for task, loss in scores.task_losses.items():
            print(f"loss.{task} {loss!r}")
        print(f"loss.total {scores.total!r}")
    if args.pred_out:
        with open(args.pred_out, "wb") as fh:
            write_annotation(predict_annotations(pyramid, params, vp, origin), fh)
        print(f"predictions {args.pred_out}")


def load_ver(path) -> VolumeFeature:
    """Finest level of a VER tensor file."""
    from .scene import GridSpec

    tensors = load_tensors(path)
    levels = sorted(int(k.split(".")[1]) for k in tensors if k.startswith("level.") and k.count(".") == 1)
    if not levels:
        raise TensorFileError(f"{path}: no volume levels")
    m = levels[-1]
    g = np.round(tensors[f"level.{m}.grid"], 6)
    spec = GridSpec((g[0], g[1]), (g[2], g[3]), (g[4], g[5]), g[6])
    return VolumeFeature(tensors[f"level.{m}"], spec, m)


def cmd_policy_step(args, cfg) -> None:
    f = load_ver(args.ver)
    memory, viewpoint, position, candidates = parse_memory(Path(args.graph).read_text(), str(args.graph))
    if viewpoint is None:
        raise PolicyError(f"{args.graph}: no 'current' record")
    fused, _ = decide_at(instruction(args.instr, cfg), memory, viewpoint, position, candidates, f,
                         policy_params(args.params, cfg), cfg.radius)
    for node, p in zip(fused.ids, fused.probs):
        print(f"{node} {float(p)!r}")


def _simulate_one(scene_path, episode, enc_spec, pol_spec, cfg, mode, seed):
    scene = _cached_scene(scene_path)
    enc, pol = _cached_params(enc_spec, pol_spec, cfg)
    opts = SimOptions(mode, seed, cfg.view_features, cfg.view_seed, cfg.radius)
    return run_episode(scene, episode, enc, pol, opts)


@lru_cache(maxsize=2)
def _cached_params(enc_spec, pol_spec, cfg):
    return encoder_params(enc_spec, cfg), policy_params(pol_spec, cfg)


def cmd_simulate(args, cfg) -> None:
    scene = _cached_scene(str(args.scene))
    episodes = read_episodes(args.episodes, cfg.dim)
    for ep in episodes:
        ep.validate(scene)
    enc_spec = args.encoder_params or f"seed:{cfg.encoder_seed}"
    pol_spec = args.policy_params or f"seed:{cfg.policy_seed}"
    # per-episode sampling seeds are fixed up front so --jobs does not change results
    seeds = [cfg.seed * 1_000_003 + i for i in range(len(episodes))]
    n = len(episodes)
    call = (str(args.scene),) * n, episodes, (enc_spec,) * n, (pol_spec,) * n, (cfg,) * n, (args.mode,) * n, seeds
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            trajs = list(pool.map(_simulate_one, *call))
    else:
        trajs = list(map(_simulate_one, *call))
    write_trajectories(trajs, args.out)
    stops = sum(t.reason == "STOP" for t in trajs)
    print(f"trajectories {args.out}: {len(trajs)} episodes, {stops} stopped")


def _mean(rows, key):
    vals = [r[key] for r in rows if key in r]
    return float(np.mean(vals)) if vals else None


def nav_report(trajectories, episodes, scene, radius: float) -> dict:
    g = scene.graph.to_networkx()
    pos = scene.graph.positions
    rows = []
    for ep in episodes:
        if ep.episode_id not in trajectories:
            raise SimError(f"no trajectory for episode {ep.episode_id}")
        walk, _ = trajectories[ep.episode_id]
        row = nav_metrics(walk, ep.goals, g, pos, radius)
        if ep.gt_path:
            row.update(fidelity_metrics(walk, ep.gt_path, pos, row["SR"], radius))
        rows.append(row)
    keys = ["TL", "NE", "SR", "OSR", "SPL", "CLS", "nDTW", "SDTW"]
    out = {k: _mean(rows, k) for k in keys}
    out["episodes"] = len(rows)
    return {k: v for k, v in out.items() if v is not None}


def perception_report(pred_path, gt_path) -> dict:
    preds = {a.viewpoint: a for a in read_annotations(pred_path)}
    gts = {a.viewpoint: a for a in read_annotations(gt_path)}
    common = [vp for vp in preds if vp in gts]
    if not common:
        raise AnnotationError("predictions and ground truth share no viewpoints")
    rows = []
    for vp in common:
        p, g = preds[vp], gts[vp]
        pg = p.occupancy[min(p.occupancy)]
        try:
            gg = supervision_grid(g, pg.spec)
        except EncoderError as exc:
            raise AnnotationError(f"viewpoint {vp}: {exc}") from None
        row = {k: v for k, v in occupancy_metrics(pg, gg).items() if k != "per_class"}
        if g.boxes:
            det = detection_metrics(list(p.boxes), [-b.instance_id for b in p.boxes], list(g.boxes))
            row.update(mAP=det["mAP"], mAR=det["mAR"])
        if g.layout is not None and p.layout is not None:
            row["layout_IoU"] = layout_iou(p.layout, g.layout)
        rows.append(row)
    out = {k: _mean(rows, k) for k in ("IoU", "mIoU", "mAP", "mAR", "layout_IoU")}
    out["viewpoints"] = len(rows)
    return {k: v for k, v in out.items() if v is not None}


def cmd_evaluate(args, cfg) -> None:
    scene = load_scene(args.scene)
    report = {"nav": nav_report(read_trajectories(args.trajectories), read_episodes(args.episodes, cfg.dim),
                                scene, cfg.success_radius)}
    if args.perception:
        parts = args.perception.split(",")
        if len(parts) != 2:
            raise UsageError("--perception expects PRED,GT")
        report["perception"] = perception_report(*parts)
    lines = [f"{section}.{k} {v!r}" for section, vals in report.items() for k, v in vals.items()]
    text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        out.write_text(text)
        out.with_suffix(".json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    sys.stdout.write(text)


def cmd_selfcheck(args, cfg) -> int:
    from .selfcheck import run_all

    results = run_all(verbose=True)
    return 0 if all(r.passed for r in results) else 1


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file (default: $VOLNAV_CONFIG)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")

    p = argparse.ArgumentParser(prog="volnav", description="Volumetric environment representation for navigation.")
    p.add_argument("--version", action="version", version=f"volnav {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-scene", parents=[common], help="generate a synthetic scene archive")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--rooms", type=int, default=2)
    s.add_argument("--objects", type=int, default=4)
    s.add_argument("--spacing", type=float, default=0.05, help="surface point spacing in meters")
    s.add_argument("--episodes", help="also write sampled episodes (JSON lines) here")
    s.add_argument("--num-episodes", type=int, default=4)
    s.set_defaults(func=cmd_gen_scene)

    s = sub.add_parser("annotate", parents=[common], help="generate occupancy, box and layout annotations")
    s.add_argument("--scene", required=True)
    s.add_argument("--viewpoint", default="all")
    s.add_argument("--out", help="annotation file (default: SCENE/annotations.vna)")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_annotate)

    s = sub.add_parser("encode", parents=[common], help="encode one viewpoint into a volume feature pyramid")
    s.add_argument("--scene", required=True)
    s.add_argument("--viewpoint", required=True)
    s.add_argument("--params", default=None, help="parameter file or seed:N (default: seed:encoder_seed)")
    s.add_argument("--out", required=True)
    s.add_argument("--annotations", help="score the heads against this annotation file")
    s.add_argument("--pred-out", help="write head predictions as an annotation file")
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("policy-step", parents=[common], help="one policy decision from a VER and a memory graph")
    s.add_argument("--ver", required=True)
    s.add_argument("--instr", default=None, help="instruction tensor file or seed:N (default: seed:seed)")
    s.add_argument("--graph", required=True, help="memory graph text file with current/candidate records")
    s.add_argument("--params", default=None, help="policy parameter file or seed:N (default: seed:policy_seed)")
    s.set_defaults(func=cmd_policy_step)

    s = sub.add_parser("simulate", parents=[common], help="run episodes and write trajectories")
    s.add_argument("--scene", required=True)
    s.add_argument("--episodes", required=True)
    s.add_argument("--encoder-params")
    s.add_argument("--policy-params")
    s.add_argument("--mode", choices=("argmax", "sample"), default="argmax")
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("evaluate", parents=[common], help="navigation and perception metrics")
    s.add_argument("--trajectories", required=True)
    s.add_argument("--episodes", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--perception", metavar="PRED,GT", help="also score predicted against reference annotations")
    s.add_argument("--out", help="text report path; a .json twin is written next to it")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("selfcheck", parents=[common], help="run the oracle suites")
    s.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        if args.command == "encode" and args.params is None:
            args.params = f"seed:{cfg.encoder_seed}"
        if args.command == "policy-step":
            args.params = args.params or f"seed:{cfg.policy_seed}"
            args.instr = args.instr or f"seed:{cfg.seed}"
        return int(args.func(args, cfg) or 0)
    except (UsageError, ConfigError) as exc:
        print(f"volnav {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"volnav {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
