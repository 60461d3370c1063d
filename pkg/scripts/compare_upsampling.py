#!/usr/bin/env python3
"""Trilinear vs. learned-deconvolution upsampling in the encoder pyramid.

Encodes the same viewpoints twice with identical parameters, differing only
in the upsampling mode, and reports pyramid shapes, per-level feature
differences, wall time, and forward head losses against the generated
annotations.

    python3 scripts/compare_upsampling.py --config configs/small.cfg --seeds 0 1 2
"""

import argparse
import time
from dataclasses import replace

import numpy as np

from volnav.annotate import generate_annotations
from volnav.cli import view_features
from volnav.config import load_config
from volnav.encoder import encode_ver, multiscale_heads, seeded_params
from volnav.scene import generate_synthetic_scene

MODES = ("deconv", "trilinear")


def run_mode(scene, vp, cfg, mode, ann):
    params = seeded_params(replace(cfg, upsample=mode).encoder_config(), cfg.encoder_seed)
    views = view_features(scene, vp, cfg)
    t0 = time.perf_counter()
    pyramid = encode_ver(views, params, scene.graph.positions[vp])
    elapsed = time.perf_counter() - t0
    return pyramid, elapsed, multiscale_heads(pyramid, ann, params)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/small.cfg")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()
    cfg = load_config(args.config, args.set)

    print(f"{'seed':>4} {'viewpoint':>9} {'mode':>9} {'pyramid':>24} {'time_s':>7} "
          f"{'focal':>9} {'layout':>7} {'det':>6} {'total':>8}")
    totals = {m: [] for m in MODES}
    for seed in args.seeds:
        scene = generate_synthetic_scene(seed, n_rooms=1, n_objects=3, point_spacing=0.1)
        vp = scene.graph.nodes[0]
        ann = generate_annotations(scene, vp, cfg.grid())
        results = {m: run_mode(scene, vp, cfg, m, ann) for m in MODES}
        for mode, (pyr, secs, s) in results.items():
            shapes = " -> ".join("x".join(map(str, f.dims)) for f in pyr)
            print(f"{seed:>4} {vp:>9} {mode:>9} {shapes:>24} {secs:7.3f} {s.task_losses['occupancy']:9.5f} "
                  f"{s.task_losses['layout']:7.4f} {s.task_losses['detection']:6.3f} {s.total:8.5f}")
            totals[mode].append(s.total)
        a, b = results["deconv"][0], results["trilinear"][0]
        assert [f.dims for f in a] == [f.dims for f in b]
        for fa, fb in zip(a[1:], b[1:]):
            diff = np.abs(fa.data - fb.data)
            print(f"{'':>4} level {fa.level}: max |deconv - trilinear| {diff.max():.4g}, mean {diff.mean():.4g}")
    for mode in MODES:
        print(f"mean total loss {mode:>9}: {np.mean(totals[mode]):.5f}")


if __name__ == "__main__":
    main()
