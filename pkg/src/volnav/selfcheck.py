"""Acceptance suites: each fast-path operation against an independent oracle.

``run_all`` executes the nine criteria in order and returns one
:class:`CheckResult` per criterion; ``volnav selfcheck`` prints them.
"""

from __future__ import annotations

import contextlib
import io
import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .annotate import (
    FREE,
    carve_free,
    densify_nearest_neighbor,
    downsample_labels,
    fit_oriented_box,
    generate_annotations,
    voxelize_majority,
)
from .config import load_config
from .encoder import (
    EncoderConfig,
    VolumeFeature,
    attention_weights,
    deformable_attention,
    encode_ver,
    seeded_params,
    seeded_view_features,
)
from .geometry import OrientedBox, RoomLayout, angle_diff_mod
from .metrics import box_recall, detection_metrics, dtw, layout_iou, nav_metrics, ndtw, occupancy_metrics
from .oracles import (
    ap_enumerate,
    densify_oracle,
    deformable_attention_oracle,
    downsample_oracle,
    dtw_enumerate,
    estimate_state_oracle,
    fuse_oracle,
    global_action_oracle,
    neighborhood_oracle,
    synthetic_occupancy_oracle,
    voxelize_oracle,
)
from .policy import (
    EpisodicGraph,
    PolicyConfig,
    candidate_cell,
    estimate_state,
    fuse_actions,
    global_action,
    map_state_to_action,
    seeded_policy_params,
    update_memory,
)
from .scene import GridSpec, Instruction, SemanticPointCloud, box_surface_points, generate_synthetic_scene

PYRAMID_SHAPES = [(15, 15, 4), (30, 30, 8), (60, 60, 16), (120, 120, 32)]


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} [{self.number}] {self.name} ({self.seconds:.1f} s): {self.detail}"


# --- 1. annotation oracles ---------------------------------------------------

def check_annotation_oracles(n_scenes: int = 20, max_points: int = 5000) -> tuple[bool, str]:
    fails = []
    spec_fine = GridSpec(resolution=0.2)
    spec_coarse = GridSpec(resolution=0.4)
    for seed in range(n_scenes):
        scene = generate_synthetic_scene(seed, n_rooms=1, n_objects=3, point_spacing=0.1)
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(scene.cloud), size=min(max_points, len(scene.cloud)), replace=False))
        origin = scene.graph.positions["r0c"]
        cloud = scene.cloud.subset(keep)
        local = SemanticPointCloud(cloud.points - origin, cloud.labels, cloud.instance_ids)

        fine = voxelize_majority(local, spec_fine)
        if not np.array_equal(fine.labels, voxelize_oracle(local.points, local.labels, spec_fine)):
            fails.append(f"voxelize seed {seed}")
        coarse = voxelize_majority(local, spec_coarse)
        if not np.array_equal(coarse.labels, voxelize_oracle(local.points, local.labels, spec_coarse)):
            fails.append(f"voxelize@0.4 seed {seed}")

        free = carve_free(coarse, np.zeros(3))
        dense = densify_nearest_neighbor(coarse, free)
        carved = np.where(free & ~coarse.occupied, FREE, coarse.labels)
        if not np.array_equal(dense.labels, densify_oracle(carved)):
            fails.append(f"densify seed {seed}")

        fine_dense = densify_nearest_neighbor(fine, carve_free(fine, np.zeros(3)))
        if not np.array_equal(downsample_labels(fine_dense, 2).labels, downsample_oracle(fine_dense.labels, 2)):
            fails.append(f"downsample seed {seed}")
    if fails:
        return False, "mismatch: " + ", ".join(fails[:5])
    return True, f"{n_scenes} scenes label-exact (voxelize at 0.2/0.4 m, densify at 0.4 m, downsample x2)"


# --- 2. oriented boxes -------------------------------------------------------

def check_obb(n: int = 1000, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst_contain, worst_yaw, worst_ext = 0.0, 0.0, 0.0
    for _ in range(n):
        ex = rng.uniform(0.1, 1.0)
        ey = ex * rng.uniform(1.2, 2.0)
        ez = rng.uniform(0.1, 1.0)
        truth = OrientedBox(rng.uniform(-5, 5, 3), (ex, ey, ez), rng.uniform(-math.pi / 2, math.pi / 2))
        pts = box_surface_points(truth, min(ex, ey, ez) / 5, bottom=True)
        fit = fit_oriented_box(pts)
        local = np.abs(fit.to_local(pts)) - fit.half_extents
        worst_contain = max(worst_contain, float(local.max()))
        worst_yaw = max(worst_yaw, angle_diff_mod(fit.yaw, truth.yaw, math.pi / 2))
        ext = np.array(truth.half_extents)
        if angle_diff_mod(fit.yaw, truth.yaw, math.pi) > math.pi / 4:
            ext = ext[[1, 0, 2]]
        worst_ext = max(worst_ext, float(np.max(np.abs(fit.half_extents - ext))))
    ok = worst_contain <= 1e-9 and worst_yaw <= 1e-6 and worst_ext <= 1e-6
    return ok, (f"{n} boxes: max outside {worst_contain:.1e} m, yaw error {worst_yaw:.1e} rad, "
                f"extent error {worst_ext:.1e} m")


# --- 3. synthetic round trip -------------------------------------------------

def _egocentric_truth(scene, viewpoint):
    origin = scene.graph.positions[viewpoint]
    room = scene.rooms[scene.room_of(origin)]
    boxes = [OrientedBox(b.center - origin, b.half_extents, b.yaw, b.class_id, b.instance_id)
             for b in scene.objects if room.contains(b.center[None])[0]]
    return boxes, room.translated(-origin)


def check_round_trip(seeds=range(1, 6), viewpoint: str = "r0c") -> tuple[bool, str]:
    rows = []
    for seed in seeds:
        scene = generate_synthetic_scene(seed)
        ann = generate_annotations(scene, viewpoint)
        fine = ann.fine
        truth = synthetic_occupancy_oracle(scene, viewpoint, fine.spec)
        occ = occupancy_metrics(fine, fine.with_labels(truth))
        boxes, room = _egocentric_truth(scene, viewpoint)
        recall = box_recall(ann.boxes, boxes)
        liou = layout_iou(ann.layout, room) if ann.layout is not None else 0.0
        rows.append((seed, occ["mIoU"], recall, liou))
    ok = all(m >= 0.9 and r == 1.0 and li >= 0.95 for _, m, r, li in rows)
    worst = min(rows, key=lambda t: (t[1] >= 0.9 and t[2] == 1.0 and t[3] >= 0.95, t[1]))
    return ok, (f"{len(rows)} scenes: min mIoU {min(r[1] for r in rows):.4f}, min box recall "
                f"{min(r[2] for r in rows):.2f}, min layout IoU {min(r[3] for r in rows):.4f} (worst seed {worst[0]})")


# --- 4. encoder --------------------------------------------------------------

def _pyramid_shapes(upsample: str, dim: int = 8):
    cfg = load_config(overrides=[f"dim={dim}", f"view_dim={dim}", "heads=2", "samples=2", "cva_layers=1",
                                 "policy_heads=2", f"upsample={upsample}"], use_env=False)
    params = seeded_params(cfg.encoder_config(), 0)
    scene = generate_synthetic_scene(0, n_rooms=1, n_objects=1, point_spacing=0.5, headings=4, elevations=(0.0,))
    vp = "r0c"
    views = seeded_view_features(scene.cameras[vp], cfg.view_dim, 0)
    pyramid = encode_ver(views, params, scene.graph.positions[vp])
    return pyramid


def check_encoder(n_queries: int = 200, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    params = seeded_params(EncoderConfig(dim=16, view_dim=6, heads=4, samples=3, layers=1, levels=0, z_cells=1,
                                         grid=GridSpec(resolution=1.0)), seed)
    layer = params.cva[0].attn
    fmap = rng.standard_normal((6, 2, 2))
    q = rng.standard_normal((n_queries, 16))
    ref = rng.uniform(-0.5, 1.5, (n_queries, 2))
    fast = deformable_attention(q, ref, fmap, layer)
    err = max(float(np.max(np.abs(fast[i] - deformable_attention_oracle(q[i], ref[i], fmap, layer))))
              for i in range(n_queries))
    wsum = float(np.max(np.abs(attention_weights(q, layer).sum(axis=2) - 1.0)))
    shapes = [f.dims for f in _pyramid_shapes("deconv")]
    ok = err <= 1e-10 and wsum <= 1e-6 and shapes == PYRAMID_SHAPES
    return ok, (f"2x2 map, {n_queries} queries: max |fast - oracle| {err:.1e}, weight-sum error {wsum:.1e}; "
                f"pyramid {' -> '.join('x'.join(map(str, s)) for s in shapes)}")


# --- 5. policy distributions --------------------------------------------------

def check_policy(n: int = 1000, n_params: int = 10, oracle_every: int = 10, seed: int = 0) -> tuple[bool, str]:
    """Random 4x4x2 volumes and memory graphs through the local/global/fusion path."""
    rng = np.random.default_rng(seed)
    dim = 8
    spec = GridSpec((-0.8, 0.8), (-0.8, 0.8), (-0.4, 0.4), 0.4)
    policies = [seeded_policy_params(PolicyConfig(dim, 2, 1), s) for s in range(n_params)]
    inner = [spec.lower[:2] + (np.array([i, j]) + 0.5) * spec.resolution for i in (1, 2) for j in (1, 2)]
    worst_sum, worst_fuse, worst_state, mismatches = 0.0, 0.0, 0.0, 0
    for t in range(n):
        policy = policies[t % n_params]
        instr = Instruction(rng.standard_normal((int(rng.integers(1, 4)), dim)))
        f = VolumeFeature(rng.standard_normal((dim, *spec.dims)), spec)
        est = estimate_state(instr, f, policy)
        worst_sum = max(worst_sum, abs(float(est.dist.probs.sum()) - 1.0))
        if t % oracle_every == 0:
            ref = estimate_state_oracle(instr.tokens, f.data, policy)
            worst_state = max(worst_state, float(np.max(np.abs(ref - est.dist.probs))))

        k = int(rng.integers(1, 4))
        picks = rng.choice(len(inner), size=k, replace=False)
        local_pos = [np.zeros(3)] + [np.array([*inner[p], 0.0]) for p in picks]
        ids = ("v", *(f"c{p}" for p in picks))
        local = map_state_to_action(est.dist, local_pos, spec, ids)
        cells = [candidate_cell(p, spec) for p in local_pos]
        if list(local.probs) != neighborhood_oracle(est.dist.probs, cells):
            mismatches += 1
        worst_sum = max(worst_sum, abs(float(local.probs.sum()) - 1.0))

        memory = EpisodicGraph()
        past = int(rng.integers(0, 3))
        for h in range(past):
            memory = update_memory(memory, f"p{h}", rng.standard_normal(3), [("v", np.zeros(3))],
                                   rng.standard_normal((2, dim)))
        cands = [(c, p) for c, p in zip(ids[1:], local_pos[1:])]
        memory = update_memory(memory, "v", np.zeros(3), cands, rng.standard_normal((len(ids), dim)))
        glob = global_action(instr, memory, policy)
        worst_sum = max(worst_sum, abs(float(glob.probs.sum()) - 1.0))
        if t % oracle_every == 0:
            ref = global_action_oracle(instr.tokens, memory.embeddings(), policy)
            worst_state = max(worst_state, float(np.max(np.abs(ref - glob.probs))))
        for w_g in (0.0, 0.5, 1.0):
            fused = fuse_actions(local, glob, memory, w_g)
            hand = fuse_oracle(list(local.ids), list(local.probs), list(memory.ids), list(glob.probs), w_g)
            worst_fuse = max(worst_fuse, float(np.max(np.abs(fused.probs - hand))))
            worst_sum = max(worst_sum, abs(float(fused.probs.sum()) - 1.0))
    ok = worst_sum <= 1e-6 and mismatches == 0 and worst_fuse <= 1e-10 and worst_state <= 1e-9
    return ok, (f"{n} inputs: max |sum - 1| {worst_sum:.1e}, neighborhood mismatches {mismatches}, "
                f"fusion error {worst_fuse:.1e}, state/global vs scalar oracle {worst_state:.1e}")


# --- 6. episodic memory ------------------------------------------------------

def check_memory(max_visits: int = 10, trials: int = 50, dim: int = 16, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        for visits in range(1, max_visits + 1):
            g = EpisodicGraph()
            history = []
            for v in range(visits):
                emb = rng.standard_normal((2, dim)) * rng.uniform(0.1, 100)
                if rng.random() < 0.5:  # revisit as the current viewpoint
                    g = update_memory(g, "a", np.zeros(3), [("b", np.ones(3))], emb)
                    history.append(emb[0])
                else:  # re-observe as a neighbor of another viewpoint
                    g = update_memory(g, f"x{v}", np.ones(3), [("a", np.zeros(3))], emb)
                    history.append(emb[1])
            batch = np.array([math.fsum(col) / len(history) for col in np.array(history).T])
            node = g.nodes["a"]
            if node.count != visits:
                return False, f"node count {node.count} after {visits} observations"
            worst = max(worst, float(np.max(np.abs(node.embedding - batch))))
    return worst <= 1e-12, f"1..{max_visits} observations x {trials} trials: max deviation from batch mean {worst:.1e}"


# --- 7. metric closed forms --------------------------------------------------

def check_metrics(seed: int = 0) -> tuple[bool, str]:
    import networkx as nx

    notes, ok = [], True
    pos = {"S": np.zeros(3), "G": np.array([1.0, 0, 0]), "X": np.array([-0.5, 0, 0])}
    g = nx.Graph()
    g.add_edge("S", "G", weight=1.0)
    g.add_edge("S", "X", weight=0.5)
    spl = nav_metrics(["S", "X", "S", "G"], ["G"], g, pos, radius=0.5)["SPL"]
    ok &= spl == 0.5
    notes.append(f"SPL detour {spl!r}")

    rng = np.random.default_rng(seed)
    path = rng.standard_normal((5, 3))
    nd = ndtw(path, path)
    ok &= nd == 1.0
    notes.append(f"nDTW identical {nd!r}")

    worst = 0.0
    for _ in range(200):
        a = rng.standard_normal((int(rng.integers(1, 7)), 3))
        b = rng.standard_normal((int(rng.integers(1, 7)), 3))
        ref = dtw_enumerate(a, b)
        worst = max(worst, abs(dtw(a, b) - ref) / max(1.0, ref))
    ok &= worst <= 1e-12
    notes.append(f"DTW vs enumeration {worst:.1e}")

    a = RoomLayout((0.0, 0.0, 0.0), 1.0, 1.0, 1.0)
    b = RoomLayout((0.5, 0.0, 0.0), 1.0, 1.0, 1.0)
    liou = layout_iou(a, b)
    ok &= abs(liou - 1 / 3) <= 1e-12
    notes.append(f"layout IoU {liou:.15f}")

    gts = [OrientedBox((3.0 * i, 0, 0), (0.5, 0.5, 0.5), 0.0, 7) for i in range(3)]
    miss = OrientedBox((50.0, 0, 0), (0.5, 0.5, 0.5), 0.0, 7)
    preds = [gts[0], miss, gts[1], gts[2], miss]
    flags = [1, 0, 1, 1, 0]
    mAP = detection_metrics(preds, [0.9, 0.8, 0.7, 0.6, 0.5], gts)["mAP"]
    ref = ap_enumerate(flags, 3)
    ok &= abs(mAP - ref) <= 1e-12 and abs(ref - 5 / 6) <= 1e-12
    notes.append(f"mAP {mAP:.6f} vs enumerated {ref:.6f}")
    return bool(ok), ", ".join(notes)


# --- 8. end-to-end determinism -------------------------------------------------

SMALL_RUN = ["resolution=0.4", "z_cells=8", "levels=1", "dim=16", "view_dim=16", "heads=2", "samples=2",
             "cva_layers=1", "policy_heads=2", "policy_layers=1", "max_steps=4"]


def check_determinism() -> tuple[bool, str]:
    from .cli import main

    with tempfile.TemporaryDirectory() as tmp:
        d = Path(tmp)
        sets = [x for kv in SMALL_RUN for x in ("--set", kv)]
        out = io.StringIO()
        with contextlib.redirect_stdout(out):
            rc = main(["gen-scene", "--seed", "3", "--out", str(d / "scene"), "--episodes", str(d / "eps.jsonl"),
                       "--num-episodes", "3", *sets])
            if rc:
                return False, f"gen-scene exited {rc}"
            for name, jobs in (("a.txt", "1"), ("b.txt", "2")):
                rc = main(["simulate", "--scene", str(d / "scene"), "--episodes", str(d / "eps.jsonl"),
                           "--mode", "sample", "--jobs", jobs, "--out", str(d / name), *sets])
                if rc:
                    return False, f"simulate exited {rc}"
        a, b = (d / "a.txt").read_bytes(), (d / "b.txt").read_bytes()
        steps = sum(1 for line in a.decode().splitlines() if line[:1].isdigit())
        return a == b, f"two sampled runs (1 and 2 workers), {len(a)} bytes / {steps} rows, identical={a == b}"


# --- 9. trilinear variant ------------------------------------------------------

def check_trilinear() -> tuple[bool, str]:
    deconv = _pyramid_shapes("deconv")
    tri = _pyramid_shapes("trilinear")
    same_shapes = [f.data.shape for f in deconv] == [f.data.shape for f in tri]
    same_specs = all(a.spec == b.spec for a, b in zip(deconv, tri))
    finite = all(np.all(np.isfinite(f.data)) for f in tri)
    diff = float(np.max(np.abs(deconv[-1].data - tri[-1].data)))
    ok = same_shapes and same_specs and finite
    return ok, (f"upsample=trilinear shapes {' -> '.join('x'.join(map(str, f.dims)) for f in tri)} "
                f"match deconv={same_shapes and same_specs}; max finest-level difference {diff:.3g}")


CHECKS = [
    (1, "annotation oracle equivalence", check_annotation_oracles),
    (2, "oriented box fitting", check_obb),
    (3, "synthetic round trip", check_round_trip),
    (4, "encoder invariants", check_encoder),
    (5, "policy distribution contracts", check_policy),
    (6, "episodic memory running mean", check_memory),
    (7, "metric closed forms", check_metrics),
    (8, "end-to-end determinism", check_determinism),
    (9, "trilinear upsampling variant", check_trilinear),
]

TIME_LIMITS = {1: 30.0}
TOTAL_LIMIT = 120.0


def run_check(number: int) -> CheckResult:
    for n, name, fn in CHECKS:
        if n == number:
            t0 = time.perf_counter()
            try:
                passed, detail = fn()
            except Exception as exc:  # a crash is a failure of that criterion, not of the suite
                passed, detail = False, f"{type(exc).__name__}: {exc}"
            dt = time.perf_counter() - t0
            if number in TIME_LIMITS and dt >= TIME_LIMITS[number]:
                passed, detail = False, f"{detail}; took {dt:.1f} s (limit {TIME_LIMITS[number]:.0f} s)"
            return CheckResult(n, name, bool(passed), detail, dt)
    raise KeyError(f"no acceptance criterion {number}")


def run_all(verbose: bool = False) -> list[CheckResult]:
    """Run every criterion; determinism (8) goes last so it can include the total suite time."""
    t0 = time.perf_counter()
    order = [n for n, _, _ in CHECKS if n != 8] + [8]
    results = []
    for number in order:
        r = run_check(number)
        if number == 8:
            total = time.perf_counter() - t0
            r.detail += f"; full suite {total:.1f} s (limit {TOTAL_LIMIT:.0f} s)"
            r.passed = r.passed and total < TOTAL_LIMIT
        results.append(r)
        if verbose:
            print(r.line(), flush=True)
    if verbose:
        print(f"{sum(r.passed for r in results)}/{len(results)} criteria passed in {time.perf_counter() - t0:.1f} s")
    return sorted(results, key=lambda r: r.number)
