"""Episode execution over a scene graph: encode, estimate, fuse, move, until STOP or the step limit."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np

from .encoder import EncoderParams, encode_ver, render_view_features, seeded_view_features
from .policy import (
    NEIGHBORHOOD,
    ActionDist,
    EpisodicGraph,
    PolicyParams,
    estimate_state,
    extract_pillar,
    fuse_actions,
    global_action,
    map_state_to_action,
    update_memory,
)
from .scene import Instruction, Scene

MAX_STEPS = 15
STOP, STEP_LIMIT = "STOP", "step-limit"


class SimError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Episode:
    episode_id: str
    instruction: Instruction
    start: str
    goals: tuple
    gt_path: tuple
    max_steps: int = MAX_STEPS
    instruction_seed: int | None = None
    gt_object: int | None = None

    def validate(self, scene: Scene) -> None:
        nodes = scene.graph.positions
        for name in (self.start, *self.goals, *self.gt_path):
            if name not in nodes:
                raise SimError(f"episode {self.episode_id}: viewpoint {name!r} is not in the scene graph")
        if not self.goals:
            raise SimError(f"episode {self.episode_id}: no goal viewpoints")
        if self.gt_path and self.gt_path[0] != self.start:
            raise SimError(f"episode {self.episode_id}: ground-truth path does not begin at the start")
        for a, b in zip(self.gt_path, self.gt_path[1:]):
            if b not in scene.graph.neighbors(a):
                raise SimError(f"episode {self.episode_id}: ground-truth path step {a}->{b} is not an edge")
        if self.max_steps < 0:
            raise SimError(f"episode {self.episode_id}: max_steps must be >= 0")


@dataclass
class StepRecord:
    step: int
    chosen: str
    chosen_prob: float
    dist: ActionDist
    walk: list  # viewpoints entered by this step's move (empty for STOP)


@dataclass
class Trajectory:
    episode_id: str
    path: list
    steps: list = field(default_factory=list)
    reason: str = STEP_LIMIT

    @property
    def final(self) -> str:
        return self.path[-1]


@dataclass
class EnvState:
    scene: Scene
    current: str
    memory: EpisodicGraph
    path: list


def memory_path(memory: EpisodicGraph, source: str, target: str) -> list:
    """Shortest walk from ``source`` to ``target`` whose interior nodes are all visited."""
    if target not in memory.nodes:
        raise SimError(f"node {target!r} is not in episodic memory")
    allowed = set(memory.visited) | {source, target}
    g = memory.to_networkx().subgraph(allowed)
    try:
        return nx.dijkstra_path(g, source, target, weight="weight")
    except (nx.NetworkXNoPath, nx.NodeNotFound):
        raise SimError(f"node {target!r} is unreachable from {source!r} through visited nodes") from None


def step(state: EnvState, chosen: str) -> tuple[EnvState, list]:
    """Move the agent to ``chosen``; returns the new state and the viewpoints walked through."""
    if chosen == state.current:
        return state, []
    walk = memory_path(state.memory, state.current, chosen)[1:]
    for a, b in zip([state.current] + walk, walk):
        if b not in state.scene.graph.neighbors(a):
            raise SimError(f"memory edge {a}->{b} is not navigable in the scene")
    return EnvState(state.scene, chosen, state.memory, state.path + walk), walk


@dataclass(frozen=True)
class SimOptions:
    mode: str = "argmax"
    seed: int = 0
    view_features: str = "render"
    view_seed: int = 0
    radius: int = NEIGHBORHOOD

    def __post_init__(self):
        if self.mode not in ("argmax", "sample"):
            raise SimError(f"mode must be argmax or sample, got {self.mode!r}")
        if self.view_features not in ("render", "seeded"):
            raise SimError(f"view_features must be render or seeded, got {self.view_features!r}")


def observe(scene: Scene, viewpoint: str, enc: EncoderParams, opts: SimOptions):
    if opts.view_features == "render":
        views = render_view_features(scene, viewpoint, enc.config.view_dim, opts.view_seed)
    else:
        views = seeded_view_features(scene.cameras[viewpoint], enc.config.view_dim, opts.view_seed)
    return encode_ver(views, enc, scene.graph.positions[viewpoint])[-1]


def decide_at(instr: Instruction, memory: EpisodicGraph, viewpoint: str, position, candidates, f,
              policy: PolicyParams, radius: int = NEIGHBORHOOD):
    """One decision from explicit inputs.

    ``candidates`` is a list of (id, world position) for the navigable
    neighbors of ``viewpoint``; ``f`` is the finest volume feature centered
    at ``position``. Returns the fused action distribution and the updated memory.
    """
    origin = np.asarray(position, dtype=float)
    est = estimate_state(instr, f, policy)
    local_pos = [np.zeros(3)] + [np.asarray(p, dtype=float) - origin for _, p in candidates]
    ids = (viewpoint, *(c for c, _ in candidates))
    local = map_state_to_action(est.dist, local_pos, f.spec, ids=ids, radius=radius)
    embeddings = [extract_pillar(est.updated, p, radius) for p in local_pos]
    memory = update_memory(memory, viewpoint, origin, list(candidates), embeddings)
    glob = global_action(instr, memory, policy)
    return fuse_actions(local, glob, memory, policy.w_g), memory


def decide(scene: Scene, instr: Instruction, memory: EpisodicGraph, current: str, f, policy: PolicyParams,
           radius: int = NEIGHBORHOOD):
    """One decision: state estimate, local action, memory update, global action, fusion."""
    pos = scene.graph.positions
    candidates = [(c, pos[c]) for c in scene.graph.neighbors(current)]
    return decide_at(instr, memory, current, pos[current], candidates, f, policy, radius)


def run_episode(scene: Scene, episode: Episode, enc: EncoderParams, policy: PolicyParams,
                opts: SimOptions = SimOptions()) -> Trajectory:
    episode.validate(scene)
    rng = np.random.default_rng(opts.seed)
    state = EnvState(scene, episode.start, EpisodicGraph(), [episode.start])
    traj = Trajectory(episode.episode_id, state.path)
    for t in range(1, episode.max_steps + 1):
        f = observe(scene, state.current, enc, opts)
        fused, memory = decide(scene, episode.instruction, state.memory, state.current, f, policy, opts.radius)
        state = EnvState(scene, state.current, memory, state.path)
        if opts.mode == "argmax":
            chosen = fused.argmax()
        else:
            chosen = fused.ids[int(rng.choice(len(fused.ids), p=fused.probs))]
        state, walk = step(state, chosen)
        traj.steps.append(StepRecord(t, chosen, fused.prob(chosen), fused, walk))
        traj.path = state.path
        if not walk:
            traj.reason = STOP
            break
    return traj


# --- files -------------------------------------------------------------------

def episode_to_json(ep: Episode) -> dict:
    if ep.instruction_seed is None:
        raise SimError(f"episode {ep.episode_id}: only seeded instructions can be written")
    rec = {"id": ep.episode_id, "instruction_seed": ep.instruction_seed, "instruction_length": len(ep.instruction.tokens),
           "start": ep.start, "goals": list(ep.goals), "gt_path": list(ep.gt_path), "max_steps": ep.max_steps}
    if ep.gt_object is not None:
        rec["gt_object"] = ep.gt_object
    return rec


def write_episodes(episodes, path) -> Path:
    path = Path(path)
    path.write_text("".join(json.dumps(episode_to_json(ep), sort_keys=True) + "\n" for ep in episodes))
    return path


def read_episodes(path, dim: int) -> list[Episode]:
    """JSON-lines episodes; instructions are regenerated from their seeds at width ``dim``."""
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            seed = int(rec["instruction_seed"])
            instr = Instruction.random(seed, int(rec.get("instruction_length", 8)), dim)
            out.append(Episode(str(rec["id"]), instr, rec["start"], tuple(rec["goals"]), tuple(rec.get("gt_path", ())),
                               int(rec.get("max_steps", MAX_STEPS)), seed, rec.get("gt_object")))
        except (KeyError, ValueError, TypeError) as exc:
            raise SimError(f"{path}:{lineno}: bad episode record ({exc})") from None
    return out


def sample_episodes(scene: Scene, n: int, seed: int, dim: int, instruction_length: int = 8,
                    max_steps: int = MAX_STEPS) -> list[Episode]:
    """Random start/goal pairs with their shortest paths as ground truth."""
    rng = np.random.default_rng(seed)
    g = scene.graph.to_networkx()
    nodes = scene.graph.nodes
    if len(nodes) < 2:
        raise SimError("need at least two viewpoints to sample episodes")
    out = []
    for i in range(n):
        a, b = rng.choice(len(nodes), size=2, replace=False)
        start, goal = nodes[a], nodes[b]
        path = nx.dijkstra_path(g, start, goal, weight="weight")
        iseed = int(rng.integers(2 ** 31))
        instr = Instruction.random(iseed, instruction_length, dim)
        out.append(Episode(f"ep{i}", instr, start, (goal,), tuple(path), max_steps, iseed))
    return out


def format_trajectory(traj: Trajectory) -> str:
    """``episode <id>``, then ``step viewpoint chosen_prob`` rows, then ``end <reason>``.

    Row 0 is the start. A memory jump writes every walked viewpoint under the
    same step number; only its last row carries the chosen probability.
    A STOP step repeats the current viewpoint.
    """
    lines = [f"episode {traj.episode_id}", f"0 {traj.path[0]} nan"]
    current = traj.path[0]
    for rec in traj.steps:
        if not rec.walk:
            lines.append(f"{rec.step} {current} {rec.chosen_prob!r}")
            continue
        for vp in rec.walk[:-1]:
            lines.append(f"{rec.step} {vp} nan")
        lines.append(f"{rec.step} {rec.walk[-1]} {rec.chosen_prob!r}")
        current = rec.walk[-1]
    lines.append(f"end {traj.reason}")
    return "\n".join(lines) + "\n"


def write_trajectories(trajs, path) -> Path:
    path = Path(path)
    path.write_text("".join(format_trajectory(t) for t in trajs))
    return path


def read_trajectories(path) -> dict[str, tuple[list, str]]:
    """Episode id -> (walked viewpoint sequence, termination reason)."""
    out: dict[str, tuple[list, str]] = {}
    ep, walk = None, []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "episode" and len(parts) == 2:
            ep, walk = parts[1], []
        elif parts[0] == "end" and len(parts) == 2 and ep is not None:
            if parts[1] not in (STOP, STEP_LIMIT):
                raise SimError(f"{path}:{lineno}: unknown termination reason {parts[1]!r}")
            out[ep] = (walk, parts[1])
            ep = None
        elif len(parts) == 3 and ep is not None:
            try:
                int(parts[0])
                float(parts[2])
            except ValueError:
                raise SimError(f"{path}:{lineno}: malformed step record {line!r}") from None
            if not walk or walk[-1] != parts[1]:
                walk.append(parts[1])
        else:
            raise SimError(f"{path}:{lineno}: malformed line {line!r}")
    if ep is not None:
        raise SimError(f"{path}: episode {ep} has no end record")
    return out


def trajectory_length(path, scene: Scene) -> float:
    pos = scene.graph.positions
    return float(sum(math.dist(pos[a], pos[b]) for a, b in zip(path, path[1:])))
