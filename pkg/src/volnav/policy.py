"""Navigation policy: volume state estimation, local/global actions and their fusion.

Forward-only. The instruction tokens and the volume feature share the
channel width D. Positions handed to the grid operations are egocentric
(world axes, origin at the current viewpoint).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .encoder import VolumeFeature, _f32, _softmax
from .scene import GridSpec, Instruction
from .tensorio import load_tensors, save_tensors

NEIGHBORHOOD = 1  # Omega_n is the (2*NEIGHBORHOOD+1)^2 square around a cell
HEATMAP_SIGMA = 3.0


class PolicyError(ValueError):
    pass


# --- distributions -----------------------------------------------------------

def _check_distribution(p: np.ndarray, what: str) -> None:
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise PolicyError(f"{what} has negative or non-finite entries")
    if abs(float(p.sum()) - 1.0) > 1e-6:
        raise PolicyError(f"{what} sums to {p.sum()!r}, not 1")


@dataclass(frozen=True, eq=False)
class VolumeStateDist:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 3:
            raise PolicyError("volume state must be an X x Y x Z array")
        _check_distribution(p, "volume state")
        object.__setattr__(self, "probs", p)

    def height_mean(self) -> np.ndarray:
        return self.probs.mean(axis=2)


@dataclass(frozen=True, eq=False)
class ActionDist:
    """Probabilities over node ids; for local actions index 0 is STOP (the current viewpoint)."""

    ids: tuple
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "ids", tuple(self.ids))
        if p.shape != (len(self.ids),):
            raise PolicyError(f"{len(self.ids)} ids but {p.shape} probabilities")
        if len(set(self.ids)) != len(self.ids):
            raise PolicyError("action ids must be distinct")
        _check_distribution(p, "action distribution")
        object.__setattr__(self, "probs", p)

    def prob(self, node) -> float:
        return float(self.probs[self.ids.index(node)])

    def argmax(self):
        return self.ids[int(np.argmax(self.probs))]


# --- parameters --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MLTLayer:
    """Post-norm self-attention block: x = LN(x + MHA(x)); x = LN(x + FFN(x))."""

    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray


_MLT_FIELDS = tuple(MLTLayer.__dataclass_fields__)


@dataclass(frozen=True, eq=False)
class MLP:
    """Two linear maps with a ReLU between them."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.maximum(x @ self.w1.T + self.b1, 0.0) @ self.w2.T + self.b2


@dataclass(frozen=True)
class PolicyConfig:
    dim: int = 768
    heads: int = 12
    layers: int = 4
    object_head: bool = False

    def __post_init__(self):
        if self.dim < 1 or self.heads < 1 or self.layers < 0:
            raise PolicyError("policy dim and heads must be >= 1, layers >= 0")
        if self.dim % self.heads:
            raise PolicyError(f"dim {self.dim} is not divisible by heads {self.heads}")


@dataclass(eq=False)
class PolicyParams:
    config: PolicyConfig
    state_mlt: list
    state_mlp: MLP
    graph_mlt: list
    graph_mlp: MLP
    w_g: float
    object_mlp: MLP | None = None
    tensors: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.w_g <= 1.0:
            raise PolicyError(f"fusion weight W_g must lie in [0, 1], got {self.w_g}")


def random_policy_tensors(config: PolicyConfig, seed: int, w_g: float = 0.5) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    D = config.dim
    t: dict[str, np.ndarray] = {"meta.heads": np.array([float(config.heads)]), "fusion.w_g": _f32([w_g])}

    def normal(shape, std):
        return _f32(rng.normal(0.0, std, size=shape))

    def mlt(prefix):
        for i in range(config.layers):
            p = f"{prefix}.{i}"
            for name in ("wq", "wk", "wv", "wo"):
                t[f"{p}.{name}"] = normal((D, D), 1.0 / math.sqrt(D))
                t[f"{p}.b{name[1]}"] = np.zeros(D)
            t[f"{p}.ffn_w1"] = normal((2 * D, D), 1.0 / math.sqrt(D))
            t[f"{p}.ffn_b1"] = np.zeros(2 * D)
            t[f"{p}.ffn_w2"] = normal((D, 2 * D), 1.0 / math.sqrt(2 * D))
            t[f"{p}.ffn_b2"] = np.zeros(D)
            for ln in ("ln1", "ln2"):
                t[f"{p}.{ln}_g"] = np.ones(D)
                t[f"{p}.{ln}_b"] = np.zeros(D)

    def mlp(prefix):
        t[f"{prefix}.w1"] = normal((D, D), 1.0 / math.sqrt(D))
        t[f"{prefix}.b1"] = np.zeros(D)
        t[f"{prefix}.w2"] = normal((1, D), 1.0 / math.sqrt(D))
        t[f"{prefix}.b2"] = np.zeros(1)

    mlt("state_mlt")
    mlp("state_mlp")
    mlt("graph_mlt")
    mlp("graph_mlp")
    if config.object_head:
        mlp("object_mlp")
    return t


def policy_params_from_tensors(tensors: dict) -> PolicyParams:
    try:
        heads = int(tensors["meta.heads"][0])
        w_g = float(tensors["fusion.w_g"][0])

        def mlt(prefix):
            n = sum(1 for k in tensors if k.startswith(prefix + ".") and k.endswith(".wq"))
            return [MLTLayer(*(np.asarray(tensors[f"{prefix}.{i}.{f}"], dtype=float) for f in _MLT_FIELDS))
                    for i in range(n)]

        def mlp(prefix):
            return MLP(*(np.asarray(tensors[f"{prefix}.{f}"], dtype=float) for f in ("w1", "b1", "w2", "b2")))

        state_mlt, graph_mlt = mlt("state_mlt"), mlt("graph_mlt")
        state_mlp, graph_mlp = mlp("state_mlp"), mlp("graph_mlp")
        object_mlp = mlp("object_mlp") if "object_mlp.w1" in tensors else None
    except KeyError as exc:
        raise PolicyError(f"policy tensor {exc.args[0]!r} is missing") from None
    dim = state_mlp.w1.shape[1]
    config = PolicyConfig(dim, heads, len(state_mlt), object_mlp is not None)
    return PolicyParams(config, state_mlt, state_mlp, graph_mlt, graph_mlp, w_g, object_mlp, dict(tensors))


def seeded_policy_params(config: PolicyConfig, seed: int, w_g: float = 0.5) -> PolicyParams:
    return policy_params_from_tensors(random_policy_tensors(config, seed, w_g))


def save_policy_params(params: PolicyParams, path):
    return save_tensors(params.tensors, path)


def load_policy_params(path) -> PolicyParams:
    return policy_params_from_tensors(load_tensors(path))


# --- multi-layer transformer -------------------------------------------------

def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def self_attention(x: np.ndarray, layer: MLTLayer, heads: int) -> tuple[np.ndarray, np.ndarray]:
    """Multi-head self-attention over the rows of ``x``; also returns the (heads, N, N) weights."""
    n, d = x.shape
    dh = d // heads
    q = (x @ layer.wq.T + layer.bq).reshape(n, heads, dh).transpose(1, 0, 2)
    k = (x @ layer.wk.T + layer.bk).reshape(n, heads, dh).transpose(1, 0, 2)
    v = (x @ layer.wv.T + layer.bv).reshape(n, heads, dh).transpose(1, 0, 2)
    weights = _softmax(q @ k.transpose(0, 2, 1) / math.sqrt(dh), axis=2)
    out = (weights @ v).transpose(1, 0, 2).reshape(n, d)
    return out @ layer.wo.T + layer.bo, weights


def mlt_layer(x: np.ndarray, layer: MLTLayer, heads: int) -> np.ndarray:
    attn, _ = self_attention(x, layer, heads)
    x = _layer_norm(x + attn, layer.ln1_g, layer.ln1_b)
    ffn = np.maximum(x @ layer.ffn_w1.T + layer.ffn_b1, 0.0) @ layer.ffn_w2.T + layer.ffn_b2
    return _layer_norm(x + ffn, layer.ln2_g, layer.ln2_b)


def mlt_forward(tokens: np.ndarray, layers, heads: int) -> np.ndarray:
    x = np.atleast_2d(np.asarray(tokens, dtype=float))
    if len(x) == 0:
        raise PolicyError("MLT needs at least one token")
    for layer in layers:
        x = mlt_layer(x, layer, heads)
    return x


# --- volume state ------------------------------------------------------------

def height_group(f: VolumeFeature) -> list[np.ndarray]:
    """Horizontal slices: group z is (D, X*Y) with cells in (x, y) C order."""
    D, X, Y, Z = f.data.shape
    return [f.data[:, :, :, z].reshape(D, X * Y) for z in range(Z)]


def height_ungroup(groups, dims) -> np.ndarray:
    X, Y, Z = dims
    if len(groups) != Z:
        raise PolicyError(f"{len(groups)} groups for Z={Z}")
    return np.stack([g.reshape(-1, X, Y) for g in groups], axis=3)


@dataclass(frozen=True, eq=False)
class StateEstimate:
    dist: VolumeStateDist
    updated: VolumeFeature
    object_probs: np.ndarray | None = None


def _check_instruction(instr: Instruction, dim: int) -> np.ndarray:
    if instr.dim != dim:
        raise PolicyError(f"instruction width {instr.dim} does not match policy width {dim}")
    return instr.tokens


def estimate_state(instr: Instruction, f: VolumeFeature, params: PolicyParams,
                   objects: np.ndarray | None = None) -> StateEstimate:
    """Grouped MLT over [E; F_z] per height slice, re-stacked, then MLP + softmax over all cells.

    When ``objects`` (N_o, D) are given and the object head is configured,
    they are appended to every group and their outputs summed over height
    before an MLP + softmax over objects.
    """
    E = _check_instruction(instr, params.config.dim)
    if f.channels != params.config.dim:
        raise PolicyError(f"volume width {f.channels} does not match policy width {params.config.dim}")
    L = len(E)
    use_objects = objects is not None
    if use_objects:
        if params.object_mlp is None:
            raise PolicyError("object tokens given but the policy has no object head")
        objects = np.atleast_2d(np.asarray(objects, dtype=float))
    heads = params.config.heads
    out_groups, obj_sum = [], None
    for g in height_group(f):
        cells = g.T
        parts = [E, cells] + ([objects] if use_objects else [])
        y = mlt_forward(np.concatenate(parts), params.state_mlt, heads)
        out_groups.append(y[L:L + len(cells)].T)
        if use_objects:
            yo = y[L + len(cells):]
            obj_sum = yo if obj_sum is None else obj_sum + yo
    updated = VolumeFeature(height_ungroup(out_groups, f.dims), f.spec, f.level)
    logits = params.state_mlp(updated.flat())[:, 0]
    probs = _softmax(logits, axis=0).reshape(f.dims)
    obj_probs = _softmax(params.object_mlp(obj_sum)[:, 0], axis=0) if use_objects else None
    return StateEstimate(VolumeStateDist(probs), updated, obj_probs)


# --- local actions -----------------------------------------------------------

def candidate_cell(position, spec: GridSpec, radius: int = NEIGHBORHOOD) -> tuple[int, int]:
    """Horizontal cell of an egocentric position whose whole neighborhood lies in the grid."""
    p = np.asarray(position, dtype=float)
    X, Y, _ = spec.dims
    cell = []
    for axis, n in ((0, X), (1, Y)):
        lo, hi = spec.ranges[axis]
        if not lo <= p[axis] <= hi:
            raise PolicyError(f"candidate at {p[:2].tolist()} lies outside the grid")
        cell.append(min(int(math.floor((p[axis] - lo) / spec.resolution)), n - 1))
    i, j = cell
    if i - radius < 0 or j - radius < 0 or i + radius >= X or j + radius >= Y:
        raise PolicyError(f"neighborhood of candidate at {p[:2].tolist()} (cell {i}, {j}) leaves the grid")
    return i, j


def neighborhood_mass(dist: VolumeStateDist, cell, radius: int = NEIGHBORHOOD) -> float:
    """Sum of the height-averaged state over the square around ``cell`` (correctly rounded)."""
    i, j = cell
    block = dist.probs[i - radius:i + radius + 1, j - radius:j + radius + 1, :]
    return math.fsum(block.ravel().tolist()) / dist.probs.shape[2]


def map_state_to_action(dist: VolumeStateDist, candidates, spec: GridSpec, ids=None,
                        radius: int = NEIGHBORHOOD) -> ActionDist:
    """Local action distribution: neighborhood sums of the height-averaged state, renormalized.

    ``candidates[0]`` is the current viewpoint (STOP); positions are egocentric.
    """
    if tuple(dist.probs.shape) != tuple(spec.dims):
        raise PolicyError(f"state dims {dist.probs.shape} do not match grid dims {spec.dims}")
    scores = [neighborhood_mass(dist, candidate_cell(pos, spec, radius), radius) for pos in candidates]
    ids = tuple(range(len(candidates))) if ids is None else ids
    total = math.fsum(scores)
    if total <= 0:
        return ActionDist(ids, np.full(len(scores), 1.0 / len(scores)))
    return ActionDist(ids, np.array([v / total for v in scores]))


def heatmap_target(candidates, target: int, spec: GridSpec, sigma: float = HEATMAP_SIGMA) -> np.ndarray:
    """Gaussian heat map over the horizontal grid, peak 1 at the target candidate's cell."""
    if not 0 <= target < len(candidates):
        raise PolicyError(f"target index {target} is not among {len(candidates)} candidates")
    i0, j0 = candidate_cell(candidates[target], spec, radius=0)
    X, Y, _ = spec.dims
    ii, jj = np.meshgrid(np.arange(X), np.arange(Y), indexing="ij")
    return np.exp(-((ii - i0) ** 2 + (jj - j0) ** 2) / (2.0 * sigma ** 2))


def heatmap_focal_loss(pred: np.ndarray, target: np.ndarray, alpha: float = 0.25, gamma: float = 2.0,
                       eps: float = 1e-12) -> float:
    """Mean soft-target focal loss, -a_t |t - p|^gamma [t log p + (1 - t) log(1 - p)].

    a_t = alpha t + (1 - alpha)(1 - t). Every term is nonnegative and the
    modulating factor vanishes at p = t, so the minimum 0 is reached exactly
    when ``pred`` equals ``target``.
    """
    p = np.clip(np.asarray(pred, dtype=float), eps, 1 - eps)
    t = np.asarray(target, dtype=float)
    if p.shape != t.shape:
        raise PolicyError(f"prediction shape {p.shape} != target shape {t.shape}")
    a_t = alpha * t + (1 - alpha) * (1 - t)
    ce = -(t * np.log(p) + (1 - t) * np.log(1 - p))
    return float(np.mean(a_t * np.abs(t - p) ** gamma * ce))


# --- episodic memory ---------------------------------------------------------

def extract_pillar(f: VolumeFeature, position, radius: int = NEIGHBORHOOD) -> np.ndarray:
    """Average of the (2r+1)^2 x Z cells around an egocentric position."""
    i, j = candidate_cell(position, f.spec, radius)
    block = f.data[:, i - radius:i + radius + 1, j - radius:j + radius + 1, :]
    return block.reshape(f.channels, -1).mean(axis=1)


@dataclass(frozen=True)
class MemoryNode:
    position: np.ndarray
    embedding: np.ndarray
    count: int


@dataclass(frozen=True, eq=False)
class EpisodicGraph:
    """Observed viewpoints in insertion order, navigable edges and the current node."""

    nodes: dict = field(default_factory=dict)
    edges: frozenset = frozenset()
    current: str | None = None
    visited: tuple = ()

    def __post_init__(self):
        if self.current is not None and self.current not in self.nodes:
            raise PolicyError(f"current node {self.current!r} is not in the graph")
        for a, b in self.edges:
            if a not in self.nodes or b not in self.nodes:
                raise PolicyError(f"edge ({a}, {b}) references an unknown node")

    @property
    def ids(self) -> tuple:
        return tuple(self.nodes)

    def embeddings(self) -> np.ndarray:
        return np.stack([n.embedding for n in self.nodes.values()])

    def neighbors(self, node) -> list:
        return sorted({b for a, b in self.edges if a == node} | {a for a, b in self.edges if b == node})

    def to_networkx(self):
        import networkx as nx

        g = nx.Graph()
        g.add_nodes_from(self.nodes)
        for a, b in self.edges:
            d = float(np.linalg.norm(self.nodes[a].position - self.nodes[b].position))
            g.add_edge(a, b, weight=d)
        return g


def update_memory(g: EpisodicGraph, viewpoint, position, candidates, embeddings) -> EpisodicGraph:
    """Insert the current viewpoint and its candidates.

    ``candidates`` is a list of (id, position); ``embeddings`` holds one
    vector for the viewpoint followed by one per candidate. New nodes take
    their embedding; known nodes keep the running mean of all observations.
    """
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=float))
    if len(embeddings) != len(candidates) + 1:
        raise PolicyError(f"{len(embeddings)} embeddings for {len(candidates) + 1} nodes")
    if g.nodes:
        width = next(iter(g.nodes.values())).embedding.shape[0]
        if embeddings.shape[1] != width:
            raise PolicyError(f"embedding width {embeddings.shape[1]} != memory width {width}")
    nodes = dict(g.nodes)
    observed = [(viewpoint, position)] + list(candidates)
    for (node, pos), emb in zip(observed, embeddings):
        if node in nodes:
            old = nodes[node]
            count = old.count + 1
            nodes[node] = MemoryNode(old.position, old.embedding + (emb - old.embedding) / count, count)
        else:
            nodes[node] = MemoryNode(np.asarray(pos, dtype=float), emb.copy(), 1)
    edges = set(g.edges)
    for node, _ in candidates:
        if node != viewpoint:
            edges.add(tuple(sorted((viewpoint, node))))
    visited = g.visited if viewpoint in g.visited else g.visited + (viewpoint,)
    return EpisodicGraph(nodes, frozenset(edges), viewpoint, visited)


def global_action(instr: Instruction, g: EpisodicGraph, params: PolicyParams) -> ActionDist:
    if not g.nodes:
        raise PolicyError("global action needs a non-empty memory graph")
    E = _check_instruction(instr, params.config.dim)
    y = mlt_forward(np.concatenate([E, g.embeddings()]), params.graph_mlt, params.config.heads)
    logits = params.graph_mlp(y[len(E):])[:, 0]
    return ActionDist(g.ids, _softmax(logits, axis=0))


def lift_local(local: ActionDist, g: EpisodicGraph) -> np.ndarray:
    """Local probabilities on the memory nodes; nodes outside the local set get the STOP value."""
    stop = local.probs[0]
    lookup = dict(zip(local.ids, local.probs))
    for node in local.ids:
        if node not in g.nodes:
            raise PolicyError(f"local action {node!r} is not a memory node")
    lifted = np.array([lookup.get(node, stop) for node in g.ids])
    return lifted / lifted.sum()


def fuse_actions(local: ActionDist, glob: ActionDist, g: EpisodicGraph, w_g: float) -> ActionDist:
    if tuple(glob.ids) != g.ids:
        raise PolicyError("global action ids do not match the memory nodes")
    if local.ids[0] != g.current:
        raise PolicyError(f"local STOP entry {local.ids[0]!r} is not the current node {g.current!r}")
    if not 0.0 <= w_g <= 1.0:
        raise PolicyError(f"W_g must lie in [0, 1], got {w_g}")
    fused = w_g * glob.probs + (1.0 - w_g) * lift_local(local, g)
    return ActionDist(g.ids, fused)



# --- memory file -------------------------------------------------------------

def format_memory(g: EpisodicGraph, viewpoint: str | None = None, position=None, candidates=()) -> str:
    """Text form of a memory graph plus the pending observation.

    Records: ``node id x y z count e_1 .. e_D``, ``edge a b``, ``visited id``,
    ``current id x y z`` (the viewpoint about to decide) and
    ``candidate id x y z`` for each of its navigable neighbors.
    """
    lines = []
    for node, m in g.nodes.items():
        vals = " ".join(repr(float(v)) for v in (*m.position, m.count, *m.embedding))
        lines.append(f"node {node} {vals}")
    lines += [f"edge {a} {b}" for a, b in sorted(g.edges)]
    lines += [f"visited {v}" for v in g.visited]
    if viewpoint is not None:
        lines.append(f"current {viewpoint} " + " ".join(repr(float(v)) for v in position))
    lines += [f"candidate {c} " + " ".join(repr(float(v)) for v in p) for c, p in candidates]
    return "\n".join(lines) + "\n"


def parse_memory(text: str, source: str = "<memory>"):
    """Inverse of :func:`format_memory`: (graph, viewpoint, position, candidates)."""
    nodes, edges, visited, candidates = {}, set(), [], []
    viewpoint, position = None, None
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        try:
            kind = parts[0]
            if kind == "node":
                vals = [float(v) for v in parts[2:]]
                if len(vals) < 5:
                    raise ValueError("node needs position, count and an embedding")
                nodes[parts[1]] = MemoryNode(np.array(vals[:3]), np.array(vals[4:]), int(vals[3]))
            elif kind == "edge" and len(parts) == 3:
                edges.add(tuple(sorted(parts[1:])))
            elif kind == "visited" and len(parts) == 2:
                visited.append(parts[1])
            elif kind == "current" and len(parts) == 5:
                viewpoint, position = parts[1], np.array([float(v) for v in parts[2:]])
            elif kind == "candidate" and len(parts) == 5:
                candidates.append((parts[1], np.array([float(v) for v in parts[2:]])))
            else:
                raise ValueError(f"unrecognized record {parts[0]!r}")
        except ValueError as exc:
            raise PolicyError(f"{source}:{lineno}: {exc}") from None
    current = visited[-1] if visited else None
    return EpisodicGraph(nodes, frozenset(edges), current, tuple(visited)), viewpoint, position, candidates
