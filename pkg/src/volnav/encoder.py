"""Forward pass of the volumetric environment encoder.

Volume queries on a coarse egocentric lattice attend to multi-view 2D feature
maps through deformable cross-view attention (CVA); the resulting volume is
lifted level by level with stride-2 transposed 3D convolutions (or trilinear
interpolation) and refined by one further CVA pass per level. Parameters are
supplied (seeded or loaded), never trained.

Array conventions: volume features are ``(D, X, Y, Z)``; view feature maps
are ``(C, H, W)`` and sampled at feature-grid coordinates ``(u, v)`` where
``u`` indexes columns and ``v`` rows, with integer values at cell centers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .annotate import (
    FREE,
    UNKNOWN,
    AnnotationError,
    AnnotationSet,
    VoxelGrid,
    crop_grid_top,
    crop_top,
    downsample_labels,
    fit_oriented_box,
)
from .geometry import OrientedBox, RoomLayout
from .metrics import detection_metrics, layout_iou
from .scene import FOREGROUND_CLASSES, NUM_CLASSES, Camera, GridSpec, Scene, project_points
from .tensorio import load_tensors, save_tensors

FREE_INDEX = NUM_CLASSES  # logit channel for free space
TASK_WEIGHTS = (2.0, 0.25, 0.25)  # occupancy, layout, detection
UPSAMPLE_MODES = ("deconv", "trilinear")


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 768
    view_dim: int = 768
    heads: int = 8
    samples: int = 6
    layers: int = 6
    levels: int = 3
    z_cells: int = 32
    upsample: str = "deconv"
    activation: str = "relu"
    grid: GridSpec = field(default_factory=GridSpec)

    def __post_init__(self):
        for name in ("dim", "view_dim", "heads", "samples", "layers", "z_cells"):
            if getattr(self, name) < 1:
                raise EncoderError(f"{name} must be >= 1")
        if self.levels < 0:
            raise EncoderError("levels must be >= 0")
        if self.upsample not in UPSAMPLE_MODES:
            raise EncoderError(f"upsample must be one of {UPSAMPLE_MODES}, got {self.upsample!r}")
        if self.activation not in ("relu", "gelu"):
            raise EncoderError(f"activation must be relu or gelu, got {self.activation!r}")
        if self.z_cells % (2 ** self.levels):
            raise EncoderError(f"z_cells={self.z_cells} is not divisible by 2**levels")

    @property
    def head_dim(self) -> int:
        return max(1, self.dim // self.heads)

    def fine_spec(self) -> GridSpec:
        """The finest level: ``grid`` cropped to its top ``z_cells`` layers."""
        return crop_top(self.grid, self.z_cells)

    def level_specs(self) -> list[GridSpec]:
        """Egocentric grids of levels 0..M, coarse to fine."""
        fine = self.fine_spec()
        return [fine.with_resolution(fine.resolution * 2 ** (self.levels - m)) for m in range(self.levels + 1)]


@dataclass(frozen=True, eq=False)
class VolumeFeature:
    data: np.ndarray
    spec: GridSpec
    level: int = 0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 4 or tuple(data.shape[1:]) != tuple(self.spec.dims):
            raise EncoderError(f"volume data shape {data.shape} does not match grid dims {self.spec.dims}")
        if not np.all(np.isfinite(data)):
            raise EncoderError(f"volume feature at level {self.level} has non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    def flat(self) -> np.ndarray:
        """Cells in C order as rows, shape (X*Y*Z, D)."""
        return self.data.reshape(self.channels, -1).T


@dataclass(frozen=True, eq=False)
class ViewFeature:
    camera: Camera
    data: np.ndarray
    scale: float

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 3:
            raise EncoderError("view feature map must be (C, H, W)")
        if not np.all(np.isfinite(data)):
            raise EncoderError("view feature map has non-finite values")
        if not self.scale > 0:
            raise EncoderError("view feature scale must be positive")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "scale", float(self.scale))

    def to_feature_coords(self, uv_pixels: np.ndarray) -> np.ndarray:
        """Pixel coordinates (pixel i spans [i, i+1)) to feature-grid coordinates."""
        return np.asarray(uv_pixels, dtype=float) / self.scale - 0.5


@dataclass(frozen=True, eq=False)
class AttentionLayer:
    """Deformable attention: ``sum_k W_k sum_s A_ks W_s F(p + dp_ks)``.

    ``offset_w``/``attn_w`` map the query to the K*S sampling offsets (in
    feature-grid units) and attention logits; ``value_proj[s]`` is W_s
    (head_dim x C) and ``out_proj[k]`` is W_k (D x head_dim).
    """

    offset_w: np.ndarray
    offset_b: np.ndarray
    attn_w: np.ndarray
    attn_b: np.ndarray
    value_proj: np.ndarray
    out_proj: np.ndarray

    @property
    def heads(self) -> int:
        return self.out_proj.shape[0]

    @property
    def samples(self) -> int:
        return self.value_proj.shape[0]

    def __post_init__(self):
        K, D, Dh = self.out_proj.shape
        S, Dh2, _ = self.value_proj.shape
        if Dh2 != Dh:
            raise EncoderError("value and output projections disagree on head dim")
        if self.offset_w.shape != (K * S * 2, D) or self.offset_b.shape != (K * S * 2,):
            raise EncoderError(f"offset predictor must map {D} -> {K * S * 2}")
        if self.attn_w.shape != (K * S, D) or self.attn_b.shape != (K * S,):
            raise EncoderError(f"attention predictor must map {D} -> {K * S}")


@dataclass(frozen=True, eq=False)
class CVALayer:
    attn: AttentionLayer
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray


@dataclass(eq=False)
class EncoderParams:
    config: EncoderConfig
    queries: np.ndarray
    cva: list
    deconv: list  # (weight (D, D, 2, 2, 2), bias (D,)) per upsampling step
    refine: list
    occ_heads: list  # (weight (C+1, D), bias) per level
    layout_head: tuple  # (weight (7, D), bias)
    tensors: dict = field(default_factory=dict, repr=False)


# --- parameters ------------------------------------------------------------

_ATTN_FIELDS = ("offset_w", "offset_b", "attn_w", "attn_b", "value_proj", "out_proj")
_FFN_FIELDS = ("ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2")


def _f32(a: np.ndarray) -> np.ndarray:
    """Round to float32 precision so a save/load round trip is exact."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _grid_tensor(grid: GridSpec) -> np.ndarray:
    return np.array([*grid.x_range, *grid.y_range, *grid.z_range, grid.resolution])


def _grid_from_tensor(t: np.ndarray) -> GridSpec:
    # Stored as float32; grid values are decimal numbers with few digits.
    v = [round(float(x), 6) for x in np.asarray(t).ravel()]
    return GridSpec((v[0], v[1]), (v[2], v[3]), (v[4], v[5]), v[6])


def random_tensors(config: EncoderConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    D, C, K, S, Dh = config.dim, config.view_dim, config.heads, config.samples, config.head_dim
    t: dict[str, np.ndarray] = {}

    def normal(shape, std):
        return _f32(rng.normal(0.0, std, size=shape))

    def cva(prefix):
        t[f"{prefix}.offset_w"] = normal((K * S * 2, D), 0.5 / math.sqrt(D))
        t[f"{prefix}.offset_b"] = normal((K * S * 2,), 0.5)
        t[f"{prefix}.attn_w"] = normal((K * S, D), 1.0 / math.sqrt(D))
        t[f"{prefix}.attn_b"] = np.zeros(K * S)
        t[f"{prefix}.value_proj"] = normal((S, Dh, C), 1.0 / math.sqrt(C))
        t[f"{prefix}.out_proj"] = normal((K, D, Dh), 1.0 / math.sqrt(Dh * K))
        t[f"{prefix}.ffn_w1"] = normal((2 * D, D), 1.0 / math.sqrt(D))
        t[f"{prefix}.ffn_b1"] = np.zeros(2 * D)
        t[f"{prefix}.ffn_w2"] = normal((D, 2 * D), 0.5 / math.sqrt(2 * D))
        t[f"{prefix}.ffn_b2"] = np.zeros(D)

    specs = config.level_specs()
    t["meta.grid"] = _grid_tensor(config.grid)
    t["queries"] = normal((D, *specs[0].dims), 1.0)
    for i in range(config.layers):
        cva(f"cva.{i}")
    for m in range(config.levels):
        t[f"up.{m}.deconv_w"] = normal((D, D, 2, 2, 2), 1.0 / math.sqrt(D))
        t[f"up.{m}.deconv_b"] = np.zeros(D)
        cva(f"up.{m}.refine")
    for m in range(config.levels + 1):
        t[f"head.{m}.w"] = normal((NUM_CLASSES + 1, D), 1.0 / math.sqrt(D))
        t[f"head.{m}.b"] = np.zeros(NUM_CLASSES + 1)
    t["layout.w"] = normal((7, D), 0.1 / math.sqrt(D))
    t["layout.b"] = _f32(np.array([0.0, 0.0, -0.1, math.log(4.5), math.log(4.5), math.log(2.8), 0.0]))
    return t


def params_from_tensors(tensors: dict, upsample: str = "deconv", activation: str = "relu") -> EncoderParams:
    """Assemble parameters; every dimension is inferred from the tensor shapes."""
    try:
        queries = np.asarray(tensors["queries"], dtype=float)
        D = queries.shape[0]
        layers = sum(1 for k in tensors if k.startswith("cva.") and k.endswith(".offset_w"))
        levels = sum(1 for k in tensors if k.startswith("up.") and k.endswith(".deconv_w"))
        out_proj = tensors["cva.0.out_proj"] if layers else tensors["up.0.refine.out_proj"]
        K = out_proj.shape[0]
        S, _, C = (tensors["cva.0.value_proj"] if layers else tensors["up.0.refine.value_proj"]).shape

        def cva(prefix):
            attn = AttentionLayer(*(np.asarray(tensors[f"{prefix}.{f}"], dtype=float) for f in _ATTN_FIELDS))
            return CVALayer(attn, *(np.asarray(tensors[f"{prefix}.{f}"], dtype=float) for f in _FFN_FIELDS))

        cva_layers = [cva(f"cva.{i}") for i in range(layers)]
        deconv = [(tensors[f"up.{m}.deconv_w"], tensors[f"up.{m}.deconv_b"]) for m in range(levels)]
        refine = [cva(f"up.{m}.refine") for m in range(levels)]
        heads = [(tensors[f"head.{m}.w"], tensors[f"head.{m}.b"]) for m in range(levels + 1)]
        layout = (tensors["layout.w"], tensors["layout.b"])
    except KeyError as exc:
        raise EncoderError(f"parameter tensor {exc.args[0]!r} is missing") from None
    z_cells = queries.shape[3] * 2 ** levels
    grid = _grid_from_tensor(tensors["meta.grid"]) if "meta.grid" in tensors else GridSpec()
    config = EncoderConfig(D, C, K, S, layers, levels, z_cells, upsample, activation, grid)
    for w, _ in deconv:
        if w.shape != (D, D, 2, 2, 2):
            raise EncoderError(f"deconvolution kernel must be ({D}, {D}, 2, 2, 2), got {w.shape}")
    for w, _ in heads:
        if w.shape != (NUM_CLASSES + 1, D):
            raise EncoderError(f"occupancy head must be ({NUM_CLASSES + 1}, {D}), got {w.shape}")
    return EncoderParams(config, queries, cva_layers, deconv, refine, heads, layout, dict(tensors))


def seeded_params(config: EncoderConfig, seed: int) -> EncoderParams:
    return params_from_tensors(random_tensors(config, seed), config.upsample, config.activation)


def save_params(params: EncoderParams, path):
    return save_tensors(params.tensors, path)


def load_params(path, upsample: str = "deconv", activation: str = "relu") -> EncoderParams:
    return params_from_tensors(load_tensors(path), upsample, activation)


# --- view features ---------------------------------------------------------

def seeded_view_features(cameras, view_dim: int, seed: int, scale: float = 16.0) -> list[ViewFeature]:
    """Random feature maps standing in for a 2D backbone."""
    rng = np.random.default_rng(seed)
    out = []
    for cam in cameras:
        h, w = cam.image_size
        out.append(ViewFeature(cam, _f32(rng.normal(size=(view_dim, math.ceil(h / scale), math.ceil(w / scale)))), scale))
    return out


def class_embeddings(view_dim: int, seed: int) -> np.ndarray:
    return _f32(np.random.default_rng(seed).normal(size=(NUM_CLASSES, view_dim)))


def render_view_features(scene: Scene, viewpoint: str, view_dim: int, seed: int = 0,
                         scale: float = 16.0) -> list[ViewFeature]:
    """Semantic stub features: each feature cell holds the class embedding of its nearest point.

    Points are splatted with a depth buffer at feature-cell resolution;
    cells that see no point are zero.
    """
    if viewpoint not in scene.cameras:
        raise EncoderError(f"viewpoint {viewpoint!r} has no cameras")
    emb = class_embeddings(view_dim, seed)
    out = []
    for cam in scene.cameras[viewpoint]:
        h, w = cam.image_size
        hf, wf = math.ceil(h / scale), math.ceil(w / scale)
        uv, depth, vis = project_points(scene.cloud.points, cam)
        col = np.floor(uv[vis, 0] / scale).astype(np.int64)
        row = np.floor(uv[vis, 1] / scale).astype(np.int64)
        cell = row * wf + col
        order = np.lexsort((depth[vis], cell))
        cell, labels = cell[order], scene.cloud.labels[vis][order]
        first = np.ones(len(cell), dtype=bool)
        first[1:] = cell[1:] != cell[:-1]
        data = np.zeros((view_dim, hf * wf))
        data[:, cell[first]] = emb[labels[first]].T
        out.append(ViewFeature(cam, data.reshape(view_dim, hf, wf), scale))
    return out


# --- geometry ------------------------------------------------------------------

def reference_points(spec: GridSpec, cameras, origin=(0.0, 0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """Project every cell center (egocentric ``spec`` placed at ``origin``) into each camera.

    Returns pixel coordinates of shape (views, cells, 2) and a visibility
    mask of shape (views, cells); cells are in C order.
    """
    centers = spec.cell_centers() + np.asarray(origin, dtype=float)
    uvs, vis = [], []
    for cam in cameras:
        uv, _, visible = project_points(centers, cam)
        uvs.append(uv)
        vis.append(visible)
    if not uvs:
        return np.zeros((0, len(centers), 2)), np.zeros((0, len(centers)), dtype=bool)
    return np.stack(uvs), np.stack(vis)


def bilinear_sample(fmap: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Sample a (C, H, W) map at continuous (u, v) positions, clamped to the map; returns (N, C)."""
    fmap = np.asarray(fmap, dtype=float)
    _, h, w = fmap.shape
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    u = np.clip(uv[:, 0], 0.0, w - 1.0)
    v = np.clip(uv[:, 1], 0.0, h - 1.0)
    u0 = np.minimum(np.floor(u).astype(np.int64), max(w - 2, 0))
    v0 = np.minimum(np.floor(v).astype(np.int64), max(h - 2, 0))
    u1, v1 = np.minimum(u0 + 1, w - 1), np.minimum(v0 + 1, h - 1)
    fu, fv = u - u0, v - v0
    return (
        fmap[:, v0, u0] * ((1 - fu) * (1 - fv))
        + fmap[:, v0, u1] * (fu * (1 - fv))
        + fmap[:, v1, u0] * ((1 - fu) * fv)
        + fmap[:, v1, u1] * (fu * fv)
    ).T


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def attention_weights(query: np.ndarray, layer: AttentionLayer) -> np.ndarray:
    """Normalized A_ks per query, shape (N, K, S)."""
    q = np.atleast_2d(query)
    logits = (q @ layer.attn_w.T + layer.attn_b).reshape(len(q), layer.heads, layer.samples)
    return _softmax(logits, axis=2)


def sampling_offsets(query: np.ndarray, layer: AttentionLayer) -> np.ndarray:
    q = np.atleast_2d(query)
    return (q @ layer.offset_w.T + layer.offset_b).reshape(len(q), layer.heads, layer.samples, 2)


def deformable_attention(query, ref, fmap: np.ndarray, layer: AttentionLayer) -> np.ndarray:
    """Deformable attention for a batch of queries.

    ``query`` is (N, D) or (D,), ``ref`` the matching (N, 2) or (2,)
    feature-grid reference points, ``fmap`` a (C, H, W) map.
    """
    single = np.ndim(query) == 1
    q = np.atleast_2d(np.asarray(query, dtype=float))
    ref = np.atleast_2d(np.asarray(ref, dtype=float))
    n, K, S = len(q), layer.heads, layer.samples
    A = attention_weights(q, layer)
    loc = ref[:, None, None, :] + sampling_offsets(q, layer)
    heads = np.zeros((n, K, layer.value_proj.shape[1]))
    for s in range(S):
        # Bilinear sampling is linear, so project the map before sampling.
        projected = np.einsum("hc,cyx->hyx", layer.value_proj[s], fmap)
        sampled = bilinear_sample(projected, loc[:, :, s, :].reshape(-1, 2)).reshape(n, K, -1)
        heads += A[:, :, s, None] * sampled
    out = np.einsum("nkh,kdh->nd", heads, layer.out_proj)
    return out[0] if single else out


def _activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0.0)
    from scipy.special import erf

    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def cva_layer(x: np.ndarray, refs: list, views: list, layer: CVALayer, activation: str = "relu") -> np.ndarray:
    """One CVA layer over cell rows ``x`` (N, D).

    ``refs`` holds per-view (feature-grid uv (N, 2), visible (N,)). Each
    visible cell averages its deformable-attention result over the views
    that see it, adds it to its query, then applies a residual feed-forward
    block. Cells seen by no view are returned unchanged.
    """
    acc = np.zeros_like(x)
    count = np.zeros(len(x))
    for (uv, vis), view in zip(refs, views):
        if not np.any(vis):
            continue
        acc[vis] += deformable_attention(x[vis], uv[vis], view.data, layer.attn)
        count[vis] += 1
    seen = count > 0
    out = x.copy()
    if np.any(seen):
        y = x[seen] + acc[seen] / count[seen, None]
        hidden = _activation(y @ layer.ffn_w1.T + layer.ffn_b1, activation)
        out[seen] = y + hidden @ layer.ffn_w2.T + layer.ffn_b2
    return out


def _view_refs(spec: GridSpec, views, origin) -> list:
    if not views:
        raise EncoderError("cross-view aggregation needs at least one view")
    uv, vis = reference_points(spec, [v.camera for v in views], origin)
    return [(view.to_feature_coords(uv[i]), vis[i]) for i, view in enumerate(views)]


def cross_view_aggregate(queries: VolumeFeature, views, layers, origin=(0.0, 0.0, 0.0),
                         activation: str = "relu") -> VolumeFeature:
    """Stack of CVA layers on a query volume; reference points are fixed across layers."""
    refs = _view_refs(queries.spec, views, origin)
    x = queries.flat().copy()
    for layer in layers:
        x = cva_layer(x, refs, views, layer, activation)
    return VolumeFeature(x.T.reshape(queries.data.shape), queries.spec, queries.level)


# --- upsampling ------------------------------------------------------------

def deconv_upsample(data: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Transposed 3D convolution, kernel 2 and stride 2; ``weight`` is (D_out, D_in, 2, 2, 2)."""
    d_out = weight.shape[0]
    _, X, Y, Z = data.shape
    out = np.einsum("oiabc,ixyz->oxaybzc", weight, data).reshape(d_out, 2 * X, 2 * Y, 2 * Z)
    return out + np.asarray(bias)[:, None, None, None]


def _linear_double(data: np.ndarray, axis: int) -> np.ndarray:
    n = data.shape[axis]
    src = np.clip((np.arange(2 * n) + 0.5) / 2 - 0.5, 0, n - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    shape = [1] * data.ndim
    shape[axis] = 2 * n
    frac = frac.reshape(shape)
    return np.take(data, lo, axis=axis) * (1 - frac) + np.take(data, hi, axis=axis) * frac


def trilinear_upsample(data: np.ndarray) -> np.ndarray:
    """Double every spatial axis by trilinear interpolation (half-pixel centers, edge clamped)."""
    out = data
    for axis in (1, 2, 3):
        out = _linear_double(out, axis)
    return out


def upsample_level(f: VolumeFeature, views, params: EncoderParams, origin=(0.0, 0.0, 0.0),
                   mode: str | None = None) -> VolumeFeature:
    """Lift level m to m+1 and refine it with one CVA pass at the finer reference points."""
    m = f.level
    if m >= params.config.levels:
        raise EncoderError(f"level {m} is already the finest (M={params.config.levels})")
    mode = mode or params.config.upsample
    if mode == "deconv":
        w, b = params.deconv[m]
        data = deconv_upsample(f.data, w, b)
    elif mode == "trilinear":
        data = trilinear_upsample(f.data)
    else:
        raise EncoderError(f"unknown upsampling mode {mode!r}")
    spec = f.spec.with_resolution(f.spec.resolution / 2)
    lifted = VolumeFeature(data, spec, m + 1)
    return cross_view_aggregate(lifted, views, [params.refine[m]], origin, params.config.activation)


def encode_ver(views, params: EncoderParams, origin=(0.0, 0.0, 0.0)) -> list[VolumeFeature]:
    """Volume feature pyramid [F(0), ..., F(M)], coarse to fine."""
    spec0 = params.config.level_specs()[0]
    if tuple(params.queries.shape[1:]) != tuple(spec0.dims):
        raise EncoderError(f"query grid {params.queries.shape[1:]} does not match level-0 dims {spec0.dims}")
    f = cross_view_aggregate(VolumeFeature(params.queries, spec0, 0), views, params.cva, origin,
                             params.config.activation)
    pyramid = [f]
    for _ in range(params.config.levels):
        f = upsample_level(f, views, params, origin)
        pyramid.append(f)
    return pyramid


# --- heads and losses --------------------------------------------------------

def focal_loss(logits: np.ndarray, targets: np.ndarray, alpha: float = 0.25, gamma: float = 2.0,
               valid: np.ndarray | None = None) -> float:
    """Mean multiclass focal loss; ``logits`` is (C, ...), ``targets`` integer (...)."""
    logits = np.asarray(logits, dtype=float)
    targets = np.asarray(targets)
    mask = np.ones(targets.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if not np.any(mask):
        return 0.0
    z = logits.reshape(logits.shape[0], -1)[:, mask.ravel()]
    t = targets.ravel()[mask.ravel()].astype(np.int64)
    zmax = z.max(axis=0)
    logp = z - zmax - np.log(np.sum(np.exp(z - zmax), axis=0))
    lpt = logp[t, np.arange(len(t))]
    pt = np.exp(lpt)
    return float(np.mean(-alpha * (1.0 - pt) ** gamma * lpt))


def labels_to_targets(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map class ids and FREE to logit indices; UNKNOWN voxels are invalid."""
    labels = np.asarray(labels)
    targets = np.where(labels == FREE, FREE_INDEX, labels).astype(np.int64)
    valid = labels != UNKNOWN
    return np.where(valid, targets, 0), valid


def occupancy_logits(f: VolumeFeature, head) -> np.ndarray:
    w, b = head
    return np.einsum("cd,dxyz->cxyz", w, f.data) + np.asarray(b)[:, None, None, None]


def logits_to_grid(logits: np.ndarray, spec: GridSpec) -> VoxelGrid:
    idx = np.argmax(logits, axis=0)
    return VoxelGrid(spec, np.where(idx == FREE_INDEX, FREE, idx).astype(np.uint8))


def _same_lattice(a: GridSpec, b: GridSpec) -> bool:
    return (a.dims == b.dims and math.isclose(a.resolution, b.resolution)
            and np.allclose(a.lower, b.lower, atol=1e-9) and np.allclose(a.upper, b.upper, atol=1e-9))


def predict_layout(f: VolumeFeature, head) -> RoomLayout:
    w, b = head
    p = w @ f.flat().mean(axis=0) + b
    return RoomLayout(p[:3], *np.exp(np.clip(p[3:6], -5, 5)), p[6])


def boxes_from_grid(grid: VoxelGrid, probs: np.ndarray, min_voxels: int = 8,
                    max_boxes: int = 64) -> tuple[list[OrientedBox], list[float]]:
    """Boxes around connected components of each predicted foreground class.

    Components smaller than ``min_voxels`` are dropped and at most
    ``max_boxes`` of the largest are kept; each is scored by its mean class
    probability.
    """
    res = grid.spec.resolution
    candidates = []
    for c in FOREGROUND_CLASSES:
        comp, n = ndimage.label(grid.labels == c)
        if n == 0:
            continue
        sizes = np.bincount(comp.ravel(), minlength=n + 1)
        for i, sl in enumerate(ndimage.find_objects(comp), start=1):
            if sizes[i] >= min_voxels:
                candidates.append((-int(sizes[i]), c, i, sl, comp))
    candidates.sort(key=lambda t: t[:3])
    boxes, scores = [], []
    for _, c, i, sl, comp in candidates[:max_boxes]:
        sel = comp[sl] == i
        idx = np.argwhere(sel) + np.array([s.start for s in sl])
        pts = grid.spec.lower + (idx + 0.5) * res
        try:
            fit = fit_oriented_box(pts, c, len(boxes))
        except AnnotationError:
            continue
        boxes.append(OrientedBox(fit.center, fit.half_extents + res / 2, fit.yaw, c, len(boxes)))
        scores.append(float(probs[c][sl][sel].mean()))
    return boxes, scores


@dataclass
class HeadScores:
    level_losses: list
    grids: list
    task_losses: dict
    total: float
    layout: RoomLayout | None
    layout_iou: float | None
    boxes: list
    mAP: float


def supervision_grid(annotations: AnnotationSet, spec: GridSpec) -> VoxelGrid:
    """Labels on the lattice of ``spec``: the fine grid cropped to the same top and downsampled."""
    fine = annotations.fine
    ratio = spec.resolution / fine.spec.resolution
    factor = int(round(ratio))
    if factor < 1 or abs(ratio - factor) > 1e-6:
        raise EncoderError(f"level resolution {spec.resolution} is not a multiple of {fine.spec.resolution}")
    z_fine = spec.dims[2] * factor
    if z_fine > fine.spec.dims[2]:
        raise EncoderError(f"level needs {z_fine} fine layers, annotation has {fine.spec.dims[2]}")
    grid = crop_grid_top(fine, z_fine)
    return grid if factor == 1 else downsample_labels(grid, factor)


def multiscale_heads(pyramid: list[VolumeFeature], annotations: AnnotationSet, params: EncoderParams,
                     alpha: float = 0.25, gamma: float = 2.0) -> HeadScores:
    """Forward-only scoring of the pyramid against multi-resolution labels.

    Levels whose resolution is one of the annotation resolutions are
    supervised (at most the finest ``len(annotations.occupancy)``); their
    focal losses are averaged into the occupancy task loss. Layout and
    detection are scored as 1 - IoU and 1 - mAP, and the three task losses
    are combined with :data:`TASK_WEIGHTS`.
    """
    resolutions = list(annotations.occupancy)
    supervised = [f for f in pyramid if any(abs(f.spec.resolution - r) < 1e-9 for r in resolutions)]
    supervised = supervised[-len(resolutions):]
    if not supervised or supervised[-1] is not pyramid[-1]:
        raise EncoderError("the finest pyramid level does not match any annotation resolution")
    level_losses, grids = [], []
    finest_probs = None
    for f in supervised:
        gt = supervision_grid(annotations, f.spec)
        if not _same_lattice(f.spec, gt.spec):
            raise EncoderError(f"level {f.level} grid {f.spec} does not match supervision grid {gt.spec}")
        logits = occupancy_logits(f, params.occ_heads[f.level])
        targets, valid = labels_to_targets(gt.labels)
        level_losses.append(focal_loss(logits, targets, alpha, gamma, valid))
        grids.append(logits_to_grid(logits, f.spec))
        finest_probs = _softmax(logits, axis=0)
    occ = float(np.mean(level_losses))

    layout = predict_layout(pyramid[-1], params.layout_head)
    if annotations.layout is None:
        liou, layout_loss = None, 0.0
    else:
        liou = layout_iou(layout, annotations.layout)
        layout_loss = 1.0 - liou

    boxes, scores = boxes_from_grid(grids[-1], finest_probs)
    if annotations.boxes:
        mAP = detection_metrics(boxes, scores, list(annotations.boxes))["mAP"]
        det_loss = 1.0 - mAP
    else:
        mAP, det_loss = 0.0, 0.0

    tasks = {"occupancy": occ, "layout": layout_loss, "detection": det_loss}
    total = float(np.dot(TASK_WEIGHTS, [occ, layout_loss, det_loss]))
    return HeadScores(level_losses, grids, tasks, total, layout, liou, boxes, mAP)


def predict_annotations(pyramid: list[VolumeFeature], params: EncoderParams, viewpoint: str, origin,
                        levels: int = 3) -> AnnotationSet:
    """Head outputs of the finest ``levels`` levels as an annotation set.

    Boxes are ordered by descending score (their instance id is the rank),
    so a consumer that ranks by file order reproduces the score ranking.
    """
    levels = min(levels, len(pyramid))
    occupancy, finest = {}, None
    for f in pyramid[-levels:]:
        logits = occupancy_logits(f, params.occ_heads[f.level])
        occupancy[f.spec.resolution] = logits_to_grid(logits, f.spec)
        finest = (occupancy[f.spec.resolution], _softmax(logits, axis=0))
    boxes, scores = boxes_from_grid(*finest)
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    ranked = tuple(OrientedBox(boxes[i].center, boxes[i].half_extents, boxes[i].yaw, boxes[i].class_id, rank)
                   for rank, i in enumerate(order))
    layout = predict_layout(pyramid[-1], params.layout_head)
    return AnnotationSet(viewpoint, np.asarray(origin, dtype=float).copy(), occupancy, ranked, layout)
