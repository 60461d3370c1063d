import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from volnav.annotate import generate_annotations
from volnav.encoder import (
    EncoderConfig,
    EncoderError,
    VolumeFeature,
    attention_weights,
    bilinear_sample,
    deconv_upsample,
    deformable_attention,
    encode_ver,
    focal_loss,
    load_params,
    multiscale_heads,
    predict_annotations,
    reference_points,
    render_view_features,
    save_params,
    seeded_params,
    seeded_view_features,
    trilinear_upsample,
)
from volnav.oracles import bilinear_oracle, deformable_attention_oracle
from volnav.scene import Camera, GridSpec

TINY = EncoderConfig(dim=8, view_dim=4, heads=2, samples=3, layers=1, levels=1, z_cells=8,
                     grid=GridSpec(resolution=0.4))


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4)),
                  elements=st.floats(-10, 10)),
       st.floats(-2, 6), st.floats(-2, 6))
def test_bilinear_matches_scalar_oracle(fmap, u, v):
    fast = bilinear_sample(fmap, np.array([[u, v]]))[0]
    assert np.allclose(fast, bilinear_oracle(fmap, u, v), atol=1e-12)


def test_bilinear_hits_cell_centers_exactly(rng):
    fmap = rng.standard_normal((3, 4, 5))
    for row in range(4):
        for col in range(5):
            assert np.array_equal(bilinear_sample(fmap, np.array([[col, row]]))[0], fmap[:, row, col])


@given(st.integers(0, 10_000))
def test_deformable_attention_matches_oracle_on_2x2(seed):
    rng = np.random.default_rng(seed)
    layer = seeded_params(TINY, seed % 7).cva[0].attn
    fmap = rng.standard_normal((4, 2, 2))
    q = rng.standard_normal((5, 8))
    ref = rng.uniform(-1, 2, (5, 2))
    fast = deformable_attention(q, ref, fmap, layer)
    for i in range(5):
        assert np.max(np.abs(fast[i] - deformable_attention_oracle(q[i], ref[i], fmap, layer))) <= 1e-10
    assert np.allclose(attention_weights(q, layer).sum(axis=2), 1.0, atol=1e-6)


def test_config_validation():
    with pytest.raises(EncoderError):
        EncoderConfig(upsample="nearest")
    with pytest.raises(EncoderError):
        EncoderConfig(z_cells=30, levels=3)
    assert EncoderConfig().head_dim == 96


def test_level_specs_default_grid():
    dims = [s.dims for s in EncoderConfig().level_specs()]
    assert dims == [(15, 15, 4), (30, 30, 8), (60, 60, 16), (120, 120, 32)]


def test_reference_points_visibility():
    cam = Camera.looking((0, 0, 0), 0.0, 0.0, (32, 32), 90.0)
    spec = GridSpec((-2, 2), (-2, 2), (-1, 1), 1.0)
    uv, vis = reference_points(spec, [cam])
    centers = spec.cell_centers()
    assert uv.shape == (1, spec.num_cells, 2)
    assert not np.any(vis[0][centers[:, 0] < 0])
    assert np.any(vis[0])


def test_deconv_places_kernel_per_child():
    data = np.zeros((1, 2, 1, 1))
    data[0, 1, 0, 0] = 2.0
    w = np.arange(8, dtype=float).reshape(1, 1, 2, 2, 2)
    out = deconv_upsample(data, w, np.array([0.5]))
    assert out.shape == (1, 4, 2, 2)
    assert np.array_equal(out[0, 2:4], 2.0 * w[0, 0] + 0.5)
    assert np.all(out[0, 0:2] == 0.5)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 2), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3)),
                  elements=st.floats(-5, 5)))
def test_trilinear_doubles_and_stays_in_range(data):
    out = trilinear_upsample(data)
    assert out.shape == (data.shape[0], *(2 * n for n in data.shape[1:]))
    assert out.min() >= data.min() - 1e-12 and out.max() <= data.max() + 1e-12


def test_trilinear_preserves_constants():
    assert np.allclose(trilinear_upsample(np.full((2, 3, 2, 2), 4.5)), 4.5)


def test_params_round_trip(tmp_path):
    p = seeded_params(TINY, 3)
    save_params(p, tmp_path / "enc.vnpt")
    q = load_params(tmp_path / "enc.vnpt")
    assert q.config.grid == TINY.grid and q.config.dim == TINY.dim
    weights = [k for k in p.tensors if not k.startswith("meta.")]
    assert weights and all(np.array_equal(p.tensors[k], q.tensors[k]) for k in weights)


def test_seeded_params_deterministic():
    a, b = seeded_params(TINY, 5), seeded_params(TINY, 5)
    assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)
    assert not np.array_equal(a.queries, seeded_params(TINY, 6).queries)


@pytest.mark.parametrize("mode", ["deconv", "trilinear"])
def test_pyramid_shapes_and_finiteness(coarse_scene, mode):
    cfg = EncoderConfig(dim=8, view_dim=8, heads=2, samples=2, layers=1, levels=2, z_cells=8,
                        upsample=mode, grid=GridSpec(resolution=0.2))
    views = seeded_view_features(coarse_scene.cameras["r0c"], 8, 0)
    pyr = encode_ver(views, seeded_params(cfg, 0), coarse_scene.graph.positions["r0c"])
    assert [f.dims for f in pyr] == [(15, 15, 2), (30, 30, 4), (60, 60, 8)]
    assert [f.level for f in pyr] == [0, 1, 2]
    assert all(np.all(np.isfinite(f.data)) for f in pyr)


def test_rendered_view_features(coarse_scene):
    views = render_view_features(coarse_scene, "r0c", 6)
    cam = coarse_scene.cameras["r0c"][0]
    h, w = cam.image_size
    assert len(views) == len(coarse_scene.cameras["r0c"])
    assert views[0].data.shape == (6, -(-h // 16), -(-w // 16))


def test_focal_loss_properties(rng):
    logits = rng.standard_normal((4, 10))
    targets = rng.integers(0, 4, 10)
    base = focal_loss(logits, targets)
    assert base >= 0
    confident = np.full((4, 10), -20.0)
    confident[targets, np.arange(10)] = 20.0
    assert focal_loss(confident, targets) < 1e-12 < base


def test_volume_feature_rejects_wrong_shape():
    with pytest.raises(EncoderError):
        VolumeFeature(np.zeros((2, 3, 3, 3)), GridSpec((0, 3), (0, 3), (0, 2), 1.0))


def test_heads_and_predictions(scene):
    cfg = EncoderConfig(dim=8, view_dim=8, heads=2, samples=2, layers=1, levels=2, z_cells=8,
                        grid=GridSpec(resolution=0.1))
    origin = scene.graph.positions["r0c"]
    views = seeded_view_features(scene.cameras["r0c"][:4], 8, 0)
    params = seeded_params(cfg, 0)
    pyr = encode_ver(views, params, origin)
    ann = generate_annotations(scene, "r0c")
    scores = multiscale_heads(pyr, ann, params)
    assert len(scores.level_losses) == 3
    assert scores.total == pytest.approx(2.0 * scores.task_losses["occupancy"] + 0.25 * scores.task_losses["layout"]
                                         + 0.25 * scores.task_losses["detection"])
    pred = predict_annotations(pyr, params, "r0c", origin)
    assert sorted(pred.occupancy) == pytest.approx([0.1, 0.2, 0.4])
    assert [b.instance_id for b in pred.boxes] == list(range(len(pred.boxes)))
