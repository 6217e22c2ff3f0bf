"""Codec pipeline: configuration, analysis, pruning, enhancement ops,
encode/decode/truncate, and the scalability invariants."""

import numpy as np
import pytest

from progpcc.autodiff import Var
from progpcc.codec import (
    CheckpointMismatchError,
    ModelStateError,
    analyze,
    decode,
    encode,
    enhancement_latent,
    membership_labels,
    prune_topk,
    residual_fuse,
)
from progpcc.config import ChannelGroupConfig, ModelConfig, default_lambdas
from progpcc.container import (
    LevelOutOfRangeError,
    parse_container,
    serialize_container,
    truncate_container,
)
from progpcc.geometry import VoxelSet
from progpcc.model import CodecModel, tiny_config
from progpcc.sparse import SparseTensor, lexsorted

RNG = np.random.default_rng(20240817)


def random_voxels(n=400, bit_depth=5, seed=3):
    rng = np.random.default_rng(seed)
    coords = rng.integers(0, 2 ** bit_depth, (n, 3))
    return VoxelSet(lexsorted(coords), bit_depth)


# --- configuration ------------------------------------------------------------


def test_group_parse_round_trip():
    g = ChannelGroupConfig.parse("4,4/2,2,4/8")
    assert g.groups == ((4, 4), (2, 2, 4), (8,))
    assert g.format() == "4,4/2,2,4/8"
    assert g.n_levels == 6
    assert g.flat_sizes() == [4, 4, 2, 2, 4, 8]


def test_group_level_map_order_is_base_then_enhancement():
    g = ChannelGroupConfig.parse("4,4/2,2,4/8")
    assert g.level_map() == [
        (0, 0, 4), (0, 4, 8), (1, 0, 2), (1, 2, 4), (1, 4, 8), (2, 0, 8)]


def test_group_channels_at_level():
    g = ChannelGroupConfig.parse("4,4/2,2,4/8")
    assert [g.channels_at(L, 0) for L in range(1, 7)] == [4, 8, 8, 8, 8, 8]
    assert [g.channels_at(L, 1) for L in range(1, 7)] == [0, 0, 2, 4, 8, 8]
    assert [g.channels_at(L, 2) for L in range(1, 7)] == [0, 0, 0, 0, 0, 8]


def test_group_validation():
    with pytest.raises(ValueError):
        ChannelGroupConfig(((4,), (4,)))  # needs three layers
    with pytest.raises(ValueError):
        ChannelGroupConfig(((0, 4), (4,), (4,)))
    with pytest.raises(ValueError):
        ChannelGroupConfig.parse("4,x/2/8")


def test_model_config_group_sum_must_match_widths():
    with pytest.raises(ValueError):
        ModelConfig(groups=ChannelGroupConfig(((4, 3), (2, 2, 4), (8,))))
    nine = ChannelGroupConfig.parse("2,2,4/2,2,4/2,2,4")
    cfg = ModelConfig(groups=nine)
    assert cfg.n_levels == 9


def test_default_lambda_schedule_geometric():
    lams = default_lambdas(6)
    assert lams[0] == pytest.approx(0.5)
    assert lams[-1] == pytest.approx(10.0)
    ratios = [b / a for a, b in zip(lams, lams[1:])]
    assert all(r == pytest.approx(ratios[0]) for r in ratios)
    assert default_lambdas(1) == (10.0,)


def test_lambda_override_length_checked():
    with pytest.raises(ValueError):
        ModelConfig(lambdas=(1.0, 2.0))


# --- model registry -----------------------------------------------------------


def test_model_init_deterministic_and_names_unique():
    a = CodecModel(ModelConfig(), seed=5)
    b = CodecModel(ModelConfig(), seed=5)
    names = [p.name for p in a.params()]
    assert len(names) == len(set(names))
    for pa, pb in zip(a.params(), b.params()):
        assert pa.name == pb.name
        assert np.array_equal(pa.data, pb.data)
    c = CodecModel(ModelConfig(), seed=6)
    assert any(not np.array_equal(pa.data, pc.data)
               for pa, pc in zip(a.params(), c.params()))


def test_param_hash_tracks_values():
    a = CodecModel(ModelConfig(), seed=5)
    h0 = a.param_hash()
    assert len(h0) == 8
    assert a.param_hash() == h0
    a.kernels["enc0a"].weight.data[0, 0, 0] += 1e-3
    assert a.param_hash() != h0


def test_snap_float32_idempotent_and_non_mutating():
    a = CodecModel(ModelConfig(), seed=5)
    before = [p.data.copy() for p in a.params()]
    s1 = a.snap_float32()
    s2 = s1.snap_float32()
    for p, q in zip(s1.params(), s2.params()):
        assert np.array_equal(p.data, q.data)
    for p, b in zip(a.params(), before):
        assert np.array_equal(p.data, b)
    for p in s1.params():
        assert np.array_equal(p.data, p.data.astype(np.float32).astype(np.float64))


# --- analyze -------------------------------------------------------------------


def test_analyze_single_voxel():
    model = CodecModel(tiny_config(), seed=0)
    ar = analyze(model, np.array([[5, 3, 7]]))
    assert np.array_equal(ar.scales[0], [[5, 3, 7]])
    assert np.array_equal(ar.scales[1], [[4, 2, 6]])
    assert np.array_equal(ar.scales[2], [[4, 0, 4]])
    assert np.array_equal(ar.bottleneck.coords, [[0, 0, 0]])
    assert ar.bottleneck.stride == 8
    assert all(len(s) == 1 for s in ar.scales)


def test_analyze_full_block_collapses():
    model = CodecModel(tiny_config(), seed=0)
    block = lexsorted(np.stack(np.meshgrid([0, 1], [0, 1], [0, 1],
                                           indexing="ij"), -1).reshape(-1, 3))
    ar = analyze(model, block)
    assert len(ar.scales[0]) == 8
    assert len(ar.scales[1]) == 1  # one stride-2 cell


def test_analyze_scale_sizes_non_increasing():
    model = CodecModel(tiny_config(), seed=0)
    vox = random_voxels(1000, 7, seed=11)
    ar = analyze(model, vox.coords)
    n0, n1, n2 = (len(s) for s in ar.scales)
    assert n0 >= n1 >= n2 >= len(ar.bottleneck.coords)
    assert ar.enc_feats[0].stride == 2 and ar.enc_feats[1].stride == 4
    assert np.array_equal(ar.enc_feats[0].coords, ar.scales[1])
    assert np.array_equal(ar.enc_feats[1].coords, ar.scales[2])


def test_analyze_empty_rejected():
    model = CodecModel(tiny_config(), seed=0)
    with pytest.raises(ValueError):
        analyze(model, np.zeros((0, 3)))


# --- prune_topk ----------------------------------------------------------------


def coords5():
    return np.array([[0, 0, 0], [0, 0, 2], [0, 2, 0], [2, 0, 0], [2, 2, 2]])


def test_prune_equal_logits_keeps_lexicographically_smallest():
    t = SparseTensor(coords5(), np.arange(10.0).reshape(5, 2), 2)
    logits = np.zeros((5, 1))
    kept = prune_topk(t, logits, 3)
    assert np.array_equal(kept.coords, coords5()[:3])
    assert np.array_equal(kept.data, np.arange(6.0).reshape(3, 2))


def test_prune_dominant_logit_wins():
    t = SparseTensor(coords5(), np.zeros((5, 2)), 2)
    logits = np.array([[0.0], [0.0], [5.0], [0.0], [0.0]])
    kept = prune_topk(t, logits, 1)
    assert np.array_equal(kept.coords, [[0, 2, 0]])


def test_prune_k_equal_count_is_identity():
    t = SparseTensor(coords5(), np.zeros((5, 2)), 2)
    kept = prune_topk(t, np.zeros((5, 1)), 5)
    assert np.array_equal(kept.coords, t.coords)


def test_prune_k_above_count_warns_and_keeps_all(caplog):
    t = SparseTensor(coords5(), np.zeros((5, 2)), 2)
    with caplog.at_level("WARNING"):
        kept = prune_topk(t, np.zeros((5, 1)), 9)
    assert np.array_equal(kept.coords, t.coords)
    assert any("top-k" in r.message for r in caplog.records)


def test_prune_invalid_k():
    t = SparseTensor(coords5(), np.zeros((5, 2)), 2)
    with pytest.raises(ValueError):
        prune_topk(t, np.zeros((5, 1)), 0)


def test_prune_accepts_var_logits_and_keeps_gradflow():
    from progpcc.autodiff import Tape, backward
    from progpcc.autodiff import Param

    tape = Tape()
    p = Param("x", np.arange(10.0).reshape(5, 2))
    t = SparseTensor(coords5(), tape.leaf(p), 2)
    logits = Var(np.array([[3.0], [1.0], [2.0], [5.0], [0.0]]))
    kept = prune_topk(t, logits, 2)
    assert np.array_equal(kept.coords, [coords5()[0], coords5()[3]])
    loss = __import__("progpcc.autodiff", fromlist=["vsum"]).vsum(kept.features)
    g = backward(tape, loss, [p])["x"]
    expect = np.zeros((5, 2))
    expect[0] = expect[3] = 1.0
    assert np.array_equal(g, expect)


# --- membership labels ----------------------------------------------------------


def test_membership_labels():
    ref = lexsorted(np.array([[0, 0, 0], [2, 2, 2], [4, 4, 4]]))
    q = lexsorted(np.array([[0, 0, 0], [2, 2, 0], [4, 4, 4], [6, 6, 6]]))
    labels = membership_labels(q, ref)
    assert labels.shape == (4, 1)
    assert labels.ravel().tolist() == [1.0, 0.0, 1.0, 0.0]


# --- enhancement latent / fusion -------------------------------------------------


def tiny_model():
    return CodecModel(tiny_config(), seed=2)


def test_enhancement_latent_lives_on_recon_coords():
    model = tiny_model()
    enc = SparseTensor(np.array([[0, 0, 0], [4, 0, 0]]), RNG.normal(size=(2, 2)), 4)
    recon = SparseTensor(np.array([[0, 0, 0], [4, 4, 4]]), RNG.normal(size=(2, 2)), 4)
    y = enhancement_latent(model, 1, enc, recon)
    assert np.array_equal(y.coords, recon.coords)
    assert y.stride == 4
    assert y.channels == model.config.latent_channels[1]


def test_enhancement_latent_is_affine():
    # f(x1) + f(x2) - f(x1 + x2) == f(0) for an affine map
    model = tiny_model()
    coords_e = np.array([[0, 0, 0], [4, 0, 0]])
    coords_r = np.array([[0, 0, 0], [4, 4, 0]])

    def run(ef, rf):
        enc = SparseTensor(coords_e, ef, 4)
        recon = SparseTensor(coords_r, rf, 4)
        return enhancement_latent(model, 1, enc, recon).data

    e1, e2 = RNG.normal(size=(2, 2, 2))
    r1, r2 = RNG.normal(size=(2, 2, 2))
    lhs = run(e1, r1) + run(e2, r2) - run(e1 + e2, r1 + r2)
    zero = run(np.zeros((2, 2)), np.zeros((2, 2)))
    assert np.allclose(lhs, zero, atol=1e-12)


def test_enhancement_latent_aggregates_absent_neighbors():
    # a reconstructed voxel missing from the encoder set still receives
    # encoder information from its occupied neighbors
    model = tiny_model()
    enc = SparseTensor(np.array([[0, 0, 0]]), np.full((1, 2), 2.0), 4)
    recon = SparseTensor(np.array([[4, 0, 0]]), np.zeros((1, 2)), 4)
    with_enc = enhancement_latent(model, 1, enc, recon).data
    without = enhancement_latent(
        model, 1, SparseTensor(np.array([[0, 0, 0]]), np.zeros((1, 2)), 4),
        recon).data
    assert not np.allclose(with_enc, without)


def test_enhancement_latent_zero_encoder_features_bias_only_path():
    model = tiny_model()
    recon = SparseTensor(np.array([[0, 0, 0], [4, 4, 4]]), RNG.normal(size=(2, 2)), 4)
    far_enc = SparseTensor(np.array([[96, 96, 96]]), RNG.normal(size=(1, 2)), 4)
    zero_enc = SparseTensor(np.array([[96, 96, 96]]), np.zeros((1, 2)), 4)
    assert np.allclose(enhancement_latent(model, 1, far_enc, recon).data,
                       enhancement_latent(model, 1, zero_enc, recon).data)


def test_enhancement_latent_stride_mismatch():
    model = tiny_model()
    enc = SparseTensor(np.array([[0, 0, 0]]), np.zeros((1, 2)), 2)
    recon = SparseTensor(np.array([[0, 0, 0]]), np.zeros((1, 2)), 4)
    with pytest.raises(ValueError):
        enhancement_latent(model, 1, enc, recon)


def test_residual_fuse_keeps_coords_and_zero_latent_ignores_latent_weights():
    model = tiny_model()
    coords = np.array([[0, 0, 0], [4, 0, 4]])
    recon = SparseTensor(coords, RNG.normal(size=(2, 2)), 4)
    zero = SparseTensor(coords, np.zeros((2, 2)), 4)
    out = residual_fuse(model, 1, recon, zero)
    assert np.array_equal(out.coords, coords)
    # zero latent: mutating the latent half of the fusion kernel cannot matter
    mutated = tiny_model()
    for p_src, p_dst in zip(model.params(), mutated.params()):
        p_dst.data = p_src.data.copy()
    mutated.kernels["fuse1"].weight.data[:, 2:, :] += 123.0
    out2 = residual_fuse(mutated, 1, recon, zero)
    assert np.allclose(out.data, out2.data)


def test_residual_fuse_coordinate_mismatch_rejected():
    model = tiny_model()
    a = SparseTensor(np.array([[0, 0, 0]]), np.zeros((1, 2)), 4)
    b = SparseTensor(np.array([[4, 0, 0]]), np.zeros((1, 2)), 4)
    with pytest.raises(ValueError):
        residual_fuse(model, 1, a, b)


def test_residual_fuse_matches_dense_concat_oracle():
    # fusion == one same-stride conv over the concatenated features; check a
    # center-only manual computation on an isolated voxel
    model = tiny_model()
    coords = np.array([[8, 8, 8]])  # no neighbors
    f_rec = RNG.normal(size=(1, 2))
    f_lat = RNG.normal(size=(1, 2))
    out = residual_fuse(model, 1,
                        SparseTensor(coords, f_rec, 4),
                        SparseTensor(coords, f_lat, 4)).data
    kw = model.kernels["fuse1"]
    center = 13  # index of offset (0,0,0) in lexicographic 3x3x3 order
    manual = np.concatenate([f_rec, f_lat], axis=1) @ kw.weight.data[center] \
        + kw.bias.data
    assert np.allclose(out, manual, atol=1e-12)


# --- encode / decode -------------------------------------------------------------


@pytest.fixture(scope="module")
def small_model():
    return CodecModel(ModelConfig(), seed=9)


@pytest.fixture(scope="module")
def cloud():
    return random_voxels(600, 6, seed=21)


@pytest.fixture(scope="module")
def encoded(small_model, cloud):
    return encode(cloud, small_model)


def test_encode_default_groups_give_six_segments(encoded):
    assert len(encoded.container.segments) == 6
    assert encoded.container.header.group_sizes == (4, 4, 2, 2, 4, 8)


def test_encode_nine_level_config(cloud):
    cfg = ModelConfig(groups=ChannelGroupConfig.parse("2,2,4/2,2,4/2,2,4"))
    model = CodecModel(cfg, seed=9)
    result = encode(cloud, model)
    assert len(result.container.segments) == 9
    for level in (1, 5, 9):
        rec = decode(truncate_container(result.container, level), model, level)
        assert len(rec) == result.container.header.k_counts[0]


def test_encode_deterministic(small_model, cloud, encoded):
    again = encode(cloud, small_model)
    assert serialize_container(again.container) == serialize_container(encoded.container)


def test_encode_header_counts_match_scales(small_model, cloud, encoded):
    ar = analyze(small_model.snap_float32(), cloud.coords)
    assert encoded.container.header.k_counts == tuple(len(s) for s in ar.scales)
    assert encoded.n_input == len(cloud)


def test_encode_rejects_nan_params(cloud):
    model = CodecModel(tiny_config(), seed=0)
    model.kernels["enc0a"].weight.data[0, 0, 0] = np.nan
    with pytest.raises(ModelStateError):
        encode(cloud, model)


def test_encode_rejects_shallow_grids(small_model):
    vox = VoxelSet(np.array([[0, 0, 0], [1, 1, 1]]), 3)
    with pytest.raises(ValueError):
        encode(vox, small_model)


def test_decode_output_count_is_k0_at_every_level(small_model, encoded):
    k_counts = encoded.container.header.k_counts
    for level in range(1, 7):
        rec = decode(encoded.container, small_model, level)
        assert len(rec) == k_counts[0]
        assert rec.bit_depth == 6
        assert len(np.unique(rec.coords, axis=0)) == len(rec)


def test_truncation_equivalence_structural(small_model, encoded):
    blob = serialize_container(encoded.container)
    for level in range(1, 7):
        cut = truncate_container(parse_container(blob), level)
        a = decode(cut, small_model, level)
        b = decode(encoded.container, small_model, level)
        assert np.array_equal(a.coords, b.coords)


def test_decode_same_prefix_twice_identical(small_model, encoded):
    cut = truncate_container(encoded.container, 2)
    a = decode(cut, small_model, 2)
    b = decode(cut, small_model, 2)
    assert np.array_equal(a.coords, b.coords)


def test_decoder_reconstructs_encoder_coordinate_sets(small_model, encoded):
    # decoding the full stream must walk exactly the coordinate sets the
    # encoder conditioned its enhancement latents on
    trace = {}
    decode(encoded.container, small_model, 6, trace=trace)
    assert np.array_equal(trace["c2"], encoded.trace["c2"])
    assert np.array_equal(trace["recon1"], encoded.trace["recon1"])
    assert np.array_equal(trace["recon0"], encoded.trace["recon0"])


def test_decode_level_out_of_range(small_model, encoded):
    with pytest.raises(LevelOutOfRangeError):
        decode(encoded.container, small_model, 0)
    with pytest.raises(LevelOutOfRangeError):
        decode(encoded.container, small_model, 7)


def test_decode_level_beyond_truncated_segments(small_model, encoded):
    cut = truncate_container(encoded.container, 2)
    with pytest.raises(LevelOutOfRangeError):
        decode(cut, small_model, 3)


def test_decode_checkpoint_hash_mismatch(encoded):
    other = CodecModel(ModelConfig(), seed=10)
    with pytest.raises(CheckpointMismatchError):
        decode(encoded.container, other, 1)


def test_decode_group_layout_mismatch(cloud, encoded):
    cfg = ModelConfig(groups=ChannelGroupConfig.parse("2,2,4/2,2,4/2,2,4"))
    other = CodecModel(cfg, seed=9)
    with pytest.raises(CheckpointMismatchError):
        decode(encoded.container, other, 1)


def test_bitrate_strictly_increases_with_level(encoded):
    sizes = [len(serialize_container(truncate_container(encoded.container, L)))
             for L in range(1, 7)]
    assert all(b > a for a, b in zip(sizes, sizes[1:]))


def test_untrained_random_model_keeps_structure():
    # quality is meaningless before training; the structural contracts are not
    model = CodecModel(ModelConfig(), seed=123)
    vox = random_voxels(300, 5, seed=5)
    result = encode(vox, model)
    blob = serialize_container(result.container)
    for level in (1, 4, 6):
        rec = decode(truncate_container(parse_container(blob), level), model, level)
        assert len(rec) == result.container.header.k_counts[0]
