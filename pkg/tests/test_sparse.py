import numpy as np
import pytest

from progpcc import autodiff as ad
from progpcc.sparse import (
    KernelWeights,
    SparseTensor,
    channel_concat,
    full_offsets,
    generative_upconv,
    lexsorted,
    sparse_conv,
    target_conv,
)

from test_autodiff import check_grad


def make_kernel(name, c_in, c_out, seed=0, fill=None):
    kw = KernelWeights(name, c_in, c_out, rng=np.random.default_rng(seed))
    if fill is not None:
        kw.weight.data[:] = fill
    return kw


def random_tensor(n, c, seed, extent=16, stride=1):
    rng = np.random.default_rng(seed)
    coords = lexsorted(rng.integers(0, extent // stride, (n, 3)) * stride)
    feats = rng.normal(size=(len(coords), c))
    return SparseTensor(coords, feats, stride)


def dense_conv_oracle(t, kw, out_coords, step):
    """Direct summation over kernel offsets from the definition."""
    lut = {tuple(c): i for i, c in enumerate(t.coords)}
    out = np.zeros((len(out_coords), kw.c_out))
    for j, u in enumerate(out_coords):
        acc = kw.bias.data.copy()
        for k, d in enumerate(kw.offsets):
            nb = tuple(u + d * step)
            if nb in lut:
                acc = acc + t.data[lut[nb]] @ kw.weight.data[k]
        out[j] = acc
    return out


def dense_upconv_oracle(t, kw, out_coords, half):
    lut = {tuple(c): i for i, c in enumerate(t.coords)}
    out = np.zeros((len(out_coords), kw.c_out))
    for j, v in enumerate(out_coords):
        acc = kw.bias.data.copy()
        for k, d in enumerate(kw.offsets):
            parent = tuple(v - d * half)
            if parent in lut:
                acc = acc + t.data[lut[parent]] @ kw.weight.data[k]
        out[j] = acc
    return out


# --- construction invariants ----------------------------------------------------


def test_tensor_rejects_unsorted_or_duplicate_coords():
    with pytest.raises(ValueError):
        SparseTensor(np.array([[1, 0, 0], [0, 0, 0]]), np.zeros((2, 1)))
    with pytest.raises(ValueError):
        SparseTensor(np.array([[0, 0, 0], [0, 0, 0]]), np.zeros((2, 1)))


def test_tensor_rejects_stride_misaligned_coords():
    with pytest.raises(ValueError):
        SparseTensor(np.array([[0, 0, 0], [2, 2, 3]]), np.zeros((2, 1)), stride=2)


def test_offsets_are_lexicographic():
    offs = full_offsets(3)
    assert len(offs) == 27
    keys = offs[:, 0] * 9 + offs[:, 1] * 3 + offs[:, 2]
    assert (np.diff(keys) > 0).all()
    np.testing.assert_array_equal(offs[0], [-1, -1, -1])
    np.testing.assert_array_equal(offs[13], [0, 0, 0])


# --- forward semantics -----------------------------------------------------------


def test_identity_kernel_preserves_features():
    t = random_tensor(40, 3, seed=1)
    kw = make_kernel("id", 3, 3, fill=0.0)
    kw.weight.data[13] = np.eye(3)  # center offset
    out = sparse_conv(t, kw)
    np.testing.assert_allclose(out.data, t.data)
    np.testing.assert_array_equal(out.coords, t.coords)


def test_all_ones_kernel_two_diagonal_voxels():
    t = SparseTensor(np.array([[0, 0, 0], [1, 1, 1]]), np.ones((2, 1)))
    kw = make_kernel("ones", 1, 1, fill=1.0)
    out = sparse_conv(t, kw)
    np.testing.assert_allclose(out.data, [[2.0], [2.0]])


def test_same_stride_conv_matches_dense_oracle():
    t = random_tensor(60, 4, seed=2)
    kw = make_kernel("c", 4, 3, seed=3)
    out = sparse_conv(t, kw)
    np.testing.assert_allclose(out.data, dense_conv_oracle(t, kw, out.coords, 1),
                               atol=1e-12)


def test_downsample_coords_are_floor_divided():
    t = SparseTensor(np.array([[0, 0, 0], [1, 1, 1], [2, 2, 2]]), np.ones((3, 1)))
    out = sparse_conv(t, make_kernel("d", 1, 2), out_stride=2)
    np.testing.assert_array_equal(out.coords, [[0, 0, 0], [2, 2, 2]])
    assert out.stride == 2


def test_downsample_conv_matches_dense_oracle():
    t = random_tensor(80, 3, seed=4)
    kw = make_kernel("dn", 3, 5, seed=5)
    out = sparse_conv(t, kw, out_stride=2)
    np.testing.assert_allclose(out.data, dense_conv_oracle(t, kw, out.coords, 1),
                               atol=1e-12)


def test_strided_tensor_conv_uses_input_stride_steps():
    t = random_tensor(50, 2, seed=6, extent=32, stride=4)
    kw = make_kernel("s4", 2, 2, seed=7)
    out = sparse_conv(t, kw)
    np.testing.assert_allclose(out.data, dense_conv_oracle(t, kw, out.coords, 4),
                               atol=1e-12)


def test_invalid_out_stride_rejected():
    t = random_tensor(10, 1, seed=8)
    with pytest.raises(ValueError):
        sparse_conv(t, make_kernel("x", 1, 1), out_stride=4)


def test_upconv_emits_all_children():
    t = SparseTensor(np.array([[0, 0, 0]]), np.full((1, 1), 3.0), stride=2)
    kw = make_kernel("up", 1, 1, fill=1.0)
    out = generative_upconv(t, kw)
    assert out.stride == 1
    corners = lexsorted(np.stack(np.meshgrid([0, 1], [0, 1], [0, 1]), -1).reshape(-1, 3))
    np.testing.assert_array_equal(out.coords, corners)
    np.testing.assert_allclose(out.data, np.full((8, 1), 3.0))


def test_upconv_two_parents_sum_into_shared_child():
    t = SparseTensor(np.array([[0, 0, 0], [2, 0, 0]]), np.full((2, 1), 3.0), stride=2)
    kw = make_kernel("up2", 1, 1, fill=1.0)
    out = generative_upconv(t, kw)
    lut = {tuple(c): i for i, c in enumerate(out.coords)}
    # child (1,0,0): reachable from (0,0,0) via d=+1 and from (2,0,0) via d=-1
    np.testing.assert_allclose(out.data[lut[(1, 0, 0)]], [6.0])
    # even-parity children see only their own parent (offset 2 is outside support)
    np.testing.assert_allclose(out.data[lut[(0, 0, 0)]], [3.0])
    np.testing.assert_allclose(out.data[lut[(3, 0, 0)]], [3.0])


def test_upconv_matches_dense_transposed_oracle():
    t = random_tensor(40, 3, seed=9, extent=32, stride=4)
    kw = make_kernel("upo", 3, 2, seed=10)
    out = generative_upconv(t, kw)
    assert out.stride == 2
    np.testing.assert_allclose(out.data, dense_upconv_oracle(t, kw, out.coords, 2),
                               atol=1e-12)


def test_upconv_rejects_stride_one():
    t = random_tensor(10, 1, seed=11)
    with pytest.raises(ValueError):
        generative_upconv(t, make_kernel("u1", 1, 1))


def test_target_conv_on_source_coords_equals_sparse_conv():
    t = random_tensor(50, 3, seed=12)
    kw = make_kernel("tc", 3, 4, seed=13)
    a = sparse_conv(t, kw)
    b = target_conv(t, t.coords, kw)
    np.testing.assert_allclose(a.data, b.data, atol=1e-14)


def test_target_conv_isolated_target_gets_bias_only():
    t = SparseTensor(np.array([[0, 0, 0]]), np.ones((1, 2)))
    kw = make_kernel("tb", 2, 3, seed=14)
    kw.bias.data[:] = [1.0, 2.0, 3.0]
    out = target_conv(t, np.array([[9, 9, 9]]), kw)
    np.testing.assert_allclose(out.data, [[1.0, 2.0, 3.0]])


def test_target_conv_matches_dense_oracle_on_arbitrary_targets():
    t = random_tensor(60, 2, seed=15)
    kw = make_kernel("ta", 2, 2, seed=16)
    targets = lexsorted(np.random.default_rng(17).integers(0, 16, (30, 3)))
    out = target_conv(t, targets, kw)
    np.testing.assert_allclose(out.data, dense_conv_oracle(t, kw, targets, 1),
                               atol=1e-12)


def test_conv_linearity_with_zero_bias():
    t1 = random_tensor(50, 3, seed=18)
    t2 = SparseTensor(t1.coords, np.random.default_rng(19).normal(size=t1.data.shape))
    kw = make_kernel("lin", 3, 2, seed=20)
    kw.bias.data[:] = 0.0
    mixed = SparseTensor(t1.coords, 2.0 * t1.data - 0.5 * t2.data)
    out = sparse_conv(mixed, kw).data
    expect = 2.0 * sparse_conv(t1, kw).data - 0.5 * sparse_conv(t2, kw).data
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_channel_concat_requires_matching_coords():
    a = random_tensor(20, 2, seed=21)
    b = SparseTensor(a.coords, np.ones((len(a), 3)))
    joined = channel_concat(a, b)
    assert joined.channels == 5
    np.testing.assert_allclose(joined.data[:, :2], a.data)
    c = SparseTensor(a.coords + 2, np.ones((len(a), 1)))
    with pytest.raises(ValueError):
        channel_concat(a, c)


# --- gradients -------------------------------------------------------------------


def test_conv_chain_gradients_match_finite_differences():
    rng = np.random.default_rng(30)
    coords = lexsorted(rng.integers(0, 8, (40, 3)))
    feats = rng.normal(size=(len(coords), 2))
    k1 = make_kernel("g1", 2, 3, seed=31)
    k2 = make_kernel("g2", 3, 2, seed=32)
    k3 = make_kernel("g3", 2, 2, seed=33)
    targets = lexsorted(rng.integers(0, 4, (15, 3)) * 2)

    def forward(tape=None):
        t = SparseTensor(coords, ad.Var(feats, tape), 1)
        h = sparse_conv(t, k1, tape=tape)
        h = SparseTensor(h.coords, ad.relu(h.features), h.stride, validate=False)
        h = sparse_conv(h, k2, out_stride=2, tape=tape)
        h = target_conv(h, targets, k3, tape=tape)
        return ad.vmean(ad.tanh(h.features))

    tape = ad.Tape()
    loss = forward(tape)
    params = k1.params() + k2.params() + k3.params()
    grads = ad.backward(tape, loss, params)
    for p in params:
        check_grad(grads[p.name], p, lambda: forward().data)


def test_upconv_gradients_match_finite_differences():
    rng = np.random.default_rng(40)
    coords = lexsorted(rng.integers(0, 4, (12, 3)) * 2)
    feats = rng.normal(size=(len(coords), 2))
    kw = make_kernel("gu", 2, 2, seed=41)

    def forward(tape=None):
        t = SparseTensor(coords, ad.Var(feats, tape), 2)
        out = generative_upconv(t, kw, tape=tape)
        return ad.vmean(ad.sigmoid(out.features))

    tape = ad.Tape()
    grads = ad.backward(tape, forward(tape), kw.params())
    for p in kw.params():
        check_grad(grads[p.name], p, lambda: forward().data)


def test_input_feature_gradient_via_conv():
    rng = np.random.default_rng(50)
    coords = lexsorted(rng.integers(0, 6, (20, 3)))
    feats = ad.Param("feats", rng.normal(size=(len(coords), 2)))
    kw = make_kernel("gf", 2, 3, seed=51)

    def forward(tape=None):
        fv = tape.leaf(feats) if tape else ad.Var(feats.data)
        t = SparseTensor(coords, fv, 1)
        return ad.vsum(sparse_conv(t, kw, tape=tape).features * 0.1)

    tape = ad.Tape()
    grads = ad.backward(tape, forward(tape), [feats])
    check_grad(grads["feats"], feats, lambda: forward(ad.Tape()).data)


def test_kernel_init_scale_and_zero_bias():
    kw = KernelWeights("init", 8, 4, rng=np.random.default_rng(60))
    bound = 1.0 / np.sqrt(8 * 27)
    assert np.abs(kw.weight.data).max() <= bound
    assert np.abs(kw.weight.data).std() > 0
    np.testing.assert_array_equal(kw.bias.data, np.zeros(4))
