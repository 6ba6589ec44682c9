"""Plane factorization: scatter, normalize, refine, and voxel merge."""

import numpy as np
import pytest

import gaussianssc.tensor as T
import gaussianssc.triplane as tp
from gaussianssc.geometry import VoxelGridSpec
from gaussianssc.tensor import Tensor, grad_check

GRID = VoxelGridSpec(origin=(0.0, 0.0, 0.0), dims=(5, 4, 3), resolution=0.2)


def make_params(seed=0, q_dim=6, d=7, d_embed=3, d_code=4):
    rng = np.random.default_rng(seed)
    return tp.TriplaneParams.create(GRID, q_dim, d, d_embed, d_code, rng)


# --- plane_code -------------------------------------------------------------


def test_plane_code_zero_embeddings_zero_bias_gives_zero():
    params = make_params()
    emb = params.emb
    emb.e_x.data[:] = 0.0
    emb.e_y.data[:] = 0.0
    emb.b1.data[:] = 0.0
    emb.b2.data[:] = 0.0
    code = tp.plane_code(emb, "hw", np.array([[2, 1]]))
    assert np.array_equal(code.data, np.zeros_like(code.data))


def test_plane_code_is_pure():
    emb = make_params(3).emb
    a = tp.plane_code(emb, "hd", np.array([[1, 2], [1, 2]]))
    assert np.array_equal(a.data[0], a.data[1])
    b = tp.plane_code(emb, "hd", np.array([[1, 2], [1, 2]]))
    assert np.array_equal(a.data, b.data)


def test_plane_code_out_of_range_cell_raises():
    emb = make_params().emb
    with pytest.raises(IndexError):
        tp.plane_code(emb, "hw", np.array([[5, 0]]))
    with pytest.raises(IndexError):
        tp.plane_code(emb, "wd", np.array([[0, -1]]))


def test_plane_code_gradcheck_wrt_embedding_table():
    emb = make_params(1).emb
    cells = np.array([[0, 1], [3, 2], [0, 1]])
    err = grad_check(lambda *_: T.tsum(tp.plane_code(emb, "hw", cells)),
                     [emb.e_x, emb.w1, emb.w2])
    assert err < 1e-5


# --- scatter_queries / count_normalize --------------------------------------


def test_scatter_empty_query_list_gives_zero_planes_and_counts():
    params = make_params()
    tri = tp.scatter_queries(params, GRID, np.zeros((0, 3), dtype=np.int64),
                             Tensor(np.zeros((0, 6))))
    for p in tp.PLANES:
        assert not tri.planes[p].data.any()
        assert not tri.counts[p].any()


def test_scatter_single_query_touches_one_cell_per_plane():
    params = make_params()
    tri = tp.scatter_queries(params, GRID, np.array([[2, 1, 0]]),
                             Tensor(np.random.default_rng(0).normal(size=(1, 6))))
    for p in tp.PLANES:
        nonzero_cells = np.unique(np.argwhere(tri.planes[p].data != 0)[:, :2], axis=0)
        assert len(nonzero_cells) == 1
        assert tri.counts[p].sum() == 1
    assert tri.counts["hw"][2, 1] == 1
    assert tri.counts["hd"][2, 0] == 1
    assert tri.counts["wd"][1, 0] == 1


def test_scatter_shared_xy_column_accumulates_in_hw():
    params = make_params()
    feats = Tensor(np.random.default_rng(1).normal(size=(2, 6)))
    tri = tp.scatter_queries(params, GRID, np.array([[2, 1, 0], [2, 1, 2]]), feats)
    assert tri.counts["hw"][2, 1] == 2
    assert tri.counts["hd"][2, 0] == 1 and tri.counts["hd"][2, 2] == 1


def test_scatter_bad_query_index_raises():
    params = make_params()
    with pytest.raises(IndexError):
        tp.scatter_queries(params, GRID, np.array([[0, 0, 3]]),
                           Tensor(np.zeros((1, 6))))


def test_count_normalize_is_mean_of_colliding_contributions():
    params = make_params()
    feats = Tensor(np.random.default_rng(2).normal(size=(2, 6)))
    both = tp.count_normalize(
        tp.scatter_queries(params, GRID, np.array([[1, 1, 0], [1, 1, 2]]), feats))
    one = tp.scatter_queries(params, GRID, np.array([[1, 1, 0]]),
                             Tensor(feats.data[:1].copy()))
    two = tp.scatter_queries(params, GRID, np.array([[1, 1, 2]]),
                             Tensor(feats.data[1:].copy()))
    expect = 0.5 * (one.planes["hw"].data[1, 1] + two.planes["hw"].data[1, 1])
    assert np.allclose(both.planes["hw"].data[1, 1], expect, atol=1e-12)


def test_count_normalize_leaves_empty_cells_untouched():
    params = make_params()
    tri = tp.count_normalize(
        tp.scatter_queries(params, GRID, np.array([[1, 1, 0]]),
                           Tensor(np.ones((1, 6)))))
    assert not tri.planes["hw"].data[0, 0].any()


def test_scatter_is_permutation_invariant():
    params = make_params()
    rng = np.random.default_rng(3)
    idx = np.array([[0, 0, 0], [2, 3, 1], [0, 0, 0], [4, 1, 2]])
    feats = rng.normal(size=(4, 6))
    a = tp.scatter_queries(params, GRID, idx, Tensor(feats))
    perm = np.array([3, 0, 2, 1])
    b = tp.scatter_queries(params, GRID, idx[perm], Tensor(feats[perm]))
    for p in tp.PLANES:
        assert np.allclose(a.planes[p].data, b.planes[p].data, atol=1e-12)
        assert np.array_equal(a.counts[p], b.counts[p])


# --- refine_plane -----------------------------------------------------------


def test_refine_plane_identity_under_zero_weights():
    params = make_params()
    for p in tp.PLANES:
        params.mix_w[p].data[:] = 0.0
        params.mix_b[p].data[:] = 0.0
        params.ffn_w2[p].data[:] = 0.0
        params.ffn_b2[p].data[:] = 0.0
    plane = Tensor(np.random.default_rng(4).normal(size=(5, 4, 7)))
    out = tp.refine_plane(plane, params, "hw")
    assert np.array_equal(out.data, plane.data)


def test_refine_plane_constant_input_constant_interior():
    params = make_params(5)
    plane = Tensor(np.full((6, 6, 7), 1.25))
    out = tp.refine_plane(plane, params, "hw")
    interior = out.data[1:-1, 1:-1]
    assert np.allclose(interior, interior[0, 0], atol=1e-12)


def test_refine_plane_gradcheck():
    params = make_params(6, d=4)
    plane = Tensor(np.random.default_rng(7).normal(size=(4, 3, 4)),
                   requires_grad=True)
    err = grad_check(
        lambda *_: T.tsum(tp.refine_plane(plane, params, "wd")),
        [plane, params.mix_w["wd"], params.ffn_w1["wd"]])
    assert err < 1e-5


# --- deform_sample_attend ---------------------------------------------------


def make_attn(seed, d, c, k):
    return tp.DeformAttnParams.create(d, c, k, np.random.default_rng(seed))


def test_deform_k1_zero_offset_reads_ref_exactly():
    attn = make_attn(0, d=5, c=3, k=1)
    attn.w_off.data[:] = 0.0
    attn.b_off.data[:] = 0.0
    target = Tensor(np.random.default_rng(1).normal(size=(6, 7, 3)))
    q = Tensor(np.random.default_rng(2).normal(size=(2, 5)))
    ref = np.array([[2.0, 3.0], [4.0, 1.0]])
    out = tp.deform_sample_attend(q, ref, target, attn)
    expect = (target.data[ref[:, 1].astype(int), ref[:, 0].astype(int)]
              @ attn.w_proj.data + attn.b_proj.data)
    assert np.allclose(out.data, expect, atol=1e-12)


def test_deform_weights_normalize():
    attn = make_attn(3, d=5, c=3, k=4)
    q = Tensor(np.random.default_rng(4).normal(size=(8, 5)))
    w = T.softmax(T.matmul(q, attn.w_wt) + attn.b_wt, axis=-1)
    assert np.allclose(w.data.sum(axis=-1), 1.0, atol=1e-12)


def test_deform_uniform_target_independent_of_offsets():
    target = Tensor(np.full((6, 6, 3), 0.75))
    q = Tensor(np.random.default_rng(5).normal(size=(3, 5)))
    ref = np.full((3, 2), 2.5)
    a = make_attn(6, d=5, c=3, k=3)
    b = make_attn(6, d=5, c=3, k=3)
    b.b_off.data[:] = np.array([1.9, -0.7, 0.3, 1.1, -1.5, 0.2])
    out_a = tp.deform_sample_attend(q, ref, target, a)
    out_b = tp.deform_sample_attend(q, ref, target, b)
    assert np.allclose(out_a.data, out_b.data, atol=1e-12)


def test_deform_requires_positive_k():
    with pytest.raises(T.ConfigError):
        tp.DeformAttnParams.create(5, 3, 0, np.random.default_rng(0))


# --- gather_merge -----------------------------------------------------------


def test_gather_merge_zero_planes_zero_bias_gives_zero():
    params = make_params()
    params.merge_b1.data[:] = 0.0
    params.merge_b2.data[:] = 0.0
    planes = {p: Tensor(np.zeros(tp.plane_extents(GRID, p) + (7,)))
              for p in tp.PLANES}
    out = tp.gather_merge(planes, params, GRID, np.array([[0, 0, 0], [4, 3, 2]]))
    assert np.array_equal(out.data, np.zeros_like(out.data))


def test_gather_merge_shared_xy_voxels_read_identical_hw_slice():
    params = make_params(8)
    rng = np.random.default_rng(9)
    planes = {p: Tensor(rng.normal(size=tp.plane_extents(GRID, p) + (7,)))
              for p in tp.PLANES}
    reads = [T.take2d(planes["hw"], np.array([2]), np.array([1])).data
             for _ in range(2)]
    assert np.array_equal(reads[0], reads[1])
    # the merged descriptor differs only through the hd/wd reads
    out = tp.gather_merge(planes, params, GRID, np.array([[2, 1, 0], [2, 1, 2]]))
    assert out.data.shape == (2, 7)


def test_gather_merge_bad_index_raises():
    params = make_params()
    planes = {p: Tensor(np.zeros(tp.plane_extents(GRID, p) + (7,)))
              for p in tp.PLANES}
    with pytest.raises(IndexError):
        tp.gather_merge(planes, params, GRID, np.array([[5, 0, 0]]))


def test_gather_merge_grad_flows_to_all_three_planes():
    params = make_params(10, d=4)
    rng = np.random.default_rng(11)
    planes = {p: Tensor(rng.normal(size=tp.plane_extents(GRID, p) + (4,)),
                        requires_grad=True)
              for p in tp.PLANES}
    idx = np.array([[0, 1, 2], [3, 2, 0]])
    err = grad_check(
        lambda *_: T.tsum(tp.gather_merge(planes, params, GRID, idx)),
        [planes["hw"], planes["hd"], planes["wd"]])
    assert err < 1e-5


def test_single_query_roundtrip_matches_direct_oracle():
    """Scatter one query, normalize, identity refine, merge: the result is a
    closed-form function of the query feature and the three plane codes."""
    params = make_params(12)
    feats = np.random.default_rng(13).normal(size=(1, 6))
    idx = np.array([[2, 3, 1]])
    tri = tp.count_normalize(tp.scatter_queries(params, GRID, idx, Tensor(feats)))
    got = tp.gather_merge(tri.planes, params, GRID, idx)

    reads = []
    for p in tp.PLANES:
        a, b = tp.PLANE_AXES[p]
        rho = tp.plane_code(params.emb, p, idx[:, (a, b)]).data
        contrib = (np.concatenate([feats, rho], axis=-1) @ params.psi_w[p].data
                   + params.psi_b[p].data) * params.scales[p].data
        reads.append(contrib)
    cat = np.concatenate(reads, axis=-1)
    expect = (np.tanh(cat @ params.merge_w1.data + params.merge_b1.data)
              @ params.merge_w2.data + params.merge_b2.data)
    assert np.allclose(got.data, expect, atol=1e-10)


def test_plane_memory_is_sublinear_in_voxels():
    big = VoxelGridSpec(origin=(0.0, 0.0, 0.0), dims=(256, 256, 32), resolution=0.2)
    plane_cells = sum(np.prod(tp.plane_extents(big, p)) for p in tp.PLANES)
    assert plane_cells < big.num_voxels
