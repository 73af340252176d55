"""Attention operators: full scalar attention, local group attention,
global pivot attention, and their oracle pairings."""
import numpy as np
import pytest

from appt import autodiff as ad
from appt.attention import (full_scalar_attention, gpa_forward, lga_forward,
                            local_attention_params, scalar_attention_params)
from appt.errors import ConfigurationError
from appt.nn import init_params, mlp_forward
from appt.pointcloud import PointCloud, farthest_point_sample, knn


def random_cloud(seed, n, c):
    rng = np.random.default_rng(seed)
    return PointCloud(rng.standard_normal((n, 3)), rng.standard_normal((n, c)))


def make_scalar(c, seed, prefix="att"):
    ap = scalar_attention_params(c, prefix)
    return ap, init_params(ap.param_specs(), seed=seed)


def make_local(c, seed, prefix="att"):
    ap = local_attention_params(c, prefix)
    return ap, init_params(ap.param_specs(), seed=seed)


def affine(params, prefix, x):
    return x @ params[f"{prefix}.weight"].data + params[f"{prefix}.bias"].data


def mlp2(params, prefix, x, norm=True):
    """Reference two-layer MLP evaluation (norm on the hidden layer)."""
    h = x @ params[f"{prefix}.0.weight"].data + params[f"{prefix}.0.bias"].data
    if norm:
        mu = h.mean(axis=-1, keepdims=True)
        var = ((h - mu) ** 2).mean(axis=-1, keepdims=True)
        h = (h - mu) / np.sqrt(var + 1e-5)
        h = h * params[f"{prefix}.0.norm_scale"].data + params[f"{prefix}.0.norm_shift"].data
    h = np.maximum(h, 0.0)
    return h @ params[f"{prefix}.1.weight"].data + params[f"{prefix}.1.bias"].data


def np_softmax(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# full scalar attention


def test_full_attention_single_point_returns_value():
    ap, params = make_scalar(4, seed=0)
    x = np.random.default_rng(1).standard_normal((1, 4))
    out = full_scalar_attention(ad.Tensor(x), params, ap)
    expected = affine(params, "att.value.0", x)
    assert np.abs(out.data - expected).max() < 1e-14


def test_full_attention_zero_logits_give_column_mean():
    ap, params = make_scalar(3, seed=2)
    params["att.query.0.weight"].data[...] = 0.0
    params["att.query.0.bias"].data[...] = 0.0
    params["att.key.0.weight"].data[...] = 0.0
    params["att.key.0.bias"].data[...] = 0.0
    params["att.value.0.weight"].data[...] = np.eye(3)
    params["att.value.0.bias"].data[...] = 0.0
    x = np.random.default_rng(3).standard_normal((7, 3))
    out = full_scalar_attention(ad.Tensor(x), params, ap)
    assert np.abs(out.data - x.mean(axis=0)).max() < 1e-12


def test_full_attention_matches_composition_reference():
    ap, params = make_scalar(5, seed=4)
    x = np.random.default_rng(5).standard_normal((16, 5))
    q = affine(params, "att.query.0", x)
    k = affine(params, "att.key.0", x)
    v = affine(params, "att.value.0", x)
    weights = np_softmax(q @ k.T / np.sqrt(5.0), axis=1)
    ref = weights @ v
    out = full_scalar_attention(ad.Tensor(x), params, ap)
    assert np.abs(out.data - ref).max() < 1e-12


# ---------------------------------------------------------------------------
# local group attention


def test_lga_single_neighbor_reduces_to_value_plus_self_encoding():
    cloud = random_cloud(6, 9, 4)
    ap, params = make_local(4, seed=7)
    x = np.random.default_rng(8).standard_normal((9, 4))
    out = lga_forward(ad.Tensor(x), cloud, knn(cloud, 1), params, ap)
    alpha = affine(params, "att.value.0", x)
    delta0 = mlp2(params, "att.pos", np.zeros((1, 3)))
    assert np.abs(out.data - (alpha + delta0)).max() < 1e-12


def test_lga_identical_points_and_features_give_identical_rows():
    n = 6
    cloud = PointCloud(np.zeros((n, 3)), np.ones((n, 2)))
    ap, params = make_local(2, seed=9)
    x = np.tile([0.3, -1.2], (n, 1))
    out = lga_forward(ad.Tensor(x), cloud, knn(cloud, 3), params, ap)
    assert np.abs(out.data - out.data[0]).max() < 1e-12


def test_lga_matches_explicit_loop_reference():
    n, k, c = 32, 4, 6
    cloud = random_cloud(10, n, c)
    ap, params = make_local(c, seed=11)
    rng = np.random.default_rng(12)
    x = rng.standard_normal((n, c))
    nbr = knn(cloud, k)

    q = affine(params, "att.query.0", x)
    key = affine(params, "att.key.0", x)
    v = affine(params, "att.value.0", x)
    ref = np.zeros((n, c))
    for i in range(n):
        rel = cloud.positions[i] - cloud.positions[nbr.table[i]]       # (k,3)
        delta = mlp2(params, "att.pos", rel)                           # (k,c)
        logits = mlp2(params, "att.weight_mlp",
                      q[i][None, :] - key[nbr.table[i]] + delta)       # (k,c)
        w = np_softmax(logits, axis=0)                                 # per channel
        ref[i] = (w * (v[nbr.table[i]] + delta)).sum(axis=0)
    out = lga_forward(ad.Tensor(x), cloud, nbr, params, ap)
    assert np.abs(out.data - ref).max() < 1e-12


def test_lga_weights_sum_to_one_behaviorally():
    # zero value path and position encoding except a constant value bias:
    # output == bias iff the per-channel weights sum to 1
    cloud = random_cloud(13, 20, 5)
    ap, params = make_local(5, seed=14)
    params["att.value.0.weight"].data[...] = 0.0
    params["att.value.0.bias"].data[...] = np.arange(1.0, 6.0)
    params["att.pos.1.weight"].data[...] = 0.0
    params["att.pos.1.bias"].data[...] = 0.0
    x = np.random.default_rng(15).standard_normal((20, 5))
    out = lga_forward(ad.Tensor(x), cloud, knn(cloud, 4), params, ap)
    assert np.abs(out.data - np.arange(1.0, 6.0)).max() < 1e-12


def test_lga_translation_invariance():
    cloud = random_cloud(16, 24, 4)
    ap, params = make_local(4, seed=17)
    x = np.random.default_rng(18).standard_normal((24, 4))
    out = lga_forward(ad.Tensor(x), cloud, knn(cloud, 5), params, ap)
    shifted = PointCloud(cloud.positions + [102.5, -3.75, 0.5], cloud.features)
    out2 = lga_forward(ad.Tensor(x), shifted, knn(shifted, 5), params, ap)
    assert np.abs(out.data - out2.data).max() < 1e-12


def test_lga_permutation_equivariance():
    n, k, c = 24, 5, 4
    cloud = random_cloud(19, n, c)
    ap, params = make_local(c, seed=20)
    x = np.random.default_rng(21).standard_normal((n, c))
    out = lga_forward(ad.Tensor(x), cloud, knn(cloud, k), params, ap)
    perm = np.random.default_rng(22).permutation(n)
    cloud_p = cloud.permuted(perm)
    out_p = lga_forward(ad.Tensor(x[perm]), cloud_p, knn(cloud_p, k), params, ap)
    assert np.abs(out_p.data - out.data[perm]).max() < 1e-9


def test_lga_rejects_mismatched_neighbor_table():
    cloud = random_cloud(23, 8, 3)
    other = random_cloud(24, 12, 3)
    ap, params = make_local(3, seed=25)
    with pytest.raises(ConfigurationError):
        lga_forward(ad.Tensor(np.zeros((8, 3))), cloud, knn(other, 2), params, ap)


# ---------------------------------------------------------------------------
# global pivot attention


def test_gpa_single_pivot_returns_its_value():
    ap, params = make_scalar(4, seed=26)
    rng = np.random.default_rng(27)
    x = rng.standard_normal((10, 4))
    pivot = x[3:4]
    out = gpa_forward(ad.Tensor(x), ad.Tensor(pivot), params, ap)
    expected = affine(params, "att.value.0", pivot)
    assert np.abs(out.data - np.tile(expected, (10, 1))).max() < 1e-12


def test_gpa_full_sampling_equals_full_attention():
    rng = np.random.default_rng(28)
    for trial in range(10):
        n = int(rng.integers(2, 64))
        c = int(rng.integers(2, 24))
        cloud = random_cloud(trial + 400, n, c)
        ap, params = make_scalar(c, seed=trial)
        x = ad.Tensor(rng.standard_normal((n, c)))
        pivots = farthest_point_sample(cloud, 1.0)
        got = gpa_forward(x, ad.gather_rows(x, pivots.indices), params, ap)
        want = full_scalar_attention(x, params, ap)
        assert np.abs(got.data - want.data).max() < 1e-10


def test_gpa_matches_explicit_double_loop():
    n, m, c = 64, 8, 5
    rng = np.random.default_rng(29)
    x = rng.standard_normal((n, c))
    xp = rng.standard_normal((m, c))
    ap, params = make_scalar(c, seed=30)
    q = affine(params, "att.query.0", x)
    key = affine(params, "att.key.0", xp)
    v = affine(params, "att.value.0", xp)
    ref = np.zeros((n, c))
    for i in range(n):
        logits = np.array([q[i] @ key[j] for j in range(m)]) / np.sqrt(c)
        w = np_softmax(logits, axis=0)
        ref[i] = sum(w[j] * v[j] for j in range(m))
    out = gpa_forward(ad.Tensor(x), ad.Tensor(xp), params, ap)
    assert np.abs(out.data - ref).max() < 1e-12


def test_gpa_row_weights_sum_to_one_behaviorally():
    ap, params = make_scalar(3, seed=31)
    params["att.value.0.weight"].data[...] = 0.0
    params["att.value.0.bias"].data[...] = [2.0, 4.0, 8.0]
    rng = np.random.default_rng(32)
    out = gpa_forward(ad.Tensor(rng.standard_normal((12, 3))),
                      ad.Tensor(rng.standard_normal((5, 3))), params, ap)
    assert np.abs(out.data - [2.0, 4.0, 8.0]).max() < 1e-12


def test_gpa_invariant_to_pivot_row_order():
    ap, params = make_scalar(4, seed=33)
    rng = np.random.default_rng(34)
    x = ad.Tensor(rng.standard_normal((9, 4)))
    xp = rng.standard_normal((6, 4))
    out = gpa_forward(x, ad.Tensor(xp), params, ap)
    perm = rng.permutation(6)
    out2 = gpa_forward(x, ad.Tensor(xp[perm]), params, ap)
    assert np.abs(out.data - out2.data).max() < 1e-12


def test_gpa_needs_a_pivot():
    ap, params = make_scalar(3, seed=35)
    with pytest.raises(ConfigurationError):
        gpa_forward(ad.Tensor(np.zeros((4, 3))), ad.Tensor(np.zeros((0, 3))),
                    params, ap)


def test_gpa_permutation_equivariance():
    n, c = 30, 4
    cloud = random_cloud(36, n, c)
    ap, params = make_scalar(c, seed=37)
    x = np.random.default_rng(38).standard_normal((n, c))
    pivots = farthest_point_sample(cloud, 0.25)
    out = gpa_forward(ad.Tensor(x), ad.Tensor(x[pivots.indices]), params, ap)
    perm = np.random.default_rng(39).permutation(n)
    cloud_p = cloud.permuted(perm)
    pivots_p = farthest_point_sample(cloud_p, 0.25)
    xp = x[perm]
    out_p = gpa_forward(ad.Tensor(xp), ad.Tensor(xp[pivots_p.indices]), params, ap)
    assert np.abs(out_p.data - out.data[perm]).max() < 1e-9
