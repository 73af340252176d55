"""Built-in oracle/property suite behind `appt selftest`.

Each check re-derives its expected values from an independent reference
(brute force, closed form, or hand computation) so a fresh build can vouch
for itself without the test harness installed.
"""
from __future__ import annotations

import tempfile
import os

import numpy as np

from . import autodiff as ad
from .analysis import segmentation_metrics
from .attention import gpa_forward, local_attention_params, scalar_attention_params
from .attention import full_scalar_attention
from .errors import ApptError
from .network import (BlockConfig, NetworkConfig, StageSchedule,
                      appt_block_forward, block_params, load_checkpoint,
                      save_checkpoint, Network)
from .nn import MlpSpec, init_params, mlp_forward, mlp_param_specs
from .pointcloud import (PointCloud, farthest_point_sample, generate_synthetic,
                         knn)
from .rng import SplitMix64


def _random_cloud(rng: np.random.Generator, n: int, c: int = 0) -> PointCloud:
    pos = rng.standard_normal((n, 3))
    feats = rng.standard_normal((n, max(c, 1)))
    return PointCloud(pos, feats)


def check_matmul_oracle():
    rng = np.random.default_rng(11)
    a = rng.standard_normal((8, 8))
    b = rng.standard_normal((8, 8))
    ref = np.zeros((8, 8))
    for i in range(8):
        for j in range(8):
            s = 0.0
            for k in range(8):
                s += a[i, k] * b[k, j]
            ref[i, j] = s
    got = ad.matmul(ad.Tensor(a), ad.Tensor(b)).data
    assert np.abs(got - ref).max() == 0.0, "matmul deviates from triple loop"


def check_softmax_properties():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((5, 7))
    y = ad.softmax(ad.Tensor(x), axis=1).data
    assert np.abs(y.sum(axis=1) - 1.0).max() < 1e-12, "rows must sum to 1"
    y2 = ad.softmax(ad.Tensor(x + 3.5), axis=1).data
    assert np.abs(y - y2).max() < 1e-12, "softmax must be shift invariant"


def check_mlp_gradients():
    spec = MlpSpec((4, 6, 3), norm=(True, False))
    params = init_params(mlp_param_specs("net", spec), seed=5)
    x = np.random.default_rng(13).standard_normal((5, 4))
    seed_grad = np.random.default_rng(14).standard_normal((5, 3))

    def f(p):
        out = mlp_forward(spec, p, ad.Tensor(x), "net")
        return float((out.data * seed_grad).sum())

    out = mlp_forward(spec, params, ad.Tensor(x), "net")
    ad.backward(out, seed_grad)
    fd = ad.finite_diff_grad(f, params)
    for name, t in params.items():
        err = ad.gradient_rel_error(t.grad, fd[name])
        assert err < 1e-4, f"gradient mismatch for {name}: {err}"


def _fps_reference(pos: np.ndarray, m: int) -> list:
    n = pos.shape[0]
    centroid = pos.mean(axis=0)

    def pick(dist):
        best = dist.max()
        cand = [i for i in range(n) if dist[i] == best]
        return min(cand, key=lambda i: tuple(pos[i]))

    chosen = [pick(((pos - centroid) ** 2).sum(axis=1))]
    dmin = ((pos - pos[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < m:
        nxt = pick(dmin)
        chosen.append(nxt)
        dmin = np.minimum(dmin, ((pos - pos[nxt]) ** 2).sum(axis=1))
    return chosen


def check_fps_brute_force():
    rng = np.random.default_rng(15)
    for trial in range(20):
        n = int(rng.integers(4, 48))
        cloud = _random_cloud(rng, n)
        sr = float(rng.uniform(0.1, 1.0))
        pivots = farthest_point_sample(cloud, sr)
        ref = _fps_reference(cloud.positions, pivots.m)
        assert pivots.indices.tolist() == ref, f"fps mismatch on trial {trial}"


def check_knn_full_sort():
    rng = np.random.default_rng(16)
    for trial in range(20):
        n = int(rng.integers(4, 64))
        cloud = _random_cloud(rng, n)
        k = int(rng.integers(1, n + 1))
        table = knn(cloud, k).table
        d2 = ((cloud.positions[:, None] - cloud.positions[None]) ** 2).sum(-1)
        for i in range(n):
            keyed = sorted(range(n),
                           key=lambda j: (d2[i, j] if j != i else -1.0,
                                          tuple(cloud.positions[j])))
            assert table[i].tolist() == keyed[:k], f"knn row {i} mismatch"


def check_gpa_full_attention():
    rng = np.random.default_rng(17)
    for trial in range(5):
        n = int(rng.integers(4, 48))
        c = int(rng.integers(2, 16))
        cloud = _random_cloud(rng, n, c)
        ap = scalar_attention_params(c, "att")
        params = init_params(ap.param_specs(), seed=trial)
        x = ad.Tensor(rng.standard_normal((n, c)))
        pivots = farthest_point_sample(cloud, 1.0)
        out_gpa = gpa_forward(x, ad.gather_rows(x, pivots.indices), params, ap)
        out_full = full_scalar_attention(x, params, ap)
        diff = np.abs(out_gpa.data - out_full.data).max()
        assert diff < 1e-10, f"pivot attention != full attention: {diff}"


def check_block_residual_identity():
    rng = np.random.default_rng(18)
    cloud = _random_cloud(rng, 24, 8)
    cfg = BlockConfig(8, 0.25, 0.5, 4)
    bp = block_params("blk", cfg)
    params = init_params(bp.param_specs(), seed=3)
    for _, t in params.items():
        t.data[...] = 0.0
    x = ad.Tensor(rng.standard_normal((24, 8)))
    nbr = knn(cloud, 4)
    pivots = farthest_point_sample(cloud, 0.5)
    y = appt_block_forward(x, cloud, nbr, pivots, cfg, params, bp=bp)
    assert np.array_equal(y.data, x.data), "zeroed block must be the identity"


def check_metrics_oracle():
    report = segmentation_metrics([0, 1, 1, 1], [0, 0, 1, 1], 2)
    assert report.per_class_iou[0] == 0.5
    assert abs(report.per_class_iou[1] - 2.0 / 3.0) < 1e-15
    assert abs(report.miou - 7.0 / 12.0) < 1e-15
    assert report.oa == 0.75
    assert report.macc == 0.75


def check_checkpoint_roundtrip():
    cfg = NetworkConfig(
        "segmentation",
        StageSchedule((1,), (8,), (0.25,), (0.5,), (1,)),
        input_width=6, num_classes=2, neighbor_count=4, seed=9)
    params = Network(cfg).init_params()
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "ckpt.appt")
        save_checkpoint(path, cfg, params)
        cfg2, params2 = load_checkpoint(path)
    assert cfg2 == cfg, "config must round-trip"
    for name, t in params.items():
        assert np.array_equal(t.data, params2[name].data), \
            f"parameter {name} not bitwise identical"


def check_determinism():
    a = SplitMix64(42).uniform(64)
    b = SplitMix64(42).uniform(64)
    assert np.array_equal(a, b), "generator must be reproducible"
    c1 = generate_synthetic("sphere", 32, 7)
    c2 = generate_synthetic("sphere", 32, 7)
    assert np.array_equal(c1.positions, c2.positions), "synthetic clouds drift"
    s1 = init_params(mlp_param_specs("m", MlpSpec((4, 4))), seed=1)
    s2 = init_params(mlp_param_specs("m", MlpSpec((4, 4))), seed=1)
    assert np.array_equal(s1["m.0.weight"].data, s2["m.0.weight"].data)


def check_lga_single_neighbor():
    rng = np.random.default_rng(19)
    cloud = _random_cloud(rng, 6, 5)
    ap = local_attention_params(5, "att")
    params = init_params(ap.param_specs(), seed=2)
    x = ad.Tensor(rng.standard_normal((6, 5)))
    from .attention import lga_forward
    out = lga_forward(x, cloud, knn(cloud, 1), params, ap)
    alpha = mlp_forward(ap.value, params, x, "att.value").data
    delta0 = mlp_forward(ap.pos_encoder, params, ad.Tensor(np.zeros((1, 3))),
                         "att.pos").data
    assert np.abs(out.data - (alpha + delta0)).max() < 1e-12, \
        "k=1 must reduce to value + self position encoding"


CHECKS = [
    ("matmul-triple-loop-oracle", check_matmul_oracle),
    ("softmax-normalization", check_softmax_properties),
    ("mlp-gradient-vs-finite-diff", check_mlp_gradients),
    ("fps-brute-force", check_fps_brute_force),
    ("knn-full-sort", check_knn_full_sort),
    ("gpa-equals-full-attention", check_gpa_full_attention),
    ("block-residual-identity", check_block_residual_identity),
    ("lga-single-neighbor", check_lga_single_neighbor),
    ("metrics-hand-oracle", check_metrics_oracle),
    ("checkpoint-roundtrip", check_checkpoint_roundtrip),
    ("seeded-determinism", check_determinism),
]


def _check_checkpoint_file(path: str):
    cfg, params = load_checkpoint(path)
    count = params.total_parameters()
    assert count > 0, "checkpoint holds no parameters"


def run_all(checkpoint=None) -> list:
    """Run every check; returns (name, passed, detail) triples."""
    checks = list(CHECKS)
    if checkpoint is not None:
        checks.append(("checkpoint-integrity",
                       lambda: _check_checkpoint_file(checkpoint)))
    results = []
    for name, fn in checks:
        try:
            fn()
            results.append((name, True, ""))
        except (AssertionError, ApptError, OSError) as exc:
            results.append((name, False, str(exc)))
    return results
