"""Blocks, transitions, schedules, network forwards, and checkpoints."""
import numpy as np
import pytest

from appt import autodiff as ad
from appt.attention import gpa_forward, lga_forward
from appt.errors import (ConfigurationError, DimensionError, FileFormatError)
from appt.network import (BlockConfig, Network, NetworkConfig, StageSchedule,
                          appt_block_forward, block_params, channel_split,
                          config_from_dict, config_to_dict, fuse,
                          load_checkpoint, paper_segmentation_config,
                          param_count, prepare_geometry, save_checkpoint,
                          segmentation_forward, transition_down, transition_up)
from appt.nn import MlpSpec, init_params, mlp_forward, mlp_param_specs
from appt.pointcloud import (PointCloud, farthest_point_sample,
                             generate_synthetic, knn)


def random_cloud(seed, n, c=3):
    rng = np.random.default_rng(seed)
    return PointCloud(rng.standard_normal((n, 3)), rng.standard_normal((n, c)))


def block_setup(cfg, n=24, seed=0, prefix="blk"):
    cloud = random_cloud(seed, n)
    bp = block_params(prefix, cfg)
    params = init_params(bp.param_specs(), seed=seed + 1)
    nbr = knn(cloud, min(cfg.neighbor_count, n))
    pivots = (farthest_point_sample(cloud, cfg.sampling_ratio)
              if cfg.sampling_ratio > 0 else None)
    x = np.random.default_rng(seed + 2).standard_normal((n, cfg.channels))
    return cloud, bp, params, nbr, pivots, x


def zero_store(params):
    for _, t in params.items():
        t.data[...] = 0.0


# ---------------------------------------------------------------------------
# channel split and fusion


def test_channel_split_degenerate():
    x = ad.Tensor(np.random.default_rng(0).standard_normal((5, 8)))
    x_l, x_g = channel_split(x, 0.0)
    assert x_l.data.shape == (5, 8)
    assert x_g.data.shape == (5, 0)


def test_channel_split_quarter():
    x = ad.Tensor(np.zeros((4, 8)))
    x_l, x_g = channel_split(x, 0.25)
    assert x_l.data.shape == (4, 6)
    assert x_g.data.shape == (4, 2)


def test_channel_split_paper_stage_two_ratio():
    x = ad.Tensor(np.zeros((4, 32)))
    x_l, x_g = channel_split(x, 1.0 / 8.0)
    assert x_g.data.shape[1] == 4
    assert x_l.data.shape[1] == 28


def test_concat_of_split_is_identity():
    x = np.random.default_rng(1).standard_normal((6, 10))
    x_l, x_g = channel_split(ad.Tensor(x), 0.3)
    back = fuse(x_l, x_g, "concat")
    assert np.array_equal(back.data, x)


def test_fuse_concat_widths():
    a = ad.Tensor(np.ones((4, 3)))
    b = ad.Tensor(np.full((4, 5), 2.0))
    out = fuse(a, b, "concat")
    assert out.data.shape == (4, 8)
    assert np.array_equal(out.data[:, :3], np.ones((4, 3)))
    assert np.array_equal(out.data[:, 3:], np.full((4, 5), 2.0))


def test_fuse_concat_row_mismatch_is_dimension_error():
    with pytest.raises(DimensionError):
        fuse(ad.Tensor(np.ones((4, 3))), ad.Tensor(np.ones((5, 2))), "concat")


def test_fuse_sum_mlp_zero_projections_give_zero():
    fl, fg = MlpSpec((3, 8)), MlpSpec((5, 8))
    params = init_params(mlp_param_specs("f.fuse_local", fl)
                         + mlp_param_specs("f.fuse_global", fg), seed=2)
    zero_store(params)
    rng = np.random.default_rng(3)
    out = fuse(ad.Tensor(rng.standard_normal((4, 3))),
               ad.Tensor(rng.standard_normal((4, 5))), "sum_mlp",
               params, fl, fg, "f")
    assert np.array_equal(out.data, np.zeros((4, 8)))


# ---------------------------------------------------------------------------
# block forward


@pytest.mark.parametrize("arrangement", ["parallel", "serial"])
@pytest.mark.parametrize("fusion", ["concat", "sum_mlp"])
def test_block_zero_params_is_identity(arrangement, fusion):
    cfg = BlockConfig(8, 0.25, 0.5, 4, arrangement, fusion)
    cloud, bp, params, nbr, pivots, x = block_setup(cfg)
    zero_store(params)
    y = appt_block_forward(ad.Tensor(x), cloud, nbr, pivots, cfg, params, bp=bp)
    assert np.array_equal(y.data, x)


def test_block_local_only_degenerate_matches_composition():
    cfg = BlockConfig(6, 0.0, 0.0, 3)
    cloud, bp, params, nbr, pivots, x = block_setup(cfg, seed=5)
    y = appt_block_forward(ad.Tensor(x), cloud, nbr, None, cfg, params, bp=bp)
    xt = ad.Tensor(x)
    y_hat = ad.add(xt, lga_forward(xt, cloud, nbr, params, bp.local))
    ref = ad.add(y_hat, mlp_forward(bp.ffn, params, y_hat, "blk.ffn"))
    assert np.array_equal(y.data, ref.data)


def test_block_matches_hand_composed_pipeline():
    cfg = BlockConfig(16, 0.25, 0.25, 4)
    cloud, bp, params, nbr, pivots, x = block_setup(cfg, n=64, seed=6)
    y = appt_block_forward(ad.Tensor(x), cloud, nbr, pivots, cfg, params, bp=bp)

    xt = ad.Tensor(x)
    x_l, x_g = channel_split(xt, 0.25)
    y_l = lga_forward(x_l, cloud, nbr, params, bp.local)
    y_g = gpa_forward(x_g, ad.gather_rows(x_g, pivots.indices), params, bp.global_)
    y_hat = ad.add(xt, fuse(y_l, y_g, "concat"))
    ref = ad.add(y_hat, mlp_forward(bp.ffn, params, y_hat, "blk.ffn"))
    assert np.abs(y.data - ref.data).max() < 1e-12


def test_block_global_only():
    cfg = BlockConfig(6, 1.0, 0.5, 3)
    cloud, bp, params, nbr, pivots, x = block_setup(cfg, seed=7)
    assert bp.local is None
    y = appt_block_forward(ad.Tensor(x), cloud, nbr, pivots, cfg, params, bp=bp)
    assert y.data.shape == x.shape


def test_block_needs_pivots_when_global_active():
    cfg = BlockConfig(8, 0.5, 0.5, 4)
    cloud, bp, params, nbr, pivots, x = block_setup(cfg, seed=8)
    with pytest.raises(ConfigurationError):
        appt_block_forward(ad.Tensor(x), cloud, nbr, None, cfg, params, bp=bp)


def test_block_serial_composition():
    cfg = BlockConfig(6, 0.5, 0.5, 3, arrangement="serial")
    cloud, bp, params, nbr, pivots, x = block_setup(cfg, seed=9)
    y = appt_block_forward(ad.Tensor(x), cloud, nbr, pivots, cfg, params, bp=bp)
    xt = ad.Tensor(x)
    h = ad.add(xt, lga_forward(xt, cloud, nbr, params, bp.local))
    h = ad.add(h, gpa_forward(h, ad.gather_rows(h, pivots.indices), params,
                              bp.global_))
    ref = ad.add(h, mlp_forward(bp.ffn, params, h, "blk.ffn"))
    assert np.array_equal(y.data, ref.data)


def test_block_config_validation():
    with pytest.raises(ConfigurationError):
        BlockConfig(8, 0.5, 0.0, 4)      # global share without sampling
    with pytest.raises(ConfigurationError):
        BlockConfig(8, 1.5, 0.5, 4)
    with pytest.raises(ConfigurationError):
        BlockConfig(8, 0.5, 0.5, 4, arrangement="diagonal")


# ---------------------------------------------------------------------------
# transitions


def test_transition_down_counts_and_channels():
    cloud = random_cloud(10, 1024, c=4)
    spec = MlpSpec((4, 8))
    params = init_params(mlp_param_specs("down", spec), seed=11)
    x = ad.Tensor(np.random.default_rng(12).standard_normal((1024, 4)))
    new_cloud, pooled = transition_down(cloud, x, 4, 16, params, spec, "down")
    assert new_cloud.n == 256
    assert pooled.data.shape == (256, 8)


def test_transition_down_constant_field_stays_constant():
    cloud = random_cloud(13, 40, c=3)
    spec = MlpSpec((3, 5))
    params = init_params(mlp_param_specs("down", spec), seed=14)
    x = ad.Tensor(np.tile([1.0, 2.0, 3.0], (40, 1)))
    _, pooled = transition_down(cloud, x, 4, 6, params, spec, "down")
    assert np.abs(pooled.data - pooled.data[0]).max() == 0.0


def test_transition_down_stride_validation():
    cloud = random_cloud(15, 16, c=3)
    spec = MlpSpec((3, 4))
    params = init_params(mlp_param_specs("down", spec), seed=16)
    from appt.errors import RangeError
    with pytest.raises(RangeError):
        transition_down(cloud, ad.Tensor(np.zeros((16, 3))), 1, 4, params,
                        spec, "down")


def test_transition_up_coincident_point_takes_coarse_value():
    coarse = PointCloud(np.array([[0.0, 0, 0], [4, 0, 0], [0, 4, 0]]),
                        np.zeros((3, 1)))
    fine = PointCloud(np.array([[4.0, 0, 0], [1, 1, 0]]), np.zeros((2, 1)))
    spec = MlpSpec((2, 3))
    params = init_params(mlp_param_specs("up", spec), seed=17)
    params["up.0.weight"].data[...] = np.array([[1.0, 0, 0], [0, 1, 0]])
    params["up.0.bias"].data[...] = 0.0
    x_coarse = np.array([[1.0, 10], [2, 20], [3, 30]])
    skip = np.zeros((2, 3))
    out = transition_up(coarse, fine, ad.Tensor(x_coarse), ad.Tensor(skip),
                        params, spec, "up")
    assert np.abs(out.data[0] - [2.0, 20.0, 0.0]).max() < 1e-12


def test_transition_up_constant_coarse_field_interpolates_constant():
    rng = np.random.default_rng(18)
    coarse = random_cloud(19, 10, 1)
    fine = random_cloud(20, 25, 1)
    spec = MlpSpec((4, 2))
    params = init_params(mlp_param_specs("up", spec), seed=21)
    x_coarse = np.tile([1.0, -2.0, 3.0, 0.5], (10, 1))
    skip = rng.standard_normal((25, 2))
    out = transition_up(coarse, fine, ad.Tensor(x_coarse), ad.Tensor(skip),
                        params, spec, "up")
    ref = x_coarse[0] @ params["up.0.weight"].data + params["up.0.bias"].data
    assert np.abs(out.data - (ref + skip)).max() < 1e-9


def test_transition_up_matches_explicit_loop():
    rng = np.random.default_rng(22)
    coarse = random_cloud(23, 12, 1)
    fine = random_cloud(24, 30, 1)
    spec = MlpSpec((5, 4))
    params = init_params(mlp_param_specs("up", spec), seed=25)
    x_coarse = rng.standard_normal((12, 5))
    skip = rng.standard_normal((30, 4))
    out = transition_up(coarse, fine, ad.Tensor(x_coarse), ad.Tensor(skip),
                        params, spec, "up")
    ref = np.zeros((30, 5))
    for i in range(30):
        d2 = ((coarse.positions - fine.positions[i]) ** 2).sum(axis=1)
        idx = sorted(range(12), key=lambda j: (d2[j], tuple(coarse.positions[j])))[:3]
        if d2[idx[0]] < 1e-24:
            ref[i] = x_coarse[idx[0]]
        else:
            w = 1.0 / d2[idx]
            w /= w.sum()
            ref[i] = sum(w[t] * x_coarse[idx[t]] for t in range(3))
    expected = ref @ params["up.0.weight"].data + params["up.0.bias"].data + skip
    assert np.abs(out.data - expected).max() < 1e-12


def test_transition_up_small_coarse_cloud_uses_all_points():
    coarse = PointCloud(np.array([[0.0, 0, 0], [1, 0, 0]]), np.zeros((2, 1)))
    fine = random_cloud(26, 6, 1)
    spec = MlpSpec((2, 2))
    params = init_params(mlp_param_specs("up", spec), seed=27)
    out = transition_up(coarse, fine, ad.Tensor(np.ones((2, 2))),
                        ad.Tensor(np.zeros((6, 2))), params, spec, "up")
    assert out.data.shape == (6, 2)


# ---------------------------------------------------------------------------
# schedules / config


def test_schedule_validation():
    with pytest.raises(ConfigurationError):
        StageSchedule((1, 1), (8, 8), (0, 0), (0, 0), (1, 4))  # non-increasing
    with pytest.raises(ConfigurationError):
        StageSchedule((1,), (8, 16), (0, 0), (0, 0), (1, 4))   # length mismatch
    with pytest.raises(ConfigurationError):
        StageSchedule((1, 1), (8, 16), (0, 0), (0, 0), (1, 1)) # stride < 2


def test_network_config_validation():
    sched = StageSchedule((1,), (8,), (0.0,), (0.0,), (1,))
    with pytest.raises(ConfigurationError):
        NetworkConfig("segmentation", sched, 6, 1)
    with pytest.raises(ConfigurationError):
        NetworkConfig("regression", sched, 6, 2)


def test_paper_schedule_golden_values():
    cfg = paper_segmentation_config()
    s = cfg.schedule
    assert s.depths == (2, 3, 4, 6, 3)
    assert s.channels == (32, 64, 128, 256, 512)
    assert s.sampling_ratios == (0.0, 1.0 / 64.0, 1.0 / 16.0, 1.0 / 4.0, 1.0)
    assert s.global_channel_ratios == (0.0, 1.0 / 8.0, 1.0 / 8.0, 1.0 / 4.0, 1.0)
    assert cfg.neighbor_count == 16
    assert cfg.task == "segmentation"


def test_config_dict_round_trip():
    cfg = paper_segmentation_config(num_classes=13, input_width=6, seed=3)
    assert config_from_dict(config_to_dict(cfg)) == cfg


# ---------------------------------------------------------------------------
# parameter counting


def test_param_count_single_linear_layer():
    specs = mlp_param_specs("m", MlpSpec((32, 64)))
    assert sum(int(np.prod(s.shape)) for s in specs) == 2112


def test_param_count_paper_config_in_band():
    count = param_count(paper_segmentation_config())
    assert 7.0e6 <= count <= 1.0e7


def test_param_count_quadratic_dominance():
    sched = StageSchedule((1, 1), (16, 32), (0.25, 0.5), (0.5, 0.5), (1, 4))
    small = NetworkConfig("segmentation", sched, 6, 4, neighbor_count=8)
    sched2 = StageSchedule((1, 1), (32, 64), (0.25, 0.5), (0.5, 0.5), (1, 4))
    big = NetworkConfig("segmentation", sched2, 6, 4, neighbor_count=8)
    ratio = param_count(big) / param_count(small)
    assert 3.5 < ratio < 4.5


def test_stage_transition_channel_growth_matches_schedule():
    net = Network(paper_segmentation_config())
    assert net.down_specs[0].widths == (32, 64)
    assert net.down_specs[3].widths == (256, 512)


# ---------------------------------------------------------------------------
# network forwards


def small_seg_config(num_classes=3, stages=2, k=4, seed=0,
                     arrangement="parallel", fusion="concat"):
    if stages == 1:
        sched = StageSchedule((1,), (8,), (0.25,), (0.5,), (1,))
    else:
        sched = StageSchedule((1, 1), (8, 12), (0.25, 0.5), (0.5, 1.0), (1, 4))
    return NetworkConfig("segmentation", sched, 6, num_classes,
                         neighbor_count=k, arrangement=arrangement,
                         fusion=fusion, seed=seed)


def test_segmentation_paper_shape_contract():
    cfg = paper_segmentation_config(num_classes=13, input_width=6)
    cloud = generate_synthetic("sphere", 1024, seed=3)
    params = Network(cfg).init_params()
    logits = segmentation_forward(cfg, params, cloud)
    assert logits.data.shape == (1024, 13)
    assert np.all(np.isfinite(logits.data))


def test_segmentation_permutation_equivariance():
    cfg = small_seg_config()
    cloud = generate_synthetic("two_planes", 48, seed=4)
    net = Network(cfg)
    params = net.init_params(seed=5)
    base = net.forward(params, cloud).data
    rng = np.random.default_rng(6)
    for _ in range(3):
        perm = rng.permutation(48)
        out = net.forward(params, cloud.permuted(perm)).data
        assert np.abs(out - base[perm]).max() < 1e-9


def test_segmentation_zero_head_gives_equal_logits():
    cfg = small_seg_config()
    net = Network(cfg)
    params = net.init_params(seed=7)
    for name, t in params.items():
        if name.startswith("head."):
            t.data[...] = 0.0
    cloud = generate_synthetic("two_planes", 32, seed=8)
    logits = net.forward(params, cloud).data
    assert np.abs(logits - logits[:, :1]).max() == 0.0


def test_classification_shape_and_permutation_invariance():
    sched = StageSchedule((1, 1), (8, 12), (0.25, 0.5), (0.5, 1.0), (1, 4))
    cfg = NetworkConfig("classification", sched, 6, 3, neighbor_count=8)
    cloud = generate_synthetic("torus", 1024, seed=9)
    net = Network(cfg)
    params = net.init_params(seed=10)
    logits = net.forward(params, cloud)
    assert logits.data.shape == (1, 3)
    perm = np.random.default_rng(11).permutation(1024)
    logits_p = net.forward(params, cloud.permuted(perm))
    assert np.abs(logits.data - logits_p.data).max() < 1e-9


def test_classification_zero_head_uniform_logits():
    sched = StageSchedule((1,), (8,), (0.0,), (0.0,), (1,))
    cfg = NetworkConfig("classification", sched, 6, 4, neighbor_count=4)
    net = Network(cfg)
    params = net.init_params(seed=12)
    for name, t in params.items():
        if name.startswith("head."):
            t.data[...] = 0.0
    cloud = generate_synthetic("cube", 24, seed=13)
    logits = net.forward(params, cloud).data
    assert np.array_equal(logits, np.zeros((1, 4)))


def test_network_rejects_wrong_feature_width():
    cfg = small_seg_config()
    cloud = random_cloud(14, 16, c=2)
    params = Network(cfg).init_params(seed=15)
    with pytest.raises(ConfigurationError):
        segmentation_forward(cfg, params, cloud)


def test_single_stage_segmentation_has_no_decoder():
    cfg = small_seg_config(stages=1)
    net = Network(cfg)
    assert not net.decoder
    names = [s.name for s in net.param_specs()]
    assert not any(n.startswith("dec") or n.startswith("transform") for n in names)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_bitwise(tmp_path):
    cfg = small_seg_config(seed=20)
    params = Network(cfg).init_params(seed=21)
    path = tmp_path / "model.appt"
    save_checkpoint(path, cfg, params)
    assert path.read_bytes()[:5] == b"APPT1"
    cfg2, params2 = load_checkpoint(path)
    assert cfg2 == cfg
    assert params2.names() == params.names()
    for name, t in params.items():
        assert np.array_equal(t.data, params2[name].data)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.appt"
    path.write_bytes(b"NOPE!" + b"\x00" * 64)
    with pytest.raises(FileFormatError):
        load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path):
    cfg = small_seg_config(seed=22)
    params = Network(cfg).init_params(seed=23)
    path = tmp_path / "model.appt"
    save_checkpoint(path, cfg, params)
    raw = path.read_bytes()
    clipped = tmp_path / "clipped.appt"
    clipped.write_bytes(raw[:len(raw) - 16])
    with pytest.raises(FileFormatError):
        load_checkpoint(clipped)


def test_checkpoint_rejects_trailing_garbage(tmp_path):
    cfg = small_seg_config(seed=24)
    params = Network(cfg).init_params(seed=25)
    path = tmp_path / "model.appt"
    save_checkpoint(path, cfg, params)
    bloated = tmp_path / "bloated.appt"
    bloated.write_bytes(path.read_bytes() + b"extra")
    with pytest.raises(FileFormatError):
        load_checkpoint(bloated)
