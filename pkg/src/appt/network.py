"""Transformer blocks with parallel local/global branches, resolution
transitions, ramp schedules, and the segmentation / classification networks.

A block splits its C channels into a local part (vector attention over k
neighbors) and a global part (scalar attention against FPS pivots), fuses
the branch outputs, and applies a residual feed-forward:

    y_hat = x + fuse(local(x_l), global(x_g))
    y     = y_hat + ffn(y_hat)

The per-stage channel ratio CR_g and sampling ratio SR ramp upward across
stages; stage widths grow through strided farthest-point downsampling and
are restored by inverse-distance interpolation plus skip connections.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .attention import (AttentionParams, full_scalar_attention, gpa_forward,
                        lga_forward, local_attention_params,
                        scalar_attention_params)
from .errors import (ConfigurationError, DimensionError, FileFormatError,
                     NumericError, RangeError)
from .ioutil import atomic_write_bytes
from .nn import (MlpSpec, ParamStore, init_params, mlp_forward,
                 mlp_param_specs)
from .pointcloud import (NeighborIndex, PivotSet, PointCloud,
                         farthest_point_sample, fps_indices, knn,
                         pooling_neighbors)

ARRANGEMENTS = ("parallel", "serial")
FUSIONS = ("concat", "sum_mlp")
TASKS = ("segmentation", "classification")

CHECKPOINT_MAGIC = b"APPT1"
CHECKPOINT_VERSION = 1


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


# ---------------------------------------------------------------------------
# block configuration


@dataclass(frozen=True)
class BlockConfig:
    channels: int
    global_channel_ratio: float
    sampling_ratio: float
    neighbor_count: int
    arrangement: str = "parallel"
    fusion: str = "concat"

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigurationError(f"channels must be >= 1, got {self.channels}")
        if not 0.0 <= self.global_channel_ratio <= 1.0:
            raise ConfigurationError(
                f"channel ratio must lie in [0, 1], got {self.global_channel_ratio}")
        if not 0.0 <= self.sampling_ratio <= 1.0:
            raise ConfigurationError(
                f"sampling ratio must lie in [0, 1], got {self.sampling_ratio}")
        if self.global_channel_ratio > 0 and self.sampling_ratio == 0:
            raise ConfigurationError(
                "a block with a global channel share needs a positive sampling ratio")
        if self.neighbor_count < 1:
            raise ConfigurationError(
                f"neighbor count must be >= 1, got {self.neighbor_count}")
        if self.arrangement not in ARRANGEMENTS:
            raise ConfigurationError(f"unknown arrangement {self.arrangement!r}")
        if self.fusion not in FUSIONS:
            raise ConfigurationError(f"unknown fusion {self.fusion!r}")

    @property
    def c_g(self) -> int:
        return round_half_up(self.global_channel_ratio * self.channels)

    @property
    def c_l(self) -> int:
        return self.channels - self.c_g


@dataclass(frozen=True)
class BlockParams:
    """Shapes and store prefixes for one block's parameter groups."""

    prefix: str
    cfg: BlockConfig
    local: Optional[AttentionParams]
    global_: Optional[AttentionParams]
    fuse_local: Optional[MlpSpec]
    fuse_global: Optional[MlpSpec]
    ffn: MlpSpec

    def param_specs(self) -> list:
        specs = []
        if self.local is not None:
            specs += self.local.param_specs()
        if self.global_ is not None:
            specs += self.global_.param_specs()
        if self.fuse_local is not None:
            specs += mlp_param_specs(f"{self.prefix}.fuse_local", self.fuse_local)
        if self.fuse_global is not None:
            specs += mlp_param_specs(f"{self.prefix}.fuse_global", self.fuse_global)
        specs += mlp_param_specs(f"{self.prefix}.ffn", self.ffn)
        return specs


def block_params(prefix: str, cfg: BlockConfig) -> BlockParams:
    c = cfg.channels
    if cfg.arrangement == "serial":
        local = local_attention_params(c, f"{prefix}.local")
        global_ = (scalar_attention_params(c, f"{prefix}.global")
                   if cfg.global_channel_ratio > 0 else None)
        fuse_l = fuse_g = None
    else:
        c_l, c_g = cfg.c_l, cfg.c_g
        local = (local_attention_params(c_l, f"{prefix}.local")
                 if c_l > 0 else None)
        global_ = (scalar_attention_params(c_g, f"{prefix}.global")
                   if c_g > 0 else None)
        if cfg.fusion == "sum_mlp" and local is not None and global_ is not None:
            fuse_l = MlpSpec((c_l, c))
            fuse_g = MlpSpec((c_g, c))
        else:
            fuse_l = fuse_g = None
    ffn = MlpSpec((c, c, c), norm=(True, False))
    return BlockParams(prefix, cfg, local, global_, fuse_l, fuse_g, ffn)


# ---------------------------------------------------------------------------
# block operations


def channel_split(x: ad.Tensor, global_channel_ratio: float):
    """First C_l columns to the local branch, the rest to the global one;
    concat(x_l, x_g) == x exactly."""
    if not 0.0 <= global_channel_ratio <= 1.0:
        raise ConfigurationError(
            f"channel ratio must lie in [0, 1], got {global_channel_ratio}")
    c = x.data.shape[1]
    c_g = round_half_up(global_channel_ratio * c)
    c_l = c - c_g
    return ad.slice_cols(x, 0, c_l), ad.slice_cols(x, c_l, c)


def fuse(y_l: Optional[ad.Tensor], y_g: Optional[ad.Tensor], strategy: str,
         params: Optional[ParamStore] = None,
         fuse_local: Optional[MlpSpec] = None,
         fuse_global: Optional[MlpSpec] = None,
         prefix: str = "") -> ad.Tensor:
    """Combine branch outputs. A missing branch passes the other through
    unchanged under either strategy.

    concat: column juxtaposition, local columns first.
    sum_mlp: project both branches to the full width and add.
    """
    if y_l is None and y_g is None:
        raise ConfigurationError("fuse needs at least one branch output")
    if y_l is None:
        return y_g
    if y_g is None:
        return y_l
    if strategy == "concat":
        return ad.concat_cols([y_l, y_g])
    if strategy == "sum_mlp":
        if params is None or fuse_local is None or fuse_global is None:
            raise ConfigurationError("sum_mlp fusion needs projection parameters")
        left = mlp_forward(fuse_local, params, y_l, f"{prefix}.fuse_local")
        right = mlp_forward(fuse_global, params, y_g, f"{prefix}.fuse_global")
        return ad.add(left, right)
    raise ConfigurationError(f"unknown fusion {strategy!r}")


def _pivot_rows(x: ad.Tensor, pivots: PivotSet) -> ad.Tensor:
    return ad.gather_rows(x, pivots.indices)


def appt_block_forward(x: ad.Tensor, cloud: PointCloud, nbr: NeighborIndex,
                       pivots: Optional[PivotSet], cfg: BlockConfig,
                       params: ParamStore, prefix: str = "block",
                       bp: Optional[BlockParams] = None) -> ad.Tensor:
    """One block: branch attention(s), fusion, residual, feed-forward."""
    if bp is None:
        bp = block_params(prefix, cfg)
    if cfg.global_channel_ratio > 0 and (pivots is None or pivots.m == 0):
        raise ConfigurationError(
            "block has a global branch but received no pivot points")
    if x.data.shape[1] != cfg.channels:
        raise DimensionError(
            f"block expects {cfg.channels} channels, got shape {x.data.shape}")

    if cfg.arrangement == "serial":
        h = ad.add(x, lga_forward(x, cloud, nbr, params, bp.local))
        if bp.global_ is not None:
            h = ad.add(h, gpa_forward(h, _pivot_rows(h, pivots), params, bp.global_))
        return ad.add(h, mlp_forward(bp.ffn, params, h, f"{bp.prefix}.ffn"))

    if bp.global_ is None:
        fused = lga_forward(x, cloud, nbr, params, bp.local)
    elif bp.local is None:
        fused = gpa_forward(x, _pivot_rows(x, pivots), params, bp.global_)
    else:
        x_l, x_g = channel_split(x, cfg.global_channel_ratio)
        y_l = lga_forward(x_l, cloud, nbr, params, bp.local)
        y_g = gpa_forward(x_g, _pivot_rows(x_g, pivots), params, bp.global_)
        fused = fuse(y_l, y_g, cfg.fusion, params, bp.fuse_local,
                     bp.fuse_global, bp.prefix)
    y_hat = ad.add(x, fused)
    return ad.add(y_hat, mlp_forward(bp.ffn, params, y_hat, f"{bp.prefix}.ffn"))


# ---------------------------------------------------------------------------
# resolution transitions


def transition_down(cloud: PointCloud, x: ad.Tensor, stride: int, k: int,
                    params: ParamStore, spec: MlpSpec, prefix: str,
                    geometry: Optional[tuple] = None):
    """FPS to ceil(N/stride) points; linear C->C' on all points, then max
    over each sampled point's k nearest original points."""
    if stride < 2:
        raise RangeError(f"downsample stride must be >= 2, got {stride}")
    n = cloud.n
    if geometry is None:
        m = int(np.ceil(n / stride))
        sample_idx = fps_indices(cloud.positions, m)
        pool_idx = pooling_neighbors(cloud, cloud.positions[sample_idx],
                                     min(k, n))
    else:
        sample_idx, pool_idx = geometry
    z = mlp_forward(spec, params, x, prefix)
    pooled = ad.max_along(ad.gather_rows(z, pool_idx), axis=1)
    labels = None if cloud.labels is None else cloud.labels[sample_idx]
    # the stage cloud carries geometry (and pass-through labels); activations
    # stay on the tensor path so divergence surfaces at the loss check
    new_cloud = PointCloud(cloud.positions[sample_idx],
                           cloud.features[sample_idx], labels)
    return new_cloud, pooled


def interpolation_geometry(coarse_positions: np.ndarray,
                           fine_positions: np.ndarray,
                           neighbors: int = 3,
                           coincidence_eps: float = 1e-12):
    """Indices and inverse-squared-distance weights of each fine point's
    nearest coarse points (all of them when fewer than `neighbors` exist).
    A coarse point within `coincidence_eps` takes the full weight alone."""
    m = coarse_positions.shape[0]
    t = min(neighbors, m)
    diff = fine_positions[:, None, :] - coarse_positions[None, :, :]
    d2 = (diff * diff).sum(axis=-1)
    nf = fine_positions.shape[0]
    keys = (np.broadcast_to(coarse_positions[:, 2], (nf, m)),
            np.broadcast_to(coarse_positions[:, 1], (nf, m)),
            np.broadcast_to(coarse_positions[:, 0], (nf, m)),
            d2)
    order = np.lexsort(keys, axis=-1)[:, :t]
    d2_sel = np.take_along_axis(d2, order, axis=1)
    weights = np.zeros_like(d2_sel)
    coincident = d2_sel[:, 0] < coincidence_eps ** 2
    weights[coincident, 0] = 1.0
    regular = ~coincident
    inv = 1.0 / d2_sel[regular]
    weights[regular] = inv / inv.sum(axis=1, keepdims=True)
    return order, weights


def transition_up(coarse_cloud: PointCloud, fine_cloud: PointCloud,
                  x_coarse: ad.Tensor, x_skip: ad.Tensor,
                  params: ParamStore, spec: MlpSpec, prefix: str,
                  geometry: Optional[tuple] = None) -> ad.Tensor:
    """Inverse-distance interpolation from the 3 nearest coarse points,
    linear projection, then elementwise sum with the skip features."""
    if geometry is None:
        geometry = interpolation_geometry(coarse_cloud.positions,
                                          fine_cloud.positions)
    idx, weights = geometry
    gathered = ad.gather_rows(x_coarse, idx)               # (Nf, t, Cc)
    interp = ad.sum_along(ad.mul(gathered, weights[:, :, None]), axis=1)
    projected = mlp_forward(spec, params, interp, prefix)
    if projected.data.shape != x_skip.data.shape:
        raise DimensionError(
            f"skip features {x_skip.data.shape} do not match projected "
            f"coarse features {projected.data.shape}")
    return ad.add(projected, x_skip)


# ---------------------------------------------------------------------------
# schedules and network configuration


@dataclass(frozen=True)
class StageSchedule:
    depths: tuple
    channels: tuple
    global_channel_ratios: tuple
    sampling_ratios: tuple
    downsample_strides: tuple

    def __post_init__(self):
        fields = {
            "depths": tuple(int(d) for d in self.depths),
            "channels": tuple(int(c) for c in self.channels),
            "global_channel_ratios": tuple(float(r) for r in self.global_channel_ratios),
            "sampling_ratios": tuple(float(r) for r in self.sampling_ratios),
            "downsample_strides": tuple(int(s) for s in self.downsample_strides),
        }
        for name, value in fields.items():
            object.__setattr__(self, name, value)
        n = len(self.depths)
        if n < 1:
            raise ConfigurationError("schedule needs at least one stage")
        for name, value in fields.items():
            if len(value) != n:
                raise ConfigurationError(
                    f"schedule list {name} has length {len(value)}, expected {n}")
        if any(d < 1 for d in self.depths):
            raise ConfigurationError(f"stage depths must be >= 1, got {self.depths}")
        if any(c2 <= c1 for c1, c2 in zip(self.channels, self.channels[1:])):
            raise ConfigurationError(
                f"encoder channels must increase strictly, got {self.channels}")
        if self.downsample_strides[0] != 1:
            raise ConfigurationError("the first stage cannot be downsampled into")
        if any(s < 2 for s in self.downsample_strides[1:]):
            raise ConfigurationError(
                f"downsample strides must be >= 2, got {self.downsample_strides}")

    @property
    def stages(self) -> int:
        return len(self.depths)


@dataclass(frozen=True)
class NetworkConfig:
    task: str
    schedule: StageSchedule
    input_width: int
    num_classes: int
    neighbor_count: int = 16
    arrangement: str = "parallel"
    fusion: str = "concat"
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigurationError(f"unknown task {self.task!r}")
        if self.num_classes < 2:
            raise ConfigurationError(
                f"need at least 2 classes, got {self.num_classes}")
        if self.input_width < 1:
            raise ConfigurationError(
                f"input width must be >= 1, got {self.input_width}")
        if self.neighbor_count < 1:
            raise ConfigurationError(
                f"neighbor count must be >= 1, got {self.neighbor_count}")

    def block_config(self, stage: int) -> BlockConfig:
        s = self.schedule
        return BlockConfig(s.channels[stage], s.global_channel_ratios[stage],
                           s.sampling_ratios[stage], self.neighbor_count,
                           self.arrangement, self.fusion)


PAPER_DEPTHS = (2, 3, 4, 6, 3)
PAPER_CHANNELS = (32, 64, 128, 256, 512)
PAPER_SAMPLING_RATIOS = (0.0, 1.0 / 64.0, 1.0 / 16.0, 1.0 / 4.0, 1.0)
PAPER_CHANNEL_RATIOS = (0.0, 1.0 / 8.0, 1.0 / 8.0, 1.0 / 4.0, 1.0)
PAPER_NEIGHBORS = 16
PAPER_STRIDES = (1, 4, 4, 4, 4)


def paper_schedule() -> StageSchedule:
    return StageSchedule(PAPER_DEPTHS, PAPER_CHANNELS, PAPER_CHANNEL_RATIOS,
                         PAPER_SAMPLING_RATIOS, PAPER_STRIDES)


def paper_segmentation_config(num_classes: int = 13, input_width: int = 6,
                              seed: int = 0) -> NetworkConfig:
    return NetworkConfig("segmentation", paper_schedule(), input_width,
                         num_classes, PAPER_NEIGHBORS, seed=seed)


def paper_classification_config(num_classes: int = 40, input_width: int = 6,
                                seed: int = 0) -> NetworkConfig:
    return NetworkConfig("classification", paper_schedule(), input_width,
                         num_classes, PAPER_NEIGHBORS, seed=seed)


# ---------------------------------------------------------------------------
# geometry caching


@dataclass
class StageGeometry:
    cloud: PointCloud
    nbr: NeighborIndex
    pivots: Optional[PivotSet]


@dataclass
class NetworkGeometry:
    stages: list
    down: list            # (sample_idx, pool_idx) between stage s and s+1
    up: list              # (idx, weights) from stage s+1 back to stage s


def prepare_geometry(cfg: NetworkConfig, cloud: PointCloud) -> NetworkGeometry:
    """Neighbor tables, pivot sets, and transition indices for one cloud.

    Pure geometry: reusable across forward passes and epochs. The neighbor
    count is capped at each stage's point count.
    """
    sched = cfg.schedule
    stages = []
    down = []
    current = cloud
    for s in range(sched.stages):
        if s > 0:
            stride = sched.downsample_strides[s]
            m = int(np.ceil(current.n / stride))
            sample_idx = fps_indices(current.positions, m)
            pool_idx = pooling_neighbors(
                current, current.positions[sample_idx],
                min(cfg.neighbor_count, current.n))
            down.append((sample_idx, pool_idx))
            labels = None if current.labels is None else current.labels[sample_idx]
            current = PointCloud(current.positions[sample_idx],
                                 current.features[sample_idx], labels)
        nbr = knn(current, min(cfg.neighbor_count, current.n))
        sr = sched.sampling_ratios[s]
        pivots = farthest_point_sample(current, sr) if sr > 0 else None
        stages.append(StageGeometry(current, nbr, pivots))
    up = []
    for s in range(sched.stages - 1):
        up.append(interpolation_geometry(stages[s + 1].cloud.positions,
                                         stages[s].cloud.positions))
    return NetworkGeometry(stages, down, up)


# ---------------------------------------------------------------------------
# networks


class Network:
    """Parameter layout and forward pass for one NetworkConfig."""

    def __init__(self, cfg: NetworkConfig):
        self.cfg = cfg
        sched = cfg.schedule
        c0 = sched.channels[0]
        c_last = sched.channels[-1]
        self.embed = MlpSpec((cfg.input_width, c0, c0), norm=(True, False))
        self.enc_blocks = []
        for s in range(sched.stages):
            stage_cfg = cfg.block_config(s)
            self.enc_blocks.append([
                block_params(f"enc{s}.block{d}", stage_cfg)
                for d in range(sched.depths[s])
            ])
        self.down_specs = [
            MlpSpec((sched.channels[s], sched.channels[s + 1]))
            for s in range(sched.stages - 1)
        ]
        self.decoder = cfg.task == "segmentation" and sched.stages > 1
        if self.decoder:
            self.transform = MlpSpec((c_last, c_last, c_last), norm=(True, False))
            self.dec_blocks = [
                block_params(f"dec{s}.block0", cfg.block_config(s))
                for s in range(sched.stages)
            ]
            self.up_specs = [
                MlpSpec((sched.channels[s + 1], sched.channels[s]))
                for s in range(sched.stages - 1)
            ]
        if cfg.task == "segmentation":
            self.head = MlpSpec((c0, c0, cfg.num_classes), norm=(True, False))
        else:
            hidden = max(1, c_last // 2)
            self.head = MlpSpec((c_last, hidden, cfg.num_classes), norm=(True, False))

    def param_specs(self) -> list:
        specs = mlp_param_specs("embed", self.embed)
        for s, blocks in enumerate(self.enc_blocks):
            for bp in blocks:
                specs += bp.param_specs()
            if s < len(self.down_specs):
                specs += mlp_param_specs(f"down{s}", self.down_specs[s])
        if self.decoder:
            specs += mlp_param_specs("transform", self.transform)
            for s in range(len(self.dec_blocks) - 1, -1, -1):
                specs += self.dec_blocks[s].param_specs()
                if s > 0:
                    specs += mlp_param_specs(f"up{s - 1}", self.up_specs[s - 1])
        specs += mlp_param_specs("head", self.head)
        return specs

    def init_params(self, seed: Optional[int] = None) -> ParamStore:
        return init_params(self.param_specs(),
                           self.cfg.seed if seed is None else seed)

    def param_count(self) -> int:
        return sum(int(np.prod(s.shape)) for s in self.param_specs())

    def _encode(self, params: ParamStore, geometry: NetworkGeometry,
                features: ad.Tensor):
        sched = self.cfg.schedule
        h = mlp_forward(self.embed, params, features, "embed")
        skips = []
        for s in range(sched.stages):
            if s > 0:
                prev_cloud = geometry.stages[s - 1].cloud
                _, h = transition_down(
                    prev_cloud, h, sched.downsample_strides[s],
                    self.cfg.neighbor_count, params, self.down_specs[s - 1],
                    f"down{s - 1}", geometry=geometry.down[s - 1])
            stage = geometry.stages[s]
            for bp in self.enc_blocks[s]:
                h = appt_block_forward(h, stage.cloud, stage.nbr, stage.pivots,
                                       bp.cfg, params, bp=bp, prefix=bp.prefix)
            skips.append(h)
        return h, skips

    def forward(self, params: ParamStore, cloud: PointCloud,
                features: Optional[ad.Tensor] = None,
                geometry: Optional[NetworkGeometry] = None) -> ad.Tensor:
        if cloud.feature_width != self.cfg.input_width:
            raise ConfigurationError(
                f"network expects {self.cfg.input_width} input features, "
                f"cloud has {cloud.feature_width}")
        if geometry is None:
            geometry = prepare_geometry(self.cfg, cloud)
        if features is None:
            features = ad.Tensor(cloud.features)
        h, skips = self._encode(params, geometry, features)

        if self.cfg.task == "classification":
            pooled = _canonical_mean(h, geometry.stages[-1].cloud.positions)
            return mlp_forward(self.head, params, pooled, "head")

        if self.decoder:
            sched = self.cfg.schedule
            h = mlp_forward(self.transform, params, h, "transform")
            top = sched.stages - 1
            stage = geometry.stages[top]
            h = appt_block_forward(h, stage.cloud, stage.nbr, stage.pivots,
                                   self.dec_blocks[top].cfg, params,
                                   bp=self.dec_blocks[top],
                                   prefix=self.dec_blocks[top].prefix)
            for s in range(top - 1, -1, -1):
                h = transition_up(geometry.stages[s + 1].cloud,
                                  geometry.stages[s].cloud, h, skips[s],
                                  params, self.up_specs[s], f"up{s}",
                                  geometry=geometry.up[s])
                stage = geometry.stages[s]
                h = appt_block_forward(h, stage.cloud, stage.nbr, stage.pivots,
                                       self.dec_blocks[s].cfg, params,
                                       bp=self.dec_blocks[s],
                                       prefix=self.dec_blocks[s].prefix)
        return mlp_forward(self.head, params, h, "head")


def _canonical_mean(h: ad.Tensor, positions: np.ndarray) -> ad.Tensor:
    """Global average pool with a fixed reduction order: rows are first
    sorted lexicographically by position, so the pool is bitwise invariant
    to input ordering."""
    order = np.lexsort((positions[:, 2], positions[:, 1], positions[:, 0]))
    gathered = ad.gather_rows(h, order)
    total = ad.sum_along(gathered, axis=0)
    mean = ad.scale(total, 1.0 / h.data.shape[0])
    return ad.reshape(mean, (1, h.data.shape[1]))


def segmentation_forward(cfg: NetworkConfig, params: ParamStore,
                         cloud: PointCloud,
                         features: Optional[ad.Tensor] = None,
                         geometry: Optional[NetworkGeometry] = None) -> ad.Tensor:
    if cfg.task != "segmentation":
        raise ConfigurationError(f"config task is {cfg.task!r}, not segmentation")
    return Network(cfg).forward(params, cloud, features, geometry)


def classification_forward(cfg: NetworkConfig, params: ParamStore,
                           cloud: PointCloud,
                           features: Optional[ad.Tensor] = None,
                           geometry: Optional[NetworkGeometry] = None) -> ad.Tensor:
    if cfg.task != "classification":
        raise ConfigurationError(f"config task is {cfg.task!r}, not classification")
    return Network(cfg).forward(params, cloud, features, geometry)


def param_count(cfg: NetworkConfig) -> int:
    return Network(cfg).param_count()


def full_attention_reference(x: ad.Tensor, params: ParamStore,
                             ap: AttentionParams) -> ad.Tensor:
    """Re-export of the quadratic baseline for oracle pairings."""
    return full_scalar_attention(x, params, ap)


# ---------------------------------------------------------------------------
# configuration (de)serialization


def config_to_dict(cfg: NetworkConfig) -> dict:
    s = cfg.schedule
    return {
        "task": cfg.task,
        "input_width": cfg.input_width,
        "num_classes": cfg.num_classes,
        "neighbor_count": cfg.neighbor_count,
        "arrangement": cfg.arrangement,
        "fusion": cfg.fusion,
        "seed": cfg.seed,
        "schedule": {
            "depths": list(s.depths),
            "channels": list(s.channels),
            "global_channel_ratios": list(s.global_channel_ratios),
            "sampling_ratios": list(s.sampling_ratios),
            "downsample_strides": list(s.downsample_strides),
        },
    }


def config_from_dict(doc: dict) -> NetworkConfig:
    try:
        sched_doc = doc["schedule"]
        schedule = StageSchedule(
            tuple(sched_doc["depths"]),
            tuple(sched_doc["channels"]),
            tuple(sched_doc["global_channel_ratios"]),
            tuple(sched_doc["sampling_ratios"]),
            tuple(sched_doc["downsample_strides"]),
        )
        return NetworkConfig(
            task=doc["task"],
            schedule=schedule,
            input_width=int(doc["input_width"]),
            num_classes=int(doc["num_classes"]),
            neighbor_count=int(doc.get("neighbor_count", 16)),
            arrangement=doc.get("arrangement", "parallel"),
            fusion=doc.get("fusion", "concat"),
            seed=int(doc.get("seed", 0)),
        )
    except KeyError as exc:
        raise ConfigurationError(f"network config missing field {exc}") from None


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, cfg: NetworkConfig, params: ParamStore) -> None:
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "network": config_to_dict(cfg),
        "params": [
            {"name": name, "shape": list(t.data.shape), "kind": params.kind(name)}
            for name, t in params.items()
        ],
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    blob = b"".join(
        np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        for _, t in params.items()
    )
    payload = CHECKPOINT_MAGIC + struct.pack("<Q", len(meta_bytes)) + meta_bytes + blob
    atomic_write_bytes(path, payload)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FileFormatError(f"{path}: not a checkpoint (bad magic bytes)")
    offset = len(CHECKPOINT_MAGIC)
    if len(raw) < offset + 8:
        raise FileFormatError(f"{path}: truncated checkpoint header")
    (meta_len,) = struct.unpack("<Q", raw[offset:offset + 8])
    offset += 8
    if len(raw) < offset + meta_len:
        raise FileFormatError(f"{path}: truncated checkpoint metadata")
    try:
        meta = json.loads(raw[offset:offset + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FileFormatError(f"{path}: corrupt checkpoint metadata: {exc}") from None
    offset += meta_len
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise FileFormatError(
            f"{path}: unsupported format version {meta.get('format_version')}")
    cfg = config_from_dict(meta["network"])
    declared = {s.name: tuple(s.shape) for s in Network(cfg).param_specs()}
    store = ParamStore()
    for entry in meta["params"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in declared or declared[name] != shape:
            raise FileFormatError(
                f"{path}: parameter {name!r} with shape {shape} does not match "
                f"the declared network")
        size = int(np.prod(shape))
        nbytes = size * 8
        if len(raw) < offset + nbytes:
            raise FileFormatError(f"{path}: truncated tensor data for {name!r}")
        values = np.frombuffer(raw, dtype="<f8", count=size, offset=offset)
        offset += nbytes
        if not np.all(np.isfinite(values)):
            raise NumericError(f"{path}: non-finite values in parameter {name!r}")
        store.add(name, values.reshape(shape).astype(np.float64), entry["kind"])
    if offset != len(raw):
        raise FileFormatError(f"{path}: {len(raw) - offset} trailing bytes")
    if set(declared) != set(store.names()):
        missing = sorted(set(declared) - set(store.names()))
        raise FileFormatError(f"{path}: checkpoint missing parameters {missing[:3]}")
    return cfg, store
