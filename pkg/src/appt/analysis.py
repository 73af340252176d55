"""Analytic FLOPs accounting, effective-receptive-field maps, and
segmentation metrics.

FLOPs conventions (fixed, documented here; absolute numbers are only
meaningful under these rules, scaling behavior is what the tests pin down):

    multiply-add            2 FLOPs
    linear n x (Cin->Cout)  2 * n * Cin * Cout          (bias not counted)
    softmax                 5 per softmaxed element
    channel normalization   4 per element
    ReLU                    1 per element
    residual / skip add     1 per element
    max pool over k         k per output element
    interpolation (t nbrs)  2 * t per output element
    local attention core    10 * N * k * C   (pairwise q-k+delta: 2, softmax: 5,
                            value+delta: 1, weight product: 1, reduction: 1)
    global attention core   2*N*M*C (logits) + 2*N*M*C (value mix) + 5*N*M (softmax)

Categories: the attention-global bucket holds exactly the pivot-attention
core (every term proportional to the pivot count M); all projections live
in the mlp bucket so the category scales linearly in the sampling ratio.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .errors import InputError, RangeError, UndefinedResultError
from .network import NetworkConfig, Network, round_half_up
from .nn import MlpSpec
from .pointcloud import PointCloud, expected_pivot_count

CATEGORIES = ("attention-local", "attention-global", "mlp", "transitions")


# ---------------------------------------------------------------------------
# FLOPs


@dataclass(frozen=True)
class FlopsRecord:
    layer: str
    kind: str
    category: str
    flops: int


@dataclass
class FlopsReport:
    records: list

    @property
    def total(self) -> int:
        return sum(r.flops for r in self.records)

    def totals_by_category(self) -> dict:
        out = {c: 0 for c in CATEGORIES}
        for r in self.records:
            out[r.category] += r.flops
        return out

    def to_csv(self) -> str:
        lines = ["layer,kind,flops"]
        lines += [f"{r.layer},{r.kind},{r.flops}" for r in self.records]
        lines.append(f"total,total,{self.total}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {
            "total": self.total,
            "by_category": self.totals_by_category(),
            "layers": len(self.records),
        }


def linear_flops(rows: int, c_in: int, c_out: int) -> int:
    return 2 * rows * c_in * c_out


def gpa_core_flops(n: int, m: int, c: int) -> int:
    return 2 * n * m * c + 2 * n * m * c + 5 * n * m


def lga_core_flops(n: int, k: int, c: int) -> int:
    return 10 * n * k * c


class _Counter:
    def __init__(self):
        self.records = []

    def add(self, layer: str, kind: str, category: str, flops: int):
        if flops < 0:
            raise InputError(f"negative FLOPs for {layer}")
        self.records.append(FlopsRecord(layer, kind, category, int(flops)))

    def mlp(self, layer: str, spec: MlpSpec, rows: int, category: str = "mlp"):
        for i in range(spec.layers):
            self.add(f"{layer}.{i}", "linear", category,
                     linear_flops(rows, spec.widths[i], spec.widths[i + 1]))
            if spec.norm[i]:
                self.add(f"{layer}.{i}", "norm", category,
                         4 * rows * spec.widths[i + 1])
            if i < spec.layers - 1:
                self.add(f"{layer}.{i}", "relu", category,
                         rows * spec.widths[i + 1])


def _count_block(counter: _Counter, prefix: str, bp, n: int, k: int, m: int,
                 full_attention: bool):
    cfg = bp.cfg
    c = cfg.channels
    keys = n if full_attention else m

    def local_branch(ap):
        cl = ap.channels
        counter.mlp(f"{prefix}.local.query", ap.query, n)
        counter.mlp(f"{prefix}.local.key", ap.key, n)
        counter.mlp(f"{prefix}.local.value", ap.value, n)
        counter.mlp(f"{prefix}.local.pos", ap.pos_encoder, n * k)
        counter.mlp(f"{prefix}.local.weight_mlp", ap.weight_encoder, n * k)
        counter.add(f"{prefix}.local.core", "attention", "attention-local",
                    lga_core_flops(n, k, cl))

    def global_branch(ap):
        cg = ap.channels
        counter.mlp(f"{prefix}.global.query", ap.query, n)
        counter.mlp(f"{prefix}.global.key", ap.key, keys)
        counter.mlp(f"{prefix}.global.value", ap.value, keys)
        counter.add(f"{prefix}.global.core", "attention", "attention-global",
                    gpa_core_flops(n, keys, cg))

    if cfg.arrangement == "serial":
        local_branch(bp.local)
        counter.add(f"{prefix}.residual_local", "residual", "mlp", n * c)
        if bp.global_ is not None:
            global_branch(bp.global_)
            counter.add(f"{prefix}.residual_global", "residual", "mlp", n * c)
    else:
        if bp.local is not None:
            local_branch(bp.local)
        if bp.global_ is not None:
            global_branch(bp.global_)
        if bp.fuse_local is not None:
            counter.mlp(f"{prefix}.fuse_local", bp.fuse_local, n)
            counter.mlp(f"{prefix}.fuse_global", bp.fuse_global, n)
            counter.add(f"{prefix}.fuse_sum", "add", "mlp", n * c)
        counter.add(f"{prefix}.residual", "residual", "mlp", n * c)
    counter.mlp(f"{prefix}.ffn", bp.ffn, n)
    counter.add(f"{prefix}.residual_ffn", "residual", "mlp", n * c)


def count_flops(cfg: NetworkConfig, n_points: int,
                full_attention: bool = False) -> FlopsReport:
    """Analytic per-layer FLOPs for one forward pass on n_points points.

    full_attention=True replaces every pivot attention by dense attention
    over all points at that stage's resolution (the quadratic baseline).
    """
    if n_points < 1:
        raise RangeError(f"point count must be >= 1, got {n_points}")
    net = Network(cfg)
    sched = cfg.schedule
    counter = _Counter()

    stage_n = []
    n = n_points
    for s in range(sched.stages):
        if s > 0:
            n = int(np.ceil(n / sched.downsample_strides[s]))
        stage_n.append(n)

    counter.mlp("embed", net.embed, n_points)
    for s in range(sched.stages):
        n_s = stage_n[s]
        k_s = min(cfg.neighbor_count, n_s)
        m_s = expected_pivot_count(sched.sampling_ratios[s], n_s)
        if s > 0:
            counter.mlp(f"down{s - 1}", net.down_specs[s - 1], stage_n[s - 1],
                        category="transitions")
            counter.add(f"down{s - 1}.pool", "maxpool", "transitions",
                        k_s * n_s * sched.channels[s])
        for d, bp in enumerate(net.enc_blocks[s]):
            _count_block(counter, f"enc{s}.block{d}", bp, n_s, k_s, m_s,
                         full_attention)
    if net.decoder:
        top = sched.stages - 1
        counter.mlp("transform", net.transform, stage_n[top])
        _count_block(counter, f"dec{top}.block0", net.dec_blocks[top],
                     stage_n[top], min(cfg.neighbor_count, stage_n[top]),
                     expected_pivot_count(sched.sampling_ratios[top], stage_n[top]),
                     full_attention)
        for s in range(top - 1, -1, -1):
            n_f, c_c, c_f = stage_n[s], sched.channels[s + 1], sched.channels[s]
            t = min(3, stage_n[s + 1])
            counter.add(f"up{s}.interp", "interpolate", "transitions",
                        2 * t * n_f * c_c)
            counter.mlp(f"up{s}", net.up_specs[s], n_f, category="transitions")
            counter.add(f"up{s}.skip", "residual", "transitions", n_f * c_f)
            _count_block(counter, f"dec{s}.block0", net.dec_blocks[s], n_f,
                         min(cfg.neighbor_count, n_f),
                         expected_pivot_count(sched.sampling_ratios[s], n_f),
                         full_attention)
    if cfg.task == "classification":
        counter.add("pool", "mean", "mlp",
                    stage_n[-1] * sched.channels[-1] + sched.channels[-1])
        counter.mlp("head", net.head, 1)
    else:
        counter.mlp("head", net.head, n_points)
    return FlopsReport(counter.records)


# ---------------------------------------------------------------------------
# effective receptive field


@dataclass
class ErfMap:
    """Per-input-point gradient mass for one output point of interest."""

    point_index: int
    mass: np.ndarray
    total: float

    def __post_init__(self):
        mass = np.asarray(self.mass, dtype=np.float64)
        self.mass = mass
        if mass.ndim != 1:
            raise InputError(f"mass must be 1-D, got shape {mass.shape}")
        if mass.size and mass.min() < 0:
            raise InputError("gradient mass must be nonnegative")
        if abs(self.total - float(mass.sum())) > 1e-9 * max(1.0, float(mass.sum())):
            raise InputError("total inconsistent with per-point mass")

    def to_csv(self, cloud: PointCloud) -> str:
        lines = ["point_index,x,y,z,mass"]
        for i in range(self.mass.size):
            x, y, z = (format(float(v), ".17g") for v in cloud.positions[i])
            lines.append(f"{i},{x},{y},{z},{format(float(self.mass[i]), '.17g')}")
        return "\n".join(lines) + "\n"


def erf_map(forward: Callable[[ad.Tensor], ad.Tensor], cloud: PointCloud,
            point_index: int) -> ErfMap:
    """Gradient mass of every input point on one output point.

    `forward` maps the (N,C) input-feature tensor to a row-aligned output;
    a unit gradient is seeded on every output channel of the point of
    interest and pulled back to the input features; mass = row-wise L2 norm
    of the input gradient.
    """
    if not 0 <= point_index < cloud.n:
        raise RangeError(
            f"point index {point_index} out of range [0, {cloud.n})")
    x = ad.Tensor(cloud.features, requires_grad=True)
    y = forward(x)
    seed = np.zeros_like(y.data)
    seed[point_index, :] = 1.0
    ad.backward(y, seed)
    mass = np.sqrt((x.grad * x.grad).sum(axis=1))
    return ErfMap(point_index, mass, float(mass.sum()))


def network_erf_map(cfg: NetworkConfig, params, cloud: PointCloud,
                    point_index: int, geometry=None) -> ErfMap:
    net = Network(cfg)
    if geometry is None:
        from .network import prepare_geometry
        geometry = prepare_geometry(cfg, cloud)
    return erf_map(
        lambda x: net.forward(params, cloud, features=x, geometry=geometry),
        cloud, point_index)


def erf_radius(emap: ErfMap, cloud: PointCloud, coverage: float) -> float:
    """Smallest radius around the point of interest whose enclosed points
    hold at least `coverage` of the total gradient mass."""
    if not 0.0 < coverage <= 1.0:
        raise RangeError(f"coverage must lie in (0, 1], got {coverage}")
    if emap.mass.size != cloud.n:
        raise InputError(
            f"map covers {emap.mass.size} points, cloud has {cloud.n}")
    total = float(emap.mass.sum())
    if total <= 0.0:
        raise UndefinedResultError("gradient mass is zero everywhere")
    poi = cloud.positions[emap.point_index]
    d = np.sqrt(((cloud.positions - poi) ** 2).sum(axis=1))
    p = cloud.positions
    order = np.lexsort((p[:, 2], p[:, 1], p[:, 0], d))
    cum = np.cumsum(emap.mass[order])
    threshold = coverage * total - 1e-12 * total
    hit = int(np.argmax(cum >= threshold))
    return float(d[order[hit]])


# ---------------------------------------------------------------------------
# segmentation / classification metrics


@dataclass
class MetricsReport:
    per_class_iou: list
    miou: float
    macc: float
    oa: float
    confusion: np.ndarray

    def to_json(self) -> dict:
        return {
            "per_class_iou": [None if v is None else float(v)
                              for v in self.per_class_iou],
            "miou": self.miou,
            "macc": self.macc,
            "oa": self.oa,
            "confusion": self.confusion.tolist(),
        }

    def to_csv(self) -> str:
        lines = ["metric,class,value"]
        for c, v in enumerate(self.per_class_iou):
            lines.append(f"iou,{c},{'' if v is None else repr(float(v))}")
        lines.append(f"miou,all,{self.miou!r}")
        lines.append(f"macc,all,{self.macc!r}")
        lines.append(f"oa,all,{self.oa!r}")
        return "\n".join(lines) + "\n"


def segmentation_metrics(pred, labels, num_classes: int) -> MetricsReport:
    """Per-class IoU (classes absent from prediction and truth excluded
    from the mean), mean recall over classes present in the truth, and
    overall accuracy, all from one confusion matrix."""
    pred = np.asarray(pred, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if pred.shape != labels.shape or pred.ndim != 1:
        raise InputError(
            f"predictions {pred.shape} and labels {labels.shape} must be "
            f"equal-length vectors")
    if num_classes < 1:
        raise InputError(f"need at least one class, got {num_classes}")
    for name, arr in (("prediction", pred), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise InputError(
                f"{name} values must lie in [0, {num_classes}), "
                f"got range [{arr.min()}, {arr.max()}]")
    confusion = np.bincount(labels * num_classes + pred,
                            minlength=num_classes * num_classes)
    confusion = confusion.reshape(num_classes, num_classes)
    tp = np.diag(confusion).astype(np.float64)
    support = confusion.sum(axis=1).astype(np.float64)
    predicted = confusion.sum(axis=0).astype(np.float64)
    union = support + predicted - tp

    per_class = [None if union[c] == 0 else float(tp[c] / union[c])
                 for c in range(num_classes)]
    included = [v for v in per_class if v is not None]
    miou = float(np.mean(included)) if included else 0.0
    recalls = [tp[c] / support[c] for c in range(num_classes) if support[c] > 0]
    macc = float(np.mean(recalls)) if recalls else 0.0
    oa = float(tp.sum() / confusion.sum()) if confusion.sum() else 0.0
    return MetricsReport(per_class, miou, macc, oa, confusion)
