"""The three attention operators.

* full_scalar_attention: softmax(QK^T / sqrt(C)) V over all pairs; the
  quadratic baseline the pivot variant is checked against.
* lga_forward: local group attention, vector attention over each point's k
  nearest neighbors with relative position encoding; per-channel weights.
* gpa_forward: global pivot attention, scalar attention where every point
  queries only the pivot rows; cost Θ(N·M·C) instead of Θ(N²·C).

Query/key/value maps are single affine layers; the position encoder is a
two-layer 3->C MLP and the weight encoder a two-layer C->C MLP. The scalar
attentions share the 1/sqrt(C) logit scaling so that pivots == all points
reproduces the full-attention baseline exactly (up to reassociation).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, RangeError
from .nn import MlpSpec, ParamStore, mlp_forward, mlp_param_specs
from .pointcloud import NeighborIndex, PointCloud


@dataclass(frozen=True)
class AttentionParams:
    """Parameter-group descriptor binding MLP shapes to a store prefix.

    query/key/value map C->C; pos_encoder (local attention only) maps the
    3-vector offset to C; weight_encoder (local only) maps C->C logits.
    """

    channels: int
    prefix: str
    query: MlpSpec = field(init=False)
    key: MlpSpec = field(init=False)
    value: MlpSpec = field(init=False)
    pos_encoder: MlpSpec | None = None
    weight_encoder: MlpSpec | None = None

    def __post_init__(self):
        c = self.channels
        if c < 1:
            raise ConfigurationError(f"attention needs >= 1 channel, got {c}")
        object.__setattr__(self, "query", MlpSpec((c, c)))
        object.__setattr__(self, "key", MlpSpec((c, c)))
        object.__setattr__(self, "value", MlpSpec((c, c)))
        if self.pos_encoder is not None and (
                self.pos_encoder.in_width != 3 or self.pos_encoder.out_width != c):
            raise ConfigurationError(
                f"position encoder must map 3->{c}, got {self.pos_encoder.widths}")
        if self.weight_encoder is not None and (
                self.weight_encoder.in_width != c or self.weight_encoder.out_width != c):
            raise ConfigurationError(
                f"weight encoder must map {c}->{c}, got {self.weight_encoder.widths}")

    def param_specs(self) -> list:
        specs = []
        specs += mlp_param_specs(f"{self.prefix}.query", self.query)
        specs += mlp_param_specs(f"{self.prefix}.key", self.key)
        specs += mlp_param_specs(f"{self.prefix}.value", self.value)
        if self.pos_encoder is not None:
            specs += mlp_param_specs(f"{self.prefix}.pos", self.pos_encoder)
        if self.weight_encoder is not None:
            specs += mlp_param_specs(f"{self.prefix}.weight_mlp", self.weight_encoder)
        return specs


def scalar_attention_params(channels: int, prefix: str) -> AttentionParams:
    """Q/K/V projections only (full attention and the pivot variant)."""
    return AttentionParams(channels, prefix)


def local_attention_params(channels: int, prefix: str) -> AttentionParams:
    c = channels
    return AttentionParams(
        c, prefix,
        pos_encoder=MlpSpec((3, c, c), norm=(True, False)),
        weight_encoder=MlpSpec((c, c, c), norm=(True, False)),
    )


def full_scalar_attention(x: ad.Tensor, params: ParamStore,
                          ap: AttentionParams) -> ad.Tensor:
    """softmax(QK^T / sqrt(C)) V over all N points; weight map = identity."""
    q = mlp_forward(ap.query, params, x, f"{ap.prefix}.query")
    k = mlp_forward(ap.key, params, x, f"{ap.prefix}.key")
    v = mlp_forward(ap.value, params, x, f"{ap.prefix}.value")
    logits = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(ap.channels))
    weights = ad.softmax(logits, axis=1)
    return ad.matmul(weights, v)


def lga_forward(x_l: ad.Tensor, cloud: PointCloud, nbr: NeighborIndex,
                params: ParamStore, ap: AttentionParams) -> ad.Tensor:
    """Vector attention over each point's neighbor group.

    Per pair (i, j): delta_ij = pos_encoder(p_i - p_j); per-channel logits
    weight_encoder(Q_i - K_j + delta_ij); softmax over the k neighbors
    independently per channel; output_i = sum_j w_ij ⊙ (V_j + delta_ij),
    accumulated in neighbor-row order.
    """
    n = x_l.data.shape[0]
    if nbr.n != n or nbr.n != cloud.n:
        raise ConfigurationError(
            f"neighbor table rows ({nbr.n}) must match cloud/feature rows "
            f"({cloud.n}/{n})")
    if nbr.table.size and nbr.table.max() >= n:
        raise RangeError(f"neighbor index {nbr.table.max()} out of range [0, {n})")
    if ap.pos_encoder is None or ap.weight_encoder is None:
        raise ConfigurationError("local attention needs pos and weight encoders")

    q = mlp_forward(ap.query, params, x_l, f"{ap.prefix}.query")
    k = mlp_forward(ap.key, params, x_l, f"{ap.prefix}.key")
    v = mlp_forward(ap.value, params, x_l, f"{ap.prefix}.value")

    k_nbr = ad.gather_rows(k, nbr.table)      # (N, k, C)
    v_nbr = ad.gather_rows(v, nbr.table)

    rel = cloud.positions[:, None, :] - cloud.positions[nbr.table]   # (N, k, 3)
    delta = mlp_forward(ap.pos_encoder, params, ad.Tensor(rel),
                        f"{ap.prefix}.pos")                          # (N, k, C)

    q_rows = ad.reshape(q, (n, 1, ap.channels))
    pre = ad.add(ad.sub(q_rows, k_nbr), delta)
    logits = mlp_forward(ap.weight_encoder, params, pre, f"{ap.prefix}.weight_mlp")
    weights = ad.softmax(logits, axis=1)      # per channel over neighbors
    return ad.sum_along(ad.mul(weights, ad.add(v_nbr, delta)), axis=1)


def gpa_forward(x_g: ad.Tensor, x_pivot: ad.Tensor, params: ParamStore,
                ap: AttentionParams) -> ad.Tensor:
    """Scalar attention of all points against the pivot rows only.

    No positional encoding; logits QK^T / sqrt(C), row softmax over the M
    pivots, output = weights · V.
    """
    if x_pivot.data.shape[0] < 1:
        raise ConfigurationError("pivot attention needs at least one pivot row")
    q = mlp_forward(ap.query, params, x_g, f"{ap.prefix}.query")
    k = mlp_forward(ap.key, params, x_pivot, f"{ap.prefix}.key")
    v = mlp_forward(ap.value, params, x_pivot, f"{ap.prefix}.value")
    logits = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(ap.channels))
    weights = ad.softmax(logits, axis=1)
    return ad.matmul(weights, v)
