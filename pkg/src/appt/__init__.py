"""Point transformer with parallel local/global attention branches.

Library layout:

    autodiff    float64 tensors, reverse-mode gradients, finite differences
    nn          parameter store, MLP specs, seeded initialization
    pointcloud  cloud container, FPS, kNN, synthetic shapes, text format
    attention   full scalar attention, local group attention, pivot attention
    network     blocks, transitions, schedules, networks, checkpoints
    analysis    FLOPs accounting, receptive-field maps, metrics
    training    cross-entropy, SGD with momentum, seeded epoch loop
    cli         gen / train / eval / erf / flops / selftest commands
"""

from .autodiff import (Tensor, backward, finite_diff_grad, gradient_rel_error,
                       matmul, softmax)
from .nn import MlpSpec, ParamStore, init_params, mlp_forward, mlp_param_specs
from .pointcloud import (NeighborIndex, PivotSet, PointCloud,
                         farthest_point_sample, generate_synthetic, knn,
                         load_cloud, save_cloud)
from .attention import (AttentionParams, full_scalar_attention, gpa_forward,
                        lga_forward, local_attention_params,
                        scalar_attention_params)
from .network import (BlockConfig, NetworkConfig, StageSchedule,
                      appt_block_forward, channel_split, classification_forward,
                      fuse, load_checkpoint, param_count,
                      paper_classification_config, paper_segmentation_config,
                      prepare_geometry, save_checkpoint, segmentation_forward,
                      transition_down, transition_up, Network)
from .analysis import (ErfMap, FlopsReport, MetricsReport, count_flops,
                       erf_map, erf_radius, network_erf_map,
                       segmentation_metrics)
from .training import (DatasetSpec, OptimizerState, TrainConfig, TrainResult,
                       cross_entropy, sgd_step, train_loop)
from .rng import SplitMix64

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "finite_diff_grad", "gradient_rel_error",
    "matmul", "softmax",
    "MlpSpec", "ParamStore", "init_params", "mlp_forward", "mlp_param_specs",
    "NeighborIndex", "PivotSet", "PointCloud", "farthest_point_sample",
    "generate_synthetic", "knn", "load_cloud", "save_cloud",
    "AttentionParams", "full_scalar_attention", "gpa_forward", "lga_forward",
    "local_attention_params", "scalar_attention_params",
    "BlockConfig", "NetworkConfig", "StageSchedule", "appt_block_forward",
    "channel_split", "classification_forward", "fuse", "load_checkpoint",
    "param_count", "paper_classification_config", "paper_segmentation_config",
    "prepare_geometry", "save_checkpoint", "segmentation_forward",
    "transition_down", "transition_up", "Network",
    "ErfMap", "FlopsReport", "MetricsReport", "count_flops", "erf_map",
    "erf_radius", "network_erf_map", "segmentation_metrics",
    "DatasetSpec", "OptimizerState", "TrainConfig", "TrainResult",
    "cross_entropy", "sgd_step", "train_loop",
    "SplitMix64",
]
