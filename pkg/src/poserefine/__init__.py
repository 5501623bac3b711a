"""Category-level 9DoF object pose refinement and tracking on point clouds.

Given an initial pose/size estimate and a partial observation, a small
Siamese point encoder with disentangled rotation and translation/size heads
predicts the relative transformation to the true pose; applied iteratively it
refines estimates and tracks objects across frames. Ships with a synthetic
scene generator, a full metric suite and closed-form geometric oracles.
"""

from .geometry import (
    Pose9D,
    PoseDelta,
    Rotation,
    SymmetrySpec,
    compose_pose,
    focalize,
    rotation_from_6d,
    rotation_geodesic_deg,
    sym_align_rotation,
    transform_points,
    umeyama,
)
from .priors import ShapePrior, axes_prior, bbox_corners_prior, fps, mean_shape, normalize_prior
from .synthdata import (
    AugmentSpec,
    GenConfig,
    PerturbSpec,
    SceneSample,
    augment_depth,
    ball_sample,
    gen_dataset,
    gen_instance,
    perturb_pose,
    read_dataset,
    render_partial,
    write_dataset,
)
from .templates import CategorySpec, default_categories
from .autodiff import DiffTensor
from .network import (
    RefinerModel,
    build_model,
    encoder_forward,
    forward_refine,
    load_model,
    rot_head_forward,
    save_model,
    ts_head_forward,
)
from .losses import LossBreakdown, loss_pm, loss_rot, loss_s, loss_t, total_loss
from .train import TrainConfig, load_checkpoint, lr_schedule, optimizer_step, save_checkpoint, train
from .metrics import (
    EvalRecord,
    MetricReport,
    add_metric,
    adds_metric,
    auc_add,
    iou3d,
    map_sweep,
    pose_accuracy,
    tracking_report,
)
from .track import MotionSpec, Sequence, TrackConfig, bench_throughput, gen_sequence, track_sequence

__version__ = "0.1.0"
