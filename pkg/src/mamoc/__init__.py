"""Masked motion correction for 3D MR volumes.

A self-supervised correction model (windowed-attention U-Net with an
output gate) trained by masked reconstruction, fine-tuned on paired
motion-affected/clean scans, and applied through averaged masked
test-time passes; plus the synthetic data pipeline and quality metrics
used to exercise it end to end.
"""

from . import errors
from .forge import (
    MotionEvent,
    MotionTrajectory,
    PhantomSpec,
    generate_phantom,
    group_energy_balance,
    load_dataset,
    make_paired_dataset,
    sample_trajectory,
    save_dataset,
    simulate_motion,
)
from .g2l import (
    FeatureGrid,
    G2LConfig,
    g2l_block_forward,
    global_stage,
    local_attention,
    window_merge,
    window_partition,
)
from .inference import InferenceConfig, correct_batchlike, correct_scan
from .masking import (
    BlockMask,
    MaskSpec,
    apply_mask,
    mask_from_bytes,
    mask_to_bytes,
    mask_to_voxel_grid,
    sample_block_mask,
)
from .metrics import (
    DiceScores,
    SsimConfig,
    cnr,
    dice,
    dice_improvement,
    psnr,
    snr,
    ssim,
)
from .network import (
    Checkpoint,
    ModelConfig,
    ModelParameters,
    forward_batch,
    gate_forward,
    init_parameters,
    load_checkpoint,
    mamoc_forward,
    parameter_shapes,
    patch_expand,
    patch_merge,
    save_checkpoint,
)
from .training import (
    OptimizerState,
    StepStats,
    TrainConfig,
    backward,
    finetune_step,
    finite_difference_check,
    l2_loss,
    lion_step,
    pretrain_step,
)
from .volume_io import (
    DatasetSplit,
    LabelVolume,
    SubjectRecord,
    Volume,
    load_nifti,
    load_scan,
    load_volume,
    normalize_least_squares,
    resample_volume,
    save_nifti,
    save_volume,
    split_by_subject,
)

__version__ = "0.1.0"
