"""distrain: saliency-guided occlusion training for small CNN classifiers."""

from .data import Dataset, SynthSpec, augment, load_dir, split, synth_generate
from .distraction import StepDecision, distraction_step, train_distraction
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DegenerateSampleError,
    DistrainError,
    NumericError,
    StateError,
)
from .layers import Model, build_small_cam_net, forward_with_capture, softmax_cross_entropy
from .metrics import (
    EvalReport,
    aggregate,
    basic_metrics,
    confusion,
    evaluate_report,
    paired_t_test,
    random_erase,
    robustness_eval,
)
from .optim import (
    AdamState,
    EarlyStopState,
    TrainConfig,
    TrainResult,
    adam_step,
    early_stop_update,
    train_baseline,
    train_epoch_baseline,
)
from .saliency import (
    HeatMap,
    OcclusionMask,
    grad_cam,
    min_max_norm,
    occlude,
    occlusion_sensitivity,
    threshold_mask,
    upsample_bilinear,
)
from .tensor import Tape, Tensor, backward, finite_difference_oracle

__version__ = "0.1.0"
