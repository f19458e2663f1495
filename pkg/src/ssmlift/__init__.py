"""2D-to-3D human pose lifting with a selective state space sequence core."""

from .errors import (
    AlignmentError,
    ConfigError,
    DegenerateInputError,
    DimensionError,
    EvaluationError,
    NumericalFailure,
    ParameterError,
    ParseError,
    SSMLiftError,
    StructureError,
    ValidationError,
)
from .numerics import Tensor, backward, grad_check, no_grad
from .ssm_core import (
    DiscretizedStep,
    ScanPair,
    SelectiveSSMParams,
    discretize_zoh,
    scan_parallel,
    scan_sequential,
    selective_ssm_forward,
)
from .scan_orders import (
    ScanLabel,
    ScanOrder,
    Skeleton,
    apply_order,
    global_spatial_order,
    h36m17_skeleton,
    invert_order,
    local_spatial_order,
    reverse_order,
    temporal_order,
    unidirectional_variant,
)
from .model import (
    BranchSet,
    ModelConfig,
    PoseLifter,
    flip_inference,
    load_checkpoint,
    mac_estimate,
    model_forward,
    parameter_breakdown,
    parameter_count,
    save_checkpoint,
)
from .losses_metrics import (
    EvalReport,
    LossWeights,
    metric_mpjpe,
    metric_mpjve,
    metric_p_mpjpe,
    mpjpe_loss,
    mpjve_loss,
    reproj_2d_loss,
    tc_loss,
    total_loss,
)
from .data_io import (
    Clip,
    SequenceRecord,
    SyntheticConfig,
    flip_augment,
    load_dataset,
    make_clips,
    save_dataset,
    synth_generate,
)

__version__ = "0.1.0"
