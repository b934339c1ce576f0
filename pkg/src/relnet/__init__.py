"""Multi-task learning with a Kronecker-structured task-relationship prior.

The package trains one classifier per task with shared trunk layers and
task-specific layer stacks, placing a tensor normal prior over each
stacked parameter tensor.  Alternating between SGD on the network and
closed-form covariance refits learns how strongly tasks relate, and the
task-mode covariance factor doubles as an interpretable relationship
matrix.
"""

from .data import (
    DatasetError,
    MultiTaskDataset,
    SplitError,
    SplitSpec,
    SyntheticSpec,
    generate_synthetic,
    kfold,
    load_csv,
    load_manifest,
    sample_task_data,
    split,
    write_csv,
    write_manifest,
)
from .network import (
    Gradients,
    MultiTaskNet,
    TaskLayerStack,
    accuracy,
    backward,
    cross_entropy,
    cross_entropy_from_logits,
    forward,
    init_network,
    load_checkpoint,
    logits,
    predict,
    prior_gradient,
    prior_penalty,
    save_checkpoint,
    softmax,
    task_log_loss,
)
from .tensor import (
    fold,
    kronecker,
    matricize,
    mode_product,
    vectorize,
)
from .tensor_normal import (
    EstimationError,
    FlipFlopResult,
    KronCovariance,
    SpdFactor,
    TensorNormal,
    flip_flop_mle,
    log_pdf,
    mahalanobis,
    mle_mean,
    normalize_identifiable,
    sample,
)
from .trainer import (
    CovarianceState,
    EpochRecord,
    OpCounter,
    OptimizerState,
    TrainConfig,
    TrainReport,
    TrainingError,
    extract_relationship,
    objective,
    sgd_epoch,
    train,
    update_covariances,
)

__version__ = "0.1.0"

__all__ = [
    "CovarianceState",
    "DatasetError",
    "EpochRecord",
    "EstimationError",
    "FlipFlopResult",
    "Gradients",
    "KronCovariance",
    "MultiTaskDataset",
    "MultiTaskNet",
    "OpCounter",
    "OptimizerState",
    "SpdFactor",
    "SplitError",
    "SplitSpec",
    "SyntheticSpec",
    "TaskLayerStack",
    "TensorNormal",
    "TrainConfig",
    "TrainReport",
    "TrainingError",
    "accuracy",
    "backward",
    "cross_entropy",
    "cross_entropy_from_logits",
    "extract_relationship",
    "flip_flop_mle",
    "fold",
    "forward",
    "generate_synthetic",
    "init_network",
    "kfold",
    "kronecker",
    "load_checkpoint",
    "load_csv",
    "load_manifest",
    "log_pdf",
    "logits",
    "mahalanobis",
    "matricize",
    "mle_mean",
    "mode_product",
    "normalize_identifiable",
    "objective",
    "predict",
    "prior_gradient",
    "prior_penalty",
    "sample",
    "sample_task_data",
    "save_checkpoint",
    "sgd_epoch",
    "softmax",
    "split",
    "task_log_loss",
    "train",
    "update_covariances",
    "vectorize",
    "write_csv",
    "write_manifest",
    "__version__",
]
