"""Feedback-enabled cascaded classification models (FE-CCM).

Black-box per-task classifiers are composed into a two-layer cascade; the
first layer's outputs are appended to every second-layer input, and training
alternates refitting all classifiers with re-estimating the first-layer
outputs so that they serve the second layer.
"""
from .cascade import (
    Adapter,
    CascadeModel,
    LatentState,
    augment_features,
    drop_adapter,
    infer_first_layer,
    load_model,
    predict,
    predict_dataset,
    save_model,
)
from .classifiers import BINARY, MULTINOMIAL, RIDGE, BuiltinClassifier, ClassifierParams, learn
from .errors import (
    CapabilityError,
    ConfigError,
    ContractError,
    DataError,
    FeccmError,
    NumericError,
)
from .harness import (
    EvalReport,
    SyntheticConfig,
    evaluate,
    generate_synthetic,
    run_all_features_direct,
    run_experiment,
    train_all_features_direct,
    train_base,
)
from .metrics import average_precision
from .optimize import DescentConfig, SurrogateModel, lasso_fit, minimize
from .tasks import MultiTaskDataset, Sample, TaskSpec, load_dataset, partition, save_dataset, split
from .training import (
    FeedbackConfig,
    TrainingTrace,
    feed_forward_step,
    feedback_objective,
    feedback_step,
    initialize_latents,
    select_pi_target_specific,
    train_ccm,
    train_feccm,
)

__version__ = "0.1.0"
