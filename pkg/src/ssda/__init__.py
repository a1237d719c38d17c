"""Decoupled two-stage semi-supervised domain adaptation.

Stage I trains on labeled source and unlabeled target samples (supervised
cross-entropy plus threshold-gated consistency over weak/strong views);
stage II adapts the resulting model to the target domain alone with a
consistency-learning mean teacher (anchor supervision, soft distillation,
EMA teacher updates).  Ships with a synthetic covariate-shift benchmark and
a CLI for experiments and ablations.
"""

from .augment import AugOp, AugPolicy, augment_batch, default_policy, strong, weak
from .data import (
    Benchmark,
    BatchStream,
    DatasetError,
    Sample,
    SamplePool,
    ShiftSpec,
    SsdaSplit,
    generate_shifted_domains,
    load_delimited_dataset,
    sample_anchors,
    save_delimited_dataset,
)
from .losses import (
    CompositeLoss,
    HyperParams,
    LossValue,
    composite_gradients,
    consistency_unlabeled,
    distillation,
    ssl_composite,
    supervised_source,
    supervised_target,
    uda_composite,
)
from .metrics import (
    ExperimentReport,
    PseudoLabelStats,
    accuracy,
    compare_runs,
    per_class_accuracy,
    pseudo_label_report,
)
from .model import (
    Arch,
    CheckpointError,
    ForwardCache,
    Gradients,
    ModelParams,
    Prediction,
    ShapeError,
    TrainingFault,
    backward,
    ema_update,
    forward,
    forward_batch,
    init_params,
    load_params,
    save_params,
    sgd_step,
)
from .training import (
    PRESETS,
    TrainConfig,
    TrainState,
    apply_preset,
    load_checkpoint,
    run_experiment,
    save_checkpoint,
    train_stage1,
    train_stage2,
)

__version__ = "0.1.0"
