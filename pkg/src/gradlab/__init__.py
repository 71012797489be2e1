"""gradlab: a desk-scale laboratory for privacy leakage from gradients.

Train small models, capture their per-step gradients, mount optimization
based inversion attacks against the captures, apply perturbation defenses or
a stochastic bottleneck model extension, and score reconstruction quality.
"""

from .attacks import (
    AttackConfig,
    AttackResult,
    attack_objective,
    attack_preset,
    recover_labels,
    run_attack,
    step_lr_schedule,
    total_variation,
)
from .datasets import Dataset, VictimSet, load_dataset, sample_victims, synthetic
from .defenses import GradientDefense, apply_defense, parse_defense
from .errors import (
    AttackError,
    BuildError,
    DimensionError,
    FormatError,
    GradlabError,
    LabelRecoveryError,
    MetricError,
    NumericError,
    TrainingError,
    UsageError,
)
from .experiment import ExperimentSpec, capture_victim_gradient, render_grid, run_experiment
from .layers import (
    LayerSpec,
    Model,
    ModelSpec,
    PrecodeBlock,
    build_model,
    count_params,
    model_spec,
    precode_loss,
)
from .metrics import MetricsReport, attack_success_rate, build_report, mse, psnr, ssim
from .optim import LBFGS, Adam, GradientCapture, flatten_grads
from .tensor import Tensor, backward, grad_tensors, no_grad, zero_grads
from .training import TrainConfig, analytic_label_from_gradient, train

__version__ = "0.1.0"
