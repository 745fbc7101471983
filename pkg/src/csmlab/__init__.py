"""Concept sidechannel models: dual-mode inference, independence scoring,
divergence-regularized training, synthetic benchmarks and an experiment CLI."""

from .autodiff import Tensor, backward, stop_gradient
from .checkpoint import load_checkpoint, save_checkpoint
from .datasets import (
    SyntheticDataset,
    export_dataset,
    gen_dnf,
    gen_latent,
    gen_symbolic_addition,
    gen_xor,
    import_dataset,
    regenerate,
)
from .metrics import (
    ParetoPoint,
    SisReport,
    accuracy_score,
    divergence,
    hoeffding_interval,
    inspect_linear_weights,
    intervenability_curve,
    pareto_front,
    sis_score,
    threshold_predictions,
)
from .model import (
    CsmModel,
    compute_marginal_prior,
    infer_bottleneck,
    infer_default,
    predict_concepts,
    predict_sidechannel,
)
from .optim import AdamW
from .rng import RngStream
from .training import TrainConfig, TrainHistory, fit, training_loss
from .zoo import build_model

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "CsmModel",
    "ParetoPoint",
    "RngStream",
    "SisReport",
    "SyntheticDataset",
    "Tensor",
    "TrainConfig",
    "TrainHistory",
    "accuracy_score",
    "backward",
    "build_model",
    "compute_marginal_prior",
    "divergence",
    "export_dataset",
    "fit",
    "gen_dnf",
    "gen_latent",
    "gen_symbolic_addition",
    "gen_xor",
    "hoeffding_interval",
    "import_dataset",
    "infer_bottleneck",
    "infer_default",
    "inspect_linear_weights",
    "intervenability_curve",
    "load_checkpoint",
    "pareto_front",
    "predict_concepts",
    "predict_sidechannel",
    "regenerate",
    "save_checkpoint",
    "sis_score",
    "stop_gradient",
    "threshold_predictions",
    "training_loss",
]
