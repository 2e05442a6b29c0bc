from .learned import (
    AlignmentScorer,
    CapabilityRegressor,
    DiscriminatorScorer,
    RewardScorer,
    TrainingError,
    bt_probability,
    nearest_mean_oracle,
)
from .loss_weight import LossWeightSchedule, loss_weight
from .oracles import AlignmentOracle, ConstantEvaluator, QualityOracle
from .io import load_evaluator, save_evaluator

__all__ = [
    "AlignmentOracle",
    "AlignmentScorer",
    "CapabilityRegressor",
    "ConstantEvaluator",
    "DiscriminatorScorer",
    "LossWeightSchedule",
    "QualityOracle",
    "RewardScorer",
    "TrainingError",
    "bt_probability",
    "load_evaluator",
    "loss_weight",
    "nearest_mean_oracle",
    "save_evaluator",
]
