"""Conditional treatment effect estimation with marginal and projection balancing."""

from ._mbpb import (
    ConfigError,
    DataError,
    Dataset,
    Dgp,
    EvaluationError,
    LossBreakdown,
    RctOutcomes,
    ShapeError,
    TrainConfig,
    TrainedModel,
    TrainingError,
    complete_propensity,
    config_text,
    gen_case_study,
    gen_msm,
    gradient_check,
    inject_confounding,
    load_csv,
    load_model,
    mb_counterexample,
    run_experiment,
    sqrt_pehe,
    train,
    verify,
)

__all__ = [name for name in dir() if not name.startswith("_")]
