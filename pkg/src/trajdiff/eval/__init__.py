"""Baselines, metrics and the best-of-K evaluation harness."""
from .baselines import (BASELINES, baseline_constant_velocity, baseline_no_motion,
                        baseline_oracle_velocity)
from .harness import (COMBINED, EvalConfig, EvalExample, MetricReport, assign_bucket, baseline_predictor,
                      best_of_k, eval_examples, evaluate, example_metrics, mean_frame_motion_px,
                      model_predictor, sample_model, write_report)
from .metrics import (FrechetResult, ade_fde, difference_variance, frechet_from_moments, frechet_gaussian,
                      frechet_stats, fvmd, fvmd_features, magnitude_weight, orientation_bin,
                      position_variance, pwt, trajectory_variance, vmd)

__all__ = [
    "BASELINES", "COMBINED", "EvalConfig", "EvalExample", "FrechetResult", "MetricReport", "ade_fde",
    "assign_bucket", "baseline_constant_velocity", "baseline_no_motion", "baseline_oracle_velocity",
    "baseline_predictor", "best_of_k", "difference_variance", "eval_examples", "evaluate", "example_metrics",
    "frechet_from_moments", "frechet_gaussian", "frechet_stats", "fvmd", "fvmd_features", "magnitude_weight",
    "mean_frame_motion_px", "model_predictor", "orientation_bin", "position_variance", "pwt", "sample_model",
    "trajectory_variance", "vmd", "write_report",
]
