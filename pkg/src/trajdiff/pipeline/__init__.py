"""Data-engineering stages: filtering, shots, query selection, stabilization, statistics."""
from .filters import (
    PipelineError,
    QualityReport,
    SamplingWeights,
    detect_shots,
    dynamic_range_filter,
    dynamic_range_ratio,
    inverse_distance_probabilities,
    sample_query_points,
    sample_video_query_points,
    sampling_weights,
    select_background_tracks,
    select_query_frame,
    select_query_frames,
    shot_segments,
)
from .stabilize import (
    HomographySeq,
    dlt_homography,
    estimate_stabilization,
    reprojection_error,
    stabilize_tracks,
)
from .stats import MotionStats, motion_statistics, write_stats

__all__ = [
    "PipelineError", "QualityReport", "SamplingWeights", "detect_shots", "dynamic_range_filter",
    "dynamic_range_ratio", "inverse_distance_probabilities", "sample_query_points",
    "sample_video_query_points", "sampling_weights", "select_background_tracks", "select_query_frame",
    "select_query_frames", "shot_segments", "HomographySeq", "dlt_homography", "estimate_stabilization",
    "reprojection_error", "stabilize_tracks", "MotionStats", "motion_statistics", "write_stats",
]
