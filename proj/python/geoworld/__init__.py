"""Geometry-enhanced video world model: Python bindings over the C++ core."""

from ._geoworld import (
    Checkpoint,
    ConfigError,
    FormatError,
    GeoworldError,
    GroundingError,
    InvalidInputError,
    MissingInputError,
    NumericalError,
    Rollout,
    absrel,
    delta_acc,
    euler_sample,
    evaluate,
    extract_actions,
    gate_decision,
    generate_dataset,
    geodesic_distance,
    load_checkpoint,
    predict,
    project_correspondence,
    psnr,
    random_rollout,
    read_rollout,
    rollout_from_config,
    rotation_exp,
    rotation_log,
    run_config,
    slerp,
    track_delta_avg,
    train,
    write_rollout,
)

__all__ = [name for name in dir() if not name.startswith("_")]
