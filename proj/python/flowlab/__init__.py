"""Flow-matching geometry laboratory: python bindings over the C++ core."""

from _flowlab import (
    compute_shift,
    conditioning_curve,
    default_config_json,
    effective_rank,
    excess_kurtosis,
    generate,
    geometry_report,
    make_grid,
    mmd,
    pca_spectrum,
    sample_run,
    sample_time,
    time_shift,
    train_run,
    twonn,
)

__all__ = [
    "compute_shift",
    "conditioning_curve",
    "default_config_json",
    "effective_rank",
    "excess_kurtosis",
    "generate",
    "geometry_report",
    "make_grid",
    "mmd",
    "pca_spectrum",
    "sample_run",
    "sample_time",
    "time_shift",
    "train_run",
    "twonn",
]
