"""Python access to the divergent C++ core."""

from ._core import (  # noqa: F401
    DivergentError,
    aggregate_ensemble,
    benjamini_hochberg,
    classify_stability,
    divergence,
    efficiency_score,
    energy_above_hull,
    format_config,
    power_sample_size,
    reduced_formula,
    run_campaign,
    welch_p,
)
