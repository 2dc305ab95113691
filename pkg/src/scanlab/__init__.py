"""Calibrated scan statistics for detecting an elevated segment in a sequence.

Five calibrations of the scan (single threshold, DS and SAC penalties,
blocked, Bonferroni on an approximating set), seven local statistics, null
simulation with reproducible streams, and a power study based on the
realized exponent.
"""

__version__ = "0.1.0"

from .calibrations import (  # noqa: E402
    CALIBRATIONS,
    Calibration,
    CritTable,
    TestDecision,
    bonferroni_threshold,
    build_crit_table,
    calibrate_blocked_alpha,
    get_tables,
    penalty_ds,
    penalty_sac,
    run_test,
    simulate_null_maxima,
)
from .intervals import (  # noqa: E402
    ApproxSet,
    BlockPartition,
    Interval,
    best_approximation,
    blocks,
    build_approx_set,
    enumerate_full,
    overlap_ratio,
    verify_count_bounds,
)
from .local_stats import make_stat  # noqa: E402
from .null_models import RngStream, inject_signal, make_model, random_signal_placement, sample_null  # noqa: E402
from .power import PowerResult, emit_table, min_mu, realized_exponent, run_power_study  # noqa: E402
