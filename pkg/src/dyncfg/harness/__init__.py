from .experiments import (
    FilterConfig,
    FilterResult,
    MetricsReport,
    ScheduleAggregate,
    aggregate_schedules,
    compare_policies,
    evaluator_overhead_pct,
    filter_batch,
    filter_best_of,
    moving_average,
    op_count_report,
    run_cells,
    schedule_svg,
    traces_from,
)
from .metrics import (
    alignment_metric,
    bootstrap_ci,
    bootstrap_frechet_diff,
    class_frechet,
    frechet_gaussian,
    reference_moments,
    target_posteriors,
    win_rate,
)

__all__ = [
    "FilterConfig",
    "FilterResult",
    "MetricsReport",
    "ScheduleAggregate",
    "aggregate_schedules",
    "alignment_metric",
    "bootstrap_ci",
    "bootstrap_frechet_diff",
    "class_frechet",
    "compare_policies",
    "evaluator_overhead_pct",
    "filter_batch",
    "filter_best_of",
    "frechet_gaussian",
    "moving_average",
    "op_count_report",
    "reference_moments",
    "run_cells",
    "schedule_svg",
    "target_posteriors",
    "traces_from",
    "win_rate",
]
