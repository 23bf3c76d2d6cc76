from .experiment import RunResult, run_experiment, sweep
from .strategies import StrategyConfig, build_strategy_grouping
from .workload import (DistributionSpec, WorkloadConfig, WorkloadStreams,
                       build_query_specs)

__all__ = ["RunResult", "run_experiment", "sweep", "StrategyConfig",
           "build_strategy_grouping", "DistributionSpec", "WorkloadConfig",
           "WorkloadStreams", "build_query_specs"]
