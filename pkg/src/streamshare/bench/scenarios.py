"""Canonical desk-scale scenarios for the evaluation suite.

Each builder returns (workload_config, strategy_kwargs) pairs tuned so the
phenomena of interest show up at desk scale within a few simulated minutes:
resource-trend scaling, a low-concurrency sharing penalty, a rate pulse that
backpressures heavy queries, and distribution shifts between uniform and
Zipf phases.
"""

from __future__ import annotations

from dataclasses import replace

from ..engine.core import EngineParams
from ..optimizer import OptimizerConfig
from .strategies import StrategyConfig
from .workload import DistributionSpec, WorkloadConfig


def default_optimizer(**overrides) -> OptimizerConfig:
    base = dict(
        merge_period_s=30.0,
        report_period_s=5.0,
        monitor_min_tuples=200,
        min_segment_samples=20,
        penalty_tolerance=0.05,
        backpressure_stall_fraction=0.1,
    )
    base.update(overrides)
    return OptimizerConfig(**base)


def strategy(name: str, *, constrained: bool = False,
             **optimizer_overrides) -> StrategyConfig:
    return StrategyConfig(name, constrained=constrained,
                          optimizer=default_optimizer(**optimizer_overrides))


def w1_trend(query_count: int, selectivity: float = 0.1,
             seed_rate: float = 20.0) -> WorkloadConfig:
    """W1 resource-trend scaling (resources vs concurrency)."""
    return WorkloadConfig(
        workload="W1",
        query_count=query_count,
        selectivity=selectivity,
        domain=100,
        window_s=20.0,
        slide_s=2.0,
        rate_schedule=((0.0, seed_rate),),
        warmup_s=30.0,
        engine=EngineParams(queue_capacity=512),
    )


def w1_low_concurrency() -> tuple[WorkloadConfig, StrategyConfig]:
    """Low-concurrency W1 where monolithic sharing penalizes queries.

    Operators scale sub-linearly (capacity ~ p^0.75), so one big shared
    plan wastes capacity on wide operators while isolated plans run at
    parallelism 1.  The adaptive strategy runs a reduced merge threshold,
    the recommended setting when scaling is sub-linear.
    """
    cfg = WorkloadConfig(
        workload="W1",
        query_count=8,
        selectivity=0.02,
        domain=200,
        window_s=20.0,
        slide_s=2.0,
        rate_schedule=((0.0, 60.0),),
        warmup_s=30.0,
        engine=EngineParams(queue_capacity=256, scaling_exponent=0.75,
                            join_output_cost=0.4),
    )
    return cfg, strategy("funshare", merge_threshold=0.5)


def w2_pulse(pulse_start_s: float = 240.0, pulse_end_s: float = 420.0,
             base_rate: float = 10.0, pulse_rate: float = 15.0
             ) -> WorkloadConfig:
    """W2 with heavy-UDF queries and a mid-run input-rate pulse."""
    return WorkloadConfig(
        workload="W2",
        query_count=6,
        selectivity=0.2,
        domain=50,
        window_s=20.0,
        slide_s=2.0,
        rate_schedule=((0.0, base_rate), (pulse_start_s, pulse_rate),
                       (pulse_end_s, base_rate)),
        udf_cost=300.0,
        warmup_s=30.0,
        engine=EngineParams(queue_capacity=128),
    )


def w1_distribution_shift(phase_s: float = 300.0) -> WorkloadConfig:
    """Uniform, then Zipf with the hot key at the domain start, then Zipf
    with the hot key mid-domain.  Ranges are anchored at the domain start
    with random lengths, so the first shift makes every query select the
    most frequent key and the second splits them into light and heavy."""
    return WorkloadConfig(
        workload="W1",
        query_count=8,
        selectivity=(0.1, 0.9),
        domain=100,
        window_s=20.0,
        slide_s=2.0,
        rate_schedule=((0.0, 12.0),),
        distribution_schedule=(
            (0.0, DistributionSpec("uniform")),
            (phase_s, DistributionSpec("zipf", exponent=1.6,
                                       hot_position=0.0)),
            (2 * phase_s, DistributionSpec("zipf", exponent=1.6,
                                           hot_position=0.5)),
        ),
        range_placement="anchored",
        warmup_s=30.0,
        engine=EngineParams(queue_capacity=64),
    )


def queue_growth() -> WorkloadConfig:
    """Sustained overload of heavy queries (no pulse end): light queries'
    source buffers must stay flat under the adaptive strategy."""
    cfg = w2_pulse(pulse_start_s=120.0, pulse_end_s=10_000.0,
                   base_rate=10.0, pulse_rate=16.0)
    return replace(cfg, warmup_s=30.0)
