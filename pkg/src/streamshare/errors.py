"""Exception types shared across the package."""


class ConfigurationError(Exception):
    """A workload, strategy or plan configuration is invalid."""


class PlanError(ConfigurationError):
    """Queries cannot be combined into the requested shared plan."""


class EstimationError(Exception):
    """A statistic required by the cost model is missing or degenerate."""


class InfeasibleAllocation(Exception):
    """No subtask layout satisfies the requested constraints."""
