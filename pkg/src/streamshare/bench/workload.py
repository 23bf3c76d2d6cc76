"""Workload generation: Nexmark-flavored stream analogues.

Three workloads at desk scale:

* W1 joins a person stream with an auction stream on a shared category key.
* W2 joins auctions with bids; queries differ downstream (category average,
  seller average, or a heavy synthetic UDF).
* W3 runs a high-cost UDF before a windowed self-join on a bucketed key.

Queries filter both input streams with a range over the category domain, so
a query's selectivity is the probability mass of its range under the active
key distribution.  Rate and distribution schedules are piecewise constant
and support pulses and uniform-to-Zipf shifts.  Generation is a pure
function of (config, seed): every strategy run sees identical records.
"""

from __future__ import annotations

import bisect
import math
import random
from dataclasses import dataclass, field, replace

from ..engine.core import EngineParams
from ..errors import ConfigurationError
from ..estimation import CostModelParams, RangeStatistics, plan_cost_profile
from ..plans import DownstreamOp, JoinSpec, QuerySpec, build_group_plan

WORKLOADS = ("W1", "W2", "W3")
W2_QUERY_TYPES = ("category_avg", "seller_avg", "price_anomaly")


@dataclass(frozen=True)
class DistributionSpec:
    kind: str = "uniform"          # "uniform" or "zipf"
    exponent: float = 1.2
    hot_position: float = 0.0      # fraction of the domain, 0=start .5=middle

    def __post_init__(self):
        if self.kind not in ("uniform", "zipf"):
            raise ConfigurationError(
                f"distribution kind must be uniform or zipf, got "
                f"{self.kind!r}")
        if not (0.0 <= self.hot_position <= 1.0):
            raise ConfigurationError(
                f"hot_position {self.hot_position} outside [0, 1]")


class KeyDistribution:
    """Sampled and analytic view of one key distribution phase."""

    def __init__(self, spec: DistributionSpec, domain: int):
        self.spec = spec
        self.domain = domain
        if spec.kind == "uniform":
            p = 1.0 / domain
            self.probs = [p] * domain
        else:
            hot = int(round(spec.hot_position * (domain - 1)))
            weights = [1.0 / (abs(k - hot) + 1) ** spec.exponent
                       for k in range(domain)]
            total = sum(weights)
            self.probs = [w / total for w in weights]
        self.cum = []
        acc = 0.0
        for p in self.probs:
            acc += p
            self.cum.append(acc)
        self.cum[-1] = 1.0

    def sample(self, rng: random.Random) -> int:
        return bisect.bisect_left(self.cum, rng.random())

    def mass(self, lo: int, hi: int) -> float:
        return sum(self.probs[max(0, lo):min(self.domain, hi)])

    def sum_p2(self, lo: int, hi: int) -> float:
        return sum(p * p for p in self.probs[max(0, lo):min(self.domain, hi)])


@dataclass
class WorkloadConfig:
    workload: str = "W1"
    query_count: int = 8
    selectivity: object = 0.1          # float or [lo, hi]
    domain: int = 100
    window_s: float = 30.0
    slide_s: float = 1.0
    rate_schedule: tuple = ((0.0, 20.0),)   # (seconds, records/s per stream)
    distribution_schedule: tuple = ((0.0, DistributionSpec()),)
    range_placement: str = "random"         # or "anchored"
    udf_cost: float = 200.0
    seller_count: int = 20
    warmup_s: float = 60.0
    provision_headroom: float = 1.0
    engine: EngineParams = field(default_factory=EngineParams)

    def __post_init__(self):
        if self.workload not in WORKLOADS:
            raise ConfigurationError(
                f"workload must be one of {WORKLOADS}, got "
                f"{self.workload!r}")
        if self.query_count < 1:
            raise ConfigurationError("query_count must be >= 1")
        if self.domain < 2:
            raise ConfigurationError("domain must be >= 2")
        if self.range_placement not in ("random", "anchored"):
            raise ConfigurationError(
                f"range_placement must be random or anchored, got "
                f"{self.range_placement!r}")
        if isinstance(self.selectivity, (list, tuple)):
            lo, hi = self.selectivity
            if not (0.0 < lo <= hi <= 1.0):
                raise ConfigurationError(
                    f"selectivity range ({lo}, {hi}) outside (0, 1]")
        elif not (0.0 < float(self.selectivity) <= 1.0):
            raise ConfigurationError(
                f"selectivity {self.selectivity} outside (0, 1]")
        if not self.rate_schedule or self.rate_schedule[0][0] > 0:
            raise ConfigurationError(
                "rate_schedule must start at time 0")
        if (not self.distribution_schedule
                or self.distribution_schedule[0][0] > 0):
            raise ConfigurationError(
                "distribution_schedule must start at time 0")

    # ------------------------------------------------------------------
    @property
    def streams(self) -> tuple[str, ...]:
        if self.workload == "W1":
            return ("person", "auction")
        if self.workload == "W2":
            return ("auction", "bid")
        return ("auction",)

    @property
    def window_ticks(self) -> int:
        return max(1, round(self.window_s / self.engine.tick_seconds))

    @property
    def slide_ticks(self) -> int:
        return max(1, round(self.slide_s / self.engine.tick_seconds))

    def join_spec(self) -> JoinSpec:
        streams = self.streams
        left = streams[0]
        right = streams[-1]
        return JoinSpec(left, right, "key", self.window_ticks,
                        self.slide_ticks)

    def rate_at(self, t_s: float) -> float:
        rate = self.rate_schedule[0][1]
        for start, r in self.rate_schedule:
            if t_s >= start:
                rate = r
        return rate

    def distribution_at(self, t_s: float) -> DistributionSpec:
        spec = self.distribution_schedule[0][1]
        for start, d in self.distribution_schedule:
            if t_s >= start:
                spec = d
        return spec

    def cost_model(self) -> CostModelParams:
        eng = self.engine
        pre = self.udf_cost if self.workload == "W3" else 0.0
        return CostModelParams(alpha=eng.alpha, beta=eng.join_input_cost,
                               gamma=eng.join_output_cost, pre_join=pre)


def workload_config_from_dict(data: dict) -> WorkloadConfig:
    data = dict(data)
    if "engine" in data:
        eng = data["engine"]
        if isinstance(eng, dict):
            try:
                data["engine"] = EngineParams(**eng)
            except TypeError as exc:
                raise ConfigurationError(f"bad engine parameters: {exc}")
    if "distribution_schedule" in data:
        sched = []
        for entry in data["distribution_schedule"]:
            t, spec = entry
            if isinstance(spec, dict):
                spec = DistributionSpec(**spec)
            sched.append((float(t), spec))
        data["distribution_schedule"] = tuple(sched)
    if "rate_schedule" in data:
        data["rate_schedule"] = tuple(
            (float(t), float(r)) for t, r in data["rate_schedule"])
    try:
        return WorkloadConfig(**data)
    except TypeError as exc:
        raise ConfigurationError(f"bad workload configuration: {exc}")


# ----------------------------------------------------------------------
# query construction

def build_query_specs(cfg: WorkloadConfig, seed: int) -> list[QuerySpec]:
    """Generate the concurrent queries with seeded random filter ranges."""
    rng = random.Random((seed << 8) ^ 0x51C2)
    join = cfg.join_spec()
    specs = []
    width = len(str(max(0, cfg.query_count - 1)))
    for i in range(cfg.query_count):
        if isinstance(cfg.selectivity, (list, tuple)):
            sel = rng.uniform(*cfg.selectivity)
        else:
            sel = float(cfg.selectivity)
        length = max(1, round(sel * cfg.domain))
        if cfg.range_placement == "anchored":
            start = 0
        else:
            start = rng.randrange(0, cfg.domain - length + 1)
        predicates = tuple((s, start, start + length) for s in cfg.streams)
        downstream: tuple[DownstreamOp, ...] = ()
        pre_join: tuple[DownstreamOp, ...] = ()
        if cfg.workload == "W2":
            qtype = W2_QUERY_TYPES[i % len(W2_QUERY_TYPES)]
            if qtype == "category_avg":
                downstream = (DownstreamOp.window_aggregate("key", "price"),)
            elif qtype == "seller_avg":
                downstream = (DownstreamOp.window_aggregate("seller",
                                                            "price"),)
            else:
                downstream = (DownstreamOp.udf(cfg.udf_cost),)
        elif cfg.workload == "W3":
            pre_join = (DownstreamOp.udf(cfg.udf_cost),)
        specs.append(QuerySpec(
            query_id=f"Q{i:0{width}d}",
            predicates=predicates,
            join=join,
            downstream=downstream,
            pre_join=pre_join,
            filter_field="key",
        ))
    return provision_queries(cfg, specs)


def analytic_query_stats(cfg: WorkloadConfig, spec: QuerySpec,
                         t_s: float = 0.0) -> tuple[float, float]:
    """(selectivity, matches per join-input tuple) under the configured
    distribution: matches are the expected same-key opposite-side tuples
    within the event-time window."""
    dist = KeyDistribution(cfg.distribution_at(t_s), cfg.domain)
    _, lo, hi = spec.predicates[0]
    return _range_stats(cfg, dist, lo, hi, t_s)


def _range_stats(cfg, dist, lo, hi, t_s):
    sel = dist.mass(lo, hi)
    if sel <= 0:
        return 0.0, 0.0
    rate = cfg.rate_at(t_s)
    matches = rate * cfg.window_s * dist.sum_p2(lo, hi) / sel
    return sel, matches


def analytic_union_stats(cfg: WorkloadConfig, ranges, t_s: float = 0.0
                         ) -> tuple[float, float]:
    from ..plans import merge_ranges
    dist = KeyDistribution(cfg.distribution_at(t_s), cfg.domain)
    sel = 0.0
    wsum = 0.0
    for lo, hi in merge_ranges(ranges):
        s, m = _range_stats(cfg, dist, lo, hi, t_s)
        sel += s
        wsum += s * m
    return sel, (wsum / sel if sel > 0 else 0.0)


def analytic_segment_stats(cfg: WorkloadConfig, segments,
                           t_s: float = 0.0) -> list[RangeStatistics]:
    dist = KeyDistribution(cfg.distribution_at(t_s), cfg.domain)
    out = []
    for lo, hi in segments:
        sel, m = _range_stats(cfg, dist, lo, hi, t_s)
        out.append(RangeStatistics((lo, hi), sel, m, sample_count=1 << 30))
    return out


def provision_queries(cfg: WorkloadConfig,
                      specs: list[QuerySpec]) -> list[QuerySpec]:
    """Fill in isolated_resources: the minimum allocation sustaining the
    base input rate under the initial distribution."""
    out = []
    rate = cfg.rate_at(0.0)
    for spec in specs:
        plan = build_group_plan(f"iso:{spec.query_id}", [spec])
        stats = analytic_query_stats(cfg, spec)
        profile = plan_cost_profile(plan, rate, stats, cfg.engine)
        total_cost = sum(c for _, c in profile) * cfg.provision_headroom
        needed = math.ceil(total_cost / cfg.engine.subtask_capacity)
        out.append(replace(spec,
                           isolated_resources=max(plan.min_resources,
                                                  needed)))
    return out


# ----------------------------------------------------------------------
# stream generation

class WorkloadStreams:
    """Per-tick record feed, deterministic under (config, seed)."""

    def __init__(self, cfg: WorkloadConfig, seed: int):
        self.cfg = cfg
        self.tick_seconds = cfg.engine.tick_seconds
        self._rngs = {s: random.Random((seed << 16) ^ (i * 0x9E3779B1))
                      for i, s in enumerate(cfg.streams)}
        self._residual = {s: 0.0 for s in cfg.streams}
        self._seq = {s: 0 for s in cfg.streams}
        self._dists: dict[DistributionSpec, KeyDistribution] = {}
        for _, spec in cfg.distribution_schedule:
            if spec not in self._dists:
                self._dists[spec] = KeyDistribution(spec, cfg.domain)

    def offered_rate(self, tick: int) -> float:
        """records/s per stream at the given tick."""
        return self.cfg.rate_at(tick * self.tick_seconds)

    def _payload(self, stream: str, key: int, rng: random.Random) -> dict:
        n = self._seq[stream]
        self._seq[stream] += 1
        if stream == "person":
            return {"key": key, "pid": n}
        if stream == "bid":
            return {"key": key, "bid_id": n,
                    "price": rng.randrange(1, 1000)}
        # auction (W1 right side, W2 left side, W3 single stream)
        return {"key": key, "aid": n,
                "seller": rng.randrange(self.cfg.seller_count),
                "price": rng.randrange(1, 1000)}

    def feed(self, tick: int) -> dict[str, list]:
        t_s = tick * self.tick_seconds
        rate = self.cfg.rate_at(t_s)
        dist = self._dists[self.cfg.distribution_at(t_s)]
        out = {}
        for stream in self.cfg.streams:
            rng = self._rngs[stream]
            want = rate * self.tick_seconds + self._residual[stream]
            n = int(want)
            self._residual[stream] = want - n
            records = []
            for _ in range(n):
                key = dist.sample(rng)
                records.append((tick, self._payload(stream, key, rng)))
            out[stream] = records
        return out
