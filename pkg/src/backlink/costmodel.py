"""Analytic activation-memory and pipeline-runtime models.

Memory counts stored activation elements per sample.  Runtime is the critical
path through a schedule DAG whose events carry weights derived from per-unit
compute (multiply-accumulates) and per-element communication cost.  A
backward pass is charged twice its forward compute.
"""

from __future__ import annotations

import graphlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, SchedulingError
from .layers import (
    AuxClassifierSpec,
    AvgPoolGlobal,
    BatchNorm,
    Conv3x3,
    Dense,
    Dropout,
    Flatten,
    MaxPool2x2,
    NetworkSpec,
    ReLU,
    ResidualBlock,
    classifier_layers,
    output_shape,
)
from .router import BackLinkConfig, PartitionPlan

BACKWARD_FACTOR = 2.0
PHASES = ("fwd", "bwd_local", "bwd_global", "sync", "step")


# ---------------------------------------------------------------------------
# Cost model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostModel:
    """Per-unit weights.  ``head_*[i]`` is the cost of a classifier attached after unit ``i``."""

    footprint: tuple[float, ...]
    compute: tuple[float, ...]
    head_footprint: tuple[float, ...]
    head_compute: tuple[float, ...]
    out_elements: tuple[float, ...]     # activation elements leaving each unit
    param_elements: tuple[float, ...]
    input_elements: float = 1.0
    comm: float = 0.0                   # cost per transferred element

    def __post_init__(self):
        n = len(self.footprint)
        for name in ("compute", "head_footprint", "head_compute", "out_elements", "param_elements"):
            if len(getattr(self, name)) != n:
                raise ConfigError(f"cost model field {name} has {len(getattr(self, name))} entries, expected {n}")
        values = [v for name in ("footprint", "compute", "head_footprint", "head_compute", "out_elements",
                                 "param_elements") for v in getattr(self, name)]
        if min(values + [self.comm, self.input_elements]) < 0:
            raise ConfigError("cost model weights must be non-negative")

    @property
    def n_units(self) -> int:
        return len(self.footprint)

    def with_comm(self, comm: float) -> "CostModel":
        return CostModel(self.footprint, self.compute, self.head_footprint, self.head_compute, self.out_elements,
                         self.param_elements, self.input_elements, comm)

    @classmethod
    def uniform(cls, n_units: int, footprint: float = 1.0, classifier: float = 0.25, compute: float = 1.0,
                classifier_compute: float | None = None, comm: float = 0.0) -> "CostModel":
        hc = classifier if classifier_compute is None else classifier_compute
        return cls((footprint,) * n_units, (compute,) * n_units, (classifier,) * n_units, (hc,) * n_units,
                   (1.0,) * n_units, (1.0,) * n_units, 1.0, comm)

    @classmethod
    def from_network(cls, spec: NetworkSpec, classifier: AuxClassifierSpec | None = None, comm: float = 0.0) -> "CostModel":
        classifier = classifier or AuxClassifierSpec("linear", spec.num_classes)
        fp, mac, hfp, hmac, out, npar = [], [], [], [], [], []
        shape = spec.input_shape
        for unit in spec.units:
            f = m = p = 0.0
            for layer in unit:
                lf, lm, lp, shape = layer_costs(layer, shape)
                f, m, p = f + lf, m + lm, p + lp
            fp.append(f)
            mac.append(m)
            npar.append(p)
            out.append(float(np.prod(shape)))
            hf = hm = 0.0
            hshape = shape
            for layer in classifier_layers(classifier, shape):
                lf, lm, _, hshape = layer_costs(layer, hshape)
                hf, hm = hf + lf, hm + lm
            hfp.append(hf)
            hmac.append(hm)
        return cls(tuple(fp), tuple(mac), tuple(hfp), tuple(hmac), tuple(out), tuple(npar),
                   float(np.prod(spec.input_shape)), comm)


def layer_costs(layer, shape):
    """(stored activation elements, MACs, parameter count, output shape) per sample."""
    out = output_shape(layer, shape)
    n_out = float(np.prod(out))
    if isinstance(layer, Dense):
        return n_out, float(layer.in_features * layer.out_features), float((layer.in_features + 1) * layer.out_features), out
    if isinstance(layer, Conv3x3):
        macs = 9.0 * layer.in_channels * n_out
        return n_out, macs, float(9 * layer.in_channels * layer.out_channels + (layer.out_channels if layer.bias else 0)), out
    if isinstance(layer, BatchNorm):
        return n_out, n_out, 2.0 * layer.channels, out
    if isinstance(layer, ResidualBlock):
        cin, cout = layer.in_channels, layer.out_channels
        # conv1, bn1, relu, conv2, bn2, add, relu (+ projection)
        stored = 7 * n_out + (n_out if layer.projects else 0)
        macs = 9.0 * cin * n_out + 9.0 * cout * n_out + 4 * n_out + (cin * n_out if layer.projects else 0)
        params = 9 * cin * cout + 9 * cout * cout + 4 * cout + (cin * cout if layer.projects else 0)
        return stored, macs, float(params), out
    if isinstance(layer, (ReLU, MaxPool2x2, AvgPoolGlobal, Dropout)):
        return n_out, float(np.prod(shape)), 0.0, out
    if isinstance(layer, Flatten):
        return 0.0, 0.0, 0.0, out
    raise ConfigError(f"no cost rule for {layer!r}")


# ---------------------------------------------------------------------------
# Memory
# ---------------------------------------------------------------------------

MODES = ("BP", "GLL", "BackLink")


@dataclass(frozen=True)
class MemoryEstimate:
    mode: str
    per_module: tuple[float, ...]
    duplicated: tuple[float, ...]

    @property
    def peak(self) -> float:
        return max(self.per_module)


def _cost_for(target, classifier=None) -> CostModel:
    return target if isinstance(target, CostModel) else CostModel.from_network(target, classifier)


def estimate_memory(target, plan: PartitionPlan, config: BackLinkConfig, mode: str) -> MemoryEstimate:
    """Per-module stored activations for BP, GLL or BackLink.

    BP keeps every unit plus the final classifier; GLL keeps one module plus
    its classifier at a time; BackLink adds, on each successor, the duplicated
    in-range units of its predecessor.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    cost = _cost_for(target, config.classifier)
    if plan.total != cost.n_units:
        raise ConfigError(f"plan covers {plan.total} units but the cost model has {cost.n_units}")
    if mode == "BP":
        total = sum(cost.footprint) + cost.head_footprint[-1]
        return MemoryEstimate(mode, (total,), (0.0,))
    per, dup = [], []
    for n in range(plan.K):
        start, stop = plan.bounds(n)
        value = sum(cost.footprint[start:stop]) + cost.head_footprint[stop - 1]
        extra = 0.0
        if mode == "BackLink" and n > 0:
            r = config.span(plan, n - 1)
            pstart, pstop = plan.bounds(n - 1)
            extra = sum(cost.footprint[pstop - r:pstop])
        per.append(value + extra)
        dup.append(extra)
    return MemoryEstimate(mode, tuple(per), tuple(dup))


# ---------------------------------------------------------------------------
# Schedule traces and runtime
# ---------------------------------------------------------------------------

EventId = tuple  # (worker, tag, phase)


@dataclass
class Event:
    worker: int
    tag: int
    phase: str
    deps: list = field(default_factory=list)

    @property
    def id(self) -> EventId:
        return (self.worker, self.tag, self.phase)


@dataclass
class ScheduleTrace:
    plan: PartitionPlan
    config: BackLinkConfig
    staleness: int
    capacity: int
    events: list[Event] = field(default_factory=list)

    def add(self, event: Event) -> None:
        self.events.append(event)

    def by_id(self) -> dict[EventId, Event]:
        return {e.id: e for e in self.events}


def worker_events(plan: PartitionPlan, config: BackLinkConfig, k: int, t: int, staleness: int, capacity: int,
                  prev: EventId | None, sync_tag: int | None) -> list[Event]:
    """Events worker ``k`` emits for batch ``t``, with their dependencies.

    ``prev`` is the worker's previous event (program order); ``sync_tag`` is
    the batch whose global gradients the owner applies at this step, or None.
    """
    K = plan.K
    has_dup = k > 0 and config.span(plan, k - 1) > 0
    out = []
    fwd = Event(k, t, "fwd", [prev] if prev else [])
    if k > 0:
        fwd.deps.append((k - 1, t, "fwd"))
    if k < K - 1 and t - capacity - 1 >= 0:
        # the put blocks until the consumer dequeues batch t - capacity
        fwd.deps.append((k + 1, t - capacity - 1, "step"))
    out.append(fwd)
    out.append(Event(k, t, "bwd_local", [fwd.id]))
    last = out[-1].id
    if has_dup:
        out.append(Event(k, t, "bwd_global", [last]))
        out.append(Event(k, t, "sync", [out[-1].id]))
        last = out[-1].id
    step = Event(k, t, "step", [last])
    if sync_tag is not None:
        step.deps.append((k + 1, sync_tag, "sync"))
    out.append(step)
    return out


def sync_tag_for(plan: PartitionPlan, config: BackLinkConfig, k: int, t: int, staleness: int) -> int | None:
    if config.span(plan, k) == 0 or k >= plan.K - 1:
        return None
    tag = t - staleness
    return tag if tag >= 0 else None


def synthetic_trace(plan: PartitionPlan, config: BackLinkConfig, n_batches: int, staleness: int = 1,
                    capacity: int = 2) -> ScheduleTrace:
    """The event DAG a pipeline run over ``n_batches`` produces, without running it."""
    if staleness not in (0, 1):
        raise ConfigError(f"staleness must be 0 or 1, got {staleness}")
    trace = ScheduleTrace(plan, config, staleness, capacity)
    for k in range(plan.K):
        prev = None
        for t in range(n_batches):
            for e in worker_events(plan, config, k, t, staleness, capacity, prev,
                                   sync_tag_for(plan, config, k, t, staleness)):
                trace.add(e)
                prev = e.id
    return trace


def sent_elements(cost: CostModel, plan: PartitionPlan, config: BackLinkConfig, k: int) -> float:
    """Activation elements worker ``k`` forwards to its successor (the range entry)."""
    start, stop = plan.bounds(k)
    first = stop - config.span(plan, k)
    return cost.input_elements if first == 0 else cost.out_elements[first - 1]


def sync_elements(cost: CostModel, plan: PartitionPlan, config: BackLinkConfig, k: int) -> float:
    """Gradient elements worker ``k`` returns for its predecessor's duplicated units."""
    if k == 0:
        return 0.0
    r = config.span(plan, k - 1)
    _, stop = plan.bounds(k - 1)
    return sum(cost.param_elements[stop - r:stop])


def event_weight(event: Event, cost: CostModel, plan: PartitionPlan, config: BackLinkConfig) -> float:
    k = event.worker
    start, stop = plan.bounds(k)
    own = sum(cost.compute[start:stop]) + cost.head_compute[stop - 1]
    dup = 0.0
    if k > 0:
        r = config.span(plan, k - 1)
        _, pstop = plan.bounds(k - 1)
        dup = sum(cost.compute[pstop - r:pstop])
    if event.phase == "fwd":
        comm = 0.0
        if k < plan.K - 1:
            comm += cost.comm * sent_elements(cost, plan, config, k)
        if k > 0:
            comm += cost.comm * sent_elements(cost, plan, config, k - 1)
        return own + dup + comm
    if event.phase == "bwd_local":
        return BACKWARD_FACTOR * own
    if event.phase == "bwd_global":
        return BACKWARD_FACTOR * dup
    if event.phase == "sync":
        return cost.comm * sync_elements(cost, plan, config, k)
    if event.phase == "step":
        return 0.0
    raise SchedulingError(f"unknown phase {event.phase!r}")


def schedule(trace: ScheduleTrace, cost: CostModel) -> dict[EventId, tuple[float, float]]:
    """Earliest logical (start, end) of every event; raises on a cyclic or dangling trace."""
    events = trace.by_id()
    graph = {eid: set(e.deps) for eid, e in events.items()}
    for eid, deps in graph.items():
        missing = [d for d in deps if d not in events]
        if missing:
            raise SchedulingError(f"event {eid} depends on unknown events {missing}")
    try:
        order = list(graphlib.TopologicalSorter(graph).static_order())
    except graphlib.CycleError as exc:
        raise SchedulingError(f"schedule trace contains a cycle: {exc.args[1]}") from None
    times: dict[EventId, tuple[float, float]] = {}
    for eid in order:
        e = events[eid]
        start = max((times[d][1] for d in e.deps), default=0.0)
        times[eid] = (start, start + event_weight(e, cost, trace.plan, trace.config))
    return times


def critical_path(trace: ScheduleTrace, cost: CostModel) -> float:
    return max((end for _, end in schedule(trace, cost).values()), default=0.0)


def bp_path(cost: CostModel, n_batches: int) -> float:
    plan = PartitionPlan((cost.n_units,))
    return critical_path(synthetic_trace(plan, BackLinkConfig(), n_batches, 0), cost)


@dataclass(frozen=True)
class RuntimeEstimate:
    critical_path: float
    bp_path: float

    @property
    def speedup(self) -> float:
        return self.bp_path / self.critical_path

    @property
    def relative_runtime(self) -> float:
        return self.critical_path / self.bp_path


def estimate_runtime(trace: ScheduleTrace, cost: CostModel) -> RuntimeEstimate:
    n_batches = len({e.tag for e in trace.events})
    return RuntimeEstimate(critical_path(trace, cost), bp_path(cost, n_batches))


def steady_state_speedup(cost: CostModel, plan: PartitionPlan, config: BackLinkConfig, staleness: int = 1,
                         capacity: int = 2, batches: tuple[int, int] = (16, 32)) -> float:
    """Throughput ratio BP / pipeline, from the growth of both paths between two batch counts."""
    t1, t2 = batches
    pipe = [critical_path(synthetic_trace(plan, config, t, staleness, capacity), cost) for t in (t1, t2)]
    bp = [bp_path(cost, t) for t in (t1, t2)]
    return (bp[1] - bp[0]) / (pipe[1] - pipe[0])


def trace_records(trace: ScheduleTrace, cost: CostModel) -> list[dict]:
    """Line-delimited export: one record per event with logical start and end."""
    times = schedule(trace, cost)
    return [{"worker": e.worker, "tag": e.tag, "phase": e.phase, "start": times[e.id][0], "end": times[e.id][1]}
            for e in sorted(trace.events, key=lambda e: (times[e.id][0], e.worker))]
