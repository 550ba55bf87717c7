"""Module partitioning and restricted-length inter-module error routing.

A network of ``N`` basic units is split into ``K`` contiguous modules, each
topped by an auxiliary classifier.  Module ``n`` trains on

    J_n = alpha * L_n + (1 - alpha) * L_{n+1}

where ``L_{n+1}`` only reaches the last ``l`` units of module ``n`` (its
*propagation range*).  The final module, and every module when ``l == 0``,
trains on its own loss alone.

The forward graph realises this by unfolding: the successor recomputes the
predecessor's in-range units from ``stop_grad(range entry)`` with the same
parameter tensors, and the result passes through ``scale_grad(1 - alpha)``
before entering the successor.  The owner's backbone parameters are read
through ``scale_grad(alpha)`` views, so parameter gradients carry the
``alpha`` weight while the error handed down to the predecessor stays
unweighted.  Classifier parameters always see the unweighted local loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigError, ShapeError
from .layers import AuxClassifierSpec, ForwardContext, NetworkSpec, Sequential, build_classifier, build_sequential
from .optim import softmax_xent

ALPHA_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class PartitionPlan:
    sizes: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if not self.sizes or min(self.sizes) < 1:
            raise ConfigError(f"every module needs at least one unit, got sizes {self.sizes}")

    @property
    def K(self) -> int:
        return len(self.sizes)

    @property
    def total(self) -> int:
        return sum(self.sizes)

    def bounds(self, n: int) -> tuple[int, int]:
        """Half-open unit index range ``[start, stop)`` of module ``n``."""
        start = sum(self.sizes[:n])
        return start, start + self.sizes[n]

    def module_of(self, unit: int) -> int:
        for n in range(self.K):
            start, stop = self.bounds(n)
            if start <= unit < stop:
                return n
        raise IndexError(unit)


def partition(total_units: int, K: int) -> PartitionPlan:
    """Split evenly; when not divisible the earlier modules get one extra unit."""
    if K < 1 or K > total_units:
        raise ConfigError(f"cannot split {total_units} units into K={K} modules (need 1 <= K <= {total_units})")
    base, extra = divmod(total_units, K)
    return PartitionPlan(tuple(base + 1 if i < extra else base for i in range(K)))


@dataclass(frozen=True)
class BackLinkConfig:
    l: int = 0
    alpha: float = 1.0
    classifier: AuxClassifierSpec = field(default_factory=AuxClassifierSpec)
    literal_reweighting: bool = False

    def __post_init__(self):
        if self.l < 0:
            raise ConfigError(f"propagation length l must be >= 0, got {self.l}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")

    def off_grid(self) -> bool:
        return not any(math.isclose(self.alpha, a) for a in ALPHA_GRID)

    def span(self, plan: PartitionPlan, n: int) -> int:
        """Number of in-range units of module ``n`` after clamping."""
        if n >= plan.K - 1:
            return 0
        return min(self.l, plan.sizes[n])

    def effective_alpha(self, plan: PartitionPlan, n: int) -> float:
        return self.alpha if self.span(plan, n) > 0 else 1.0

    def local_scales(self, plan: PartitionPlan, n: int) -> list[float]:
        """Weight on the local-loss gradient for each unit of module ``n``, bottom to top."""
        r, a = self.span(plan, n), self.effective_alpha(plan, n)
        size = plan.sizes[n]
        if not self.literal_reweighting:
            return [a] * size
        return [a ** min(size - i, r) if r else 1.0 for i in range(size)]

    def global_scales(self, plan: PartitionPlan, n: int) -> list[float]:
        """Extra weight on the duplicated units beyond the boundary ``(1 - alpha)``, bottom to top."""
        r = self.span(plan, n)
        if not self.literal_reweighting:
            return [1.0] * r
        return [(1.0 - self.alpha) ** (r - 1 - i) for i in range(r)]


# ---------------------------------------------------------------------------
# Error-level view: boundary injection and in-range propagation
# ---------------------------------------------------------------------------

@dataclass
class ErrorPacket:
    local: np.ndarray
    global_: np.ndarray | None
    depth_remaining: int

    def __post_init__(self):
        if (self.global_ is not None) != (self.depth_remaining > 0):
            raise ConfigError("an error packet carries a global component exactly when depth_remaining > 0")
        if self.global_ is not None and self.global_.shape != self.local.shape:
            raise ShapeError(f"local {self.local.shape} and global {self.global_.shape} components differ in shape")

    def combined(self) -> np.ndarray:
        return self.local if self.global_ is None else self.local + self.global_


def inject_boundary_error(local: np.ndarray, global_: np.ndarray | None, alpha: float, l: int) -> ErrorPacket:
    """Weight the errors arriving at a module's last unit output.

    ``local`` is the classifier error already pulled back to the module output;
    ``global_`` is the successor's error at the same tensor, or ``None`` for the
    final module.  With no global component, or ``l == 0``, the local error
    passes unweighted.
    """
    local = np.asarray(local)
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if global_ is not None and l == 0:
        raise ConfigError("a global error cannot be injected with propagation length l = 0")
    if global_ is None or l == 0:
        return ErrorPacket(local.copy(), None, 0)
    return ErrorPacket(alpha * local, (1 - alpha) * np.asarray(global_), l)


def propagate_in_range(packet: ErrorPacket, vjp, alpha: float | None = None) -> ErrorPacket:
    """Pull both components back through one unit and decrement the depth.

    ``vjp`` maps an error at the unit output to the error at its input.  When
    ``alpha`` is given the components are re-weighted by ``alpha`` and
    ``1 - alpha`` before the pull-back (the literal per-unit reading).
    """
    if packet.depth_remaining <= 0:
        raise ConfigError("propagate_in_range called with depth_remaining = 0")
    local, glob = packet.local, packet.global_
    if alpha is not None:
        local, glob = alpha * local, (1 - alpha) * glob
    depth = packet.depth_remaining - 1
    new_local = vjp(local)
    return ErrorPacket(new_local, vjp(glob) if depth > 0 else None, depth)


# ---------------------------------------------------------------------------
# Network with per-module classifiers
# ---------------------------------------------------------------------------

class BackLinkNet:
    """Backbone units plus one auxiliary classifier per module."""

    def __init__(self, spec: NetworkSpec, plan: PartitionPlan, config: BackLinkConfig, seed: int = 0,
                 precision="wide"):
        if plan.total != len(spec.units):
            raise ConfigError(f"partition covers {plan.total} units but the network has {len(spec.units)}")
        if config.classifier.num_classes != spec.num_classes:
            config = BackLinkConfig(config.l, config.alpha,
                                    AuxClassifierSpec(config.classifier.kind, spec.num_classes, config.classifier.hidden),
                                    config.literal_reweighting)
        self.spec = spec
        self.plan = plan
        self.config = config
        self.seed = seed
        self.dtype = ad.resolve_dtype(precision)
        shapes = spec.unit_shapes()
        self.units = [build_sequential(u, seed, self.dtype, uid=(0, i), prefix=f"unit{i}") for i, u in enumerate(spec.units)]
        self.heads = [build_classifier(config.classifier, shapes[plan.bounds(n)[1] - 1], seed, self.dtype, n)
                      for n in range(plan.K)]

    @property
    def K(self) -> int:
        return self.plan.K

    def module_units(self, n: int) -> list[Sequential]:
        start, stop = self.plan.bounds(n)
        return self.units[start:stop]

    def range_units(self, n: int) -> list[Sequential]:
        r = self.config.span(self.plan, n)
        return self.module_units(n)[len(self.module_units(n)) - r:] if r else []

    def backbone_parameters(self, n: int) -> list[Tensor]:
        return [p for u in self.module_units(n) for p in u.parameters()]

    def range_parameters(self, n: int) -> list[Tensor]:
        return [p for u in self.range_units(n) for p in u.parameters()]

    def head_parameters(self, n: int) -> list[Tensor]:
        return self.heads[n].parameters()

    def module_parameters(self, n: int) -> list[Tensor]:
        return self.backbone_parameters(n) + self.head_parameters(n)

    def parameters(self) -> list[Tensor]:
        return [p for n in range(self.K) for p in self.module_parameters(n)]

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def layers(self):
        for seq in self.units + self.heads:
            yield from seq.layers

    def state(self) -> dict[str, np.ndarray]:
        """Copy of all parameter values and BatchNorm buffers."""
        out = {name: p.data.copy() for name, p in self.named_parameters().items()}
        for layer in self.layers():
            for k, v in layer.buffers.items():
                out[f"buffer:{layer.uid}:{k}"] = v.copy()
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters().items():
            p.data = state[name].copy()
        for layer in self.layers():
            for k in layer.buffers:
                layer.buffers[k] = state[f"buffer:{layer.uid}:{k}"].copy()


def _run_units(units: Sequence[Sequential], x: Tensor, ctx: ForwardContext, scales: Sequence[float]) -> Tensor:
    for unit, s in zip(units, scales):
        x = unit.forward(x, ctx.replace(param_scale=s))
    return x


def module_forward(net: BackLinkNet, n: int, x_in: Tensor, ctx: ForwardContext):
    """Owner-side forward of module ``n``.  Returns ``(range_entry, output, logits)``."""
    units = net.module_units(n)
    scales = net.config.local_scales(net.plan, n)
    r = net.config.span(net.plan, n)
    split = len(units) - r
    a = _run_units(units[:split], x_in, ctx, scales[:split])
    h = _run_units(units[split:], a, ctx, scales[split:])
    logits = net.heads[n].forward(h, ctx.replace(param_scale=1.0))
    return a, h, logits


def duplicate_forward(units: Sequence[Sequential], entry: Tensor, alpha: float, scales: Sequence[float],
                      ctx: ForwardContext) -> Tensor:
    """Successor-side copy of a predecessor's in-range units.

    Runs from a gradient barrier on the range entry, leaves BatchNorm running
    statistics untouched, and weights the returned error by ``1 - alpha``.
    """
    x = ad.stop_grad(entry)
    x = _run_units(units, x, ctx.replace(update_stats=False), scales)
    return ad.scale_grad(x, 1.0 - alpha)


@dataclass
class ForwardRecord:
    tape: Tape
    logits: list[Tensor]
    outputs: list[Tensor]
    entries: list[Tensor]


def forward_backlink(net: BackLinkNet, x: np.ndarray, ctx: ForwardContext, tape: Tape | None = None) -> ForwardRecord:
    """Unfolded forward over all modules on a single tape."""
    tape = tape or Tape()
    cfg, plan = net.config, net.plan
    logits, outputs, entries = [], [], []
    with tape:
        h = Tensor(np.asarray(x, dtype=net.dtype))
        for n in range(plan.K):
            if n > 0:
                prev = n - 1
                if cfg.span(plan, prev) > 0:
                    h = duplicate_forward(net.range_units(prev), entries[prev], cfg.alpha,
                                          cfg.global_scales(plan, prev), ctx)
                else:
                    h = ad.stop_grad(outputs[prev])
            a, out, lg = module_forward(net, n, h, ctx)
            entries.append(a)
            outputs.append(out)
            logits.append(lg)
    return ForwardRecord(tape, logits, outputs, entries)


def classifier_errors(record: ForwardRecord, labels: np.ndarray) -> tuple[list[float], list[np.ndarray]]:
    losses, deltas = [], []
    for lg in record.logits:
        loss, delta = softmax_xent(lg.data, labels)
        losses.append(loss)
        deltas.append(delta)
    return losses, deltas


def route_backward(net: BackLinkNet, record: ForwardRecord, deltas: Sequence[np.ndarray | None]) -> dict[Tensor, np.ndarray]:
    """Gradients for every parameter from the per-module classifier errors.

    All seeds go into one reverse pass; barriers and scale nodes keep the
    modules' contributions apart, and parameters shared between an owner and
    its duplicate accumulate both contributions.
    """
    if len(deltas) != net.K:
        raise ConfigError(f"expected {net.K} classifier errors, got {len(deltas)}")
    seeds = {}
    for n, d in enumerate(deltas):
        if d is None:
            if n < net.K - 1:
                raise ConfigError(f"missing classifier error for non-final module {n}")
            continue
        seeds[record.logits[n]] = d
    grads = ad.backward(record.tape, seeds)
    return {p: grads.get(p, np.zeros(p.shape, dtype=p.dtype)) for p in net.parameters()}


def compute_gradients(net: BackLinkNet, x: np.ndarray, labels: np.ndarray, ctx: ForwardContext | None = None):
    """Forward, losses and routed backward for one batch."""
    ctx = ctx or ForwardContext()
    record = forward_backlink(net, x, ctx)
    losses, deltas = classifier_errors(record, labels)
    return route_backward(net, record, deltas), losses, record


def predict(net: BackLinkNet, x: np.ndarray) -> list[np.ndarray]:
    """Eval-mode logits of every module head (the last one is the network output)."""
    ctx = ForwardContext(train=False, update_stats=False)
    out = []
    with ad.no_tape():
        h = Tensor(np.asarray(x, dtype=net.dtype))
        for n in range(net.K):
            for unit in net.module_units(n):
                h = unit.forward(h, ctx)
            out.append(net.heads[n].forward(h, ctx).data)
    return out


# ---------------------------------------------------------------------------
# Verification objectives and oracles
# ---------------------------------------------------------------------------

class SurrogateObjective:
    """Scalar objective whose gradient field the router claims to produce.

    For module ``n``'s backbone: ``alpha * L_n + (1 - alpha) * L_{n+1}`` with
    ``L_{n+1}`` evaluated from the range-entry activation frozen at its
    baseline value; final module or ``l == 0``: ``L_n``.  For module ``n``'s
    classifier: ``L_n``.  Evaluation reads current parameter values, so a
    finite-difference driver can perturb them in place.
    """

    def __init__(self, net: BackLinkNet, n: int, x: np.ndarray, labels: np.ndarray, ctx: ForwardContext | None = None):
        self.net, self.n, self.labels = net, n, np.asarray(labels)
        self.ctx = (ctx or ForwardContext()).replace(update_stats=False, param_scale=1.0)
        cfg, plan = net.config, net.plan
        self.alpha = cfg.effective_alpha(plan, n)
        self.span = cfg.span(plan, n)
        with ad.no_tape():
            h = Tensor(np.asarray(x, dtype=net.dtype))
            for m in range(n):
                h = self._advance(m, h)
            self.module_input = h
            units = net.module_units(n)
            self.range_entry = _run_units(units[: len(units) - self.span], h, self.ctx, [1.0] * len(units))

    def _advance(self, m: int, h: Tensor) -> Tensor:
        """Module ``m`` input -> module ``m + 1`` input (as the unfolded graph computes it)."""
        units = self.net.module_units(m)
        return _run_units(units, h, self.ctx, [1.0] * len(units))

    def local_loss(self) -> float:
        with ad.no_tape():
            units = self.net.module_units(self.n)
            h = _run_units(units, self.module_input, self.ctx, [1.0] * len(units))
            lg = self.net.heads[self.n].forward(h, self.ctx)
        return softmax_xent(lg.data, self.labels)[0]

    def successor_loss(self) -> float:
        nxt = self.n + 1
        with ad.no_tape():
            rng = self.net.range_units(self.n)
            h = _run_units(rng, self.range_entry, self.ctx, [1.0] * len(rng))
            h = _run_units(self.net.module_units(nxt), h, self.ctx, [1.0] * len(self.net.module_units(nxt)))
            lg = self.net.heads[nxt].forward(h, self.ctx)
        return softmax_xent(lg.data, self.labels)[0]

    def backbone_value(self) -> float:
        value = self.alpha * self.local_loss() if self.alpha else 0.0
        if self.span > 0 and self.alpha < 1.0:
            value += (1.0 - self.alpha) * self.successor_loss()
        return value

    head_value = local_loss

    def targets(self) -> list[tuple[Tensor, callable]]:
        """(parameter, objective) pairs covering every parameter of module ``n``.

        Each objective re-evaluates only what lies downstream of the unit that
        owns the parameter, starting from cached baseline inputs; values equal
        :meth:`backbone_value` / :meth:`head_value`.
        """
        net, n, ctx = self.net, self.n, self.ctx
        units = net.module_units(n)
        split = len(units) - self.span
        with ad.no_tape():
            inputs = [self.module_input]
            for unit in units:
                inputs.append(unit.forward(inputs[-1], ctx))
        base_successor = self.successor_loss() if self.span > 0 and self.alpha < 1.0 else 0.0

        def make(i):
            def value():
                with ad.no_tape():
                    h = _run_units(units[i:], inputs[i], ctx, [1.0] * len(units))
                    total = 0.0
                    if self.alpha:
                        total += self.alpha * softmax_xent(net.heads[n].forward(h, ctx).data, self.labels)[0]
                    if self.span > 0 and self.alpha < 1.0:
                        if i >= split:
                            nxt = net.module_units(n + 1)
                            h2 = _run_units(nxt, h, ctx, [1.0] * len(nxt))
                            succ = softmax_xent(net.heads[n + 1].forward(h2, ctx).data, self.labels)[0]
                        else:
                            succ = base_successor
                        total += (1.0 - self.alpha) * succ
                return total
            return value

        def head_value():
            with ad.no_tape():
                lg = net.heads[n].forward(inputs[-1], ctx)
            return softmax_xent(lg.data, self.labels)[0]

        out = [(p, make(i)) for i, unit in enumerate(units) for p in unit.parameters()]
        return out + [(p, head_value) for p in net.head_parameters(n)]


def build_surrogate_objective(net: BackLinkNet, n: int, x: np.ndarray, labels: np.ndarray,
                              ctx: ForwardContext | None = None) -> SurrogateObjective:
    if not 0 <= n < net.K:
        raise ConfigError(f"module index {n} out of range for K={net.K}")
    return SurrogateObjective(net, n, x, labels, ctx)


def monolithic_gradients(net: BackLinkNet, x: np.ndarray, labels: np.ndarray, head_weights: Sequence[float],
                         ctx: ForwardContext | None = None) -> dict[Tensor, np.ndarray]:
    """Plain end-to-end backprop of ``sum_n w_n * L_n`` with no barriers or scaling."""
    ctx = (ctx or ForwardContext()).replace(param_scale=1.0)
    tape = Tape()
    logits = []
    with tape:
        h = Tensor(np.asarray(x, dtype=net.dtype))
        for n in range(net.K):
            for unit in net.module_units(n):
                h = unit.forward(h, ctx)
            logits.append(net.heads[n].forward(h, ctx))
    seeds = {}
    for lg, w in zip(logits, head_weights):
        if w:
            seeds[lg] = w * softmax_xent(lg.data, labels)[1]
    grads = ad.backward(tape, seeds)
    return {p: grads.get(p, np.zeros(p.shape, dtype=p.dtype)) for p in net.parameters()}


def component_gradients(net: BackLinkNet, n: int, x: np.ndarray, labels: np.ndarray,
                        ctx: ForwardContext | None = None) -> tuple[dict, dict]:
    """Unweighted local and global gradient fields of module ``n``, from two separate passes.

    ``g_local`` is the gradient of ``L_n`` with module ``n`` cut from its
    input; ``g_global`` is the gradient of ``L_{n+1}`` cut at module ``n``'s
    range entry.  Neither pass uses scale nodes.
    """
    ctx = (ctx or ForwardContext()).replace(update_stats=False, param_scale=1.0)
    obj = SurrogateObjective(net, n, x, labels, ctx)
    units = net.module_units(n)
    r = obj.span

    tape = Tape()
    with tape:
        h = Tensor(obj.module_input.data)
        h = _run_units(units, h, ctx, [1.0] * len(units))
        lg = net.heads[n].forward(h, ctx)
    g_local = ad.backward(tape, {lg: softmax_xent(lg.data, labels)[1]})

    g_global: dict = {}
    if r > 0:
        tape = Tape()
        with tape:
            h = Tensor(obj.range_entry.data)
            h = _run_units(net.range_units(n), h, ctx, [1.0] * r)
            nxt = net.module_units(n + 1)
            h = _run_units(nxt, h, ctx, [1.0] * len(nxt))
            lg = net.heads[n + 1].forward(h, ctx)
        g_global = ad.backward(tape, {lg: softmax_xent(lg.data, labels)[1]})

    params = net.module_parameters(n)
    zero = lambda p: np.zeros(p.shape, dtype=p.dtype)  # noqa: E731
    return ({p: g_local.get(p, zero(p)) for p in params}, {p: g_global.get(p, zero(p)) for p in params})


def packet_route_module(net: BackLinkNet, n: int, x: np.ndarray, labels: np.ndarray,
                        ctx: ForwardContext | None = None) -> dict[Tensor, np.ndarray]:
    """Error-packet routing of module ``n``'s backbone, one unit at a time.

    Builds a separate tape per unit, injects the boundary packet and walks it
    down with :func:`propagate_in_range`; below the range only the local
    component continues.  Parameter gradients are pulled from each unit's tape
    with the combined packet error.  Honours ``literal_reweighting``.
    """
    ctx = (ctx or ForwardContext()).replace(update_stats=False, param_scale=1.0)
    cfg, plan = net.config, net.plan
    obj = SurrogateObjective(net, n, x, labels, ctx)
    units = net.module_units(n)

    tapes, ins, outs = [], [], []
    h = obj.module_input
    for unit in units:
        tape = Tape()
        with tape:
            xi = Tensor(h.data, requires_grad=True)
            yi = unit.forward(xi, ctx)
        tapes.append(tape)
        ins.append(xi)
        outs.append(yi)
        h = yi

    with Tape() as ht:
        feat = Tensor(h.data, requires_grad=True)
        lg = net.heads[n].forward(feat, ctx)
    local = ad.backward(ht, {lg: softmax_xent(lg.data, labels)[1]}, wrt=[feat])[feat]

    r = obj.span
    glob = None
    if r > 0:
        with Tape() as gt:
            entry = Tensor(outs[-1].data, requires_grad=True)
            h2 = entry
            for unit in net.module_units(n + 1):
                h2 = unit.forward(h2, ctx)
            lg2 = net.heads[n + 1].forward(h2, ctx)
        glob = ad.backward(gt, {lg2: softmax_xent(lg2.data, labels)[1]}, wrt=[entry])[entry]

    packet = inject_boundary_error(local, glob, cfg.effective_alpha(plan, n), r)
    grads: dict[Tensor, np.ndarray] = {}
    for i in reversed(range(len(units))):
        tape, xi, yi = tapes[i], ins[i], outs[i]
        params = units[i].parameters()
        g = ad.backward(tape, {yi: packet.combined()}, wrt=params + [xi])
        for p in params:
            grads[p] = g[p]
        if i == 0:
            break

        def vjp(err, tape=tape, xi=xi, yi=yi):
            return ad.backward(tape, {yi: err}, wrt=[xi])[xi]

        if packet.depth_remaining > 0:
            literal_alpha = cfg.alpha if (cfg.literal_reweighting and packet.depth_remaining > 1) else None
            packet = propagate_in_range(packet, vjp, alpha=literal_alpha)
        else:
            packet = ErrorPacket(vjp(packet.local), None, 0)
    return grads
