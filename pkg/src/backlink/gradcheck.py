"""Finite-difference and limit-case oracles for the router.

Central differences use ``h = 1e-5 * max(1, |w|)``.  ReLU and max-pool make the
objectives piecewise smooth; when a perturbation flips any activation pattern
the entry is retried with ``h / 10`` and ``h / 100`` and skipped if it still
straddles a kink.  Skips are counted and reported.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import ForwardContext, NetworkSpec, random_tiny_network
from .router import (
    BackLinkConfig,
    BackLinkNet,
    build_surrogate_objective,
    component_gradients,
    compute_gradients,
    monolithic_gradients,
    partition,
)

FD_STEP = 1e-5
FD_TOL = 1e-4
# Norm floor below which gradients are compared absolutely; central-difference
# round-off in float64 is ~1e-10 per entry for O(1) objectives.
NORM_FLOOR = 1e-5


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = NORM_FLOOR) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def max_abs_diff(ga: dict, gb: dict) -> float:
    return max((float(np.max(np.abs(ga[p] - gb[p]))) if ga[p].size else 0.0) for p in ga)


def _patterns_equal(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def fd_gradient(f: Callable[[], float], param: Tensor, step: float = FD_STEP, retries: int = 2):
    """Central-difference gradient of ``f`` with respect to ``param``.

    Returns ``(grad, skipped)`` where ``skipped`` is a boolean mask of entries
    whose every step size crossed a non-differentiable point.
    """
    base = param.data
    with ad.record_patterns() as ref:
        f()
    work = base.copy()
    grad = np.zeros(base.shape, dtype=np.float64)
    skipped = np.zeros(base.shape, dtype=bool)
    try:
        param.data = work
        for idx in np.ndindex(base.shape):
            v = float(base[idx])
            h = step * max(1.0, abs(v))
            for _ in range(retries + 1):
                work[idx] = v + h
                with ad.record_patterns() as plus:
                    fp = f()
                work[idx] = v - h
                with ad.record_patterns() as minus:
                    fm = f()
                work[idx] = v
                if _patterns_equal(plus, ref) and _patterns_equal(minus, ref):
                    grad[idx] = (fp - fm) / (2 * h)
                    break
                h /= 10
            else:
                skipped[idx] = True
    finally:
        param.data = base
    return grad, skipped


@dataclass
class ParamCheck:
    name: str
    module: int
    rel_error: float
    skipped: int
    size: int


@dataclass
class ModuleReport:
    module: int
    checks: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((c.rel_error for c in self.checks), default=0.0)

    @property
    def skipped(self) -> int:
        return sum(c.skipped for c in self.checks)


def check_router_against_fd(net: BackLinkNet, x: np.ndarray, labels: np.ndarray,
                            ctx: ForwardContext | None = None, tamper: Callable | None = None) -> list[ModuleReport]:
    """Compare routed gradients with finite differences of each module's surrogate.

    ``tamper`` is a test hook: it receives the routed gradient dict and may
    corrupt it before comparison.
    """
    ctx = ctx or ForwardContext()
    snapshot = net.state()
    grads, _, _ = compute_gradients(net, x, labels, ctx)
    net.load_state(snapshot)  # undo the running-statistics update
    if tamper is not None:
        tamper(grads)
    reports = []
    for n in range(net.K):
        obj = build_surrogate_objective(net, n, x, labels, ctx)
        report = ModuleReport(n)
        for p, f in obj.targets():
            fd, skipped = fd_gradient(f, p)
            keep = ~skipped
            err = relative_error(grads[p][keep], fd[keep])
            report.checks.append(ParamCheck(p.name, n, err, int(skipped.sum()), p.data.size))
        reports.append(report)
    return reports


def random_case(seed: int, batch: int = 4, input_shape=(2, 4, 4), num_classes: int = 3, max_width: int = 4):
    """A random tiny network, partition, config and batch for oracle sweeps."""
    rng = np.random.default_rng(seed)
    spec = random_tiny_network(rng, input_shape=input_shape, num_classes=num_classes, max_width=max_width)
    K = int(rng.integers(1, min(4, len(spec.units)) + 1))
    plan = partition(len(spec.units), K)
    l = int(rng.integers(0, max(plan.sizes) + 1))
    alpha = float(rng.choice([0.0, 0.25, 0.5, 0.75, 1.0]))
    cfg = BackLinkConfig(l=l, alpha=alpha)
    net = BackLinkNet(spec, plan, cfg, seed=seed, precision="wide")
    x = rng.standard_normal((batch, *input_shape))
    y = rng.integers(0, num_classes, batch)
    return net, x, y


def with_config(net: BackLinkNet, **changes) -> BackLinkNet:
    """Same parameter values under a different plan or config."""
    cfg = net.config
    new_cfg = BackLinkConfig(changes.get("l", cfg.l), changes.get("alpha", cfg.alpha), cfg.classifier,
                             changes.get("literal_reweighting", cfg.literal_reweighting))
    plan = changes.get("plan", net.plan)
    other = BackLinkNet(net.spec, plan, new_cfg, seed=net.seed, precision=net.dtype)
    if plan == net.plan:
        other.load_state(net.state())
    return other


# ---------------------------------------------------------------------------
# Limit-case invariants
# ---------------------------------------------------------------------------

def bp_equivalence_error(net: BackLinkNet, x, y) -> float:
    """K=1 routed gradients versus plain backprop (max abs difference)."""
    g, _, _ = compute_gradients(net, x, y)
    mono = monolithic_gradients(net, x, y, [1.0])
    return max_abs_diff(g, mono)


def gll_invariance_holds(net: BackLinkNet, x, y, seed: int = 0) -> bool:
    """With l=0, module n's gradients ignore every downstream parameter (exact)."""
    state = net.state()
    base, _, _ = compute_gradients(net, x, y)
    rng = np.random.default_rng(seed)
    ok = True
    for n in range(net.K - 1):
        net.load_state(state)
        for m in range(n + 1, net.K):
            for p in net.module_parameters(m):
                p.data = rng.standard_normal(p.shape).astype(p.dtype)
        again, _, _ = compute_gradients(net, x, y)
        ok &= all(np.array_equal(base[p], again[p]) for n2 in range(n + 1) for p in net.module_parameters(n2))
    net.load_state(state)
    return bool(ok)


def alpha_one_error(net: BackLinkNet, x, y) -> float:
    """alpha=1 with the configured l against l=0 (max abs difference over all parameters)."""
    a = with_config(net, alpha=1.0)
    b = with_config(net, alpha=1.0, l=0)
    ga, _, _ = compute_gradients(a, x, y)
    gb, _, _ = compute_gradients(b, x, y)
    pa, pb = a.parameters(), b.parameters()
    return max(float(np.max(np.abs(ga[p] - gb[q]))) for p, q in zip(pa, pb))


def full_span_monolithic_error(net: BackLinkNet, x, y) -> float:
    """K=2, l=module size, alpha=0.5: module-1 backbone vs monolithic 0.5 L1 + 0.5 L2 (max relative error)."""
    g, _, _ = compute_gradients(net, x, y)
    mono = monolithic_gradients(net, x, y, [0.5, 0.5])
    return max(relative_error(g[p], mono[p]) for p in net.backbone_parameters(0))


def linearity_error(net: BackLinkNet, x, y) -> float:
    """Routed gradients versus alpha * g_local + (1 - alpha) * g_global from two separate passes."""
    g, _, _ = compute_gradients(net, x, y)
    worst = 0.0
    for n in range(net.K):
        a = net.config.effective_alpha(net.plan, n)
        gl, gg = component_gradients(net, n, x, y)
        for p in net.backbone_parameters(n):
            expected = a * gl[p] + (1 - a) * gg[p]
            worst = max(worst, float(np.max(np.abs(g[p] - expected))) if p.data.size else 0.0)
        for p in net.head_parameters(n):
            worst = max(worst, float(np.max(np.abs(g[p] - gl[p]))))
    return worst
