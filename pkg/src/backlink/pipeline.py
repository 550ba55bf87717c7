"""Sequential and pipelined training loops.

``run_sequential`` is the reference: one unfolded forward and one reverse
pass per batch, then a step per module.  ``run_pipeline`` runs one thread
per module.  Threads share nothing but bounded FIFO queues: activations
travel forward together with a snapshot of the sender's in-range parameter
values; concatenated global-path gradients of the duplicated units travel
back.  Results are fixed by batch tags alone, never by thread interleaving.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .costmodel import ScheduleTrace, worker_events
from .data import BatchIterator, DatasetHandle
from .errors import ConfigError, SchedulingError
from .layers import ForwardContext, NetworkSpec, build_sequential
from .optim import SGD, LRSchedule, softmax_xent
from .router import (
    BackLinkConfig,
    BackLinkNet,
    PartitionPlan,
    _run_units,
    compute_gradients,
    module_forward,
    predict,
)

DEFAULT_CAPACITY = 2
DEFAULT_TIMEOUT = 60.0


@dataclass
class TrainJob:
    spec: NetworkSpec
    plan: PartitionPlan
    backlink: BackLinkConfig
    train: DatasetHandle
    test: DatasetHandle | None = None
    epochs: int = 1
    batch_size: int = 128
    schedule: LRSchedule = field(default_factory=lambda: LRSchedule(0.1))
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_all: bool = False
    module_lr_scale: tuple[float, ...] | None = None
    seed: int = 0
    precision: str = "wide"
    augment: bool = False
    max_batches: int | None = None
    record_trajectory: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.module_lr_scale is not None and len(self.module_lr_scale) != self.plan.K:
            raise ConfigError(f"module_lr_scale needs {self.plan.K} entries")
        if self.train.num_classes != self.spec.num_classes:
            raise ConfigError(f"dataset has {self.train.num_classes} classes but the network predicts {self.spec.num_classes}")
        if self.train.images.shape[1:] != tuple(self.spec.input_shape):
            raise ConfigError(f"dataset samples {self.train.images.shape[1:]} do not match network input {self.spec.input_shape}")

    def lr_scale(self, n: int) -> float:
        return 1.0 if self.module_lr_scale is None else float(self.module_lr_scale[n])

    def build_net(self) -> BackLinkNet:
        return BackLinkNet(self.spec, self.plan, self.backlink, seed=self.seed, precision=self.precision)

    def iterator(self, dtype) -> BatchIterator:
        return BatchIterator(self.train, self.batch_size, seed=self.seed, augment=self.augment, dtype=dtype)

    def optimizer(self) -> SGD:
        return SGD(self.schedule.base, self.momentum, self.weight_decay, self.decay_all)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: list[float]           # per module, batch-mean averaged over the epoch
    train_accuracy: list[float]  # per module head
    test_accuracy: float | None  # final head
    head_test_accuracy: list[float] | None = None


@dataclass
class RunMetrics:
    mode: str
    seed: int
    records: list[EpochRecord] = field(default_factory=list)
    trajectory: list[dict[str, np.ndarray]] = field(default_factory=list)
    final_state: dict[str, np.ndarray] = field(default_factory=dict)
    trace: ScheduleTrace | None = None
    sync_messages: int = 0
    sync_sizes: dict[int, int] = field(default_factory=dict)
    queue_log: dict[str, tuple[list, list]] = field(default_factory=dict)
    duplicate_values: dict[int, list] = field(default_factory=dict)


def evaluate(net: BackLinkNet, handle: DatasetHandle, mean, std, batch_size: int = 256) -> list[float]:
    """Per-head accuracy in eval mode."""
    it = BatchIterator(handle, batch_size, mean=mean, std=std, shuffle=False, dtype=net.dtype)
    correct = np.zeros(net.K)
    for x, y in it:
        for n, logits in enumerate(predict(net, x)):
            correct[n] += np.sum(np.argmax(logits, axis=1) == y)
    return [float(c) for c in correct / max(len(handle), 1)]


class _EpochStats:
    def __init__(self, K: int):
        self.loss = np.zeros(K)
        self.correct = np.zeros(K)
        self.samples = 0
        self.batches = 0

    def add(self, n: int, loss: float, logits: np.ndarray, labels: np.ndarray) -> None:
        self.loss[n] += loss
        self.correct[n] += np.sum(np.argmax(logits, axis=1) == labels)

    def close_batch(self, size: int) -> None:
        self.samples += size
        self.batches += 1


def _snapshot(params) -> dict[str, np.ndarray]:
    return {p.name: p.data.copy() for p in params}


# ---------------------------------------------------------------------------
# Sequential reference
# ---------------------------------------------------------------------------

def run_sequential(job: TrainJob) -> RunMetrics:
    net = job.build_net()
    opts = [job.optimizer() for _ in range(net.K)]
    it = job.iterator(net.dtype)
    metrics = RunMetrics("sequential", job.seed)
    step = 0
    for epoch in range(job.epochs):
        lr = job.schedule.at(epoch)
        it.reset(epoch)
        stats = _EpochStats(net.K)
        for b, (x, y) in enumerate(it):
            if job.max_batches is not None and b >= job.max_batches:
                break
            ctx = ForwardContext(train=True, seed=job.seed, step=step)
            grads, losses, record = compute_gradients(net, x, y, ctx)
            for n in range(net.K):
                stats.add(n, losses[n], record.logits[n].data, y)
                if job.lr_scale(n) > 0:
                    params = net.module_parameters(n)
                    opts[n].step(params, [grads[p] for p in params], lr * job.lr_scale(n))
            stats.close_batch(len(y))
            if job.record_trajectory:
                metrics.trajectory.append(_snapshot(net.parameters()))
            step += 1
        metrics.records.append(_close_epoch(net, job, epoch, lr, stats, it))
    metrics.final_state = net.state()
    return metrics


def _close_epoch(net: BackLinkNet, job: TrainJob, epoch: int, lr: float, stats: _EpochStats, it: BatchIterator) -> EpochRecord:
    heads = evaluate(net, job.test, it.mean, it.std) if job.test is not None else None
    return EpochRecord(epoch, lr, [float(v) for v in stats.loss / max(stats.batches, 1)],
                       [float(v) for v in stats.correct / max(stats.samples, 1)], heads[-1] if heads else None, heads)


# ---------------------------------------------------------------------------
# Messages and buffers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ActivationMessage:
    tag: int
    epoch: int
    last_in_epoch: bool
    activation: np.ndarray
    labels: np.ndarray
    params: tuple[np.ndarray, ...]  # sender's in-range parameter values for the duplicate


@dataclass(frozen=True)
class GradSyncMessage:
    tag: int
    flat: np.ndarray
    shapes: tuple[tuple[int, ...], ...]

    @classmethod
    def pack(cls, tag: int, grads: Sequence[np.ndarray]) -> "GradSyncMessage":
        flat = np.concatenate([np.ravel(g) for g in grads]) if grads else np.zeros(0)
        return cls(tag, flat, tuple(np.shape(g) for g in grads))

    def unpack(self) -> list[np.ndarray]:
        out, pos = [], 0
        for shape in self.shapes:
            size = int(np.prod(shape))
            out.append(self.flat[pos: pos + size].reshape(shape))
            pos += size
        if pos != self.flat.size:
            raise SchedulingError(f"gradient message {self.tag} has {self.flat.size - pos} surplus elements")
        return out


END = None  # end-of-stream marker


class ActivationBuffer:
    """Bounded FIFO between two workers; waits are bounded so a stall surfaces as an error."""

    def __init__(self, name: str, capacity: int = DEFAULT_CAPACITY, timeout: float = DEFAULT_TIMEOUT,
                 stop: threading.Event | None = None):
        if capacity < 1:
            raise ConfigError("buffer capacity must be >= 1")
        self.name = name
        self.capacity = capacity
        self.timeout = timeout
        self.stop = stop or threading.Event()
        self._q: queue.Queue = queue.Queue(maxsize=capacity)
        self.put_tags: list[int] = []
        self.got_tags: list[int] = []

    def _wait(self, op):
        deadline = time.monotonic() + self.timeout
        while True:
            if self.stop.is_set():
                raise SchedulingError(f"{self.name}: aborted because another worker failed")
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise SchedulingError(f"{self.name}: no progress within {self.timeout:.3g}s (deadlock?)")
            try:
                return op(min(remaining, 0.05))
            except (queue.Full, queue.Empty):
                continue

    def put(self, msg) -> None:
        self._wait(lambda t: self._q.put(msg, timeout=t))
        if msg is not END:
            self.put_tags.append(msg.tag)

    def get(self):
        msg = self._wait(lambda t: self._q.get(timeout=t))
        if msg is not END:
            self.got_tags.append(msg.tag)
        return msg


# ---------------------------------------------------------------------------
# Pipelined execution
# ---------------------------------------------------------------------------

def _module_state(net: BackLinkNet, n: int) -> dict[str, np.ndarray]:
    out = _snapshot(net.module_parameters(n))
    for seq in net.module_units(n) + [net.heads[n]]:
        for layer in seq.layers:
            for k, v in layer.buffers.items():
                out[f"buffer:{layer.uid}:{k}"] = v.copy()
    return out


class _Worker:
    def __init__(self, k: int, net: BackLinkNet, job: TrainJob, staleness: int, inbox, outbox, grads_in, grads_out,
                 stop: threading.Event, fault: str | None):
        self.k, self.net, self.job, self.staleness = k, net, job, staleness
        self.inbox, self.outbox, self.grads_in, self.grads_out = inbox, outbox, grads_in, grads_out
        self.stop, self.fault = stop, fault
        plan, cfg = net.plan, net.config
        self.span = cfg.span(plan, k)               # own in-range units (duplicated downstream)
        self.prev_span = cfg.span(plan, k - 1) if k > 0 else 0
        self.dup_units = []
        if self.prev_span:
            _, stop_unit = plan.bounds(k - 1)
            self.dup_units = [build_sequential(net.spec.units[i], net.seed, net.dtype, uid=(0, i), prefix=f"unit{i}")
                              for i in range(stop_unit - self.prev_span, stop_unit)]
        self.dup_params = [p for u in self.dup_units for p in u.parameters()]
        self.opt = job.optimizer()
        self.events = []
        self.prev_event = None
        self.stats: dict[int, _EpochStats] = {}
        self.epoch_states: dict[int, dict] = {}
        self.trajectory: list[dict] = []
        self.dup_values: list = []
        self.error: BaseException | None = None

    # -- helpers --------------------------------------------------------
    def _emit(self, tag: int, sync_tag: int | None) -> None:
        for e in worker_events(self.net.plan, self.net.config, self.k, tag, self.staleness, self.outbox.capacity
                               if self.outbox else DEFAULT_CAPACITY, self.prev_event, sync_tag):
            self.events.append(e)
            self.prev_event = e.id

    def _batches(self):
        job, it = self.job, self.job.iterator(self.net.dtype)
        tag = 0
        for epoch in range(job.epochs):
            it.reset(epoch)
            n = len(it) if job.max_batches is None else min(len(it), job.max_batches)
            for b in range(n):
                x, y = it.next_batch()
                yield ActivationMessage(tag, epoch, b == n - 1, x, y, ())
                tag += 1

    def _incoming(self):
        if self.k == 0:
            yield from self._batches()
            return
        while True:
            msg = self.inbox.get()
            if msg is END:
                return
            yield msg

    def _take_sync(self, tag: int) -> tuple[list[np.ndarray] | None, int | None]:
        if not self.span or self.k == self.net.K - 1:
            return None, None
        want = tag - self.staleness
        if want < 0:
            return None, None
        msg = self.grads_in.get()
        if msg is END or msg.tag != want:
            raise SchedulingError(f"worker {self.k}: expected gradients for batch {want}, got "
                                  f"{'end of stream' if msg is END else msg.tag}")
        return msg.unpack(), want

    # -- main loop ------------------------------------------------------
    def run(self) -> None:
        try:
            self._run()
        except BaseException as exc:  # surfaced by the coordinator
            self.error = exc
            self.stop.set()

    def _run(self) -> None:
        net, k, job = self.net, self.k, self.job
        cfg, plan = net.config, net.plan
        last_tag = -1
        for msg in self._incoming():
            tag = last_tag = msg.tag
            ctx = ForwardContext(train=True, seed=job.seed, step=tag)
            # forward: duplicated predecessor units, then the owned module
            dup_out = None
            if self.prev_span:
                for p, v in zip(self.dup_params, msg.params):
                    p.data = v
                if job.record_trajectory:
                    self.dup_values.append((tag, [v.copy() for v in msg.params]))
                with Tape() as dup_tape:
                    h = _run_units(self.dup_units, Tensor(msg.activation), ctx.replace(update_stats=False),
                                   cfg.global_scales(plan, k - 1))
                    dup_out = ad.scale_grad(h, 1.0 - cfg.alpha)
                x_in = Tensor(dup_out.data, requires_grad=True)
            else:
                x_in = Tensor(msg.activation)
            with Tape() as tape:
                entry, _, logits = module_forward(net, k, x_in, ctx)
            if self.outbox is not None:
                self.outbox.put(ActivationMessage(tag, msg.epoch, msg.last_in_epoch, entry.data, msg.labels,
                                                  tuple(p.data for p in net.range_parameters(k))))
            loss, delta = softmax_xent(logits.data, msg.labels)
            stats = self.stats.setdefault(msg.epoch, _EpochStats(net.K))
            stats.add(k, loss, logits.data, msg.labels)
            stats.close_batch(len(msg.labels))

            # backward: local path, then the global path through the duplicate
            params = net.module_parameters(k)
            wrt = params + ([x_in] if dup_out is not None else [])
            g_local = ad.backward(tape, {logits: delta}, wrt=wrt)
            if dup_out is not None:
                g_dup = ad.backward(dup_tape, {dup_out: g_local[x_in]}, wrt=self.dup_params)
                if self.fault != "drop_sync":
                    self.grads_out.put(GradSyncMessage.pack(tag, [g_dup[p] for p in self.dup_params]))

            # step with the successor's global gradients for the in-range units
            g_global, sync_tag = self._take_sync(tag)
            grads = [g_local[p] for p in params]
            if g_global is not None:
                offset = len(params) - len(net.range_parameters(k)) - len(net.head_parameters(k))
                for i, g in enumerate(g_global):
                    grads[offset + i] = grads[offset + i] + g
            self._emit(tag, sync_tag)
            if job.lr_scale(k) > 0:
                self.opt.step(params, grads, job.schedule.at(msg.epoch) * job.lr_scale(k))
            if job.record_trajectory:
                self.trajectory.append(_snapshot(params))
            if msg.last_in_epoch:
                self.epoch_states[msg.epoch] = _module_state(net, k)
        if self.outbox is not None:
            self.outbox.put(END)
        # decoupled mode leaves the last batch's global gradients in flight; drain them
        if self.staleness and self.span and k < net.K - 1 and last_tag >= 0:
            msg = self.grads_in.get()
            if msg is END or msg.tag != last_tag:
                raise SchedulingError(f"worker {k}: expected trailing gradients for batch {last_tag}")


def run_pipeline(job: TrainJob, staleness: int = 1, capacity: int = DEFAULT_CAPACITY,
                 timeout: float = DEFAULT_TIMEOUT, fault: str | None = None) -> RunMetrics:
    """K worker threads connected by bounded queues.

    ``staleness=0`` makes each owner wait for the same batch's global
    gradients (lock-step, equal to :func:`run_sequential`); ``staleness=1``
    applies the previous batch's.  ``fault`` injects a failure for tests
    (``"drop_sync"`` withholds gradient messages).
    """
    if job.plan.K < 2:
        raise ConfigError("pipeline execution needs K >= 2 modules")
    if staleness not in (0, 1):
        raise ConfigError(f"staleness must be 0 or 1, got {staleness}")
    net = job.build_net()
    K = net.K
    stop = threading.Event()
    acts = [ActivationBuffer(f"activations {k}->{k + 1}", capacity, timeout, stop) for k in range(K - 1)]
    syncs = [ActivationBuffer(f"gradients {k + 1}->{k}", capacity, timeout, stop) for k in range(K - 1)]
    workers = [
        _Worker(k, net, job, staleness,
                inbox=acts[k - 1] if k > 0 else None,
                outbox=acts[k] if k < K - 1 else None,
                grads_in=syncs[k] if k < K - 1 else None,
                grads_out=syncs[k - 1] if k > 0 else None,
                stop=stop, fault=fault)
        for k in range(K)
    ]
    threads = [threading.Thread(target=w.run, name=f"worker-{w.k}", daemon=True) for w in workers]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    errors = [w.error for w in workers if w.error is not None]
    if errors:
        primary = next((e for e in errors if "aborted" not in str(e)), errors[0])
        if isinstance(primary, SchedulingError):
            raise primary
        raise SchedulingError(f"worker failed: {primary!r}") from primary

    metrics = RunMetrics(f"pipeline(staleness={staleness})", job.seed)
    metrics.trace = ScheduleTrace(net.plan, net.config, staleness, capacity,
                                  [e for w in workers for e in w.events])
    metrics.sync_messages = sum(len(q.put_tags) for q in syncs)
    metrics.sync_sizes = {k: int(sum(p.data.size for p in net.range_parameters(k))) for k in range(K - 1)
                          if net.config.span(net.plan, k)}
    metrics.queue_log = {q.name: (q.put_tags, q.got_tags) for q in acts + syncs}
    metrics.duplicate_values = {w.k: w.dup_values for w in workers if w.dup_values}
    if job.record_trajectory:
        metrics.trajectory = [{name: v for w in workers for name, v in w.trajectory[t].items()}
                              for t in range(len(workers[0].trajectory))]

    it = job.iterator(net.dtype)
    eval_net = job.build_net()
    for epoch in range(job.epochs):
        state = {}
        for w in workers:
            state.update(w.epoch_states[epoch])
        eval_net.load_state(state)
        stats = [w.stats[epoch] for w in workers]
        loss = [float(s.loss[w.k] / max(s.batches, 1)) for s, w in zip(stats, workers)]
        acc = [float(s.correct[w.k] / max(s.samples, 1)) for s, w in zip(stats, workers)]
        heads = evaluate(eval_net, job.test, it.mean, it.std) if job.test is not None else None
        metrics.records.append(EpochRecord(epoch, job.schedule.at(epoch), loss, acc, heads[-1] if heads else None, heads))
    metrics.final_state = net.state()
    return metrics
