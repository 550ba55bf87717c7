"""Command-line front end: ``backlink {train,gradcheck,costmodel,pipesim}``.

Exit status: 0 success, 1 invalid configuration, 2 a verification check
failed (or a run stalled), 3 file input/output problem.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import records as rec
from .config import OUT_ENV, ExperimentConfig, load_config
from .costmodel import (
    CostModel,
    bp_path,
    critical_path,
    estimate_memory,
    estimate_runtime,
    steady_state_speedup,
    synthetic_trace,
    trace_records,
)
from .errors import BackLinkError, ConfigError, DataError, SchedulingError, ShapeError
from .gradcheck import (
    FD_TOL,
    alpha_one_error,
    bp_equivalence_error,
    check_router_against_fd,
    full_span_monolithic_error,
    gll_invariance_holds,
    linearity_error,
)
from .layers import BatchNorm, Conv3x3, Dense, ResidualBlock
from .pipeline import TrainJob, run_pipeline, run_sequential
from .router import BackLinkConfig, BackLinkNet, partition

log = logging.getLogger("backlink")

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY, EXIT_IO = 0, 1, 2, 3
GRADCHECK_MAX_UNITS = 8
GRADCHECK_MAX_WIDTH = 16
TOLERANCES = {"bp_equivalence": 1e-10, "alpha_one": 1e-10, "linearity": 1e-10, "full_span_monolithic": 1e-6,
              "gll_invariance": 0.0, "fd": FD_TOL}
PIPE_EQUIV_TOL = {"wide": 1e-10, "standard": 1e-4}


class VerificationFailed(BackLinkError):
    pass


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    return cfg.override(**{
        "seed": args.seed, "seeds": args.seeds, "execution.mode": args.mode,
        "execution.staleness": args.staleness, "precision": args.precision,
    })


def _setup(cfg: ExperimentConfig):
    """Datasets first, then a network whose input matches them."""
    train, test = cfg.datasets()
    spec = cfg.network(input_shape=train.images.shape[1:], num_classes=train.num_classes)
    return train, test, spec, cfg.plan(spec), cfg.backlink(spec)


def _header(cfg: ExperimentConfig, command: str, seed: int, mode: str, spec=None, plan=None, bl=None) -> dict:
    extra = {}
    if spec is not None:
        extra.update(network=spec.name, units=len(spec.units))
    if plan is not None:
        extra["partition"] = list(plan.sizes)
    if bl is not None:
        extra.update(l=bl.l, alpha=bl.alpha)
    return rec.make("header", cfg.hash(), command=command, seed=seed, mode=mode, precision=cfg.raw["precision"],
                    warnings=list(cfg.warnings), **extra)


def _job(cfg: ExperimentConfig, spec, plan, bl, train, test, seed: int, record_trajectory=False) -> TrainJob:
    o = cfg.raw["optim"]
    return TrainJob(spec, plan, bl, train, test, epochs=cfg.raw["epochs"], batch_size=o["batch_size"],
                    schedule=cfg.schedule(), momentum=o["momentum"], weight_decay=o["weight_decay"],
                    decay_all=o["decay_all"], seed=seed, precision=cfg.raw["precision"],
                    augment=cfg.raw["data"]["augment"], max_batches=cfg.raw["max_batches"],
                    record_trajectory=record_trajectory)


def _mode_name(cfg: ExperimentConfig) -> str:
    ex = cfg.raw["execution"]
    return "sequential" if ex["mode"] == "sequential" else f"pipeline-s{ex['staleness']}"


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig, out: Path) -> dict:
    train, test, spec, plan, bl = _setup(cfg)
    ex = cfg.raw["execution"]
    mode = _mode_name(cfg)
    seeds = [cfg.raw["seed"] + i for i in range(cfg.raw["seeds"])]
    records = [_header(cfg, "train", seeds[0], mode, spec, plan, bl)]
    finals: dict[str, list[float]] = {"final_test_accuracy": [], "final_loss": []}
    for seed in seeds:
        job = _job(cfg, spec, plan, bl, train, test, seed)
        if ex["mode"] == "sequential":
            m = run_sequential(job)
        else:
            m = run_pipeline(job, ex["staleness"], ex["capacity"], ex["timeout"])
        for r in m.records:
            records.append(rec.make("epoch", cfg.hash(), seed=seed, mode=mode, epoch=r.epoch, lr=r.lr, loss=r.loss,
                                    train_accuracy=r.train_accuracy, test_accuracy=r.test_accuracy,
                                    head_test_accuracy=r.head_test_accuracy))
            log.info("seed %d epoch %d loss %s test %s", seed, r.epoch, np.round(r.loss, 4), r.test_accuracy)
        last = m.records[-1]
        finals["final_loss"].append(last.loss[-1])
        if last.test_accuracy is not None:
            finals["final_test_accuracy"].append(last.test_accuracy)
    for metric, values in finals.items():
        if values:
            records.append(rec.make("aggregate", cfg.hash(), seeds=seeds, metric=metric, values=values,
                                    mean=float(np.mean(values)), std=float(np.std(values))))
    rec.write_jsonl(out / "train.jsonl", records)
    rec.write_csv(out / "train.csv", rec.epoch_rows(records), rec.EPOCH_COLUMNS)
    return {"records": records}


def _max_width(spec) -> int:
    widths = []
    for unit in spec.units:
        for layer in unit:
            if isinstance(layer, Dense):
                widths.append(layer.out_features)
            elif isinstance(layer, (Conv3x3, ResidualBlock)):
                widths.append(layer.out_channels)
            elif isinstance(layer, BatchNorm):
                widths.append(layer.channels)
    return max(widths, default=0)


def cmd_gradcheck(cfg: ExperimentConfig, out: Path, corrupt: bool = False) -> dict:
    spec = cfg.network()
    if len(spec.units) > GRADCHECK_MAX_UNITS or _max_width(spec) > GRADCHECK_MAX_WIDTH:
        raise ConfigError(f"gradcheck runs finite differences over every weight; it accepts at most "
                          f"{GRADCHECK_MAX_UNITS} units of width <= {GRADCHECK_MAX_WIDTH} "
                          f"(got {len(spec.units)} units, width {_max_width(spec)})")
    plan, bl = cfg.plan(spec), cfg.backlink(spec)
    seed = cfg.raw["seed"]
    net = BackLinkNet(spec, plan, bl, seed=seed, precision="wide")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, *spec.input_shape))
    y = rng.integers(0, spec.num_classes, 4)

    def tamper(grads):
        p = net.backbone_parameters(0)[0]
        grads[p] = grads[p] + 0.1 * (np.linalg.norm(grads[p]) + 1.0)

    results = []
    for report in check_router_against_fd(net, x, y, tamper=tamper if corrupt else None):
        results.append(("fd", report.module, report.max_rel_error))
    if plan.K == 1:
        results.append(("bp_equivalence", None, bp_equivalence_error(net, x, y)))
    elif bl.l == 0:
        results.append(("gll_invariance", None, 0.0 if gll_invariance_holds(net, x, y, seed) else 1.0))
    if plan.K == 2 and bl.l >= plan.sizes[0] and bl.alpha == 0.5 and not bl.literal_reweighting:
        results.append(("full_span_monolithic", 0, full_span_monolithic_error(net, x, y)))
    results.append(("alpha_one", None, alpha_one_error(net, x, y)))
    results.append(("linearity", None, linearity_error(net, x, y)))

    records = [_header(cfg, "gradcheck", seed, "wide", spec, plan, bl)]
    for check, module, value in results:
        tol = TOLERANCES[check]
        records.append(rec.make("gradcheck", cfg.hash(), check=check, module=module, value=float(value),
                                tolerance=tol, passed=bool(value <= tol)))
    rec.write_jsonl(out / "gradcheck.jsonl", records)
    failed = [r for r in records[1:] if not r["passed"]]
    for r in records[1:]:
        where = "" if r["module"] is None else f" module {r['module']}"
        print(f"{'PASS' if r['passed'] else 'FAIL'} {r['check']}{where}: {r['value']:.3e} (tol {r['tolerance']:.0e})")
    if failed:
        raise VerificationFailed(f"{len(failed)} gradient check(s) exceeded tolerance: "
                                 + ", ".join(f"{r['check']}[{r['module']}]" for r in failed))
    return {"records": records}


def cost_rows(cfg: ExperimentConfig) -> list[dict]:
    c = cfg.raw["costmodel"]
    if c["uniform_units"]:
        cost = CostModel.uniform(int(c["uniform_units"]), classifier=float(c["classifier_footprint"]),
                                 comm=float(c["comm"]))
    else:
        spec = cfg.network()
        cost = CostModel.from_network(spec, cfg.backlink(spec).classifier, float(c["comm"]))
    n = cost.n_units
    t1, t2 = (int(b) for b in c["batches"])
    bp_mem = estimate_memory(cost, partition(n, 1), BackLinkConfig(), "BP").peak
    bp_time = bp_path(cost, t2)
    rows = []
    for K in c["K"]:
        plan = partition(n, int(K))
        ls = [0] if K == 1 else sorted({int(l) for l in c["l"]})
        for l in ls:
            mode = "BP" if K == 1 else ("GLL" if l == 0 else "BackLink")
            bl = BackLinkConfig(l, 0.5)
            peak = estimate_memory(cost, plan, bl, mode).peak
            path = critical_path(synthetic_trace(plan, bl, t2), cost)
            speed = 1.0 if K == 1 else steady_state_speedup(cost, plan, bl, batches=(t1, t2))
            rows.append(rec.make("cost", cfg.hash(), K=int(K), l=l, mode=mode, peak_memory=peak,
                                 relative_memory=peak / bp_mem, critical_path=path,
                                 relative_runtime=path / bp_time, speedup=speed))
    return rows


def cmd_costmodel(cfg: ExperimentConfig, out: Path) -> dict:
    rows = cost_rows(cfg)
    records = [_header(cfg, "costmodel", cfg.raw["seed"], "analytic")] + rows
    rec.write_jsonl(out / "costmodel.jsonl", records)
    rec.write_csv(out / "costmodel.csv", rows, rec.COST_COLUMNS)
    for r in rows:
        print(f"K={r['K']:>3} l={r['l']} {r['mode']:<8} memory {r['relative_memory']:.3f}  "
              f"runtime {r['relative_runtime']:.3f}  speedup {r['speedup']:.2f}")
    return {"records": records}


def cmd_pipesim(cfg: ExperimentConfig, out: Path) -> dict:
    train, test, spec, plan, bl = _setup(cfg)
    if plan.K < 2:
        raise ConfigError("pipesim needs partition.K >= 2")
    ex = cfg.raw["execution"]
    staleness = ex["staleness"]
    seed = cfg.raw["seed"]
    check = staleness == 0
    job = _job(cfg, spec, plan, bl, train, test, seed, record_trajectory=check)
    m = run_pipeline(job, staleness, ex["capacity"], ex["timeout"])
    cost = CostModel.from_network(spec, bl.classifier, float(cfg.raw["costmodel"]["comm"]))
    est = estimate_runtime(m.trace, cost)
    eq_err = eq_ok = None
    if check:
        ref = run_sequential(job)
        eq_err = max(float(np.max(np.abs(a[k] - b[k]))) for a, b in zip(ref.trajectory, m.trajectory) for k in a)
        eq_ok = eq_err <= PIPE_EQUIV_TOL[cfg.raw["precision"]]
    n_batches = len({e.tag for e in m.trace.events})
    summary = rec.make("pipesim", cfg.hash(), K=plan.K, l=bl.l, staleness=staleness, batches=n_batches,
                       critical_path=est.critical_path, bp_path=est.bp_path, speedup=est.speedup,
                       steady_state_speedup=steady_state_speedup(cost, plan, bl, staleness, ex["capacity"]),
                       sync_messages=m.sync_messages, sync_sizes={str(k): v for k, v in m.sync_sizes.items()},
                       equivalence_error=eq_err, equivalence_passed=eq_ok)
    header = _header(cfg, "pipesim", seed, f"pipeline-s{staleness}", spec, plan, bl)
    events = [rec.make("trace_event", cfg.hash(), **r) for r in trace_records(m.trace, cost)]
    rec.write_jsonl(out / "pipesim.jsonl", [header, summary])
    rec.write_jsonl(out / "pipesim_trace.jsonl", [header] + events)
    rec.write_csv(out / "pipesim_trace.csv", events, rec.TRACE_COLUMNS)
    print(f"modeled speedup {est.speedup:.3f} over {n_batches} batches, steady state "
          f"{summary['steady_state_speedup']:.3f}; {m.sync_messages} gradient messages")
    if check:
        print(f"{'PASS' if eq_ok else 'FAIL'} lock-step equivalence max diff {eq_err:.3e}")
        if not eq_ok:
            raise VerificationFailed(f"lock-step pipeline diverged from sequential run by {eq_err:.3e}")
    return {"records": [header, summary] + events}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="backlink", description="Local training with restricted inter-module error flow.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {"train": "train and write per-epoch metrics",
             "gradcheck": "finite-difference and limit-case verification on a tiny network",
             "costmodel": "memory/runtime model sweep over K and l",
             "pipesim": "run the threaded pipeline and report its schedule"}
    for name, text in helps.items():
        s = sub.add_parser(name, help=text, parents=[common])
        s.add_argument("--config", metavar="PATH", help="YAML experiment config (defaults apply if omitted)")
        s.add_argument("--seed", type=int)
        s.add_argument("--seeds", type=int, help="number of consecutive seeds to run")
        s.add_argument("--out", metavar="DIR", help=f"output directory (default: ${OUT_ENV} or ./runs)")
        s.add_argument("--mode", choices=("sequential", "pipeline"))
        s.add_argument("--staleness", type=int, choices=(0, 1))
        s.add_argument("--precision", choices=("wide", "standard"))
        if name == "gradcheck":
            s.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = _config(args)
        out = cfg.out_dir(args.out)
        if args.command == "train":
            cmd_train(cfg, out)
        elif args.command == "gradcheck":
            cmd_gradcheck(cfg, out, corrupt=args.corrupt_gradient)
        elif args.command == "costmodel":
            cmd_costmodel(cfg, out)
        else:
            cmd_pipesim(cfg, out)
    except (ConfigError, ShapeError) as exc:
        sys.stdout.flush()
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (VerificationFailed, SchedulingError) as exc:
        sys.stdout.flush()
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (DataError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
