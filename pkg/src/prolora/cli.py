"""Command-line interface.

Machine-readable JSON goes to stdout; human diagnostics go to stderr. Exit
code 0 means every requested check passed. All stochastic behavior is
controlled by explicit --seed flags (default 0); there is no environment
fallback.

Commands: plan, count, train, gradcheck, equiv, ablate, export, merge.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import adapter, container, planner, reference, training
from .adapter import AdapterConfig

_DTYPES = {"f32": "<f4", "f64": "<f8"}


def _emit(payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _note(message: str) -> None:
    print(message, file=sys.stderr)


def _add_config_flags(p: argparse.ArgumentParser, need_rank: bool = True) -> None:
    p.add_argument("--rank", "-r", type=int, required=need_rank, help="total rank r")
    p.add_argument("--unshared", "-u", type=int, default=0, help="unshared rank u")
    p.add_argument("--share-m", type=int, default=1, help="copies along the A side")
    p.add_argument("--share-n", type=int, default=1, help="copies along the B side")
    p.add_argument("--stride-a", type=int, default=None, help="rotation stride for A copies")
    p.add_argument("--stride-b", type=int, default=None, help="rotation stride for B copies")
    p.add_argument("--alpha", type=float, default=16.0, help="scaling numerator of alpha/r")
    p.add_argument("--dropout", type=float, default=0.1, help="adapter-path dropout rate")
    p.add_argument("--share-axis", choices=("hidden", "rank"), default="hidden")
    p.add_argument("--rotate-axis", choices=("hidden", "rank"), default="rank")


def _config_from_args(args: argparse.Namespace) -> AdapterConfig:
    return AdapterConfig(
        r=args.rank, u=args.unshared, m=args.share_m, n=args.share_n,
        stride_a=args.stride_a, stride_b=args.stride_b, alpha=args.alpha,
        dropout_rate=args.dropout, share_axis=args.share_axis,
        rotate_axis=args.rotate_axis,
    )


def _cmd_plan(args: argparse.Namespace) -> int:
    arch = planner.resolve_arch(args.arch)
    if args.budget is not None:
        candidates = planner.solve_budget(arch, args.budget, args.tolerance)
        payload = {
            "arch": arch.name,
            "budget": args.budget,
            "tolerance": args.tolerance,
            "candidates": [c.to_dict() for c in candidates],
        }
        if not candidates:
            payload["report"] = "no feasible config"
            _note(f"no feasible config within budget {args.budget} (+{args.tolerance:.1%})")
        _emit(payload)
        return 0
    if args.rank is None:
        _note("plan needs either --rank or --budget")
        return 2
    cfg = None
    if args.method == "prolora":
        cfg = _config_from_args(args)
    report = planner.plan_report(arch, args.method, r=args.rank, cfg=cfg)
    _emit(report.to_dict())
    if args.pretty:
        _note(report.to_table())
    for note in report.notes:
        _note(f"note: {note}")
    return 0


def _cmd_count(args: argparse.Namespace) -> int:
    cfg = adapter.validate(_config_from_args(args), args.h, args.o)
    shapes = adapter.chunk_shapes(cfg, args.h, args.o)
    _emit({
        "h": args.h,
        "o": args.o,
        "config": {"r": cfg.r, "u": cfg.u, "m": cfg.m, "n": cfg.n,
                   "stride_a": cfg.stride_a, "stride_b": cfg.stride_b,
                   "share_axis": cfg.share_axis, "rotate_axis": cfg.rotate_axis},
        "shapes": {k: list(v) for k, v in shapes.items()},
        "params": adapter.trainable_count(cfg, args.h, args.o),
        "lora_equivalent": cfg.r * (args.h + args.o),
    })
    return 0


def _spec_from_file(path: str) -> training.TrainSpec:
    raw = json.loads(Path(path).read_text())
    cfg = AdapterConfig(**raw["cfg"])
    task = training.TaskSpec(**raw.get("task", {}))
    fields = {k: raw[k] for k in ("variant", "h", "o", "steps", "batch", "seed",
                                  "lr_shared", "lr_unshared", "warmup_ratio",
                                  "max_grad_norm", "optimizer") if k in raw}
    return training.TrainSpec(cfg=cfg, task=task, **fields)


def _cmd_train(args: argparse.Namespace) -> int:
    if args.spec:
        spec = _spec_from_file(args.spec)
    else:
        if args.rank is None:
            _note("train needs --rank when no --spec file is given")
            return 2
        cfg = _config_from_args(args)
        task = training.TaskSpec(structure=args.teacher, rank=args.teacher_rank)
        lr_shared = args.lr_shared if args.lr_shared is not None else args.lr
        lr_unshared = args.lr_unshared if args.lr_unshared is not None else args.lr
        spec = training.TrainSpec(
            variant=args.variant, cfg=cfg, h=args.h, o=args.o, task=task,
            steps=args.steps, lr_shared=lr_shared, lr_unshared=lr_unshared,
            warmup_ratio=args.warmup_ratio, max_grad_norm=args.max_grad_norm,
            optimizer=args.optimizer, batch=args.batch, seed=args.seed,
        )
    if args.sweep_rates:
        rates = [float(v) for v in args.sweep_rates.split(",")]
        u_values = None
        if args.sweep_unshared:
            u_values = [int(v) for v in args.sweep_unshared.split(",")]
        _emit(training.lr_sweep(spec, rates, u_values, workers=args.workers))
        return 0
    log = training.run(spec)
    if args.log:
        with open(args.log, "w") as fh:
            for step, loss in enumerate(log.losses, start=1):
                fh.write(json.dumps({"step": step, "loss": loss}) + "\n")
        _note(f"wrote {len(log.losses)} step records to {args.log}")
    _emit({
        "final_loss": log.final_loss,
        "eval_mse": log.eval_mse,
        "recovery_mse": log.recovery_mse,
        "steps": len(log.losses),
        "wall_time_s": round(log.wall_time, 3),
        "config": log.config,
    })
    return 0


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    worst = training.gradcheck(cfg, args.h, args.o, batch=args.batch,
                               eps=args.eps, seed=args.seed)
    passed = worst <= args.tol
    _emit({"max_rel_error": worst, "tolerance": args.tol, "passed": passed})
    _note(f"gradcheck {'passed' if passed else 'FAILED'}: max relative error {worst:.3e}")
    return 0 if passed else 1


def _cmd_equiv(args: argparse.Namespace) -> int:
    if args.trials == 0:
        _note("warning: --trials 0 requested, vacuous pass")
        _emit({"trials": 0, "passed": 0, "failures": [], "ok": True})
        return 0
    fault = None if args.inject_fault == "none" else args.inject_fault.replace("-", "_")
    report = reference.run_equiv_trials(args.trials, seed=args.seed, inject_fault=fault)
    _emit({
        "trials": report.trials,
        "passed": report.passed,
        "failures": report.failures,
        "ok": report.ok,
    })
    _note(f"{report.passed}/{report.trials} passed")
    if not report.ok:
        checks = sorted({f["check"] for f in report.failures})
        _note("failing checks: " + ", ".join(checks))
    return 0 if report.ok else 1


def _cmd_ablate(args: argparse.Namespace) -> int:
    results = training.ablation_suite(seed=args.seed, steps_scale=args.steps_scale)
    _emit(results)
    return 0


def _cmd_export(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    state = adapter.init(cfg, args.h, args.o, seed=args.seed)
    written = container.save(state, args.out, dtype=args.dtype)
    _emit({
        "path": args.out,
        "bytes": written,
        "params": adapter.trainable_count(state.cfg, args.h, args.o),
        "dtype": args.dtype,
    })
    return 0


def _cmd_merge(args: argparse.Namespace) -> int:
    state = container.load(args.adapter)
    if (state.h, state.o) != (args.h, args.o):
        _note(f"adapter is for h={state.h}, o={state.o}; flags say h={args.h}, o={args.o}")
        return 1
    np_dtype = np.dtype(_DTYPES[args.dtype])
    blob = Path(args.base).read_bytes()
    expected = args.h * args.o * np_dtype.itemsize
    if len(blob) != expected:
        _note(f"base weight blob is {len(blob)} bytes, expected {expected} "
              f"for {args.o}x{args.h} {args.dtype}")
        return 1
    w0 = np.frombuffer(blob, dtype=np_dtype).astype(np.float64).reshape(args.o, args.h)
    merged = adapter.merge(state, w0)
    out_bytes = np.ascontiguousarray(merged, dtype=np_dtype).tobytes()
    Path(args.out).write_bytes(out_bytes)
    _emit({
        "out": args.out,
        "bytes": len(out_bytes),
        "max_update_magnitude": float(np.max(np.abs(merged - w0))) if merged.size else 0.0,
    })
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prolora",
        description="partially-shared rotation-enhanced low-rank adapters: "
                    "planning, training checks, and container tools",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="parameter/memory report or budget search")
    p.add_argument("--arch", required=True, help="preset name or architecture JSON file")
    p.add_argument("--method", choices=("lora", "prolora", "vera", "tied_lora"),
                   default="lora")
    p.add_argument("--budget", type=int, default=None, help="search configs fitting this count")
    p.add_argument("--tolerance", type=float, default=0.002,
                   help="allowed overshoot fraction for --budget")
    p.add_argument("--pretty", action="store_true", help="also print an aligned table")
    _add_config_flags(p, need_rank=False)
    p.set_defaults(func=_cmd_plan)

    p = sub.add_parser("count", help="trainable parameters of one layer")
    p.add_argument("--h", type=int, required=True, help="input dimension")
    p.add_argument("--o", type=int, required=True, help="output dimension")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_count)

    p = sub.add_parser("train", help="teacher-student recovery run")
    p.add_argument("--spec", help="TrainSpec JSON file (replaces the flags)")
    p.add_argument("--variant", choices=training.VARIANTS, default="prolora")
    p.add_argument("--h", type=int, default=32)
    p.add_argument("--o", type=int, default=24)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--lr-shared", type=float, default=None)
    p.add_argument("--lr-unshared", type=float, default=None)
    p.add_argument("--warmup-ratio", type=float, default=0.03)
    p.add_argument("--max-grad-norm", type=float, default=0.3)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="adam")
    p.add_argument("--teacher", choices=("structured", "low_rank"), default="structured")
    p.add_argument("--teacher-rank", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", help="write per-step JSON lines here")
    p.add_argument("--sweep-rates", help="comma-separated rates: sweep instead of one run")
    p.add_argument("--sweep-unshared", help="comma-separated unshared ranks for the sweep")
    p.add_argument("--workers", type=int, default=1,
                   help="parallel runs for sweep mode (results order-canonical)")
    _add_config_flags(p, need_rank=False)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    p.add_argument("--h", type=int, default=6)
    p.add_argument("--o", type=int, default=4)
    p.add_argument("--batch", type=int, default=3)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("equiv", help="randomized equivalence and adjoint checks")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", choices=("none", "no-inverse-roll"), default="none",
                   help="negative-control hook: deliberately break the fold adjoint")
    p.set_defaults(func=_cmd_equiv)

    p = sub.add_parser("ablate", help="variant comparison on constructed teachers")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps-scale", type=float, default=1.0,
                   help="scale the per-run step counts (for quick smoke runs)")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("export", help="initialize an adapter and save a container")
    p.add_argument("--out", required=True)
    p.add_argument("--h", type=int, required=True)
    p.add_argument("--o", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f64")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("merge", help="fold a container into a raw base-weight blob")
    p.add_argument("--adapter", required=True, help="container file")
    p.add_argument("--base", required=True, help="raw little-endian weight blob, o*h scalars")
    p.add_argument("--out", required=True)
    p.add_argument("--h", type=int, required=True)
    p.add_argument("--o", type=int, required=True)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    p.set_defaults(func=_cmd_merge)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (adapter.ConfigError, adapter.StateError, planner.PlannerError,
            container.ContainerError, ValueError, KeyError, TypeError, OSError) as exc:
        _note(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
