"""Desk-scale training harness: teacher-student recovery on a single layer.

A frozen random base weight W0 defines a teacher W* = W0 + delta*, where
delta* is either an unstructured low-rank update or one generated by a
reference adapter with random chunks. The student trains its adapter
against mean-squared output error on fresh standard-normal batches, with a
warmup-then-linear-decay schedule, global gradient-norm clipping, separate
shared/unshared learning rates, and SGD or Adam. Everything is driven by a
single splitmix64 stream, so a TrainSpec fully determines the run.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import adapter, reference
from .adapter import AdapterConfig
from .matrix import SplitMix64

__all__ = [
    "TaskSpec",
    "TrainLog",
    "TrainSpec",
    "TrainingDiverged",
    "VARIANTS",
    "ablation_suite",
    "gradcheck",
    "learning_rate",
    "lr_sweep",
    "run",
]

VARIANTS = (
    "lora",
    "clora",
    "rolora",
    "prolora",
    "prolora_no_rotation",
    "prolora_no_rectified_init",
    "share_hidden_rotate_rank",
    "share_hidden_rotate_hidden",
    "share_rank_rotate_rank",
    "share_rank_rotate_hidden",
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; carries the step index."""

    def __init__(self, step: int, loss: float) -> None:
        super().__init__(f"training diverged at step {step}: loss={loss}")
        self.step = step


@dataclass(frozen=True)
class TaskSpec:
    """Teacher construction for the recovery task.

    structure "low_rank" draws delta* = scale * B* @ A* at the given rank;
    "structured" generates delta* from a reference adapter (teacher_cfg,
    falling back to the student's config) with random non-zero chunks, which
    makes zero loss attainable for a matching student.
    """

    kind: str = "teacher_delta"
    structure: str = "structured"
    rank: int = 2
    teacher_cfg: AdapterConfig | None = None
    delta_scale: float = 1.0
    eval_batch: int = 256


@dataclass(frozen=True)
class TrainSpec:
    """Everything that determines one training run (see VARIANTS)."""

    variant: str
    cfg: AdapterConfig
    h: int
    o: int
    task: TaskSpec
    steps: int
    lr_shared: float
    lr_unshared: float
    warmup_ratio: float = 0.03
    max_grad_norm: float = 0.3
    optimizer: str = "adam"
    batch: int = 16
    seed: int = 0


@dataclass
class TrainLog:
    """Per-step losses plus summary numbers.

    recovery_mse is the exact population MSE ||W_student - W*||_F^2 / o
    (the infinite-data limit of eval_mse for standard-normal inputs).
    wall_time is the one field that cannot be deterministic; every other
    field is bit-identical across runs of the same TrainSpec.
    """

    losses: list[float]
    final_loss: float
    eval_mse: float
    recovery_mse: float
    wall_time: float
    config: dict = field(default_factory=dict)


def resolve_variant(variant: str, cfg: AdapterConfig) -> tuple[AdapterConfig, bool]:
    """Apply a variant's constraints to cfg; returns (cfg, rectified_init)."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r} (expected one of {VARIANTS})")
    rectified = True
    if variant == "lora":
        cfg = replace(cfg, u=cfg.r, m=1, n=1)
    elif variant == "clora":
        cfg = replace(cfg, u=0, stride_a=0, stride_b=0)
    elif variant == "rolora":
        # strides stay as configured (None derives the default rule)
        cfg = replace(cfg, u=0)
    elif variant == "prolora_no_rotation":
        cfg = replace(cfg, stride_a=0, stride_b=0)
    elif variant == "prolora_no_rectified_init":
        rectified = False
    elif variant.startswith("share_"):
        parts = variant.split("_")  # share_<axis>_rotate_<axis>
        cfg = replace(cfg, share_axis=parts[1], rotate_axis=parts[3])
    return cfg, rectified


def _make_teacher(task: TaskSpec, cfg: AdapterConfig, h: int, o: int, rng: SplitMix64):
    """Sample delta* according to the task; consumes a fixed number of draws."""
    if task.kind != "teacher_delta":
        raise ValueError(f"unknown task kind {task.kind!r}")
    if task.structure == "low_rank":
        a_bound = 1.0 / math.sqrt(h)
        b_bound = 1.0 / math.sqrt(max(task.rank, 1))
        b_star = rng.uniform(-b_bound, b_bound, size=(o, task.rank))
        a_star = rng.uniform(-a_bound, a_bound, size=(task.rank, h))
        return task.delta_scale * (b_star @ a_star)
    if task.structure == "structured":
        tcfg = task.teacher_cfg if task.teacher_cfg is not None else cfg
        state = adapter.init(tcfg, h, o, rng=rng)
        b_bound = 1.0 / math.sqrt(tcfg.r)
        state.b_unshared = rng.uniform(-b_bound, b_bound, size=state.b_unshared.shape)
        state.b_shared = rng.uniform(-b_bound, b_bound, size=state.b_shared.shape)
        return task.delta_scale * adapter.delta_w(state)
    raise ValueError(f"unknown teacher structure {task.structure!r}")


def learning_rate(step: int, steps: int, warmup_ratio: float, peak: float) -> float:
    """Closed-form schedule for 1-indexed steps: peak * t / W during the
    first W = floor(warmup_ratio * steps) steps, then linear decay hitting
    exactly zero at the final step."""
    warmup = int(warmup_ratio * steps)
    if warmup > 0 and step <= warmup:
        return peak * step / warmup
    return peak * (steps - step) / max(steps - warmup, 1)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all chunk gradients in place so the global norm is <= max_norm.

    Returns the pre-clip global norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm and total > 0.0:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


def _mse_loss(y: np.ndarray, target: np.ndarray):
    diff = y - target
    loss = float(np.mean(diff * diff))
    upstream = (2.0 / diff.size) * diff
    return loss, upstream


def run(spec: TrainSpec) -> TrainLog:
    """Train a student adapter against its teacher; deterministic given spec.

    Stream order: W0, teacher delta*, eval inputs, student init, then one
    batch (plus dropout mask when active) per step. Only the four stored
    chunks update; W0 is never touched.
    """
    if spec.steps < 1:
        raise ValueError("steps must be >= 1")
    if spec.lr_shared < 0 or spec.lr_unshared < 0:
        raise ValueError("learning rates must be >= 0")
    if not 0.0 <= spec.warmup_ratio < 1.0:
        raise ValueError("warmup_ratio must be in [0, 1)")
    if spec.optimizer not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {spec.optimizer!r}")

    started = time.perf_counter()
    cfg, rectified = resolve_variant(spec.variant, spec.cfg)
    cfg = adapter.validate(cfg, spec.h, spec.o)
    rng = SplitMix64(spec.seed)

    w0 = rng.uniform(-1.0 / math.sqrt(spec.h), 1.0 / math.sqrt(spec.h), size=(spec.o, spec.h))
    delta_star = _make_teacher(spec.task, cfg, spec.h, spec.o, rng)
    w_star = w0 + delta_star
    eval_x = rng.normal((spec.h, spec.task.eval_batch))
    state = adapter.init(cfg, spec.h, spec.o, rng=rng, w0=w0, rectified=rectified)

    lrs = {"a_unshared": spec.lr_unshared, "b_unshared": spec.lr_unshared,
           "a_shared": spec.lr_shared, "b_shared": spec.lr_shared}
    adam_m = {k: np.zeros_like(v) for k, v in state.chunks().items()}
    adam_v = {k: np.zeros_like(v) for k, v in state.chunks().items()}

    losses: list[float] = []
    for step in range(1, spec.steps + 1):
        x = rng.normal((spec.h, spec.batch))
        mask = None
        if cfg.dropout_rate > 0.0:
            mask = adapter.make_dropout_mask(rng, x.shape, cfg.dropout_rate)
        y = adapter.forward(state, x, training=True, dropout_mask=mask)
        loss, upstream = _mse_loss(y, w_star @ x)
        if not math.isfinite(loss):
            raise TrainingDiverged(step, loss)
        losses.append(loss)

        grads = adapter.backward(state, x, upstream, dropout_mask=mask).chunks()
        clip_gradients(grads, spec.max_grad_norm)

        params = state.chunks()
        for name, g in grads.items():
            lr = learning_rate(step, spec.steps, spec.warmup_ratio, lrs[name])
            if spec.optimizer == "sgd":
                params[name] -= lr * g
            else:
                adam_m[name] = ADAM_BETA1 * adam_m[name] + (1 - ADAM_BETA1) * g
                adam_v[name] = ADAM_BETA2 * adam_v[name] + (1 - ADAM_BETA2) * (g * g)
                m_hat = adam_m[name] / (1 - ADAM_BETA1**step)
                v_hat = adam_v[name] / (1 - ADAM_BETA2**step)
                params[name] -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)

    y_eval = adapter.forward(state, eval_x, training=False)
    eval_mse, _ = _mse_loss(y_eval, w_star @ eval_x)
    w_student = w0 + adapter.delta_w(state)
    recovery = float(np.sum((w_student - w_star) ** 2)) / spec.o

    return TrainLog(
        losses=losses,
        final_loss=losses[-1],
        eval_mse=eval_mse,
        recovery_mse=recovery,
        wall_time=time.perf_counter() - started,
        config={
            "variant": spec.variant, "h": spec.h, "o": spec.o, "steps": spec.steps,
            "batch": spec.batch, "seed": spec.seed, "optimizer": spec.optimizer,
            "lr_shared": spec.lr_shared, "lr_unshared": spec.lr_unshared,
            "warmup_ratio": spec.warmup_ratio, "max_grad_norm": spec.max_grad_norm,
            "r": cfg.r, "u": cfg.u, "m": cfg.m, "n": cfg.n,
            "stride_a": cfg.stride_a, "stride_b": cfg.stride_b,
            "share_axis": cfg.share_axis, "rotate_axis": cfg.rotate_axis,
            "dropout_rate": cfg.dropout_rate, "alpha": cfg.alpha,
        },
    )


def gradcheck(
    cfg: AdapterConfig,
    h: int,
    o: int,
    batch: int = 3,
    eps: float = 1e-5,
    seed: int = 0,
) -> float:
    """Central finite differences on every stored scalar; worst relative error.

    The loss is 0.5 * ||forward(x)||^2 (so upstream = y), dropout disabled.
    All four chunks are randomized first so no gradient path is trivially
    zero. The error is |fd - analytic| / max(|fd|, |analytic|, 1).
    """
    cfg = adapter.validate(replace(cfg, dropout_rate=0.0), h, o)
    rng = SplitMix64(seed)
    w0 = rng.uniform(-1.0 / math.sqrt(h), 1.0 / math.sqrt(h), size=(o, h))
    state = adapter.init(cfg, h, o, rng=rng, w0=w0)
    for arr in state.chunks().values():
        arr[...] = rng.uniform(-0.5, 0.5, size=arr.shape)
    x = rng.normal((h, batch))

    def loss() -> float:
        y = adapter.forward(state, x, training=False)
        return 0.5 * float(np.sum(y * y))

    y0 = adapter.forward(state, x, training=False)
    analytic = adapter.backward(state, x, y0).chunks()

    worst = 0.0
    for name, arr in state.chunks().items():
        if arr.size == 0:
            continue
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            keep = arr[idx]
            arr[idx] = keep + eps
            up = loss()
            arr[idx] = keep - eps
            down = loss()
            arr[idx] = keep
            fd = (up - down) / (2 * eps)
            an = float(analytic[name][idx])
            rel = abs(fd - an) / max(abs(fd), abs(an), 1.0)
            worst = max(worst, rel)
    return worst


def _ablation_run(variant: str, cfg: AdapterConfig, h: int, o: int, task: TaskSpec,
                  steps: int, lr: float, seed: int) -> TrainLog:
    spec = TrainSpec(
        variant=variant, cfg=replace(cfg, dropout_rate=0.0), h=h, o=o, task=task,
        steps=steps, lr_shared=lr, lr_unshared=lr, batch=32, seed=seed,
    )
    return run(spec)


def ablation_suite(seed: int = 0, steps_scale: float = 1.0) -> dict:
    """Variant comparison on constructed teachers; returns a results table.

    Three constructed instances plus the 2x2 share/rotate axis grid:

    - distinct_blocks: a rotation-structured teacher whose strides make all
      m*n block displacements distinct. A pure-broadcast student provably
      bottoms out at the block-averaging floor (computed exactly by
      reference.clora_floor) while the rotated student can fit exactly.
    - identical_blocks: a rank-1 tiled teacher both students can represent.
    - partial_sharing: a teacher with one unshared rank direction; the u=1
      student and the u=0 student have exactly equal parameter counts.
    - axis_grid: the four share/rotate axis combinations on the
      distinct-block teacher (losses reported, no ordering asserted).

    Losses reported are exact population residuals ||W - W*||^2 / o.
    """
    steps = max(int(4000 * steps_scale), 10)
    h, o, lr = 16, 8, 0.02
    results: dict = {}

    # teacher with pairwise-distinct blocks: strides 1/2 over r=4, m=n=2
    # give displacements {0, 1, 2, 3} mod 4, all distinct
    tcfg = AdapterConfig(r=4, u=0, m=2, n=2, stride_a=1, stride_b=2, dropout_rate=0.0)
    task = TaskSpec(structure="structured", teacher_cfg=tcfg)
    delta_star = _make_teacher(task, tcfg, h, o, _teacher_preview_rng(seed, h, o))
    floor = reference.clora_floor(delta_star, m=2, n=2, rank=4)

    clora = _ablation_run("clora", tcfg, h, o, task, steps, lr, seed)
    rolora = _ablation_run("rolora", tcfg, h, o, task, steps, lr, seed)
    results["distinct_blocks"] = {
        "clora_final": clora.recovery_mse,
        "rolora_final": rolora.recovery_mse,
        "clora_floor_oracle": floor,
        "ratio": clora.recovery_mse / max(rolora.recovery_mse, 1e-300),
    }

    # identical-block teacher: a tiled rank-2 block, representable both by
    # pure broadcast and (via rotation-periodic chunks) by the rotated student
    id_teacher = AdapterConfig(r=2, u=0, m=2, n=2, stride_a=0, stride_b=0, dropout_rate=0.0)
    id_task = TaskSpec(structure="structured", teacher_cfg=id_teacher)
    id_cfg = AdapterConfig(r=4, u=0, m=2, n=2, dropout_rate=0.0)
    clora_id = _ablation_run("clora", id_cfg, h, o, id_task, steps, lr, seed)
    rolora_id = _ablation_run("rolora", id_cfg, h, o, id_task, steps, lr, seed)
    results["identical_blocks"] = {
        "clora_final": clora_id.recovery_mse,
        "rolora_final": rolora_id.recovery_mse,
    }

    # equal-budget partial sharing: count(r=4, u=1, m=n=2) == count(r=5, u=0)
    pcfg = AdapterConfig(r=4, u=1, m=2, n=2, dropout_rate=0.0)
    rcfg = AdapterConfig(r=5, u=0, m=2, n=2, dropout_rate=0.0)
    ptask = TaskSpec(structure="structured", teacher_cfg=pcfg)
    prolora = _ablation_run("prolora", pcfg, h, o, ptask, steps, lr, seed)
    rolora_eq = _ablation_run("rolora", rcfg, h, o, ptask, steps, lr, seed)
    results["partial_sharing"] = {
        "prolora_final": prolora.recovery_mse,
        "rolora_final": rolora_eq.recovery_mse,
        "params": adapter.trainable_count(pcfg, h, o),
        "params_rolora": adapter.trainable_count(rcfg, h, o),
    }

    grid = {}
    for share in ("hidden", "rank"):
        for rot in ("hidden", "rank"):
            variant = f"share_{share}_rotate_{rot}"
            gcfg = AdapterConfig(r=4, u=1, m=2, n=2, dropout_rate=0.0,
                                 share_axis=share, rotate_axis=rot)
            log = _ablation_run(variant, gcfg, h, o, task, steps, lr, seed)
            grid[f"{share}/{rot}"] = log.recovery_mse
    results["axis_grid"] = grid
    return results


def _teacher_preview_rng(seed: int, h: int, o: int) -> SplitMix64:
    """Stream positioned exactly where run() samples the teacher (after W0)."""
    rng = SplitMix64(seed)
    rng.uniform(-1.0, 1.0, size=(o, h))
    return rng


def lr_sweep(
    base: TrainSpec,
    rates: list[float],
    unshared_ranks: list[int] | None = None,
    workers: int = 1,
) -> dict:
    """Grid of runs over learning rates (and optionally unshared ranks).

    Every run owns its state and stream, so runs are independent and may be
    executed concurrently (workers > 1); results are aggregated in canonical
    (u, rate) order either way. Reports the exact recovery residual per cell
    and the best rate per unshared rank. There is no quantitative target
    here: the utility exists to eyeball how the preferred rate moves as more
    of the adapter is shared.
    """
    if not rates:
        raise ValueError("rates must be non-empty")
    u_values = [base.cfg.u] if unshared_ranks is None else list(unshared_ranks)
    cells = [(u, lr) for u in u_values for lr in rates]

    def _one(cell: tuple[int, float]) -> tuple[tuple[int, float], TrainLog]:
        u, lr = cell
        spec = replace(base, cfg=replace(base.cfg, u=u), lr_shared=lr, lr_unshared=lr)
        return cell, run(spec)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            done = dict(pool.map(_one, cells))
    else:
        done = dict(_one(c) for c in cells)

    grid: dict[str, dict[str, float]] = {}
    best_rate: dict[str, float] = {}
    for u in u_values:
        row = {f"{lr:g}": done[(u, lr)].recovery_mse for lr in rates}
        grid[f"u={u}"] = row
        best_rate[f"u={u}"] = min(rates, key=lambda lr: done[(u, lr)].recovery_mse)
    return {
        "steps": base.steps,
        "rates": [float(r) for r in rates],
        "unshared_ranks": [int(u) for u in u_values],
        "grid": grid,
        "best_rate": best_rate,
    }
