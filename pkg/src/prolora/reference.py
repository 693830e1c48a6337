"""Independent reference paths used to cross-check the adapter machinery.

Everything here recomputes results from first principles, avoiding the
expand/fold code under test: the plain LoRA reference keeps whole factors,
and the materialization oracles place every element by index arithmetic
instead of concatenating rolled views. The equivalence verifier (`prolora
equiv`) and the test suite both run against these.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import adapter
from .adapter import AdapterConfig, AdapterState, _layout_a, _layout_b
from .matrix import SplitMix64

__all__ = [
    "EquivReport",
    "LoraRef",
    "clora_floor",
    "fold_oracle",
    "lora_ref_backward",
    "lora_ref_forward",
    "lora_ref_init",
    "lora_ref_train",
    "materialize_a",
    "materialize_b",
    "run_equiv_trials",
    "superset_case",
]


# ---------------------------------------------------------------------------
# Plain LoRA reference (whole factors, no sharing machinery)
# ---------------------------------------------------------------------------


@dataclass
class LoraRef:
    """Full-factor LoRA: y = W0 @ x + (alpha/r) * B @ (A @ x)."""

    a: np.ndarray  # r x h
    b: np.ndarray  # o x r
    alpha: float
    w0: np.ndarray | None = None

    @property
    def scaling(self) -> float:
        return self.alpha / self.a.shape[0]


def lora_ref_init(
    h: int,
    o: int,
    r: int,
    rng: SplitMix64,
    alpha: float = 16.0,
    gain: float = adapter.DEFAULT_GAIN,
    w0: np.ndarray | None = None,
) -> LoraRef:
    """A sampled uniform row-major with bound gain*sqrt(3/h), B zero."""
    bound = gain * math.sqrt(3.0 / h)
    return LoraRef(
        a=rng.uniform(-bound, bound, size=(r, h)),
        b=np.zeros((o, r)),
        alpha=alpha,
        w0=w0,
    )


def lora_ref_forward(ref: LoraRef, x: np.ndarray, dropout_mask: np.ndarray | None = None):
    xt = x if dropout_mask is None else x * dropout_mask
    return ref.w0 @ x + ref.scaling * (ref.b @ (ref.a @ xt))


def lora_ref_backward(
    ref: LoraRef, x: np.ndarray, upstream: np.ndarray, dropout_mask: np.ndarray | None = None
):
    """Returns (gA, gB, gX) by the direct product-rule formulas."""
    xt = x if dropout_mask is None else x * dropout_mask
    ga = ref.scaling * ((ref.b.T @ upstream) @ xt.T)
    gb = ref.scaling * (upstream @ (ref.a @ xt).T)
    adapter_gx = ref.scaling * (ref.a.T @ (ref.b.T @ upstream))
    if dropout_mask is not None:
        adapter_gx = adapter_gx * dropout_mask
    gx = (ref.w0.T @ upstream) + adapter_gx
    return ga, gb, gx


# ---------------------------------------------------------------------------
# Index-arithmetic materialization oracles
# ---------------------------------------------------------------------------


def materialize_a(state: AdapterState) -> np.ndarray:
    """Build the full A factor element by element.

    A rolled copy places source index p at (p + i*stride) mod L, so reading
    back position q inside copy i means source (q - i*stride) mod L.
    """
    cfg = state.cfg
    r, h, u = cfg.r, state.h, cfg.u
    full = np.zeros((r, h))
    full[:u, :] = state.a_unshared
    if u == r:
        return full
    lay = _layout_a(cfg, h)
    chunk = state.a_shared
    rows, cols = chunk.shape
    for i in range(lay.copies):
        for p in range(rows):
            for c in range(cols):
                src_p, src_c = p, c
                if lay.roll_axis == 0:
                    src_p = (p - i * lay.stride) % rows
                else:
                    src_c = (c - i * lay.stride) % cols
                if lay.concat_axis == 0:
                    dst_r, dst_c = u + i * lay.piece + p, c
                    if i * lay.piece + p >= lay.span:
                        continue
                else:
                    dst_r, dst_c = u + p, i * lay.piece + c
                    if i * lay.piece + c >= lay.span:
                        continue
                full[dst_r, dst_c] = chunk[src_p, src_c]
    return full


def materialize_b(state: AdapterState) -> np.ndarray:
    """Build the full B factor element by element (mirror of materialize_a)."""
    cfg = state.cfg
    r, o, u = cfg.r, state.o, cfg.u
    full = np.zeros((o, r))
    full[:, :u] = state.b_unshared
    if u == r:
        return full
    lay = _layout_b(cfg, o)
    chunk = state.b_shared
    rows, cols = chunk.shape
    for i in range(lay.copies):
        for p in range(rows):
            for c in range(cols):
                src_p, src_c = p, c
                if lay.roll_axis == 0:
                    src_p = (p - i * lay.stride) % rows
                else:
                    src_c = (c - i * lay.stride) % cols
                if lay.concat_axis == 0:
                    dst_r, dst_c = i * lay.piece + p, u + c
                    if i * lay.piece + p >= lay.span:
                        continue
                else:
                    dst_r, dst_c = p, u + i * lay.piece + c
                    if i * lay.piece + c >= lay.span:
                        continue
                full[dst_r, dst_c] = chunk[src_p, src_c]
    return full


def fold_oracle(state: AdapterState, ga_full: np.ndarray, gb_full: np.ndarray):
    """Scatter-based adjoint: accumulate each placed element's gradient back
    onto its stored source position. Independent of the pad-and-roll fold."""
    cfg = state.cfg
    u = cfg.u
    ga_shared = np.zeros(state.a_shared.shape)
    gb_shared = np.zeros(state.b_shared.shape)
    if u < cfg.r:
        lay = _layout_a(cfg, state.h)
        rows, cols = state.a_shared.shape
        for i in range(lay.copies):
            for p in range(rows):
                for c in range(cols):
                    src_p, src_c = p, c
                    if lay.roll_axis == 0:
                        src_p = (p - i * lay.stride) % rows
                    else:
                        src_c = (c - i * lay.stride) % cols
                    if lay.concat_axis == 0:
                        if i * lay.piece + p >= lay.span:
                            continue
                        ga_shared[src_p, src_c] += ga_full[u + i * lay.piece + p, c]
                    else:
                        if i * lay.piece + c >= lay.span:
                            continue
                        ga_shared[src_p, src_c] += ga_full[u + p, i * lay.piece + c]
        lay = _layout_b(cfg, state.o)
        rows, cols = state.b_shared.shape
        for i in range(lay.copies):
            for p in range(rows):
                for c in range(cols):
                    src_p, src_c = p, c
                    if lay.roll_axis == 0:
                        src_p = (p - i * lay.stride) % rows
                    else:
                        src_c = (c - i * lay.stride) % cols
                    if lay.concat_axis == 0:
                        if i * lay.piece + p >= lay.span:
                            continue
                        gb_shared[src_p, src_c] += gb_full[i * lay.piece + p, u + c]
                    else:
                        if i * lay.piece + c >= lay.span:
                            continue
                        gb_shared[src_p, src_c] += gb_full[p, u + i * lay.piece + c]
    return ga_full[:u, :].copy(), ga_shared, gb_full[:, :u].copy(), gb_shared


# ---------------------------------------------------------------------------
# CLoRA representable-set floor
# ---------------------------------------------------------------------------


def clora_floor(delta_star: np.ndarray, m: int, n: int, rank: int) -> float:
    """Exact best population MSE a pure-broadcast student can reach.

    With divisible dimensions every broadcast update is a tiling of one
    block C of rank <= rank, so the optimum against a target with blocks
    D_ij is C* = best rank-limited approximation of the block mean:
        floor = ( sum_ij ||D_ij - mean||^2 + m*n*||mean - C*||^2 ) / o
    in the population-MSE normalization ||W - W*||^2 / o.
    """
    o, h = delta_star.shape
    if o % n or h % m:
        raise ValueError("clora_floor needs divisible dimensions")
    bh, bw = o // n, h // m
    blocks = [
        delta_star[i * bh : (i + 1) * bh, j * bw : (j + 1) * bw]
        for i in range(n)
        for j in range(m)
    ]
    mean = sum(blocks) / float(m * n)
    spread = sum(float(np.sum((blk - mean) ** 2)) for blk in blocks)
    uu, sv, vv = np.linalg.svd(mean, full_matrices=False)
    tail = float(np.sum(sv[rank:] ** 2))
    return (spread + m * n * tail) / o


# ---------------------------------------------------------------------------
# Randomized equivalence trials (the `equiv` command)
# ---------------------------------------------------------------------------


@dataclass
class EquivReport:
    trials: int
    passed: int
    failures: list[dict]

    @property
    def ok(self) -> bool:
        return not self.failures


def superset_case(h: int, o: int, r: int, batch: int, seed: int) -> dict[str, float]:
    """Max-abs disagreement between a u=r adapter and the whole-factor
    reference on one random case: forward, all gradients, and the count.

    Both sides are initialized from the same stream and get identical
    random B factors so the A-gradient path is not trivially zero.
    """
    rng = SplitMix64(seed)
    x = rng.normal((h, batch))
    g = rng.normal((o, batch))
    w0 = rng.uniform(-1.0, 1.0, size=(o, h))
    base = int(rng.next_u64())

    st = adapter.init(adapter.lora_config(r), h, o, rng=SplitMix64(base), w0=w0)
    ref = lora_ref_init(h, o, r, SplitMix64(base), w0=w0)
    b_rand = SplitMix64(base ^ 0xB).uniform(-0.5, 0.5, size=(o, r))
    st.b_unshared = b_rand.copy()
    ref.b = b_rand.copy()

    got = adapter.backward(st, x, g)
    ga, gb, gx = lora_ref_backward(ref, x, g)
    return {
        "count": float(abs(adapter.trainable_count(st.cfg, h, o) - r * (h + o))),
        "forward": float(np.max(np.abs(adapter.forward(st, x) - lora_ref_forward(ref, x)))),
        "grad_a": float(np.max(np.abs(got.ga_unshared - ga))),
        "grad_b": float(np.max(np.abs(got.gb_unshared - gb))),
        "grad_x": float(np.max(np.abs(got.gx - gx))),
    }


def lora_ref_train(spec) -> dict:
    """Whole-factor LoRA trainer mirroring the harness run() step for step.

    Consumes the identical stream (base weight, teacher, eval inputs, init,
    batches, masks) and applies the same schedule, clipping and optimizer,
    but all adapter math goes through the plain LoRA formulas. Used to show
    a u=r harness run reproduces an independent LoRA trainer bit-for-bit.
    """
    from . import training  # local import; training imports this module

    cfg, _ = training.resolve_variant(spec.variant, spec.cfg)
    cfg = adapter.validate(cfg, spec.h, spec.o)
    if cfg.u != cfg.r:
        raise ValueError("lora_ref_train only mirrors u == r configurations")
    rng = SplitMix64(spec.seed)
    h, o, r = spec.h, spec.o, cfg.r

    w0 = rng.uniform(-1.0 / math.sqrt(h), 1.0 / math.sqrt(h), size=(o, h))
    delta_star = training._make_teacher(spec.task, cfg, h, o, rng)
    w_star = w0 + delta_star
    eval_x = rng.normal((h, spec.task.eval_batch))
    ref = lora_ref_init(h, o, r, rng, alpha=cfg.alpha, w0=w0)

    params = {"a": ref.a, "b": ref.b}
    adam_m = {k: np.zeros_like(v) for k, v in params.items()}
    adam_v = {k: np.zeros_like(v) for k, v in params.items()}

    losses = []
    for step in range(1, spec.steps + 1):
        x = rng.normal((h, spec.batch))
        mask = None
        if cfg.dropout_rate > 0.0:
            mask = adapter.make_dropout_mask(rng, x.shape, cfg.dropout_rate)
        y = lora_ref_forward(ref, x, mask)
        diff = y - w_star @ x
        loss = float(np.mean(diff * diff))
        losses.append(loss)
        upstream = (2.0 / diff.size) * diff
        ga, gb, _ = lora_ref_backward(ref, x, upstream, mask)
        grads = {"a": ga, "b": gb}
        training.clip_gradients(grads, spec.max_grad_norm)
        for name, grad in grads.items():
            lr = training.learning_rate(step, spec.steps, spec.warmup_ratio,
                                        spec.lr_unshared)
            if spec.optimizer == "sgd":
                params[name] -= lr * grad
            else:
                adam_m[name] = training.ADAM_BETA1 * adam_m[name] \
                    + (1 - training.ADAM_BETA1) * grad
                adam_v[name] = training.ADAM_BETA2 * adam_v[name] \
                    + (1 - training.ADAM_BETA2) * (grad * grad)
                m_hat = adam_m[name] / (1 - training.ADAM_BETA1**step)
                v_hat = adam_v[name] / (1 - training.ADAM_BETA2**step)
                params[name] -= lr * m_hat / (np.sqrt(v_hat) + training.ADAM_EPS)

    y_eval = lora_ref_forward(ref, eval_x)
    diff = y_eval - w_star @ eval_x
    return {"losses": losses, "eval_mse": float(np.mean(diff * diff))}


def _random_case(rng: SplitMix64):
    h = 4 + rng.next_u64() % 9
    o = 3 + rng.next_u64() % 8
    r = 1 + rng.next_u64() % 5
    batch = 1 + rng.next_u64() % 4
    return int(h), int(o), int(r), int(batch)


def _check(failures: list, trial: int, name: str, value: float, tol: float) -> None:
    if not (value <= tol) or not np.isfinite(value):
        failures.append({"trial": trial, "check": name, "value": float(value), "tol": tol})


def adjoint_max_diff(
    state: AdapterState, x: np.ndarray, g: np.ndarray, skip_inverse_roll: bool = False
) -> float:
    """Worst disagreement between backward() and the materialize-then-fold
    oracle over all four chunk gradients."""
    got = adapter.backward(state, x, g, _skip_inverse_roll=skip_inverse_roll)
    s = state.scaling
    ga_full = s * ((materialize_b(state).T @ g) @ x.T)
    gb_full = s * (g @ (materialize_a(state) @ x).T)
    oga_u, oga_s, ogb_u, ogb_s = fold_oracle(state, ga_full, gb_full)
    worst = 0.0
    for have, want in ((got.ga_unshared, oga_u), (got.ga_shared, oga_s),
                       (got.gb_unshared, ogb_u), (got.gb_shared, ogb_s)):
        if have.size:
            worst = max(worst, float(np.max(np.abs(have - want))))
    return worst


def run_equiv_trials(trials: int, seed: int = 0, inject_fault: str | None = None) -> EquivReport:
    """Randomized cross-checks of the adapter against the reference paths.

    Per trial: superset equality against plain LoRA (forward, gradients,
    counts), degeneration of u=0 variants to direct materialization,
    merge/unmerge round-trips, block-identity patterns, and the fold adjoint
    against the scatter oracle. inject_fault="no_inverse_roll" deliberately
    breaks the fold (negative control; the adjoint check must then fail).
    """
    rng = SplitMix64(seed)
    failures: list[dict] = []
    skip_roll = inject_fault == "no_inverse_roll"

    for t in range(trials):
        h, o, r, batch = _random_case(rng)
        x = rng.normal((h, batch))
        g = rng.normal((o, batch))
        w0 = rng.uniform(-1.0, 1.0, size=(o, h))
        base_state = int(rng.next_u64())

        # superset: u = r must match the whole-factor reference
        diffs = superset_case(h, o, r, batch, base_state)
        for key, value in diffs.items():
            _check(failures, t, f"superset {key}", value, 1e-12)

        # shared variants: divisible dims keep the block patterns checkable
        m = 2 if h % 2 == 0 else 1
        n = 2 if o % 2 == 0 else 1
        for maker, name in ((adapter.clora_config, "clora"), (adapter.rolora_config, "rolora")):
            cfg = maker(max(r, 1), m, n)
            st = adapter.init(cfg, h, o, rng=SplitMix64(base_state), w0=w0)
            st.b_shared = SplitMix64(base_state ^ 0xB).uniform(-0.5, 0.5, st.b_shared.shape)
            a_err = float(np.max(np.abs(adapter.expand_a(st) - materialize_a(st))))
            b_err = float(np.max(np.abs(adapter.expand_b(st) - materialize_b(st))))
            _check(failures, t, f"{name} degeneration", max(a_err, b_err), 1e-12)

        # partial sharing: adjoint + merge checks on a randomized config
        u = int(rng.next_u64() % (r + 1))
        cfg = AdapterConfig(r=r, u=u, m=m, n=n, dropout_rate=0.0)
        st = adapter.init(cfg, h, o, rng=SplitMix64(base_state), w0=w0)
        for chunk_name, arr in st.chunks().items():
            if "b_" in chunk_name:
                arr[...] = SplitMix64(base_state ^ len(chunk_name)).uniform(-0.5, 0.5, arr.shape)
        _check(failures, t, "adjoint mismatch",
               adjoint_max_diff(st, x, g, skip_inverse_roll=skip_roll), 1e-12)

        # second adjoint case with guaranteed rotation sensitivity: stride 1
        # on a shared extent of 3 is never self-inverse (+1 != -1 mod 3),
        # so a broken inverse roll always shows
        cfg2 = AdapterConfig(r=4, u=1, m=2, n=2, stride_a=1, stride_b=1, dropout_rate=0.0)
        st2 = adapter.init(cfg2, h, o, rng=SplitMix64(base_state ^ 0xA5), w0=w0)
        for chunk_name, arr in st2.chunks().items():
            if "b_" in chunk_name:
                arr[...] = SplitMix64(base_state ^ 0xE ^ len(chunk_name)).uniform(
                    -0.5, 0.5, arr.shape)
        _check(failures, t, "adjoint mismatch",
               adjoint_max_diff(st2, x, g, skip_inverse_roll=skip_roll), 1e-12)

        y_before = adapter.forward(st, x)
        merged_w = adapter.merge(st)
        y_merged = merged_w @ x
        restored = adapter.unmerge(st)
        _check(failures, t, "merge round-trip", float(np.max(np.abs(restored - w0))), 1e-12)
        _check(failures, t, "merged forward", float(np.max(np.abs(y_merged - y_before))), 1e-10)

        # block patterns need fully divisible dims
        if h % 2 == 0 and o % 2 == 0 and r >= 2:
            cst = adapter.init(adapter.clora_config(r, 2, 2), h, o, rng=SplitMix64(base_state))
            cst.b_shared = SplitMix64(base_state ^ 0xC).uniform(-0.5, 0.5, cst.b_shared.shape)
            dw = adapter.delta_w(cst)
            bh, bw = o // 2, h // 2
            blocks = [dw[i * bh : (i + 1) * bh, j * bw : (j + 1) * bw]
                      for i in range(2) for j in range(2)]
            worst = max(float(np.max(np.abs(blk - blocks[0]))) for blk in blocks[1:])
            _check(failures, t, "clora identical blocks", worst, 1e-12)

            rst = adapter.init(adapter.rolora_config(r, 2, 2), h, o, rng=SplitMix64(base_state))
            rst.b_shared = SplitMix64(base_state ^ 0xD).uniform(-0.5, 0.5, rst.b_shared.shape)
            dw = adapter.delta_w(rst)
            worst = float(np.max(np.abs(dw[:bh, :bw] - dw[bh:, bw:])))
            _check(failures, t, "rolora diagonal blocks", worst, 1e-12)

    return EquivReport(trials=trials, passed=trials - len({f["trial"] for f in failures}),
                       failures=failures)
