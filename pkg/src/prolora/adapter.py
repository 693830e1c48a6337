"""Partially-shared, rotation-enhanced low-rank adapters for one linear layer.

A frozen base weight W0 (o x h) is updated by delta_w = (alpha/r) * B @ A,
where the low-rank factors A (r x h) and B (o x r) are only partially stored:
the first u ranks are kept as-is (a_unshared, b_unshared), while the
remaining r - u ranks are reconstructed from single stored chunks
(a_shared, b_shared) that are broadcast m / n times, each copy circularly
rotated by a multiple of a base stride to break block repetition. Storing
chunks instead of full factors is what saves parameters; expansion happens
on demand and is never persisted.

Gradients are closed-form. The adjoint of broadcast-plus-rotate is "folding":
each copy's gradient slice is zero-padded back to chunk size, inverse-rotated
and summed into the stored chunk's gradient.

Sharing and rotation can each act along the hidden or the rank dimension
(share_axis / rotate_axis); the default is hidden-sharing with rank-rotation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .matrix import ShapeError, SplitMix64

__all__ = [
    "AdapterConfig",
    "AdapterState",
    "ConfigError",
    "GradBundle",
    "StateError",
    "DEFAULT_GAIN",
    "backward",
    "clora_config",
    "delta_w",
    "expand_a",
    "expand_b",
    "forward",
    "init",
    "lora_config",
    "make_dropout_mask",
    "merge",
    "prolora_config",
    "rolora_config",
    "trainable_count",
    "unmerge",
    "validate",
]

# Kaiming-uniform gain for the leaky slope sqrt(5) convention: the sampling
# bound g * sqrt(3 / fan_in) then reduces to 1 / sqrt(fan_in).
DEFAULT_GAIN = math.sqrt(1.0 / 3.0)


class ConfigError(ValueError):
    """Raised when an adapter configuration is invalid for a layer shape."""


class StateError(RuntimeError):
    """Raised on merge/unmerge misuse or an unbound base weight."""


@dataclass(frozen=True)
class AdapterConfig:
    """Hyperparameters of one adapter.

    r: total rank; u: unshared rank (u == r degenerates to plain LoRA);
    m, n: number of broadcast copies for the A / B side; stride_a, stride_b:
    per-copy rotation increments (None derives max(floor(L/copies), 1) from
    the chunk's extent L along the roll axis); alpha: scaling numerator of
    the alpha/r factor; share_axis / rotate_axis: "hidden" or "rank".
    """

    r: int
    u: int = 0
    m: int = 1
    n: int = 1
    stride_a: int | None = None
    stride_b: int | None = None
    alpha: float = 16.0
    dropout_rate: float = 0.1
    share_axis: str = "hidden"
    rotate_axis: str = "rank"


def lora_config(r: int, **kwargs) -> AdapterConfig:
    """Plain LoRA: every rank unshared."""
    return AdapterConfig(r=r, u=r, m=1, n=1, **kwargs)


def clora_config(r: int, m: int, n: int, **kwargs) -> AdapterConfig:
    """Pure broadcast sharing: no unshared ranks, no rotation."""
    return AdapterConfig(r=r, u=0, m=m, n=n, stride_a=0, stride_b=0, **kwargs)


def rolora_config(r: int, m: int, n: int, **kwargs) -> AdapterConfig:
    """Broadcast sharing with default rotation strides, no unshared ranks."""
    return AdapterConfig(r=r, u=0, m=m, n=n, **kwargs)


def prolora_config(r: int, u: int, m: int, n: int, **kwargs) -> AdapterConfig:
    """Partial sharing: u unshared ranks plus rotated broadcast for the rest."""
    return AdapterConfig(r=r, u=u, m=m, n=n, **kwargs)


@dataclass(frozen=True)
class _SideLayout:
    """Geometry of one shared factor side, resolved against a layer shape.

    copies are laid side by side along concat_axis of the assembled shared
    block; each copy is the stored chunk rotated by i*stride along roll_axis
    and truncated to the remaining extent for the final copy.
    """

    chunk_shape: tuple[int, int]
    copies: int
    stride: int
    roll_axis: int
    concat_axis: int
    span: int  # total extent to fill along concat_axis

    @property
    def piece(self) -> int:
        return self.chunk_shape[self.concat_axis]


def _chunk_len(total: int, copies: int, what: str) -> int:
    size = -(-total // copies)  # ceil
    if (copies - 1) * size >= total:
        raise ConfigError(
            f"{what}={copies} leaves an empty final chunk copy over extent {total} "
            f"(stored chunk size ceil({total}/{copies})={size})"
        )
    return size


def _default_stride(chunk_shape: tuple[int, int], roll_axis: int, copies: int) -> int:
    return max(chunk_shape[roll_axis] // copies, 1)


def _layout_a(cfg: AdapterConfig, h: int) -> _SideLayout:
    shared = cfg.r - cfg.u
    roll_axis = 0 if cfg.rotate_axis == "rank" else 1
    if cfg.share_axis == "hidden":
        # formula width ceil(h/m) holds even for an empty (u == r) chunk,
        # but the emptiness check only applies when something is expanded
        width = -(-h // cfg.m) if shared == 0 else _chunk_len(h, cfg.m, "sharing rate m")
        chunk = (shared, width)
        concat_axis, span = 1, h
    else:
        rows = 0 if shared == 0 else _chunk_len(shared, cfg.m, "sharing rate m")
        chunk = (rows, h)
        concat_axis, span = 0, shared
    stride = cfg.stride_a
    if stride is None:
        stride = 0 if shared == 0 else _default_stride(chunk, roll_axis, cfg.m)
    return _SideLayout(chunk, cfg.m, stride, roll_axis, concat_axis, span)


def _layout_b(cfg: AdapterConfig, o: int) -> _SideLayout:
    shared = cfg.r - cfg.u
    roll_axis = 1 if cfg.rotate_axis == "rank" else 0
    if cfg.share_axis == "hidden":
        height = -(-o // cfg.n) if shared == 0 else _chunk_len(o, cfg.n, "sharing rate n")
        chunk = (height, shared)
        concat_axis, span = 0, o
    else:
        cols = 0 if shared == 0 else _chunk_len(shared, cfg.n, "sharing rate n")
        chunk = (o, cols)
        concat_axis, span = 1, shared
    stride = cfg.stride_b
    if stride is None:
        stride = 0 if shared == 0 else _default_stride(chunk, roll_axis, cfg.n)
    return _SideLayout(chunk, cfg.n, stride, roll_axis, concat_axis, span)


def validate(cfg: AdapterConfig, h: int, o: int) -> AdapterConfig:
    """Check cfg against a layer shape and return it with strides resolved.

    Raises ConfigError with a distinct message per violation. Sharing rates
    are not checked when u == r (sharing is vacuous there).
    """
    if h < 1 or o < 1:
        raise ConfigError(f"layer dimensions must be positive, got h={h}, o={o}")
    if cfg.r < 1:
        raise ConfigError(f"r must be >= 1, got {cfg.r}")
    if cfg.u < 0:
        raise ConfigError(f"u must be >= 0, got {cfg.u}")
    if cfg.u > cfg.r:
        raise ConfigError(f"u exceeds r ({cfg.u} > {cfg.r})")
    if cfg.m < 1 or cfg.n < 1:
        raise ConfigError(f"sharing rates must be >= 1, got m={cfg.m}, n={cfg.n}")
    if not 0.0 <= cfg.dropout_rate < 1.0:
        raise ConfigError(f"dropout_rate must be in [0, 1), got {cfg.dropout_rate}")
    if cfg.stride_a is not None and cfg.stride_a < 0:
        raise ConfigError(f"stride_a must be non-negative, got {cfg.stride_a}")
    if cfg.stride_b is not None and cfg.stride_b < 0:
        raise ConfigError(f"stride_b must be non-negative, got {cfg.stride_b}")
    if cfg.share_axis not in ("hidden", "rank"):
        raise ConfigError(f"share_axis must be 'hidden' or 'rank', got {cfg.share_axis!r}")
    if cfg.rotate_axis not in ("hidden", "rank"):
        raise ConfigError(f"rotate_axis must be 'hidden' or 'rank', got {cfg.rotate_axis!r}")

    if cfg.u == cfg.r:
        return replace(cfg, stride_a=cfg.stride_a or 0, stride_b=cfg.stride_b or 0)

    if cfg.share_axis == "hidden":
        if cfg.m > h:
            raise ConfigError(f"sharing rate m={cfg.m} exceeds input dimension h={h}")
        if cfg.n > o:
            raise ConfigError(f"sharing rate n={cfg.n} exceeds output dimension o={o}")
    else:
        shared = cfg.r - cfg.u
        if cfg.m > shared:
            raise ConfigError(f"sharing rate m={cfg.m} exceeds shared rank {shared}")
        if cfg.n > shared:
            raise ConfigError(f"sharing rate n={cfg.n} exceeds shared rank {shared}")
    la = _layout_a(cfg, h)
    lb = _layout_b(cfg, o)
    return replace(cfg, stride_a=la.stride, stride_b=lb.stride)


def chunk_shapes(cfg: AdapterConfig, h: int, o: int) -> dict[str, tuple[int, int]]:
    """Stored-array shapes implied by cfg for an o x h layer."""
    cfg = validate(cfg, h, o)
    return {
        "a_unshared": (cfg.u, h),
        "a_shared": _layout_a(cfg, h).chunk_shape,
        "b_unshared": (o, cfg.u),
        "b_shared": _layout_b(cfg, o).chunk_shape,
    }


def trainable_count(cfg: AdapterConfig, h: int, o: int) -> int:
    """Number of stored trainable scalars for an o x h layer.

    For the default hidden-sharing this is
    u*(h+o) + (r-u) * (ceil(h/m) + ceil(o/n)), which reduces to
    u*(h+o) + h*(r-u)/m + o*(r-u)/n when m | h and n | o.
    """
    shapes = chunk_shapes(cfg, h, o)
    return sum(rows * cols for rows, cols in shapes.values())


@dataclass
class AdapterState:
    """Trainable chunks bound to one frozen o x h base weight.

    a_unshared (u x h) and b_unshared (o x u) are the unshared ranks;
    a_shared / b_shared are the stored broadcast chunks. w0 holds the base
    weight (or the merged weight once merged=True). extra_header carries
    unrecognized container-header fields through save/load round-trips.
    """

    cfg: AdapterConfig
    h: int
    o: int
    a_unshared: np.ndarray
    a_shared: np.ndarray
    b_unshared: np.ndarray
    b_shared: np.ndarray
    merged: bool = False
    w0: np.ndarray | None = None
    extra_header: dict = field(default_factory=dict)

    @property
    def scaling(self) -> float:
        return self.cfg.alpha / self.cfg.r

    def chunks(self) -> dict[str, np.ndarray]:
        return {
            "a_unshared": self.a_unshared,
            "a_shared": self.a_shared,
            "b_unshared": self.b_unshared,
            "b_shared": self.b_shared,
        }


@dataclass
class GradBundle:
    """Gradients for the four stored chunks plus the layer input."""

    ga_unshared: np.ndarray
    ga_shared: np.ndarray
    gb_unshared: np.ndarray
    gb_shared: np.ndarray
    gx: np.ndarray

    def chunks(self) -> dict[str, np.ndarray]:
        return {
            "a_unshared": self.ga_unshared,
            "a_shared": self.ga_shared,
            "b_unshared": self.gb_unshared,
            "b_shared": self.gb_shared,
        }


def init(
    cfg: AdapterConfig,
    h: int,
    o: int,
    seed: int = 0,
    w0: np.ndarray | None = None,
    rng: SplitMix64 | None = None,
    rectified: bool = True,
    gain: float = DEFAULT_GAIN,
) -> AdapterState:
    """Create a fresh adapter: A chunks sampled uniformly, B chunks zero.

    Sampling order is fixed (a_unshared row-major, then a_shared row-major;
    one stream draw per element) so identical seeds give identical states on
    any platform. The A bound is gain * sqrt(3/h) using the layer's full
    input dimension; with rectified=False the shared chunk instead uses its
    own stored fan-in (its column count), reproducing vanilla Kaiming bounds.
    Both B chunks start at zero, so delta_w of a fresh state is zero.
    """
    cfg = validate(cfg, h, o)
    if w0 is not None and w0.shape != (o, h):
        raise ShapeError(f"base weight shape {w0.shape} does not match (o, h)=({o}, {h})")
    if rng is None:
        rng = SplitMix64(seed)
    shapes = chunk_shapes(cfg, h, o)

    bound = gain * math.sqrt(3.0 / h)
    a_unshared = rng.uniform(-bound, bound, size=shapes["a_unshared"])
    chunk_fan_in = shapes["a_shared"][1]
    shared_bound = bound if rectified else gain * math.sqrt(3.0 / max(chunk_fan_in, 1))
    a_shared = rng.uniform(-shared_bound, shared_bound, size=shapes["a_shared"])

    return AdapterState(
        cfg=cfg,
        h=h,
        o=o,
        a_unshared=a_unshared,
        a_shared=a_shared,
        b_unshared=np.zeros(shapes["b_unshared"]),
        b_shared=np.zeros(shapes["b_shared"]),
        w0=w0,
    )


def _expand_side(chunk: np.ndarray, layout: _SideLayout) -> np.ndarray:
    """Assemble a shared block from rotated, possibly truncated chunk copies."""
    pieces = []
    for i in range(layout.copies):
        c = np.roll(chunk, i * layout.stride, axis=layout.roll_axis)
        take = min(layout.piece, layout.span - i * layout.piece)
        if take < layout.piece:
            c = c[:take, :] if layout.concat_axis == 0 else c[:, :take]
        pieces.append(c)
    return np.concatenate(pieces, axis=layout.concat_axis)


def _fold_side(
    grad: np.ndarray, layout: _SideLayout, skip_inverse_roll: bool = False
) -> np.ndarray:
    """Adjoint of _expand_side: pad each copy's slice, inverse-rotate, sum.

    skip_inverse_roll is a negative-control hook for the equivalence
    verifier; it deliberately breaks the adjoint by rotating forward.
    """
    out = np.zeros(layout.chunk_shape)
    sign = 1 if skip_inverse_roll else -1
    for i in range(layout.copies):
        start = i * layout.piece
        take = min(layout.piece, layout.span - start)
        piece = (
            grad[start : start + take, :]
            if layout.concat_axis == 0
            else grad[:, start : start + take]
        )
        if take < layout.piece:
            padded = np.zeros(layout.chunk_shape)
            if layout.concat_axis == 0:
                padded[:take, :] = piece
            else:
                padded[:, :take] = piece
            piece = padded
        out += np.roll(piece, sign * i * layout.stride, axis=layout.roll_axis)
    return out


def expand_a(state: AdapterState) -> np.ndarray:
    """Materialize the full r x h A factor (unshared rows over broadcast rows)."""
    if state.cfg.u == state.cfg.r:
        return state.a_unshared.copy()
    shared = _expand_side(state.a_shared, _layout_a(state.cfg, state.h))
    return np.concatenate([state.a_unshared, shared], axis=0)


def expand_b(state: AdapterState) -> np.ndarray:
    """Materialize the full o x r B factor (unshared columns before broadcast)."""
    if state.cfg.u == state.cfg.r:
        return state.b_unshared.copy()
    shared = _expand_side(state.b_shared, _layout_b(state.cfg, state.o))
    return np.concatenate([state.b_unshared, shared], axis=1)


def delta_w(state: AdapterState) -> np.ndarray:
    """The o x h weight update (alpha/r) * B_expanded @ A_expanded."""
    return state.scaling * (expand_b(state) @ expand_a(state))


def make_dropout_mask(rng: SplitMix64, shape: tuple[int, int], rate: float) -> np.ndarray:
    """Inverted dropout mask: entries are 0 or 1/(1-rate), drawn row-major."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout_rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.uniform(0.0, 1.0, size=shape) >= rate
    return keep.astype(np.float64) / (1.0 - rate)


def forward(
    state: AdapterState,
    x: np.ndarray,
    training: bool = False,
    rng: SplitMix64 | None = None,
    dropout_mask: np.ndarray | None = None,
) -> np.ndarray:
    """Layer output W0 @ x + (alpha/r) * B_exp @ (A_exp @ x~) for an h x batch input.

    In training mode x~ is the dropout-masked input on the adapter path only
    (the base path always sees x). A mask may be passed explicitly (to replay
    it in backward) or drawn from rng. Merged states multiply by the merged
    weight directly.
    """
    if state.w0 is None:
        raise StateError("no base weight bound to this adapter state")
    if x.ndim != 2 or x.shape[0] != state.h:
        raise ShapeError(f"input shape {x.shape} does not match h={state.h}")
    if state.merged:
        return state.w0 @ x
    base = state.w0 @ x
    xt = x
    if training and state.cfg.dropout_rate > 0.0:
        if dropout_mask is None:
            if rng is None:
                raise StateError("training forward with dropout needs an rng or a mask")
            dropout_mask = make_dropout_mask(rng, x.shape, state.cfg.dropout_rate)
        xt = x * dropout_mask
    return base + state.scaling * (expand_b(state) @ (expand_a(state) @ xt))


def backward(
    state: AdapterState,
    x: np.ndarray,
    upstream: np.ndarray,
    dropout_mask: np.ndarray | None = None,
    _skip_inverse_roll: bool = False,
) -> GradBundle:
    """Closed-form gradients of the four stored chunks and the input.

    upstream is dLoss/dOutput (o x batch) for the same x (and, if dropout was
    active, the same replayed mask) used in the forward pass. Full-factor
    gradients gA = (alpha/r) * B_exp^T @ g @ x~^T and
    gB = (alpha/r) * g @ (A_exp @ x~)^T are folded back onto the stored
    chunks by the broadcast/rotation adjoint. gx is W^T @ g with
    W = W0 + delta_w (adapter-path term mask-adjusted when dropout is
    replayed).
    """
    if x.ndim != 2 or x.shape[0] != state.h:
        raise ShapeError(f"input shape {x.shape} does not match h={state.h}")
    if upstream.shape != (state.o, x.shape[1]):
        raise ShapeError(
            f"upstream shape {upstream.shape} does not match (o, batch)="
            f"({state.o}, {x.shape[1]})"
        )
    cfg = state.cfg
    xt = x if dropout_mask is None else x * dropout_mask
    a_exp = expand_a(state)
    b_exp = expand_b(state)
    s = state.scaling

    ga_full = s * ((b_exp.T @ upstream) @ xt.T)
    gb_full = s * (upstream @ (a_exp @ xt).T)

    adapter_gx = s * (a_exp.T @ (b_exp.T @ upstream))
    if dropout_mask is not None:
        adapter_gx = adapter_gx * dropout_mask
    if state.w0 is not None:
        gx = (state.w0.T @ upstream) if state.merged else (state.w0.T @ upstream) + adapter_gx
    else:
        gx = adapter_gx

    if cfg.u == cfg.r:
        ga_shared = np.zeros(state.a_shared.shape)
        gb_shared = np.zeros(state.b_shared.shape)
    else:
        ga_shared = _fold_side(ga_full[cfg.u :, :], _layout_a(cfg, state.h), _skip_inverse_roll)
        gb_shared = _fold_side(gb_full[:, cfg.u :], _layout_b(cfg, state.o), _skip_inverse_roll)

    return GradBundle(
        ga_unshared=ga_full[: cfg.u, :].copy(),
        ga_shared=ga_shared,
        gb_unshared=gb_full[:, : cfg.u].copy(),
        gb_shared=gb_shared,
        gx=gx,
    )


def merge(state: AdapterState, w0: np.ndarray | None = None) -> np.ndarray:
    """Fold delta_w into the base weight; returns W = W0 + delta_w.

    The state is flagged merged and rebound to the returned weight so
    forward() multiplies by W directly afterwards.
    """
    if state.merged:
        raise StateError("adapter is already merged")
    base = w0 if w0 is not None else state.w0
    if base is None:
        raise StateError("merge needs a base weight (argument or bound w0)")
    if base.shape != (state.o, state.h):
        raise ShapeError(f"base weight shape {base.shape} does not match (o, h)")
    merged = base + delta_w(state)
    state.merged = True
    state.w0 = merged
    return merged


def unmerge(state: AdapterState, w: np.ndarray | None = None) -> np.ndarray:
    """Subtract delta_w back out of a merged weight; returns the restored W0."""
    if not state.merged:
        raise StateError("adapter is not merged")
    merged = w if w is not None else state.w0
    if merged is None:
        raise StateError("unmerge needs the merged weight (argument or bound w0)")
    if merged.shape != (state.o, state.h):
        raise ShapeError(f"weight shape {merged.shape} does not match (o, h)")
    restored = merged - delta_w(state)
    state.merged = False
    state.w0 = restored
    return restored
