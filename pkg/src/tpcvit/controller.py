"""Token propagation control: break probabilities, smoothing and the halting state machine.

Per token and layer the block emits a pause probability ``p`` and a restart
probability ``r``; the break probability is ``b = p * (1 - r)``. Breaks are
smoothed toward the mean over the still-active tokens, accumulated across
layers, and a token halts at the first layer where the accumulated mass
reaches ``1 - delta``. The last layer forces ``b = 1`` so every token halts by
then. Each layer also yields an aggregation weight per token: the smoothed
break before the halting layer, the remainder at it, and zero afterwards.

All functions accept NumPy arrays or :class:`~tpcvit.tensor.Tensor` objects.
Halting decisions are taken on values; weights and remainders stay on the
tape so losses can differentiate through them.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor

SUM = "cumulative-sum"
PRODUCT = "cumulative-product"
PAUSE_RESTART = "pause-restart"


def _values(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _check_prob(x, name: str) -> None:
    v = _values(x)
    if np.any(v < 0.0) or np.any(v > 1.0) or not np.all(np.isfinite(v)):
        raise ContractError(f"{name} must lie in [0, 1]")


def break_prob(pause, restart):
    """Probability that a token stops: paused and not restarted."""
    _check_prob(pause, "pause probability")
    _check_prob(restart, "restart probability")
    if isinstance(pause, Tensor) or isinstance(restart, Tensor):
        return T.mul(pause, T.sub(1.0, restart) if isinstance(restart, Tensor) else 1.0 - np.asarray(restart))
    return np.asarray(pause, dtype=np.float64) * (1.0 - np.asarray(restart, dtype=np.float64))


def regularize(b, zeta: float, active=None):
    """Mix each break with the mean over active tokens (last axis): ``zeta*b + (1-zeta)*mean``.

    Entries outside ``active`` are returned unchanged.
    """
    if not 0.0 <= zeta <= 1.0:
        raise ContractError("zeta must lie in [0, 1]")
    _check_prob(b, "break probability")
    tensor_in = isinstance(b, Tensor)
    bt = b if tensor_in else Tensor(np.asarray(b, dtype=np.float64))
    active = np.ones(bt.shape, dtype=bool) if active is None else np.broadcast_to(np.asarray(active, dtype=bool), bt.shape)
    count = active.sum(axis=-1, keepdims=True)
    if np.any(count == 0):
        raise ContractError("regularize needs at least one active token")
    if zeta == 1.0:
        out = bt
    else:
        avg = T.tsum(T.where(active, bt, 0.0), axis=-1, keepdims=True) / count.astype(bt.dtype)
        mixed = bt * zeta + avg * (1.0 - zeta)
        # clip round-off so the convex combination stays inside [0, 1]
        mixed = T.where(mixed.data > 1.0, 1.0, mixed)
        out = T.where(active, mixed, bt)
    return out if tensor_in else out.data


@dataclass
class TokenHaltState:
    """Halting bookkeeping for a batch of tokens (any leading shape)."""

    cumulation: np.ndarray
    mask: np.ndarray
    halting_layer: np.ndarray
    eta: np.ndarray
    remainder: Tensor
    accumulated: Tensor
    layer: int = 0
    mode: str = SUM

    @classmethod
    def initial(cls, shape, mode: str = SUM, dtype=np.float64) -> "TokenHaltState":
        shape = tuple(shape) if not isinstance(shape, int) else (shape,)
        start = 1.0 if mode == PRODUCT else 0.0
        return cls(
            cumulation=np.full(shape, start),
            mask=np.ones(shape, dtype=bool),
            halting_layer=np.zeros(shape, dtype=np.int64),
            eta=np.zeros(shape, dtype=np.int64),
            remainder=Tensor(np.ones(shape, dtype=dtype)),
            accumulated=Tensor(np.full(shape, start, dtype=dtype)),
            mode=mode,
        )

    @property
    def halted(self) -> np.ndarray:
        return self.halting_layer > 0


def step(state: TokenHaltState, b_reg, layer: int, num_layers: int, delta: float, b_weight=None):
    """Advance the halting state by one layer (1-based); returns ``(new_state, weights)``.

    At ``layer == num_layers`` every still-active token halts. ``b_weight``
    (default ``b_reg``) feeds the weights and remainders while ``b_reg`` alone
    drives the halting decision.
    """
    if not 1 <= layer <= num_layers:
        raise ContractError(f"layer {layer} outside [1, {num_layers}]")
    if layer != state.layer + 1:
        raise ContractError(f"expected layer {state.layer + 1}, got {layer}")
    b = b_reg if isinstance(b_reg, Tensor) else Tensor(np.asarray(b_reg, dtype=state.remainder.dtype))
    bv = b.data.astype(np.float64)
    if b_weight is not None:
        b = b_weight if isinstance(b_weight, Tensor) else Tensor(np.asarray(b_weight, dtype=state.remainder.dtype))
    active = state.mask
    threshold = 1.0 - delta

    if state.mode == PRODUCT:
        cumulation = np.where(active, state.cumulation * bv, state.cumulation)
        crossed = cumulation > threshold
        before = state.accumulated
        accumulated = T.where(active, state.accumulated * b, state.accumulated)
    else:
        cumulation = np.where(active, state.cumulation + bv, state.cumulation)
        crossed = cumulation >= threshold
        before = state.accumulated
        accumulated = T.where(active, state.accumulated + b, state.accumulated)

    halts = active & (crossed | (layer == num_layers))
    remainder_now = T.sub(1.0, before)
    weights = T.where(halts, remainder_now, T.where(active, b, 0.0))
    remainder = T.where(halts, remainder_now, T.where(active, T.sub(1.0, accumulated), state.remainder))
    new_state = replace(
        state,
        cumulation=cumulation,
        mask=active & ~halts,
        halting_layer=np.where(halts, layer, state.halting_layer),
        eta=state.eta + active,
        remainder=remainder,
        accumulated=accumulated,
        layer=layer,
    )
    return new_state, weights


def halting_layer(b_sequence, delta: float, mode: str = SUM) -> int:
    """First layer (1-based) whose accumulated break reaches the threshold.

    The last entry is treated as forced to 1, so the result is at most
    ``len(b_sequence)``. Sum mode compares with ``>= 1 - delta``; product mode
    requires the running product to exceed ``1 - delta``.
    """
    seq = list(map(float, b_sequence))
    if not seq:
        raise ContractError("empty break sequence")
    for v in seq:
        if not 0.0 <= v <= 1.0:
            raise ContractError("break probabilities must lie in [0, 1]")
    total = 1.0 if mode == PRODUCT else 0.0
    for n, v in enumerate(seq[:-1], start=1):
        if mode == PRODUCT:
            total *= v
            if total > 1.0 - delta:
                return n
        else:
            total += v
            if total >= 1.0 - delta:
                return n
    return len(seq)


def aggregate_cls(cls_states, weights) -> Tensor:
    """Weighted sum of per-layer CLS states; ``weights[l]`` has the states' leading shape."""
    if len(cls_states) != len(weights) or not cls_states:
        raise ContractError("need one weight per CLS state")
    out = None
    for state, w in zip(cls_states, weights):
        state = T.as_tensor(state)
        w = T.as_tensor(w)
        term = state * T.reshape(w, w.shape + (1,)) if w.ndim else state * w
        out = term if out is None else out + term
    return out


@dataclass
class BreakRecord:
    """Per-layer controller quantities for every token (arrays share the token shape)."""

    layer: int
    pause: np.ndarray
    restart: np.ndarray
    b_raw: np.ndarray
    b_reg: Tensor
    weight: Tensor
    cumulation: np.ndarray
    mask_before: np.ndarray
    mask_after: np.ndarray
    halted: np.ndarray
    participating: np.ndarray | None = None

    @property
    def non_restart(self) -> np.ndarray:
        return 1.0 - self.restart


@dataclass
class ControllerRun:
    state: TokenHaltState
    records: list = field(default_factory=list)

    @property
    def weights(self) -> np.ndarray:
        return np.stack([r.weight.data for r in self.records])


def controller_layer(state, pause, restart, layer, num_layers, delta, zeta, regularize_scope="all"):
    """One layer of the control loop given gate outputs; returns ``(state, record)``.

    At the last layer the break is forced to 1 and the record shows
    ``pause = 1, restart = 0``.
    """
    shape = state.mask.shape
    dtype = state.remainder.dtype
    if layer == num_layers:
        pause = Tensor(np.ones(shape, dtype=dtype))
        restart = Tensor(np.zeros(shape, dtype=dtype))
        b_raw = Tensor(np.ones(shape, dtype=dtype))
    else:
        pause = pause if isinstance(pause, Tensor) else Tensor(np.asarray(pause, dtype=dtype))
        restart_t = restart if isinstance(restart, Tensor) else Tensor(np.asarray(restart, dtype=dtype))
        restart = restart_t
        b_raw = T.mul(pause, T.sub(1.0, restart_t))
    active = state.mask
    if active.any():
        has_active = active.reshape(-1, shape[-1]).any(axis=-1).reshape(shape[:-1] + (1,))
        reg_mask = np.where(has_active, active, True)
        b_reg = regularize(b_raw, zeta, reg_mask)
    else:
        b_reg = b_raw
    weight_source = b_raw if regularize_scope == "cumulation" else None
    new_state, weights = step(state, b_reg, layer, num_layers, delta, weight_source)
    record = BreakRecord(
        layer=layer,
        pause=pause.data.copy(),
        restart=restart.data.copy(),
        b_raw=b_raw.data.copy(),
        b_reg=b_reg,
        weight=weights,
        cumulation=new_state.cumulation.copy(),
        mask_before=active.copy(),
        mask_after=new_state.mask.copy(),
        halted=new_state.mask != active,
    )
    return new_state, record


def run_controller(pause, restart, delta: float = 0.01, zeta: float = 0.5, mode: str = SUM) -> ControllerRun:
    """Drive the control loop from given ``L x tokens`` pause/restart tables."""
    pause = np.asarray(pause, dtype=np.float64)
    restart = np.asarray(restart, dtype=np.float64)
    if pause.shape != restart.shape or pause.ndim < 2:
        raise ContractError("pause and restart tables must share an L x tokens shape")
    num_layers = pause.shape[0]
    state = TokenHaltState.initial(pause.shape[1:], mode)
    run = ControllerRun(state)
    for layer in range(1, num_layers + 1):
        state, record = controller_layer(state, pause[layer - 1], restart[layer - 1], layer, num_layers, delta, zeta)
        run.records.append(record)
    run.state = state
    return run
