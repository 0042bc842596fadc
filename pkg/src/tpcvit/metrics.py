"""Parameter and FLOP accounting, token-lifecycle tracing and per-step metrics CSV.

FLOP convention (shared with the tensor core's op counter): one
multiply-accumulate is one FLOP; bias adds, residual adds, scaling and the
gate arithmetic cost one per element; softmax costs ``OP_COSTS["softmax"]``
and layer norm ``OP_COSTS["layernorm"]`` per element.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from typing import Iterable, TextIO

import numpy as np

from .config import ModelConfig, TpcConfig
from .errors import ContractError
from .tensor import OP_COSTS

log = logging.getLogger(__name__)

TRACE_HEADER = [
    "step", "layer", "token", "p", "restart", "b_raw", "b_reg",
    "cumulation", "mask_before", "mask_after", "halted",
]
METRICS_HEADER = ["step", "task", "ponder", "distribution", "final", "mean_depth", "active_tokens_mean", "lr"]

# per token: two gates of (scale, shift, sigmoid) plus the break product
GATE_FLOPS_PER_TOKEN = 2 * (2 + OP_COSTS["sigmoid"]) + 1


def count_params(config: ModelConfig, tpc: TpcConfig | None = None) -> int:
    """Exact number of learnable scalars."""
    d, h, c = config.embed_dim, config.mlp_hidden, config.num_classes
    patch_in = config.in_chans * config.patch_size**2
    embed = patch_in * d + d + d + config.num_tokens * d
    qkv = d * 3 * d + (3 * d if config.qkv_bias else 0)
    block = 4 * d + qkv + (d * d + d) + (d * h + h) + (h * d + d)
    head = 2 * d + d * c + c
    gates = 2 if tpc is not None and tpc.learnable_gates else 0
    return embed + config.depth * block + head + gates


@dataclass
class LayerFlops:
    tokens: int
    attention: int
    mlp: int
    gate: int = 0
    selection: int = 0

    @property
    def total(self) -> int:
        return self.attention + self.mlp + self.gate + self.selection


@dataclass
class FlopLedger:
    embed: int
    layers: list
    head: int
    dense_equivalent: int

    @property
    def total(self) -> int:
        return self.embed + sum(l.total for l in self.layers) + self.head

    @property
    def attention(self) -> int:
        return sum(l.attention for l in self.layers)

    def gflops(self) -> float:
        return self.total / 1e9

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "tokens", "attention", "mlp", "gate", "selection", "total"])
        w.writerow(["embed", "", "", "", "", "", self.embed])
        for i, l in enumerate(self.layers, start=1):
            w.writerow([i, l.tokens, l.attention, l.mlp, l.gate, l.selection, l.total])
        w.writerow(["head", "", "", "", "", "", self.head])
        w.writerow(["total", "", "", "", "", "", self.total])
        w.writerow(["dense_equivalent", "", "", "", "", "", self.dense_equivalent])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"{'layer':>6} {'tokens':>7} {'attention':>14} {'mlp':>14} {'gate':>9} {'selection':>12}"]
        for i, l in enumerate(self.layers, start=1):
            lines.append(f"{i:>6} {l.tokens:>7} {l.attention:>14,} {l.mlp:>14,} {l.gate:>9,} {l.selection:>12,}")
        lines.append(f"embed {self.embed:,}  head {self.head:,}")
        lines.append(f"total {self.total / 1e9:.3f} GFLOPs  (dense equivalent {self.dense_equivalent / 1e9:.3f} GFLOPs)")
        return "\n".join(lines)


def attention_flops(n: int, dim: int, heads: int, keys: int | None = None) -> int:
    """Logits, scaling, softmax and value mixing for ``n`` queries over ``keys`` keys each."""
    keys = n if keys is None else keys
    return 2 * n * keys * dim + n * keys * heads * (1 + OP_COSTS["softmax"])


def layer_flops(config: ModelConfig, n: int, kappa: int | None = None, gates: bool = False) -> LayerFlops:
    d, h, heads = config.embed_dim, config.mlp_hidden, config.heads
    ln = OP_COSTS["layernorm"] * n * d
    qkv = n * d * 3 * d + (n * 3 * d if config.qkv_bias else 0)
    proj = n * d * d + n * d
    selection = 0
    if kappa is not None and kappa < n:
        mixing = attention_flops(n, d, heads, kappa)
        selection = n * n * d
    else:
        mixing = attention_flops(n, d, heads)
    attention = ln + qkv + mixing + proj + n * d
    mlp = ln + (n * d * h + n * h) + OP_COSTS["gelu"] * n * h + (n * h * d + n * d) + n * d
    gate = GATE_FLOPS_PER_TOKEN * n if gates else 0
    return LayerFlops(n, attention, mlp, gate, selection)


def _embed_flops(config: ModelConfig) -> int:
    k, d = config.num_patches, config.embed_dim
    patch_in = config.in_chans * config.patch_size**2
    return k * patch_in * d + k * d + d + config.num_tokens * d


def _head_flops(config: ModelConfig) -> int:
    d, c = config.embed_dim, config.num_classes
    return OP_COSTS["layernorm"] * d + d * c + c


def count_flops(config: ModelConfig, active_counts=None, tpc: TpcConfig | None = None) -> FlopLedger:
    """Analytic FLOPs of one image.

    ``active_counts[l]`` is the number of tokens processed at layer ``l+1``
    (default: all). With ``tpc`` the gates are counted and, when the stabilizer
    is on and fewer than ``kappa`` keys are kept, the sparse attention cost
    plus the distance cost of selection replaces dense attention.
    """
    n_all = config.num_tokens
    if active_counts is None:
        active_counts = [n_all] * config.depth
    if len(active_counts) != config.depth:
        raise ContractError(f"need {config.depth} per-layer counts, got {len(active_counts)}")
    if any(c > n_all or c < 1 for c in active_counts):
        raise ContractError(f"active counts must lie in [1, {n_all}]")
    kappa = tpc.kappa if tpc is not None and tpc.stabilizer else None
    layers = [layer_flops(config, int(c), kappa, gates=tpc is not None) for c in active_counts]
    dense = [layer_flops(config, n_all) for _ in range(config.depth)]
    embed, head = _embed_flops(config), _head_flops(config)
    return FlopLedger(embed, layers, head, embed + sum(l.total for l in dense) + head)


def dense_gflops(config: ModelConfig) -> float:
    return count_flops(config).total / 1e9


# -- token lifecycle trace ----------------------------------------------------

@dataclass
class TraceEvent:
    step: int
    layer: int
    token: int
    p: float
    restart: float
    b_raw: float
    b_reg: float
    cumulation: float
    mask_before: bool
    mask_after: bool
    halted: bool

    def row(self) -> list:
        return [
            self.step, self.layer, self.token,
            repr(float(self.p)), repr(float(self.restart)), repr(float(self.b_raw)),
            repr(float(self.b_reg)), repr(float(self.cumulation)),
            int(self.mask_before), int(self.mask_after), int(self.halted),
        ]


def events_from_record(step: int, record) -> list:
    """One event per token that was still active entering the layer.

    Token ids flatten any batch axis: ``image * tokens_per_image + token``.
    """
    before = np.asarray(record.mask_before).reshape(-1)
    arrays = {
        "p": record.pause, "restart": record.restart, "b_raw": record.b_raw,
        "b_reg": record.b_reg.data if hasattr(record.b_reg, "data") else record.b_reg,
        "cumulation": record.cumulation, "mask_after": record.mask_after,
    }
    flat = {k: np.asarray(v).reshape(-1) for k, v in arrays.items()}
    events = []
    for tok in np.flatnonzero(before):
        events.append(
            TraceEvent(
                step, record.layer, int(tok),
                float(flat["p"][tok]), float(flat["restart"][tok]), float(flat["b_raw"][tok]),
                float(flat["b_reg"][tok]), float(flat["cumulation"][tok]),
                True, bool(flat["mask_after"][tok]), not bool(flat["mask_after"][tok]),
            )
        )
    return events


class TraceSink:
    """In-process collector of trace events."""

    def __init__(self):
        self.events: list = []

    def add_record(self, step: int, record, delta: float | None = None) -> None:
        self.events.extend(events_from_record(step, record))

    def write(self, stream: TextIO) -> None:
        emit_trace(self.events, stream)


def emit_trace(events: Iterable[TraceEvent], stream: TextIO) -> int:
    """Write the CSV header and rows in (step, layer, token) order; returns the row count."""
    ordered = sorted(events, key=lambda e: (e.step, e.layer, e.token))
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for e in ordered:
        w.writerow(e.row())
    return len(ordered)


class CsvStreamSink(TraceSink):
    """Trace sink that appends rows to a file as records arrive.

    Write failures are logged and remembered in ``error``; callers keep running.
    """

    def __init__(self, path, append: bool = False):
        super().__init__()
        self.path = path
        self.error = None
        self.rows = 0
        try:
            if not append:
                with open(path, "w", newline="") as f:
                    csv.writer(f, lineterminator="\n").writerow(TRACE_HEADER)
        except OSError as exc:
            self._fail(exc)

    def _fail(self, exc) -> None:
        self.error = exc
        log.warning("trace sink %s failed: %s", self.path, exc)

    def add_record(self, step: int, record, delta: float | None = None) -> None:
        if self.error is not None:
            return
        events = sorted(events_from_record(step, record), key=lambda e: e.token)
        try:
            with open(self.path, "a", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                for e in events:
                    w.writerow(e.row())
            self.rows += len(events)
        except OSError as exc:
            self._fail(exc)


def read_trace(stream: TextIO) -> list:
    reader = csv.reader(stream)
    header = next(reader)
    if header != TRACE_HEADER:
        raise ContractError(f"unexpected trace header {header}")
    return [row for row in reader]


class MetricsWriter:
    """Per-step metrics CSV."""

    def __init__(self, path, append: bool = False):
        self.path = path
        if not append:
            with open(path, "w", newline="") as f:
                csv.writer(f, lineterminator="\n").writerow(METRICS_HEADER)

    def write(self, step: int, losses: dict, mean_depth: float, active_mean: float, lr: float) -> None:
        row = [step] + [repr(float(losses[k])) for k in ("task", "ponder", "distribution", "final")]
        row += [repr(float(mean_depth)), repr(float(active_mean)), repr(float(lr))]
        with open(self.path, "a", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(row)
