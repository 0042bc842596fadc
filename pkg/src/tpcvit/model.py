"""Vanilla and token-propagation-controlled vision transformers.

The vanilla model keeps every token in every layer. The controlled model
reads a pause and a non-restart probability from two reserved embedding
dimensions after each block, feeds them to the halting controller, drops (or
zeroes) halted tokens from later layers, and predicts from a weighted sum of
the per-layer CLS states.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import controller as C
from . import tensor as T
from .config import ModelConfig, TpcConfig, validate_model
from .errors import ContractError, DimensionError, NumericalError
from .nn import Block, LayerNorm, Linear, Module, PatchEmbed
from .tensor import Tensor


@dataclass
class TpcBlockOutput:
    tokens: Tensor
    pause: Tensor
    non_restart: Tensor

    @property
    def restart(self) -> Tensor:
        return T.sub(1.0, self.non_restart)


def vanilla_block(block: Block, x: Tensor, scale_mode: str = "sqrt_d", keep_weights: bool = False, kappa=None) -> Tensor:
    """All tokens in, all tokens out; dense attention unless ``kappa`` selects keys."""
    return block(x, kappa=kappa, scale_mode=scale_mode, keep_weights=keep_weights)


def gate_probs(tokens: Tensor, gamma, beta, gate_dims=(0, 1)):
    """Sigmoid gates on two embedding dimensions: ``sigmoid(gamma * t[d] + beta)``."""
    first = tokens[..., gate_dims[0]]
    second = tokens[..., gate_dims[1]]
    return T.sigmoid(first * gamma + beta), T.sigmoid(second * gamma + beta)


def tpc_block(block: Block, x: Tensor, mask, tpc: TpcConfig, gamma, beta) -> TpcBlockOutput:
    """Run one block on the tokens selected by ``mask`` (``B x N`` booleans) and read the gates.

    ``mask_mode="zero"`` multiplies masked tokens by zero and keeps them in the
    attention; ``"drop"`` removes them from the key set and leaves their
    embedding untouched. The top-k stabilizer applies when enabled.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:2]:
        raise DimensionError(f"mask shape {mask.shape} does not match tokens {x.shape[:2]}")
    if not mask[:, 0].all():
        raise ContractError("the CLS token must stay active")
    kappa = tpc.kappa if tpc.stabilizer else None
    if tpc.mask_mode == "zero":
        x_in = x * mask[..., None].astype(x.dtype)
        out = block(x_in, kappa=kappa, scale_mode=tpc.attn_scale_mode)
    else:
        key_mask = None if mask.all() else mask
        out = block(x, key_mask=key_mask, kappa=kappa, scale_mode=tpc.attn_scale_mode)
        if key_mask is not None:
            out = T.where(mask[..., None], out, x)
    pause, non_restart = gate_probs(out, gamma, beta, tpc.gate_dims)
    return TpcBlockOutput(out, pause, non_restart)


class VisionTransformer(Module):
    """DeiT-style backbone: patch embedding, pre-norm blocks, final norm, linear head."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(seed)
        c = config
        self.embed = PatchEmbed(c.image_size, c.patch_size, c.in_chans, c.embed_dim, rng, self.dtype)
        self.blocks = [
            Block(c.embed_dim, c.heads, c.mlp_hidden, rng, c.qkv_bias, c.ln_eps, self.dtype) for _ in range(c.depth)
        ]
        self.norm = LayerNorm(c.embed_dim, c.ln_eps, self.dtype)
        self.head = Linear(c.embed_dim, c.num_classes, rng, dtype=self.dtype)

    def _images(self, images) -> Tensor:
        images = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        c = self.config
        if images.ndim != 4 or images.shape[1] != c.in_chans:
            raise DimensionError(f"expected B x {c.in_chans} x H x W images, got {images.shape}")
        if images.shape[2] != c.image_size or images.shape[3] != c.image_size:
            raise DimensionError(f"expected {c.image_size}x{c.image_size} images, got {images.shape[2:]}")
        return images

    def patch_embed(self, images) -> Tensor:
        return self.embed(self._images(images))

    def classify(self, cls_state: Tensor) -> Tensor:
        return self.head(self.norm(cls_state))

    def vanilla_forward(self, images, scale_mode: str = "sqrt_d", kappa=None) -> Tensor:
        x = self.patch_embed(images)
        for block in self.blocks:
            x = vanilla_block(block, x, scale_mode, kappa=kappa)
        return self.classify(x[:, 0])

    def vanilla_infer(self, images, scale_mode: str = "sqrt_d", kappa=None) -> np.ndarray:
        """Per-image forward of every token through every layer, without a tape.

        This is the dense baseline for throughput; ``kappa`` applies the same
        key selection as the controlled model so the two differ only in halting.
        """
        images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=self.dtype)
        out = []
        with T.no_grad():
            for img in images:
                out.append(self.vanilla_forward(img[None], scale_mode, kappa).data[0])
        return np.stack(out) if out else np.zeros((0, self.config.num_classes))


@dataclass
class TpcOutput:
    logits: Tensor
    aggregated: Tensor
    state: C.TokenHaltState
    records: list
    attend_counts: list = field(default_factory=list)

    @property
    def weights(self) -> Tensor:
        """Aggregation weights stacked as ``L x B x N``."""
        return T.stack([r.weight for r in self.records])

    def patch_halting_layers(self) -> np.ndarray:
        return self.state.halting_layer[:, 1:]

    def mean_depth(self) -> float:
        depths = self.patch_halting_layers()
        return float(depths.mean()) if depths.size else 0.0

    def mean_active_per_layer(self) -> list:
        return [float(c) for c in self.attend_counts]


class TpcViT(VisionTransformer):
    """Vision transformer whose tokens halt adaptively under the propagation controller."""

    def __init__(self, config: ModelConfig, tpc: TpcConfig | None = None, seed: int = 0, dtype=np.float64):
        super().__init__(config, seed, dtype)
        self.tpc = tpc or TpcConfig()
        validate_model(config, self.tpc)
        self.gamma = Tensor(np.array(self.tpc.gamma, dtype=self.dtype), requires_grad=self.tpc.learnable_gates)
        self.beta = Tensor(np.array(self.tpc.beta, dtype=self.dtype), requires_grad=self.tpc.learnable_gates)

    def forward(self, images, trace=None, step: int = 0) -> TpcOutput:
        """Token propagation control over the whole batch, recording every layer."""
        tpc = self.tpc
        x = self.patch_embed(images)
        batch, n_tok, _ = x.shape
        depth = self.config.depth
        mode = C.SUM if tpc.halt_mode == C.PAUSE_RESTART else tpc.halt_mode
        state = C.TokenHaltState.initial((batch, n_tok), mode, self.dtype)
        participating = np.ones((batch, n_tok), dtype=bool)
        records, cls_states, cls_weights, counts = [], [], [], []
        if depth == 0:
            agg = x[:, 0]
            return TpcOutput(self.classify(agg), agg, state, records, counts)
        for layer, block in enumerate(self.blocks, start=1):
            attend = state.mask.copy()
            if tpc.halt_mode == C.PAUSE_RESTART:
                attend &= participating
            attend[:, 0] = True
            counts.append(attend.sum(axis=1).mean())
            out = tpc_block(block, x, attend, tpc, self.gamma, self.beta)
            x = out.tokens
            if not (np.all(np.isfinite(out.pause.data)) and np.all(np.isfinite(out.non_restart.data))):
                raise NumericalError(f"non-finite gate output at layer {layer}", records)
            state, record = C.controller_layer(
                state, out.pause, out.restart, layer, depth, tpc.delta, tpc.zeta, tpc.regularize_scope
            )
            record.participating = attend
            records.append(record)
            cls_states.append(x[:, 0])
            cls_weights.append(record.weight[:, 0])
            if tpc.halt_mode == C.PAUSE_RESTART:
                participating = (record.pause < 0.5) | (record.restart >= 0.5)
            if trace is not None:
                trace.add_record(step, record, tpc.delta)
        agg = C.aggregate_cls(cls_states, cls_weights)
        return TpcOutput(self.classify(agg), agg, state, records, counts)

    def infer(self, images, forced_depths=None) -> tuple:
        """Per-image forward that physically removes inactive tokens; returns ``(logits, counts)``.

        ``forced_depths`` (one layer index per patch token) overrides which
        tokens take part in each layer. ``counts[l]`` is the mean number of
        tokens processed at layer ``l + 1``.
        """
        images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=self.dtype)
        depth = self.config.depth
        n_tok = self.config.num_tokens
        if forced_depths is not None:
            forced_depths = np.asarray(forced_depths)
            if forced_depths.shape != (n_tok - 1,):
                raise DimensionError(f"forced_depths needs {n_tok - 1} entries, got {forced_depths.shape}")
        if self.tpc.mask_mode == "zero" or self.tpc.halt_mode == C.PAUSE_RESTART:
            with T.no_grad():
                out = self.forward(images)
            return out.logits.data, out.mean_active_per_layer()
        logits, counts = [], np.zeros(depth)
        with T.no_grad():
            for img in images:
                row, used = self._infer_one(img, forced_depths)
                logits.append(row)
                counts += used
        counts = counts / max(len(images), 1)
        return (np.stack(logits) if logits else np.zeros((0, self.config.num_classes))), list(counts)

    def _infer_one(self, image: np.ndarray, forced_depths):
        tpc = self.tpc
        depth = self.config.depth
        x = self.patch_embed(image[None]).data[0].copy()
        n_tok = x.shape[0]
        state = C.TokenHaltState.initial((1, n_tok), tpc.halt_mode, self.dtype)
        used = np.zeros(depth)
        agg = None if depth else x[0]
        kappa = tpc.kappa if tpc.stabilizer else None
        for layer, block in enumerate(self.blocks, start=1):
            if forced_depths is None:
                attend = state.mask[0].copy()
            else:
                attend = np.concatenate([[True], forced_depths >= layer])
            attend[0] = True
            idx = np.flatnonzero(attend)
            used[layer - 1] = idx.size
            sub = Tensor(x[idx][None])
            y = block(sub, kappa=kappa, scale_mode=tpc.attn_scale_mode).data[0]
            x[idx] = y
            pause = np.ones(n_tok, dtype=self.dtype)
            restart = np.zeros(n_tok, dtype=self.dtype)
            if layer < depth:
                p, nr = gate_probs(Tensor(y), self.gamma, self.beta, tpc.gate_dims)
                pause[idx] = p.data
                restart[idx] = 1.0 - nr.data
            state, record = C.controller_layer(
                state, pause[None], restart[None], layer, depth, tpc.delta, tpc.zeta, tpc.regularize_scope
            )
            w = record.weight.data[0, 0]
            agg = x[0] * w if agg is None else agg + x[0] * w
        return self.classify(Tensor(agg[None])).data[0], used


def build_model(config: ModelConfig, tpc: TpcConfig | None = None, seed: int = 0, dtype=np.float64) -> TpcViT:
    return TpcViT(config, tpc, seed, dtype)
