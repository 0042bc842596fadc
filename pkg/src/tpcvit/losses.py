"""Training objectives: ponder cost, task cross-entropy, depth-distribution KL and their sum."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor

DEFAULT_PHI_P = 5e-4
DEFAULT_PHI_D = 0.1
KL_FLOOR = 1e-12


@dataclass
class LossBreakdown:
    task: Tensor
    ponder: Tensor
    distribution: Tensor
    final: Tensor
    phi_p: float
    phi_d: float

    def as_floats(self) -> dict:
        return {
            "task": self.task.item(),
            "ponder": self.ponder.item(),
            "distribution": self.distribution.item(),
            "final": self.final.item(),
        }


@dataclass
class LayerBreakDistribution:
    raw: np.ndarray
    normalized: np.ndarray


def ponder_loss(halting_layers, remainders) -> Tensor:
    """Mean of ``halting_layer + remainder`` over tokens.

    Halting layers are integers and carry no gradient; remainders may be tensors.
    """
    layers = np.asarray(halting_layers, dtype=np.float64)
    rem = T.as_tensor(remainders)
    if layers.size == 0:
        raise ContractError("ponder loss needs at least one token")
    if layers.shape != rem.shape:
        raise ContractError(f"halting layers {layers.shape} vs remainders {rem.shape}")
    if np.any(rem.data < -1e-12) or np.any(rem.data > 1 + 1e-12):
        raise ContractError("remainders must lie in [0, 1]")
    return T.mean(rem + layers.astype(rem.dtype))


def task_loss(aggregated_cls: Tensor, labels, head) -> Tensor:
    """Cross-entropy of ``head(aggregated_cls)`` against integer labels."""
    logits = head(aggregated_cls)
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    return T.cross_entropy(logits, labels)


def gaussian_target(target_depth: float, num_layers: int) -> np.ndarray:
    """N(target_depth, 1) density at layers 1..L, normalised to sum to one."""
    if num_layers < 1:
        raise ContractError("need at least one layer")
    layers = np.arange(1, num_layers + 1, dtype=np.float64)
    density = np.exp(-0.5 * (layers - target_depth) ** 2) / math.sqrt(2 * math.pi)
    return density / density.sum()


def layer_distribution(weights) -> LayerBreakDistribution:
    """Per-layer mean over tokens of ``L x ...`` break weights, plus its normalised form."""
    w = weights.data if isinstance(weights, Tensor) else np.asarray(weights)
    raw = w.reshape(w.shape[0], -1).mean(axis=1)
    return LayerBreakDistribution(raw, raw / raw.sum())


def kl_divergence(d, target) -> Tensor:
    """KL(d || target) for a normalised tensor ``d``; the target is floored at ``KL_FLOOR``."""
    d = T.as_tensor(d)
    target = np.maximum(np.asarray(target, dtype=d.dtype), KL_FLOOR)
    # 0 * log 0 = 0: the floor only guards the log
    safe = T.where(d.data > 0, d, 1.0)
    return T.tsum(d * (T.log(safe) - np.log(target)))


def distribution_loss(weights, target_depth: float, num_layers: int | None = None) -> Tensor:
    """KL from the normalised per-layer mean break distribution to the Gaussian depth prior.

    ``weights`` is ``L x tokens...``; the mean runs over every token axis.
    """
    w = T.as_tensor(weights)
    num_layers = w.shape[0] if num_layers is None else num_layers
    if w.shape[0] != num_layers:
        raise ContractError(f"weights cover {w.shape[0]} layers, expected {num_layers}")
    per_layer = T.mean(w.reshape(num_layers, -1), axis=1)
    normalized = per_layer / T.tsum(per_layer)
    return kl_divergence(normalized, gaussian_target(target_depth, num_layers))


def final_loss(task, ponder, distribution, phi_p: float = DEFAULT_PHI_P, phi_d: float = DEFAULT_PHI_D) -> LossBreakdown:
    task, ponder, distribution = (T.as_tensor(x) for x in (task, ponder, distribution))
    total = task + ponder * phi_p + distribution * phi_d
    return LossBreakdown(task, ponder, distribution, total, phi_p, phi_d)


def tpc_losses(output, labels, tpc, model_depth: int) -> LossBreakdown:
    """Combine the three objectives for a :class:`~tpcvit.model.TpcOutput`.

    Ponder and distribution terms cover patch tokens; the CLS token only enters
    through the aggregated prediction.
    """
    task = T.cross_entropy(output.logits, labels)
    if model_depth == 0:
        zero = Tensor(np.zeros((), dtype=task.dtype))
        return final_loss(task, zero, zero, tpc.phi_p, tpc.phi_d)
    ponder = ponder_loss(output.state.halting_layer[:, 1:], output.state.remainder[:, 1:])
    weights = output.weights[:, :, 1:]
    if tpc.target_depth_mode == "dynamic":
        target = float(output.state.halting_layer[:, 1:].mean())
    else:
        target = tpc.resolved_target_depth(model_depth)
    dist = distribution_loss(weights, target, model_depth)
    return final_loss(task, ponder, dist, tpc.phi_p, tpc.phi_d)
