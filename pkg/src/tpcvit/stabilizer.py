"""Dense attention and the top-k nearest-key sparse attention that stabilises training.

Each query keeps only the ``kappa`` keys closest to it in Euclidean distance;
the softmax runs over the selected logits and mixes the matching value rows.
Selection is a constant of the forward pass: gradients reach Q, K and V only
through the selected entries.

Two equivalent routes exist. :func:`sparse_attention` gathers the selected
key/value rows, so its arithmetic is proportional to ``n * kappa * d``.
:func:`topk_mask` marks the selection in an ``n x n`` boolean mask for
:func:`dense_attention`, which is what the batched model uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor


def attention_scale(head_dim: int, mode: str = "sqrt_d") -> float:
    if mode == "sqrt_d":
        return 1.0 / math.sqrt(head_dim)
    if mode == "d_literal":
        return 1.0 / head_dim
    raise ContractError(f"unknown attention scale mode {mode!r}")


def dense_attention(q: Tensor, k: Tensor, v: Tensor, scale_mode: str = "sqrt_d", mask=None, return_weights=False):
    """softmax(q k^T * scale) v over the last two axes.

    ``mask`` (broadcastable to the ``... x n x n`` logits) removes key columns
    from each query's softmax.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    logits = T.matmul(q, k.swapaxes(-1, -2)) * attention_scale(q.shape[-1], scale_mode)
    weights = T.softmax(logits, axis=-1, mask=mask)
    out = T.matmul(weights, v)
    return (out, weights) if return_weights else out


def squared_distances(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances over the last axis, ``... x n_q x n_k``."""
    qq = np.sum(q * q, axis=-1)[..., :, None]
    kk = np.sum(k * k, axis=-1)[..., None, :]
    d2 = qq + kk - 2.0 * np.matmul(q, np.swapaxes(k, -1, -2))
    return np.maximum(d2, 0.0)


@dataclass
class SparseAttnPlan:
    """Selected key rows per query; values use the same rows."""

    key_index: np.ndarray
    kappa_effective: int

    def __post_init__(self):
        self.key_index = np.asarray(self.key_index, dtype=np.int64)
        if self.key_index.ndim != 2 or self.key_index.shape[1] != self.kappa_effective:
            raise ContractError(f"plan index shape {self.key_index.shape} vs kappa {self.kappa_effective}")

    @property
    def value_index(self) -> np.ndarray:
        return self.key_index

    @property
    def num_queries(self) -> int:
        return self.key_index.shape[0]


def _order(dist: np.ndarray) -> np.ndarray:
    # stable sort keeps the lowest index first among equal distances
    return np.argsort(dist, axis=-1, kind="stable")


def select_topk(q_i, keys, kappa: int, active=None) -> np.ndarray:
    """Indices of the ``min(kappa, active)`` keys nearest to ``q_i``, nearest first."""
    if kappa < 1:
        raise ContractError("kappa must be >= 1")
    q_i = np.asarray(q_i.data if isinstance(q_i, Tensor) else q_i, dtype=np.float64)
    keys = np.asarray(keys.data if isinstance(keys, Tensor) else keys, dtype=np.float64)
    dist = squared_distances(q_i[None, :], keys)[0]
    candidates = np.arange(keys.shape[0]) if active is None else np.flatnonzero(active)
    k_eff = min(kappa, candidates.size)
    order = candidates[_order(dist[candidates])]
    return order[:k_eff]


def build_plan(q, k, kappa: int, active=None) -> SparseAttnPlan:
    """Top-k selection for every query row of ``q`` against the rows of ``k``."""
    if kappa < 1:
        raise ContractError("kappa must be >= 1")
    qd = q.data if isinstance(q, Tensor) else np.asarray(q)
    kd = k.data if isinstance(k, Tensor) else np.asarray(k)
    candidates = np.arange(kd.shape[0]) if active is None else np.flatnonzero(active)
    if candidates.size == 0:
        raise ContractError("no active keys to select from")
    k_eff = min(kappa, candidates.size)
    dist = squared_distances(qd, kd[candidates])
    order = _order(dist)[:, :k_eff]
    return SparseAttnPlan(candidates[order], k_eff)


def sparse_attention(q: Tensor, k: Tensor, v: Tensor, plan: SparseAttnPlan, scale_mode: str = "sqrt_d") -> Tensor:
    """Row i: softmax over the plan's selected logits, times the matching value rows."""
    n, d = q.shape
    if plan.num_queries != n:
        raise ContractError(f"plan has {plan.num_queries} query rows, q has {n}")
    if k.shape[0] != v.shape[0] or k.shape[1] != d:
        raise DimensionError(f"sparse_attention: q {q.shape}, k {k.shape}, v {v.shape}")
    if plan.key_index.size and plan.key_index.max() >= k.shape[0]:
        raise ContractError("plan indexes keys beyond the key matrix")
    k_sel = T.gather_rows(k, plan.key_index)
    v_sel = T.gather_rows(v, plan.value_index)
    logits = T.matmul(q.reshape(n, 1, d), k_sel.swapaxes(-1, -2)) * attention_scale(d, scale_mode)
    weights = T.softmax(logits, axis=-1)
    return T.matmul(weights, v_sel).reshape(n, v.shape[1])


def topk_mask(q: np.ndarray, k: np.ndarray, kappa: int, key_mask=None) -> np.ndarray:
    """Boolean ``... x n x n`` mask of each query's selected keys.

    ``key_mask`` (``... x n``, broadcast over queries) excludes keys before
    selection, so the effective count is ``min(kappa, active keys)`` per row.
    """
    dist = squared_distances(q, k)
    n = k.shape[-2]
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)[..., None, :]
        dist = np.where(key_mask, dist, np.inf)
    if kappa >= n:
        sel = np.ones(dist.shape, dtype=bool)
    else:
        # the kappa-th smallest distance splits the row; among keys tied at
        # that value the lowest indices win, matching a stable sort
        thr = np.partition(dist, kappa - 1, axis=-1)[..., kappa - 1 : kappa]
        sel = dist < thr
        need = kappa - sel.sum(axis=-1, keepdims=True)
        tied = dist == thr
        sel |= tied & (np.cumsum(tied, axis=-1) <= need)
    if key_mask is not None:
        sel &= key_mask
    return sel
