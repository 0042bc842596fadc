"""Layers of a pre-norm vision transformer built on the tensor core."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .stabilizer import dense_attention, topk_mask
from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float64) -> np.ndarray:
    """Normal(0, std) redrawn outside two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


class Module:
    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.astype(p.dtype).copy()


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng, bias: bool = True, dtype=np.float64):
        self.weight = Tensor(trunc_normal(rng, (fan_in, fan_out), dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6, dtype=np.float64):
        self.weight = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.weight, self.bias, self.eps)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng, dtype=np.float64):
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Attention(Module):
    """Multi-head self-attention with optional key masking and top-k key selection.

    Selection runs per head on that head's query/key vectors.
    """

    def __init__(self, dim: int, heads: int, rng, qkv_bias: bool = True, dtype=np.float64):
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng, bias=qkv_bias, dtype=dtype)
        self.proj = Linear(dim, dim, rng, dtype=dtype)
        self.last_weights = None

    def __call__(self, x: Tensor, key_mask=None, kappa=None, scale_mode="sqrt_d", keep_weights=False) -> Tensor:
        batch, n, dim = x.shape
        hd = dim // self.heads
        qkv = self.qkv(x).reshape(batch, n, 3, self.heads, hd).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        mask = None
        if key_mask is not None:
            key_mask = np.asarray(key_mask, dtype=bool)
            mask = key_mask[:, None, None, :]
        if kappa is not None and kappa < n:
            mask = topk_mask(q.data, k.data, kappa, None if key_mask is None else key_mask[:, None, :])
        out, weights = dense_attention(q, k, v, scale_mode, mask, return_weights=True)
        if keep_weights:
            self.last_weights = weights.data
        out = out.transpose(0, 2, 1, 3).reshape(batch, n, dim)
        return self.proj(out)


class Block(Module):
    """x + attn(norm(x)), then + mlp(norm(.))."""

    def __init__(self, dim: int, heads: int, mlp_hidden: int, rng, qkv_bias=True, eps=1e-6, dtype=np.float64):
        self.norm1 = LayerNorm(dim, eps, dtype)
        self.attn = Attention(dim, heads, rng, qkv_bias, dtype)
        self.norm2 = LayerNorm(dim, eps, dtype)
        self.mlp = Mlp(dim, mlp_hidden, rng, dtype)

    def __call__(self, x: Tensor, key_mask=None, kappa=None, scale_mode="sqrt_d", keep_weights=False) -> Tensor:
        x = x + self.attn(self.norm1(x), key_mask, kappa, scale_mode, keep_weights)
        return x + self.mlp(self.norm2(x))


class PatchEmbed(Module):
    """Non-overlapping patches, linear projection, CLS prepend and learned positions."""

    def __init__(self, image_size: int, patch_size: int, in_chans: int, dim: int, rng, dtype=np.float64):
        self.patch_size = patch_size
        self.grid = image_size // patch_size
        self.proj = Linear(in_chans * patch_size * patch_size, dim, rng, dtype=dtype)
        self.cls_token = Tensor(trunc_normal(rng, (1, 1, dim), dtype=dtype), requires_grad=True)
        self.pos_embed = Tensor(trunc_normal(rng, (1, self.grid * self.grid + 1, dim), dtype=dtype), requires_grad=True)

    def patchify(self, images: Tensor) -> Tensor:
        b, c, h, w = images.shape
        p = self.patch_size
        x = images.reshape(b, c, h // p, p, w // p, p).transpose(0, 2, 4, 1, 3, 5)
        return x.reshape(b, (h // p) * (w // p), c * p * p)

    def __call__(self, images: Tensor) -> Tensor:
        tokens = self.proj(self.patchify(images))
        cls = self.cls_token + np.zeros((tokens.shape[0], 1, tokens.shape[2]), dtype=tokens.dtype)
        return T.concat([cls, tokens], axis=1) + self.pos_embed
