"""Parameter containers and the attention / adaptive-norm building blocks."""
from __future__ import annotations

import copy

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Attribute-based parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad``; children are
    ``Module`` attributes or lists of modules. Names are dotted paths in
    attribute definition order, so they are stable across runs.
    """

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> dict:
        return dict(self.named_parameters())

    def num_params(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())

    def clone(self):
        return copy.deepcopy(self)


def param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


def normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    return param(rng.normal(0.0, std, size=shape))


def zeros(shape) -> Tensor:
    return param(np.zeros(shape))


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True, std: float | None = None):
        self.weight = normal(rng, (d_in, d_out), d_in ** -0.5 if std is None else std)
        self.bias = zeros(d_out) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y if self.bias is None else T.add_vec(y, self.bias)


class ZeroLinear(Linear):
    """Linear map whose weight and bias start at exactly zero."""

    def __init__(self, d_in: int, d_out: int):
        self.weight = zeros((d_in, d_out))
        self.bias = zeros(d_out)


class AdaMod(Module):
    """Projects a conditioning vector to ``n_shift_scale`` (shift, scale) pairs
    followed by ``n_gates`` gates. Gate columns start at zero."""

    def __init__(self, rng, d: int, n_shift_scale: int, n_gates: int):
        self.d = d
        self.n_ss = n_shift_scale
        self.n_gates = n_gates
        w = np.zeros((d, d * (2 * n_shift_scale + n_gates)))
        w[:, : 2 * n_shift_scale * d] = rng.normal(0.0, 0.02, size=(d, 2 * n_shift_scale * d))
        self.weight = param(w)
        self.bias = zeros(d * (2 * n_shift_scale + n_gates))

    def __call__(self, c: Tensor) -> list:
        m = T.add_vec(T.matmul(T.silu(c), self.weight), self.bias)
        d = self.d
        return [T.slice_axis(m, i * d, (i + 1) * d, axis=-1) for i in range(2 * self.n_ss + self.n_gates)]


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    """``LN(x) * (1 + scale) + shift`` with per-sample vectors."""
    h = T.layer_norm(x)
    return T.add(T.add_vec(T.mul_vec(h, scale), shift), h)


class Attention(Module):
    """Scaled dot-product attention, queries from one sequence, keys/values
    from another. Optional RoPE tables apply to queries and to the first
    ``len(table)`` keys."""

    def __init__(self, rng, d: int, heads: int = 1):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.wq = Linear(rng, d, d, bias=False)
        self.wk = Linear(rng, d, d, bias=False)
        self.wv = Linear(rng, d, d, bias=False)
        self.wo = Linear(rng, d, d)

    def __call__(self, xq: Tensor, xkv: Tensor, key_mask=None, rope_q=None, rope_k=None) -> Tensor:
        q = self.wq(xq)
        k = self.wk(xkv)
        v = self.wv(xkv)
        if rope_q is not None:
            q = T.rope(q, *rope_q)
        if rope_k is not None:
            n_rot = rope_k[0].shape[0]
            if n_rot == k.shape[1]:
                k = T.rope(k, *rope_k)
            else:
                k = T.concat([T.rope(T.slice_axis(k, 0, n_rot, axis=1), *rope_k),
                              T.slice_axis(k, n_rot, k.shape[1], axis=1)], axis=1)
        h = self.heads
        qh, kh, vh = T.split_heads(q, h), T.split_heads(k, h), T.split_heads(v, h)
        logits = T.scale(T.bmm(qh, T.transpose(kh)), qh.shape[-1] ** -0.5)
        mask = None
        if key_mask is not None:
            mask = np.repeat(np.asarray(key_mask, dtype=bool), h, axis=0)[:, None, :]
        att = T.softmax(logits, mask)
        return self.wo(T.merge_heads(T.bmm(att, vh), h))
