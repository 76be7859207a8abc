"""Patch tokens, 2-D rotary positions, and timestep / prompt / condition embeddings."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Linear, Module, param
from .tensor import Tensor

NOISY = "noisy"
CONDITION = "condition"


@dataclass
class TokenBatch:
    """Token features ``[N, d]`` (or ``[B, N, d]``) with their raster grid positions."""

    tokens: Tensor
    grid: np.ndarray  # [N, 2] (row, col)
    kind: str = NOISY

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[-2]


@dataclass
class PromptContext:
    F_p: Tensor  # [B, L, d]
    E_p: Tensor  # [B, d]
    mask: np.ndarray  # [B, L] valid positions


@dataclass
class ConditionContext:
    type_id: np.ndarray  # [B]
    E_c: Tensor  # [B, d]


def raster_grid(gh: int, gw: int) -> np.ndarray:
    rows, cols = np.divmod(np.arange(gh * gw), gw)
    return np.stack([rows, cols], axis=1)


def patch_pixels(images: np.ndarray, p: int) -> np.ndarray:
    """``[B, H, W, ch]`` -> ``[B, N, p*p*ch]``, patches in raster order."""
    B, H, W, ch = images.shape
    if H % p or W % p:
        raise ValueError(f"image {H}x{W} is not divisible by patch size {p}")
    x = images.reshape(B, H // p, p, W // p, p, ch).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x).reshape(B, (H // p) * (W // p), p * p * ch)


def unpatch_pixels(patches: np.ndarray, H: int, W: int, p: int) -> np.ndarray:
    B, N, k = patches.shape
    ch = k // (p * p)
    x = patches.reshape(B, H // p, W // p, p, p, ch).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, H, W, ch)


class PatchEmbed:
    """Fixed linear patch projection standing in for the frozen autoencoder.

    Not trainable and bias-free, so the map from pixels to tokens is linear.
    """

    def __init__(self, p: int, channels: int, d: int, seed: int):
        k = p * p * channels
        self.p = p
        self.proj = np.random.default_rng([seed, 0x9A7C]).normal(0.0, k ** -0.5, size=(k, d))

    def __call__(self, images: np.ndarray) -> Tensor:
        return Tensor(patch_pixels(images, self.p) @ self.proj)


def patchify(image: np.ndarray, embed: PatchEmbed, kind: str = NOISY) -> TokenBatch:
    """Tokenize one ``[H, W, ch]`` image."""
    H, W = image.shape[:2]
    p = embed.p
    if H % p or W % p:
        raise ValueError(f"image {H}x{W} is not divisible by patch size {p}")
    tokens = embed(image[None])
    return TokenBatch(T.reshape(tokens, tokens.shape[1:]), raster_grid(H // p, W // p), kind)


def rope_tables(grid: np.ndarray, d: int, base: float = 10000.0):
    """cos/sin tables ``[N, d/2]`` for 2-D axial rotary encoding.

    The first ``d/2`` features rotate with the row index and the rest with
    the column index; pair j within a half turns at ``base ** (-2j / (d/2))``.
    """
    if d % 4:
        raise ValueError(f"rotary encoding needs d_model divisible by 4, got {d}")
    half = d // 2
    theta = base ** (-2.0 * np.arange(half // 2) / half)
    ang = np.concatenate([grid[:, :1] * theta[None, :], grid[:, 1:2] * theta[None, :]], axis=1)
    return np.cos(ang), np.sin(ang)


def rope_apply(batch: TokenBatch, base: float = 10000.0) -> TokenBatch:
    cos, sin = rope_tables(batch.grid, batch.tokens.shape[-1], base)
    return TokenBatch(T.rope(batch.tokens, cos, sin), batch.grid, batch.kind)


class TimestepEmbedder(Module):
    """``MLP(sinusoid(1000 t)) + Linear(pooled)``."""

    def __init__(self, rng, d: int, freq_dim: int | None = None):
        self.freq_dim = freq_dim or d
        self.fc1 = Linear(rng, self.freq_dim, d)
        self.fc2 = Linear(rng, d, d)
        self.pooled = Linear(rng, d, d)

    def __call__(self, t, pooled: Tensor) -> Tensor:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise ValueError(f"timestep must lie in [0, 1], got {t}")
        freq = T.sinusoidal(t * 1000.0, self.freq_dim)
        h = self.fc2(T.silu(self.fc1(freq)))
        if pooled.ndim == 1:
            pooled = T.reshape(pooled, (1, pooled.shape[0]))
        return T.add(h, self.pooled(pooled))


def pad_prompts(prompts: list) -> tuple:
    """Right-pad token id lists; returns ``(ids [B, L], mask [B, L])``."""
    if any(len(p) == 0 for p in prompts):
        raise ValueError("empty prompt")
    L = max(len(p) for p in prompts)
    ids = np.zeros((len(prompts), L), dtype=np.int64)
    mask = np.zeros((len(prompts), L), dtype=bool)
    for i, p in enumerate(prompts):
        ids[i, : len(p)] = p
        mask[i, : len(p)] = True
    return ids, mask


class PromptEncoder(Module):
    """Trainable token table plus a context projection."""

    def __init__(self, rng, vocab: int, d: int):
        self.vocab = vocab
        self.table = param(rng.normal(0.0, 1.0, size=(vocab, d)))
        self.proj = Linear(rng, d, d)

    def __call__(self, prompts: list) -> PromptContext:
        ids, mask = pad_prompts(prompts)
        if ids.min() < 0 or ids.max() >= self.vocab:
            raise ValueError(f"prompt id outside vocabulary [0, {self.vocab})")
        B, L = ids.shape
        rows = T.reshape(T.gather_rows(self.table, ids.reshape(-1)), (B, L, -1))
        weights = mask / mask.sum(axis=1, keepdims=True)
        pooled = T.bmm(Tensor(weights[:, None, :]), rows)
        E_p = T.reshape(pooled, (B, rows.shape[-1]))
        return PromptContext(self.proj(rows), E_p, mask)


def embed_prompt(encoder: PromptEncoder, token_ids: list) -> PromptContext:
    return encoder([list(token_ids)])


class ConditionEncoder(Module):
    """One trainable row per condition-type name token; ``E_c`` mean-pools a type's tokens."""

    def __init__(self, rng, n_types: int, d: int):
        self.n_types = n_types
        self.table = param(rng.normal(0.0, 1.0, size=(n_types, d)))

    def type_tokens(self, type_id: int) -> list:
        return [type_id]

    def __call__(self, type_ids) -> ConditionContext:
        type_ids = np.atleast_1d(np.asarray(type_ids, dtype=np.int64))
        if type_ids.min() < 0 or type_ids.max() >= self.n_types:
            raise ValueError(f"condition type outside [0, {self.n_types})")
        toks = [self.type_tokens(int(t)) for t in type_ids]
        if all(len(t) == 1 for t in toks):
            E_c = T.gather_rows(self.table, [t[0] for t in toks])
        else:
            E_c = T.concat([T.reshape(T.mean(T.gather_rows(self.table, t), 0), (1, -1)) for t in toks], 0)
        return ConditionContext(type_ids, E_c)


def embed_condition(encoder: ConditionEncoder, type_id: int) -> ConditionContext:
    return encoder([type_id])
