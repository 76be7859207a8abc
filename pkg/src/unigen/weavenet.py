"""Base DiT stack, the interleaved weave control branch, and a parallel
ControlNet-style baseline.

Both models map ``(noisy image, sigma, condition image, type, prompt)`` to a
velocity in patch layout ``[B, N, p*p*ch]``.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .comoe import CoMoE, comoe_forward
from .config import RunConfig
from .embeddings import (
    ConditionEncoder,
    PatchEmbed,
    PromptEncoder,
    TimestepEmbedder,
    raster_grid,
    rope_tables,
    unpatch_pixels,
)
from .nn import AdaMod, Attention, Linear, Module, ZeroLinear, modulate
from .tensor import ShapeError, Tensor


class DiTBlock(Module):
    """Adaptive-norm block: joint attention over [image, prompt] then an MLP,
    each gated by a zero-initialized gate."""

    def __init__(self, rng, d: int, heads: int, mlp_ratio: int):
        self.ada = AdaMod(rng, d, 2, 2)
        self.attn = Attention(rng, d, heads)
        self.fc1 = Linear(rng, d, d * mlp_ratio)
        self.fc2 = Linear(rng, d * mlp_ratio, d)


def dit_block_forward(block: DiTBlock, x: Tensor, F_p: Tensor, prompt_mask: np.ndarray,
                      c: Tensor, rope_tab) -> Tensor:
    """``x`` is ``[B, N, d]`` image tokens, ``F_p`` ``[B, L, d]`` prompt tokens,
    ``c`` the ``[B, d]`` conditioning vector. Only image tokens are rotated."""
    if x.ndim != 3 or F_p.ndim != 3 or x.shape[0] != F_p.shape[0] or x.shape[2] != F_p.shape[2]:
        raise ShapeError(f"dit block: tokens {x.shape} vs prompt {F_p.shape}")
    shift1, scale1, shift2, scale2, gate1, gate2 = block.ada(c)
    h = modulate(x, shift1, scale1)
    kv = T.concat([h, T.layer_norm(F_p)], axis=1)
    B, N = x.shape[:2]
    key_mask = np.concatenate([np.ones((B, N), dtype=bool), prompt_mask], axis=1)
    a = block.attn(h, kv, key_mask, rope_q=rope_tab, rope_k=rope_tab)
    x = T.add(x, T.mul_vec(a, gate1))
    h = modulate(x, shift2, scale2)
    m = block.fc2(T.gelu(block.fc1(h)))
    return T.add(x, T.mul_vec(m, gate2))


class OutputHead(Module):
    def __init__(self, rng, d: int, k: int):
        self.ada = AdaMod(rng, d, 1, 0)
        self.out = Linear(rng, d, k)

    def __call__(self, x: Tensor, c: Tensor) -> Tensor:
        shift, scale = self.ada(c)
        return self.out(modulate(x, shift, scale))


class _Stack(Module):
    def __init__(self, cfg: RunConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d_model
        self.patch_embed = PatchEmbed(cfg.patch, cfg.channels, d, cfg.seed)
        self.temb = TimestepEmbedder(rng, d)
        self.prompt_enc = PromptEncoder(rng, cfg.vocab, d)
        self.base = [DiTBlock(rng, d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.base_layers)]
        self._rng = rng
        g = cfg.image_size // cfg.patch
        self.grid = raster_grid(g, g)
        self.rope_tab = rope_tables(self.grid, d, cfg.rope_base)

    def _finish(self):
        cfg = self.cfg
        self.head = OutputHead(self._rng, cfg.d_model, cfg.patch * cfg.patch * cfg.channels)
        del self._rng

    def encode(self, noisy: np.ndarray, cond: np.ndarray, prompts: list):
        F_n = self.patch_embed(noisy)
        F_c = self.patch_embed(cond)
        return F_n, F_c, self.prompt_enc(prompts)

    def base_only(self, noisy, sigma, cond, type_ids, prompts) -> Tensor:
        """Base blocks and head with no control branch."""
        F_n, _, prompt = self.encode(noisy, cond, prompts)
        c_p = self.temb(sigma, prompt.E_p)
        for blk in self.base:
            F_n = dit_block_forward(blk, F_n, prompt.F_p, prompt.mask, c_p, self.rope_tab)
        return self.head(F_n, c_p)

    def to_image(self, patches: np.ndarray) -> np.ndarray:
        s, p = self.cfg.image_size, self.cfg.patch
        return unpatch_pixels(patches, s, s, p)


class UniGen(_Stack):
    """Base stack plus weave blocks copied from it, CoMoE at the first weave
    layer, and zero-initialized residual projections."""

    def __init__(self, cfg: RunConfig):
        super().__init__(cfg)
        d = cfg.d_model
        self.cond_enc = ConditionEncoder(self._rng, cfg.n_types, d)
        self.weave = [blk.clone() for blk in self.base[: cfg.ctrl_layers]]
        self.zero_proj = [ZeroLinear(d, d) for _ in range(cfg.ctrl_layers)]
        self.comoe = CoMoE(self._rng, d, cfg.experts, cfg.heads)
        self._finish()
        self.last_assignment = None

    def __call__(self, noisy, sigma, cond, type_ids, prompts) -> Tensor:
        return weavenet_forward(self, noisy, sigma, cond, type_ids, prompts)


def weavenet_forward(m: UniGen, noisy, sigma, cond, type_ids, prompts) -> Tensor:
    """Interleaved control: at each attached layer the weave block reads the
    base stack's current features and is injected back through a zero
    projection. CoMoE runs once, at the first weave layer."""
    F_n, F_c, prompt = m.encode(noisy, cond, prompts)
    ctx = m.cond_enc(type_ids)
    c_p = m.temb(sigma, prompt.E_p)
    c_c = m.temb(sigma, ctx.E_c)
    gain = m.cfg.cond_scale
    for i, blk in enumerate(m.base):
        F_n = dit_block_forward(blk, F_n, prompt.F_p, prompt.mask, c_p, m.rope_tab)
        if i >= len(m.weave):
            continue
        if i == 0:
            Fh_n, Fh_c, m.last_assignment = comoe_forward(
                m.comoe, m.temb, F_n, F_c, prompt, ctx, sigma, m.rope_tab)
            h = dit_block_forward(m.weave[0], T.add(Fh_n, Fh_c), prompt.F_p, prompt.mask, c_c, m.rope_tab)
        else:
            h = dit_block_forward(m.weave[i], F_n, prompt.F_p, prompt.mask, c_c, m.rope_tab)
        inj = m.zero_proj[i](h)
        F_n = T.add(F_n, inj if gain == 1.0 else T.scale(inj, gain))
    return m.head(F_n, c_p)


class ControlBranch(Module):
    def __init__(self, blocks: list, d: int):
        self.blocks = blocks
        self.zero_proj = [ZeroLinear(d, d) for _ in blocks]


class ControlNetBaseline(_Stack):
    """One parallel control branch per condition type. A branch sees only the
    stack input plus the condition tokens and never re-reads base features."""

    def __init__(self, cfg: RunConfig):
        super().__init__(cfg)
        self.branches = [
            ControlBranch([blk.clone() for blk in self.base[: cfg.ctrl_layers]], cfg.d_model)
            for _ in range(cfg.n_types)
        ]
        self._finish()

    def __call__(self, noisy, sigma, cond, type_ids, prompts) -> Tensor:
        return controlnet_forward(self, noisy, sigma, cond, type_ids, prompts)


def controlnet_forward(m: ControlNetBaseline, noisy, sigma, cond, type_ids, prompts) -> Tensor:
    type_ids = np.atleast_1d(np.asarray(type_ids, dtype=np.int64))
    if type_ids.min() < 0 or type_ids.max() >= len(m.branches):
        raise ValueError(f"condition type outside [0, {len(m.branches)})")
    F_n, F_c, prompt = m.encode(noisy, cond, prompts)
    c_p = m.temb(sigma, prompt.E_p)
    B = F_n.shape[0]
    # the control signal is computed per sample because branches differ by type
    injections = []
    for b in range(B):
        br = m.branches[int(type_ids[b])]
        fp = T.slice_axis(prompt.F_p, b, b + 1, axis=0)
        cb = T.slice_axis(c_p, b, b + 1, axis=0)
        h = T.add(T.slice_axis(F_n, b, b + 1, axis=0), T.slice_axis(F_c, b, b + 1, axis=0))
        per_layer = []
        for blk, proj in zip(br.blocks, br.zero_proj):
            h = dit_block_forward(blk, h, fp, prompt.mask[b:b + 1], cb, m.rope_tab)
            per_layer.append(proj(h))
        injections.append(per_layer)
    gain = m.cfg.cond_scale
    for i, blk in enumerate(m.base):
        F_n = dit_block_forward(blk, F_n, prompt.F_p, prompt.mask, c_p, m.rope_tab)
        if i < len(m.branches[0].blocks):
            inj = T.concat([inj_b[i] for inj_b in injections], axis=0)
            F_n = T.add(F_n, inj if gain == 1.0 else T.scale(inj, gain))
    return m.head(F_n, c_p)


def build_model(cfg: RunConfig):
    return UniGen(cfg) if cfg.arch == "unigen" else ControlNetBaseline(cfg)


def count_params(model) -> int:
    return model.num_params()


def closed_form_params(cfg: RunConfig) -> int:
    """Trainable parameter count from the configuration alone."""
    d, r, E = cfg.d_model, cfg.mlp_ratio, cfg.experts
    k = cfg.patch * cfg.patch * cfg.channels
    block = (d * 6 * d + 6 * d) + (4 * d * d + d) + (d * r * d + r * d) + (r * d * d + d)
    temb = (d * d + d) + (d * d + d) + (d * d + d)
    prompt = cfg.vocab * d + d * d + d
    head = (d * 2 * d + 2 * d) + (d * k + k)
    proj = d * d + d
    common = temb + prompt + cfg.base_layers * block + head
    if cfg.arch == "controlnet":
        return common + cfg.n_types * cfg.ctrl_layers * (block + proj)
    attn = 4 * d * d + d
    cross = (d * 5 * d + 5 * d) + attn
    self_ = (d * 3 * d + 3 * d) + attn
    comoe = (d * E + E) + E * (2 * d * d + 2 * d) + 3 * cross + 2 * self_
    return common + cfg.n_types * d + cfg.ctrl_layers * (block + proj) + comoe
