"""Condition-modulated experts.

Tokens are routed by ``argmax((F_n + F_c) W_r + b_r)`` to per-expert
transforms whose weights are modulated by the condition-type embedding,
then scattered back to their original order. A shared attention expert
runs alongside and its output is added on top.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .embeddings import ConditionContext, PromptContext, TimestepEmbedder
from .nn import AdaMod, Attention, Linear, Module, modulate, normal
from .tensor import ShapeError, Tensor


@dataclass
class ExpertAssignment:
    scores: np.ndarray  # [T, E]
    index: np.ndarray  # [T]
    groups: list = field(default_factory=list)  # per expert, member token positions in order

    @property
    def n_experts(self) -> int:
        return self.scores.shape[1]

    @property
    def n_tokens(self) -> int:
        return self.scores.shape[0]

    @property
    def perm(self) -> np.ndarray:
        return np.concatenate(self.groups) if self.groups else np.zeros(0, dtype=np.int64)

    def load(self) -> np.ndarray:
        """Tokens per expert."""
        return np.array([len(g) for g in self.groups])


def assign_from_scores(scores: np.ndarray) -> ExpertAssignment:
    """Argmax dispatch; ``np.argmax`` picks the lowest index among ties."""
    scores = np.asarray(scores, dtype=np.float64)
    index = np.argmax(scores, axis=1)
    groups = [np.flatnonzero(index == e) for e in range(scores.shape[1])]
    return ExpertAssignment(scores, index, groups)


def route_tokens(F_n: Tensor, F_c: Tensor, router: Linear) -> ExpertAssignment:
    """Score the fused features and dispatch each token to one expert.

    Token tensors may be ``[N, d]`` or ``[B, N, d]``; batched tokens are
    flattened sample-major. The argmax carries no gradient.
    """
    if F_n.shape != F_c.shape:
        raise ShapeError(f"route_tokens: F_n {F_n.shape} and F_c {F_c.shape} differ")
    fused = (F_n.data + F_c.data).reshape(-1, F_n.shape[-1])
    scores = fused @ router.weight.data
    if router.bias is not None:
        scores = scores + router.bias.data
    return assign_from_scores(scores)


def gather_groups(tokens: Tensor, a: ExpertAssignment) -> list:
    """Per-expert token blocks ``[n_e, d]`` of a flat ``[T, d]`` tensor."""
    if tokens.shape[0] != a.n_tokens:
        raise ShapeError(f"gather_groups: {tokens.shape[0]} tokens vs assignment of {a.n_tokens}")
    gathered = T.gather_rows(tokens, a.perm)
    blocks, start = [], 0
    for g in a.groups:
        blocks.append(T.slice_axis(gathered, start, start + len(g), axis=0))
        start += len(g)
    return blocks


def reverse_scatter(blocks: list, template: Tensor, a: ExpertAssignment) -> Tensor:
    """Put every processed token back at its original position on ``template``."""
    if len(blocks) != len(a.groups):
        raise ShapeError(f"reverse_scatter: {len(blocks)} blocks for {len(a.groups)} experts")
    for b, g in zip(blocks, a.groups):
        if b.shape[0] != len(g):
            raise ShapeError(f"reverse_scatter: block of {b.shape[0]} rows for group of {len(g)}")
    if template.shape[0] != a.n_tokens:
        raise ShapeError(f"reverse_scatter: template {template.shape} vs {a.n_tokens} tokens")
    stacked = T.concat(blocks, axis=0)
    return T.add(template, T.scatter_rows(stacked, a.perm, a.n_tokens))


class ModulatedExpert(Module):
    def __init__(self, rng, d: int):
        self.LW_c = normal(rng, (d, d), 0.1)
        self.LB_c = normal(rng, (d,), 0.1)
        self.LW_h = normal(rng, (d, d), 0.1)
        self.LB_h = normal(rng, (d,), 0.1)


def modulated_expert_forward(fn_block: Tensor, fc_block: Tensor, E_c: Tensor,
                             expert: ModulatedExpert, token_sample=None):
    """Condition-modulated transform of one expert's tokens.

    ``F_c' = (E_c LW_c) * F_c + LB_c`` scales channels by a vector derived
    from the condition embedding; ``F_n' = (F_c' LW_h) * F_n + LB_h`` gates
    each noisy token by its own condition token. Both blocks are already
    rotary-encoded at their original grid positions.

    ``E_c`` is ``[d]`` for a single condition, or ``[B, d]`` together with
    ``token_sample`` giving the batch row of every token.
    """
    d = expert.LW_c.shape[0]
    if fn_block.shape != fc_block.shape or fn_block.shape[-1] != d or E_c.shape[-1] != d:
        raise ShapeError(f"modulated expert: blocks {fn_block.shape}/{fc_block.shape}, "
                         f"E_c {E_c.shape}, width {d}")
    if E_c.ndim == 1:
        scale = T.reshape(T.matmul(T.reshape(E_c, (1, d)), expert.LW_c), (d,))
        fc = T.mul_vec(fc_block, scale)
    else:
        scale = T.gather_rows(T.matmul(E_c, expert.LW_c), token_sample)
        fc = T.mul(fc_block, scale)
    fc = T.add_vec(fc, expert.LB_c)
    gate = T.matmul(fc, expert.LW_h)
    fn = T.add_vec(T.mul(gate, fn_block), expert.LB_h)
    return fn, fc


class AdaAttention(Module):
    """Attention whose normalized inputs are shifted/scaled by a conditioning
    vector; the output is multiplied by a zero-initialized gate."""

    def __init__(self, rng, d: int, heads: int, self_attention: bool = False):
        self.self_attention = self_attention
        self.ada = AdaMod(rng, d, 1 if self_attention else 2, 1)
        self.attn = Attention(rng, d, heads)

    def __call__(self, xq: Tensor, xkv: Tensor, c: Tensor, key_mask=None) -> Tensor:
        mods = self.ada(c)
        hq = modulate(xq, mods[0], mods[1])
        hkv = hq if self.self_attention else modulate(xkv, mods[2], mods[3])
        return T.mul_vec(self.attn(hq, hkv, key_mask), mods[-1])


@dataclass
class SharedExpertState:
    S_n: Tensor
    S_c: Tensor
    S_n2: Tensor
    S_c2: Tensor


class SharedExpert(Module):
    def __init__(self, rng, d: int, heads: int):
        self.cross_nc = AdaAttention(rng, d, heads)
        self.cross_cn = AdaAttention(rng, d, heads)
        self.self_c = AdaAttention(rng, d, heads, self_attention=True)
        self.prompt = AdaAttention(rng, d, heads)
        self.joint = AdaAttention(rng, d, heads, self_attention=True)

    def __call__(self, rn: Tensor, rc: Tensor, prompt: PromptContext, T_n: Tensor, T_p: Tensor):
        """``rn``/``rc`` are rotary-encoded ``[B, N, d]`` noisy and condition tokens."""
        # condition-guided stage, modulated by (timestep, E_c)
        S_n = self.cross_nc(rn, rc, T_n)
        S_c = self.cross_cn(rc, rn, T_n)
        S_c = T.add(S_c, self.self_c(S_c, S_c, T_n))
        # prompt-guided stage over the token concatenation, modulated by (timestep, E_p)
        N = rn.shape[1]
        joint = T.concat([rn, rc], axis=1)
        S = self.prompt(joint, prompt.F_p, T_p, key_mask=prompt.mask)
        S = T.add(S, self.joint(S, S, T_p))
        S_n2 = T.add(T.slice_axis(S, 0, N, axis=1), S_n)
        S_c2 = T.add(T.slice_axis(S, N, 2 * N, axis=1), S_c)
        return SharedExpertState(S_n, S_c, S_n2, S_c2)


def shared_expert_forward(shared: SharedExpert, temb: TimestepEmbedder, rn: Tensor, rc: Tensor,
                          prompt: PromptContext, cond: ConditionContext, t):
    if prompt.F_p.shape[1] == 0:
        raise ValueError("shared expert: empty prompt")
    T_n = temb(t, cond.E_c)
    T_p = temb(t, prompt.E_p)
    st = shared(rn, rc, prompt, T_n, T_p)
    return st.S_n2, st.S_c2


class CoMoE(Module):
    def __init__(self, rng, d: int, n_experts: int, heads: int = 1):
        if n_experts < 1:
            raise ValueError("need at least one expert")
        self.router = Linear(rng, d, n_experts)
        self.experts = [ModulatedExpert(rng, d) for _ in range(n_experts)]
        self.shared = SharedExpert(rng, d, heads)

    @property
    def n_experts(self) -> int:
        return len(self.experts)


def comoe_forward(m: CoMoE, temb: TimestepEmbedder, F_n: Tensor, F_c: Tensor,
                  prompt: PromptContext, cond: ConditionContext, t, rope_tab):
    """Returns ``(F_hat_n, F_hat_c, assignment)`` for ``[B, N, d]`` inputs.

    ``rope_tab`` is the ``(cos, sin)`` pair for the N grid positions.
    """
    if F_n.shape != F_c.shape or F_n.ndim != 3:
        raise ShapeError(f"comoe: F_n {F_n.shape} and F_c {F_c.shape} must match as [B, N, d]")
    B, N, d = F_n.shape
    a = route_tokens(F_n, F_c, m.router)
    rn = T.rope(F_n, *rope_tab)
    rc = T.rope(F_c, *rope_tab)
    blocks_n = gather_groups(T.reshape(rn, (B * N, d)), a)
    blocks_c = gather_groups(T.reshape(rc, (B * N, d)), a)
    out_n, out_c = [], []
    for e, (g, bn, bc) in enumerate(zip(a.groups, blocks_n, blocks_c)):
        if len(g) == 0:
            out_n.append(bn)
            out_c.append(bc)
            continue
        fn, fc = modulated_expert_forward(bn, bc, cond.E_c, m.experts[e], token_sample=g // N)
        out_n.append(fn)
        out_c.append(fc)
    zero = Tensor(np.zeros((B * N, d)))
    Fh_n = T.reshape(reverse_scatter(out_n, zero, a), (B, N, d))
    Fh_c = T.reshape(reverse_scatter(out_c, zero, a), (B, N, d))
    S_n2, S_c2 = shared_expert_forward(m.shared, temb, rn, rc, prompt, cond, t)
    return T.add(Fh_n, S_n2), T.add(Fh_c, S_c2), a
