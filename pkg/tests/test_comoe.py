import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from unigen import comoe as C
from unigen import tensor as T
from unigen.comoe import (
    CoMoE, ModulatedExpert, SharedExpert, assign_from_scores, comoe_forward, gather_groups,
    modulated_expert_forward, reverse_scatter, route_tokens, shared_expert_forward,
)
from unigen.embeddings import (
    ConditionEncoder, PromptContext, PromptEncoder, TimestepEmbedder, raster_grid, rope_tables,
)
from unigen.nn import Attention, Linear
from unigen.tensor import ShapeError, Tensor, grad_check


def _router(W, b=None):
    lin = Linear(np.random.default_rng(0), W.shape[0], W.shape[1])
    lin.weight.data[...] = W
    lin.bias.data[...] = 0.0 if b is None else b
    return lin


# ---------------------------------------------------------------------------
# routing


def test_single_expert_takes_everything(rng):
    a = route_tokens(Tensor(rng.standard_normal((5, 4))), Tensor(rng.standard_normal((5, 4))),
                     _router(rng.standard_normal((4, 1))))
    assert a.index.tolist() == [0] * 5
    assert a.groups[0].tolist() == list(range(5))


def test_ties_go_to_lowest_expert():
    a = assign_from_scores(np.array([[1.0, 1.0], [0.5, 0.5], [0.0, 2.0], [3.0, 3.0]]))
    assert a.index.tolist() == [0, 0, 1, 0]


def test_routing_matches_hand_scores():
    F_n = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    F_c = np.array([[0.0, 1.0], [0.0, 1.0], [-2.0, 0.0]])
    W = np.array([[1.0, -1.0], [0.0, 1.0]])
    # fused rows: [1,1], [0,2], [-1,1]; scores: [1,0], [0,2], [-1,2]
    a = route_tokens(Tensor(F_n), Tensor(F_c), _router(W))
    np.testing.assert_array_equal(a.scores, [[1.0, 0.0], [0.0, 2.0], [-1.0, 2.0]])
    assert a.index.tolist() == [0, 1, 1]
    assert [g.tolist() for g in a.groups] == [[0], [1, 2]]
    np.testing.assert_array_equal(a.load(), [1, 2])


def test_router_bias_enters_scores():
    a = route_tokens(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))), _router(np.eye(2), [0.0, 1.0]))
    assert a.index.tolist() == [1, 1]


def test_route_rejects_token_mismatch(rng):
    with pytest.raises(ShapeError):
        route_tokens(Tensor(np.zeros((3, 4))), Tensor(np.zeros((2, 4))), _router(np.eye(4)))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_partition_and_shift_invariance(n, e, seed):
    r = np.random.default_rng(seed)
    scores = np.round(r.standard_normal((n, e)), 1)  # rounding makes ties common
    a = assign_from_scores(scores)
    assert sorted(a.perm.tolist()) == list(range(n))
    for g in a.groups:
        assert list(g) == sorted(g)
    shifted = assign_from_scores(scores + r.integers(-5, 6, (n, 1)))
    assert shifted.index.tolist() == a.index.tolist()


# ---------------------------------------------------------------------------
# gather / scatter


def test_gather_identity_assignment(rng):
    x = Tensor(rng.standard_normal((6, 3)))
    blocks = gather_groups(x, assign_from_scores(np.zeros((6, 1))))
    assert len(blocks) == 1
    np.testing.assert_array_equal(blocks[0].data, x.data)


def test_gather_alternating_assignment():
    x = Tensor(np.arange(8.0).reshape(4, 2))
    a = assign_from_scores(np.array([[1, 0], [0, 1], [1, 0], [0, 1]], dtype=float))
    b0, b1 = gather_groups(x, a)
    np.testing.assert_array_equal(b0.data, x.data[[0, 2]])
    np.testing.assert_array_equal(b1.data, x.data[[1, 3]])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 30), st.integers(1, 8), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_round_trip_is_bitwise_identity(n, e, d, seed):
    r = np.random.default_rng(seed)
    x = Tensor(r.standard_normal((n, d)))
    a = assign_from_scores(r.standard_normal((n, e)))
    back = reverse_scatter(gather_groups(x, a), Tensor(np.zeros((n, d))), a)
    assert back.data.tobytes() == x.data.tobytes()


def test_reverse_scatter_matches_index_oracle(rng):
    n, e, d = 12, 4, 3
    a = assign_from_scores(rng.standard_normal((n, e)))
    blocks = [Tensor(rng.standard_normal((len(g), d))) for g in a.groups]
    out = reverse_scatter(blocks, Tensor(np.zeros((n, d))), a).data
    want = np.zeros((n, d))
    for k, g in enumerate(a.groups):
        for row, tok in enumerate(g):
            want[tok] = blocks[k].data[row]
    np.testing.assert_array_equal(out, want)


def test_reverse_scatter_single_expert(rng):
    blk = Tensor(rng.standard_normal((5, 2)))
    a = assign_from_scores(np.zeros((5, 1)))
    np.testing.assert_array_equal(reverse_scatter([blk], Tensor(np.zeros((5, 2))), a).data, blk.data)


def test_reverse_scatter_rejects_size_mismatch():
    a = assign_from_scores(np.array([[1.0, 0.0], [0.0, 1.0]]))
    with pytest.raises(ShapeError):
        reverse_scatter([Tensor(np.zeros((2, 3))), Tensor(np.zeros((0, 3)))], Tensor(np.zeros((2, 3))), a)
    with pytest.raises(ShapeError):
        reverse_scatter([Tensor(np.zeros((1, 3)))], Tensor(np.zeros((2, 3))), a)


# ---------------------------------------------------------------------------
# modulated expert


def _expert(d, LW_c=None, LB_c=None, LW_h=None, LB_h=None):
    ex = ModulatedExpert(np.random.default_rng(0), d)
    for name, val in (("LW_c", LW_c), ("LB_c", LB_c), ("LW_h", LW_h), ("LB_h", LB_h)):
        if val is not None:
            getattr(ex, name).data[...] = val
    return ex


def test_expert_init_distribution():
    ex = ModulatedExpert(np.random.default_rng(11), 128)
    for p in (ex.LW_c, ex.LW_h):
        assert abs(p.data.std() - 0.1) < 0.005 and abs(p.data.mean()) < 0.005


def test_identity_condition_modulation(rng):
    d = 4
    W = np.zeros((d, d))
    W[0] = 1.0
    E_c = Tensor(np.array([1.0, 0.0, 0.0, 0.0]))
    fc = Tensor(rng.standard_normal((3, d)))
    _, out = modulated_expert_forward(Tensor(rng.standard_normal((3, d))), fc, E_c,
                                      _expert(d, LW_c=W, LB_c=0.0))
    np.testing.assert_array_equal(out.data, fc.data)


def test_bias_only_noisy_path(rng):
    d = 4
    LB_h = rng.standard_normal(d)
    fn, _ = modulated_expert_forward(Tensor(rng.standard_normal((3, d))), Tensor(rng.standard_normal((3, d))),
                                     Tensor(rng.standard_normal(d)), _expert(d, LW_h=0.0, LB_h=LB_h))
    np.testing.assert_array_equal(fn.data, np.tile(LB_h, (3, 1)))


def test_expert_hand_computation():
    d = 4
    LW_c = np.diag([1.0, 2.0, 0.5, -1.0])
    LB_c = np.array([0.1, 0.0, -0.1, 0.0])
    LW_h = np.eye(d)[::-1]
    LB_h = np.array([0.0, 1.0, 0.0, 1.0])
    E_c = np.array([1.0, 1.0, 2.0, 1.0])
    F_c = np.array([[1.0, 2.0, 3.0, 4.0], [0.5, -1.0, 0.0, 2.0]])
    F_n = np.array([[2.0, 0.0, 1.0, 1.0], [1.0, 1.0, 1.0, 1.0]])
    fn, fc = modulated_expert_forward(Tensor(F_n), Tensor(F_c), Tensor(E_c), _expert(d, LW_c, LB_c, LW_h, LB_h))
    # E_c LW_c = [1, 2, 1, -1]
    want_c = np.array([[1.1, 4.0, 2.9, -4.0], [0.6, -2.0, -0.1, -2.0]])
    # gate = F_c' reversed along channels
    want_n = np.array([[-8.0, 1.0 + 0.0, 4.0, 1.0 + 1.1], [-2.0, 1.0 - 0.1, -2.0, 1.0 + 0.6]])
    np.testing.assert_allclose(fc.data, want_c, atol=1e-14)
    np.testing.assert_allclose(fn.data, want_n, atol=1e-14)


def test_expert_rejects_width_mismatch():
    with pytest.raises(ShapeError):
        modulated_expert_forward(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)),
                                 _expert(4))


# ---------------------------------------------------------------------------
# shared expert


def _setup(d=8, gh=2, B=1, L=3, n_types=3, seed=0):
    r = np.random.default_rng(seed)
    temb = TimestepEmbedder(r, d)
    penc = PromptEncoder(r, 16, d)
    cenc = ConditionEncoder(r, n_types, d)
    grid = raster_grid(gh, gh)
    N = gh * gh
    F_n = Tensor(r.standard_normal((B, N, d)))
    F_c = Tensor(r.standard_normal((B, N, d)))
    prompts = [list(r.integers(1, 16, L)) for _ in range(B)]
    types = list(r.integers(0, n_types, B))
    return temb, penc(prompts), cenc(types), F_n, F_c, grid, prompts, types, penc, cenc


def test_shared_expert_contributes_nothing_at_init():
    temb, prompt, cond, F_n, F_c, grid, *_ = _setup(B=2)
    sh = SharedExpert(np.random.default_rng(1), 8, 1)
    rt = rope_tables(grid, 8)
    S_n, S_c = shared_expert_forward(sh, temb, T.rope(F_n, *rt), T.rope(F_c, *rt), prompt, cond, [0.3, 0.6])
    assert not S_n.data.any() and not S_c.data.any()


def test_attention_over_one_key_returns_value_row(rng):
    attn = Attention(np.random.default_rng(2), 4)
    attn.wo.bias.data[...] = rng.standard_normal(4)
    xq = Tensor(rng.standard_normal((1, 3, 4)))
    xkv = Tensor(rng.standard_normal((1, 1, 4)))
    out = attn(xq, xkv).data[0]
    row = xkv.data[0, 0] @ attn.wv.weight.data @ attn.wo.weight.data + attn.wo.bias.data
    np.testing.assert_allclose(out, np.tile(row, (3, 1)), atol=1e-14)


def test_shared_expert_matches_manual_attention():
    temb, prompt, cond, F_n, F_c, grid, prompts, types, penc, cenc = _setup(d=8, gh=1, L=2)
    sh = SharedExpert(np.random.default_rng(5), 8, 1)
    oracles.perturb_all(sh, np.random.default_rng(6), 0.3)
    rt = rope_tables(grid, 8)
    rn, rc = T.rope(F_n, *rt), T.rope(F_c, *rt)
    S_n, S_c = shared_expert_forward(sh, temb, rn, rc, prompt, cond, 0.45)
    F_p, E_p = oracles.prompt_context(penc, prompts[0])
    E_c = cenc.table.data[types[0]]
    want_n, want_c = oracles.shared_expert(sh, rn.data[0], rc.data[0], F_p,
                                           oracles.timestep_embed(temb, 0.45, E_c),
                                           oracles.timestep_embed(temb, 0.45, E_p))
    np.testing.assert_allclose(S_n.data[0], want_n, atol=1e-13)
    np.testing.assert_allclose(S_c.data[0], want_c, atol=1e-13)


def test_shared_expert_rejects_empty_prompt():
    temb, _, cond, F_n, F_c, *_ = _setup()
    empty = PromptContext(Tensor(np.zeros((1, 0, 8))), Tensor(np.zeros((1, 8))), np.zeros((1, 0), bool))
    with pytest.raises(ValueError):
        shared_expert_forward(SharedExpert(np.random.default_rng(0), 8, 1), temb, F_n, F_c, empty, cond, 0.5)


# ---------------------------------------------------------------------------
# full module


def test_identity_experts_and_closed_gates_give_rotated_inputs(monkeypatch):
    temb, prompt, cond, F_n, F_c, grid, *_ = _setup(B=2)
    m = CoMoE(np.random.default_rng(3), 8, 3)
    monkeypatch.setattr(C, "modulated_expert_forward", lambda fn, fc, *a, **k: (fn, fc))
    rt = rope_tables(grid, 8)
    Fh_n, Fh_c, _ = comoe_forward(m, temb, F_n, F_c, prompt, cond, [0.2, 0.9], rt)
    np.testing.assert_array_equal(Fh_n.data, T.rope(F_n, *rt).data)
    np.testing.assert_array_equal(Fh_c.data, T.rope(F_c, *rt).data)


def test_one_expert_equals_unrouted_expert():
    temb, prompt, cond, F_n, F_c, grid, *_ = _setup(B=1, gh=3)
    m = CoMoE(np.random.default_rng(3), 8, 1)
    rt = rope_tables(grid, 8)
    Fh_n, Fh_c, a = comoe_forward(m, temb, F_n, F_c, prompt, cond, 0.5, rt)
    fn, fc = modulated_expert_forward(T.reshape(T.rope(F_n, *rt), (9, 8)),
                                      T.reshape(T.rope(F_c, *rt), (9, 8)),
                                      T.reshape(cond.E_c, (8,)), m.experts[0])
    assert a.load().tolist() == [9]
    np.testing.assert_array_equal(Fh_n.data[0], fn.data)
    np.testing.assert_array_equal(Fh_c.data[0], fc.data)


@pytest.mark.parametrize("B", [1, 2])
def test_comoe_matches_token_loop_reference(B):
    temb, prompt, cond, F_n, F_c, grid, prompts, types, penc, cenc = _setup(d=8, gh=2, B=B, seed=B)
    m = CoMoE(np.random.default_rng(8), 8, 3)
    oracles.perturb_all(m, np.random.default_rng(9), 0.3)
    oracles.perturb_all(temb, np.random.default_rng(10), 0.3)
    sigmas = [0.3, 0.8][:B]
    Fh_n, Fh_c, a = comoe_forward(m, temb, F_n, F_c, prompt, cond, sigmas, rope_tables(grid, 8))
    for b in range(B):
        F_p, E_p = oracles.prompt_context(penc, prompts[b])
        want_n, want_c, picks = oracles.comoe_loop(m, temb, F_n.data[b], F_c.data[b], F_p, E_p,
                                                   cenc.table.data[types[b]], sigmas[b], grid)
        assert a.index[b * 4:(b + 1) * 4].tolist() == picks
        np.testing.assert_allclose(Fh_n.data[b], want_n, atol=1e-12)
        np.testing.assert_allclose(Fh_c.data[b], want_c, atol=1e-12)


def test_token_permutation_equivariance():
    temb, prompt, cond, F_n, F_c, grid, *_ = _setup(d=8, gh=3, seed=4)
    m = CoMoE(np.random.default_rng(8), 8, 4)
    oracles.perturb_all(m, np.random.default_rng(9), 0.3)
    rt = rope_tables(grid, 8)
    perm = np.random.default_rng(1).permutation(9)
    base_n, base_c, _ = comoe_forward(m, temb, F_n, F_c, prompt, cond, 0.4, rt)
    pn, pc, _ = comoe_forward(m, temb, Tensor(F_n.data[:, perm]), Tensor(F_c.data[:, perm]), prompt, cond, 0.4,
                              rope_tables(grid[perm], 8))
    np.testing.assert_allclose(pn.data, base_n.data[:, perm], atol=1e-13)
    np.testing.assert_allclose(pc.data, base_c.data[:, perm], atol=1e-13)


def test_comoe_gradients():
    temb, prompt, cond, F_n, F_c, grid, *_ = _setup(d=8, gh=2, seed=2)
    m = CoMoE(np.random.default_rng(8), 8, 2)
    oracles.perturb_all(m, np.random.default_rng(9), 0.3)
    rt = rope_tables(grid, 8)
    probe_n = Tensor(np.random.default_rng(1).standard_normal(F_n.shape))
    probe_c = Tensor(np.random.default_rng(2).standard_normal(F_n.shape))

    def f():
        a, b, _ = comoe_forward(m, temb, F_n, F_c, prompt, cond, 0.35, rt)
        return T.add(T.sum_all(T.mul(a, probe_n)), T.sum_all(T.mul(b, probe_c)))

    # the router only feeds an argmax, so both its gradients are zero
    assert grad_check(f, list(m.parameters().values())) <= 1e-6
