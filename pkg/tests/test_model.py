import math

import numpy as np
import pytest

from attnvar import autodiff as ad
from attnvar import model as M
from attnvar.autodiff import Tensor, grad_check, no_grad
from attnvar.data import BOS, UNK

SIG = lambda x: 1.0 / (1.0 + math.exp(-x))  # noqa: E731


def tiny(seed=0, V=10, E=6, H=8, gate_form="content", refine=True, scale=0.5):
    cfg = M.ModelConfig(vocab_size=V, emb_dim=E, hidden=H, gate_form=gate_form, refine=refine, init_scale=scale, seed=seed)
    return M.ModelParams.initialize(cfg)


def encoded(params, D=4, seed=0, n_oov=1):
    rng = np.random.default_rng(seed)
    V = params.config.vocab_size
    ext = rng.integers(4, V, size=D)
    if n_oov:
        ext[rng.integers(0, D)] = V  # one source OOV
    ids = np.where(ext >= V, UNK, ext)
    return M.encode(params, ids, source_ext=ext, n_oov=n_oov), ext


def first_step(params, enc, **kw):
    return M.decode_step(params, [BOS], enc.init_state, enc, **kw)


# -- encoder ---------------------------------------------------------------------
def test_encoder_shape():
    p = tiny(H=8)
    enc, _ = encoded(p, D=5, n_oov=0)
    assert enc.states.shape == (1, 5, 16)
    assert enc.init_state[0].shape == (1, 8)


def test_zero_weights_give_zero_states():
    p = tiny()
    for t in p:
        t.data[...] = 0.0
    enc, _ = encoded(p, D=6, n_oov=0)
    assert np.all(enc.states.data == 0.0)


def test_encoder_is_deterministic():
    a, _ = encoded(tiny(seed=3), D=5)
    b, _ = encoded(tiny(seed=3), D=5)
    assert np.array_equal(a.states.data, b.states.data)


def test_encoder_directions_are_true_concatenation():
    # the backward half at position i only depends on positions >= i
    p = tiny(seed=1)
    ids = np.array([4, 5, 6, 7, 8])
    base = M.encode(p, ids).states.data[0]
    changed = M.encode(p, np.array([9, 5, 6, 7, 8])).states.data[0]
    H = p.config.hidden
    assert np.array_equal(base[1:, H:], changed[1:, H:])
    assert not np.allclose(base[1:, :H], changed[1:, :H])


def test_padding_does_not_change_states():
    p = tiny(seed=2)
    alone = M.encode(p, np.array([4, 5, 6])).states.data[0]
    padded = M.encode(p, np.array([[4, 5, 6, 0, 0], [4, 5, 6, 7, 8]]), mask=np.array([[1, 1, 1, 0, 0], [1] * 5], bool))
    np.testing.assert_allclose(padded.states.data[0, :3], alone, rtol=0, atol=1e-15)


@pytest.mark.parametrize(
    "ids, kw",
    [(np.array([], dtype=int), {}), (np.array([4, 10]), {}), (np.array([4] * 11), {})],
    ids=["empty", "id>=V", "too-long"],
)
def test_encoder_errors(ids, kw):
    p = M.ModelParams.initialize(M.ModelConfig(vocab_size=10, emb_dim=4, hidden=4, max_source_len=10))
    with pytest.raises(ValueError):
        M.encode(p, ids, **kw)


# -- attention ---------------------------------------------------------------------
def attention_oracle(p, s, h):
    Wh, Ws, b, v = (p[k].data for k in ("attn_wh", "attn_ws", "attn_b", "attn_v"))
    e = []
    for hi in h:
        total = 0.0
        for k in range(len(v)):
            pre = sum(hi[j] * Wh[j, k] for j in range(len(hi))) + sum(s[j] * Ws[j, k] for j in range(len(s))) + b[k]
            total += v[k] * math.tanh(pre)
        e.append(total)
    z = [math.exp(x - max(e)) for x in e]
    return np.array(e), np.array([x / sum(z) for x in z])


def gate_oracle(p, s, h, a, form):
    wa, br = p["aru_wa"].data[0], p["aru_b"].data[0]
    r = []
    for i, hi in enumerate(h):
        if form == "content":
            W = p["aru_wr"].data
            term = sum(hi[j] * W[k, j] * s[k] for j in range(len(hi)) for k in range(len(s)))
        else:
            term = sum(s[k] * p["aru_ws"].data[k] for k in range(len(s)))
        r.append(SIG(term + wa * a[i] + br))
    r = np.array(r)
    return r, r * a, r * a / (r * a).sum()


@pytest.mark.parametrize("seed", range(5))
def test_attention_matches_oracle(seed):
    p = tiny(seed)
    enc, _ = encoded(p, D=4, seed=seed)
    s = Tensor(np.random.default_rng(seed).normal(size=(1, 8)))
    e, a = M.attention_step(s, enc, p)
    oe, oa = attention_oracle(p, s.data[0], enc.states.data[0])
    np.testing.assert_allclose(e.data[0], oe, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(a.data[0], oa, rtol=1e-12)


@pytest.mark.parametrize("form", ["content", "broadcast"])
@pytest.mark.parametrize("seed", range(5))
def test_refinement_matches_oracle(form, seed):
    p = tiny(seed, gate_form=form)
    enc, _ = encoded(p, D=4, seed=seed)
    s = Tensor(np.random.default_rng(seed + 50).normal(size=(1, 8)))
    _, a = M.attention_step(s, enc, p)
    r, ar, at = M.refine_attention(s, a, enc, p)
    orr, oar, oat = gate_oracle(p, s.data[0], enc.states.data[0], a.data[0], form)
    np.testing.assert_allclose(r.data[0], orr, rtol=1e-12)
    np.testing.assert_allclose(ar.data[0], oar, rtol=1e-12)
    np.testing.assert_allclose(at.data[0], oat, rtol=1e-12)


def test_zero_attention_vector_gives_uniform():
    p = tiny()
    p["attn_v"].data[...] = 0.0
    enc, _ = encoded(p, D=5)
    e, a = M.attention_step(enc.init_state[0], enc, p)
    assert np.all(e.data == 0.0)
    np.testing.assert_allclose(a.data, 0.2, rtol=0, atol=1e-15)


def test_singleton_source_attention_is_one():
    p = tiny()
    enc = M.encode(p, np.array([5]))
    assert M.attention_step(enc.init_state[0], enc, p)[1].data.tolist() == [[1.0]]


def test_identity_gate():
    p = tiny()
    enc, _ = encoded(p)
    out = first_step(p, enc, gate=Tensor(np.ones((1, 4))))
    assert np.array_equal(out.attention.refined.data, out.attention.raw.data)


@pytest.mark.parametrize("form", ["content", "broadcast"])
def test_zero_gate_weights_halve_attention(form):
    p = tiny(gate_form=form)
    for k in ("aru_wr", "aru_ws", "aru_wa", "aru_b"):
        p[k].data[...] = 0.0
    enc, _ = encoded(p)
    att = first_step(p, enc).attention
    assert np.all(att.gate.data == 0.5)
    assert np.array_equal(att.refined.data, 0.5 * att.raw.data)
    np.testing.assert_allclose(att.renormed.data, att.raw.data, rtol=1e-15)


def test_degenerate_gate_raises():
    p = tiny()
    enc, _ = encoded(p)
    with pytest.raises(M.DegenerateGateError):
        first_step(p, enc, gate=Tensor(np.full((1, 4), 1e-14)))


def test_refine_off_passes_attention_through():
    p = tiny(refine=False)
    enc, _ = encoded(p)
    att = first_step(p, enc).attention
    assert np.all(att.gate.data == 1.0)
    assert att.refined.data is att.raw.data or np.array_equal(att.refined.data, att.raw.data)


# -- context and mixing ----------------------------------------------------------------
def test_context_selection_and_average():
    p = tiny()
    enc, _ = encoded(p, D=4)
    h = enc.states.data[0]
    onehot = Tensor(np.eye(4)[2][None])
    assert np.array_equal(M.context_vector(onehot, enc).data[0], h[2])
    np.testing.assert_allclose(M.context_vector(Tensor(np.full((1, 4), 0.25)), enc).data[0], h.mean(0), rtol=1e-14)


def test_context_matches_summation_oracle():
    p = tiny(seed=4)
    enc, _ = encoded(p, D=4, seed=4)
    w = np.random.default_rng(4).dirichlet(np.ones(4))
    h = enc.states.data[0]
    oracle = [sum(w[i] * h[i, j] for i in range(4)) for j in range(h.shape[1])]
    np.testing.assert_allclose(M.context_vector(Tensor(w[None]), enc).data[0], oracle, rtol=1e-13)


def test_pure_generation():
    p = tiny()
    enc, _ = encoded(p)
    out = first_step(p, enc, p_gen=1.0)
    np.testing.assert_array_equal(out.final_dist.data[0], np.concatenate([out.vocab_dist.data[0], [0.0]]))


def test_pure_copy_of_oov():
    p = tiny()
    enc, ext = encoded(p)
    k = int(np.flatnonzero(ext == 10)[0])
    out = first_step(p, enc, p_gen=0.0, gate=Tensor(np.eye(4)[k][None] + 1e-300))
    # the gate is one-hot up to a negligible floor, so the renormalised attention is one-hot too
    expected = np.zeros(11)
    expected[10] = 1.0
    np.testing.assert_allclose(out.final_dist.data[0], expected, rtol=0, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_mixing_matches_oracle(seed):
    p = tiny(seed)
    enc, ext = encoded(p, seed=seed)
    out = first_step(p, enc)
    pg, pv, at = out.p_gen.data[0, 0], out.vocab_dist.data[0], out.attention.renormed.data[0]
    oracle = []
    for w in range(11):
        gen = pv[w] if w < 10 else 0.0
        oracle.append(pg * gen + (1 - pg) * sum(at[i] for i in range(4) if ext[i] == w))
    np.testing.assert_allclose(out.final_dist.data[0], oracle, rtol=1e-12, atol=1e-16)
    assert abs(out.final_dist.data.sum() - 1) < 1e-9


def test_copy_attribution_to_oovs():
    for seed in range(10):
        p = tiny(seed)
        enc, ext = encoded(p, seed=seed)
        out = first_step(p, enc)
        pg = out.p_gen.data[0, 0]
        oov_mass = out.attention.renormed.data[0][ext >= 10].sum()
        assert abs(out.final_dist.data[0, 10:].sum() - (1 - pg) * oov_mass) < 1e-9


def test_oov_previous_token_uses_unk_embedding():
    p = tiny()
    enc, _ = encoded(p)
    a = M.decode_step(p, [10], enc.init_state, enc)
    b = M.decode_step(p, [UNK], enc.init_state, enc)
    assert np.array_equal(a.final_dist.data, b.final_dist.data)


@pytest.mark.parametrize("form", ["content", "broadcast"])
def test_distribution_invariants_over_many_steps(form):
    for seed in range(25):
        p = tiny(seed, gate_form=form)
        enc, _ = encoded(p, D=3 + seed % 5, seed=seed)
        state, prev = enc.init_state, [BOS]
        for _ in range(2):
            out = M.decode_step(p, prev, state, enc)
            att = out.attention
            assert abs(att.raw.data.sum() - 1) < 1e-9
            assert abs(att.renormed.data.sum() - 1) < 1e-9
            assert abs(out.final_dist.data.sum() - 1) < 1e-9
            assert np.array_equal(att.refined.data, att.gate.data * att.raw.data)
            assert np.all(att.refined.data <= att.raw.data)
            assert np.all((att.gate.data > 0) & (att.gate.data < 1))
            state, prev = out.state, [int(out.final_dist.data.argmax())]


# -- gradients ----------------------------------------------------------------------
def test_full_model_gradients_every_parameter_group():
    p = tiny(seed=7, V=10, E=3, H=3, scale=0.3)
    rng = np.random.default_rng(7)
    ext = np.array([4, 10, 5, 6, 7])
    w = Tensor(rng.normal(size=(1, 11)))

    def f():
        enc = M.encode(p, np.where(ext >= 10, UNK, ext), source_ext=ext, n_oov=1)
        out = M.decode_step(p, [BOS], enc.init_state, enc)
        out = M.decode_step(p, [10], out.state, enc)
        return (out.final_dist * w).sum()

    for name, t in p.items():
        assert grad_check(f, [t], step=1e-5) < 1e-4, name


def test_teacher_forced_pass_shapes():
    from attnvar import data

    vocab = data.Vocabulary(list(data.RESERVED) + [f"w{i}" for i in range(6)])
    ex = [data.make_example(["w1", "q", "w2"], ["q", "w1"], vocab), data.make_example(["w3"] * 5, ["w3"], vocab)]
    p = tiny(V=10)
    with no_grad():
        tr = M.teacher_forced(p, data.collate(ex, 10))
    assert tr.refined.shape == (2, 3, 5)
    # padded steps and positions carry no attention
    assert np.all(tr.raw.data[0, :, 3:] == 0)
    np.testing.assert_allclose(tr.raw.data.sum(-1)[tr.step_mask], 1.0, atol=1e-12)


# -- checkpoints ---------------------------------------------------------------------
def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    p = tiny(seed=5, gate_form="broadcast")
    M.save_checkpoint(tmp_path / "a.ckpt", p, ["<pad>", "<unk>", "<bos>", "<eos>", "x"], {"train.seed": 5})
    ck = M.load_checkpoint(tmp_path / "a.ckpt")
    M.save_checkpoint(tmp_path / "b.ckpt", ck.params, ck.vocab_tokens, {"train.seed": 5})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert ck.params.config == p.config and ck.params.digest() == p.digest()
    assert ck.echo["train.seed"] == "5"


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\0" * 10)
    with pytest.raises(ValueError, match="magic"):
        M.load_checkpoint(path)
    M.save_checkpoint(path, tiny())
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ValueError, match="truncated"):
        M.load_checkpoint(path)


def test_params_validate_shapes():
    p = tiny()
    bad = dict(p.tensors)
    bad["aru_b"] = Tensor(np.zeros(2))
    with pytest.raises(ValueError):
        M.ModelParams(p.config, bad)
    with pytest.raises(ValueError):
        M.ModelConfig(gate_form="dense")


def test_forget_gate_bias_initialised_to_one():
    p = M.ModelParams.initialize(M.ModelConfig(vocab_size=10, emb_dim=4, hidden=4))
    for name in ("enc_fw_b", "enc_bw_b", "dec_b"):
        assert np.all(p[name].data[4:8] == 1.0)
        assert np.all(np.abs(np.delete(p[name].data, range(4, 8))) <= 0.05)
