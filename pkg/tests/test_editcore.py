import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eaclab import editcore as ec
from eaclab import microlm as lm
from eaclab import numgrad as ng
from eaclab.eac import ElasticConfig


def _spd(r, d):
    M = r.normal(size=(d, d))
    return M @ M.T + 0.5 * np.eye(d)


# FactEdit --------------------------------------------------------------------------


def test_fact_needs_one_slot():
    with pytest.raises(ValueError, match="slot"):
        ec.FactEdit("a", "ada varen", "{} lives in {}", "quito")
    with pytest.raises(ValueError, match="slot"):
        ec.FactEdit("a", "ada varen", "lives in", "quito")


def test_fact_needs_target():
    with pytest.raises(ValueError, match="target"):
        ec.FactEdit("a", "ada varen", "{} lives in", "  ")


def test_fact_prompts():
    f = ec.FactEdit("a", "ada varen", "{} lives in", "quito", ["{} resides in", "where does ada live"])
    assert f.prompt == "ada varen lives in"
    assert f.rephrase_prompts() == ["ada varen resides in", "where does ada live"]


def test_encode_fact_span(tok):
    enc = ec.encode_fact(tok, ec.FactEdit("a", "ada varen", "{} lives in", "quito"))
    assert tok.decode(enc.prompt_ids) == "ada varen lives in"
    assert enc.subject_last == 1
    assert tok.decode(enc.essence_ids) == "ada varen is a"


def test_encode_fact_unknown_subject(tok):
    with pytest.raises(ec.SpanError):
        ec.encode_fact(tok, ec.FactEdit("a", "zork", "{} lives in", "quito"))


def test_encode_fact_multi_token_target(tok):
    with pytest.raises(ValueError, match="single"):
        ec.encode_fact(tok, ec.FactEdit("a", "ada varen", "{} lives in", "quito lagos"))


# keys and covariance ---------------------------------------------------------------


def test_key_single_empty_prefix_is_traced_key(toy_model, tok):
    enc = ec.encode_fact(tok, ec.FactEdit("a", "ada varen", "{} lives in", "quito"))
    ctx = ec.Contexts.build([[]], enc.prompt_ids, enc.subject_last)
    _, vec = lm.forward_traced(toy_model, enc.prompt_ids, lm.TraceSpec(0, enc.subject_last))
    np.testing.assert_array_equal(ec.compute_key(toy_model, ctx, 0), vec["mlp_key"])


def test_key_two_prefixes_is_mean(toy_model, tok):
    enc = ec.encode_fact(tok, ec.FactEdit("a", "ada varen", "{} lives in", "quito"))
    pre = [tok.encode("the dog was quiet ."), tok.encode("one song .")]
    ctx = ec.Contexts.build(pre, enc.prompt_ids, enc.subject_last)
    keys = [
        lm.forward_traced(toy_model, p + enc.prompt_ids, lm.TraceSpec(0, len(p) + 1))[1]["mlp_key"] for p in pre
    ]
    np.testing.assert_allclose(ec.compute_key(toy_model, ctx, 0), (keys[0] + keys[1]) / 2, atol=1e-14)


def test_key_with_sampled_prefixes_is_deterministic(toy_model, tok, corpus, facts):
    ed = ec.Editor(toy_model, tok, corpus)
    enc = ec.encode_fact(tok, facts[0])
    k1 = ec.compute_key(toy_model, ed.contexts(enc, facts[0].id), 0)
    k2 = ec.compute_key(toy_model, ed.contexts(enc, facts[0].id), 0)
    assert k1.tobytes() == k2.tobytes()
    assert len(ed.contexts(enc, facts[0].id).sequences) == 8


def test_sample_prefixes_start_empty_and_end_on_boundary(corpus, tok):
    pre = ec.sample_prefixes(corpus, 5, 6, tok.id("."), seed=3)
    assert pre[0] == [] and all(len(p) == 6 and p[-1] == tok.id(".") for p in pre[1:])


def test_key_layer_out_of_range(toy_model):
    with pytest.raises(IndexError):
        ec.compute_key(toy_model, ec.Contexts.build([[]], [1, 2], 0), 9)


def test_covariance_single_key(monkeypatch, small_model):
    k = np.arange(1.0, 17.0)
    monkeypatch.setattr(lm, "run", lambda m, w, capture: lm.ForwardResult(None, {(0, "mlp_key"): k[None, None, :]}))
    C = ec.estimate_covariance(small_model, np.array([[1]]), 0)
    np.testing.assert_allclose(C, np.outer(k, k))
    assert ec.numerical_rank(C) == 1


def test_covariance_basis_keys(monkeypatch, small_model):
    d = 16
    monkeypatch.setattr(lm, "run", lambda m, w, capture: lm.ForwardResult(None, {(0, "mlp_key"): np.eye(d)[None]}))
    C = ec.estimate_covariance(small_model, np.zeros((1, d), dtype=int), 0)
    np.testing.assert_allclose(C, np.eye(d) / d)


def test_covariance_empty_sample(small_model):
    with pytest.raises(ec.DataError):
        ec.estimate_covariance(small_model, np.zeros((0, 4), dtype=int), 0)


def test_covariance_of_corpus_is_psd(toy_model, corpus):
    windows = ec.sample_windows(corpus, 500, 24, seed=1)
    C = ec.estimate_covariance(toy_model, windows, 0)
    assert np.abs(C - C.T).max() < 1e-9
    assert np.linalg.eigvalsh(C).min() >= -1e-9


@pytest.fixture
def small_model():
    return lm.init_model(lm.LmConfig(vocab_size=32, d_model=8, n_layers=2, n_heads=2, d_mlp=16, max_seq=8))


# rank-one update -------------------------------------------------------------------


def test_rank_one_noop():
    r = np.random.default_rng(0)
    W, k, C = r.normal(size=(4, 6)), r.normal(size=6), _spd(r, 6)
    W_hat, upd = ec.rank_one_update(W, k, W @ k, C)
    assert np.array_equal(W_hat, W) and not upd.any()


def test_rank_one_hand_case():
    u = np.array([1.0, -2.0, 3.0])
    W_hat, _ = ec.rank_one_update(np.zeros((3, 4)), np.eye(4)[0], u, np.eye(4))
    np.testing.assert_array_equal(W_hat, np.outer(u, np.eye(4)[0]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_rank_one_exact_and_local(seed):
    r = np.random.default_rng(seed)
    W, k, v, C = r.normal(size=(5, 8)), r.normal(size=8), r.normal(size=5), _spd(r, 8)
    W_hat, upd = ec.rank_one_update(W, k, v, C)
    assert np.abs(W_hat @ k - v).max() < 1e-8 * (1 + np.abs(v).max())
    s = np.linalg.svd(upd, compute_uv=False)
    assert s[1] < 1e-8 * s[0]
    u = np.linalg.solve(C, k)
    probe = r.normal(size=8)
    probe -= (probe @ u) / (u @ u) * u
    assert np.abs(W_hat @ probe - W @ probe).max() < 1e-9


def test_rank_one_degenerate_key():
    with pytest.raises(ec.DegenerateKeyError):
        ec.rank_one_update(np.ones((2, 3)), np.zeros(3), np.ones(2), np.eye(3))


# value optimization ----------------------------------------------------------------


def _objective(editor, fact, layer=0, kl=0.0625):
    enc = ec.encode_fact(editor.tok, fact)
    ctx = editor.contexts(enc, fact.id)
    k, obj = editor.objective(enc, ctx, layer, editor.params.replace(kl_weight=kl))
    return enc, ctx, k, obj


def test_optimize_value_zero_lr(model, editor_factory, facts):
    _, _, _, obj = _objective(editor_factory(model), facts[0])
    res = ec.optimize_value(obj, 3, 0.0)
    np.testing.assert_array_equal(res.v_star, obj.base)
    _, g0 = obj(np.zeros(64))
    np.testing.assert_array_equal(res.grad_at_opt, g0)
    assert res.steps == 3 and len(res.loss_trace) == 4


def test_objective_gradient_matches_fd(model, editor_factory, facts):
    _, _, _, obj = _objective(editor_factory(model), facts[3])
    delta = np.random.default_rng(2).normal(scale=0.5, size=64)
    _, g = obj(delta)
    # the objective builds its own leaf, so the tape gradient is passed in
    assert ng.finite_diff_check(lambda t: obj.tape(t.data)[1], delta, analytic=g) < 1e-4


def test_objective_matches_plain_forward(model, editor_factory, facts, tok):
    """The cached-suffix objective equals the NLL from full substituted forwards."""
    enc, ctx, _, obj = _objective(editor_factory(model), facts[5], kl=0.0)
    delta = np.random.default_rng(4).normal(size=64)
    total = 0.0
    for seq, pos in zip(ctx.sequences, ctx.subject_pos):
        lg = lm.forward_substituted(model, seq, 0, pos, obj.base + delta).data[-1]
        lp = lg - np.log(np.exp(lg - lg.max()).sum()) - lg.max()
        total -= lp[enc.target_id]
    loss, _ = obj(delta)
    assert abs(loss - total / len(ctx.sequences)) < 1e-10


def test_optimize_value_reaches_target(model, editor_factory, facts):
    ed = editor_factory(model)
    enc, ctx, _, obj = _objective(ed, facts[0])
    res = ec.optimize_value(obj, 20, 5.0)
    assert res.loss_trace[-1] <= res.loss_trace[0]
    sub = lm.forward_substituted(model, enc.prompt_ids, 0, enc.subject_last, res.v_star).data
    assert sub[-1].argmax() == enc.target_id


def test_optimize_value_convex_grid_oracle():
    # 2-d linear softmax model: logits = A z + c; grid search bounds the optimum
    A = np.array([[1.0, 0.5], [-0.3, 1.2], [0.2, -0.8]])
    c = np.array([0.1, 0.0, -0.2])
    lam = 0.05

    class Obj:
        base = np.zeros(2)
        last: dict = {}

        def __call__(self, z):
            lg = A @ z + c
            p = np.exp(lg - lg.max())
            p /= p.sum()
            loss = -np.log(p[0]) + lam * z @ z
            self.last = {"nll": loss}
            return loss, A.T @ (p - np.eye(3)[0]) + 2 * lam * z

    res = ec.optimize_value(Obj(), 3000, 0.5, clip=None)
    g = np.linspace(-6, 6, 1201)
    Z = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
    lg = Z @ A.T + c
    lse = np.log(np.exp(lg - lg.max(1, keepdims=True)).sum(1)) + lg.max(1)
    grid = (lse - lg[:, 0] + lam * (Z * Z).sum(1)).min()
    assert abs(res.loss_trace[-1] - grid) < 1e-3


def test_optimize_value_nan_raises():
    class Bad:
        base = np.zeros(2)
        last = {"nll": 0.0}

        def __call__(self, z):
            return float("nan"), z

    with pytest.raises(Exception, match="step 0"):
        ec.optimize_value(Bad(), 5, 1.0)


def test_optimize_value_rejects_zero_steps(model, editor_factory, facts):
    _, _, _, obj = _objective(editor_factory(model), facts[0])
    with pytest.raises(ValueError):
        ec.optimize_value(obj, 0, 1.0)


# orchestrated edits ----------------------------------------------------------------


def test_rome_edit_flips_and_is_rank_one(model, editor_factory, facts):
    ed = editor_factory(model)
    W0 = model.W_proj(0).copy()
    out = ed.apply(facts[0], "ROME")
    assert out.success and out.rank_of_update == [1] and out.opt_steps == 20
    assert out.pre_l1 == [float(np.abs(W0).sum())]
    np.testing.assert_allclose(out.update_norm_l1, np.abs(model.W_proj(0) - W0).sum(), rtol=1e-12)


def test_rome_on_known_fact_is_noop(model, editor_factory, tok):
    ed = editor_factory(model)
    W0 = model.W_proj(0).copy()
    fact = ec.FactEdit("known", "ada varen", "{} lives in", "osaka")
    assert ed.predicts(ec.encode_fact(tok, fact))
    out = ed.apply(fact, "ROME")
    assert out.noop and out.update_norm_l1 < 1e-6 * np.abs(W0).sum()
    assert np.array_equal(model.W_proj(0), W0)


def test_eac_update_not_larger_than_rome(toy_model, editor_factory, facts):
    for f in facts[:3]:
        rome = editor_factory(toy_model.copy()).apply(f, "ROME")
        eac = editor_factory(toy_model.copy()).apply(f, "ROME-EAC")
        assert eac.update_norm_l1 <= rome.update_norm_l1
        assert eac.opt_steps == rome.opt_steps == 20


def test_memit_window_ranks(model, editor_factory, facts):
    ed = editor_factory(model, ec.EditParams(layers=(2, 3)))
    out = ed.apply(facts[1], "MEMIT-lite")
    assert out.edited_layers == [2, 3]
    assert out.rank_of_update == [1, 1] and out.rank == 2


def test_memit_default_window_flips(model, editor_factory, facts):
    out = editor_factory(model).apply(facts[1], "MEMIT-lite")
    assert out.success


def test_edit_is_deterministic(toy_model, editor_factory, facts):
    a = editor_factory(toy_model.copy()).apply(facts[7], "ROME-EAC")
    b = editor_factory(toy_model.copy()).apply(facts[7], "ROME-EAC")
    da, db = a.to_dict(), b.to_dict()
    da.pop("wall_ms"), db.pop("wall_ms")
    assert da == db


def test_apply_edit_unknown_method(model, tok, corpus, facts):
    with pytest.raises(ValueError, match="unknown method"):
        ec.apply_edit(model, facts[0], "LoRA", tok=tok, corpus=corpus)


def test_edit_params_round_trip():
    p = ec.EditParams(layers=(1, 2), v_lr=3.0)
    assert ec.EditParams.from_dict(p.to_dict()) == p
    with pytest.raises(ValueError):
        ec.EditParams.from_dict({"nonsense": 1})


# fine-tuning baseline --------------------------------------------------------------


def test_ft_zero_lr_is_noop(model, editor_factory, facts):
    before = model.checksum()
    ec.fine_tune_edit(editor_factory(model), facts[0], 5, 0.0)
    assert model.checksum() == before


def test_ft_edit_flips_target(model, editor_factory, facts):
    out = ec.fine_tune_edit(editor_factory(model), facts[0], 20, 0.5)
    assert out.success and out.method == "FT"


def test_ft_elastic_has_smaller_update(toy_model, editor_factory, facts):
    plain = ec.fine_tune_edit(editor_factory(toy_model.copy()), facts[2], 20, 0.5)
    el = ec.fine_tune_edit(editor_factory(toy_model.copy()), facts[2], 20, 0.5, ElasticConfig(1e-4, 1e-2))
    assert el.update_norm_l1 < plain.update_norm_l1


def test_ft_rejects_zero_steps(model, editor_factory, facts):
    with pytest.raises(ValueError):
        ec.fine_tune_edit(editor_factory(model), facts[0], 0, 0.1)
