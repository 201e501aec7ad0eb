import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from goweb import nncore, tasks
from goweb.goal_embed import GoalEmbeddingTable
from goweb.page_encoder import EstimatorConfig, GoalEstimator, WebPage
from goweb.session_model import (
    Corpus,
    GoWebModel,
    ModelConfig,
    init_personal,
    make_batch,
    personal_goal_rep,
    personal_goal_rep_backward,
)

PAGES = [WebPage.from_title(f"p{i}", f"h{i % 3}.example", f"w{i} w{(i * 7) % 5} x{i % 2}") for i in range(10)]


def _setup(mode="full", finetune=False, scale=8.0, seed=0):
    rng = np.random.default_rng(seed)
    table = GoalEmbeddingTable(range(5), rng.uniform(-0.3, 0.3, (5, 4)))
    est = GoalEstimator(table, EstimatorConfig(d_h=3, d_c=4, host_buckets=16, content_buckets=32, seed=seed))
    for n in est.ps.names():
        est.ps.params[n] *= scale
    cfg = ModelConfig(d_h=3, d_c=4, d_V=4, hidden=5, heads=2, host_buckets=16, content_buckets=32,
                      mode=mode, finetune_estimator=finetune, seed=seed)
    model = GoWebModel(est, cfg, [p.page_id for p in PAGES[:6]])
    for n in model.ps.names():
        model.ps.params[n] *= scale
    return model, Corpus(PAGES, est, cfg)


def test_default_dims():
    cfg = ModelConfig()
    assert (cfg.d_V, cfg.heads, cfg.history_max) == (128, 8, 200)
    table = GoalEmbeddingTable(range(3), np.zeros((3, 64)))
    est = GoalEstimator(table, EstimatorConfig(host_buckets=8, content_buckets=8))
    model = GoWebModel(est, ModelConfig(host_buckets=8, content_buckets=8), ["a"])
    assert model.d_model == 192


def test_mode_validation():
    with pytest.raises(ValueError):
        ModelConfig(mode="other")
    assert not ModelConfig(mode="ablation").goal_aware
    assert ModelConfig(mode="np").goal_aware and not ModelConfig(mode="np").personal


def test_visit_features_concatenate_goal_and_content():
    model, corpus = _setup()
    batch = make_batch(corpus, [["p1", "p4", "p2"]], [[]])
    X, R, _ = model.visit_features(corpus, batch.rows, batch.mask)
    assert X.shape == (1, 3, model.d_G + model.cfg.d_V)
    direct = model.estimator.estimate(corpus.index_g, corpus.rows(["p1", "p4", "p2"]))
    assert np.allclose(X[0, :, :model.d_G], direct)
    assert np.allclose(R[0], direct)


def test_ablation_uses_content_only():
    model, corpus = _setup(mode="ablation")
    assert model.d_model == model.cfg.d_V
    batch = make_batch(corpus, [["p1"]], [[]])
    X, _, _ = model.visit_features(corpus, batch.rows, batch.mask)
    assert X.shape[-1] == model.cfg.d_V
    assert "r_u" not in model.encode(corpus, batch)


def test_empty_session_rejected():
    _, corpus = _setup()
    with pytest.raises(ValueError, match="empty session"):
        make_batch(corpus, [[]], [[]])


def test_gvisit_single_visit_is_linear_transform():
    model, corpus = _setup()
    batch = make_batch(corpus, [["p3"]], [[]])
    X, _, _ = model.visit_features(corpus, batch.rows, batch.mask)
    v, _ = model.gvisit_reps(X, batch.mask)
    assert np.allclose(v[0, 0], X[0, 0] @ model.ps["mha.Wv"] @ model.ps["mha.Wo"])


def test_gvisit_permutation_equivariance():
    model, corpus = _setup()
    order = ["p0", "p5", "p2", "p7", "p9"]
    perm = [3, 0, 4, 1, 2]
    enc = model.encode(corpus, make_batch(corpus, [order], [[]]))
    enc_p = model.encode(corpus, make_batch(corpus, [[order[i] for i in perm]], [[]]))
    assert np.allclose(enc_p["v_p"][0], enc["v_p"][0][perm])
    # the pooled session vector ignores visit order
    assert np.allclose(enc_p["v_s"], enc["v_s"])


def test_gsession_single_and_duplicated_visits():
    model, corpus = _setup()
    one = model.encode(corpus, make_batch(corpus, [["p6"]], [[]]))
    dup = model.encode(corpus, make_batch(corpus, [["p6"] * 4], [[]]))
    X = one["X"][0, 0]
    assert np.allclose(one["v_s"][0], X @ model.ps["pool.Wv"] @ model.ps["pool.Wo"])
    assert np.allclose(dup["v_s"], one["v_s"])


def test_padding_does_not_change_encodings():
    model, corpus = _setup()
    alone = model.encode(corpus, make_batch(corpus, [["p1", "p2"]], [["p3"]]))
    padded = model.encode(corpus, make_batch(corpus, [["p1", "p2"], ["p4", "p5", "p6", "p7"]], [["p3"], ["p8", "p9"]]))
    for key in ("v_s", "r_u"):
        assert np.allclose(padded[key][0], alone[key][0])
    assert np.allclose(padded["v_p"][0, :2], alone["v_p"][0])


def _personal_params(d_G=4, hidden=5, seed=0, scale=5.0):
    ps = nncore.ParamSet()
    init_personal(ps, d_G, hidden, np.random.default_rng(seed))
    for n in ps.names():
        ps.params[n] *= scale
    return ps


def test_single_history_page_is_returned():
    ps = _personal_params()
    rng = np.random.default_rng(1)
    R, H = rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 1, 4))
    r_u, _ = personal_goal_rep(ps, R, np.ones((1, 3), bool), H, np.ones((1, 1), bool))
    assert np.allclose(r_u[0], H[0, 0])


def test_identical_history_returns_common_vector():
    ps = _personal_params()
    rng = np.random.default_rng(2)
    R = rng.normal(size=(1, 3, 4))
    h = rng.normal(size=4)
    H = np.tile(h, (1, 6, 1))
    r_u, _ = personal_goal_rep(ps, R, np.ones((1, 3), bool), H, np.ones((1, 6), bool))
    assert np.allclose(r_u[0], h)


def test_zero_context_vector_gives_uniform_focus():
    ps = _personal_params()
    ps.params["pers.c"][:] = 0.0
    rng = np.random.default_rng(3)
    R, H = rng.normal(size=(1, 4, 4)), rng.normal(size=(1, 5, 4))
    _, cache = personal_goal_rep(ps, R, np.ones((1, 4), bool), H, np.ones((1, 5), bool))
    alpha, r_s = cache[4], cache[5]
    assert np.allclose(alpha, 0.25)
    assert np.allclose(r_s[0], R[0].mean(axis=0))


def test_empty_history_gives_zero_vector():
    ps = _personal_params()
    R = np.random.default_rng(4).normal(size=(2, 3, 4))
    r_u, _ = personal_goal_rep(ps, R, np.ones((2, 3), bool), np.zeros((2, 1, 4)), np.zeros((2, 1), bool))
    assert np.array_equal(r_u, np.zeros((2, 4)))


@settings(max_examples=50)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 10_000))
def test_personal_rep_is_convex_combination_of_history(n, m, seed):
    ps = _personal_params(seed=seed % 7)
    rng = np.random.default_rng(seed)
    R, H = rng.normal(size=(1, n, 4)) * 3, rng.normal(size=(1, m, 4)) * 3
    r_u, cache = personal_goal_rep(ps, R, np.ones((1, n), bool), H, np.ones((1, m), bool))
    alpha, beta = cache[4], cache[6]
    for w in (alpha, beta):
        assert np.all(w >= 0) and np.allclose(w.sum(-1), 1.0)
    assert np.allclose(r_u[0], beta[0] @ H[0])
    assert np.all(r_u[0] <= H[0].max(axis=0) + 1e-12) and np.all(r_u[0] >= H[0].min(axis=0) - 1e-12)


def test_personal_rep_gradient():
    ps = _personal_params()
    rng = np.random.default_rng(5)
    ps.add("R", rng.normal(size=(2, 3, 4)))
    H = rng.normal(size=(2, 4, 4))
    mask = np.array([[1, 1, 1], [1, 0, 0]], bool)
    hmask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], bool)
    proj = rng.normal(size=(2, 4))

    def loss():
        ps.zero_grad()
        r_u, cache = personal_goal_rep(ps, ps["R"], mask, H, hmask)
        ps.acc("R", personal_goal_rep_backward(ps, proj, cache))
        return float(np.sum(r_u * proj))
    assert nncore.grad_check(loss, ps, tolerance=1e-4).passed


@pytest.mark.parametrize("mode", ["full", "np", "ablation"])
def test_end_to_end_gradients_with_finetuned_estimator(mode):
    model, corpus = _setup(mode=mode, finetune=True)
    inst = [tasks.RecInstance("u", "u#1", ("p1", "p2", "p7"), ("p0", "p3"), ("p4", "p8")),
            tasks.RecInstance("v", "v#1", ("p6",), ("p5",), ())]
    for ps in model.param_sets():
        def loss(ps=ps):
            for q in model.param_sets():
                q.zero_grad()
            return tasks.rec_loss_and_grad(model, corpus, inst)
        assert nncore.grad_check(loss, ps, tolerance=1e-4).passed


def test_frozen_estimator_gets_no_gradient():
    model, corpus = _setup()
    inst = [tasks.RecInstance("u", "u#1", ("p1", "p2"), ("p0",), ("p4",))]
    model.estimator.ps.zero_grad()
    tasks.rec_loss_and_grad(model, corpus, inst)
    assert all(not np.any(g) for g in model.estimator.ps.grads.values())
    assert model.param_sets() == [model.ps]


def test_model_checkpoint_round_trip(tmp_path):
    model, corpus = _setup(mode="np")
    model.save(tmp_path / "m.json")
    back = GoWebModel.load(tmp_path / "m.json")
    assert back.cfg == model.cfg and back.candidates == model.candidates
    batch = make_batch(corpus, [["p1", "p2"]], [["p3"]])
    back_corpus = Corpus(PAGES, back.estimator, back.cfg)
    assert np.array_equal(back.encode(back_corpus, batch)["v_s"], model.encode(corpus, batch)["v_s"])
