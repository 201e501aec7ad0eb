import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from goweb import nncore as nn
from goweb.gradsuite import CASES, run_grad_suite


def _dense(d_in, d_out, seed=0):
    ps = nn.ParamSet()
    nn.init_dense(ps, "d", d_in, d_out, np.random.default_rng(seed))
    return ps


def test_linear_identity_and_scalar_case():
    ps = nn.ParamSet()
    ps.add("d.W", np.eye(3))
    ps.add("d.b", np.zeros(3))
    x = np.array([[1.0, -2.0, 0.5]])
    assert np.array_equal(nn.dense_forward(ps, "d", x)[0], x)
    assert nn.linear(np.array([[2.0]]), np.array([[3.0]]), np.array([1.0]))[0, 0] == 7.0


def test_params_initialised_in_range():
    ps = _dense(10, 7)
    assert np.all(np.abs(ps["d.W"]) <= 0.05)
    with pytest.raises(KeyError):
        ps.add("d.W", np.zeros(1))


def test_softmax_examples():
    assert np.allclose(nn.softmax_rows(np.array([[0.0, 0.0]])), [[0.5, 0.5]])
    x = np.random.default_rng(0).normal(size=(3, 5))
    assert np.allclose(nn.softmax_rows(x), nn.softmax_rows(x + 17.0))
    masked = nn.softmax_rows(np.array([[1.0, 2.0, 3.0]]), np.array([[True, False, True]]))
    assert masked[0, 1] == 0 and masked.sum() == pytest.approx(1.0)
    assert np.array_equal(nn.softmax_rows(np.ones((1, 3)), np.zeros((1, 3), bool)), np.zeros((1, 3)))


@given(arrays(np.float64, (2, 4), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    p = nn.softmax_rows(x)
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=1), 1.0)


def test_softmax_backward_matches_finite_differences():
    rng = np.random.default_rng(1)
    x, proj = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    ana = nn.softmax_backward(proj, nn.softmax_rows(x))
    h = 1e-6
    num = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        e = e.reshape(x.shape)
        num.flat[i] = (np.sum(nn.softmax_rows(x + e) * proj) - np.sum(nn.softmax_rows(x - e) * proj)) / (2 * h)
    assert np.max(np.abs(ana - num)) / np.max(np.abs(num)) < 1e-5


def test_cross_entropy_examples():
    assert nn.cross_entropy(np.array([1.0, 0.0, 0.0]), 0) == 0.0
    assert nn.cross_entropy(np.full(4, 0.25), 2) == pytest.approx(math.log(4))
    with pytest.raises(IndexError):
        nn.cross_entropy(np.full(4, 0.25), 4)


def test_softmax_ce_gradient_is_probs_minus_onehot():
    logits = np.array([[0.3, -1.2, 2.0]])
    target = np.array([[0.0, 1.0, 0.0]])
    loss, grad = nn.softmax_cross_entropy(logits, target)
    p = nn.softmax_rows(logits)
    assert loss == pytest.approx(-math.log(p[0, 1]))
    assert np.allclose(grad, p - target)


def test_bce_matches_direct_formula():
    logits = np.array([[2.0, -1.0, 0.3]])
    labels = np.array([[1.0, 0.0, 1.0]])
    mask = np.array([[1, 1, 0]], dtype=bool)
    loss, grad = nn.bce_with_logits(logits, labels, mask)
    s = 1 / (1 + np.exp(-logits))
    direct = -(math.log(s[0, 0]) + math.log(1 - s[0, 1])) / 2
    assert loss == pytest.approx(direct)
    assert grad[0, 2] == 0.0
    assert np.allclose(nn.sigmoid(np.array([-800.0, 0.0, 800.0])), [0.0, 0.5, 1.0])


def _mha(d=8, k=2, seed=0, scale=1.0):
    ps = nn.ParamSet()
    nn.init_mha(ps, "m", d, k, np.random.default_rng(seed))
    for n in ps.names():
        ps.params[n] *= scale
    return ps


def test_mha_single_row_is_value_output_transform():
    ps = _mha(scale=10)
    x = np.random.default_rng(1).normal(size=(1, 8))
    out, _ = nn.multi_head_attention(ps, "m", x, 2)
    assert np.allclose(out, x @ ps["m.Wv"] @ ps["m.Wo"])


def test_mha_is_permutation_equivariant():
    ps = _mha(scale=10)
    rng = np.random.default_rng(2)
    X = rng.normal(size=(5, 8))
    perm = rng.permutation(5)
    out, _ = nn.multi_head_attention(ps, "m", X, 2)
    out_p, _ = nn.multi_head_attention(ps, "m", X[perm], 2)
    assert np.allclose(out_p, out[perm])


def test_mha_weights_sum_to_one_and_respect_mask():
    ps = _mha(scale=10)
    X = np.random.default_rng(3).normal(size=(2, 4, 8))
    mask = np.array([[1, 1, 1, 0], [1, 1, 0, 0]], dtype=bool)
    out, cache = nn.multi_head_attention(ps, "m", X, 2, mask)
    A = cache[5]
    assert np.allclose(A.sum(-1), 1.0)
    assert np.all(A[0, :, :, 3] == 0) and np.all(A[1, :, :, 2:] == 0)
    assert np.all(out[1, 2:] == 0)
    # padding content must not leak into valid rows
    X2 = X.copy()
    X2[0, 3] += 100
    assert np.allclose(nn.multi_head_attention(ps, "m", X2, 2, mask)[0][0, :3], out[0, :3])


def test_mha_rejects_bad_head_count():
    with pytest.raises(ValueError):
        _mha(d=6, k=4)


def _pool(d=8, k=2, seed=0, scale=10.0):
    ps = nn.ParamSet()
    nn.init_context_pool(ps, "p", d, k, np.random.default_rng(seed))
    for n in ps.names():
        ps.params[n] *= scale
    return ps


def test_pool_single_and_identical_rows():
    ps = _pool()
    x = np.random.default_rng(4).normal(size=(1, 8))
    expected = x[0] @ ps["p.Wv"] @ ps["p.Wo"]
    assert np.allclose(nn.context_attention_pool(ps, "p", x, 2)[0], expected)
    assert np.allclose(nn.context_attention_pool(ps, "p", np.repeat(x, 4, axis=0), 2)[0], expected)


def test_pool_rejects_empty_session():
    ps = _pool()
    with pytest.raises(ValueError):
        nn.context_attention_pool(ps, "p", np.zeros((1, 3, 8)), 2, np.zeros((1, 3), bool))


def test_adam_zero_gradient_leaves_params():
    ps = _dense(3, 2)
    before = ps["d.W"].copy()
    nn.Adam(nn.AdamConfig(lr=0.1)).step(ps)
    assert np.array_equal(ps["d.W"], before)


def test_adam_first_step_hand_evaluation():
    ps = nn.ParamSet()
    ps.add("w", np.array([1.0, -2.0, 0.5]))
    g = np.array([0.3, -4.0, 1e-9])
    ps.acc("w", g)
    cfg = nn.AdamConfig(lr=0.01)
    nn.Adam(cfg).step(ps)
    # at t=1 the bias-corrected moments are g and g^2
    expected = np.array([1.0, -2.0, 0.5]) - cfg.lr * g / (np.abs(g) + cfg.eps)
    assert np.allclose(ps["w"], expected, rtol=0, atol=1e-15)
    assert np.all(ps.grads["w"] == 0)


def test_adam_frozen_and_deterministic():
    def run():
        ps = _dense(4, 3, seed=7)
        opt = nn.Adam(nn.AdamConfig(lr=0.05), frozen={"d.b"})
        rng = np.random.default_rng(0)
        for _ in range(5):
            ps.acc("d.W", rng.normal(size=(4, 3)))
            ps.acc("d.b", rng.normal(size=3))
            opt.step(ps)
        return ps
    a, b = run(), run()
    assert np.array_equal(a["d.W"], b["d.W"])
    assert np.array_equal(a["d.b"], _dense(4, 3, seed=7)["d.b"])


def test_adam_config_defaults_and_validation():
    cfg = nn.AdamConfig()
    assert (cfg.lr, cfg.beta1, cfg.beta2, cfg.eps) == (1e-5, 0.9, 0.999, 1e-8)
    with pytest.raises(ValueError):
        nn.AdamConfig(beta1=1.0)
    with pytest.raises(ValueError):
        nn.AdamConfig(lr=0)


def test_grad_check_linear_passes_at_tighter_tolerance():
    loss, ps = CASES["linear"](np.random.default_rng(0))
    assert nn.grad_check(loss, ps, tolerance=1e-5).passed


def test_grad_check_detects_injected_fault():
    loss, ps = CASES["linear"](np.random.default_rng(0))
    loss()
    corrupted = ps.grads["lin.W"] * 1.1
    report = nn.grad_check(loss, ps, tolerance=1e-4, analytic={"lin.W": corrupted})
    assert not report.passed
    assert report.per_param["lin.W"] > 0.05


@pytest.mark.parametrize("name", sorted(CASES))
def test_every_path_passes_grad_check(name):
    for seed in (0, 1):
        loss, ps = CASES[name](np.random.default_rng(seed))
        report = nn.grad_check(loss, ps, tolerance=1e-4, seed=seed)
        assert report.passed, (name, report.per_param)


def test_grad_suite_runs_all_cases():
    assert set(run_grad_suite(0)) == set(CASES)


@settings(max_examples=20)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-1e300, 1e300, allow_nan=False)))
def test_checkpoint_round_trip_is_exact(tmp_path_factory, arr):
    ps = nn.ParamSet()
    ps.add("a", arr)
    ps.add("b.c", np.arange(3.0))
    path = tmp_path_factory.mktemp("ck") / "ck.json"
    nn.save_checkpoint(path, ps, {"k": 1}, {"note": "x"})
    back, config, extra = nn.load_checkpoint(path)
    assert np.array_equal(back["a"], arr) and np.array_equal(back["b.c"], np.arange(3.0))
    assert config == {"k": 1} and extra == {"note": "x"}


def test_checkpoint_bytes_are_deterministic(tmp_path):
    ps = _dense(3, 2)
    nn.save_checkpoint(tmp_path / "a.json", ps, {"x": [1, 2]})
    nn.save_checkpoint(tmp_path / "b.json", ps.copy(), {"x": [1, 2]})
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
