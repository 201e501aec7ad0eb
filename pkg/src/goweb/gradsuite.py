"""Finite-difference checks over every differentiable path of the model."""

from __future__ import annotations

import numpy as np

from . import manifold, nncore, tasks
from .goal_embed import GoalEmbeddingTable
from .nncore import ParamSet
from .page_encoder import EstimatorConfig, GoalEstimator, WebPage
from .session_model import Corpus, GoWebModel, ModelConfig


def _distance_case(rng):
    ps = ParamSet()
    ps.add("u", rng.uniform(-0.4, 0.4, 5))
    ps.add("v", rng.uniform(-0.4, 0.4, 5))

    def loss():
        ps.zero_grad()
        ps.acc("u", manifold.distance_gradient(ps["u"], ps["v"]))
        ps.acc("v", manifold.distance_gradient(ps["v"], ps["u"]))
        return float(manifold.poincare_distance(ps["u"], ps["v"]))
    return loss, ps


def _linear_case(rng):
    ps = ParamSet()
    nncore.init_dense(ps, "lin", 6, 4, rng)
    ps.add("x", rng.normal(size=(3, 6)))
    proj = rng.normal(size=(3, 4))

    def loss():
        ps.zero_grad()
        y, cache = nncore.dense_forward(ps, "lin", ps["x"])
        ps.acc("x", nncore.dense_backward(ps, "lin", proj, cache))
        return float(np.sum(y * proj))
    return loss, ps


def _softmax_ce_case(rng):
    ps = ParamSet()
    nncore.init_dense(ps, "cls", 5, 7, rng)
    ps.add("x", rng.normal(size=(4, 5)))
    target = np.zeros((4, 7))
    target[np.arange(4), [0, 3, 6, 2]] = 1.0
    target[1, [1, 5]] = 0.5  # one multi-positive row
    target[1, 3] = 0.0

    def loss():
        ps.zero_grad()
        logits, cache = nncore.dense_forward(ps, "cls", ps["x"], act="tanh")
        value, dlogits = nncore.softmax_cross_entropy(logits * 3.0, target)
        ps.acc("x", nncore.dense_backward(ps, "cls", dlogits * 3.0, cache))
        return value
    return loss, ps


def _attention_case(rng, pooled: bool):
    ps = ParamSet()
    d, k = 8, 2
    if pooled:
        nncore.init_context_pool(ps, "att", d, k, rng)
    else:
        nncore.init_mha(ps, "att", d, k, rng)
    for n in ps.names():
        ps.params[n] *= 10.0  # leave the near-linear regime
    ps.add("X", rng.normal(size=(2, 4, d)))
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=bool)
    fwd = nncore.context_attention_pool if pooled else nncore.multi_head_attention
    bwd = nncore.context_attention_pool_backward if pooled else nncore.multi_head_attention_backward
    proj = rng.normal(size=(2, d) if pooled else (2, 4, d))

    def loss():
        ps.zero_grad()
        out, cache = fwd(ps, "att", ps["X"], k, mask)
        ps.acc("X", bwd(ps, "att", proj, cache))
        return float(np.sum(out * proj))
    return loss, ps


def _tiny_model(rng, mode: str = "full"):
    ids = list(range(5))
    table = GoalEmbeddingTable(ids, rng.uniform(-0.3, 0.3, (5, 4)))
    ecfg = EstimatorConfig(d_h=3, d_c=4, host_buckets=16, content_buckets=32)
    est = GoalEstimator(table, ecfg)
    pages = [WebPage.from_title(f"p{i}", f"h{i % 3}.example", f"w{i} w{(i * 7) % 5} x{i % 2}") for i in range(9)]
    mcfg = ModelConfig(d_h=3, d_c=4, d_V=4, hidden=5, heads=2, host_buckets=16, content_buckets=32, mode=mode)
    cands = [f"p{i}" for i in range(6)]
    model = GoWebModel(est, mcfg, cands)
    for n in model.ps.names():
        model.ps.params[n] *= 8.0
    return model, Corpus(pages, est, mcfg)


def _rec_case(rng):
    model, corpus = _tiny_model(rng)
    inst = [tasks.RecInstance("u", "u#1", ("p1", "p2", "p7"), ("p0", "p3"), ("p4", "p5", "p8")),
            tasks.RecInstance("v", "v#1", ("p6",), ("p5",), ())]

    def loss():
        model.ps.zero_grad()
        return tasks.rec_loss_and_grad(model, corpus, inst)
    return loss, model.ps


def _rev_case(rng):
    model, corpus = _tiny_model(rng)
    inst = [tasks.RevisitInstance("u", "u#1", ("p1", "p2", "p7", "p1"), (True, False, True, True), ("p4", "p3")),
            tasks.RevisitInstance("v", "v#1", ("p6", "p0"), (False, True), ())]

    def loss():
        model.ps.zero_grad()
        return tasks.rev_loss_and_grad(model, corpus, inst)
    return loss, model.ps


def _estimator_case(rng):
    model, corpus = _tiny_model(rng)
    est = model.estimator
    for n in est.ps.names():
        est.ps.params[n] *= 8.0
    rows = np.arange(6)
    labels = np.array([0, 1, 2, 3, 4, 0])

    def loss():
        est.ps.zero_grad()
        return est.loss_and_grad(corpus.index_g, rows, labels)
    return loss, est.ps


CASES = {
    "distance": _distance_case,
    "linear": _linear_case,
    "softmax_ce": _softmax_ce_case,
    "multi_head_attention": lambda rng: _attention_case(rng, pooled=False),
    "context_pooling": lambda rng: _attention_case(rng, pooled=True),
    "estimator": _estimator_case,
    "rec_head": _rec_case,
    "rev_head": _rev_case,
}


def run_grad_suite(seed: int = 0, tolerance: float = 1e-4, max_coords: int = 12) -> dict[str, nncore.GradCheckReport]:
    out = {}
    for name, make in CASES.items():
        loss, ps = make(np.random.default_rng(seed))
        out[name] = nncore.grad_check(loss, ps, tolerance=tolerance, max_coords=max_coords, seed=seed)
    return out
