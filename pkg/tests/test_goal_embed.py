import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from goweb import manifold
from goweb.goal_embed import (
    GoalEmbeddingTable,
    ReconTrainConfig,
    _batch_loss_and_grad,
    evaluate_reconstruction,
    hierarchy_norm_profile,
    init_embeddings,
    reconstruction_loss,
    train_goal_embeddings,
)
from goweb.taxonomy import ClosureRelation, build_taxonomy, closure_pairs, example_taxonomy


def _direct_loss(u, v, negs):
    """Oracle written from the formula with plain math, no numpy vectorisation."""
    def d(a, b):
        sq = sum((x - y) ** 2 for x, y in zip(a, b))
        na, nb = sum(x * x for x in a), sum(x * x for x in b)
        return math.acosh(1 + 2 * sq / ((1 - na) * (1 - nb)))
    num = math.exp(-d(u, v))
    den = num + sum(math.exp(-d(u, n)) for n in negs)
    return -math.log(num / den)


def test_init_is_bounded_and_seeded():
    t = example_taxonomy()
    cfg = ReconTrainConfig(dim=8, seed=4)
    a, b = init_embeddings(t, cfg), init_embeddings(t, cfg)
    assert a == b
    assert np.all(np.linalg.norm(a.coords, axis=1) <= cfg.init_scale * math.sqrt(8))
    assert init_embeddings(t, ReconTrainConfig(dim=8, seed=5)) != a


def test_config_validation():
    with pytest.raises(ValueError):
        ReconTrainConfig(negatives_per_positive=0)
    with pytest.raises(ValueError):
        ReconTrainConfig(lr_rsgd=0.0)
    cfg = ReconTrainConfig()
    assert (cfg.negatives_per_positive, cfg.lr_rsgd, cfg.init_scale) == (50, 0.3, 1e-3)


def test_loss_equidistant_negative_is_ln2():
    table = GoalEmbeddingTable([0, 1, 2], [[0.0, 0.0], [0.3, 0.0], [0.0, -0.3]])
    assert reconstruction_loss((0, 1), [2], table) == pytest.approx(math.log(2), abs=1e-12)


def test_loss_without_negatives_is_zero():
    table = GoalEmbeddingTable([0, 1], [[0.1, 0.0], [0.3, 0.2]])
    assert reconstruction_loss((0, 1), [], table) == pytest.approx(0.0, abs=1e-12)


def test_loss_matches_direct_oracle():
    rng = np.random.default_rng(2)
    coords = rng.uniform(-0.5, 0.5, (8, 3))
    table = GoalEmbeddingTable(range(8), coords)
    negs = [2, 3, 5, 5, 7]
    expected = _direct_loss(coords[0], coords[1], [coords[n] for n in negs])
    assert reconstruction_loss((0, 1), negs, table) == pytest.approx(expected, abs=1e-10)


def test_batch_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    coords = rng.uniform(-0.4, 0.4, (6, 3))
    u_idx = np.array([0, 2])
    t_idx = np.array([[1, 3, 4, 4], [5, 0, 1, 0]])
    t_mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=bool)
    _, grad = _batch_loss_and_grad(coords, u_idx, t_idx, t_mask)
    h = 1e-6
    num = np.zeros_like(coords)
    for i in range(coords.size):
        e = np.zeros(coords.size)
        e[i] = h
        up = _batch_loss_and_grad(coords + e.reshape(coords.shape), u_idx, t_idx, t_mask)[0].sum()
        down = _batch_loss_and_grad(coords - e.reshape(coords.shape), u_idx, t_idx, t_mask)[0].sum()
        num.flat[i] = (up - down) / (2 * h)
    assert np.allclose(grad, num, rtol=1e-6, atol=1e-8)


@pytest.fixture(scope="module")
def trained():
    t = example_taxonomy()
    history = []
    table = train_goal_embeddings(t, ReconTrainConfig(dim=5, epochs=50, seed=1), history)
    return t, table, history


def test_training_reduces_loss_and_respects_ball(trained):
    _, table, history = trained
    assert len(history) == 50
    assert history[-1] < history[0]
    assert np.all(np.linalg.norm(table.coords, axis=1) <= 1 - manifold.BALL_EPS + 1e-12)


def test_training_is_bitwise_deterministic(trained):
    t, table, _ = trained
    again = train_goal_embeddings(t, ReconTrainConfig(dim=5, epochs=50, seed=1))
    assert again == table


def test_trained_beats_random_table(trained):
    t, table, _ = trained
    rel = closure_pairs(t)
    random_table = init_embeddings(t, ReconTrainConfig(dim=5, seed=1))
    assert evaluate_reconstruction(table, rel)["mean_rank"] < evaluate_reconstruction(random_table, rel)["mean_rank"]


def test_perfectly_separated_table_scores_one():
    rel = ClosureRelation(frozenset({(0, 1), (2, 3)}), (0, 1, 2, 3))
    table = GoalEmbeddingTable([0, 1, 2, 3], [[0.5, 0.0], [0.5, 0.001], [-0.5, 0.0], [-0.5, 0.001]])
    assert evaluate_reconstruction(table, rel) == {"mean_rank": 1.0, "map": 1.0}


def _chance_map(rel, n_perm, rng):
    """Permutation oracle: expected AP when every anchor ranks the others at random."""
    aps = []
    for g in rel.goals:
        nb = rel.neighbours.get(g, frozenset())
        if not nb:
            continue
        others = [x for x in rel.goals if x != g]
        is_rel = np.array([x in nb for x in others])
        vals = []
        for _ in range(n_perm):
            hits = is_rel[rng.permutation(len(others))]
            pos = np.flatnonzero(hits) + 1
            vals.append(np.mean(np.arange(1, len(pos) + 1) / pos))
        aps.append(np.mean(vals))
    return float(np.mean(aps))


def test_random_table_map_is_near_chance():
    t = example_taxonomy()
    rel = closure_pairs(t)
    chance = _chance_map(rel, 400, np.random.default_rng(0))
    maps = [evaluate_reconstruction(init_embeddings(t, ReconTrainConfig(dim=64, seed=s)), rel)["map"]
            for s in range(40)]
    assert abs(np.mean(maps) - chance) < 0.03


@settings(max_examples=30)
@given(st.lists(st.lists(st.floats(-0.5, 0.5, allow_nan=False), min_size=3, max_size=3), min_size=1, max_size=6))
def test_table_file_round_trip(tmp_path_factory, rows):
    table = GoalEmbeddingTable(range(len(rows)), np.array(rows))
    path = tmp_path_factory.mktemp("tbl") / "goals.tsv"
    table.save(path)
    assert GoalEmbeddingTable.load(path) == table


def test_table_rejects_points_outside_ball():
    with pytest.raises(manifold.BallInvariantError):
        GoalEmbeddingTable([0], [[1.0, 0.0]])


def test_norm_profile_examples():
    t = example_taxonomy()
    zeros = GoalEmbeddingTable(t.ids, np.zeros((len(t.ids), 3)))
    assert hierarchy_norm_profile(zeros, t) == {"root": 0.0, "category": 0.0, "leaf": 0.0}
    single = build_taxonomy([{"id": 0, "name": "non-goal", "layer": 0}], [])
    prof = hierarchy_norm_profile(GoalEmbeddingTable([0], [[0.3, 0.4]]), single)
    assert prof == {"root": pytest.approx(0.5)}
