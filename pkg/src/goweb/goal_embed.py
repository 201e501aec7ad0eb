"""Intrinsic goal representations learned by reconstruction in the Poincare ball."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import manifold
from .taxonomy import (
    CATEGORY,
    LEAF,
    ROOT,
    ClosureRelation,
    EmptyNegativePoolError,
    GoalTaxonomy,
    closure_pairs,
    sample_negatives,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReconTrainConfig:
    dim: int = 64
    epochs: int = 50
    batch_size: int = 10
    negatives_per_positive: int = 50
    lr_rsgd: float = 0.3
    init_scale: float = 1e-3
    eps_ball: float = manifold.BALL_EPS
    seed: int = 0

    def __post_init__(self):
        for name in ("dim", "epochs", "batch_size", "negatives_per_positive"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr_rsgd <= 0 or self.init_scale <= 0:
            raise ValueError("lr_rsgd and init_scale must be positive")


class GoalEmbeddingTable:
    """Goal id -> ball point, stored as one (n_goals, dim) array in id order."""

    def __init__(self, ids, coords):
        self.ids = tuple(int(i) for i in ids)
        self.coords = np.asarray(coords, dtype=float)
        if self.coords.shape[0] != len(self.ids):
            raise ValueError("one row per goal id is required")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate goal ids")
        manifold.check_in_ball(self.coords)
        self.index = {g: i for i, g in enumerate(self.ids)}

    @property
    def dim(self) -> int:
        return self.coords.shape[1]

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, gid: int) -> np.ndarray:
        return self.coords[self.index[gid]]

    def __eq__(self, other):
        return (
            isinstance(other, GoalEmbeddingTable)
            and self.ids == other.ids
            and np.array_equal(self.coords, other.coords)
        )

    def save(self, path) -> None:
        lines = [
            f"{g}\t" + ",".join(format(float(x), ".17g") for x in row)
            for g, row in zip(self.ids, self.coords)
        ]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "GoalEmbeddingTable":
        ids, rows = [], []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            gid, coords = line.split("\t")
            ids.append(int(gid))
            rows.append([float(x) for x in coords.split(",")])
        return cls(ids, np.array(rows))


def init_embeddings(t: GoalTaxonomy, cfg: ReconTrainConfig) -> GoalEmbeddingTable:
    rng = np.random.default_rng(cfg.seed)
    ids = t.ids
    coords = rng.uniform(-cfg.init_scale, cfg.init_scale, size=(len(ids), cfg.dim))
    return GoalEmbeddingTable(ids, coords)


def reconstruction_loss(pair, negatives, table: GoalEmbeddingTable) -> float:
    """-log softmax over {positive} + negatives of negated Poincare distances."""
    g_u, g_v = pair
    u = table[g_u]
    targets = np.stack([table[g_v]] + [table[n] for n in negatives])
    d = manifold.poincare_distance(u[None, :], targets)
    return float(d[0] + logsumexp(-d))


def _batch_loss_and_grad(coords, u_idx, t_idx, t_mask):
    """Loss per pair and Euclidean gradients for a padded batch.

    ``t_idx[:, 0]`` holds the positive, later columns the negatives;
    ``t_mask`` flags the valid columns.
    """
    u = coords[u_idx][:, None, :]
    t = coords[t_idx]
    d = manifold.poincare_distance(np.broadcast_to(u, t.shape), t)
    neg_d = np.where(t_mask, -d, -np.inf)
    lse = logsumexp(neg_d, axis=1)
    loss = d[:, 0] + lse
    p = np.where(t_mask, np.exp(neg_d - lse[:, None]), 0.0)
    dl_dd = -p
    dl_dd[:, 0] += 1.0
    ub = np.broadcast_to(u, t.shape)
    gu = manifold._distance_grad_unchecked(ub, t)
    gt = manifold._distance_grad_unchecked(t, ub)
    grad = np.zeros_like(coords)
    np.add.at(grad, u_idx, np.sum(dl_dd[..., None] * gu, axis=1))
    np.add.at(grad, t_idx.ravel(), (dl_dd[..., None] * gt).reshape(-1, coords.shape[1]))
    return loss, grad


def train_goal_embeddings(t: GoalTaxonomy, cfg: ReconTrainConfig, history: list | None = None):
    """RSGD over shuffled ordered closure pairs; returns the trained table.

    Per-epoch mean losses are appended to ``history`` when given.
    """
    relation = closure_pairs(t)
    table = init_embeddings(t, cfg)
    coords = table.coords.copy()
    index = table.index
    rng = np.random.default_rng(cfg.seed + 1)
    pairs = np.array([(index[a], index[b]) for a, b in relation.ordered_pairs()], dtype=int)
    ids = table.ids
    m = cfg.negatives_per_positive
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = pairs[order[start:start + cfg.batch_size]]
            t_idx = np.zeros((len(batch), 1 + m), dtype=int)
            t_mask = np.zeros((len(batch), 1 + m), dtype=bool)
            for row, (ui, vi) in enumerate(batch):
                t_idx[row, 0] = vi
                t_mask[row, 0] = True
                try:
                    negs = sample_negatives(ids[ui], m, relation, rng)
                except EmptyNegativePoolError:
                    continue
                t_idx[row, 1:] = [index[g] for g in negs]
                t_mask[row, 1:] = True
            loss, grad = _batch_loss_and_grad(coords, batch[:, 0], t_idx, t_mask)
            touched = np.unique(np.concatenate([batch[:, 0], t_idx[t_mask]]))
            coords[touched] = manifold.rsgd_step(coords[touched], grad[touched], cfg.lr_rsgd, cfg.eps_ball)
            losses.extend(loss.tolist())
        mean_loss = float(np.mean(losses))
        log.debug("recon epoch %d mean loss %.6f", epoch + 1, mean_loss)
        if history is not None:
            history.append(mean_loss)
    return GoalEmbeddingTable(ids, coords)


def evaluate_reconstruction(table: GoalEmbeddingTable, relation: ClosureRelation) -> dict:
    """Mean rank of each true partner among non-related goals, and MAP.

    Ranks count the partner against non-related goals only; average
    precision ranks every other goal of the anchor by distance.
    """
    ranks, aps = [], []
    for g in relation.goals:
        rel = relation.neighbours.get(g, frozenset())
        if not rel:
            continue
        others = [x for x in relation.goals if x != g]
        dist = manifold.poincare_distance(table[g][None, :], np.stack([table[x] for x in others]))
        is_rel = np.array([x in rel for x in others])
        neg_d = dist[~is_rel]
        for d_pos in dist[is_rel]:
            ranks.append(1 + int(np.sum(neg_d < d_pos)))
        order = np.argsort(dist, kind="stable")
        hits = is_rel[order]
        positions = np.flatnonzero(hits) + 1
        aps.append(float(np.mean(np.arange(1, len(positions) + 1) / positions)))
    return {"mean_rank": float(np.mean(ranks)), "map": float(np.mean(aps))}


def hierarchy_norm_profile(table: GoalEmbeddingTable, t: GoalTaxonomy) -> dict[str, float]:
    names = {ROOT: "root", CATEGORY: "category", LEAF: "leaf"}
    out = {}
    for layer, label in names.items():
        ids = t.layer_ids(layer)
        if ids:
            out[label] = float(np.mean([np.linalg.norm(table[g]) for g in ids]))
    return out
