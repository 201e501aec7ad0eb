"""Recommendation, revisitation and goal-based grouping on top of GoWebModel."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import nncore
from .metrics import ClsMetricsReport, RankMetricsReport, classification_metrics, mean_rank_metrics, rank_metrics
from .nncore import AdamConfig
from .session_model import Batch, Corpus, GoWebModel, make_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    adam: AdamConfig = field(default_factory=AdamConfig)
    seed: int = 0


# -- candidates & instances --------------------------------------------------------

def page_frequencies(sessions) -> Counter:
    return Counter(v.page.page_id for s in sessions for v in s.visits)


def build_candidate_set(freqs, p_pop: int, k_cand: int) -> list[str]:
    """Skip the ``p_pop`` most frequent pages and keep the next ``k_cand``; ties by page id."""
    ranked = sorted(freqs.items(), key=lambda kv: (-kv[1], kv[0]))
    return [p for p, _ in ranked[p_pop:p_pop + k_cand]]


def split_half(pages):
    """First ceil(n/2) visits are observed, the rest are the future."""
    cut = math.ceil(len(pages) / 2)
    return list(pages[:cut]), list(pages[cut:])


@dataclass(frozen=True)
class RecInstance:
    user_id: str
    session_id: str
    observed: tuple[str, ...]
    truth: tuple[str, ...]
    history: tuple[str, ...] = ()


@dataclass(frozen=True)
class RevisitInstance:
    user_id: str
    session_id: str
    pages: tuple[str, ...]
    labels: tuple[bool, ...]
    history: tuple[str, ...] = ()


def session_histories(sessions, history_max: int = 200, known=None) -> dict[str, tuple[str, ...]]:
    """Per session: distinct pages of the user's earlier sessions, most recent first.

    ``known`` restricts which sessions may contribute history (e.g. only
    the training period); by default every earlier session counts.
    """
    by_user: dict[str, list] = {}
    for s in sorted(sessions, key=lambda s: (s.user_id, s.start)):
        by_user.setdefault(s.user_id, []).append(s)
    out = {}
    for user_sessions in by_user.values():
        recent: dict[str, float] = {}
        for s in user_sessions:
            ordered = sorted(recent.items(), key=lambda kv: (-kv[1], kv[0]))
            out[s.session_id] = tuple(p for p, _ in ordered[:history_max])
            if known is None or s.session_id in known:
                for v in s.visits:
                    recent[v.page.page_id] = v.ts
    return out


def build_rec_instances(sessions, candidates, histories=None) -> list[RecInstance]:
    cand = set(candidates)
    out = []
    for s in sessions:
        observed, future = split_half(s.page_ids)
        truth = sorted({p for p in future if p in cand})
        if not observed or not truth:
            continue
        hist = histories.get(s.session_id, ()) if histories else ()
        out.append(RecInstance(s.user_id, s.session_id, tuple(observed), tuple(truth), hist))
    return out


def derive_revisit_labels(user_sessions) -> list[RevisitInstance]:
    """Label each visit True iff its page shows up in a strictly later session."""
    later: set[str] = set()
    out = []
    for s in reversed(list(user_sessions)):
        pages = tuple(s.page_ids)
        out.append(RevisitInstance(s.user_id, s.session_id, pages, tuple(p in later for p in pages)))
        later.update(pages)
    return out[::-1]


def with_history(instances, histories):
    from dataclasses import replace
    return [replace(i, history=histories.get(i.session_id, ())) for i in instances]


def _batches(n: int, size: int, rng=None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for s in range(0, n, size):
        yield order[s:s + size]


# -- recommendation -------------------------------------------------------------------

def _rec_forward(model: GoWebModel, corpus: Corpus, batch: Batch):
    X, R, fcache = model.visit_features(corpus, batch.rows, batch.mask)
    v_s, pcache = model.gsession_rep(X, batch.mask)
    parts, ucache = [v_s], None
    if model.cfg.personal:
        r_u, ucache = model.personal(R, batch.mask, model.history_reps(corpus, batch), batch.hist_mask)
        parts.append(r_u)
    h, hcache = nncore.dense_forward(model.ps, "rec.hidden", np.concatenate(parts, axis=-1), act="tanh")
    logits, ocache = nncore.dense_forward(model.ps, "rec.out", h)
    return logits, (fcache, pcache, ucache, hcache, ocache)


def _rec_backward(model: GoWebModel, corpus: Corpus, dlogits, cache):
    fcache, pcache, ucache, hcache, ocache = cache
    dh = nncore.dense_backward(model.ps, "rec.out", dlogits, ocache)
    dz = nncore.dense_backward(model.ps, "rec.hidden", dh, hcache)
    dX = nncore.context_attention_pool_backward(model.ps, "pool", dz[:, :model.d_model], pcache)
    dR = None
    if ucache is not None:
        from .session_model import personal_goal_rep_backward
        dR = personal_goal_rep_backward(model.ps, dz[:, model.d_model:], ucache)
    model.visit_features_backward(corpus, dX, dR, fcache)


def rec_batch(corpus: Corpus, instances) -> Batch:
    return make_batch(corpus, [i.observed for i in instances], [i.history for i in instances])


def rec_loss_and_grad(model: GoWebModel, corpus: Corpus, instances) -> float:
    """Mean over instances of the average cross-entropy of each true future page."""
    batch = rec_batch(corpus, instances)
    logits, cache = _rec_forward(model, corpus, batch)
    target = np.zeros_like(logits)
    for b, inst in enumerate(instances):
        pos = [model.cand_pos[p] for p in inst.truth]
        target[b, pos] = 1.0 / len(pos)
    loss, dlogits = nncore.softmax_cross_entropy(logits, target)
    _rec_backward(model, corpus, dlogits, cache)
    return loss


def recommend_scores(instance: RecInstance, model: GoWebModel, corpus: Corpus) -> np.ndarray:
    if not instance.observed:
        raise ValueError("recommendation needs a nonempty observed half")
    return recommend_scores_batch([instance], model, corpus)[0]


def recommend_scores_batch(instances, model: GoWebModel, corpus: Corpus) -> np.ndarray:
    logits, _ = _rec_forward(model, corpus, rec_batch(corpus, instances))
    return logits


def _id_rank(candidates) -> np.ndarray:
    rank = np.empty(len(candidates), dtype=int)
    rank[sorted(range(len(candidates)), key=lambda i: candidates[i])] = np.arange(len(candidates))
    return rank


def rank_candidates(scores, candidates, id_rank=None) -> list[str]:
    """Descending score, ties broken by page id."""
    if id_rank is None:
        id_rank = _id_rank(candidates)
    order = np.lexsort((id_rank, -np.asarray(scores)))
    return [candidates[i] for i in order]


def train_recommender(model: GoWebModel, corpus: Corpus, instances, cfg: TrainConfig, history=None):
    instances = list(instances)
    rng = np.random.default_rng(cfg.seed)
    opts = [nncore.Adam(cfg.adam) for _ in model.param_sets()]
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in _batches(len(instances), cfg.batch_size, rng):
            chunk = [instances[i] for i in idx]
            total += rec_loss_and_grad(model, corpus, chunk) * len(chunk)
            for opt, ps in zip(opts, model.param_sets()):
                opt.step(ps)
        mean = total / max(len(instances), 1)
        log.info("rec epoch %d loss %.5f", epoch + 1, mean)
        if history is not None:
            history.append(mean)
    if model.cfg.finetune_estimator:
        corpus.refresh()
    return model


def evaluate_recommender(model: GoWebModel, corpus: Corpus, instances, batch_size: int = 128) -> RankMetricsReport:
    reports = []
    instances = list(instances)
    id_rank = _id_rank(model.candidates)
    for idx in _batches(len(instances), batch_size):
        chunk = [instances[i] for i in idx]
        for inst, scores in zip(chunk, recommend_scores_batch(chunk, model, corpus)):
            ranking = rank_candidates(scores, model.candidates, id_rank)
            reports.append(rank_metrics(ranking, inst.truth))
    return mean_rank_metrics(reports)


# -- revisitation ------------------------------------------------------------------------

def _rev_forward(model: GoWebModel, corpus: Corpus, batch: Batch):
    X, R, fcache = model.visit_features(corpus, batch.rows, batch.mask)
    V, mcache = model.gvisit_reps(X, batch.mask)
    parts, ucache = [V], None
    if model.cfg.personal:
        r_u, ucache = model.personal(R, batch.mask, model.history_reps(corpus, batch), batch.hist_mask)
        parts.append(np.broadcast_to(r_u[:, None, :], V.shape[:2] + (r_u.shape[-1],)))
    h, hcache = nncore.dense_forward(model.ps, "rev.hidden", np.concatenate(parts, axis=-1), act="tanh")
    logit, ocache = nncore.dense_forward(model.ps, "rev.out", h)
    return logit[..., 0], (fcache, mcache, ucache, hcache, ocache)


def _rev_backward(model: GoWebModel, corpus: Corpus, dlogit, cache):
    fcache, mcache, ucache, hcache, ocache = cache
    dh = nncore.dense_backward(model.ps, "rev.out", dlogit[..., None], ocache)
    dz = nncore.dense_backward(model.ps, "rev.hidden", dh, hcache)
    dX = nncore.multi_head_attention_backward(model.ps, "mha", dz[..., :model.d_model], mcache)
    dR = None
    if ucache is not None:
        from .session_model import personal_goal_rep_backward
        dR = personal_goal_rep_backward(model.ps, dz[..., model.d_model:].sum(axis=1), ucache)
    model.visit_features_backward(corpus, dX, dR, fcache)


def rev_batch(corpus: Corpus, instances) -> Batch:
    return make_batch(corpus, [i.pages for i in instances], [i.history for i in instances])


def rev_loss_and_grad(model: GoWebModel, corpus: Corpus, instances) -> float:
    batch = rev_batch(corpus, instances)
    logit, cache = _rev_forward(model, corpus, batch)
    labels = np.zeros(batch.rows.shape)
    for b, inst in enumerate(instances):
        labels[b, :len(inst.labels)] = inst.labels
    loss, dlogit = nncore.bce_with_logits(logit, labels, batch.mask)
    _rev_backward(model, corpus, dlogit, cache)
    return loss


def revisit_probabilities(instances, model: GoWebModel, corpus: Corpus) -> list[np.ndarray]:
    batch = rev_batch(corpus, instances)
    logit, _ = _rev_forward(model, corpus, batch)
    p = nncore.sigmoid(logit)
    return [p[b, :len(inst.pages)] for b, inst in enumerate(instances)]


def revisit_probability(i: int, instance: RevisitInstance, model: GoWebModel, corpus: Corpus) -> float:
    if not 0 <= i < len(instance.pages):
        raise IndexError(f"visit index {i} out of range for a session of {len(instance.pages)}")
    return float(revisit_probabilities([instance], model, corpus)[0][i])


def train_revisit(model: GoWebModel, corpus: Corpus, instances, cfg: TrainConfig, history=None):
    instances = list(instances)
    rng = np.random.default_rng(cfg.seed)
    opts = [nncore.Adam(cfg.adam) for _ in model.param_sets()]
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in _batches(len(instances), cfg.batch_size, rng):
            chunk = [instances[i] for i in idx]
            total += rev_loss_and_grad(model, corpus, chunk) * len(chunk)
            for opt, ps in zip(opts, model.param_sets()):
                opt.step(ps)
        mean = total / max(len(instances), 1)
        log.info("revisit epoch %d loss %.5f", epoch + 1, mean)
        if history is not None:
            history.append(mean)
    if model.cfg.finetune_estimator:
        corpus.refresh()
    return model


def evaluate_revisit(model: GoWebModel, corpus: Corpus, instances, threshold: float = 0.5,
                     batch_size: int = 64) -> ClsMetricsReport:
    preds, labels = [], []
    instances = list(instances)
    for idx in _batches(len(instances), batch_size):
        chunk = [instances[i] for i in idx]
        for inst, p in zip(chunk, revisit_probabilities(chunk, model, corpus)):
            preds.extend((p >= threshold).tolist())
            labels.extend(inst.labels)
    return classification_metrics(preds, labels)


# -- goal-based grouping -------------------------------------------------------------

@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    costs: list[float]
    seed_cost: float


def _sq_dists(X, C):
    return np.maximum(np.sum(X * X, 1)[:, None] - 2 * X @ C.T + np.sum(C * C, 1)[None, :], 0.0)


def kmeans_pp(X, k: int, seed: int = 0, max_iter: int = 100) -> KMeansResult:
    """D^2-seeded k-means with Lloyd iterations until assignments stop changing."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if k > n:
        raise ValueError(f"cannot form {k} clusters from {n} points")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(X, X[chosen]).min(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(free[rng.integers(len(free))])
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(X, X[[nxt]])[:, 0])
    centers = X[chosen].copy()
    dist = _sq_dists(X, centers)
    labels = np.argmin(dist, axis=1)
    seed_cost = float(dist[np.arange(n), labels].sum())
    costs = [seed_cost]
    for _ in range(max_iter):
        for j in range(k):
            members = labels == j
            if members.any():
                centers[j] = X[members].mean(axis=0)
        dist = _sq_dists(X, centers)
        new = np.argmin(dist, axis=1)
        costs.append(float(dist[np.arange(n), new].sum()))
        if np.array_equal(new, labels):
            break
        labels = new
    return KMeansResult(labels, centers, costs, seed_cost)


def cluster_session_goals(session_pages, corpus: Corpus, k: int, seed: int = 0) -> np.ndarray:
    """Group a session's visits by K-means++ on their vGoalReps."""
    return kmeans_pp(corpus.rp[corpus.rows(session_pages)], k, seed).labels
