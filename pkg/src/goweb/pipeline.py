"""End-to-end experiment plumbing shared by the CLI, scripts and acceptance tests."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from . import dataio, metrics, tasks
from .config import RunConfig
from .goal_embed import GoalEmbeddingTable, evaluate_reconstruction, hierarchy_norm_profile, train_goal_embeddings
from .page_encoder import GoalEstimator, WeakLabelRecord, WebPage, content_buckets, train_goal_estimator
from .session_model import Corpus, GoWebModel
from .taxonomy import GoalTaxonomy, closure_pairs, load_taxonomy, make_taxonomy

log = logging.getLogger(__name__)

TASKS = ("rec", "rev")
SPLITS = ("train", "test_warm", "test_cold")


def make_run_taxonomy(cfg: RunConfig) -> GoalTaxonomy:
    if cfg.taxonomy:
        return load_taxonomy(cfg.taxonomy)
    return make_taxonomy(cfg.n_categories, cfg.leaves_per_category)


def fit_goal_table(cfg: RunConfig, taxonomy: GoalTaxonomy):
    losses: list[float] = []
    table = train_goal_embeddings(taxonomy, cfg.recon, losses)
    report = {"loss": losses, **evaluate_reconstruction(table, closure_pairs(taxonomy)),
              "norms": hierarchy_norm_profile(table, taxonomy)}
    return table, report


@dataclass
class TaskData:
    """Sessions, split and task instances derived from one event log."""

    sessions: list
    split: dict
    histories: dict
    candidates: list[str]
    pages: list
    rec: dict = field(default_factory=dict)
    rev: dict = field(default_factory=dict)


def build_task_data(cfg: RunConfig, events) -> TaskData:
    """Sessionize, filter, split and derive both tasks' instances.

    Revisit labels look at every later session of the user, including
    activity after the evaluation window.
    """
    sessions = dataio.apply_frequency_filters(
        dataio.segment_sessions(events), cfg.min_page_count, cfg.min_session_len)
    split = dataio.split_warm_cold(sessions, cfg.synth.split)
    histories = tasks.session_histories(sessions, cfg.model.history_max)
    candidates = tasks.build_candidate_set(tasks.page_frequencies(split["train"]), cfg.p_pop, cfg.k_cand)
    pages = {}
    for s in sessions:
        for v in s.visits:
            pages.setdefault(v.page.page_id, v.page)
    td = TaskData(sessions, split, histories, candidates, [pages[p] for p in sorted(pages)])
    labelled = []
    for user_sessions in dataio.sessions_by_user(sessions).values():
        labelled.extend(tasks.derive_revisit_labels(user_sessions))
    labelled = tasks.with_history(labelled, histories)
    for name in SPLITS:
        ids = {s.session_id for s in split[name]}
        td.rec[name] = tasks.build_rec_instances(split[name], candidates, histories)
        td.rev[name] = [r for r in labelled if r.session_id in ids]
    return td


@dataclass
class Prepared:
    cfg: RunConfig
    taxonomy: GoalTaxonomy
    events: list
    sidecar: dict
    weak: list
    table: GoalEmbeddingTable
    recon_report: dict
    estimator: GoalEstimator
    estimator_report: dict
    data: TaskData
    corpus: Corpus


def prepare(cfg: RunConfig) -> Prepared:
    """Synthesize a world and train everything upstream of the task models."""
    taxonomy = make_run_taxonomy(cfg)
    events, sidecar, weak = dataio.synth_generate(cfg.synth, taxonomy)
    table, recon_report = fit_goal_table(cfg, taxonomy)
    est, est_report = train_goal_estimator(weak, table, cfg.estimator)
    data = build_task_data(cfg, events)
    corpus = Corpus(data.pages, est, cfg.model)
    return Prepared(cfg, taxonomy, events, sidecar, weak, table, recon_report, est, est_report, data, corpus)


def train_task(task: str, cfg: RunConfig, estimator: GoalEstimator, corpus: Corpus, data: TaskData,
               history: list | None = None) -> GoWebModel:
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}")
    model = GoWebModel(estimator, cfg.model, data.candidates)
    if task == "rec":
        tasks.train_recommender(model, corpus, data.rec["train"], cfg.rec_train, history)
    else:
        tasks.train_revisit(model, corpus, data.rev["train"], cfg.rev_train, history)
    return model


def evaluate_task(task: str, model: GoWebModel, corpus: Corpus, data: TaskData, split: str,
                  threshold: float = 0.5, empty_history: bool = False) -> dict:
    """Metrics for ``split``; ``empty_history`` strips every instance's history first."""
    pool = data.rec[split] if task == "rec" else data.rev[split]
    if empty_history:
        pool = [replace(i, history=()) for i in pool]
    if not pool:
        return {"n": 0}
    if task == "rec":
        rep = tasks.evaluate_recommender(model, corpus, pool).to_dict()
    else:
        rep = tasks.evaluate_revisit(model, corpus, pool, threshold).to_dict()
    rep["n"] = len(pool)
    return rep


HEADLINE = {"rec": "mrr_at_10", "rev": "f1"}


def goal_awareness_run(cfg: RunConfig, modes=("full", "ablation"), prep: Prepared | None = None) -> dict:
    """Train and score both tasks in each mode on one synthetic world."""
    prep = prep or prepare(cfg)
    out = {}
    for task in TASKS:
        for mode in modes:
            mcfg = cfg.with_mode(mode)
            model = train_task(task, mcfg, prep.estimator, prep.corpus, prep.data)
            out[(task, mode)] = evaluate_task(task, model, prep.corpus, prep.data, "test_warm",
                                              cfg.revisit_threshold)
            log.info("%s %s %s", task, mode, out[(task, mode)])
    return out


def cold_start_parity(cfg: RunConfig, prep: Prepared | None = None) -> dict:
    """NP model on cold users with empty histories versus warm users with theirs."""
    cfg = cfg.with_mode("np")
    prep = prep or prepare(cfg)
    out = {}
    for task in TASKS:
        model = train_task(task, cfg, prep.estimator, prep.corpus, prep.data)
        out[task] = {
            "warm": evaluate_task(task, model, prep.corpus, prep.data, "test_warm", cfg.revisit_threshold),
            "cold": evaluate_task(task, model, prep.corpus, prep.data, "test_cold", cfg.revisit_threshold,
                                  empty_history=True),
        }
    return out


# -- goal-based grouping ------------------------------------------------------------

def content_vectors(pages, n_buckets: int) -> np.ndarray:
    """L2-normalised hashed unigram+bigram counts: the content-only baseline features."""
    X = np.zeros((len(pages), n_buckets))
    for i, p in enumerate(pages):
        for b in content_buckets(p.title_tokens, n_buckets):
            X[i, b] += 1.0
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return X / np.where(norms > 0, norms, 1.0)


def clustering_comparison(sessions, corpus: Corpus, page_goal: dict, seed: int = 0,
                          content_buckets_n: int = 4096) -> dict:
    """Per-session K-means++ with k = number of true goals, on vGoalReps and on content.

    Only sessions visiting at least two goals are scored; reported values are
    session means.
    """
    scores = {"rp": [], "content": []}
    for s in sessions:
        pids = s.page_ids
        truth = np.array([page_goal[p] for p in pids])
        k = len(set(truth.tolist()))
        if k < 2:
            continue
        feats = {
            "rp": corpus.rp[corpus.rows(pids)],
            "content": content_vectors([v.page for v in s.visits], content_buckets_n),
        }
        for name, X in feats.items():
            labels = tasks.kmeans_pp(X, k, seed).labels
            scores[name].append(metrics.clustering_agreement(labels, truth))
    out = {"n_sessions": len(scores["rp"])}
    for name, reps in scores.items():
        out[name] = {"nmi": float(np.mean([r.nmi for r in reps])) if reps else float("nan"),
                     "ami": float(np.mean([r.ami for r in reps])) if reps else float("nan")}
    return out


# -- behavioural analyses -----------------------------------------------------------------

def analyze(sessions, page_category: dict, top_k: int = 5) -> dict:
    """Single-goal-session rates and revisit-duration profiles per goal category."""
    by_user = dataio.sessions_by_user(sessions)
    revisit_events = []
    for user_sessions in by_user.values():
        revisit_events.extend(metrics.extract_revisit_events(
            [[(v.page.page_id, v.ts) for v in s.visits] for s in user_sessions]))
    session_cats = [[page_category[p] for p in s.page_ids] for s in sessions]
    return {
        "n_sessions": len(sessions),
        "n_revisits": len(revisit_events),
        "single_goal_session_rate": metrics.single_goal_session_rate(session_cats),
        "revisit_durations": metrics.revisit_duration_buckets(
            revisit_events, lambda p: page_category[p], top_k=top_k),
    }


def estimator_confusion(estimator: GoalEstimator, pages, page_goal: dict, taxonomy: GoalTaxonomy):
    idx = estimator.index_for(pages)
    pred = estimator.predict(idx, np.arange(len(pages)))
    truth = [page_goal[p.page_id] for p in pages]
    return metrics.goal_confusion_matrix(pred, truth, taxonomy)


def sanity_weak_set(taxonomy: GoalTaxonomy, pages_per_goal: int = 200, shared_fraction: float = 0.0,
                    seed: int = 0, words_per_goal: int = 12, title_len: int = 6, n_hosts: int = 50):
    """Weak labels over the leaf goals with private per-goal vocabularies.

    Each title token comes from the goal's own words, or with probability
    ``shared_fraction`` from a vocabulary shared by the goal's category.
    Hosts are drawn from one pool common to every goal, so only titles
    carry the label. ``shared_fraction=0`` gives a separable set.
    """
    if not 0.0 <= shared_fraction <= 1.0:
        raise ValueError("shared_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    out = []
    for g in taxonomy.leaves:
        c = taxonomy.category_of(g)
        for i in range(pages_per_goal):
            shared = rng.random(title_len) < shared_fraction
            words = rng.integers(0, words_per_goal, title_len)
            title = " ".join(f"c{c}w{w}" if s else f"g{g}w{w}" for s, w in zip(shared, words))
            host = f"h{rng.integers(n_hosts)}.example"
            out.append(WeakLabelRecord(WebPage.from_title(f"g{g}p{i}", host, title), g))
    return out


def category_labels(sidecar: dict, taxonomy: GoalTaxonomy | None = None) -> dict:
    """page id -> category name (or id when no taxonomy is given)."""
    out = {}
    for pid, meta in sidecar["pages"].items():
        c = meta["category_id"]
        out[pid] = taxonomy.name(c) if taxonomy is not None else c
    return out


def affinity_order(sidecar: dict, taxonomy: GoalTaxonomy | None = None) -> list:
    """Categories from fastest to slowest planted revisiting."""
    aff = {int(c): a for c, a in sidecar["category_affinity"].items()}
    order = sorted(aff, key=lambda c: (-aff[c], c))
    return [taxonomy.name(c) if taxonomy is not None else c for c in order]


def page_goals(sidecar: dict) -> dict:
    return {pid: meta["goal_id"] for pid, meta in sidecar["pages"].items()}


def relative_gain(new: float, base: float) -> float:
    if base == 0:
        return float("inf") if new > 0 else 0.0
    return (new - base) / abs(base)


def session_goal_counts(sessions, page_goal: dict) -> Counter:
    return Counter(len({page_goal[p] for p in s.page_ids}) for s in sessions)
