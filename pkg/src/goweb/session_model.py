"""Goal-aware visit, session and personal representations.

A :class:`GoWebModel` owns the content encoder, the attention blocks and both
task heads; the goal estimator is referenced, frozen unless
``finetune_estimator`` is set.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import nncore
from .dataio import BrowsingSession, Visit  # noqa: F401  (re-exported)
from .goal_embed import GoalEmbeddingTable
from .nncore import ParamSet
from .page_encoder import (
    EncoderDims,
    EstimatorConfig,
    GoalEstimator,
    PageIndex,
    init_page_encoder,
    page_encoder_backward,
    page_encoder_forward,
)

MODES = ("full", "np", "ablation")


@dataclass(frozen=True)
class ModelConfig:
    d_h: int = 64
    d_c: int = 128
    d_V: int = 128
    hidden: int = 128
    heads: int = 8
    host_buckets: int = 4096
    content_buckets: int = 8192
    history_max: int = 200
    mode: str = "full"
    finetune_estimator: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def goal_aware(self) -> bool:
        return self.mode != "ablation"

    @property
    def personal(self) -> bool:
        return self.mode == "full"


class Corpus:
    """Page features for one page universe plus cached estimator outputs."""

    def __init__(self, pages, estimator: GoalEstimator, cfg: ModelConfig, vectors: dict | None = None):
        pages = list(pages)
        self.index_g = estimator.index_for(pages, vectors)
        if (cfg.host_buckets, cfg.content_buckets) == (estimator.cfg.host_buckets, estimator.cfg.content_buckets):
            self.index_v = self.index_g
        else:
            self.index_v = PageIndex(pages, cfg.host_buckets, cfg.content_buckets, vectors)
        self.estimator = estimator
        self.refresh()

    def refresh(self) -> None:
        n = len(self.index_g)
        self.rp = np.concatenate(
            [self.estimator.estimate(self.index_g, np.arange(s, min(s + 2048, n))) for s in range(0, n, 2048)]
        ) if n else np.zeros((0, self.estimator.d_G))

    @property
    def row(self) -> dict[str, int]:
        return self.index_g.row

    def rows(self, page_ids) -> np.ndarray:
        return self.index_g.rows(page_ids)


@dataclass
class Batch:
    rows: np.ndarray
    mask: np.ndarray
    hist_rows: np.ndarray
    hist_mask: np.ndarray


def pad_rows(seqs, min_width: int = 1):
    width = max([len(s) for s in seqs] + [min_width])
    rows = np.zeros((len(seqs), width), dtype=int)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        rows[i, :len(s)] = s
        mask[i, :len(s)] = True
    return rows, mask


def make_batch(corpus: Corpus, sessions_pages, histories) -> Batch:
    if any(len(p) == 0 for p in sessions_pages):
        raise ValueError("empty session")
    rows, mask = pad_rows([corpus.rows(p) for p in sessions_pages])
    h_rows, h_mask = pad_rows([corpus.rows(h) for h in histories])
    return Batch(rows, mask, h_rows, h_mask)


# -- personal goal representation ---------------------------------------------

def init_personal(ps: ParamSet, d_G: int, hidden: int, rng):
    nncore.init_dense(ps, "pers.Fs", d_G, hidden, rng)
    ps.init_uniform("pers.c", (hidden,), rng)


def personal_goal_rep(ps: ParamSet, R, mask, H, hmask):
    """Two-stage attention: focal summary of the session, then history lookup.

    ``R`` (B, n, d_G) holds the session's vGoalReps, ``H`` (B, m, d_G) the
    history's. Users with no history get a zero vector.
    """
    R = np.asarray(R, dtype=float)
    H = np.asarray(H, dtype=float)
    Z, zcache = nncore.dense_forward(ps, "pers.Fs", R, act="tanh")
    alpha = nncore.softmax_rows(Z @ ps["pers.c"], mask)
    r_s = np.einsum("bn,bnd->bd", alpha, R)
    beta = nncore.softmax_rows(np.einsum("bmd,bd->bm", H, r_s), hmask)
    r_u = np.einsum("bm,bmd->bd", beta, H)
    return r_u, (R, H, Z, zcache, alpha, r_s, beta)


def personal_goal_rep_backward(ps: ParamSet, dr_u, cache):
    """Accumulates parameter gradients; returns the gradient w.r.t. ``R``."""
    R, H, Z, zcache, alpha, r_s, beta = cache
    dbeta = np.einsum("bmd,bd->bm", H, dr_u)
    dlog_b = nncore.softmax_backward(dbeta, beta)
    dr_s = np.einsum("bm,bmd->bd", dlog_b, H)
    dR = np.einsum("bn,bd->bnd", alpha, dr_s)
    dalpha = np.einsum("bnd,bd->bn", R, dr_s)
    de = nncore.softmax_backward(dalpha, alpha)
    ps.acc("pers.c", np.einsum("bn,bnh->h", de, Z))
    dZ = de[..., None] * ps["pers.c"]
    dR += nncore.dense_backward(ps, "pers.Fs", dZ, zcache)
    return dR


# -- the model ------------------------------------------------------------------

class GoWebModel:
    def __init__(self, estimator: GoalEstimator, cfg: ModelConfig, candidates=(), ps: ParamSet | None = None):
        self.estimator = estimator
        self.cfg = cfg
        self.candidates = list(candidates)
        self.cand_pos = {p: i for i, p in enumerate(self.candidates)}
        d_G = estimator.d_G
        self.d_model = cfg.d_V + (d_G if cfg.goal_aware else 0)
        if self.d_model % cfg.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by {cfg.heads} heads")
        if ps is None:
            ps = ParamSet()
            rng = np.random.default_rng(cfg.seed)
            dims = EncoderDims(cfg.d_h, cfg.d_c, cfg.d_V, cfg.host_buckets, cfg.content_buckets)
            init_page_encoder(ps, "V", dims, rng)
            nncore.init_mha(ps, "mha", self.d_model, cfg.heads, rng)
            nncore.init_context_pool(ps, "pool", self.d_model, cfg.heads, rng)
            if cfg.personal:
                init_personal(ps, d_G, cfg.hidden, rng)
            d_head_in = self.d_model + (d_G if cfg.personal else 0)
            nncore.init_dense(ps, "rec.hidden", d_head_in, cfg.hidden, rng)
            nncore.init_dense(ps, "rec.out", cfg.hidden, max(len(self.candidates), 1), rng)
            nncore.init_dense(ps, "rev.hidden", d_head_in, cfg.hidden, rng)
            nncore.init_dense(ps, "rev.out", cfg.hidden, 1, rng)
        self.ps = ps

    @property
    def d_G(self) -> int:
        return self.estimator.d_G

    def param_sets(self) -> list[ParamSet]:
        return [self.ps, self.estimator.ps] if self.cfg.finetune_estimator else [self.ps]

    # visit features x_p = [r_p, w_p]
    def visit_features(self, corpus: Corpus, rows, mask):
        rows = np.asarray(rows)
        mask = np.asarray(mask, dtype=bool)
        valid = rows[mask]
        w_flat, wcache = page_encoder_forward(self.ps, "V", corpus.index_v, valid)
        W = np.zeros(rows.shape + (self.cfg.d_V,))
        W[mask] = w_flat
        rcache = None
        if self.cfg.finetune_estimator:
            r_flat, rcache = page_encoder_forward(self.estimator.ps, "G", corpus.index_g, valid)
            R = np.zeros(rows.shape + (self.d_G,))
            R[mask] = r_flat
        else:
            R = corpus.rp[rows] * mask[..., None]
        X = np.concatenate([R, W], axis=-1) if self.cfg.goal_aware else W
        return X, R, (mask, wcache, rcache)

    def visit_features_backward(self, corpus: Corpus, dX, dR_extra, cache):
        mask, wcache, rcache = cache
        if self.cfg.goal_aware:
            dR, dW = dX[..., :self.d_G], dX[..., self.d_G:]
        else:
            dR, dW = np.zeros(dX.shape[:-1] + (self.d_G,)), dX
        if dR_extra is not None:
            dR = dR + dR_extra
        page_encoder_backward(self.ps, "V", corpus.index_v, dW[mask], wcache)
        if rcache is not None:
            page_encoder_backward(self.estimator.ps, "G", corpus.index_g, dR[mask], rcache)
        return dR

    def history_reps(self, corpus: Corpus, batch: Batch):
        return corpus.rp[batch.hist_rows] * batch.hist_mask[..., None]

    def gvisit_reps(self, X, mask):
        return nncore.multi_head_attention(self.ps, "mha", X, self.cfg.heads, mask)

    def gsession_rep(self, X, mask):
        return nncore.context_attention_pool(self.ps, "pool", X, self.cfg.heads, mask)

    def personal(self, R, mask, H, hmask):
        return personal_goal_rep(self.ps, R, mask, H, hmask)

    def encode(self, corpus: Corpus, batch: Batch) -> dict:
        """All three representations for a batch, without gradient bookkeeping."""
        X, R, _ = self.visit_features(corpus, batch.rows, batch.mask)
        out = {"X": X, "v_p": self.gvisit_reps(X, batch.mask)[0], "v_s": self.gsession_rep(X, batch.mask)[0]}
        if self.cfg.personal:
            out["r_u"] = self.personal(R, batch.mask, self.history_reps(corpus, batch), batch.hist_mask)[0]
        return out

    def config_dict(self) -> dict:
        return {"model": asdict(self.cfg), "candidates": self.candidates}

    def save(self, path, extra: dict | None = None) -> None:
        merged = ParamSet()
        for n in self.ps.names():
            merged.add(n, self.ps[n])
        for n in self.estimator.ps.names():
            merged.add(n, self.estimator.ps[n])
        config = self.config_dict()
        config["estimator"] = asdict(self.estimator.cfg)
        config["goal_ids"] = list(self.estimator.table.ids)
        config["goal_coords"] = self.estimator.table.coords.tolist()
        nncore.save_checkpoint(path, merged, config, extra)

    @classmethod
    def load(cls, path) -> "GoWebModel":
        merged, config, _ = nncore.load_checkpoint(path)
        est_ps, model_ps = ParamSet(), ParamSet()
        for n in merged.names():
            (est_ps if n.startswith("G.") else model_ps).add(n, merged[n])
        ecfg = dict(config["estimator"])
        ecfg["adam"] = nncore.AdamConfig(**ecfg["adam"])
        table = GoalEmbeddingTable(config["goal_ids"], np.array(config["goal_coords"]))
        est = GoalEstimator(table, EstimatorConfig(**ecfg), est_ps)
        return cls(est, ModelConfig(**config["model"]), config["candidates"], model_ps)
