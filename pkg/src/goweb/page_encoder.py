"""Web-page encoders: hashed host/content features, the goal estimator and weak labels."""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import nncore
from .goal_embed import GoalEmbeddingTable
from .nncore import AdamConfig, ParamSet

log = logging.getLogger(__name__)

HOST_BUCKETS = 4096
CONTENT_BUCKETS = 8192


@dataclass(frozen=True)
class WebPage:
    page_id: str
    host: str
    title_tokens: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.host:
            raise ValueError("host must be nonempty")

    @classmethod
    def from_title(cls, page_id: str, host: str, title: str) -> "WebPage":
        return cls(page_id, host, tokenize(title))

    @property
    def title(self) -> str:
        return " ".join(self.title_tokens)


def tokenize(title: str) -> tuple[str, ...]:
    return tuple(title.lower().split())


def hash_bucket(feature: str, n_buckets: int, salt: str = "") -> int:
    return zlib.crc32((salt + feature).encode("utf-8")) % n_buckets


def content_features(tokens) -> list[str]:
    """Unigrams plus space-joined bigrams."""
    tokens = list(tokens)
    return tokens + [f"{a} {b}" for a, b in zip(tokens, tokens[1:])]


def content_buckets(tokens, n_buckets: int) -> list[int]:
    return [hash_bucket(f, n_buckets, "c:") for f in content_features(tokens)]


def encode_content_default(tokens, table: np.ndarray, n_buckets: int) -> np.ndarray:
    """Mean of the bucket embeddings of hashed unigrams and bigrams."""
    idx = content_buckets(tokens, n_buckets)
    if not idx:
        return np.zeros(table.shape[1])
    return table[idx].mean(axis=0)


class PageIndex:
    """Row-indexed page features shared by all encoders of one corpus.

    ``content`` is a CSR matrix whose row i averages the hashed buckets of
    page i, so a batch of content vectors is ``content[rows] @ table``.
    When external vectors are supplied they replace the hashed path.
    """

    def __init__(self, pages, host_buckets: int = HOST_BUCKETS,
                 content_buckets_n: int = CONTENT_BUCKETS, vectors: dict | None = None):
        self.pages = list(pages)
        self.host_buckets = host_buckets
        self.content_buckets = content_buckets_n
        self.row = {p.page_id: i for i, p in enumerate(self.pages)}
        if len(self.row) != len(self.pages):
            raise ValueError("duplicate page ids in page index")
        self.host = np.array([hash_bucket(p.host, host_buckets, "h:") for p in self.pages], dtype=int)
        indptr, indices, data = [0], [], []
        for p in self.pages:
            b = content_buckets(p.title_tokens, content_buckets_n)
            indices.extend(b)
            data.extend([1.0 / max(len(b), 1)] * len(b))
            indptr.append(len(indices))
        self.content = sp.csr_matrix(
            (np.array(data, dtype=float), np.array(indices, dtype=int), np.array(indptr)),
            shape=(len(self.pages), content_buckets_n),
        )
        self.vectors = None
        if vectors is not None:
            missing = [p.page_id for p in self.pages if p.page_id not in vectors]
            if missing:
                raise KeyError(f"no precomputed content vector for pages {missing[:5]}")
            self.vectors = np.array([vectors[p.page_id] for p in self.pages], dtype=float)

    def __len__(self):
        return len(self.pages)

    def rows(self, page_ids) -> np.ndarray:
        return np.array([self.row[p] for p in page_ids], dtype=int)


@dataclass(frozen=True)
class EncoderDims:
    d_h: int = 64
    d_c: int = 128
    d_out: int = 64
    host_buckets: int = HOST_BUCKETS
    content_buckets: int = CONTENT_BUCKETS


def init_page_encoder(ps: ParamSet, prefix: str, dims: EncoderDims, rng, precomputed_dim: int | None = None):
    ps.init_uniform(f"{prefix}.host", (dims.host_buckets, dims.d_h), rng)
    if precomputed_dim is None:
        ps.init_uniform(f"{prefix}.content", (dims.content_buckets, dims.d_c), rng)
        d_c = dims.d_c
    else:
        d_c = precomputed_dim
    nncore.init_dense(ps, f"{prefix}.F", dims.d_h + d_c, dims.d_out, rng)


def page_encoder_forward(ps: ParamSet, prefix: str, index: PageIndex, rows):
    """F([emb_host(h), content(c)]) for the given page rows."""
    rows = np.asarray(rows, dtype=int)
    h = ps[f"{prefix}.host"][index.host[rows]]
    if f"{prefix}.content" in ps:
        S = index.content[rows]
        c = S @ ps[f"{prefix}.content"]
    else:
        S = None
        c = index.vectors[rows]
    x = np.concatenate([h, c], axis=1)
    out, dcache = nncore.dense_forward(ps, f"{prefix}.F", x)
    return out, (rows, S, h.shape[1], dcache)


def page_encoder_backward(ps: ParamSet, prefix: str, index: PageIndex, dout, cache):
    rows, S, d_h, dcache = cache
    dx = nncore.dense_backward(ps, f"{prefix}.F", dout, dcache)
    np.add.at(ps.grads[f"{prefix}.host"], index.host[rows], dx[:, :d_h])
    if S is not None:
        ps.grads[f"{prefix}.content"] += S.T @ dx[:, d_h:]


# -- goal estimator ---------------------------------------------------------

def goal_similarity(r_p, r_g) -> float:
    """|r_p| |r_g| cos(theta), i.e. the inner product of the coordinates."""
    r_p = np.asarray(r_p, dtype=float)
    r_g = np.asarray(r_g, dtype=float)
    if r_p.shape != r_g.shape:
        raise ValueError(f"dimension mismatch {r_p.shape} vs {r_g.shape}")
    return float(r_p @ r_g)


def classify_goal(r_p, table: GoalEmbeddingTable):
    """Returns (argmax goal id, softmax distribution over ``table.ids``)."""
    logits = table.coords @ np.asarray(r_p, dtype=float)
    dist = nncore.softmax_rows(logits)
    best = np.flatnonzero(logits == logits.max())
    return min(table.ids[i] for i in best), dist


@dataclass(frozen=True)
class EstimatorConfig:
    d_h: int = 64
    d_c: int = 128
    host_buckets: int = HOST_BUCKETS
    content_buckets: int = CONTENT_BUCKETS
    epochs: int = 10
    batch_size: int = 64
    eval_fraction: float = 0.1
    adam: AdamConfig = field(default_factory=AdamConfig)
    seed: int = 0


class GoalEstimator:
    """r_p = F_G([emb_host(h_p); content(c_p)]) scored against a frozen goal table."""

    prefix = "G"

    def __init__(self, table: GoalEmbeddingTable, cfg: EstimatorConfig, ps: ParamSet | None = None,
                 precomputed_dim: int | None = None):
        self.table = table
        self.cfg = cfg
        if ps is None:
            ps = ParamSet()
            dims = EncoderDims(cfg.d_h, cfg.d_c, table.dim, cfg.host_buckets, cfg.content_buckets)
            init_page_encoder(ps, self.prefix, dims, np.random.default_rng(cfg.seed), precomputed_dim)
        self.ps = ps

    @property
    def d_G(self) -> int:
        return self.table.dim

    def index_for(self, pages, vectors=None) -> PageIndex:
        return PageIndex(pages, self.cfg.host_buckets, self.cfg.content_buckets, vectors)

    def estimate(self, index: PageIndex, rows) -> np.ndarray:
        out, _ = page_encoder_forward(self.ps, self.prefix, index, rows)
        return out

    def estimate_page(self, page: WebPage) -> np.ndarray:
        return self.estimate(self.index_for([page]), [0])[0]

    def logits(self, r_p) -> np.ndarray:
        return r_p @ self.table.coords.T

    def predict(self, index: PageIndex, rows) -> np.ndarray:
        lg = self.logits(self.estimate(index, rows))
        return np.array([self.table.ids[i] for i in np.argmax(lg, axis=1)])

    def loss_and_grad(self, index: PageIndex, rows, label_idx) -> float:
        r_p, cache = page_encoder_forward(self.ps, self.prefix, index, rows)
        logits = self.logits(r_p)
        target = np.zeros_like(logits)
        target[np.arange(len(rows)), label_idx] = 1.0
        loss, dlogits = nncore.softmax_cross_entropy(logits, target)
        page_encoder_backward(self.ps, self.prefix, index, dlogits @ self.table.coords, cache)
        return loss

    def save(self, path, extra: dict | None = None):
        config = {"estimator": _jsonable(asdict(self.cfg)), "goal_ids": list(self.table.ids),
                  "goal_coords": self.table.coords.tolist()}
        nncore.save_checkpoint(path, self.ps, config, extra)

    @classmethod
    def load(cls, path) -> "GoalEstimator":
        ps, config, _ = nncore.load_checkpoint(path)
        ecfg = dict(config["estimator"])
        ecfg["adam"] = AdamConfig(**ecfg["adam"])
        table = GoalEmbeddingTable(config["goal_ids"], np.array(config["goal_coords"]))
        return cls(table, EstimatorConfig(**ecfg), ps)


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_jsonable(v) for v in d]
    return d


@dataclass(frozen=True)
class WeakLabelRecord:
    page: WebPage
    goal_id: int


def read_weak_labels(path) -> list[WeakLabelRecord]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            r = json.loads(line)
            out.append(WeakLabelRecord(WebPage.from_title(r["page_id"], r["host"], r["title"]), int(r["goal_id"])))
    return out


def write_weak_labels(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"page_id": r.page.page_id, "host": r.page.host,
                                 "title": r.page.title, "goal_id": r.goal_id}, sort_keys=True) + "\n")


def read_content_vectors(path) -> dict[str, list[float]]:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def split_weak(n: int, eval_fraction: float, seed: int):
    perm = np.random.default_rng(seed).permutation(n)
    n_eval = int(round(n * eval_fraction))
    return np.sort(perm[n_eval:]), np.sort(perm[:n_eval])


def train_goal_estimator(records, table: GoalEmbeddingTable, cfg: EstimatorConfig,
                         vectors: dict | None = None):
    """Fit the estimator on a 90/10 split of weak labels.

    Returns (estimator, report); report carries per-epoch training loss,
    held-out accuracy and micro/macro F1, plus held-out predictions.
    """
    from .metrics import multiclass_f1

    unknown = sorted({r.goal_id for r in records} - set(table.ids))
    if unknown:
        raise ValueError(f"weak labels reference goals absent from the taxonomy: {unknown}")
    precomputed_dim = len(next(iter(vectors.values()))) if vectors else None
    est = GoalEstimator(table, cfg, precomputed_dim=precomputed_dim)
    index = est.index_for([r.page for r in records], vectors)
    labels = np.array([table.index[r.goal_id] for r in records])
    train_rows, eval_rows = split_weak(len(records), cfg.eval_fraction, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    opt = nncore.Adam(cfg.adam)
    losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(train_rows)
        total = 0.0
        for s in range(0, len(order), cfg.batch_size):
            rows = order[s:s + cfg.batch_size]
            total += est.loss_and_grad(index, rows, labels[rows]) * len(rows)
            opt.step(est.ps)
        losses.append(total / max(len(order), 1))
        log.info("estimator epoch %d loss %.5f", epoch + 1, losses[-1])
    report = {"train_loss": losses}
    if len(eval_rows):
        pred = est.predict(index, eval_rows)
        truth = np.array([records[i].goal_id for i in eval_rows])
        f1 = multiclass_f1(pred, truth)
        report.update({"accuracy": float(np.mean(pred == truth)), **f1,
                       "eval_pred": pred.tolist(), "eval_true": truth.tolist()})
    return est, report
