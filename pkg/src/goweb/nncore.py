"""A small numpy autodiff-free kernel: every forward op ships an explicit backward.

Conventions: batched tensors put the batch first, masks are boolean with True
marking valid rows, and backward functions accumulate parameter gradients into
the owning :class:`ParamSet` and return gradients with respect to inputs.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

INIT_SCALE = 0.05
_NEG = -1e30


class ParamSet:
    """Named parameter arrays with gradient accumulators of the same shapes."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already defined")
        value = np.array(value, dtype=float)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def init_uniform(self, name, shape, rng: np.random.Generator, scale: float = INIT_SCALE):
        return self.add(name, rng.uniform(-scale, scale, size=shape))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def acc(self, name: str, grad) -> None:
        self.grads[name] += grad

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for k, v in self.params.items():
            out.add(k, v.copy())
        return out

    def n_values(self) -> int:
        return sum(v.size for v in self.params.values())


# -- dense ------------------------------------------------------------------

def linear(x, W, b=None):
    y = x @ W
    return y if b is None else y + b


def linear_backward(dy, x, W):
    """Returns (dx, dW, db) for y = x W + b over arbitrary leading dims."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ W.T, x2.T @ dy2, dy2.sum(axis=0)


def dense_forward(ps: ParamSet, name: str, x, act: str | None = None):
    y = linear(x, ps[f"{name}.W"], ps[f"{name}.b"])
    if act == "tanh":
        y = np.tanh(y)
    return y, (x, y, act)


def dense_backward(ps: ParamSet, name: str, dy, cache):
    x, y, act = cache
    if act == "tanh":
        dy = dy * (1.0 - y * y)
    dx, dW, db = linear_backward(dy, x, ps[f"{name}.W"])
    ps.acc(f"{name}.W", dW)
    ps.acc(f"{name}.b", db)
    return dx


def init_dense(ps: ParamSet, name: str, d_in: int, d_out: int, rng):
    ps.init_uniform(f"{name}.W", (d_in, d_out), rng)
    ps.init_uniform(f"{name}.b", (d_out,), rng)


# -- softmax / losses -----------------------------------------------------

def softmax_rows(x, mask=None):
    """Softmax along the last axis; masked entries get zero mass.

    A row with every entry masked comes back all zeros.
    """
    x = np.asarray(x, dtype=float)
    if mask is not None:
        x = np.where(mask, x, _NEG)
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    s = e.sum(axis=-1, keepdims=True)
    return e / np.where(s > 0, s, 1.0)


def softmax_backward(dy, y):
    return y * (dy - np.sum(dy * y, axis=-1, keepdims=True))


def cross_entropy(probs, label: int) -> float:
    probs = np.asarray(probs, dtype=float)
    if not 0 <= label < probs.shape[-1]:
        raise IndexError(f"label {label} out of range for {probs.shape[-1]} classes")
    return float(-np.log(probs[label]))


def softmax_cross_entropy(logits, target_dist):
    """Mean over rows of -sum(target * log softmax(logits)).

    ``target_dist`` rows are distributions; a multi-positive row spreads
    mass uniformly over its positives. Returns (loss, dlogits).
    """
    z = logits - np.max(logits, axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = logits.shape[0]
    loss = float(-np.sum(target_dist * logp) / n)
    return loss, (np.exp(logp) - target_dist) / n


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def bce_with_logits(logits, labels, mask=None):
    """Mean binary cross-entropy over valid entries; returns (loss, dlogits)."""
    labels = np.asarray(labels, dtype=float)
    w = np.ones_like(logits) if mask is None else np.asarray(mask, dtype=float)
    count = max(w.sum(), 1.0)
    per = np.maximum(logits, 0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))
    return float(np.sum(per * w) / count), (sigmoid(logits) - labels) * w / count


# -- attention ------------------------------------------------------------

def _split_heads(x, k):
    b, n, d = x.shape
    return x.reshape(b, n, k, d // k).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, k, n, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, k * d)


def _as_batch(X, mask):
    single = X.ndim == 2
    if single:
        X = X[None]
        mask = None if mask is None else np.asarray(mask)[None]
    if mask is None:
        mask = np.ones(X.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != X.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match input rows {X.shape[:2]}")
    return X, mask, single


def init_mha(ps: ParamSet, name: str, d_model: int, k: int, rng):
    if d_model % k:
        raise ValueError(f"d_model={d_model} is not divisible by {k} heads")
    for w in ("Wq", "Wk", "Wv", "Wo"):
        ps.init_uniform(f"{name}.{w}", (d_model, d_model), rng)


def multi_head_attention(ps: ParamSet, name: str, X, k: int, mask=None):
    """Concat_i softmax(X Wq_i (X Wk_i)^T / sqrt(d_k)) X Wv_i, projected by Wo.

    Keys outside ``mask`` get no weight; masked query rows output zeros.
    Returns (output, cache); also accepts a single (n, d_model) session.
    """
    X, mask, single = _as_batch(np.asarray(X, dtype=float), mask)
    d_model = X.shape[-1]
    if d_model % k:
        raise ValueError(f"d_model={d_model} is not divisible by {k} heads")
    dk = d_model // k
    Q = _split_heads(X @ ps[f"{name}.Wq"], k)
    K = _split_heads(X @ ps[f"{name}.Wk"], k)
    V = _split_heads(X @ ps[f"{name}.Wv"], k)
    scores = Q @ K.transpose(0, 1, 3, 2) / math.sqrt(dk)
    A = softmax_rows(scores, mask[:, None, None, :])
    H = _merge_heads(A @ V)
    out = (H @ ps[f"{name}.Wo"]) * mask[..., None]
    cache = (X, mask, Q, K, V, A, H, k, single)
    return (out[0] if single else out), cache


def multi_head_attention_backward(ps: ParamSet, name: str, dout, cache):
    X, mask, Q, K, V, A, H, k, single = cache
    if single:
        dout = dout[None]
    dout = dout * mask[..., None]
    dk = X.shape[-1] // k
    dH, dWo, _ = linear_backward(dout, H, ps[f"{name}.Wo"])
    dH = _split_heads(dH, k)
    dA = dH @ V.transpose(0, 1, 3, 2)
    dV = A.transpose(0, 1, 3, 2) @ dH
    dS = softmax_backward(dA, A) / math.sqrt(dk)
    dQ = _merge_heads(dS @ K)
    dK = _merge_heads(dS.transpose(0, 1, 3, 2) @ Q)
    dV = _merge_heads(dV)
    dX = np.zeros_like(X)
    for w, g in (("Wq", dQ), ("Wk", dK), ("Wv", dV)):
        dx, dW, _ = linear_backward(g, X, ps[f"{name}.{w}"])
        ps.acc(f"{name}.{w}", dW)
        dX += dx
    ps.acc(f"{name}.Wo", dWo)
    return dX[0] if single else dX


def init_context_pool(ps: ParamSet, name: str, d_model: int, k: int, rng):
    if d_model % k:
        raise ValueError(f"d_model={d_model} is not divisible by {k} heads")
    ps.init_uniform(f"{name}.c", (k, d_model // k), rng)
    for w in ("Wk", "Wv", "Wo"):
        ps.init_uniform(f"{name}.{w}", (d_model, d_model), rng)


def context_attention_pool(ps: ParamSet, name: str, X, k: int, mask=None):
    """Pool rows with one learned query vector per head; returns (pooled, cache)."""
    X, mask, single = _as_batch(np.asarray(X, dtype=float), mask)
    if not np.all(mask.any(axis=1)):
        raise ValueError("context pooling needs at least one unmasked row per session")
    dk = X.shape[-1] // k
    c = ps[f"{name}.c"]
    K = _split_heads(X @ ps[f"{name}.Wk"], k)
    V = _split_heads(X @ ps[f"{name}.Wv"], k)
    scores = np.einsum("hd,bhnd->bhn", c, K) / math.sqrt(dk)
    A = softmax_rows(scores, mask[:, None, :])
    H = np.einsum("bhn,bhnd->bhd", A, V).reshape(X.shape[0], -1)
    out = H @ ps[f"{name}.Wo"]
    cache = (X, mask, K, V, A, H, k, single)
    return (out[0] if single else out), cache


def context_attention_pool_backward(ps: ParamSet, name: str, dout, cache):
    X, mask, K, V, A, H, k, single = cache
    if single:
        dout = dout[None]
    dk = X.shape[-1] // k
    c = ps[f"{name}.c"]
    dH, dWo, _ = linear_backward(dout, H, ps[f"{name}.Wo"])
    ps.acc(f"{name}.Wo", dWo)
    dH = dH.reshape(X.shape[0], k, dk)
    dA = np.einsum("bhd,bhnd->bhn", dH, V)
    dV = np.einsum("bhn,bhd->bhnd", A, dH)
    dS = softmax_backward(dA, A) / math.sqrt(dk)
    ps.acc(f"{name}.c", np.einsum("bhn,bhnd->hd", dS, K))
    dK = np.einsum("bhn,hd->bhnd", dS, c)
    dX = np.zeros_like(X)
    for w, g in (("Wk", dK), ("Wv", dV)):
        dx, dW, _ = linear_backward(_merge_heads(g), X, ps[f"{name}.{w}"])
        ps.acc(f"{name}.{w}", dW)
        dX += dx
    return dX[0] if single else dX


# -- optimisation -----------------------------------------------------------

@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.lr <= 0:
            raise ValueError("Adam lr must be positive")


class Adam:
    """Bias-corrected Adam over a ParamSet; ``frozen`` names are never touched."""

    def __init__(self, cfg: AdamConfig, frozen: frozenset[str] = frozenset()):
        self.cfg = cfg
        self.frozen = frozenset(frozen)
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, ps: ParamSet) -> None:
        self.t += 1
        adam_step(ps, self.cfg, self.t, self.m, self.v, self.frozen)


def adam_step(ps: ParamSet, cfg: AdamConfig, t: int, m: dict, v: dict, frozen=frozenset()) -> None:
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for name, p in ps.params.items():
        g = ps.grads[name]
        if name in frozen:
            g.fill(0.0)
            continue
        if name not in m:
            m[name] = np.zeros_like(p)
            v[name] = np.zeros_like(p)
        m[name] *= cfg.beta1
        m[name] += (1 - cfg.beta1) * g
        v[name] *= cfg.beta2
        v[name] += (1 - cfg.beta2) * g * g
        p -= cfg.lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + cfg.eps)
        g.fill(0.0)


# -- gradient checking ------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(loss_fn, ps: ParamSet, tolerance: float = 1e-4, h: float = 1e-5,
               names=None, max_coords: int = 24, seed: int = 0, floor: float = 1e-6,
               analytic: dict[str, np.ndarray] | None = None) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn()`` must zero the gradients, run forward and backward, and
    return the scalar loss. Up to ``max_coords`` coordinates per parameter
    are probed. ``analytic`` overrides the gradients read from ``ps``
    (used to inject faults in tests).
    """
    rng = np.random.default_rng(seed)
    loss_fn()
    grads = {n: g.copy() for n, g in ps.grads.items()}
    if analytic:
        grads.update({n: np.asarray(g, dtype=float) for n, g in analytic.items()})
    per_param = {}
    for name in names or ps.names():
        p = ps[name]
        flat = p.reshape(-1)
        picks = np.arange(flat.size)
        if flat.size > max_coords:
            picks = rng.choice(flat.size, size=max_coords, replace=False)
        worst = 0.0
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            num = (up - down) / (2 * h)
            ana = grads[name].reshape(-1)[i]
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
        per_param[name] = worst
    loss_fn()
    return GradCheckReport(max(per_param.values(), default=0.0), tolerance, per_param)


# -- checkpoints ------------------------------------------------------------

def _encode(a: np.ndarray) -> dict:
    raw = np.ascontiguousarray(a, dtype="<f8").tobytes()
    return {"dims": list(a.shape), "encoding": "base64-float64-le",
            "values": base64.b64encode(raw).decode("ascii")}


def _decode(doc: dict) -> np.ndarray:
    if doc.get("encoding") == "base64-float64-le":
        arr = np.frombuffer(base64.b64decode(doc["values"]), dtype="<f8").astype(float)
    else:
        arr = np.asarray(doc["values"], dtype=float)
    return arr.reshape(doc["dims"])


def save_checkpoint(path, ps: ParamSet, config: dict, extra: dict | None = None) -> None:
    doc = {
        "format": "goweb-checkpoint/1",
        "config": config,
        "params": {n: _encode(ps[n]) for n in sorted(ps.names())},
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path):
    """Returns (ParamSet, config, extra)."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    ps = ParamSet()
    for name, entry in doc["params"].items():
        ps.add(name, _decode(entry))
    return ps, doc["config"], doc.get("extra", {})
