"""Layer-wise relevance propagation (alpha-beta rule) over recorded graphs.

Relevance is pushed backwards through the same node list that
:func:`sslab.autodiff.backward` walks. Every op kind has a rule:

============================  ==============================================
op                            rule
============================  ==============================================
matmul                        alpha-beta on z_jk = x_j w_jk; relevance goes to
                              the operand that depends on token embeddings
attend                        alpha-beta with the attention weights (left
                              operand) held constant
gate                          all relevance to the signal (right operand)
mul                           to the embedding-dependent operand; split
                              evenly if both are
add, sub                      proportional to |a| and |b|; a constant or
                              parameter operand (e.g. a bias) receives none
sum                           alpha-beta with unit weights
tanh, sigmoid, relu, scale,   passed through unchanged
softmax, log_softmax,
layer_norm
concat, slice, reshape,       routed structurally
transpose, pick
embed                         collected per token (the table is a parameter)
============================  ==============================================

Only nodes that depend on some ``embed`` lookup ("active" nodes) can hold
relevance, so it never leaks into parameters or constants except through
the epsilon-stabilised denominators. The totals that reach the source and
prefix embeddings are finally rescaled to sum to one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Graph, GraphError, Node, _unbroadcast
from .datagen import BOS
from .models import Seq2Seq

_PASS_THROUGH = ("tanh", "sigmoid", "relu", "scale", "softmax", "log_softmax")


@dataclass(frozen=True)
class LrpConfig:
    alpha: float = 1.0
    beta: float = 0.0
    eps: float = 1e-9

    def __post_init__(self):
        if abs(self.alpha - self.beta - 1.0) > 1e-12:
            raise ValueError(f"alpha - beta must equal 1 (got alpha={self.alpha}, beta={self.beta})")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if not self.eps > 0:
            raise ValueError("eps must be positive")


def _stabilize(d: np.ndarray, eps: float) -> np.ndarray:
    """Keep denominators with |d| > eps, replace the rest by eps * sign(d) (sign(0) = +1)."""
    return np.where(np.abs(d) > eps, d, np.where(d < 0, -eps, eps))


def _ab_fractions(z: np.ndarray, axis: int, cfg: LrpConfig) -> np.ndarray:
    """alpha * z+/sum(z+) - beta * z-/sum(z-), sums taken over ``axis`` (the inputs)."""
    zp = np.maximum(z, 0.0)
    out = cfg.alpha * zp / _stabilize(zp.sum(axis=axis, keepdims=True), cfg.eps)
    if cfg.beta:
        zn = np.minimum(z, 0.0)
        out = out - cfg.beta * zn / _stabilize(zn.sum(axis=axis, keepdims=True), cfg.eps)
    return out


def lrp_linear_rule(inputs, weights, relevance, config: LrpConfig = LrpConfig()) -> np.ndarray:
    """Input relevances of the map ``inputs @ weights`` given output relevances.

    ``inputs`` has shape (..., J), ``weights`` (..., J, K) and ``relevance``
    (..., K); leading dims broadcast. Returns an array shaped like ``inputs``.
    """
    x = np.asarray(inputs, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    r = np.asarray(relevance, dtype=np.float64)
    if w.ndim < 2 or x.shape[-1] != w.shape[-2] or r.shape[-1] != w.shape[-1]:
        raise ValueError(f"incompatible shapes inputs={x.shape} weights={w.shape} relevance={r.shape}")
    z = x[..., :, None] * w
    frac = _ab_fractions(z, -2, config)
    return (frac * r[..., None, :]).sum(axis=-1)


def _lrp_matmul_left(a, b, r, cfg):
    """Relevance for ``a`` in ``a @ b`` with ``b`` held as weights."""
    if a.ndim == 1:
        return lrp_linear_rule(a, b, r, cfg)
    if b.ndim == 1:
        return lrp_linear_rule(a, b[:, None], r[..., None], cfg)
    # a (..., n, k), b (..., k, m), r (..., n, m)
    z = a[..., :, :, None] * b[..., None, :, :]
    frac = _ab_fractions(z, -2, cfg)
    return _unbroadcast((frac * r[..., :, None, :]).sum(axis=-1), a.shape)


def _lrp_matmul_right(a, b, r, cfg):
    """Relevance for ``b`` in ``a @ b`` with ``a`` held as weights."""
    if b.ndim == 1:
        # r (..., n): treat as (b^T a^T)
        return _unbroadcast(_lrp_matmul_left(b, np.swapaxes(a, -1, -2), r, cfg), b.shape)
    at = np.swapaxes(a[None, :] if a.ndim == 1 else a, -1, -2)
    rt = np.swapaxes(r[..., None, :] if a.ndim == 1 else r, -1, -2)
    out = _lrp_matmul_left(np.swapaxes(b, -1, -2), at, rt, cfg)
    return _unbroadcast(np.swapaxes(out, -1, -2), b.shape)


def _split_abs(a, b, r):
    wa, wb = np.abs(a), np.abs(b)
    tot = wa + wb
    safe = np.where(tot > 0, tot, 1.0)
    fa = np.where(tot > 0, wa / safe, 0.5)
    return _unbroadcast(r * fa, a.shape), _unbroadcast(r * (1.0 - fa), b.shape)


def active_nodes(graph: Graph) -> np.ndarray:
    """Boolean mask of nodes whose value depends on at least one embedding lookup."""
    act = np.zeros(len(graph.nodes), dtype=bool)
    for node in graph.nodes:
        act[node.id] = node.op == "embed" or any(act[i] for i in node.inputs)
    return act


def _route(node: Node, vals, act, r, cfg) -> List[Optional[np.ndarray]]:
    op, a = node.op, node.attrs
    ins = node.inputs
    if op in _PASS_THROUGH:
        return [r]
    if op == "layer_norm":
        return [r, None, None]
    if op == "matmul":
        if act[ins[0]] or not act[ins[1]]:
            return [_lrp_matmul_left(vals[0], vals[1], r, cfg), None]
        return [None, _lrp_matmul_right(vals[0], vals[1], r, cfg)]
    if op == "attend":
        return [None, _lrp_matmul_right(vals[0], vals[1], r, cfg)]
    if op == "gate":
        return [None, _unbroadcast(r, vals[1].shape)]
    if op in ("add", "sub", "mul"):
        a0, a1 = act[ins[0]], act[ins[1]]
        if a0 and not a1:
            return [_unbroadcast(r, vals[0].shape), None]
        if a1 and not a0:
            return [None, _unbroadcast(r, vals[1].shape)]
        if op == "mul":
            return [_unbroadcast(0.5 * r, vals[0].shape), _unbroadcast(0.5 * r, vals[1].shape)]
        return list(_split_abs(vals[0], vals[1], r))
    if op == "sum":
        x = vals[0]
        axis = a["axis"]
        if axis is None:
            return [_ab_fractions(x.reshape(-1), 0, cfg).reshape(x.shape) * r]
        rr = r if a["keepdims"] else np.expand_dims(r, axis)
        return [_ab_fractions(x, axis, cfg) * rr]
    if op == "concat":
        sizes = np.cumsum([v.shape[a["axis"]] for v in vals])[:-1]
        return list(np.split(r, sizes, axis=a["axis"]))
    if op == "slice":
        out = np.zeros_like(vals[0])
        idx = [slice(None)] * vals[0].ndim
        idx[a["axis"]] = slice(a["start"], a["stop"])
        out[tuple(idx)] = r
        return [out]
    if op == "reshape":
        return [r.reshape(vals[0].shape)]
    if op == "transpose":
        return [np.transpose(r, np.argsort(a["axes"]))]
    if op == "pick":
        out = np.zeros_like(vals[0])
        np.put_along_axis(out, a["ids"][..., None], r[..., None], axis=-1)
        return [out]
    raise GraphError(f"no relevance rule for op {op!r}")


@dataclass
class EmbedRelevance:
    """Relevance collected at one embedding lookup, one value per token."""
    role: Optional[str]
    positions: np.ndarray  # (..., n) token positions
    values: np.ndarray  # same shape as positions
    ids: np.ndarray


def propagate(graph: Graph, seed, seed_relevance: np.ndarray, config: LrpConfig = LrpConfig()
              ) -> Tuple[Dict[int, np.ndarray], List[EmbedRelevance]]:
    """Push ``seed_relevance`` (shaped like the seed node) back to the embeddings.

    Returns the per-node relevance map and the per-token relevance of every
    embedding node that received any.
    """
    if not graph.nodes or graph._cleared:
        raise GraphError("relevance propagation needs a forward-evaluated graph")
    root = seed if isinstance(seed, Node) else graph.nodes[int(seed)]
    seed_relevance = np.asarray(seed_relevance, dtype=np.float64)
    if seed_relevance.shape != root.value.shape:
        raise ValueError(f"seed relevance shape {seed_relevance.shape} != node shape {root.value.shape}")
    act = active_nodes(graph)
    nodes = graph.nodes
    rel: Dict[int, np.ndarray] = {root.id: seed_relevance}
    collected: List[EmbedRelevance] = []
    for node in reversed(nodes[: root.id + 1]):
        r = rel.pop(node.id, None)
        if r is None or not act[node.id]:
            continue
        if node.op == "embed":
            per_tok = r.sum(axis=-1)
            ids = node.attrs["ids"]
            pos = node.attrs.get("pos")
            if pos is None:
                positions = np.broadcast_to(np.arange(ids.shape[-1]), ids.shape)
            else:
                positions = np.full(ids.shape, int(pos))
            collected.append(EmbedRelevance(node.attrs.get("role"), positions, per_tok, ids))
            continue
        vals = [nodes[i].value for i in node.inputs]
        for i, ri in zip(node.inputs, _route(node, vals, act, r, config)):
            if ri is None or not act[i]:
                continue
            prev = rel.get(i)
            rel[i] = ri if prev is None else prev + ri
    return rel, collected


# -- sequence-model attribution ------------------------------------------------

@dataclass
class RelevanceRecord:
    step: int  # 1-based output position t
    source: np.ndarray  # r_t(x_i), i = 1..S
    prefix: np.ndarray  # r_t(y_j), j = 1..t-1
    config: LrpConfig = field(default_factory=LrpConfig)
    raw_total: float = 0.0  # relevance reaching the tokens before rescaling

    @property
    def total(self) -> float:
        return float(self.source.sum() + self.prefix.sum())

    @property
    def source_contribution(self) -> float:
        return float(self.source.sum())


@dataclass
class ForcedPass:
    """A single-sentence forward pass with an explicit decoder prefix."""
    graph: Graph
    logits: Node  # (1, T, V)
    source: np.ndarray
    prefix: np.ndarray  # tokens fed after bos

    @property
    def steps(self) -> int:
        return self.logits.value.shape[1]


def forced_pass(model: Seq2Seq, source: Sequence[int], prefix: Sequence[int]) -> ForcedPass:
    """Record the decoder run on ``[bos] + prefix`` for one source sentence.

    Step t (1-based) predicts the token after ``prefix[:t-1]``, so there are
    ``len(prefix) + 1`` steps.
    """
    src = np.asarray(source, dtype=np.int64)[None, :]
    pre = np.asarray(prefix, dtype=np.int64).reshape(1, -1)
    g = model.graph(record=True)
    enc = model.encode(g, src)
    dec_in = np.concatenate([np.array([[BOS]], dtype=np.int64), pre], axis=1)
    logits = model.logits(g, enc, dec_in)
    return ForcedPass(g, logits, src[0], pre[0])


def relevance_for_step(fp: ForcedPass, t: int, config: LrpConfig = LrpConfig(),
                       target: Optional[int] = None) -> RelevanceRecord:
    """Relevance of the step-t output score on source and prefix tokens.

    The score of ``target`` (default: the argmax token at step t) is seeded
    with relevance 1 and propagated; bos receives relevance but is not a
    prefix token, so the totals on source and prefix tokens are rescaled
    to sum to exactly one.
    """
    T = fp.steps
    if not 1 <= t <= T:
        raise ValueError(f"step {t} outside 1..{T}")
    scores = fp.logits.value
    tok = int(np.argmax(scores[0, t - 1])) if target is None else int(target)
    seed = np.zeros_like(scores)
    seed[0, t - 1, tok] = 1.0
    _, collected = propagate(fp.graph, fp.logits, seed, config)
    src = np.zeros(len(fp.source))
    pre = np.zeros(t - 1)
    for er in collected:
        if er.role == "source":
            np.add.at(src, er.positions[0], er.values[0])
        elif er.role == "prefix":
            pos, val = er.positions[0], er.values[0]
            keep = (pos >= 1) & (pos <= t - 1)
            np.add.at(pre, pos[keep] - 1, val[keep])
    raw = float(src.sum() + pre.sum())
    if not np.isfinite(raw) or abs(raw) < 1e-300:
        raise FloatingPointError(f"no relevance reached the input tokens at step {t}")
    return RelevanceRecord(t, src / raw, pre / raw, config, raw)


def contribution_curve(model: Seq2Seq, pairs, positions: Optional[Sequence[int]] = None,
                       config: LrpConfig = LrpConfig(), prefix: str = "gold",
                       max_pairs: Optional[int] = None) -> List[Tuple[int, float, int]]:
    """Mean source contribution sum_i r_t(x_i) at each target position.

    ``pairs`` is a sequence of (source ids, target ids); only pairs with equal
    source and target length are used. ``prefix="gold"`` feeds the reference
    prefix; ``prefix="model"`` feeds the model's own greedy output.
    Returns rows ``(position, mean_source_contribution, n_sentences)`` for
    positions with at least one sentence.
    """
    if prefix not in ("gold", "model"):
        raise ValueError("prefix must be 'gold' or 'model'")
    usable = [(list(s), list(t)) for s, t in pairs if len(s) == len(t)]
    if max_pairs is not None:
        usable = usable[:max_pairs]
    if not usable:
        raise ValueError("no source-target pairs of equal length")
    if positions is None:
        positions = range(1, max(len(t) for _, t in usable) + 1)
    positions = sorted(set(int(p) for p in positions))
    sums = {p: 0.0 for p in positions}
    counts = {p: 0 for p in positions}
    if prefix == "model":
        from .evaluation import greedy_decode
    for src, tgt in usable:
        if prefix == "gold":
            pre = tgt[:-1]
        else:
            pre = greedy_decode(model, src, max_len=len(tgt)).tokens[:len(tgt) - 1]
        fp = forced_pass(model, src, pre)
        for p in positions:
            if p <= min(len(tgt), fp.steps):
                sums[p] += relevance_for_step(fp, p, config).source_contribution
                counts[p] += 1
    return [(p, sums[p] / counts[p], counts[p]) for p in positions if counts[p]]
