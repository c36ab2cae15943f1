"""Encoder-decoder models built on :class:`sslab.autodiff.Graph`.

Two architectures share one interface:

* ``lstm`` -- LSTM encoder, LSTM decoder with additive attention
  (query = previous top decoder state), attentional output layer.
* ``transformer`` -- pre-LayerNorm encoder/decoder stacks with
  scaled dot-product multi-head attention and sinusoidal positions.

Every method takes the graph to record into as its first argument. Pass a
``Graph(params, record=False)`` for inference; the math is identical.
Token id 0 is padding, 1 is bos, 2 is eos.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Graph, Node
from .datagen import BOS, EOS, PAD

__all__ = [
    "ModelConfig",
    "EncoderOutput",
    "DecoderState",
    "Seq2Seq",
    "LSTMSeq2Seq",
    "TransformerSeq2Seq",
    "build_model",
    "init_params",
    "attention",
    "encode",
    "decode_step",
    "pad_batch",
]

NEG_INF = -1e9


@dataclass
class ModelConfig:
    arch: str = "lstm"
    src_vocab: int = 43
    tgt_vocab: int = 43
    emb_dim: int = 32
    hidden_dim: int = 64
    layers: Optional[int] = None
    heads: int = 2
    max_len: int = 32

    def __post_init__(self):
        if self.arch not in ("lstm", "transformer"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.layers is None:
            self.layers = 1 if self.arch == "lstm" else 2
        for name in ("src_vocab", "tgt_vocab", "emb_dim", "hidden_dim", "layers", "heads", "max_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.arch == "transformer" and self.hidden_dim % self.heads:
            raise ValueError("heads must divide hidden_dim")
        if min(self.src_vocab, self.tgt_vocab) <= EOS:
            raise ValueError("vocabularies must include the three special tokens")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class EncoderOutput:
    states: Node  # (B, S, H)
    mask: np.ndarray  # (B, S) bool, True for real tokens
    extras: Dict = field(default_factory=dict)

    @property
    def bias(self) -> np.ndarray:
        """Additive attention bias (B, S): 0 for tokens, -1e9 for padding."""
        return np.where(self.mask, 0.0, NEG_INF)


@dataclass
class DecoderState:
    """Recurrent carry (LSTM) or per-layer key/value cache (transformer)."""

    arch: str
    step: int
    carry: Dict


def pad_batch(seqs: Sequence[Sequence[int]], length: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Right-pad id sequences with PAD. Returns (ids, mask)."""
    length = max(len(s) for s in seqs) if length is None else length
    ids = np.full((len(seqs), length), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, ids != PAD


def _uniform(rng, shape, scale):
    return rng.uniform(-scale, scale, size=shape)


def init_params(config: ModelConfig, seed: int = 0) -> Dict[str, np.ndarray]:
    """Deterministic parameter initialisation for ``config``."""
    rng = np.random.default_rng([seed, 2])
    E, H, L = config.emb_dim, config.hidden_dim, config.layers
    Vs, Vt = config.src_vocab, config.tgt_vocab
    p: Dict[str, np.ndarray] = {}

    def glorot(name, fan_in, fan_out):
        p[name] = _uniform(rng, (fan_in, fan_out), math.sqrt(6.0 / (fan_in + fan_out)))

    if config.arch == "lstm":
        p["enc.emb"] = _uniform(rng, (Vs, E), 0.1)
        p["dec.emb"] = _uniform(rng, (Vt, E), 0.1)
        for side in ("enc", "dec"):
            for i in range(L):
                n_in = E if i == 0 else H
                if side == "dec" and i == 0:
                    n_in = E + H
                p[f"{side}.l{i}.W"] = _uniform(rng, (n_in + H, 4 * H), 0.1)
                b = np.zeros(4 * H)
                b[H:2 * H] = 1.0  # forget gate
                p[f"{side}.l{i}.b"] = b
        p["att.Wq"] = _uniform(rng, (H, H), 0.1)
        p["att.Wk"] = _uniform(rng, (H, H), 0.1)
        p["att.v"] = _uniform(rng, (H,), 0.1)
        glorot("out.Wc", 2 * H, H)
        glorot("out.Wo", H, Vt)
        p["out.bo"] = np.zeros(Vt)
    else:
        F = 2 * H
        p["enc.emb"] = _uniform(rng, (Vs, E), 0.1)
        p["dec.emb"] = _uniform(rng, (Vt, E), 0.1)
        glorot("enc.proj", E, H)
        glorot("dec.proj", E, H)
        blocks = {"enc": ("self",), "dec": ("self", "cross")}
        for side, attns in blocks.items():
            for i in range(L):
                pre = f"{side}.l{i}"
                for a in attns:
                    p[f"{pre}.{a}.ln.g"] = np.ones(H)
                    p[f"{pre}.{a}.ln.b"] = np.zeros(H)
                    for w in ("Wq", "Wk", "Wv", "Wo"):
                        glorot(f"{pre}.{a}.{w}", H, H)
                p[f"{pre}.ff.ln.g"] = np.ones(H)
                p[f"{pre}.ff.ln.b"] = np.zeros(H)
                glorot(f"{pre}.ff.W1", H, F)
                p[f"{pre}.ff.b1"] = np.zeros(F)
                glorot(f"{pre}.ff.W2", F, H)
                p[f"{pre}.ff.b2"] = np.zeros(H)
            p[f"{side}.lnf.g"] = np.ones(H)
            p[f"{side}.lnf.b"] = np.zeros(H)
        glorot("out.Wo", H, Vt)
        p["out.bo"] = np.zeros(Vt)
    return {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in p.items()}


def attention(query: np.ndarray, keys: np.ndarray, values: Optional[np.ndarray] = None,
              scale: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Dot-product attention for one query over a list of keys.

    Returns ``(weights, context)`` where ``context = weights @ values``
    (``values`` default to ``keys``).
    """
    keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    if keys.shape[0] == 0 or keys.size == 0:
        raise ValueError("attention needs at least one key")
    query = np.asarray(query, dtype=np.float64)
    if query.shape[-1] != keys.shape[-1]:
        raise ValueError(f"query dim {query.shape[-1]} != key dim {keys.shape[-1]}")
    values = keys if values is None else np.asarray(values, dtype=np.float64)
    g = Graph(record=False)
    scores = g.matmul(g.const(keys), g.const(query))
    if scale:
        scores = g.scale(scores, 1.0 / math.sqrt(keys.shape[-1]))
    weights = g.softmax(scores)
    context = g.attend(g.reshape(weights, (1, -1)), g.const(values))
    return weights.value, context.value[0]


class Seq2Seq:
    """Shared plumbing; subclasses implement ``encode``, ``init_state``,
    ``step`` and ``logits``."""

    def __init__(self, config: ModelConfig, params: Dict[str, np.ndarray]):
        self.config = config
        self.params = params

    def graph(self, record: bool = True) -> Graph:
        return Graph(self.params, record=record)

    def _check_ids(self, ids: np.ndarray, vocab: int, what: str):
        if ids.size == 0:
            raise ValueError(f"{what} is empty")
        if ids.min() < 0 or ids.max() >= vocab:
            raise ValueError(f"{what} contains ids outside [0, {vocab})")

    def encode(self, g: Graph, src: np.ndarray, mask: Optional[np.ndarray] = None) -> EncoderOutput:
        raise NotImplementedError

    def init_state(self, g: Graph, enc: EncoderOutput) -> DecoderState:
        raise NotImplementedError

    def step(self, g: Graph, prev: np.ndarray, state: DecoderState, enc: EncoderOutput) -> Tuple[Node, DecoderState]:
        raise NotImplementedError

    def logits(self, g: Graph, enc: EncoderOutput, dec_in: np.ndarray) -> Node:
        """Teacher-forced scores (B, T, V) for decoder inputs ``dec_in`` (B, T)."""
        raise NotImplementedError

    def _check_state(self, state: DecoderState, enc: EncoderOutput):
        if state.arch != self.config.arch:
            raise ValueError(f"state for {state.arch!r} given to {self.config.arch!r} model")
        if state.step >= self.config.max_len + 1:
            raise ValueError("decoder state exceeds max_len")


class LSTMSeq2Seq(Seq2Seq):

    def _cell(self, g, x, h, c, prefix):
        H = self.config.hidden_dim
        z = g.concat([x, h], axis=-1) @ g.param(prefix + ".W") + g.param(prefix + ".b")
        i = g.sigmoid(g.slice(z, 0, H))
        f = g.sigmoid(g.slice(z, H, 2 * H))
        cand = g.tanh(g.slice(z, 2 * H, 3 * H))
        o = g.sigmoid(g.slice(z, 3 * H, 4 * H))
        c_new = g.gate(f, c) + g.gate(i, cand)
        h_new = g.gate(o, g.tanh(c_new))
        return h_new, c_new

    def encode(self, g, src, mask=None):
        src = np.asarray(src, dtype=np.int64)
        if src.ndim == 1:
            src = src[None, :]
        self._check_ids(src, self.config.src_vocab, "source")
        mask = src != PAD if mask is None else np.asarray(mask, dtype=bool)
        B, S = src.shape
        H, L = self.config.hidden_dim, self.config.layers
        zeros = g.const(np.zeros((B, H)))
        hs, cs = [zeros] * L, [zeros] * L
        table = g.param("enc.emb")
        outs = []
        for t in range(S):
            x = g.embed(table, src[:, t], role="source", pos=t)
            m = mask[:, t:t + 1].astype(np.float64)
            for i in range(L):
                h_new, c_new = self._cell(g, x, hs[i], cs[i], f"enc.l{i}")
                if not m.all():
                    h_new = g.mul(h_new, m) + g.mul(hs[i], 1.0 - m)
                    c_new = g.mul(c_new, m) + g.mul(cs[i], 1.0 - m)
                hs[i], cs[i] = h_new, c_new
                x = h_new
            outs.append(g.reshape(x, (B, 1, H)))
        states = g.concat(outs, axis=1) if S > 1 else outs[0]
        keys = states @ g.param("att.Wk")
        return EncoderOutput(states, mask, {"keys": keys, "h": hs, "c": cs})

    def init_state(self, g, enc):
        B = enc.mask.shape[0]
        return DecoderState("lstm", 0, {"h": list(enc.extras["h"]), "c": list(enc.extras["c"]), "B": B})

    def _attend(self, g, query, enc):
        B, S = enc.mask.shape
        H = self.config.hidden_dim
        q = g.reshape(query @ g.param("att.Wq"), (B, 1, H))
        scores = g.tanh(q + enc.extras["keys"]) @ g.param("att.v")  # (B, S)
        if not enc.mask.all():
            scores = scores + enc.bias
        weights = g.softmax(scores)
        ctx = g.attend(g.reshape(weights, (B, 1, S)), enc.states)
        return g.reshape(ctx, (B, H)), weights

    def step(self, g, prev, state, enc):
        self._check_state(state, enc)
        prev = np.asarray(prev, dtype=np.int64).reshape(-1)
        self._check_ids(prev, self.config.tgt_vocab, "previous token")
        L = self.config.layers
        hs, cs = list(state.carry["h"]), list(state.carry["c"])
        ctx, weights = self._attend(g, hs[-1], enc)
        x = g.concat([g.embed(g.param("dec.emb"), prev, role="prefix", pos=state.step), ctx], axis=-1)
        for i in range(L):
            hs[i], cs[i] = self._cell(g, x, hs[i], cs[i], f"dec.l{i}")
            x = hs[i]
        att_h = g.tanh(g.concat([x, ctx], axis=-1) @ g.param("out.Wc"))
        logits = att_h @ g.param("out.Wo") + g.param("out.bo")
        new = DecoderState("lstm", state.step + 1, {"h": hs, "c": cs, "B": state.carry["B"],
                                                      "weights": weights})
        return logits, new

    def logits(self, g, enc, dec_in):
        dec_in = np.asarray(dec_in, dtype=np.int64)
        B, T = dec_in.shape
        V = self.config.tgt_vocab
        state = self.init_state(g, enc)
        steps = []
        for t in range(T):
            lt, state = self.step(g, dec_in[:, t], state, enc)
            steps.append(g.reshape(lt, (B, 1, V)))
        return g.concat(steps, axis=1) if T > 1 else steps[0]


def sinusoid_table(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class TransformerSeq2Seq(Seq2Seq):

    def __init__(self, config, params):
        super().__init__(config, params)
        self._pe = sinusoid_table(config.max_len + 2, config.hidden_dim)

    def _mha(self, g, xq, kv, prefix, bias):
        """Multi-head attention. ``kv`` is a (K, V) pair of projected nodes."""
        H, nh = self.config.hidden_dim, self.config.heads
        dh = H // nh
        q = xq @ g.param(prefix + ".Wq")
        k, v = kv
        heads = []
        for h in range(nh):
            qh = g.slice(q, h * dh, (h + 1) * dh)
            kh = g.slice(k, h * dh, (h + 1) * dh)
            vh = g.slice(v, h * dh, (h + 1) * dh)
            s = g.scale(g.matmul(qh, g.transpose(kh, (0, 2, 1))), 1.0 / math.sqrt(dh))
            if bias is not None:
                s = s + bias
            heads.append(g.attend(g.softmax(s), vh))
        o = g.concat(heads, axis=-1) if nh > 1 else heads[0]
        return o @ g.param(prefix + ".Wo")

    def _kv(self, g, x, prefix):
        return x @ g.param(prefix + ".Wk"), x @ g.param(prefix + ".Wv")

    def _ln(self, g, x, prefix):
        return g.layer_norm(x, g.param(prefix + ".g"), g.param(prefix + ".b"))

    def _ff(self, g, x, prefix):
        h = g.relu(x @ g.param(prefix + ".W1") + g.param(prefix + ".b1"))
        return h @ g.param(prefix + ".W2") + g.param(prefix + ".b2")

    def _embed(self, g, side, ids, role, offset=0):
        T = ids.shape[1]
        e = g.embed(g.param(side + ".emb"), ids, role=role, pos=None if T > 1 or offset == 0 else offset)
        return e @ g.param(side + ".proj") + self._pe[offset:offset + T]

    def encode(self, g, src, mask=None):
        src = np.asarray(src, dtype=np.int64)
        if src.ndim == 1:
            src = src[None, :]
        self._check_ids(src, self.config.src_vocab, "source")
        mask = src != PAD if mask is None else np.asarray(mask, dtype=bool)
        bias = None if mask.all() else np.where(mask, 0.0, NEG_INF)[:, None, :]
        x = self._embed(g, "enc", src, "source")
        for i in range(self.config.layers):
            pre = f"enc.l{i}.self"
            h = self._ln(g, x, pre + ".ln")
            x = x + self._mha(g, h, self._kv(g, h, pre), pre, bias)
            x = x + self._ff(g, self._ln(g, x, f"enc.l{i}.ff.ln"), f"enc.l{i}.ff")
        states = self._ln(g, x, "enc.lnf")
        cross = [self._kv(g, states, f"dec.l{i}.cross") for i in range(self.config.layers)]
        return EncoderOutput(states, mask, {"cross": cross, "bias": bias})

    def _decode_layers(self, g, x, enc, self_kv, self_bias):
        for i in range(self.config.layers):
            pre = f"dec.l{i}"
            h = self._ln(g, x, pre + ".self.ln")
            kv = self_kv(i, h)
            x = x + self._mha(g, h, kv, pre + ".self", self_bias)
            h = self._ln(g, x, pre + ".cross.ln")
            x = x + self._mha(g, h, enc.extras["cross"][i], pre + ".cross", enc.extras["bias"])
            x = x + self._ff(g, self._ln(g, x, pre + ".ff.ln"), pre + ".ff")
        x = self._ln(g, x, "dec.lnf")
        return x @ g.param("out.Wo") + g.param("out.bo")

    def init_state(self, g, enc):
        return DecoderState("transformer", 0, {"k": [None] * self.config.layers, "v": [None] * self.config.layers})

    def step(self, g, prev, state, enc):
        self._check_state(state, enc)
        prev = np.asarray(prev, dtype=np.int64).reshape(-1, 1)
        self._check_ids(prev, self.config.tgt_vocab, "previous token")
        t = state.step
        ks, vs = list(state.carry["k"]), list(state.carry["v"])

        def self_kv(i, h):
            k, v = self._kv(g, h, f"dec.l{i}.self")
            ks[i] = k if ks[i] is None else g.concat([ks[i], k], axis=1)
            vs[i] = v if vs[i] is None else g.concat([vs[i], v], axis=1)
            return ks[i], vs[i]

        x = self._embed(g, "dec", prev, "prefix", offset=t)
        out = self._decode_layers(g, x, enc, self_kv, None)
        B, V = prev.shape[0], self.config.tgt_vocab
        return g.reshape(out, (B, V)), DecoderState("transformer", t + 1, {"k": ks, "v": vs})

    def logits(self, g, enc, dec_in):
        dec_in = np.asarray(dec_in, dtype=np.int64)
        T = dec_in.shape[1]
        causal = np.triu(np.full((T, T), NEG_INF), k=1)[None, :, :]
        x = self._embed(g, "dec", dec_in, "prefix")
        return self._decode_layers(g, x, enc, lambda i, h: self._kv(g, h, f"dec.l{i}.self"), causal)


def detach(enc: EncoderOutput, g: Graph) -> EncoderOutput:
    """Copy of ``enc`` whose nodes are constants of ``g`` (no gradient path)."""

    def const(x):
        if isinstance(x, Node):
            return g.const(x.value)
        if isinstance(x, (list, tuple)):
            return type(x)(const(v) for v in x)
        return x

    return EncoderOutput(const(enc.states), enc.mask, {k: const(v) for k, v in enc.extras.items()})


def build_model(config: ModelConfig, params: Optional[Dict[str, np.ndarray]] = None, seed: int = 0) -> Seq2Seq:
    params = init_params(config, seed) if params is None else params
    cls = LSTMSeq2Seq if config.arch == "lstm" else TransformerSeq2Seq
    return cls(config, params)


def encode(model: Seq2Seq, source: Sequence[int]) -> np.ndarray:
    """Encoder vectors (S, H) for one source sentence."""
    g = model.graph(record=False)
    return model.encode(g, np.asarray(source)[None, :]).states.value[0]


def decode_step(model: Seq2Seq, prev: int, state: Optional[DecoderState], enc: EncoderOutput,
                g: Optional[Graph] = None) -> Tuple[np.ndarray, DecoderState]:
    """Log-probabilities (B, V) of the next token and the advanced state."""
    g = model.graph(record=False) if g is None else g
    if state is None:
        state = model.init_state(g, enc)
    logits, state = model.step(g, np.atleast_1d(prev), state, enc)
    return g.log_softmax(logits).value, state
