"""Decoding, teacher-forced inference, BLEU, length bins and the sign test.

All argmax decisions break ties toward the lowest token id (``np.argmax``
semantics), so every decode is a pure function of checkpoint and source.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .datagen import BOS, EOS, PAD
from .models import Seq2Seq, pad_batch

MODES = ("MP", "TF")


@dataclass
class DecodeResult:
    tokens: List[int]
    mode: str  # "MP" (model prefix) or "TF" (teacher forced)
    logprobs: List[float]

    def __len__(self):
        return len(self.tokens)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def greedy_decode_batch(model: Seq2Seq, sources: Sequence[Sequence[int]],
                        max_len: Optional[int] = None) -> List[DecodeResult]:
    """Greedy decoding of several sources at once (rows stop independently at eos)."""
    max_len = model.config.max_len if max_len is None else int(max_len)
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    g = model.graph(record=False)
    src, mask = pad_batch(sources)
    enc = model.encode(g, src, mask)
    state = model.init_state(g, enc)
    B = src.shape[0]
    prev = np.full(B, BOS, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    toks: List[List[int]] = [[] for _ in range(B)]
    lps: List[List[float]] = [[] for _ in range(B)]
    for _ in range(max_len):
        logits, state = model.step(g, prev, state, enc)
        logp = _log_softmax(logits.value)
        nxt = np.argmax(logp, axis=-1)
        for i in np.flatnonzero(~done):
            lps[i].append(float(logp[i, nxt[i]]))
            if nxt[i] == EOS:
                done[i] = True
            else:
                toks[i].append(int(nxt[i]))
        if done.all():
            break
        prev = np.where(done, PAD, nxt)
    return [DecodeResult(t, "MP", lp) for t, lp in zip(toks, lps)]


def greedy_decode(model: Seq2Seq, source: Sequence[int], max_len: Optional[int] = None) -> DecodeResult:
    """Decode one source, each token the argmax given the model's own prefix.

    Stops at eos (not included in ``tokens``) or after ``max_len`` steps.
    """
    return greedy_decode_batch(model, [source], max_len)[0]


def teacher_forced_infer_batch(model: Seq2Seq, sources: Sequence[Sequence[int]],
                               references: Sequence[Sequence[int]]) -> List[DecodeResult]:
    if len(sources) != len(references):
        raise ValueError("sources and references differ in number")
    if any(len(r) == 0 for r in references):
        raise ValueError("reference must be nonempty")
    g = model.graph(record=False)
    src, mask = pad_batch(sources)
    refs, _ = pad_batch(references)
    enc = model.encode(g, src, mask)
    dec_in = np.concatenate([np.full((len(references), 1), BOS, dtype=np.int64), refs[:, :-1]], axis=1)
    logp = _log_softmax(model.logits(g, enc, dec_in).value)
    out = []
    for i, ref in enumerate(references):
        L = len(ref)
        nxt = np.argmax(logp[i, :L], axis=-1)
        out.append(DecodeResult([int(t) for t in nxt], "TF", [float(logp[i, j, nxt[j]]) for j in range(L)]))
    return out


def teacher_forced_infer(model: Seq2Seq, source: Sequence[int], reference: Sequence[int]) -> DecodeResult:
    """Argmax at every step with the gold prefix fed; output length = reference length."""
    return teacher_forced_infer_batch(model, [source], [reference])[0]


def decode_corpus(model: Seq2Seq, sources, references, mode: str = "MP",
                  batch_size: int = 64) -> List[List[int]]:
    """Hypotheses for a whole corpus in the given mode (MP or TF)."""
    mode = mode.upper()
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    hyps: List[List[int]] = []
    for s in range(0, len(sources), batch_size):
        chunk = list(sources[s:s + batch_size])
        if mode == "MP":
            res = greedy_decode_batch(model, chunk)
        else:
            res = teacher_forced_infer_batch(model, chunk, list(references[s:s + batch_size]))
        hyps.extend(r.tokens for r in res)
    return hyps


# -- BLEU ---------------------------------------------------------------------

@dataclass
class BleuReport:
    bleu: float
    precisions: List[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    @property
    def score(self) -> float:
        """BLEU x 100, the reporting convention."""
        return 100.0 * self.bleu


def _ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def _clipped_counts(hyp, ref, max_n):
    match = [0] * max_n
    total = [0] * max_n
    for n in range(1, max_n + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        match[n - 1] = sum(min(c, r[g]) for g, c in h.items())
        total[n - 1] = max(len(hyp) - n + 1, 0)
    return match, total


def _brevity_penalty(hyp_len: int, ref_len: int) -> float:
    if hyp_len == 0:
        return 0.0
    return min(1.0, math.exp(1.0 - ref_len / hyp_len))


def bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence], max_n: int = 4) -> BleuReport:
    """Corpus BLEU with clipped n-gram counts, no smoothing and a corpus-level brevity penalty."""
    if len(hypotheses) != len(references):
        raise ValueError("hypothesis and reference lists differ in length")
    if not hypotheses:
        raise ValueError("BLEU of an empty corpus is undefined")
    match = [0] * max_n
    total = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        m, t = _clipped_counts(list(hyp), list(ref), max_n)
        match = [a + b for a, b in zip(match, m)]
        total = [a + b for a, b in zip(total, t)]
        hyp_len += len(hyp)
        ref_len += len(ref)
    precisions = [m / t if t else 0.0 for m, t in zip(match, total)]
    bp = _brevity_penalty(hyp_len, ref_len)
    if min(precisions) == 0.0:
        score = 0.0
    else:
        score = bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return BleuReport(score, precisions, bp, hyp_len, ref_len)


def sentence_bleu(hypothesis: Sequence, reference: Sequence, max_n: int = 4) -> float:
    """Sentence BLEU with add-one smoothing of the n>1 precisions (used for the sign test)."""
    match, total = _clipped_counts(list(hypothesis), list(reference), max_n)
    if total[0] == 0 or match[0] == 0:
        return 0.0
    logs = [math.log(match[0] / total[0])]
    logs += [math.log((m + 1) / (t + 1)) for m, t in zip(match[1:], total[1:])]
    return _brevity_penalty(len(hypothesis), len(reference)) * math.exp(sum(logs) / max_n)


def forgetting_delta(mp_bleu: float, tf_bleu: float) -> float:
    """TF minus MP; negative values indicate the model has forgotten how to use gold prefixes."""
    return tf_bleu - mp_bleu


def length_binned_bleu(hypotheses, references, width: int = 20) -> List[Tuple[int, int, float, int]]:
    """(bin_low, bin_high, bleu, n_pairs) for reference-length bins [1,w], [w+1,2w], ...

    Empty bins are omitted.
    """
    if width < 1:
        raise ValueError("bin width must be at least 1")
    bins: Dict[int, List[int]] = {}
    for i, ref in enumerate(references):
        bins.setdefault((max(len(ref), 1) - 1) // width, []).append(i)
    rows = []
    for b in sorted(bins):
        idx = bins[b]
        rep = bleu([hypotheses[i] for i in idx], [references[i] for i in idx])
        rows.append((b * width + 1, (b + 1) * width, rep.bleu, len(idx)))
    return rows


def sign_test(scores_a: Sequence[float], scores_b: Sequence[float]) -> float:
    """Two-sided exact binomial sign test on per-item wins and losses (ties dropped)."""
    if len(scores_a) != len(scores_b):
        raise ValueError("score lists differ in length")
    wins = sum(a > b for a, b in zip(scores_a, scores_b))
    losses = sum(a < b for a, b in zip(scores_a, scores_b))
    n = wins + losses
    if n == 0:
        return 1.0
    k = min(wins, losses)
    tail = sum(math.comb(n, i) for i in range(k + 1)) / 2.0 ** n
    return min(1.0, 2.0 * tail)
