"""Synthetic transduction corpora, vocabularies and the corpus text format.

File format (UTF-8, LF line endings)::

    # {"kind": "lexswap", "seed": 7, ...}      <- manifest header, JSON after "# "
    5 9 7\t19 15 17                            <- source tokens TAB target tokens

Tokens are positive integers. Payload tokens start at 3 so that the ids
0, 1, 2 stay free for pad, bos and eos in every vocabulary.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Hashable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

PAD, BOS, EOS = 0, 1, 2
SPECIALS = ("<pad>", "<bos>", "<eos>")
PAYLOAD_OFFSET = 3
TASKS = ("copy", "reverse", "lexswap")


class CorpusFormatError(ValueError):
    """A corpus file line could not be parsed."""

    def __init__(self, path, lineno: int, detail: str):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {detail}")


@dataclass(frozen=True)
class SequencePair:
    source: Tuple[int, ...]
    target: Tuple[int, ...]

    def __post_init__(self):
        if not self.source or not self.target:
            raise ValueError("source and target must be nonempty")

    @property
    def source_length(self) -> int:
        return len(self.source)

    @property
    def target_length(self) -> int:
        return len(self.target)


@dataclass
class Corpus:
    pairs: List[SequencePair]
    split: str = "train"
    manifest: Dict = field(default_factory=dict)

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    @property
    def sources(self) -> List[Tuple[int, ...]]:
        return [p.source for p in self.pairs]

    @property
    def targets(self) -> List[Tuple[int, ...]]:
        return [p.target for p in self.pairs]

    def content_hash(self) -> str:
        """sha256 over the pair lines (the manifest is not part of the content)."""
        h = hashlib.sha256()
        for p in self.pairs:
            h.update(format_pair(p).encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()


class Vocab:
    """Token <-> id mapping with pad=0, bos=1, eos=2 reserved.

    Payload tokens get ids 3, 4, ... in sorted token order.
    """

    def __init__(self, tokens: Iterable[Hashable]):
        payload = sorted(set(tokens), key=lambda t: (type(t).__name__, t))
        self.itos: List = list(SPECIALS) + payload
        self.stoi: Dict = {t: i for i, t in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, tokens: Sequence) -> List[int]:
        try:
            return [self.stoi[t] for t in tokens]
        except KeyError as exc:
            raise KeyError(f"token {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Sequence[int]) -> List:
        return [self.itos[i] for i in ids]

    def to_list(self) -> List:
        return self.itos[len(SPECIALS):]

    @classmethod
    def from_list(cls, payload: Sequence) -> "Vocab":
        return cls(payload)


def build_vocab(corpus: Corpus, side: str = "source") -> Vocab:
    if not len(corpus):
        raise ValueError("cannot build a vocabulary from an empty corpus")
    seqs = corpus.sources if side == "source" else corpus.targets
    return Vocab(t for s in seqs for t in s)


def lexswap_target(source: Sequence[int], mapping: Dict[int, int]) -> Tuple[int, ...]:
    """Map every token, then swap each adjacent pair (0,1), (2,3), ..."""
    mapped = [mapping[t] for t in source]
    for m in range(0, len(mapped) - 1, 2):
        mapped[m], mapped[m + 1] = mapped[m + 1], mapped[m]
    return tuple(mapped)


def lexswap_inverse(target: Sequence[int], mapping: Dict[int, int]) -> Tuple[int, ...]:
    inverse = {v: k for k, v in mapping.items()}
    unswapped = list(target)
    for m in range(0, len(unswapped) - 1, 2):
        unswapped[m], unswapped[m + 1] = unswapped[m + 1], unswapped[m]
    return tuple(inverse[t] for t in unswapped)


def lexswap_mapping(vocab_size: int, seed: int) -> Dict[int, int]:
    """Random bijection of the payload tokens, derived from ``seed``."""
    tokens = np.arange(PAYLOAD_OFFSET, PAYLOAD_OFFSET + vocab_size)
    perm = np.random.default_rng([seed, 1]).permutation(tokens)
    return {int(a): int(b) for a, b in zip(tokens, perm)}


def gen_task(kind: str, n: int, length_range: Tuple[int, int] = (5, 15),
             vocab_size: int = 40, seed: int = 0) -> Corpus:
    """Generate ``n`` distinct pairs for one of ``copy``, ``reverse``, ``lexswap``."""
    lo, hi = length_range
    if kind not in TASKS:
        raise ValueError(f"unknown task {kind!r}; expected one of {TASKS}")
    if n < 1 or lo < 1 or hi < lo:
        raise ValueError(f"infeasible parameters n={n}, length_range={length_range}")
    if vocab_size < 4:
        raise ValueError("payload vocabulary must have at least 4 tokens")
    capacity = sum(vocab_size ** L for L in range(lo, hi + 1))
    if capacity < n:
        raise ValueError(f"only {capacity} distinct sources exist, cannot draw {n}")

    rng = np.random.default_rng([seed, 0])
    mapping = lexswap_mapping(vocab_size, seed) if kind == "lexswap" else None
    seen = set()
    pairs = []
    while len(pairs) < n:
        length = int(rng.integers(lo, hi + 1))
        x = tuple(int(t) for t in rng.integers(PAYLOAD_OFFSET, PAYLOAD_OFFSET + vocab_size, size=length))
        if x in seen:
            continue
        seen.add(x)
        if kind == "copy":
            y = x
        elif kind == "reverse":
            y = x[::-1]
        else:
            y = lexswap_target(x, mapping)
        pairs.append(SequencePair(x, y))
    manifest = {"kind": kind, "n": n, "length_range": [lo, hi], "vocab_size": vocab_size, "seed": seed}
    return Corpus(pairs, split="all", manifest=manifest)


def split_corpus(corpus: Corpus, sizes: Tuple[int, int, int] = (4500, 250, 250),
                 seed: int = 0) -> Dict[str, Corpus]:
    """Seeded partition into train/valid/test. Sizes must sum to ``len(corpus)``."""
    if sum(sizes) != len(corpus):
        raise ValueError(f"split sizes {sizes} do not sum to corpus size {len(corpus)}")
    perm = np.random.default_rng([seed, 2]).permutation(len(corpus))
    out = {}
    start = 0
    for name, size in zip(("train", "valid", "test"), sizes):
        idx = sorted(perm[start:start + size])
        start += size
        manifest = dict(corpus.manifest, split_sizes=list(sizes))
        out[name] = Corpus([corpus.pairs[i] for i in idx], split=name, manifest=manifest)
    return out


def format_pair(pair: SequencePair) -> str:
    return " ".join(map(str, pair.source)) + "\t" + " ".join(map(str, pair.target))


def _parse_tokens(field_text: str, path, lineno: int) -> Tuple[int, ...]:
    try:
        toks = tuple(int(t) for t in field_text.split(" "))
    except ValueError:
        raise CorpusFormatError(path, lineno, f"non-integer token in {field_text!r}") from None
    if any(t < PAYLOAD_OFFSET for t in toks):
        raise CorpusFormatError(path, lineno, "reserved token id inside payload")
    return toks


def write_corpus(path, corpus: Corpus) -> None:
    path = Path(path)
    header = dict(corpus.manifest, split=corpus.split)
    lines = ["# " + json.dumps(header, sort_keys=True)]
    lines.extend(format_pair(p) for p in corpus.pairs)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_corpus(path) -> Corpus:
    path = Path(path)
    manifest: Dict = {}
    pairs = []
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if line.startswith("#"):
                try:
                    manifest.update(json.loads(line[1:].strip() or "{}"))
                except json.JSONDecodeError as exc:
                    raise CorpusFormatError(path, lineno, f"bad manifest header: {exc}") from None
                continue
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise CorpusFormatError(path, lineno, f"expected 2 tab-separated fields, got {len(fields)}")
            src, tgt = (_parse_tokens(f, path, lineno) for f in fields)
            if not src or not tgt:
                raise CorpusFormatError(path, lineno, "empty sequence")
            pairs.append(SequencePair(src, tgt))
    split = manifest.pop("split", "train")
    return Corpus(pairs, split=split, manifest=manifest)
