"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np

from .datagen import PAYLOAD_OFFSET


def check_token_sequences(seqs, name: str = "X") -> List[Tuple[int, ...]]:
    """Return ``seqs`` as a list of int tuples; reject empty or non-integer data.

    Accepts any iterable of sequences, including ragged lists and 2-D
    integer arrays.
    """
    if isinstance(seqs, (str, bytes)):
        raise TypeError(f"{name} must be a collection of token sequences, not a string")
    try:
        out = []
        for i, s in enumerate(seqs):
            arr = np.asarray(s)
            if arr.ndim != 1:
                raise ValueError(f"{name}[{i}] is not a flat token sequence")
            if arr.size == 0:
                raise ValueError(f"{name}[{i}] is empty")
            if not np.issubdtype(arr.dtype, np.integer):
                if not np.issubdtype(arr.dtype, np.floating) or not np.all(arr == np.round(arr)):
                    raise ValueError(f"{name}[{i}] contains non-integer tokens")
            out.append(tuple(int(t) for t in arr))
    except TypeError:
        raise TypeError(f"{name} must be an iterable of token sequences") from None
    if not out:
        raise ValueError(f"{name} contains no sequences")
    return out


def check_payload_tokens(seqs: Sequence[Sequence[int]], name: str = "X") -> None:
    for i, s in enumerate(seqs):
        if min(s) < PAYLOAD_OFFSET:
            raise ValueError(f"{name}[{i}] uses a reserved token id (< {PAYLOAD_OFFSET})")


def check_paired(X, y) -> Tuple[List[Tuple[int, ...]], List[Tuple[int, ...]]]:
    X = check_token_sequences(X, "X")
    y = check_token_sequences(y, "y")
    if len(X) != len(y):
        raise ValueError(f"X and y have different lengths ({len(X)} vs {len(y)})")
    check_payload_tokens(X, "X")
    check_payload_tokens(y, "y")
    return X, y


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or int(value) != value or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_probability(value, name: str) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return value
