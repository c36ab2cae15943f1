"""Independent reference implementations used as test oracles.

Nothing here imports the code under test except :class:`sslab.autodiff.Graph`
for building the graphs that the numpy twins mirror.
"""

from __future__ import annotations

import math
from collections import Counter
from typing import Callable, Dict, List, Tuple

import numpy as np

from sslab.autodiff import Graph

# -- finite differences ----------------------------------------------------


def central_difference(f: Callable[[Dict[str, np.ndarray]], float], params: Dict[str, np.ndarray],
                       eps: float = 1e-5) -> Dict[str, np.ndarray]:
    """Numeric gradient of a pure numpy function of the parameter dict."""
    out = {}
    for name, theta in params.items():
        g = np.zeros_like(theta)
        flat, gflat = theta.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f(params)
            flat[i] = orig - eps
            down = f(params)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
        out[name] = g
    return out


def max_rel_error(a: Dict[str, np.ndarray], b: Dict[str, np.ndarray], floor: float = 1e-8) -> float:
    worst = 0.0
    for name in a:
        x, y = a[name].reshape(-1), b[name].reshape(-1)
        err = np.abs(x - y) / np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        worst = max(worst, float(err.max(initial=0.0)))
    return worst


# -- random graphs with a numpy twin ---------------------------------------

def _np_softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _np_log_softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _np_layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def random_graph(rng: np.random.Generator, n_ops: int = 8) -> Tuple[Graph, Callable, Dict[str, np.ndarray]]:
    """A random scalar-valued graph over (R, C) tensors plus its numpy twin.

    Returns ``(graph, f, params)`` where ``f(params)`` recomputes the graph's
    scalar output with plain numpy. Inputs are drawn from [-1, 1].
    """
    R, C = int(rng.integers(1, 4)), int(rng.integers(2, 5))
    params = {f"p{i}": rng.uniform(-1, 1, size=(R, C)) for i in range(3)}
    params["w"] = rng.uniform(-1, 1, size=(C, C))
    params["gamma"] = rng.uniform(0.5, 1.5, size=(C,))
    params["beta"] = rng.uniform(-1, 1, size=(C,))
    params["table"] = rng.uniform(-1, 1, size=(5, C))
    ids = rng.integers(0, 5, size=R)
    picks = rng.integers(0, C, size=R)
    g = Graph(params)

    # pool of (node, twin) pairs; twin maps params -> ndarray of shape (R, C)
    pool: List[Tuple[object, Callable]] = [(g.param(f"p{i}"), (lambda p, i=i: p[f"p{i}"])) for i in range(3)]
    pool.append((g.embed(g.param("table"), ids), lambda p: p["table"][ids]))
    x_in = rng.uniform(-1, 1, size=(R, C))
    pool.append((g.input("x", x_in), lambda p: x_in))

    def pick():
        return pool[int(rng.integers(len(pool)))]

    for _ in range(n_ops):
        kind = rng.choice(["matmul", "add", "sub", "mul", "gate", "tanh", "sigmoid", "relu", "scale",
                           "softmax", "log_softmax", "concat_slice", "transpose", "reshape", "layer_norm",
                           "attend", "sum_keep"])
        (a, fa), (b, fb) = pick(), pick()
        if kind == "matmul":
            node, fn = g.matmul(a, g.param("w")), (lambda p, fa=fa: fa(p) @ p["w"])
        elif kind in ("add", "sub", "mul", "gate"):
            op = {"add": np.add, "sub": np.subtract, "mul": np.multiply, "gate": np.multiply}[kind]
            node, fn = getattr(g, kind)(a, b), (lambda p, fa=fa, fb=fb, op=op: op(fa(p), fb(p)))
        elif kind == "tanh":
            node, fn = g.tanh(a), (lambda p, fa=fa: np.tanh(fa(p)))
        elif kind == "sigmoid":
            node, fn = g.sigmoid(a), (lambda p, fa=fa: 1 / (1 + np.exp(-fa(p))))
        elif kind == "relu":
            node, fn = g.relu(a), (lambda p, fa=fa: np.maximum(fa(p), 0))
        elif kind == "scale":
            c = float(rng.uniform(-2, 2))
            node, fn = g.scale(a, c), (lambda p, fa=fa, c=c: c * fa(p))
        elif kind == "softmax":
            node, fn = g.softmax(a), (lambda p, fa=fa: _np_softmax(fa(p)))
        elif kind == "log_softmax":
            node, fn = g.log_softmax(a), (lambda p, fa=fa: _np_log_softmax(fa(p)))
        elif kind == "concat_slice":
            cat = g.concat([a, b], axis=-1)
            node = g.slice(cat, 1, 1 + C, axis=-1)
            fn = lambda p, fa=fa, fb=fb: np.concatenate([fa(p), fb(p)], axis=-1)[:, 1:1 + C]
        elif kind == "transpose":
            node = g.transpose(g.transpose(a, (1, 0)), (1, 0))
            fn = fa
        elif kind == "reshape":
            node = g.reshape(g.reshape(a, (R * C,)), (R, C))
            fn = fa
        elif kind == "layer_norm":
            node = g.layer_norm(a, g.param("gamma"), g.param("beta"))
            fn = lambda p, fa=fa: _np_layer_norm(fa(p), p["gamma"], p["beta"])
        elif kind == "attend":
            w = g.softmax(g.matmul(a, g.transpose(b, (1, 0))))
            node = g.attend(w, b)
            fn = lambda p, fa=fa, fb=fb: _np_softmax(fa(p) @ fb(p).T) @ fb(p)
        else:  # sum_keep: broadcast a row-sum back over columns
            node = g.add(g.sum(a, axis=-1, keepdims=True), b)
            fn = lambda p, fa=fa, fb=fb: fa(p).sum(axis=-1, keepdims=True) + fb(p)
        pool.append((node, fn))

    last, flast = pool[-1]
    mixed = g.mul(last, g.tanh(pool[-2][0]))
    out = g.sum(g.pick(mixed, picks))
    g.output("loss", out)
    fprev = pool[-2][1]

    def f(p):
        m = flast(p) * np.tanh(fprev(p))
        return float(m[np.arange(R), picks].sum())

    return g, f, params


# -- BLEU -------------------------------------------------------------------

def reference_bleu(hyps, refs, max_n: int = 4) -> float:
    """Straight transcription of corpus BLEU: clipped counts, geometric mean, brevity penalty."""
    num = [0] * max_n
    den = [0] * max_n
    c = r = 0
    for h, ref in zip(hyps, refs):
        c += len(h)
        r += len(ref)
        for n in range(1, max_n + 1):
            hc = Counter(tuple(h[i:i + n]) for i in range(len(h) - n + 1))
            rc = Counter(tuple(ref[i:i + n]) for i in range(len(ref) - n + 1))
            num[n - 1] += sum(min(v, rc[k]) for k, v in hc.items())
            den[n - 1] += max(0, len(h) - n + 1)
    if c == 0 or any(d == 0 or m == 0 for m, d in zip(num, den)):
        return 0.0
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(sum(math.log(m / d) for m, d in zip(num, den)) / max_n)


def binomial_sign_p(wins: int, losses: int) -> float:
    """Two-sided sign test by enumerating every outcome at least as extreme."""
    n = wins + losses
    if n == 0:
        return 1.0
    probs = [math.comb(n, i) * 0.5 ** n for i in range(n + 1)]
    observed = probs[wins]
    return min(1.0, sum(q for q in probs if q <= observed + 1e-15))
