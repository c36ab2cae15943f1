"""Teacher forcing, scheduled sampling and EWC-regularised scheduled sampling.

Randomness is drawn from independent numpy ``PCG64`` streams keyed by
``[seed, stream, counter]`` so that a run is a pure function of its
config and can be resumed from any checkpoint:

* stream 0, counter = epoch: permutation of the training pairs
* stream 1, counter = update: Bernoulli draws for prefix mixing
* stream 2: parameter initialisation (see :func:`sslab.models.init_params`)
* stream 3: choice of the sequences used for the Fisher estimate
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Graph, GraphError, Node, backward
from .checkpoint import Checkpoint
from .datagen import BOS, EOS, PAD, Corpus, Vocab, build_vocab
from .models import ModelConfig, Seq2Seq, build_model, detach, pad_batch

logger = logging.getLogger(__name__)

SCHEDULE_KINDS = ("linear", "exponential", "inverse-sigmoid", "none")
_ALIASES = {
    "exp": "exponential",
    "sigmoid": "inverse-sigmoid",
    "inverse_sigmoid": "inverse-sigmoid",
    "inv-sigmoid": "inverse-sigmoid",
    "constant": "none",
}
OBJECTIVES = ("mle", "ss", "ss-ewc")


def canonical_schedule(kind: str) -> str:
    kind = _ALIASES.get(kind, kind)
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule {kind!r}; expected one of {SCHEDULE_KINDS}")
    return kind


class TrainingDiverged(RuntimeError):
    """Loss or gradients became non-finite. ``checkpoint`` holds the last good state."""

    def __init__(self, update: int, checkpoint: Checkpoint, detail: str = ""):
        self.update = update
        self.checkpoint = checkpoint
        super().__init__(f"training diverged at update {update}" + (f": {detail}" if detail else ""))


# -- annealing schedules ------------------------------------------------------

@dataclass
class ScheduleState:
    kind: str = "none"
    k: float = 1.0
    b: int = 0
    p0: float = 1.0

    def __post_init__(self):
        self.kind = canonical_schedule(self.kind)

    @property
    def p(self) -> float:
        return schedule_prob(self)

    def advance(self, n: int = 1) -> "ScheduleState":
        return ScheduleState(self.kind, self.k, self.b + n, self.p0)


def schedule_prob(state: ScheduleState) -> float:
    """Probability of feeding the gold token after ``state.b`` minibatches.

    linear: max(p0 - k*b, 0); exponential: p0 * k**b;
    inverse-sigmoid: p0 * k / (k + exp(b/k)); none: p0.
    """
    kind, k, b, p0 = canonical_schedule(state.kind), state.k, state.b, state.p0
    if b < 0:
        raise ValueError("minibatch counter must be nonnegative")
    if not 0.0 <= p0 <= 1.0:
        raise ValueError("p0 must lie in [0, 1]")
    if kind == "none":
        return float(p0)
    if kind == "linear":
        if not k > 0:
            raise ValueError("linear schedule needs k > 0")
        return max(p0 - k * b, 0.0)
    if kind == "exponential":
        if not 0 < k < 1:
            raise ValueError("exponential schedule needs 0 < k < 1")
        return p0 * k ** b
    if not k >= 1:
        raise ValueError("inverse-sigmoid schedule needs k >= 1")
    z = b / k
    return 0.0 if z > 700 else p0 * k / (k + math.exp(z))


# -- prefix mixing --------------------------------------------------------------

@dataclass
class MixedPrefix:
    tokens: np.ndarray  # (L,) or (B, L) int ids
    from_gold: np.ndarray  # same shape, bool

    def __len__(self):
        return self.tokens.shape[-1]


def mixing_flags(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    """Per-position gold/model choice: ``rng.random(shape) < p``."""
    return rng.random(shape) < p


def mix_prefix(gold: np.ndarray, decode_fn: Callable[[np.ndarray], np.ndarray], p: float,
               rng: np.random.Generator, mask: Optional[np.ndarray] = None) -> MixedPrefix:
    """Stochastic mixture of the gold prefix and the model's greedy tokens.

    ``decode_fn(prev)`` is a stateful stepper: given the previous tokens
    (B,) it returns next-token scores (B, V); its first call receives bos.
    Position j takes the gold token with probability ``p`` and otherwise
    the argmax (lowest id on ties) of the model conditioned on the mixed
    prefix before j. Model tokens are plain integers, so no gradient can
    flow through the choice. Positions outside ``mask`` always keep gold.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    gold = np.asarray(gold, dtype=np.int64)
    squeeze = gold.ndim == 1
    gold2 = gold[None, :] if squeeze else gold
    flags = mixing_flags(gold2.shape, p, rng)
    if mask is not None:
        flags |= ~np.asarray(mask, dtype=bool).reshape(gold2.shape)
    tokens = gold2.copy()
    if gold2.shape[1] and not flags.all():
        prev = np.full(gold2.shape[0], BOS, dtype=np.int64)
        for j in range(gold2.shape[1]):
            if flags[:, j:].all():
                break
            model_tok = np.argmax(np.asarray(decode_fn(prev)), axis=-1)
            tokens[:, j] = np.where(flags[:, j], gold2[:, j], model_tok)
            prev = tokens[:, j]
    if squeeze:
        return MixedPrefix(tokens[0], flags[0])
    return MixedPrefix(tokens, flags)


def model_stepper(model: Seq2Seq, enc) -> Callable[[np.ndarray], np.ndarray]:
    """Greedy stepping closure over a detached encoder output (no recording)."""
    g = model.graph(record=False)
    enc = detach(enc, g) if enc.states.graph is not g else enc
    state = [model.init_state(g, enc)]

    def step(prev):
        logits, state[0] = model.step(g, prev, state[0], enc)
        return logits.value

    return step


# -- losses ---------------------------------------------------------------------

@dataclass
class Batch:
    src: np.ndarray  # (B, S)
    src_mask: np.ndarray
    tgt: np.ndarray  # (B, T) payload followed by eos
    tgt_mask: np.ndarray

    @property
    def gold_prefix(self) -> np.ndarray:
        """Payload tokens usable as decoder inputs (eos replaced by pad)."""
        return np.where(self.tgt == EOS, PAD, self.tgt)[:, :-1]

    def decoder_inputs(self, prefix: Optional[np.ndarray] = None) -> np.ndarray:
        prefix = self.gold_prefix if prefix is None else prefix
        bos = np.full((self.tgt.shape[0], 1), BOS, dtype=np.int64)
        return np.concatenate([bos, prefix], axis=1)


def make_batch(sources: Sequence[Sequence[int]], targets: Sequence[Sequence[int]]) -> Batch:
    src, src_mask = pad_batch(sources)
    tgt, tgt_mask = pad_batch([list(t) + [EOS] for t in targets])
    return Batch(src, src_mask, tgt, tgt_mask)


def token_nll(g: Graph, logits: Node, targets: np.ndarray, mask: np.ndarray, reduction: str = "mean") -> Node:
    """Negative log-likelihood of ``targets`` under ``logits`` (B, T, V)."""
    picked = g.pick(g.log_softmax(logits), targets)
    total = g.sum(g.mul(picked, mask.astype(np.float64)))
    if reduction == "sum":
        return g.scale(total, -1.0)
    return g.scale(total, -1.0 / max(int(mask.sum()), 1))


def nll_loss(model: Seq2Seq, batch: Batch, prefix: Optional[np.ndarray] = None,
             g: Optional[Graph] = None, reduction: str = "mean") -> Node:
    """Per-token NLL of the batch targets given decoder prefixes.

    ``prefix`` (B, T-1) defaults to the gold payload (teacher forcing);
    pass mixed tokens for scheduled sampling.
    """
    g = model.graph() if g is None else g
    if prefix is not None and prefix.shape != batch.gold_prefix.shape:
        raise ValueError(f"prefix shape {prefix.shape} does not match targets {batch.gold_prefix.shape}")
    enc = model.encode(g, batch.src, batch.src_mask)
    logits = model.logits(g, enc, batch.decoder_inputs(prefix))
    return token_nll(g, logits, batch.tgt, batch.tgt_mask, reduction)


# -- elastic weight consolidation ----------------------------------------------

@dataclass
class EwcAnchor:
    theta: Dict[str, np.ndarray]
    fisher: Dict[str, np.ndarray]
    lam: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("EWC strength must be nonnegative")
        if set(self.theta) != set(self.fisher):
            raise ValueError("anchor parameters and Fisher entries differ")
        for name, f in self.fisher.items():
            if f.shape != self.theta[name].shape:
                raise ValueError(f"Fisher shape mismatch for {name}")
            if (f < 0).any():
                raise ValueError(f"negative Fisher entries for {name}")

    def _check(self, params):
        if set(params) != set(self.theta):
            raise ValueError("parameter names do not match the anchor")
        for name, v in params.items():
            if v.shape != self.theta[name].shape:
                raise ValueError(f"shape mismatch for {name}: {v.shape} vs {self.theta[name].shape}")

    def gradient(self, params: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        self._check(params)
        return {k: 2.0 * self.lam * self.fisher[k] * (params[k] - self.theta[k]) for k in params}


def ewc_penalty(params: Dict[str, np.ndarray], anchor: EwcAnchor) -> float:
    """lambda * sum_j F_j (theta_j - theta^G_j)^2, summed in sorted name order."""
    anchor._check(params)
    total = 0.0
    for name in sorted(params):
        d = params[name] - anchor.theta[name]
        total += float(np.sum(anchor.fisher[name] * d * d))
    return anchor.lam * total


def estimate_fisher(model: Seq2Seq, sources: Sequence[Sequence[int]], targets: Sequence[Sequence[int]]
                    ) -> Dict[str, np.ndarray]:
    """Diagonal empirical Fisher at the model's current parameters.

    Mean over the given pairs of the squared gradient of each pair's
    teacher-forced log-likelihood, taken per token (the same scale as the
    training loss) so that lambda is comparable across target lengths.
    """
    if len(sources) == 0:
        raise ValueError("Fisher estimate needs at least one sequence")
    fisher = {k: np.zeros_like(v) for k, v in model.params.items()}
    for src, tgt in zip(sources, targets):
        g = model.graph()
        loss = nll_loss(model, make_batch([src], [tgt]), g=g)
        for k, gr in backward(g, loss).items():
            fisher[k] += gr * gr
    n = float(len(sources))
    return {k: v / n for k, v in fisher.items()}


# -- optimisation ---------------------------------------------------------------

@dataclass
class TrainConfig:
    objective: str = "mle"
    arch: str = "lstm"
    schedule: str = "inverse-sigmoid"
    k: float = 30.0
    p0: float = 1.0
    lam: float = 0.0
    lr: float = 3e-3
    batch_size: int = 32
    max_updates: int = 550
    warmup_updates: Optional[int] = 350
    finetune_lr: Optional[float] = 3e-4
    fisher_samples: int = 200
    seed: int = 0
    optimizer: str = "adam"
    clip: float = 5.0
    emb_dim: int = 32
    hidden_dim: int = 64
    layers: Optional[int] = None
    heads: int = 2
    record_wallclock: bool = False

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}; expected one of {OBJECTIVES}")
        self.schedule = canonical_schedule(self.schedule)
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        for name in ("batch_size", "max_updates", "fisher_samples"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.clip <= 0:
            raise ValueError("lr and clip must be positive")
        if self.finetune_lr is not None and self.finetune_lr <= 0:
            raise ValueError("finetune_lr must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.objective != "mle" and self.schedule != "none":
            # validates k for the chosen schedule
            schedule_prob(ScheduleState(self.schedule, self.k, 0, self.p0))
        if self.warmup < 0 or self.warmup > self.max_updates:
            raise ValueError(f"warmup_updates ({self.warmup}) must lie in [0, max_updates]; "
                             "set warmup_updates explicitly (None means max_updates // 5)")

    @property
    def warmup(self) -> int:
        """Teacher-forced updates at ``lr`` before the fine-tuning phase.

        After the warmup, ss and ss-ewc start mixing prefixes (and ss-ewc
        takes its anchor); every objective switches to ``finetune_lr``.
        """
        if self.warmup_updates is None:
            return self.max_updates // 5
        return int(self.warmup_updates)

    def lr_at(self, update: int) -> float:
        if update < self.warmup or self.finetune_lr is None:
            return self.lr
        return self.finetune_lr

    def teacher_prob(self, update: int) -> float:
        if self.objective == "mle" or update < self.warmup:
            return 1.0
        return schedule_prob(ScheduleState(self.schedule, self.k, update - self.warmup, self.p0))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def model_config(self, src_vocab: int, tgt_vocab: int, max_len: int) -> ModelConfig:
        return ModelConfig(self.arch, src_vocab, tgt_vocab, self.emb_dim, self.hidden_dim,
                           self.layers, self.heads, max_len)


# fields that must agree between a checkpoint and the config resuming from it
_TRAJECTORY_FIELDS = ("arch", "lr", "batch_size", "seed", "optimizer", "clip", "emb_dim",
                      "hidden_dim", "layers", "heads")


def _plain_prefix(config: TrainConfig) -> int:
    """Number of leading updates that are plain teacher forcing at ``lr``."""
    if config.objective == "mle" and config.finetune_lr in (None, config.lr):
        return config.max_updates
    return config.warmup


def _check_resumable(prev: TrainConfig, config: TrainConfig, start: int) -> None:
    """A checkpoint after ``start`` updates of ``prev`` must lie on ``config``'s trajectory."""
    for name in _TRAJECTORY_FIELDS:
        if getattr(prev, name) != getattr(config, name):
            raise ValueError(f"cannot resume: {name}={getattr(prev, name)!r} in checkpoint, "
                             f"{getattr(config, name)!r} requested")
    if start > config.max_updates:
        raise ValueError(f"checkpoint is already past max_updates ({start} > {config.max_updates})")
    if start <= min(_plain_prefix(prev), _plain_prefix(config)):
        return
    a, b = prev.to_dict(), config.to_dict()
    for d, c in ((a, prev), (b, config)):
        d.pop("max_updates")
        d.pop("record_wallclock")
        d["warmup_updates"] = c.warmup
    if a != b:
        diff = sorted(k for k in a if a[k] != b[k])
        raise ValueError(f"cannot resume after update {start}: settings differ in {diff}")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: List[dict] = field(default_factory=list)


class _Optimizer:
    def __init__(self, config: TrainConfig, params, state=None):
        self.config = config
        self.params = params
        self.state = state if state is not None else {}
        if config.optimizer == "adam" and not self.state:
            for k, v in params.items():
                self.state[f"m/{k}"] = np.zeros_like(v)
                self.state[f"v/{k}"] = np.zeros_like(v)
            self.state["t"] = np.zeros(())

    def step(self, grads, lr: float):
        if self.config.optimizer == "sgd":
            for k in sorted(self.params):
                self.params[k] -= lr * grads[k]
            return
        b1, b2, eps = 0.9, 0.999, 1e-8
        self.state["t"] = np.asarray(self.state["t"]).reshape(()) + 1.0
        t = float(self.state["t"])
        for k in sorted(self.params):
            m, v = self.state[f"m/{k}"], self.state[f"v/{k}"]
            m *= b1
            m += (1 - b1) * grads[k]
            v *= b2
            v += (1 - b2) * grads[k] ** 2
            self.params[k] -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place to global L2 norm <= max_norm; returns the original norm."""
    norm = math.sqrt(sum(float(np.sum(grads[k] * grads[k])) for k in sorted(grads)))
    if not math.isfinite(norm):
        raise FloatingPointError("non-finite gradient norm")
    if norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] *= s
    return norm


def batch_indices(n: int, batch_size: int, seed: int, update: int) -> np.ndarray:
    """Indices of the pairs used at ``update`` (epoch-wise reshuffling)."""
    per_epoch = max(n // batch_size, 1)
    epoch, pos = divmod(update, per_epoch)
    perm = np.random.default_rng([seed, 0, epoch]).permutation(n)
    return perm[pos * batch_size:(pos + 1) * batch_size]


def fisher_sample(n: int, size: int, seed: int) -> np.ndarray:
    return np.sort(np.random.default_rng([seed, 3]).choice(n, min(size, n), replace=False))


def encode_corpus(corpus: Corpus, src_vocab: Vocab, tgt_vocab: Vocab):
    return ([src_vocab.encode(p.source) for p in corpus.pairs],
            [tgt_vocab.encode(p.target) for p in corpus.pairs])


def train(config: TrainConfig, corpus: Corpus, resume: Optional[Checkpoint] = None,
          callback: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Run (or continue) one training run on ``corpus``.

    mle: ``max_updates`` teacher-forced updates. ss / ss-ewc: ``warmup``
    teacher-forced updates, then mixed-prefix updates with the schedule
    counter ``b`` starting at 0. ``resume`` continues from a checkpoint
    that lies on this config's trajectory (for instance the end of a
    shorter teacher-forced run that shares the warmup). ss-ewc takes the EWC anchor (parameters
    and Fisher estimate) right after the warmup and minimises
    NLL + lambda * sum F (theta - theta^G)^2 from then on.
    """
    if not len(corpus):
        raise ValueError("training corpus is empty")
    t_start = time.perf_counter()

    if resume is None:
        src_vocab = build_vocab(corpus, "source")
        tgt_vocab = build_vocab(corpus, "target")
        longest = max(max(len(p.source), len(p.target)) for p in corpus.pairs)
        mcfg = config.model_config(len(src_vocab), len(tgt_vocab), longest + 2)
        model = build_model(mcfg, seed=config.seed)
        opt_state = None
        start = 0
        anchor = None
    else:
        prev_cfg = resume.meta.get("train_config", {})
        for name in _TRAJECTORY_FIELDS:
            if name in prev_cfg and prev_cfg[name] != getattr(config, name):
                raise ValueError(f"cannot resume: {name}={prev_cfg[name]!r} in checkpoint, "
                                 f"{getattr(config, name)!r} requested")
        start = int(resume.meta.get("updates", 0))
        _check_resumable(TrainConfig.from_dict(prev_cfg), config, start)
        src_vocab = Vocab.from_list(resume.meta["src_vocab"])
        tgt_vocab = Vocab.from_list(resume.meta["tgt_vocab"])
        resume = resume.copy()
        model = build_model(resume.model_config, resume.params)
        opt_state = resume.opt_state or None
        anchor = None
        if config.objective == "ss-ewc" and resume.anchor_theta is not None and start >= config.warmup:
            anchor = EwcAnchor(resume.anchor_theta, resume.anchor_fisher, config.lam)

    sources, targets = encode_corpus(corpus, src_vocab, tgt_vocab)
    params = model.params
    optimizer = _Optimizer(config, params, opt_state)
    history: List[dict] = []

    def snapshot(updates: int) -> Checkpoint:
        meta = {
            "train_config": config.to_dict(),
            "updates": updates,
            "src_vocab": src_vocab.to_list(),
            "tgt_vocab": tgt_vocab.to_list(),
            "corpus_hash": corpus.content_hash(),
        }
        return Checkpoint(
            model.config, {k: v.copy() for k, v in params.items()}, meta,
            {k: np.array(v, copy=True) for k, v in optimizer.state.items()},
            None if anchor is None else {k: v.copy() for k, v in anchor.theta.items()},
            None if anchor is None else {k: v.copy() for k, v in anchor.fisher.items()},
        )

    for update in range(start, config.max_updates):
        if config.objective == "ss-ewc" and update == config.warmup and anchor is None:
            idx = fisher_sample(len(sources), config.fisher_samples, config.seed)
            fisher = estimate_fisher(model, [sources[i] for i in idx], [targets[i] for i in idx])
            anchor = EwcAnchor({k: v.copy() for k, v in params.items()}, fisher, config.lam)

        idx = batch_indices(len(sources), config.batch_size, config.seed, update)
        batch = make_batch([sources[i] for i in idx], [targets[i] for i in idx])
        p = config.teacher_prob(update)
        try:
            g = model.graph()
            enc = model.encode(g, batch.src, batch.src_mask)
            prefix = batch.gold_prefix
            if p < 1.0:
                rng = np.random.default_rng([config.seed, 1, update])
                mixed = mix_prefix(prefix, model_stepper(model, enc), p, rng, mask=prefix != PAD)
                prefix = mixed.tokens
            logits = model.logits(g, enc, batch.decoder_inputs(prefix))
            loss = token_nll(g, logits, batch.tgt, batch.tgt_mask)
            grads = backward(g, loss)
            penalty = 0.0
            if anchor is not None and anchor.lam > 0:
                penalty = ewc_penalty(params, anchor)
                for k, gk in anchor.gradient(params).items():
                    grads[k] += gk
            total = loss.value.item() + penalty
            if not math.isfinite(total):
                raise FloatingPointError("non-finite loss")
            clip_gradients(grads, config.clip)
        except (GraphError, FloatingPointError) as exc:
            raise TrainingDiverged(update, snapshot(update), str(exc)) from exc
        optimizer.step(grads, config.lr_at(update))

        row = {"update": update + 1, "p": p, "loss": loss.value.item(), "ewc_penalty": penalty}
        if config.record_wallclock:
            row["wallclock_ms"] = round((time.perf_counter() - t_start) * 1000.0, 3)
        history.append(row)
        if callback is not None:
            callback(row)

    return TrainResult(snapshot(config.max_updates), history)


def load_model(ckpt: Checkpoint) -> Seq2Seq:
    return build_model(ckpt.model_config, ckpt.params)
