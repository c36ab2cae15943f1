"""scikit-learn style wrapper around :func:`sslab.training.train`."""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .attribution import LrpConfig, contribution_curve
from .checkpoint import Checkpoint
from .datagen import SPECIALS, Corpus, SequencePair, Vocab
from .evaluation import bleu, decode_corpus
from .training import TrainConfig, TrainResult, load_model, train
from .validation import check_paired, check_token_sequences


class Seq2SeqTranslator(BaseEstimator):
    """Sequence transducer trained with MLE, scheduled sampling or SS + EWC.

    ``X`` and ``y`` are lists of token sequences (positive integers from 3
    upwards; 0, 1 and 2 are reserved). Hyperparameters mirror
    :class:`sslab.training.TrainConfig`.

    >>> est = Seq2SeqTranslator(max_updates=5, batch_size=2)
    >>> est.fit([[3, 4], [4, 5, 6]], [[4, 3], [6, 5, 4]]).predict([[3, 4]])  # doctest: +SKIP
    """

    def __init__(self, objective="mle", arch="lstm", schedule="inverse-sigmoid", k=30.0, p0=1.0,
                 lam=0.0, lr=3e-3, batch_size=32, max_updates=550, warmup_updates=350,
                 finetune_lr=3e-4, fisher_samples=200, seed=0, optimizer="adam", clip=5.0, emb_dim=32,
                 hidden_dim=64, layers=None, heads=2):
        self.objective = objective
        self.arch = arch
        self.schedule = schedule
        self.k = k
        self.p0 = p0
        self.lam = lam
        self.lr = lr
        self.batch_size = batch_size
        self.max_updates = max_updates
        self.warmup_updates = warmup_updates
        self.finetune_lr = finetune_lr
        self.fisher_samples = fisher_samples
        self.seed = seed
        self.optimizer = optimizer
        self.clip = clip
        self.emb_dim = emb_dim
        self.hidden_dim = hidden_dim
        self.layers = layers
        self.heads = heads

    def _train_config(self) -> TrainConfig:
        return TrainConfig(**self.get_params())

    def fit(self, X, y, resume: Optional[Checkpoint] = None):
        X, y = check_paired(X, y)
        config = self._train_config()
        corpus = Corpus([SequencePair(s, t) for s, t in zip(X, y)], split="train")
        result: TrainResult = train(config, corpus, resume=resume)
        self.checkpoint_ = result.checkpoint
        self.history_ = result.history
        self.model_ = load_model(result.checkpoint)
        self.src_vocab_ = Vocab.from_list(result.checkpoint.meta["src_vocab"])
        self.tgt_vocab_ = Vocab.from_list(result.checkpoint.meta["tgt_vocab"])
        self.n_updates_ = len(result.history)
        return self

    def _encode_sources(self, X) -> List[List[int]]:
        return [self.src_vocab_.encode(s) for s in check_token_sequences(X, "X")]

    def _decode(self, ids: Sequence[int]) -> List[int]:
        # specials keep their reserved ids (0, 1, 2), which never match a payload token
        return [int(i) if i < len(SPECIALS) else int(t) for i, t in zip(ids, self.tgt_vocab_.decode(ids))]

    def predict(self, X) -> List[List[int]]:
        """Greedy decoding conditioned on the model's own prefix."""
        check_is_fitted(self, "model_")
        src = self._encode_sources(X)
        return [self._decode(h) for h in decode_corpus(self.model_, src, None, "MP")]

    def predict_teacher_forced(self, X, y) -> List[List[int]]:
        """Per-step argmax with the reference prefix fed at every step."""
        check_is_fitted(self, "model_")
        X, y = check_paired(X, y)
        src = self._encode_sources(X)
        ref = [self.tgt_vocab_.encode(t) for t in y]
        return [self._decode(h) for h in decode_corpus(self.model_, src, ref, "TF")]

    def score(self, X, y, mode: str = "MP") -> float:
        """Corpus BLEU in [0, 1] of MP (default) or TF predictions."""
        X, y = check_paired(X, y)
        hyp = self.predict(X) if mode.upper() == "MP" else self.predict_teacher_forced(X, y)
        return bleu(hyp, [list(t) for t in y]).bleu

    def source_contributions(self, X, y, positions=None, config: LrpConfig = LrpConfig()):
        """Rows (position, mean source relevance, n) over equal-length pairs."""
        check_is_fitted(self, "model_")
        X, y = check_paired(X, y)
        pairs = [(self.src_vocab_.encode(s), self.tgt_vocab_.encode(t)) for s, t in zip(X, y)]
        return contribution_curve(self.model_, pairs, positions, config)
