"""Scheduled sampling, EWC regularisation and relevance analysis for small seq2seq models."""

from .attribution import LrpConfig, contribution_curve, lrp_linear_rule, relevance_for_step
from .autodiff import Graph, backward, grad_check
from .datagen import Corpus, SequencePair, Vocab, gen_task, split_corpus
from .estimator import Seq2SeqTranslator
from .evaluation import bleu, forgetting_delta, greedy_decode, sign_test, teacher_forced_infer
from .training import EwcAnchor, TrainConfig, ewc_penalty, schedule_prob, train

__version__ = "0.1.0"

__all__ = [
    "Corpus", "EwcAnchor", "Graph", "LrpConfig", "Seq2SeqTranslator", "SequencePair", "TrainConfig",
    "Vocab", "backward", "bleu", "contribution_curve", "ewc_penalty", "forgetting_delta", "gen_task",
    "grad_check", "greedy_decode", "lrp_linear_rule", "relevance_for_step", "schedule_prob",
    "sign_test", "split_corpus", "teacher_forced_infer", "train",
]
