"""Automatic evaluation: corpus BLEU-1..4, distinct-n, perplexity, accuracy and reason-tag F1."""
import logging
import math
from collections import Counter
from typing import List, Optional, Sequence

import numpy as np
from nltk.translate.bleu_score import brevity_penalty, closest_ref_length
from nltk.util import ngrams
from pydantic import BaseModel, ConfigDict, Field

from utils.errors import NumericError

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


class EvalReport(BaseModel):
    """Keys mirror the usual results-table columns; model-dependent fields are None in gold-only runs."""

    model_config = ConfigDict(populate_by_name=True)

    bleu1: float = Field(alias="B-1", ge=0.0, le=100.0)
    bleu2: float = Field(alias="B-2", ge=0.0, le=100.0)
    bleu3: float = Field(alias="B-3", ge=0.0, le=100.0)
    bleu4: float = Field(alias="B-4", ge=0.0, le=100.0)
    acc_emo: Optional[float] = Field(None, alias="Acc_emo", ge=0.0, le=100.0)
    acc_intent: Optional[float] = Field(None, alias="Acc_Intent", ge=0.0, le=100.0)
    ppl: Optional[float] = Field(None, alias="PPL", ge=1.0)
    distinct1: float = Field(alias="D-1", ge=0.0, le=1.0)
    distinct2: float = Field(alias="D-2", ge=0.0, le=1.0)
    n_samples: int = Field(ge=0)

    @property
    def bleu(self) -> List[float]:
        return [self.bleu1, self.bleu2, self.bleu3, self.bleu4]

    def to_json(self) -> str:
        return self.model_dump_json(by_alias=True, indent=2)


def bleu_n(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]], n: int) -> float:
    """
    Corpus BLEU with uniform weights over orders 1..n, in percent. A zero
    precision at order >= 2 is smoothed by adding 1 to its numerator and denominator.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses for {len(references)} references")
    if not hypotheses:
        raise ValueError("BLEU of an empty corpus is undefined")
    if n < 1:
        raise ValueError(f"BLEU order must be >= 1, got {n}")

    matches = [0] * n
    totals = [0] * n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += closest_ref_length([ref], len(hyp))
        for k in range(1, n + 1):
            hyp_counts = Counter(ngrams(hyp, k))
            ref_counts = Counter(ngrams(ref, k))
            matches[k - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
            totals[k - 1] += max(len(hyp) - k + 1, 0)

    if matches[0] == 0:
        return 0.0
    log_p = 0.0
    for k in range(n):
        num, den = matches[k], totals[k]
        if k > 0 and num == 0:
            num, den = num + 1, den + 1
        log_p += math.log(num / den) / n
    return 100.0 * brevity_penalty(ref_len, hyp_len) * math.exp(log_p)


def distinct_n(hypotheses: Sequence[Sequence[str]], n: int) -> float:
    if not hypotheses:
        raise ValueError("distinct-n of an empty corpus is undefined")
    grams = [g for hyp in hypotheses for g in ngrams(list(hyp), n)]
    if not grams:
        raise ValueError(f"every hypothesis is shorter than {n} tokens")
    return len(set(grams)) / len(grams)


def perplexity(gold_probs: Sequence[float]) -> float:
    """exp of the token-mean −log p; probabilities below 1e-12 are floored and reported."""
    probs = np.asarray(gold_probs, dtype=np.float64)
    if probs.size == 0:
        raise ValueError("perplexity needs at least one token")
    if np.any(~np.isfinite(probs)):
        raise NumericError("perplexity received non-finite probabilities")
    low = probs < PROB_FLOOR
    if np.any(low):
        logger.warning(f"PPL: {int(low.sum())} gold token probability value(s) floored at {PROB_FLOOR}")
        probs = np.where(low, PROB_FLOOR, probs)
    return float(np.exp(-np.log(probs).mean()))


def accuracy(predictions: Sequence, golds: Sequence) -> float:
    if len(predictions) != len(golds):
        raise ValueError(f"{len(predictions)} predictions for {len(golds)} gold labels")
    if not golds:
        raise ValueError("accuracy of an empty set is undefined")
    return 100.0 * sum(p == g for p, g in zip(predictions, golds)) / len(golds)


def tag_f1(predicted: Sequence[Sequence[int]], gold: Sequence[Sequence[int]], positive: int = 1) -> float:
    """F1 of the `em` class over aligned tag sequences; 1.0 when neither side has any `em`."""
    if len(predicted) != len(gold):
        raise ValueError(f"{len(predicted)} predicted sequences for {len(gold)} gold sequences")
    tp = fp = fn = 0
    for p_seq, g_seq in zip(predicted, gold):
        if len(p_seq) != len(g_seq):
            raise ValueError(f"tag sequence lengths differ: {len(p_seq)} vs {len(g_seq)}")
        for p, g in zip(p_seq, g_seq):
            tp += p == positive and g == positive
            fp += p == positive and g != positive
            fn += p != positive and g == positive
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2 * tp + fp + fn)


def evaluate_responses(
    hypotheses: Sequence[Sequence[str]],
    references: Sequence[Sequence[str]],
    emotion_pred: Optional[Sequence] = None,
    emotion_gold: Optional[Sequence] = None,
    intent_pred: Optional[Sequence] = None,
    intent_gold: Optional[Sequence] = None,
    gold_probs: Optional[Sequence[float]] = None,
) -> EvalReport:
    def safe_distinct(n: int) -> float:
        try:
            return distinct_n(hypotheses, n)
        except ValueError:
            logger.warning(f"distinct-{n}: no hypothesis has {n} tokens; reporting 0")
            return 0.0

    return EvalReport(
        bleu1=bleu_n(hypotheses, references, 1),
        bleu2=bleu_n(hypotheses, references, 2),
        bleu3=bleu_n(hypotheses, references, 3),
        bleu4=bleu_n(hypotheses, references, 4),
        acc_emo=None if emotion_pred is None else accuracy(emotion_pred, emotion_gold),
        acc_intent=None if intent_pred is None else accuracy(intent_pred, intent_gold),
        ppl=None if gold_probs is None else perplexity(gold_probs),
        distinct1=safe_distinct(1),
        distinct2=safe_distinct(2),
        n_samples=len(hypotheses),
    )
