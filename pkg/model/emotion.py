"""Contrastive-Experts emotion classification: polarity vote, routed expert heads, NT-Xent + CE loss."""
import logging
from collections import Counter
from typing import NamedTuple, Sequence

import numpy as np
from pydantic import BaseModel, NonNegativeInt, model_validator

from model.layers import Module, Parameter, normal
from model.tensor import (
    MASK_VALUE,
    Tensor,
    as_tensor,
    getitem,
    log_softmax,
    masked_fill,
    softmax,
    sqrt,
    where,
)
from utils.errors import NumericError
from utils.labels import N_EMOTIONS, Polarity

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


class PolarityCounts(BaseModel):
    n_pos: NonNegativeInt
    n_neg: NonNegativeInt
    n_neu: NonNegativeInt
    v: Polarity

    @property
    def total(self) -> int:
        return self.n_pos + self.n_neg + self.n_neu


def polarity_vote(sentiments: Sequence[Polarity]) -> PolarityCounts:
    """Batch-level majority polarity; any tie for the maximum count resolves to neu."""
    if not sentiments:
        raise ValueError("polarity_vote needs a non-empty batch")
    counts = Counter(Polarity(s) for s in sentiments)
    n = {p: counts.get(p, 0) for p in Polarity}
    top = max(n.values())
    leaders = [p for p, c in n.items() if c == top]
    v = leaders[0] if len(leaders) == 1 else Polarity.NEU
    return PolarityCounts(n_pos=n[Polarity.POS], n_neg=n[Polarity.NEG], n_neu=n[Polarity.NEU], v=v)


def floored_nll(log_probs: Tensor, what: str) -> Tensor:
    """−log p with p floored at 1e-12; floored entries carry no gradient and are logged."""
    floor = float(np.log(PROB_FLOOR))
    low = log_probs.data < floor
    if np.any(low):
        logger.warning(f"{what}: {int(low.sum())} probability value(s) floored at {PROB_FLOOR}")
        log_probs = where(low, floor, log_probs)
    return -log_probs


class EmotionLoss(NamedTuple):
    total: Tensor
    ntx: Tensor
    cls: Tensor


class ExpertHeads(Module):
    def __init__(self, d_model: int, rng: np.random.Generator, n_emotions: int = N_EMOTIONS):
        self.W_pos = Parameter(normal(rng, (n_emotions, d_model), d_model**-0.5))
        self.W_neg = Parameter(normal(rng, (n_emotions, d_model), d_model**-0.5))
        self.E_emo = Parameter(np.eye(d_model) + normal(rng, (d_model, d_model), 0.1 * d_model**-0.5))
        self.shared = False

    def logits(self, Q: Tensor, v: Polarity) -> Tensor:
        """Expert logits routed by the batch vote; neu averages both experts' logits."""
        Q = as_tensor(Q)
        z = Q @ self.E_emo.T
        v = Polarity(v)
        if self.shared or v == Polarity.POS:
            return z @ self.W_pos.T
        if v == Polarity.NEG:
            return z @ self.W_neg.T
        return ((z @ self.W_pos.T) + (z @ self.W_neg.T)) * 0.5

    def forward(self, Q: Tensor, v: Polarity) -> Tensor:
        return self.logits(Q, v)

    def classify(self, Q: Tensor, v: Polarity) -> Tensor:
        return softmax(self.logits(Q, v), axis=-1)


def nt_xent_loss(Q: Tensor, labels: Sequence[int], temperature: float = 0.5) -> Tensor:
    """
    Σ_i Σ_{j≠i, y_j=y_i} −log softmax_{k≠i}(s(i,k))[j], s = cosine / τ.

    Anchors without a positive contribute 0.
    """
    Q = as_tensor(Q)
    labels = np.asarray(labels)
    B = Q.shape[0]
    if B < 2:
        raise NumericError("nt_xent_loss needs a batch of at least 2")
    if temperature <= 0:
        raise NumericError(f"temperature must be > 0, got {temperature}")
    norms = sqrt((Q * Q).sum(axis=1, keepdims=True) + PROB_FLOOR)
    Z = Q / norms
    sim = (Z @ Z.T) * (1.0 / temperature)
    eye = np.eye(B, dtype=bool)
    logp = log_softmax(masked_fill(sim, eye, MASK_VALUE), axis=1)
    positives = (labels[:, None] == labels[None, :]) & ~eye
    if not positives.any():
        return Tensor(0.0)
    rows, cols = np.nonzero(positives)
    return -getitem(logp, (rows, cols)).sum()


def emotion_loss(logits: Tensor, gold: Sequence[int], Q: Tensor, temperature: float = 0.5, use_ntx: bool = True) -> EmotionLoss:
    """L_em = L_NTX + L_cls with L_cls the batch mean of −log p[gold]."""
    gold = np.asarray(gold, dtype=np.int64)
    if np.any((gold < 0) | (gold >= logits.shape[-1])):
        raise ValueError(f"gold emotion index outside [0, {logits.shape[-1]})")
    logp = log_softmax(logits, axis=-1)
    picked = getitem(logp, (np.arange(len(gold)), gold))
    l_cls = floored_nll(picked, "L_cls").mean()
    l_ntx = nt_xent_loss(Q, gold, temperature) if use_ntx and len(gold) >= 2 else Tensor(0.0)
    return EmotionLoss(l_ntx + l_cls, l_ntx, l_cls)
