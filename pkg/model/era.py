"""
Emotion Reason Annotator: a small transformer token encoder, bilinear pairwise
attention composition and a linear-chain CRF over {noem, em}.

Tag indices are NOEM=0, EM=1; the transition matrix carries two extra virtual
states, START=2 and STOP=3.
"""
import logging
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from model.layers import Embedding, Linear, Module, Parameter, TransformerEncoder, normal
from model.tensor import (
    MASK_VALUE,
    Tensor,
    as_tensor,
    getitem,
    logsumexp,
    masked_fill,
    no_grad,
    softmax,
    where,
)
from utils.corpus import PAD_ID, Dialogue, Vocab
from utils.errors import NumericError, UntrainedModelError
from utils.labels import NOEM, TAGS_BY_INDEX, ReasonTag, Speaker

logger = logging.getLogger(__name__)

N_TAGS = 2
START, STOP = 2, 3


class ReasonRepr(NamedTuple):
    h_tilde: Tensor  # [B, L, d]
    alpha: Tensor    # [B, L, L]


class Annotation(NamedTuple):
    tags: Dict[int, List[ReasonTag]]
    reason: Optional[ReasonRepr]


def _batched(ids: np.ndarray, mask: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray, bool]:
    ids = np.asarray(ids, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
        mask = None if mask is None else np.asarray(mask, dtype=bool)[None, :]
    if ids.shape[1] == 0:
        raise NumericError("cannot encode an empty token sequence")
    mask = ids != PAD_ID if mask is None else np.asarray(mask, dtype=bool)
    return ids, mask, single


def _check_tags(tags: np.ndarray, mask: np.ndarray) -> np.ndarray:
    tags = np.asarray(tags, dtype=np.int64)
    if tags.shape != mask.shape:
        raise ValueError(f"tags shape {tags.shape} != sequence shape {mask.shape}")
    if np.any((tags[mask] < 0) | (tags[mask] >= N_TAGS)):
        raise ValueError("tag outside {em, noem}")
    return np.where(mask, tags, NOEM)


# ---------------------------------------------------------------------
# CRF
# ---------------------------------------------------------------------
def score_path(emissions: np.ndarray, transitions: np.ndarray, tags: Sequence[int]) -> float:
    """Unnormalized log score of one tag path for a single [L, 2] emission matrix."""
    score = transitions[START, tags[0]] + emissions[0, tags[0]]
    for i in range(1, len(tags)):
        score += transitions[tags[i - 1], tags[i]] + emissions[i, tags[i]]
    return float(score + transitions[tags[-1], STOP])


def viterbi_decode(emissions: np.ndarray, transitions: np.ndarray) -> List[int]:
    """Best tag path; every argmax breaks ties toward the lower index, i.e. toward noem."""
    emissions = np.asarray(emissions)
    if emissions.shape[0] == 0:
        raise NumericError("viterbi_decode needs a non-empty sequence")
    trans = transitions[:N_TAGS, :N_TAGS]
    score = transitions[START, :N_TAGS] + emissions[0]
    backpointers = []
    for i in range(1, emissions.shape[0]):
        candidates = score[:, None] + trans + emissions[i][None, :]
        backpointers.append(candidates.argmax(axis=0))
        score = candidates.max(axis=0)
    best = int(np.argmax(score + transitions[:N_TAGS, STOP]))
    path = [best]
    for bp in reversed(backpointers):
        best = int(bp[best])
        path.append(best)
    path.reverse()
    return path


class LinearChainCRF(Module):
    def __init__(self, d_model: int, rng: np.random.Generator):
        self.emission = Linear(d_model, N_TAGS, rng, bias=False)
        self.transitions = Parameter(normal(rng, (N_TAGS + 2, N_TAGS + 2), 0.1))

    def forward(self, h_tilde: Tensor) -> Tensor:
        return self.emission(h_tilde)

    def log_partition(self, emissions: Tensor, mask: np.ndarray) -> Tensor:
        """Forward algorithm in log space; `mask` must be a prefix mask per row."""
        B, L, _ = emissions.shape
        trans = self.transitions[:N_TAGS, :N_TAGS]
        alpha = self.transitions[START, :N_TAGS] + emissions[:, 0, :]
        for i in range(1, L):
            scores = alpha.reshape(B, N_TAGS, 1) + trans + emissions[:, i, :].reshape(B, 1, N_TAGS)
            alpha = where(mask[:, i : i + 1], logsumexp(scores, axis=1), alpha)
        return logsumexp(alpha + self.transitions[:N_TAGS, STOP], axis=1)

    def gold_score(self, emissions: Tensor, tags: np.ndarray, mask: np.ndarray) -> Tensor:
        B, L, _ = emissions.shape
        weights = mask.astype(emissions.data.dtype)
        rows = np.arange(B)[:, None]
        cols = np.arange(L)[None, :]
        emitted = (getitem(emissions, (rows, cols, tags)) * weights).sum(axis=1)
        start = getitem(self.transitions, (np.full(B, START), tags[:, 0]))
        last = tags[np.arange(B), mask.sum(axis=1) - 1]
        stop = getitem(self.transitions, (last, np.full(B, STOP)))
        score = emitted + start + stop
        if L > 1:
            moves = getitem(self.transitions, (tags[:, :-1], tags[:, 1:]))
            score = score + (moves * weights[:, 1:]).sum(axis=1)
        return score

    def nll(self, h_tilde: Tensor, tags: np.ndarray, mask: np.ndarray) -> Tensor:
        """Per-sequence −log P(tags | h̃), shape [B]."""
        tags = _check_tags(tags, mask)
        emissions = self(h_tilde)
        return self.log_partition(emissions, mask) - self.gold_score(emissions, tags, mask)

    def decode(self, h_tilde: Tensor, mask: np.ndarray) -> List[List[int]]:
        with no_grad():
            emissions = self(h_tilde).data
        transitions = self.transitions.data
        return [viterbi_decode(emissions[b, : int(mask[b].sum())], transitions) for b in range(emissions.shape[0])]


def crf_log_likelihood(
    h_tilde: Tensor,
    tags: np.ndarray,
    crf: LinearChainCRF,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """−log P(tags | h̃), averaged over the batch. Accepts a single [L, d] sequence too."""
    h_tilde = as_tensor(h_tilde)
    tags = np.asarray(tags, dtype=np.int64)
    if h_tilde.ndim == 2:
        h_tilde = h_tilde.reshape(1, *h_tilde.shape)
        tags = tags[None, :]
        mask = None if mask is None else np.asarray(mask, dtype=bool)[None, :]
    mask = np.ones(tags.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return crf.nll(h_tilde, tags, mask).mean()


# ---------------------------------------------------------------------
# Annotator
# ---------------------------------------------------------------------
class EmotionReasonAnnotator(Module):
    def __init__(
        self,
        vocab_size: int,
        d_model: int,
        max_len: int,
        rng: np.random.Generator,
        n_layers: int = 2,
        n_heads: int = 2,
        ff_mult: int = 4,
        p_drop: float = 0.0,
    ):
        self.token_emb = Embedding(vocab_size, d_model, rng)
        self.pos_emb = Embedding(max_len, d_model, rng)
        self.encoder = TransformerEncoder(d_model, n_layers, n_heads, ff_mult, rng, p_drop)
        self.W_att = Parameter(normal(rng, (d_model, d_model), d_model**-1.0))
        self.crf = LinearChainCRF(d_model, rng)
        self.max_len = max_len
        self.trained = False

    def encode_tokens(
        self,
        ids: np.ndarray,
        mask: Optional[np.ndarray] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        """Contextual token vectors [B, L, d] (or [L, d] for a single sequence); PAD keys are masked."""
        ids, mask, single = _batched(ids, mask)
        L = ids.shape[1]
        if L > self.max_len:
            raise NumericError(f"sequence of {L} tokens exceeds max_len={self.max_len}")
        x = self.token_emb(ids) + self.pos_emb(np.arange(L))
        h = self.encoder(x, mask, rng)
        return h[0] if single else h

    def compose_attention(self, h: Tensor, mask: Optional[np.ndarray] = None) -> ReasonRepr:
        """α = softmax(h W_att hᵀ) over unmasked keys; h̃ = α h."""
        h = as_tensor(h)
        single = h.ndim == 2
        if single:
            h = h.reshape(1, *h.shape)
            mask = None if mask is None else np.asarray(mask, dtype=bool)[None, :]
        if mask is None:
            mask = np.ones(h.shape[:2], dtype=bool)
        scores = (h @ self.W_att) @ h.swapaxes(-1, -2)
        scores = masked_fill(scores, ~np.asarray(mask, dtype=bool)[:, None, :], MASK_VALUE)
        alpha = softmax(scores, axis=-1)
        h_tilde = alpha @ h
        if single:
            return ReasonRepr(h_tilde[0], alpha[0])
        return ReasonRepr(h_tilde, alpha)

    def forward(self, ids: np.ndarray, mask: np.ndarray, rng: Optional[np.random.Generator] = None) -> ReasonRepr:
        return self.compose_attention(self.encode_tokens(ids, mask, rng), mask)

    def loss(self, reason: ReasonRepr, tags: np.ndarray, mask: np.ndarray) -> Tensor:
        return crf_log_likelihood(reason.h_tilde, tags, self.crf, mask)

    def predict_tags(
        self,
        ids: np.ndarray,
        mask: np.ndarray,
        user_mask: Optional[np.ndarray] = None,
        reason: Optional[ReasonRepr] = None,
    ) -> np.ndarray:
        """Viterbi tags [B, L]; positions outside `user_mask` are forced to noem. Reuses `reason` when given."""
        if reason is None:
            with no_grad():
                reason = self(ids, mask)
        paths = self.crf.decode(reason.h_tilde, mask)
        tags = np.full(np.shape(ids), NOEM, dtype=np.int64)
        for b, path in enumerate(paths):
            tags[b, : len(path)] = path
        if user_mask is not None:
            tags[~np.asarray(user_mask, dtype=bool)] = NOEM
        return tags

    def annotate(self, dialogue: Dialogue, vocab: Vocab, strict: bool = True) -> Annotation:
        """
        Predict reason tags for every user turn of `dialogue`; bot turns stay all-noem.

        Turns are packed oldest-first into windows of at most `max_len` tokens; a
        single longer turn is split. The returned ReasonRepr belongs to the last window.
        """
        if strict and not self.trained:
            raise UntrainedModelError("annotate() needs trained ERA parameters (strict mode)")
        if not self.trained:
            logger.warning("Annotating with untrained ERA parameters")

        pieces = []  # (turn index, tokens)
        for i, turn in enumerate(dialogue.turns):
            for start in range(0, max(len(turn.tokens), 1), self.max_len):
                pieces.append((i, turn.tokens[start : start + self.max_len]))
        windows, current, size = [], [], 0
        for i, toks in pieces:
            if current and size + len(toks) > self.max_len:
                windows.append(current)
                current, size = [], 0
            current.append((i, toks))
            size += len(toks)
        if current:
            windows.append(current)

        predicted: Dict[int, List[int]] = {i: [] for i in range(len(dialogue.turns))}
        reason = None
        for window in windows:
            flat = [tok for _, toks in window for tok in toks]
            if not flat:
                continue
            ids = np.asarray([vocab.encode(flat)], dtype=np.int64)
            mask = np.ones_like(ids, dtype=bool)
            with no_grad():
                reason = self(ids, mask)
            path = self.crf.decode(reason.h_tilde, mask)[0]
            offset = 0
            for i, toks in window:
                predicted[i].extend(path[offset : offset + len(toks)])
                offset += len(toks)

        tags: Dict[int, List[ReasonTag]] = {}
        for i, turn in enumerate(dialogue.turns):
            if turn.speaker == Speaker.BOT:
                tags[i] = [ReasonTag.NOEM] * len(turn.tokens)
            else:
                tags[i] = [TAGS_BY_INDEX[t] for t in predicted[i]]
        return Annotation(tags, reason)
