"""Transformer response decoder with a pointer-generator output over the extended vocabulary."""
import logging
from typing import List, NamedTuple, Optional

import numpy as np

from model.layers import DecoderLayer, Embedding, LayerNorm, Linear, Module
from model.tensor import (
    Tensor,
    as_tensor,
    concat,
    getitem,
    log,
    no_grad,
    scaled_dot_attention,
    sigmoid,
    softmax,
    where,
)
from model.emotion import PROB_FLOOR
from utils.corpus import CTX_ID, EOS_ID, PAD_ID, SOS_ID, UNK_ID
from utils.errors import NumericError

logger = logging.getLogger(__name__)

# Never emitted by generate().
BLOCKED_IDS = (PAD_ID, UNK_ID, SOS_ID, CTX_ID)


class PointerGenOutput(NamedTuple):
    p_vocab: Tensor  # [B, T, V]
    p_copy: Tensor   # [B, T, Lc]
    p_gen: Tensor    # [B, T, 1]
    P_w: Tensor      # [B, T, V + n_oov]


def copy_scatter(copy_ids: np.ndarray, copy_mask: np.ndarray, extended_size: int) -> np.ndarray:
    """One-hot [B, Lc, V_ext] mapping context positions to extended-vocabulary ids."""
    copy_ids = np.asarray(copy_ids, dtype=np.int64)
    if np.any(copy_ids[copy_mask] >= extended_size):
        raise NumericError(f"copy id outside the extended vocabulary of {extended_size}")
    B, L = copy_ids.shape
    scatter = np.zeros((B, L, extended_size))
    b, i = np.nonzero(copy_mask)
    scatter[b, i, copy_ids[b, i]] = 1.0
    return scatter


class PointerGeneratorDecoder(Module):
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
        self.layers = [DecoderLayer(d_model, n_heads, ff_mult, rng, p_drop) for _ in range(n_layers)]
        self.norm = LayerNorm(d_model)
        self.out = Linear(d_model, vocab_size, rng)
        self.copy_query = Linear(d_model, d_model, rng, bias=False)
        self.gate = Linear(3 * d_model, 1, rng)
        self.vocab_size = vocab_size
        self.max_len = max_len

    def forward(
        self,
        prefix: np.ndarray,
        prefix_mask: np.ndarray,
        memory: Tensor,
        memory_mask: np.ndarray,
        copy_ids: np.ndarray,
        copy_mask: np.ndarray,
        n_oov: int = 0,
        rng: Optional[np.random.Generator] = None,
        force_gate: Optional[float] = None,
    ) -> PointerGenOutput:
        """
        Teacher-forced pass over `prefix` [B, T] (ids inside the base vocabulary).
        The copy side attends over the last Lc rows of `memory`, which carry the
        context tokens whose extended ids are `copy_ids` [B, Lc].
        """
        prefix = np.asarray(prefix, dtype=np.int64)
        B, T = prefix.shape
        if T == 0:
            raise NumericError("decoder prefix is empty")
        if T > self.max_len:
            raise NumericError(f"decoder prefix of {T} tokens exceeds max_len={self.max_len}")
        memory = as_tensor(memory)
        copy_mask = np.asarray(copy_mask, dtype=bool)
        Lc = copy_mask.shape[1]

        x_in = self.token_emb(np.where(prefix < self.vocab_size, prefix, UNK_ID))
        h = x_in + self.pos_emb(np.arange(T))
        for layer in self.layers:
            h = layer(h, prefix_mask, memory, memory_mask, rng)
        h = self.norm(h)

        p_vocab = softmax(self.out(h), axis=-1)
        context_rows = getitem(memory, (slice(None), slice(memory.shape[1] - Lc, None)))
        context_vec, p_copy = scaled_dot_attention(self.copy_query(h), context_rows, context_rows, copy_mask[:, None, :])

        if force_gate is None:
            p_gen = sigmoid(self.gate(concat([h, context_vec, x_in], axis=-1)))
        else:
            if not 0.0 <= force_gate <= 1.0:
                raise NumericError(f"forced gate must lie in [0, 1], got {force_gate}")
            p_gen = Tensor(np.full((B, T, 1), force_gate))

        extended = self.vocab_size + n_oov
        generated = p_vocab if n_oov == 0 else concat([p_vocab, Tensor(np.zeros((B, T, n_oov)))], axis=-1)
        copied = p_copy @ copy_scatter(copy_ids, copy_mask, extended)
        P_w = p_gen * generated + (1.0 - p_gen) * copied
        return PointerGenOutput(p_vocab, p_copy, p_gen, P_w)


def decode_step(
    decoder: PointerGeneratorDecoder,
    prefix: np.ndarray,
    memory: Tensor,
    memory_mask: np.ndarray,
    copy_ids: np.ndarray,
    copy_mask: np.ndarray,
    n_oov: int = 0,
    force_gate: Optional[float] = None,
) -> PointerGenOutput:
    """Distributions for the token after `prefix` (which starts with SOS)."""
    prefix = np.atleast_2d(np.asarray(prefix, dtype=np.int64))
    if np.any(prefix[:, 0] != SOS_ID):
        raise NumericError("decoder prefix must begin with SOS")
    out = decoder(prefix, np.ones(prefix.shape, dtype=bool), memory, memory_mask, copy_ids, copy_mask, n_oov, None, force_gate)
    last = (slice(None), prefix.shape[1] - 1)
    return PointerGenOutput(*(getitem(t, last) for t in out))


def response_loss(P_w: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Token-mean of −log P_w[gold]; probabilities below 1e-12 are floored and reported."""
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise NumericError("response_loss needs at least one target token")
    b, t = np.nonzero(mask)
    picked = getitem(P_w, (b, t, targets[b, t]))
    low = picked.data < PROB_FLOOR
    if np.any(low):
        logger.warning(f"L_res: {int(low.sum())} gold token probability value(s) floored at {PROB_FLOOR}")
        picked = where(low, PROB_FLOOR, picked)
    return -log(picked).mean()


def generate(
    decoder: PointerGeneratorDecoder,
    memory: Tensor,
    memory_mask: np.ndarray,
    copy_ids: np.ndarray,
    copy_mask: np.ndarray,
    n_oov: int = 0,
    max_len: Optional[int] = None,
    mode: str = "greedy",
    top_k: int = 5,
    rng: Optional[np.random.Generator] = None,
) -> List[List[int]]:
    """Extended-vocabulary ids per row, EOS excluded. Greedy decoding is deterministic."""
    if mode not in ("greedy", "topk"):
        raise ValueError(f"decode mode must be 'greedy' or 'topk', got {mode!r}")
    if mode == "topk" and rng is None:
        raise NumericError("top-k decoding needs an explicit rng")
    memory = as_tensor(memory)
    B = memory.shape[0]
    max_len = min(max_len or decoder.max_len, decoder.max_len)
    prefix = np.full((B, 1), SOS_ID, dtype=np.int64)
    outputs: List[List[int]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)

    with no_grad():
        for _ in range(max_len):
            P = decode_step(decoder, prefix, memory, memory_mask, copy_ids, copy_mask, n_oov).P_w.data.copy()
            P[:, list(BLOCKED_IDS)] = 0.0
            if mode == "greedy":
                chosen = P.argmax(axis=-1)
            else:
                chosen = np.empty(B, dtype=np.int64)
                for b in range(B):
                    top = np.argsort(-P[b], kind="stable")[:top_k]
                    weights = P[b, top] / P[b, top].sum()
                    chosen[b] = top[int(rng.choice(len(top), p=weights))]
            for b in range(B):
                if done[b]:
                    continue
                if chosen[b] == EOS_ID:
                    done[b] = True
                else:
                    outputs[b].append(int(chosen[b]))
            if done.all() or prefix.shape[1] >= decoder.max_len:
                break
            prefix = np.concatenate([prefix, np.where(chosen >= decoder.vocab_size, UNK_ID, chosen)[:, None]], axis=1)
    return outputs
