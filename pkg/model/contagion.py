"""Emotion-contagion encoder: triple embedding sum, CTX-prepended encoding and aggregation into Q."""
import logging
from typing import NamedTuple, Optional

import numpy as np

from model.layers import Embedding, Linear, Module, TransformerEncoder, masked_mean, prepend_row
from model.tensor import Tensor, as_tensor, scaled_dot_attention
from utils.corpus import CTX_ID
from utils.errors import NumericError

logger = logging.getLogger(__name__)


class ContextRepr(NamedTuple):
    H: Tensor          # [B, L+1, d], row 0 is CTX
    mask: np.ndarray   # [B, L+1]


class ContagionEncoder(Module):
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
        self.E_W = Embedding(vocab_size, d_model, rng)
        self.E_P = Embedding(max_len, d_model, rng)
        self.E_R = Embedding(2, d_model, rng)
        self.encoder = TransformerEncoder(d_model, n_layers, n_heads, ff_mult, rng, p_drop)
        self.W_q = Linear(d_model, d_model, rng, bias=False)
        self.W_k = Linear(d_model, d_model, rng, bias=False)
        self.W_v = Linear(d_model, d_model, rng, bias=False)
        self.max_len = max_len

    def embed(self, ids: np.ndarray, tags: np.ndarray) -> Tensor:
        """E_C[i] = E_W[token_i] + E_P[i] + E_R[tag_i]; tag index 0 is noem, 1 is em."""
        ids = np.asarray(ids, dtype=np.int64)
        tags = np.asarray(tags, dtype=np.int64)
        if ids.shape != tags.shape:
            raise NumericError(f"{tags.shape} reason tags for {ids.shape} tokens")
        L = ids.shape[-1]
        if L > self.max_len:
            raise NumericError(f"{L} positions exceed max_len={self.max_len}")
        return self.E_W(ids) + self.E_P(np.arange(L)) + self.E_R(tags)

    def encode(
        self,
        E_C: Tensor,
        mask: Optional[np.ndarray] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> ContextRepr:
        E_C = as_tensor(E_C)
        if E_C.ndim == 2:
            E_C = E_C.reshape(1, *E_C.shape)
            mask = None if mask is None else np.asarray(mask, dtype=bool)[None, :]
        B, L, _ = E_C.shape
        if L > self.max_len - 1:
            raise NumericError(f"context of {L} tokens exceeds max_len - 1 = {self.max_len - 1} (CTX takes one slot)")
        mask = np.ones((B, L), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        ctx = self.E_W(np.full(B, CTX_ID))
        full_mask = np.concatenate([np.ones((B, 1), dtype=bool), mask], axis=1)
        H = self.encoder(prepend_row(ctx, E_C), full_mask, rng)
        return ContextRepr(H, full_mask)

    def aggregate(
        self,
        H: Tensor,
        h_tilde: Tensor,
        H_mask: Optional[np.ndarray] = None,
        reason_mask: Optional[np.ndarray] = None,
    ) -> Tensor:
        """Q = masked mean over H rows of Attention(H W_q, h̃ W_k, h̃ W_v)."""
        H, h_tilde = as_tensor(H), as_tensor(h_tilde)
        single = H.ndim == 2
        if single:
            H = H.reshape(1, *H.shape)
            h_tilde = h_tilde.reshape(1, *h_tilde.shape)
        if h_tilde.shape[1] == 0:
            raise NumericError("aggregate needs at least one reason row")
        B = H.shape[0]
        H_mask = np.ones(H.shape[:2], dtype=bool) if H_mask is None else np.asarray(H_mask, dtype=bool).reshape(B, -1)
        reason_mask = (
            np.ones(h_tilde.shape[:2], dtype=bool)
            if reason_mask is None
            else np.asarray(reason_mask, dtype=bool).reshape(B, -1)
        )
        attended, _ = scaled_dot_attention(self.W_q(H), self.W_k(h_tilde), self.W_v(h_tilde), reason_mask[:, None, :])
        Q = masked_mean(attended, H_mask)
        return Q[0] if single else Q

    def forward(
        self,
        ids: np.ndarray,
        tags: np.ndarray,
        mask: np.ndarray,
        h_tilde: Optional[Tensor] = None,
        rng: Optional[np.random.Generator] = None,
    ):
        """Returns (ContextRepr, Q). Without h̃ the aggregation attends over H itself."""
        context = self.encode(self.embed(ids, tags), mask, rng)
        if h_tilde is None:
            Q = self.aggregate(context.H, context.H, context.mask, context.mask)
        else:
            Q = self.aggregate(context.H, h_tilde, context.mask, mask)
        return context, Q
