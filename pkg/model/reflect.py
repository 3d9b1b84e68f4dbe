"""
The full empathetic response model: reason annotation, contagion encoding,
expert emotion classification, the intent-twice loop and the pointer-generator
decoder, wired into one Module with a training pass and staged inference.
"""
import logging
from typing import List, NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from model.contagion import ContagionEncoder, ContextRepr
from model.decoder import PointerGeneratorDecoder, generate, response_loss
from model.emotion import ExpertHeads, emotion_loss, polarity_vote
from model.era import EmotionReasonAnnotator, ReasonRepr
from model.intent_twice import IntentTwice, NoiseSchedule, TwiceOutput
from model.layers import Adam, Module, prepend_row
from model.tensor import Tensor, getitem, make_rng, no_grad, set_default_dtype
from utils.config import RunConfig
from utils.corpus import Batch, Vocab
from utils.errors import CorpusError
from utils.labels import NOEM

logger = logging.getLogger(__name__)


class LossComponents(NamedTuple):
    L_em: Tensor
    L_twice: Tensor
    L_res: Tensor
    L_era: Tensor
    L_pg: Tensor
    L_ntx: Tensor
    L_cls: Tensor
    L_kl_pos: Tensor
    L_kl_neg: Tensor
    L_intent: Tensor


class Prediction(NamedTuple):
    emotion: np.ndarray          # [B] emotion indices
    intent_first: np.ndarray     # [B] intent indices
    intent_twice: np.ndarray     # [B] intent indices
    responses: List[List[int]]   # extended-vocabulary ids, EOS excluded
    tags: np.ndarray             # [B, L] reason tags fed to the encoder


class ReflectDiffu(Module):
    def __init__(self, vocab_size: int, config: RunConfig, rng: np.random.Generator):
        m, d = config.model, config.diffusion
        self.config = config
        self.era = EmotionReasonAnnotator(
            vocab_size, m.d_model, config.data.max_context_len, rng, m.n_layers, m.n_heads, m.ff_mult, m.dropout
        )
        self.encoder = ContagionEncoder(
            vocab_size, m.d_model, config.data.max_context_len, rng, m.n_layers, m.n_heads, m.ff_mult, m.dropout
        )
        self.experts = ExpertHeads(m.d_model, rng)
        self.experts.shared = config.ablated("experts")
        schedule = NoiseSchedule.linear(d.T, d.beta_start, d.beta_end, d.variance_form)
        self.twice = IntentTwice(
            m.d_model,
            rng,
            schedule,
            alpha=config.intent.alpha,
            emu_steps=d.emu_steps,
            hidden=d.hidden,
            time_dim=d.time_dim,
            ratio_clip=config.train.ratio_clip,
        )
        self.decoder = PointerGeneratorDecoder(
            vocab_size, m.d_model, m.max_response_len + 1, rng, m.n_layers, m.n_heads, m.ff_mult, m.dropout
        )

    # ------------------------------------------------------------------
    # Stages
    # ------------------------------------------------------------------
    def annotate_batch(self, batch: Batch, rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, Optional[ReasonRepr]]:
        """Viterbi reason tags (user tokens only) and the reason representation; all-noem when ERA is ablated."""
        if self.config.ablated("era"):
            return np.full(batch.context_ids.shape, NOEM, dtype=np.int64), None
        reason = self.era(batch.context_ids, batch.context_mask, rng)
        tags = self.era.predict_tags(batch.context_ids, batch.context_mask, batch.user_mask, reason)
        return tags, reason

    def encode_context(
        self,
        batch: Batch,
        tags: np.ndarray,
        reason: Optional[ReasonRepr],
        rng: Optional[np.random.Generator] = None,
    ) -> Tuple[ContextRepr, Tensor]:
        h_tilde = None if reason is None else reason.h_tilde
        return self.encoder(batch.context_ids, tags, batch.context_mask, h_tilde, rng)

    def classify_emotion(self, Q: Tensor, batch: Batch) -> np.ndarray:
        vote = polarity_vote(batch.sentiments)
        return np.argmax(self.experts(Q, vote.v).data, axis=-1)

    def infer_intent(self, Q: Tensor, context: ContextRepr, emotion: np.ndarray, rng: np.random.Generator) -> TwiceOutput:
        return self.twice(
            Q,
            context.H,
            context.mask,
            emotion,
            rng,
            use_emu=not self.config.ablated("emu"),
            use_twice=not self.config.ablated("intent_twice"),
        )

    def memory(self, emo_fused: Tensor, context: ContextRepr) -> Tuple[Tensor, np.ndarray]:
        """Decoder memory [Emo_fused; CTX; context tokens] and its key mask."""
        memory = prepend_row(emo_fused, context.H)
        memory_mask = np.concatenate([np.ones((context.mask.shape[0], 1), dtype=bool), context.mask], axis=1)
        return memory, memory_mask

    def respond(
        self,
        batch: Batch,
        emo_fused: Tensor,
        context: ContextRepr,
        rng: np.random.Generator,
        decode_mode: Optional[str] = None,
        top_k: Optional[int] = None,
    ) -> List[List[int]]:
        memory, memory_mask = self.memory(emo_fused, context)
        return generate(
            self.decoder,
            memory,
            memory_mask,
            batch.context_ext_ids,
            batch.context_mask,
            len(batch.oov),
            self.config.model.max_response_len + 1,
            decode_mode or self.config.eval.decode_mode,
            top_k or self.config.eval.top_k,
            rng,
        )

    # ------------------------------------------------------------------
    # Training pass
    # ------------------------------------------------------------------
    def losses(self, batch: Batch, rng: np.random.Generator) -> LossComponents:
        """Every loss component of one labelled batch, conditioned on gold tags, emotions and intents."""
        if not batch.labelled:
            unlabelled = [i for i, e, n in zip(batch.ids, batch.emotion, batch.intent) if e < 0 or n < 0]
            raise CorpusError(f"training batch has unlabelled dialogues: {unlabelled}")
        zero = Tensor(0.0)
        if self.config.ablated("era"):
            tags, reason, l_era = np.full(batch.context_ids.shape, NOEM, dtype=np.int64), None, zero
        else:
            reason = self.era(batch.context_ids, batch.context_mask, rng)
            tags = np.where(batch.user_mask, batch.context_tags, NOEM)
            l_era = self.era.loss(reason, tags, batch.context_mask)
        context, Q = self.encode_context(batch, tags, reason, rng)

        vote = polarity_vote(batch.sentiments)
        em = emotion_loss(
            self.experts(Q, vote.v),
            batch.emotion,
            Q,
            self.config.train.temperature,
            use_ntx=not self.config.ablated("experts"),
        )

        out = self.twice(
            Q,
            context.H,
            context.mask,
            batch.emotion,
            rng,
            gold_intent=batch.intent,
            use_emu=not self.config.ablated("emu"),
            use_twice=not self.config.ablated("intent_twice"),
        )
        l_twice = out.l_kl_pos + out.l_kl_neg + out.l_intent

        memory, memory_mask = self.memory(out.emo_fused, context)
        decoded = self.decoder(
            batch.decoder_in,
            batch.decoder_mask,
            memory,
            memory_mask,
            batch.context_ext_ids,
            batch.context_mask,
            len(batch.oov),
            rng,
        )
        l_res = response_loss(decoded.P_w, batch.decoder_out, batch.decoder_mask)
        return LossComponents(
            em.total, l_twice, l_res, l_era, out.l_pg, em.ntx, em.cls, out.l_kl_pos, out.l_kl_neg, out.l_intent
        )

    # ------------------------------------------------------------------
    # Inference
    # ------------------------------------------------------------------
    def _conditioning(self, batch: Batch, rng: np.random.Generator):
        tags, reason = self.annotate_batch(batch, rng)
        context, Q = self.encode_context(batch, tags, reason, rng)
        emotion = self.classify_emotion(Q, batch)
        out = self.infer_intent(Q, context, emotion, rng)
        return tags, context, emotion, out

    def predict(
        self,
        batch: Batch,
        rng: np.random.Generator,
        decode_mode: Optional[str] = None,
        top_k: Optional[int] = None,
    ) -> Prediction:
        """Inference from the context alone; gold labels in `batch` are ignored."""
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                tags, context, emotion, out = self._conditioning(batch, rng)
                responses = self.respond(batch, out.emo_fused, context, rng, decode_mode, top_k)
        finally:
            self.train(was_training)
        return Prediction(emotion, out.distribution.first_pass, out.intent_twice, responses, tags)

    def gold_token_probs(self, batch: Batch, rng: np.random.Generator) -> np.ndarray:
        """Teacher-forced P_w of every gold response token (EOS included) under inference conditioning."""
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                _, context, _, out = self._conditioning(batch, rng)
                memory, memory_mask = self.memory(out.emo_fused, context)
                P_w = self.decoder(
                    batch.decoder_in,
                    batch.decoder_mask,
                    memory,
                    memory_mask,
                    batch.context_ext_ids,
                    batch.context_mask,
                    len(batch.oov),
                ).P_w
        finally:
            self.train(was_training)
        b, t = np.nonzero(batch.decoder_mask)
        return getitem(P_w, (b, t, batch.decoder_out[b, t])).data


class ModelState(BaseModel):
    """Everything a checkpoint carries: config, vocabulary, parameters, optimizer and step."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    config: RunConfig
    vocab: Vocab
    model: ReflectDiffu
    optimizer: Adam
    step: int = 0
    trained: bool = False


def build_model_state(config: RunConfig, vocab: Vocab) -> ModelState:
    set_default_dtype(config.model.dtype)
    model = ReflectDiffu(len(vocab), config, make_rng(config.train.seed))
    optimizer = Adam(list(model.named_parameters()), tuple(config.train.adam_betas), config.train.adam_eps)
    logger.info(f"Built model with {sum(p.size for p in model.parameters())} parameters (vocab {len(vocab)})")
    return ModelState(config=config, vocab=vocab, model=model, optimizer=optimizer)
