"""
Dialogue data model, tokenizer, vocabulary, JSONL ingestion and batching.

Corpus format (UTF-8, one object per line):
    {"id": str,
     "turns": [{"speaker": "user"|"bot", "text": str,
                "reason_tags": ["em"|"noem", ...],   # optional, all-noem when absent
                "emotion": str|null, "intent": str|null}, ...],
     "target": int}                                   # index of the target bot turn
"""
import json
import logging
import os
import re
from collections import Counter
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from utils.errors import CorpusError, VocabMismatchError
from utils.labels import (
    TAG_INDEX,
    EmotionLabel,
    IntentLabel,
    Polarity,
    ReasonTag,
    Speaker,
)
from utils.lexicon import load_lexicon

logger = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)

PAD, UNK, SOS, EOS, CTX = "<pad>", "<unk>", "<sos>", "<eos>", "<ctx>"
SPECIALS = [PAD, UNK, SOS, EOS, CTX]
PAD_ID, UNK_ID, SOS_ID, EOS_ID, CTX_ID = range(5)


def tokenize(text: str) -> List[str]:
    """Lowercase, split punctuation into single-character tokens, drop whitespace."""
    return _TOKEN_RE.findall(text.lower())


# ---------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------
class Turn(BaseModel):
    model_config = ConfigDict(frozen=True, use_enum_values=False)

    speaker: Speaker
    text: str
    tokens: List[str]
    reason_tags: List[ReasonTag]
    emotion: Optional[EmotionLabel] = None
    intent: Optional[IntentLabel] = None

    @model_validator(mode="before")
    @classmethod
    def _fill_tokens(cls, data):
        if isinstance(data, dict):
            data = dict(data)
            if data.get("tokens") is None:
                data["tokens"] = tokenize(data.get("text", ""))
            if data.get("reason_tags") is None:
                data["reason_tags"] = [ReasonTag.NOEM] * len(data["tokens"])
        return data

    @model_validator(mode="after")
    def _check_tags(self) -> "Turn":
        if len(self.reason_tags) != len(self.tokens):
            raise ValueError(
                f"reason_tags has {len(self.reason_tags)} entries for {len(self.tokens)} tokens"
            )
        if self.speaker == Speaker.BOT and any(t != ReasonTag.NOEM for t in self.reason_tags):
            raise ValueError("bot turns must be tagged all-noem")
        return self

    @property
    def tag_ids(self) -> List[int]:
        return [TAG_INDEX[t] for t in self.reason_tags]


class Dialogue(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    turns: List[Turn]
    target: int

    @model_validator(mode="after")
    def _check_structure(self) -> "Dialogue":
        if not 0 <= self.target < len(self.turns):
            raise ValueError(f"target index {self.target} outside {len(self.turns)} turns")
        if self.turns[self.target].speaker != Speaker.BOT:
            raise ValueError("target turn must be a bot turn")
        for prev, nxt in zip(self.turns, self.turns[1:]):
            if prev.speaker == nxt.speaker:
                raise ValueError("speakers must alternate")
        if not any(t.speaker == Speaker.USER for t in self.turns[: self.target]):
            raise ValueError("at least one user turn must precede the target")
        return self

    @property
    def context(self) -> List[Turn]:
        return self.turns[: self.target]

    @property
    def target_response(self) -> Turn:
        return self.turns[self.target]

    @property
    def emotion(self) -> Optional[EmotionLabel]:
        """Label of the most recent user turn that carries one."""
        for turn in reversed(self.context):
            if turn.speaker == Speaker.USER and turn.emotion is not None:
                return turn.emotion
        return None

    @property
    def intent(self) -> Optional[IntentLabel]:
        return self.target_response.intent

    def to_record(self) -> Dict:
        return {
            "id": self.id,
            "turns": [
                {
                    "speaker": t.speaker.value,
                    "text": t.text,
                    "reason_tags": [tag.value for tag in t.reason_tags],
                    "emotion": t.emotion.value if t.emotion else None,
                    "intent": t.intent.value if t.intent else None,
                }
                for t in self.turns
            ],
            "target": self.target,
        }

    def with_tags(self, tags_by_turn: Dict[int, List[ReasonTag]]) -> "Dialogue":
        turns = [
            t.model_copy(update={"reason_tags": tags_by_turn[i]}) if i in tags_by_turn else t
            for i, t in enumerate(self.turns)
        ]
        return self.model_copy(update={"turns": turns})

    def with_emotion(self, emotion: EmotionLabel) -> "Dialogue":
        turns = [
            t.model_copy(update={"emotion": emotion}) if t.speaker == Speaker.USER and t.emotion else t
            for t in self.turns
        ]
        return self.model_copy(update={"turns": turns})


# ---------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------
class Vocab:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: List[str] = list(SPECIALS)
        for tok in tokens:
            if tok not in SPECIALS:
                self.itos.append(tok)
        self.stoi: Dict[str, int] = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise VocabMismatchError("vocabulary contains duplicate tokens")

    @classmethod
    def build(cls, dialogues: Sequence[Dialogue], min_count: int = 1) -> "Vocab":
        counts = Counter(tok for d in dialogues for t in d.turns for tok in t.tokens)
        kept = sorted((tok for tok, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
        vocab = cls(kept)
        logger.info(f"Built vocabulary of {len(vocab)} entries from {len(dialogues)} dialogues")
        return vocab

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.stoi.get(tok, UNK_ID) for tok in tokens]

    def decode(self, ids: Sequence[int], oov: Sequence[str] = ()) -> List[str]:
        out = []
        for i in ids:
            i = int(i)
            out.append(self.itos[i] if i < len(self.itos) else oov[i - len(self.itos)])
        return out

    def to_json(self) -> str:
        return json.dumps(self.itos[len(SPECIALS):], ensure_ascii=False)

    @classmethod
    def from_json(cls, payload: str) -> "Vocab":
        return cls(json.loads(payload))


# ---------------------------------------------------------------------
# JSONL I/O
# ---------------------------------------------------------------------
def parse_record(record: Dict, line_number: Optional[int] = None) -> Dialogue:
    try:
        turns = record["turns"]
        for turn in turns:
            for key, enum in (("emotion", EmotionLabel), ("intent", IntentLabel)):
                value = turn.get(key)
                if value is not None and value not in enum._value2member_map_:
                    raise CorpusError(f"unknown {key} {value!r}", line_number)
        return Dialogue(id=str(record["id"]), turns=turns, target=int(record["target"]))
    except CorpusError:
        raise
    except (KeyError, TypeError, AttributeError) as e:
        raise CorpusError(f"missing or malformed field: {e}", line_number) from e
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise CorpusError(f"{where}: {first['msg']}", line_number) from e


def read_dialogues(path: str) -> List[Dialogue]:
    if not os.path.exists(path):
        raise CorpusError(f"corpus file not found: {path}")
    dialogues = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"invalid JSON: {e.msg}", line_number) from e
            dialogues.append(parse_record(record, line_number))
    logger.info(f"Loaded {len(dialogues)} dialogues from {path}")
    return dialogues


def load_corpus(
    path: str,
    vocab_mode: str = "build",
    vocab: Optional[Vocab] = None,
    min_count: int = 1,
) -> Tuple[List[Dialogue], Vocab]:
    dialogues = read_dialogues(path)
    if vocab_mode == "build":
        vocab = Vocab.build(dialogues, min_count)
    elif vocab_mode == "reuse":
        if vocab is None:
            raise CorpusError("vocab_mode='reuse' needs a vocabulary")
        unknown = sum(1 for d in dialogues for t in d.turns for tok in t.tokens if tok not in vocab)
        if unknown:
            logger.info(f"{unknown} token occurrences map to {UNK} under the reused vocabulary")
    else:
        raise CorpusError(f"vocab_mode must be 'build' or 'reuse', got {vocab_mode!r}")
    return dialogues, vocab


def save_corpus(dialogues: Iterable[Dialogue], path: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for d in dialogues:
            f.write(json.dumps(d.to_record(), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------
class Batch(BaseModel):
    """Padded arrays for one minibatch. Context positions exclude the CTX slot."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    ids: List[str]
    context_ids: np.ndarray       # [B, L] vocab ids, UNK for OOV
    context_ext_ids: np.ndarray   # [B, L] ids in the batch-extended vocabulary
    context_tags: np.ndarray      # [B, L] gold reason tags
    context_mask: np.ndarray      # [B, L] True on real tokens
    user_mask: np.ndarray         # [B, L] True on user-turn tokens
    decoder_in: np.ndarray        # [B, T] SOS + response ids
    decoder_out: np.ndarray       # [B, T] response ext ids + EOS
    decoder_mask: np.ndarray      # [B, T]
    emotion: np.ndarray           # [B] emotion index, -1 when unlabelled
    intent: np.ndarray            # [B] intent index, -1 when unlabelled
    sentiments: List[Polarity]
    oov: List[str]

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def labelled(self) -> bool:
        return bool(np.all(self.emotion >= 0) and np.all(self.intent >= 0))


def truncate_context(turns: Sequence[Turn], budget: int) -> List[Tuple[Turn, List[str], List[ReasonTag]]]:
    """Keep the newest turns whose tokens fit in `budget`; a turn that only partly fits keeps its tail."""
    kept = []
    remaining = budget
    for turn in reversed(turns):
        if remaining <= 0:
            break
        n = len(turn.tokens)
        start = max(0, n - remaining)
        kept.append((turn, list(turn.tokens[start:]), list(turn.reason_tags[start:])))
        remaining -= n - start
    kept.reverse()
    return kept


def collate(
    dialogues: Sequence[Dialogue],
    vocab: Vocab,
    max_context_len: int = 128,
    max_response_len: int = 32,
    lexicon=None,
) -> Batch:
    if not dialogues:
        raise CorpusError("cannot collate an empty batch")
    if lexicon is None:
        lexicon = load_lexicon()

    budget = max_context_len - 1
    oov: List[str] = []
    oov_index: Dict[str, int] = {}

    def ext_id(token: str) -> int:
        if token in vocab.stoi:
            return vocab.stoi[token]
        if token not in oov_index:
            oov_index[token] = len(oov)
            oov.append(token)
        return len(vocab) + oov_index[token]

    rows = []
    for d in dialogues:
        total = sum(len(t.tokens) for t in d.context)
        kept = truncate_context(d.context, budget)
        if total > budget:
            logger.warning(f"Dialogue {d.id}: context of {total} tokens truncated to {budget}")
        tokens, tags, user = [], [], []
        for turn, toks, tg in kept:
            tokens.extend(toks)
            is_user = turn.speaker == Speaker.USER
            tags.extend(TAG_INDEX[t] if is_user else TAG_INDEX[ReasonTag.NOEM] for t in tg)
            user.extend([is_user] * len(toks))
        if not tokens:
            raise CorpusError(f"dialogue {d.id} has an empty context")
        user_tokens = [tok for tok, u in zip(tokens, user) if u]
        response = list(d.target_response.tokens[:max_response_len])
        rows.append((d, tokens, tags, user, user_tokens, response))

    B = len(rows)
    L = max(len(r[1]) for r in rows)
    T = max(len(r[5]) for r in rows) + 1
    context_ids = np.full((B, L), PAD_ID, dtype=np.int64)
    context_ext = np.full((B, L), PAD_ID, dtype=np.int64)
    context_tags = np.zeros((B, L), dtype=np.int64)
    context_mask = np.zeros((B, L), dtype=bool)
    user_mask = np.zeros((B, L), dtype=bool)
    dec_in = np.full((B, T), PAD_ID, dtype=np.int64)
    dec_out = np.full((B, T), PAD_ID, dtype=np.int64)
    dec_mask = np.zeros((B, T), dtype=bool)
    emotion = np.full(B, -1, dtype=np.int64)
    intent = np.full(B, -1, dtype=np.int64)
    sentiments = []

    for b, (d, tokens, tags, user, user_tokens, response) in enumerate(rows):
        n = len(tokens)
        context_ids[b, :n] = vocab.encode(tokens)
        context_ext[b, :n] = [ext_id(tok) for tok in tokens]
        context_tags[b, :n] = tags
        context_mask[b, :n] = True
        user_mask[b, :n] = user
        m = len(response)
        copyable = set(tokens)
        dec_in[b, : m + 1] = [SOS_ID] + vocab.encode(response)
        # an unknown target word is only reachable by copying it from this row's context
        dec_out[b, : m + 1] = [ext_id(tok) if tok in vocab.stoi or tok in copyable else UNK_ID for tok in response] + [EOS_ID]
        dec_mask[b, : m + 1] = True
        if d.emotion is not None:
            emotion[b] = d.emotion.index
        if d.intent is not None:
            intent[b] = d.intent.index
        sentiments.append(lexicon.sentiment(user_tokens))

    return Batch(
        ids=[d.id for d in dialogues],
        context_ids=context_ids,
        context_ext_ids=context_ext,
        context_tags=context_tags,
        context_mask=context_mask,
        user_mask=user_mask,
        decoder_in=dec_in,
        decoder_out=dec_out,
        decoder_mask=dec_mask,
        emotion=emotion,
        intent=intent,
        sentiments=sentiments,
        oov=oov,
    )


def iter_batches(dialogues: Sequence[Dialogue], batch_size: int, order: Optional[np.ndarray] = None):
    order = np.arange(len(dialogues)) if order is None else order
    for start in range(0, len(order), batch_size):
        yield [dialogues[i] for i in order[start : start + batch_size]]
