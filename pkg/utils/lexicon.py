import logging
import os
from functools import lru_cache
from typing import Dict, FrozenSet, Iterable, Optional, Sequence

from utils.labels import Polarity

logger = logging.getLogger(__name__)

DEFAULT_LEXICON_PATH = os.path.join(os.path.dirname(__file__), "resources", "lexicon.tsv")
NEGATIONS: FrozenSet[str] = frozenset({"not", "no", "never", "nothing", "nobody", "neither"})


class SentimentLexicon:
    """
    Word valences with a negation rule: a negation word flips the sign of the
    next scored word. The summed valence is pos above `t_pos`, neg below `t_neg`,
    neu otherwise.
    """

    def __init__(
        self,
        scores: Dict[str, float],
        negations: Iterable[str] = NEGATIONS,
        t_pos: float = 0.05,
        t_neg: float = -0.05,
    ):
        if not t_neg < 0 < t_pos:
            raise ValueError(f"thresholds must satisfy t_neg < 0 < t_pos, got {t_neg}, {t_pos}")
        for word, score in scores.items():
            if not -1.0 <= score <= 1.0:
                raise ValueError(f"valence of {word!r} is {score}, outside [-1, 1]")
        self.scores = dict(scores)
        self.negations = frozenset(negations)
        self.t_pos = t_pos
        self.t_neg = t_neg

    def __len__(self) -> int:
        return len(self.scores)

    def valence(self, tokens: Sequence[str]) -> float:
        total = 0.0
        negate = False
        for tok in tokens:
            if tok in self.negations:
                negate = True
                continue
            score = self.scores.get(tok)
            if score is None:
                continue
            total += -score if negate else score
            negate = False
        return total

    def sentiment(self, tokens: Sequence[str]) -> Polarity:
        total = self.valence(tokens)
        if total > self.t_pos:
            return Polarity.POS
        if total < self.t_neg:
            return Polarity.NEG
        return Polarity.NEU


def read_lexicon(path: str) -> Dict[str, float]:
    scores = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{line_number}: expected 'word<TAB>valence'")
            scores[parts[0].lower()] = float(parts[1])
    return scores


@lru_cache(maxsize=4)
def load_lexicon(path: Optional[str] = None) -> SentimentLexicon:
    path = path or DEFAULT_LEXICON_PATH
    lexicon = SentimentLexicon(read_lexicon(path))
    logger.debug(f"Loaded {len(lexicon)} lexicon entries from {path}")
    return lexicon


def lexicon_sentiment(tokens: Sequence[str], lexicon: Optional[SentimentLexicon] = None) -> Polarity:
    return (lexicon or load_lexicon()).sentiment(tokens)
