"""Closed label sets shared by the corpus, the classifiers and the intent table."""
from enum import Enum
from typing import Dict, List


class Speaker(str, Enum):
    USER = "user"
    BOT = "bot"


class ReasonTag(str, Enum):
    EM = "em"
    NOEM = "noem"

    @property
    def index(self) -> int:
        return TAG_INDEX[self]


# noem first so argmax ties resolve toward it
TAG_INDEX: Dict[ReasonTag, int] = {ReasonTag.NOEM: 0, ReasonTag.EM: 1}
TAGS_BY_INDEX: List[ReasonTag] = [ReasonTag.NOEM, ReasonTag.EM]
NOEM, EM = 0, 1


class Polarity(str, Enum):
    POS = "pos"
    NEG = "neg"
    NEU = "neu"


class EmotionLabel(str, Enum):
    SURPRISED = "surprised"
    PROUD = "proud"
    IMPRESSED = "impressed"
    NOSTALGIC = "nostalgic"
    TRUSTING = "trusting"
    FAITHFUL = "faithful"
    PREPARED = "prepared"
    EXCITED = "excited"
    CONFIDENT = "confident"
    JOYFUL = "joyful"
    GRATEFUL = "grateful"
    CONTENT = "content"
    CARING = "caring"
    ANGRY = "angry"
    DISAPPOINTED = "disappointed"
    HOPEFUL = "hopeful"
    SENTIMENTAL = "sentimental"
    ANTICIPATING = "anticipating"
    LONELY = "lonely"
    AFRAID = "afraid"
    ANXIOUS = "anxious"
    GUILTY = "guilty"
    EMBARRASSED = "embarrassed"
    SAD = "sad"
    APPREHENSIVE = "apprehensive"
    TERRIFIED = "terrified"
    JEALOUS = "jealous"
    DEVASTATED = "devastated"
    ANNOYED = "annoyed"
    FURIOUS = "furious"
    ASHAMED = "ashamed"
    DISGUSTED = "disgusted"

    @property
    def index(self) -> int:
        return EMOTIONS.index(self)

    @property
    def polarity(self) -> Polarity:
        return Polarity.POS if self in POSITIVE_EMOTIONS else Polarity.NEG


EMOTIONS: List[EmotionLabel] = list(EmotionLabel)

POSITIVE_EMOTIONS = frozenset(
    {
        EmotionLabel.SURPRISED,
        EmotionLabel.PROUD,
        EmotionLabel.IMPRESSED,
        EmotionLabel.NOSTALGIC,
        EmotionLabel.TRUSTING,
        EmotionLabel.FAITHFUL,
        EmotionLabel.PREPARED,
        EmotionLabel.EXCITED,
        EmotionLabel.CONFIDENT,
        EmotionLabel.JOYFUL,
        EmotionLabel.GRATEFUL,
        EmotionLabel.CONTENT,
        EmotionLabel.CARING,
        EmotionLabel.HOPEFUL,
        EmotionLabel.ANTICIPATING,
    }
)


class IntentLabel(str, Enum):
    QUESTIONING = "questioning"
    ACKNOWLEDGING = "acknowledging"
    CONSOLING = "consoling"
    AGREEING = "agreeing"
    ENCOURAGING = "encouraging"
    SYMPATHIZING = "sympathizing"
    SUGGESTING = "suggesting"
    WISHING = "wishing"
    NEUTRAL = "neutral"

    @property
    def index(self) -> int:
        return INTENTS.index(self)


INTENTS: List[IntentLabel] = list(IntentLabel)

N_EMOTIONS = len(EMOTIONS)
N_INTENTS = len(INTENTS)


def parse_emotion(value: str) -> EmotionLabel:
    try:
        return EmotionLabel(value.strip().lower())
    except ValueError:
        raise ValueError(f"unknown emotion {value!r}") from None


def parse_intent(value: str) -> IntentLabel:
    try:
        return IntentLabel(value.strip().lower())
    except ValueError:
        raise ValueError(f"unknown intent {value!r}") from None
