"""
Synthetic empathetic-dialogue corpus whose labels are recoverable by construction:
the emotion is the only emotion word in the user turns (and the only `em` token),
the intent is announced by a fixed cue phrase in the last user turn and the target
response is a fixed template of (intent, emotion word).
"""
import logging
from collections import Counter
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from model.tensor import make_rng
from model.intent_twice import load_intent_table
from utils.corpus import Dialogue, tokenize
from utils.errors import CorpusError
from utils.labels import EmotionLabel, IntentLabel, ReasonTag, Speaker

logger = logging.getLogger(__name__)

# Spreads the first few picks across intent-table rows and both polarities.
EMOTION_ORDER: List[EmotionLabel] = [
    EmotionLabel(e)
    for e in (
        "surprised", "angry", "excited", "sad", "hopeful", "disappointed", "proud", "lonely",
        "joyful", "afraid", "grateful", "anxious", "sentimental", "confident", "guilty", "impressed",
        "embarrassed", "content", "apprehensive", "caring", "terrified", "trusting", "jealous",
        "nostalgic", "anticipating", "faithful", "prepared", "devastated", "annoyed", "furious",
        "ashamed", "disgusted",
    )
]

INTENT_ORDER: List[IntentLabel] = [
    IntentLabel(i)
    for i in (
        "consoling", "encouraging", "acknowledging", "suggesting", "wishing",
        "sympathizing", "neutral", "questioning", "agreeing",
    )
]

TOPICS = ["job", "exam", "trip", "dog", "house", "car", "garden", "concert", "sister", "team", "project", "move"]

OPENERS = [
    "i feel so {kw} about the {topic} .",
    "today i was {kw} because of my {topic} .",
    "my {topic} made me {kw} .",
]

BOT_FOLLOWUPS = ["tell me more about it .", "what happened next ?", "i see , go on ."]

CUES: Dict[IntentLabel, str] = {
    IntentLabel.CONSOLING: "can you comfort me ?",
    IntentLabel.ENCOURAGING: "should i keep going ?",
    IntentLabel.ACKNOWLEDGING: "i just wanted to share it .",
    IntentLabel.SUGGESTING: "what would you do ?",
    IntentLabel.WISHING: "it happens next week .",
    IntentLabel.SYMPATHIZING: "do you understand me ?",
    IntentLabel.NEUTRAL: "anyway , the weather is cloudy .",
    IntentLabel.QUESTIONING: "guess what happened ?",
    IntentLabel.AGREEING: "it was the right call , right ?",
}

RESPONSES: Dict[IntentLabel, str] = {
    IntentLabel.CONSOLING: "i am here for you , being {kw} is hard .",
    IntentLabel.ENCOURAGING: "you can do it , keep going even if {kw} .",
    IntentLabel.ACKNOWLEDGING: "that makes sense , feeling {kw} is normal .",
    IntentLabel.SUGGESTING: "maybe take a walk when you feel {kw} .",
    IntentLabel.WISHING: "i wish you well while {kw} .",
    IntentLabel.SYMPATHIZING: "i understand how {kw} feels .",
    IntentLabel.NEUTRAL: "i see , {kw} happens .",
    IntentLabel.QUESTIONING: "why do you feel {kw} ?",
    IntentLabel.AGREEING: "yes , feeling {kw} is right .",
}


def response_template(intent: IntentLabel, emotion: EmotionLabel) -> str:
    return RESPONSES[intent].format(kw=emotion.value)


def allowed_intents(emotion: EmotionLabel, n_intents: int) -> List[IntentLabel]:
    pool = INTENT_ORDER[:n_intents]
    refer = set(load_intent_table().lookup(emotion))
    allowed = [i for i in pool if i in refer]
    return allowed or list(pool)


def _user_turn(text: str, emotion: EmotionLabel) -> Dict:
    tokens = tokenize(text)
    tags = [ReasonTag.EM if tok == emotion.value else ReasonTag.NOEM for tok in tokens]
    return {"speaker": Speaker.USER, "text": text, "reason_tags": tags, "emotion": emotion}


def _bot_turn(text: str, intent: Optional[IntentLabel] = None) -> Dict:
    return {"speaker": Speaker.BOT, "text": text, "intent": intent}


def generate_synthetic(seed: int, n_dialogues: int, n_emotions: int = 4, n_intents: int = 4) -> List[Dialogue]:
    if n_dialogues <= 0:
        raise CorpusError(f"n_dialogues must be > 0, got {n_dialogues}")
    if not 1 <= n_emotions <= len(EMOTION_ORDER):
        raise CorpusError(f"n_emotions must be in [1, {len(EMOTION_ORDER)}], got {n_emotions}")
    if not 1 <= n_intents <= len(INTENT_ORDER):
        raise CorpusError(f"n_intents must be in [1, {len(INTENT_ORDER)}], got {n_intents}")

    rng = make_rng(seed)
    emotions = EMOTION_ORDER[:n_emotions]
    seen: Counter = Counter()
    dialogues = []
    for i in range(n_dialogues):
        emotion = emotions[i % n_emotions]
        choices = allowed_intents(emotion, n_intents)
        intent = choices[seen[emotion] % len(choices)]
        seen[emotion] += 1

        topic = TOPICS[int(rng.integers(len(TOPICS)))]
        opener = OPENERS[int(rng.integers(len(OPENERS)))].format(kw=emotion.value, topic=topic)
        if rng.random() < 0.5:
            turns = [_user_turn(f"{opener} {CUES[intent]}", emotion)]
        else:
            followup = BOT_FOLLOWUPS[int(rng.integers(len(BOT_FOLLOWUPS)))]
            turns = [_user_turn(opener, emotion), _bot_turn(followup), _user_turn(CUES[intent], emotion)]
        turns.append(_bot_turn(response_template(intent, emotion), intent))
        dialogues.append(Dialogue(id=f"synth-{seed}-{i:05d}", turns=turns, target=len(turns) - 1))

    logger.info(f"Generated {n_dialogues} synthetic dialogues ({n_emotions} emotions, {n_intents} intents)")
    return dialogues


def label_histogram(dialogues: Sequence[Dialogue]) -> Counter:
    return Counter(d.emotion.value for d in dialogues if d.emotion is not None)


def split_corpus(
    dialogues: Sequence[Dialogue],
    fractions: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> Tuple[List[Dialogue], List[Dialogue], List[Dialogue]]:
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise CorpusError(f"split fractions must be three nonnegative numbers summing to 1, got {list(fractions)}")
    order = make_rng(seed).permutation(len(dialogues))
    n_train = int(np.floor(fractions[0] * len(dialogues)))
    n_val = int(np.floor(fractions[1] * len(dialogues)))
    pick = lambda idx: [dialogues[i] for i in idx]
    return pick(order[:n_train]), pick(order[n_train : n_train + n_val]), pick(order[n_train + n_val :])


def inject_emotion_noise(
    dialogues: Sequence[Dialogue],
    rate: float,
    seed: int = 0,
    labels: Optional[Sequence[EmotionLabel]] = None,
) -> List[Dialogue]:
    """Relabel the user-turn emotion of a `rate` fraction of dialogues to a different label."""
    if not 0.0 <= rate <= 1.0:
        raise CorpusError(f"noise rate must be in [0, 1], got {rate}")
    labels = list(labels) if labels is not None else sorted({d.emotion for d in dialogues if d.emotion}, key=lambda e: e.index)
    if len(labels) < 2 or rate == 0.0:
        return list(dialogues)
    rng = make_rng(seed)
    n_noisy = int(round(rate * len(dialogues)))
    noisy = set(int(i) for i in rng.choice(len(dialogues), size=n_noisy, replace=False))
    out = []
    for i, d in enumerate(dialogues):
        if i in noisy and d.emotion is not None:
            others = [e for e in labels if e != d.emotion]
            d = d.with_emotion(others[int(rng.integers(len(others)))])
        out.append(d)
    logger.info(f"Relabelled emotions of {n_noisy} of {len(dialogues)} dialogues")
    return out
