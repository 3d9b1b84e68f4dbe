import pytest

from model.intent_twice import lookup_refer_intents
from utils.errors import CorpusError
from utils.labels import ReasonTag, Speaker
from utils.synthetic import (
    CUES,
    EMOTION_ORDER,
    allowed_intents,
    generate_synthetic,
    inject_emotion_noise,
    label_histogram,
    response_template,
    split_corpus,
)


def test_same_seed_same_corpus():
    a = [d.to_record() for d in generate_synthetic(seed=5, n_dialogues=20)]
    b = [d.to_record() for d in generate_synthetic(seed=5, n_dialogues=20)]
    c = [d.to_record() for d in generate_synthetic(seed=6, n_dialogues=20)]
    assert a == b
    assert a != c


def test_labels_are_recoverable_from_the_text():
    for d in generate_synthetic(seed=1, n_dialogues=40):
        emotion, intent = d.emotion, d.intent
        assert intent in lookup_refer_intents(emotion)
        assert d.target_response.text == response_template(intent, emotion)
        user_turns = [t for t in d.context if t.speaker == Speaker.USER]
        assert user_turns[-1].text.endswith(CUES[intent])
        for turn in user_turns:
            for tok, tag in zip(turn.tokens, turn.reason_tags):
                assert (tag == ReasonTag.EM) == (tok == emotion.value)
        assert sum(tag == ReasonTag.EM for t in user_turns for tag in t.reason_tags) >= 1


def test_emotions_cycle_through_the_first_n():
    dialogues = generate_synthetic(seed=0, n_dialogues=40, n_emotions=4)
    histogram = label_histogram(dialogues)
    assert histogram == {e.value: 10 for e in EMOTION_ORDER[:4]}
    assert len({d.id for d in dialogues}) == 40


def test_each_emotion_uses_more_than_one_intent():
    dialogues = generate_synthetic(seed=0, n_dialogues=40, n_emotions=4, n_intents=4)
    for emotion in EMOTION_ORDER[:4]:
        intents = {d.intent for d in dialogues if d.emotion == emotion}
        assert intents == set(allowed_intents(emotion, 4))
        assert len(intents) >= 2


@pytest.mark.parametrize(
    "kwargs",
    [
        {"n_dialogues": 0},
        {"n_dialogues": 4, "n_emotions": 0},
        {"n_dialogues": 4, "n_emotions": 33},
        {"n_dialogues": 4, "n_intents": 10},
    ],
)
def test_bad_generator_arguments(kwargs):
    with pytest.raises(CorpusError):
        generate_synthetic(seed=0, **kwargs)


def test_split_is_a_partition():
    dialogues = generate_synthetic(seed=0, n_dialogues=100)
    train, val, test = split_corpus(dialogues, (0.8, 0.1, 0.1), seed=3)
    assert (len(train), len(val), len(test)) == (80, 10, 10)
    ids = [d.id for d in train + val + test]
    assert sorted(ids) == sorted(d.id for d in dialogues)
    assert split_corpus(dialogues, (0.8, 0.1, 0.1), seed=3)[0] == train


@pytest.mark.parametrize("fractions", [(0.5, 0.5), (0.9, 0.2, -0.1), (0.5, 0.3, 0.3)])
def test_bad_split_fractions(fractions):
    with pytest.raises(CorpusError, match="fractions"):
        split_corpus([], fractions)


def test_emotion_noise_relabels_the_requested_share():
    clean = generate_synthetic(seed=2, n_dialogues=40)
    noisy = inject_emotion_noise(clean, 0.25, seed=9)
    changed = [c.id for c, n in zip(clean, noisy) if c.emotion != n.emotion]
    assert len(changed) == 10
    # the text and the reason tags are untouched
    for c, n in zip(clean, noisy):
        assert [t.tokens for t in c.turns] == [t.tokens for t in n.turns]
        assert [t.reason_tags for t in c.turns] == [t.reason_tags for t in n.turns]
    assert inject_emotion_noise(clean, 0.0) == clean
    with pytest.raises(CorpusError, match="noise rate"):
        inject_emotion_noise(clean, 1.5)
