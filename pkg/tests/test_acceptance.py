"""End-to-end checks on the synthetic corpus. The desk runs are marked slow."""
import os

import numpy as np
import pytest

from main import predict_corpus
from model.reflect import build_model_state
from trainer import fit
from utils.checkpoint import load_checkpoint, save_checkpoint
from utils.config import PRESET_DIR, read_run_config
from utils.corpus import Vocab
from utils.labels import Speaker
from utils.metrics import accuracy, tag_f1
from utils.synthetic import generate_synthetic, inject_emotion_noise, split_corpus


def desk_run(emotion_noise: float = 0.0):
    config = read_run_config(os.path.join(PRESET_DIR, "desk.json"))
    dialogues = generate_synthetic(seed=0, n_dialogues=500, n_emotions=4, n_intents=4)
    train, val, test = split_corpus(dialogues, config.data.split, config.train.seed)
    if emotion_noise:
        train = inject_emotion_noise(train, emotion_noise, seed=1)
    vocab = Vocab.build(dialogues)
    state = build_model_state(config, vocab)
    log = fit(state, train, val, progress=False)
    return state, log, test


def gold_labels(dialogues):
    return [d.emotion.index for d in dialogues], [d.intent.index for d in dialogues]


@pytest.fixture(scope="module")
def clean_run():
    return desk_run()


@pytest.mark.slow
def test_desk_run_learns_the_corpus(clean_run):
    state, log, test = clean_run
    assert len(state.vocab) <= 200
    initial = log.rows[0].L
    final = float(np.mean([row.L for row in log.rows[-20:]]))
    assert final <= 0.5 * initial

    out = predict_corpus(state, test)
    emo_gold, intent_gold = gold_labels(test)
    assert accuracy(out["emo"], emo_gold) >= 80.0
    assert accuracy(out["twice"], intent_gold) >= 80.0


@pytest.mark.slow
def test_desk_run_recovers_reason_tags(clean_run):
    state, _, test = clean_run
    predicted, gold = [], []
    for d in test:
        tags = state.model.era.annotate(d, state.vocab).tags
        for i, turn in enumerate(d.turns):
            if turn.speaker == Speaker.USER:
                predicted.append([t.index for t in tags[i]])
                gold.append(turn.tag_ids)
    assert tag_f1(predicted, gold) >= 0.95


@pytest.mark.slow
def test_second_pass_corrects_noisy_emotion_labels():
    state, _, test = desk_run(emotion_noise=0.2)
    out = predict_corpus(state, test)
    _, intent_gold = gold_labels(test)
    assert accuracy(out["twice"], intent_gold) >= accuracy(out["first"], intent_gold)


# ---------------------------------------------------------------------
# Determinism and persistence on the tiny model
# ---------------------------------------------------------------------
def test_fixed_seed_training_is_bitwise_reproducible(tiny_config, vocab, corpus, tmp_path):
    logs = []
    for name in ("a.csv", "b.csv"):
        state = build_model_state(tiny_config, vocab)
        fit(state, corpus[:8], corpus[8:], log_path=str(tmp_path / name), progress=False)
        logs.append((tmp_path / name).read_bytes())
    assert logs[0] == logs[1]


def test_checkpoint_preserves_inference(model_state, corpus, tmp_path):
    fit(model_state, corpus, progress=False)
    path = tmp_path / "model.rfd"
    save_checkpoint(model_state, str(path))
    restored = load_checkpoint(str(path))
    prompts = corpus[:10]
    assert predict_corpus(restored, prompts) == predict_corpus(model_state, prompts)
