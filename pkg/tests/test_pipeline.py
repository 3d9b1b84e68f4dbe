import pytest

from model.reflect import ReflectDiffu
from pipeline import create_pipeline, run_pipeline
from utils.errors import NumericError
from utils.labels import EMOTIONS, INTENTS

STAGES = ["annotate", "encode", "classify", "intent", "decode"]


def test_graph_has_every_stage():
    graph = create_pipeline()
    assert set(STAGES) <= set(graph.get_graph().nodes)


def test_results_follow_the_input_order(model_state, corpus):
    results = run_pipeline(model_state, corpus[:6], batch_size=4)
    assert [r["id"] for r in results] == [d.id for d in corpus[:6]]
    emotions = {e.value for e in EMOTIONS}
    intents = {i.value for i in INTENTS}
    for r in results:
        assert set(r) == {"id", "response", "emotion", "intent_first", "intent_twice"}
        assert isinstance(r["response"], str)
        assert r["emotion"] in emotions
        assert r["intent_first"] in intents and r["intent_twice"] in intents


def test_runs_are_reproducible(model_state, corpus):
    first = run_pipeline(model_state, corpus[:4], decode_mode="topk", seed=3)
    assert run_pipeline(model_state, corpus[:4], decode_mode="topk", seed=3) == first


def test_failing_node_is_named(model_state, corpus, monkeypatch):
    def broken(self, *args, **kwargs):
        raise ValueError("decoder exploded")

    monkeypatch.setattr(ReflectDiffu, "respond", broken)
    with pytest.raises(RuntimeError, match="pipeline failed in decode: decoder exploded"):
        run_pipeline(model_state, corpus[:2])


def test_error_skips_later_nodes(model_state, corpus, monkeypatch):
    reached = []

    def broken(self, *args, **kwargs):
        raise ValueError("no tags")

    def spy(self, *args, **kwargs):
        reached.append("encode")
        raise AssertionError("encode must not run")

    monkeypatch.setattr(ReflectDiffu, "annotate_batch", broken)
    monkeypatch.setattr(ReflectDiffu, "encode_context", spy)
    with pytest.raises(RuntimeError, match="pipeline failed in annotate"):
        run_pipeline(model_state, corpus[:2])
    assert reached == []


def test_typed_errors_keep_their_class(model_state, corpus, monkeypatch):
    def broken(self, *args, **kwargs):
        raise NumericError("context longer than max_len")

    monkeypatch.setattr(ReflectDiffu, "encode_context", broken)
    with pytest.raises(NumericError, match="context longer than max_len"):
        run_pipeline(model_state, corpus[:2])
