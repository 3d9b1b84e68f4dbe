import logging
from typing import Any, Dict, List, Optional, Sequence

from langgraph.graph import END, StateGraph
from tqdm import tqdm

from model.tensor import make_rng, no_grad
from utils.corpus import Dialogue, collate, iter_batches
from utils.errors import ReflectError
from utils.labels import EMOTIONS, INTENTS
from utils.state import GraphState

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------
# Graph construction
# ---------------------------------------------------------------------
def create_pipeline():
    """
    Build and compile the inference workflow:
       annotate -> encode -> classify -> intent -> decode -> END
    A node that records an error routes straight to END.
    """
    workflow = StateGraph(GraphState)

    workflow.add_node("annotate", annotate)
    workflow.add_node("encode", encode)
    workflow.add_node("classify", classify)
    workflow.add_node("intent", intent)
    workflow.add_node("decode", decode)

    workflow.set_entry_point("annotate")
    stages = ["annotate", "encode", "classify", "intent", "decode"]
    for here, there in zip(stages, stages[1:]):
        workflow.add_conditional_edges(here, _next_or_end, {"next": there, "end": END})
    workflow.add_edge("decode", END)

    return workflow.compile()


def _next_or_end(state: GraphState) -> str:
    return "end" if state.get("error") else "next"


# ---------------------------------------------------------------------
# Node 1: reason annotation
# ---------------------------------------------------------------------
def annotate(state: GraphState) -> GraphState:
    try:
        logger.debug("Starting annotation")
        ms = state["model_state"]
        config = ms.config
        with no_grad():
            batch = collate(state["dialogues"], ms.vocab, config.data.max_context_len, config.model.max_response_len)
            tags, reason = ms.model.annotate_batch(batch, state["rng"])
        state["batch"] = batch
        state["tags"] = tags
        state["reason"] = reason
        state["current_step"] = "annotate"
        return state

    except Exception as e:
        logger.exception("Error in annotate")
        state["error"] = str(e)
        state["exception"] = e
        state["current_step"] = "annotate"
        return state


# ---------------------------------------------------------------------
# Node 2: contagion encoding
# ---------------------------------------------------------------------
def encode(state: GraphState) -> GraphState:
    try:
        model = state["model_state"].model
        with no_grad():
            context, Q = model.encode_context(state["batch"], state["tags"], state["reason"], state["rng"])
        state["context"] = context
        state["Q"] = Q
        state["current_step"] = "encode"
        return state

    except Exception as e:
        logger.exception("Error in encode")
        state["error"] = str(e)
        state["exception"] = e
        state["current_step"] = "encode"
        return state


# ---------------------------------------------------------------------
# Node 3: emotion classification
# ---------------------------------------------------------------------
def classify(state: GraphState) -> GraphState:
    try:
        model = state["model_state"].model
        with no_grad():
            state["emotion"] = model.classify_emotion(state["Q"], state["batch"])
        state["current_step"] = "classify"
        return state

    except Exception as e:
        logger.exception("Error in classify")
        state["error"] = str(e)
        state["exception"] = e
        state["current_step"] = "classify"
        return state


# ---------------------------------------------------------------------
# Node 4: intent twice
# ---------------------------------------------------------------------
def intent(state: GraphState) -> GraphState:
    try:
        model = state["model_state"].model
        with no_grad():
            state["intent"] = model.infer_intent(state["Q"], state["context"], state["emotion"], state["rng"])
        state["current_step"] = "intent"
        return state

    except Exception as e:
        logger.exception("Error in intent")
        state["error"] = str(e)
        state["exception"] = e
        state["current_step"] = "intent"
        return state


# ---------------------------------------------------------------------
# Node 5: response decoding
# ---------------------------------------------------------------------
def decode(state: GraphState) -> GraphState:
    try:
        ms = state["model_state"]
        batch = state["batch"]
        out = state["intent"]
        with no_grad():
            responses = ms.model.respond(batch, out.emo_fused, state["context"], state["rng"], state.get("decode_mode"))

        results = []
        first, twice = out.distribution.first_pass, out.intent_twice
        for b, ids in enumerate(responses):
            results.append({
                "id": batch.ids[b],
                "response": " ".join(ms.vocab.decode(ids, batch.oov)),
                "emotion": EMOTIONS[int(state["emotion"][b])].value,
                "intent_first": INTENTS[int(first[b])].value,
                "intent_twice": INTENTS[int(twice[b])].value,
            })
        state["responses"] = responses
        state["results"] = results
        state["current_step"] = "decode"
        return state

    except Exception as e:
        logger.exception("Error in decode")
        state["error"] = str(e)
        state["exception"] = e
        state["current_step"] = "decode"
        return state


# ---------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------
def run_pipeline(
    model_state,
    dialogues: Sequence[Dialogue],
    decode_mode: Optional[str] = None,
    batch_size: Optional[int] = None,
    seed: Optional[int] = None,
    progress: bool = False,
) -> List[Dict[str, Any]]:
    """
    Run the graph over `dialogues` in fixed-order chunks.

    A ReflectError raised inside a node propagates unchanged so callers keep its exit code;
    any other failure becomes a RuntimeError naming the failed node.
    """
    config = model_state.config
    graph = create_pipeline()
    rng = make_rng(config.eval.seed if seed is None else seed)
    model_state.model.eval()
    results: List[Dict[str, Any]] = []
    chunks = list(iter_batches(dialogues, batch_size or config.train.batch_size))
    for chunk in tqdm(chunks, desc="Generating", disable=not progress):
        final = graph.invoke({
            "dialogues": chunk,
            "model_state": model_state,
            "rng": rng,
            "decode_mode": decode_mode or config.eval.decode_mode,
            "error": None,
        })
        if final.get("error"):
            failure = final.get("exception")
            if isinstance(failure, ReflectError):
                raise failure
            raise RuntimeError(f"pipeline failed in {final.get('current_step')}: {final['error']}") from failure
        results.extend(final["results"])
    logger.info(f"Generated responses for {len(results)} dialogues")
    return results
