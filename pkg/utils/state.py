from typing import Any, Dict, List, Optional
from typing_extensions import TypedDict


class GraphState(TypedDict, total=False):
    dialogues: List[Any]          # utils.corpus.Dialogue
    model_state: Any              # model.reflect.ModelState
    rng: Any                      # numpy Generator shared by every node
    decode_mode: str
    batch: Any                    # utils.corpus.Batch
    tags: Any                     # [B, L] reason tags
    reason: Any                   # model.era.ReasonRepr or None
    context: Any                  # model.contagion.ContextRepr
    Q: Any
    emotion: Any                  # [B] emotion indices
    intent: Any                   # model.intent_twice.TwiceOutput
    responses: List[List[int]]
    results: List[Dict[str, Any]]
    current_step: str
    error: Optional[str]
    exception: Optional[BaseException]   # the caught error, re-raised by run_pipeline
