import argparse
import json
import logging
import os
import sys
from collections import Counter
from typing import List, Optional, Sequence

from model.reflect import build_model_state
from model.tensor import make_rng
from pipeline import run_pipeline
from trainer import fit
from utils.checkpoint import load_checkpoint, save_checkpoint
from utils.config import Config, RunConfig
from utils.corpus import collate, iter_batches, load_corpus, read_dialogues, save_corpus
from utils.errors import ConfigError, ReflectError, TrainingDivergedError
from utils.labels import Speaker
from utils.metrics import EvalReport, evaluate_responses, tag_f1
from utils.synthetic import generate_synthetic, inject_emotion_noise, label_histogram, split_corpus

logger = logging.getLogger(__name__)


class Colors:
    GREEN = '\033[92m'   # Results and summaries
    CYAN = '\033[96m'    # Metric values
    YELLOW = '\033[93m'  # System messages
    RED = '\033[91m'     # Failures
    BOLD = '\033[1m'
    RESET = '\033[0m'    # Resets color to default


def print_histogram(histogram: Counter, total: int) -> None:
    """Print the emotion label distribution of a corpus as a bar chart."""
    print(f"\n{Colors.BOLD}--- LABEL HISTOGRAM ---{Colors.RESET}")
    for label, count in sorted(histogram.items(), key=lambda kv: (-kv[1], kv[0])):
        perc = 100.0 * count / max(total, 1)
        bar = "#" * int(perc / 5)
        print(f"{label:>14}: {count:5d} ({perc:5.1f}%) {bar}")
    print(f"{'total':>14}: {sum(histogram.values()):5d}")
    print(f"{Colors.BOLD}--- END HISTOGRAM ---{Colors.RESET}\n")


def print_report(report: EvalReport) -> None:
    print(f"\n{Colors.BOLD}--- EVALUATION ---{Colors.RESET}")
    for key, value in report.model_dump(by_alias=True).items():
        shown = "n/a" if value is None else (f"{value:.2f}" if isinstance(value, float) else str(value))
        print(f"{key:>10}: {Colors.CYAN}{shown}{Colors.RESET}")
    print(f"{Colors.BOLD}--- END EVALUATION ---{Colors.RESET}\n")


def write_jsonl(rows: Sequence[dict], path: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------
def cmd_synth(args, config: Config, run: RunConfig) -> int:
    synth = run.data.synthetic
    dialogues = generate_synthetic(
        args.seed,
        args.n,
        args.emotions or synth.n_emotions,
        args.intents or synth.n_intents,
    )
    noise = synth.emotion_noise if args.noise is None else args.noise
    if noise:
        dialogues = inject_emotion_noise(dialogues, noise, args.seed)
    save_corpus(dialogues, args.out)
    print(f"{Colors.GREEN}Wrote {len(dialogues)} dialogues to {args.out}{Colors.RESET}")
    print_histogram(label_histogram(dialogues), len(dialogues))
    return 0


def cmd_train(args, config: Config, run: RunConfig) -> int:
    dialogues, vocab = load_corpus(args.data, "build", min_count=run.data.vocab_min_count)
    train, val, test = split_corpus(dialogues, run.data.split, run.train.seed)
    logger.info(f"Split {len(dialogues)} dialogues into {len(train)}/{len(val)}/{len(test)}")
    state = build_model_state(run, vocab)
    log_path = args.log or os.path.splitext(args.out)[0] + ".csv"
    try:
        log = fit(state, train, val, log_path=log_path, progress=not args.quiet)
    except TrainingDivergedError as e:
        if e.last_good_state is not None:
            save_checkpoint(e.last_good_state, args.out)
        print(f"{Colors.RED}Training diverged at step {e.step}; saved the last good state to {args.out}{Colors.RESET}")
        return e.exit_code
    save_checkpoint(state, args.out)
    print(f"{Colors.GREEN}Trained {len(log.rows)} steps; checkpoint {args.out}, log {log_path}{Colors.RESET}")
    if log.best_val is not None:
        print(f"Best validation loss {Colors.CYAN}{log.best_val:.4f}{Colors.RESET} at step {log.best_step}")
    return 0


def cmd_generate(args, config: Config, run: Optional[RunConfig]) -> int:
    state = load_checkpoint(args.ckpt, run if args.config else None, strict=config.STRICT)
    dialogues, _ = load_corpus(args.input, "reuse", vocab=state.vocab)
    results = run_pipeline(state, dialogues, decode_mode=args.mode, progress=not args.quiet)
    write_jsonl(results, args.out)
    print(f"{Colors.GREEN}Wrote {len(results)} responses to {args.out}{Colors.RESET}")
    return 0


def predict_corpus(state, dialogues) -> dict:
    """Responses, labels and gold-token probabilities for every dialogue, in corpus order."""
    run = state.config
    rng = make_rng(run.eval.seed)
    out = {"hyp": [], "emo": [], "first": [], "twice": [], "probs": []}
    for chunk in iter_batches(dialogues, run.train.batch_size):
        batch = collate(chunk, state.vocab, run.data.max_context_len, run.model.max_response_len)
        pred = state.model.predict(batch, rng)
        out["hyp"].extend(state.vocab.decode(ids, batch.oov) for ids in pred.responses)
        out["emo"].extend(int(e) for e in pred.emotion)
        out["first"].extend(int(i) for i in pred.intent_first)
        out["twice"].extend(int(i) for i in pred.intent_twice)
        out["probs"].extend(state.model.gold_token_probs(batch, rng).tolist())
    return out


def cmd_eval(args, config: Config, run: Optional[RunConfig]) -> int:
    if args.gold_only:
        dialogues = read_dialogues(args.data)
        refs = [list(d.target_response.tokens) for d in dialogues]
        report = evaluate_responses(refs, refs)
    else:
        if not args.ckpt:
            raise ConfigError("eval needs --ckpt unless --gold-only is given")
        state = load_checkpoint(args.ckpt, run if args.config else None, strict=config.STRICT)
        dialogues, _ = load_corpus(args.data, "reuse", vocab=state.vocab)
        refs = [list(d.target_response.tokens) for d in dialogues]
        out = predict_corpus(state, dialogues)
        emo_gold = [d.emotion.index if d.emotion else -1 for d in dialogues]
        intent_gold = [d.intent.index if d.intent else -1 for d in dialogues]
        report = evaluate_responses(
            out["hyp"], refs, out["emo"], emo_gold, out["twice"], intent_gold, out["probs"]
        )
        first_acc = sum(p == g for p, g in zip(out["first"], intent_gold)) / max(len(dialogues), 1)
        logger.info(f"First-pass intent accuracy {100 * first_acc:.2f}")
    parent = os.path.dirname(args.out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(report.to_json() + "\n")
    print_report(report)
    return 0


def cmd_annotate(args, config: Config, run: Optional[RunConfig]) -> int:
    state = load_checkpoint(args.ckpt, run if args.config else None, strict=config.STRICT)
    dialogues, _ = load_corpus(args.data, "reuse", vocab=state.vocab)
    annotated, predicted, gold = [], [], []
    for d in dialogues:
        tags = state.model.era.annotate(d, state.vocab, strict=config.STRICT).tags
        for i, turn in enumerate(d.turns):
            if turn.speaker == Speaker.USER:
                predicted.append([t.index for t in tags[i]])
                gold.append(turn.tag_ids)
        annotated.append(d.with_tags(tags))
    save_corpus(annotated, args.out)
    print(f"{Colors.GREEN}Annotated {len(annotated)} dialogues into {args.out}{Colors.RESET}")
    print(f"Tag F1 against the input tags: {Colors.CYAN}{tag_f1(predicted, gold):.4f}{Colors.RESET}")
    return 0


def cmd_schema(args, config: Config, run: Optional[RunConfig]) -> int:
    """Write the JSON schema of a run config (or of the eval report) generated from its pydantic model."""
    model = EvalReport if args.report else RunConfig
    text = json.dumps(model.model_json_schema(), indent=2, sort_keys=True)
    if not args.out:
        print(text)
        return 0
    parent = os.path.dirname(args.out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(text + "\n")
    print(f"{Colors.GREEN}Wrote the {model.__name__} schema to {args.out}{Colors.RESET}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "annotate": cmd_annotate,
    "schema": cmd_schema,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reflect", description="Empathetic response generation with emotion reasons and intent twice.")
    parser.add_argument("--config", help="RunConfig JSON (default: REFLECT_CONFIG or configs/desk.json)")
    parser.add_argument("--show-config", action="store_true", help="print the resolved configuration and exit")
    parser.add_argument("--log-level", help="overrides REFLECT_LOG_LEVEL")
    parser.add_argument("--quiet", action="store_true", help="hide progress bars")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="write a synthetic corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--emotions", type=int)
    p.add_argument("--intents", type=int)
    p.add_argument("--noise", type=float, help="fraction of dialogues whose emotion label is corrupted")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="CSV training log (default: next to the checkpoint)")

    p = sub.add_parser("generate", help="generate responses and predicted labels")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["greedy", "topk"])

    p = sub.add_parser("eval", help="compute automatic metrics")
    p.add_argument("--ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gold-only", action="store_true", help="score gold responses against themselves; model fields are null")

    p = sub.add_parser("annotate", help="fill reason tags with the trained annotator")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("schema", help="print the JSON schema of a run config")
    p.add_argument("--out", help="write to a file instead of stdout")
    p.add_argument("--report", action="store_true", help="the eval report schema instead")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    config = Config()
    logging.basicConfig(level=getattr(logging, (args.log_level or config.LOG_LEVEL).upper(), logging.INFO))
    logger.debug(f"{config}")

    try:
        run = config.load_run_config(args.config)
        if args.show_config:
            print(json.dumps(run.model_dump(mode="json"), indent=2))
            return 0
        if not args.command:
            parser.print_help()
            return 2
        return COMMANDS[args.command](args, config, run)
    except ReflectError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"{Colors.RED}{e}{Colors.RESET}", file=sys.stderr)
        return e.exit_code
    except RuntimeError as e:
        logger.error(f"An unhandled error occurred: {str(e)}")
        return 1


if __name__ == '__main__':
    sys.exit(main())
