"""
Joint training: weighted multi-task loss, Noam learning-rate schedule, periodic
validation with early stopping, policy snapshot refresh and the CSV training log.
"""
import csv
import logging
import math
import os
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel
from tqdm import tqdm

from model.reflect import ModelState
from model.tensor import Tensor, make_rng, no_grad
from utils.config import RunConfig
from utils.corpus import Dialogue, collate, iter_batches
from utils.errors import NumericError, TrainingDivergedError

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "lr", "L_em", "L_twice", "L_res", "L", "val_L", "L_era", "L_pg"]


class LogRow(BaseModel):
    step: int
    lr: float
    L_em: float
    L_twice: float
    L_res: float
    L: float
    val_L: Optional[float] = None
    L_era: float
    L_pg: float


class TrainingLog(BaseModel):
    rows: List[LogRow] = []
    best_val: Optional[float] = None
    best_step: Optional[int] = None
    stopped_early: bool = False

    def write_csv(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(LOG_COLUMNS)
            for row in self.rows:
                values = row.model_dump()
                writer.writerow(["" if values[c] is None else repr(values[c]) for c in LOG_COLUMNS])


def joint_loss(L_em, L_twice, L_res, config: RunConfig):
    """L = δ·L_em + ζ·L_twice + η·L_res; a non-finite component is an error naming it."""
    for name, value in (("L_em", L_em), ("L_twice", L_twice), ("L_res", L_res)):
        scalar = value.item() if isinstance(value, Tensor) else float(value)
        if not math.isfinite(scalar):
            raise NumericError(f"loss component {name} is not finite ({scalar})")
    t = config.train
    return L_em * t.delta + L_twice * t.zeta + L_res * t.eta


def noam_lr(step: int, d_model: int, warmup: int) -> float:
    if step < 1:
        raise NumericError(f"Noam schedule is defined from step 1, got {step}")
    return d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)


def scheduled_lr(step: int, d_model: int, warmup: int, lr_decay: float) -> float:
    """Noam, floored after warmup at `lr_decay` times the peak rate."""
    lr = noam_lr(step, d_model, warmup)
    if step > warmup:
        lr = max(lr, lr_decay * noam_lr(warmup, d_model, warmup))
    return lr


def _snapshot(state: ModelState) -> Dict:
    return {
        "params": state.model.state_dict(),
        "adam": state.optimizer.state_dict(),
        "adam_step": state.optimizer.step_count,
        "behavior": {k: v.copy() for k, v in state.model.twice.policy.behavior.items()},
        "step": state.step,
    }


def _restore(state: ModelState, snap: Dict) -> None:
    state.model.load_state_dict(snap["params"])
    state.optimizer.load_state_dict(snap["adam"], snap["adam_step"])
    state.model.twice.policy.behavior = {k: v.copy() for k, v in snap["behavior"].items()}
    state.step = snap["step"]


def validation_loss(state: ModelState, dialogues: Sequence[Dialogue]) -> float:
    """Mean joint loss over `dialogues` with a fixed sampling stream."""
    config = state.config
    rng = make_rng(config.train.seed + 1)
    total, count = 0.0, 0
    was_training = state.model.training
    state.model.eval()
    try:
        with no_grad():
            for chunk in iter_batches(dialogues, config.train.batch_size):
                batch = collate(chunk, state.vocab, config.data.max_context_len, config.model.max_response_len)
                parts = state.model.losses(batch, rng)
                L = joint_loss(parts.L_em, parts.L_twice, parts.L_res, config)
                total += L.item() * batch.size
                count += batch.size
    finally:
        state.model.train(was_training)
    return total / max(count, 1)


def fit(
    state: ModelState,
    train: Sequence[Dialogue],
    val: Optional[Sequence[Dialogue]] = None,
    log_path: Optional[str] = None,
    progress: bool = True,
) -> TrainingLog:
    config = state.config
    t = config.train
    log = TrainingLog()
    if t.max_iters == 0:
        logger.info("max_iters is 0; returning the initialized model")
        return log
    if not train:
        raise NumericError("cannot train on an empty corpus")

    rng = make_rng(t.seed)
    model = state.model
    model.train()
    order: List[int] = []
    best: Optional[Dict] = None
    bad_evals = 0

    bar = tqdm(range(t.max_iters), desc="Training", disable=not progress)
    for _ in bar:
        if not order:
            order = [int(i) for i in rng.permutation(len(train))]
        chunk = [train[i] for i in order[: t.batch_size]]
        order = order[t.batch_size :]

        last_good = _snapshot(state)
        step = state.step + 1
        lr = scheduled_lr(step, config.model.d_model, t.warmup_steps, t.lr_decay)
        batch = collate(chunk, state.vocab, config.data.max_context_len, config.model.max_response_len)
        try:
            parts = model.losses(batch, rng)
            L = joint_loss(parts.L_em, parts.L_twice, parts.L_res, config)
            objective = L + parts.L_era * t.era_weight + parts.L_pg
            if not math.isfinite(objective.item()):
                raise NumericError(f"training objective is not finite ({objective.item()})")
            state.optimizer.zero_grad()
            objective.backward()
            state.optimizer.step(lr)
            if not all(np.all(np.isfinite(p.data)) for p in model.parameters()):
                raise NumericError("parameters became non-finite")
        except NumericError as e:
            _restore(state, last_good)
            logger.error(f"Training diverged at step {step}: {e}")
            raise TrainingDivergedError(f"training diverged at step {step}: {e}", last_good_state=state, step=step) from e

        state.step = step
        if step % t.snapshot_every == 0:
            model.twice.policy.snapshot()

        row = LogRow(
            step=step,
            lr=lr,
            L_em=parts.L_em.item(),
            L_twice=parts.L_twice.item(),
            L_res=parts.L_res.item(),
            L=L.item(),
            L_era=parts.L_era.item(),
            L_pg=parts.L_pg.item(),
        )
        logger.debug(f"step {step}: {row}")

        if val and (step % t.eval_every == 0 or step == t.max_iters):
            row.val_L = validation_loss(state, val)
            logger.info(f"step {step}: L={row.L:.4f} val_L={row.val_L:.4f}")
            if log.best_val is None or row.val_L < log.best_val:
                log.best_val, log.best_step = row.val_L, step
                best = _snapshot(state)
                bad_evals = 0
            else:
                bad_evals += 1
        log.rows.append(row)
        bar.set_postfix(L=f"{row.L:.3f}")
        if bad_evals >= t.patience:
            logger.info(f"Early stopping at step {step}; best val_L {log.best_val:.4f} at step {log.best_step}")
            log.stopped_early = True
            break
    bar.close()

    if best is not None and best["step"] != state.step:
        logger.info(f"Restoring parameters from step {best['step']}")
        _restore(state, best)
    state.trained = True
    model.era.trained = not config.ablated("era")
    if log_path:
        log.write_csv(log_path)
        logger.info(f"Wrote training log with {len(log.rows)} rows to {log_path}")
    return log
