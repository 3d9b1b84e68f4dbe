"""
Intent twice: first-pass intent reranking, polarity-specific diffusion with an
intent-conditioned denoiser, cross-attention fusion, a sampled reference-intent
policy with importance-weighted reward, and the tied-weight intent correction.
"""
import json
import logging
import os
from functools import lru_cache
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from model.layers import Linear, Module, Parameter, masked_mean, normal, prepend_row, xavier
from model.tensor import (
    Tensor,
    as_tensor,
    clip,
    cross_entropy,
    concat,
    embedding,
    gelu,
    getitem,
    no_grad,
    scaled_dot_attention,
    softmax,
    sqrt,
    tanh,
)
from utils.errors import NumericError
from utils.labels import (
    EMOTIONS,
    N_INTENTS,
    EmotionLabel,
    IntentLabel,
    Polarity,
)

logger = logging.getLogger(__name__)

DEFAULT_TABLE_PATH = os.path.join(os.path.dirname(os.path.dirname(__file__)), "utils", "resources", "intent_table.json")
N_REFER = 3


# ---------------------------------------------------------------------
# Reference-intent table
# ---------------------------------------------------------------------
class IntentRow(BaseModel):
    emotions: List[EmotionLabel]
    intents: List[IntentLabel]

    @field_validator("intents")
    @classmethod
    def _three(cls, value):
        if len(value) != N_REFER:
            raise ValueError(f"every row lists exactly {N_REFER} intents, got {len(value)}")
        return value


class IntentTable(BaseModel):
    """Emotion group → top-3 reference intents; `resolve` pins emotions listed in several rows."""

    version: int
    rows: List[IntentRow]
    resolve: Dict[EmotionLabel, int] = {}
    fallback: Dict[Polarity, int]

    def row_of(self, emotion: EmotionLabel) -> int:
        emotion = EmotionLabel(emotion)
        if emotion in self.resolve:
            return self.resolve[emotion]
        for i, row in enumerate(self.rows):
            if emotion in row.emotions:
                return i
        return self.fallback[emotion.polarity]

    def lookup(self, emotion: EmotionLabel) -> Tuple[IntentLabel, IntentLabel, IntentLabel]:
        return tuple(self.rows[self.row_of(emotion)].intents)

    def listed_emotions(self) -> List[EmotionLabel]:
        seen = []
        for row in self.rows:
            seen.extend(e for e in row.emotions if e not in seen)
        return seen

    def refer_ids(self, emotion_ids: Sequence[int]) -> np.ndarray:
        """[B, 3] intent indices for a batch of emotion indices."""
        return np.asarray(
            [[i.index for i in self.lookup(EMOTIONS[int(e)])] for e in emotion_ids], dtype=np.int64
        ).reshape(-1, N_REFER)


@lru_cache(maxsize=4)
def load_intent_table(path: Optional[str] = None) -> IntentTable:
    with open(path or DEFAULT_TABLE_PATH, "r", encoding="utf-8") as f:
        return IntentTable.model_validate(json.load(f))


def lookup_refer_intents(emotion: EmotionLabel) -> Tuple[IntentLabel, IntentLabel, IntentLabel]:
    return load_intent_table().lookup(emotion)


# ---------------------------------------------------------------------
# First pass
# ---------------------------------------------------------------------
class IntentDistribution(NamedTuple):
    logits: Tensor        # classifier logits [B, 9]
    p_intent: Tensor
    p_semantic: Tensor
    intent_first: Tensor  # p_semantic + alpha * p_intent
    alpha: float

    @property
    def first_pass(self) -> np.ndarray:
        return np.argmax(self.intent_first.data, axis=-1)


def cosine_rows(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Cosine similarity between every row of a [..., d] and every row of b [K, d]."""
    a_n = a / sqrt((a * a).sum(axis=-1, keepdims=True) + eps)
    b_n = b / sqrt((b * b).sum(axis=-1, keepdims=True) + eps)
    return a_n @ b_n.T


def intent_first(Q: Tensor, head: Linear, intent_embeddings: Tensor, alpha: float = 1.0) -> IntentDistribution:
    logits = head(Q)
    p_intent = softmax(logits, axis=-1)
    p_semantic = softmax(cosine_rows(as_tensor(Q), intent_embeddings), axis=-1)
    return IntentDistribution(logits, p_intent, p_semantic, p_semantic + p_intent * alpha, alpha)


# ---------------------------------------------------------------------
# Diffusion
# ---------------------------------------------------------------------
class NoiseSchedule:
    """β_t for t = 1..T; ᾱ_t = ∏_{s≤t}(1 − β_s) with ᾱ_0 = 1."""

    def __init__(self, betas: Sequence[float], variance_form: str = "product"):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise NumericError("noise schedule needs a non-empty 1-D beta list")
        if np.any(betas < 0) or np.any(betas >= 1):
            raise NumericError("betas must lie in [0, 1)")
        if np.any(np.diff(betas) < 0):
            raise NumericError("betas must be nondecreasing")
        if variance_form not in ("product", "sum"):
            raise NumericError(f"variance_form must be 'product' or 'sum', got {variance_form!r}")
        self.betas = betas
        self.variance_form = variance_form
        self.alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        self.beta_sums = np.concatenate([[0.0], np.cumsum(betas)])

    @classmethod
    def linear(cls, T: int, beta_start: float = 1e-5, beta_end: float = 5e-2, variance_form: str = "product") -> "NoiseSchedule":
        if T < 1:
            raise NumericError(f"T must be >= 1, got {T}")
        if not 1e-5 <= beta_start <= beta_end <= 5e-2:
            raise NumericError(f"betas must satisfy 1e-5 <= beta_start <= beta_end <= 5e-2, got {beta_start}, {beta_end}")
        return cls(np.linspace(beta_start, beta_end, T), variance_form)

    @property
    def T(self) -> int:
        return self.betas.size

    def check_t(self, t, low: int = 1) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        if np.any(t < low) or np.any(t > self.T):
            raise NumericError(f"diffusion step outside [{low}, {self.T}]: {t}")
        return t

    def beta(self, t) -> np.ndarray:
        return self.betas[self.check_t(t) - 1]

    def alpha_bar(self, t) -> np.ndarray:
        return self.alpha_bars[self.check_t(t, low=0)]

    def noise_scale(self, t) -> np.ndarray:
        """Denominator of the reverse step: √(1 − ᾱ_t), or √(1 − Σβ_s) in the sum form."""
        t = self.check_t(t)
        remaining = 1.0 - (self.alpha_bars[t] if self.variance_form == "product" else self.beta_sums[t])
        if np.any(remaining <= 0):
            raise NumericError(f"variance_form={self.variance_form!r} leaves no noise budget at step {t}")
        return np.sqrt(remaining)


class DiffusionState(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    q_t: np.ndarray
    t: int
    polarity: Optional[Polarity] = None


def forward_diffuse(
    q0: np.ndarray,
    t: int,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    polarity: Optional[Polarity] = None,
) -> Tuple[DiffusionState, np.ndarray]:
    """Iterative corruption q_s = √(1−β_s) q_{s−1} + √β_s ε_s for s = 1..t; returns the state and every ε_s."""
    schedule.check_t(t)
    q = np.array(q0, dtype=np.float64)
    noises = rng.standard_normal((int(t),) + q.shape)
    for s in range(1, int(t) + 1):
        beta = schedule.betas[s - 1]
        q = np.sqrt(1.0 - beta) * q + np.sqrt(beta) * noises[s - 1]
    return DiffusionState(q_t=q, t=int(t), polarity=polarity), noises


def q_sample(q0: Tensor, t, schedule: NoiseSchedule, noise: np.ndarray) -> Tensor:
    """Closed-form jump q_t = √ᾱ_t q_0 + √(1−ᾱ_t) ε; `t` is a scalar or one step per row."""
    q0 = as_tensor(q0)
    t = schedule.check_t(t)
    alpha_bar = schedule.alpha_bars[t]
    if alpha_bar.ndim:
        alpha_bar = alpha_bar.reshape(-1, *([1] * (q0.ndim - 1)))
    return q0 * np.sqrt(alpha_bar) + np.sqrt(1.0 - alpha_bar) * np.asarray(noise)


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features [sin(t f_k), cos(t f_k)] with f_k = 10000^(−2k/dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    angles = t * freqs[None, :]
    out = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    if dim % 2:
        out = np.concatenate([out, np.zeros((out.shape[0], 1))], axis=1)
    return out


class DenoiserCVAE(Module):
    """Noise predictor M_θ(q_t, t, intent_first): an MLP over [q_t; time features; intent scores]."""

    def __init__(self, d_model: int, rng: np.random.Generator, hidden: int = 128, time_dim: int = 16, n_intents: int = N_INTENTS):
        self.time_dim = time_dim
        self.inner = Linear(d_model + time_dim + n_intents, hidden, rng)
        self.middle = Linear(hidden, hidden, rng)
        self.outer = Linear(hidden, d_model, rng)

    def forward(self, q_t: Tensor, t, intent_scores: Tensor) -> Tensor:
        q_t = as_tensor(q_t)
        B = q_t.shape[0]
        t = np.broadcast_to(np.asarray(t), (B,))
        features = concat([q_t, Tensor(timestep_embedding(t, self.time_dim), dtype=q_t.data.dtype), as_tensor(intent_scores)], axis=-1)
        return self.outer(gelu(self.middle(gelu(self.inner(features)))))


def denoise_step(
    q_t: Tensor,
    t: int,
    intent_scores: Tensor,
    denoiser: Callable[[Tensor, np.ndarray, Tensor], Tensor],
    schedule: NoiseSchedule,
) -> Tensor:
    """q̃_{t−1} = (q_t − β_t ε̂ / scale_t) / √(1 − β_t)."""
    if int(t) == 0:
        raise NumericError("denoise_step is undefined at t = 0")
    beta = float(schedule.beta(t))
    q_t = as_tensor(q_t)
    if beta == 0.0:
        return q_t
    scale = float(schedule.noise_scale(t))
    eps_hat = denoiser(q_t, np.full(q_t.shape[0], int(t)), intent_scores)
    return (q_t - eps_hat * (beta / scale)) * (1.0 / np.sqrt(1.0 - beta))


def denoiser_loss(
    denoiser: DenoiserCVAE,
    q0: Tensor,
    intent_scores: Tensor,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> Tensor:
    """Mean over rows of ‖ε − M_θ(q_t, t, intent_first)‖² with t ~ U{1..T}."""
    q0 = as_tensor(q0)
    B = q0.shape[0]
    t = rng.integers(1, schedule.T + 1, size=B)
    noise = rng.standard_normal(q0.shape)
    eps_hat = denoiser(q_sample(q0, t, schedule, noise), t, intent_scores)
    diff = eps_hat - noise
    return (diff * diff).sum(axis=-1).mean()


def train_denoisers(
    pos: DenoiserCVAE,
    neg: DenoiserCVAE,
    q0: Tensor,
    is_pos: np.ndarray,
    intent_scores: Tensor,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> Tuple[Tensor, Tensor]:
    """(L_kl_pos, L_kl_neg); each term sees only its polarity's rows and is 0 without any."""
    is_pos = np.asarray(is_pos, dtype=bool)
    losses = []
    for denoiser, rows in ((pos, np.nonzero(is_pos)[0]), (neg, np.nonzero(~is_pos)[0])):
        if rows.size == 0:
            losses.append(Tensor(0.0))
            continue
        losses.append(denoiser_loss(denoiser, as_tensor(q0)[rows], as_tensor(intent_scores)[rows], schedule, rng))
    return losses[0], losses[1]


def mimic(
    q0: Tensor,
    intent_scores: Tensor,
    denoiser: DenoiserCVAE,
    schedule: NoiseSchedule,
    steps: int,
    rng: np.random.Generator,
) -> Tensor:
    """Jump q0 to step `steps` in closed form, then walk the reverse chain back to step 0."""
    q0 = as_tensor(q0)
    steps = min(int(steps), schedule.T)
    if steps <= 0:
        return q0
    q = q_sample(q0, steps, schedule, rng.standard_normal(q0.shape))
    for s in range(steps, 0, -1):
        q = denoise_step(q, s, intent_scores, denoiser, schedule)
    return q


class EmotionMimicry(Module):
    def __init__(self, d_model: int, rng: np.random.Generator, hidden: int = 128, time_dim: int = 16):
        self.pos = DenoiserCVAE(d_model, rng, hidden, time_dim)
        self.neg = DenoiserCVAE(d_model, rng, hidden, time_dim)
        self.W_q = Linear(d_model, d_model, rng, bias=False)
        self.W_k = Linear(d_model, d_model, rng, bias=False)
        self.W_v = Linear(d_model, d_model, rng, bias=False)

    def states(self, Q: Tensor, intent_scores: Tensor, schedule: NoiseSchedule, steps: int, rng: np.random.Generator) -> Tuple[Tensor, Tensor]:
        """(Emo_pos, Emo_neg): Q mimicked through each polarity's reverse chain from the same corruption."""
        seed = int(rng.integers(2**32))
        emo_pos = mimic(Q, intent_scores, self.pos, schedule, steps, np.random.Generator(np.random.Philox(seed)))
        emo_neg = mimic(Q, intent_scores, self.neg, schedule, steps, np.random.Generator(np.random.Philox(seed)))
        return emo_pos, emo_neg

    def emu_fuse(self, emo_pos: Tensor, emo_neg: Tensor, H: Tensor, H_mask: Optional[np.ndarray] = None) -> Tensor:
        """Mean-pooled cross-attention with queries [Emo_pos; H] and keys/values [Emo_neg; H]."""
        emo_pos, emo_neg, H = as_tensor(emo_pos), as_tensor(emo_neg), as_tensor(H)
        single = H.ndim == 2
        if single:
            emo_pos, emo_neg, H = emo_pos.reshape(1, -1), emo_neg.reshape(1, -1), H.reshape(1, *H.shape)
        B, L, _ = H.shape
        H_mask = np.ones((B, L), dtype=bool) if H_mask is None else np.asarray(H_mask, dtype=bool).reshape(B, L)
        mask = np.concatenate([np.ones((B, 1), dtype=bool), H_mask], axis=1)
        queries = prepend_row(emo_pos, H)
        keys = prepend_row(emo_neg, H)
        attended, _ = scaled_dot_attention(self.W_q(queries), self.W_k(keys), self.W_v(keys), mask[:, None, :])
        fused = masked_mean(attended, mask)
        return fused[0] if single else fused


# ---------------------------------------------------------------------
# Policy over reference intents
# ---------------------------------------------------------------------
def _policy_logits(x: Tensor, W1: Tensor, b1: Tensor, W2: Tensor, b2: Tensor) -> Tensor:
    return tanh(x @ W1 + b1) @ W2 + b2


class PolicyNet(Module):
    """Two linear layers over Emo_fused → p_act over the 3 reference intents, plus a frozen behavior copy μ."""

    def __init__(self, d_model: int, rng: np.random.Generator, hidden: Optional[int] = None, n_actions: int = N_REFER):
        hidden = hidden or d_model
        self.W1 = Parameter(xavier(rng, d_model, hidden))
        self.b1 = Parameter(np.zeros(hidden))
        self.W2 = Parameter(xavier(rng, hidden, n_actions))
        self.b2 = Parameter(np.zeros(n_actions))
        self.behavior: Dict[str, np.ndarray] = {}
        self.snapshot()

    def forward(self, x: Tensor) -> Tensor:
        return softmax(_policy_logits(as_tensor(x), self.W1, self.b1, self.W2, self.b2), axis=-1)

    def snapshot(self) -> None:
        self.behavior = {name: p.data.copy() for name, p in self.named_parameters()}

    def behavior_probs(self, x) -> np.ndarray:
        with no_grad():
            b = {k: Tensor(v, dtype=v.dtype) for k, v in self.behavior.items()}
            return softmax(_policy_logits(as_tensor(x), b["W1"], b["b1"], b["W2"], b["b2"]), axis=-1).data


def policy_probs(emo_fused: Tensor, policy: PolicyNet) -> Tensor:
    return policy(emo_fused)


def sample_action(
    pi_probs: np.ndarray,
    mu_probs: np.ndarray,
    rng: np.random.Generator,
    ratio_clip: Tuple[float, float] = (0.1, 10.0),
) -> Tuple[np.ndarray, np.ndarray]:
    """Sample a ~ μ per row; returns (actions, clip(π(a)/μ(a)))."""
    pi_probs = np.atleast_2d(np.asarray(pi_probs, dtype=np.float64))
    mu_probs = np.atleast_2d(np.asarray(mu_probs, dtype=np.float64))
    u = rng.random(mu_probs.shape[0])
    cdf = np.cumsum(mu_probs, axis=1)
    actions = np.minimum((u[:, None] >= cdf).sum(axis=1), mu_probs.shape[1] - 1)
    rows = np.arange(mu_probs.shape[0])
    ratios = np.clip(pi_probs[rows, actions] / mu_probs[rows, actions], *ratio_clip)
    return actions, ratios


_OPEN_LOW = np.finfo(np.float64).tiny
_OPEN_HIGH = np.nextafter(1.0, 0.0)


def reward(is_pos, emo_pos: np.ndarray, emo_neg: np.ndarray, action_embedding: np.ndarray) -> np.ndarray:
    """R = sigmoid(Emo_pos · e_a) for positive emotions, sigmoid(Emo_neg · e_a) otherwise; kept inside (0, 1)."""
    e = np.asarray(action_embedding, dtype=np.float64)
    dots = np.where(
        np.asarray(is_pos, dtype=bool),
        np.sum(np.asarray(emo_pos) * e, axis=-1),
        np.sum(np.asarray(emo_neg) * e, axis=-1),
    )
    return np.clip(0.5 * (1.0 + np.tanh(0.5 * dots)), _OPEN_LOW, _OPEN_HIGH)


def policy_update(
    pi_probs: Tensor,
    actions: np.ndarray,
    mu_probs: np.ndarray,
    rewards: np.ndarray,
    ratio_clip: Tuple[float, float] = (0.1, 10.0),
) -> Tensor:
    """
    −mean(clip(π(a)/μ(a)) · (R − b)) with b the batch-mean reward. Its gradient is
    ratio · (R − b) · ∇log π(a); rewards, baseline and μ are constants.
    """
    actions = np.asarray(actions, dtype=np.int64)
    if actions.size == 0:
        raise ValueError("policy_update needs a non-empty trajectory")
    rewards = np.asarray(rewards, dtype=np.float64)
    rows = np.arange(actions.size)
    mu = np.asarray(mu_probs)[rows, actions]
    ratio = clip(getitem(pi_probs, (rows, actions)) / mu, *ratio_clip)
    advantage = rewards - rewards.mean()
    return -(ratio * advantage).mean()


# ---------------------------------------------------------------------
# Correction
# ---------------------------------------------------------------------
def correct_intent(
    Q: Tensor,
    action_embedding: Tensor,
    intent_scores: Tensor,
    head: Linear,
    intent_embeddings: Tensor,
    gold: Optional[np.ndarray] = None,
) -> Tuple[Tensor, Optional[Tensor]]:
    """
    Logits of Intent_twice from the shared intent head applied to Q shifted by the
    sampled reference-intent embedding and the intent_first-weighted intent embeddings.
    Returns (logits, cross-entropy vs gold or None).
    """
    blend = as_tensor(Q) + as_tensor(action_embedding) + as_tensor(intent_scores) @ intent_embeddings
    logits = head(blend)
    if gold is None:
        return logits, None
    return logits, cross_entropy(logits, gold)


def twice_loss(l_kl_pos, l_kl_neg, l_intent):
    return l_kl_pos + l_kl_neg + l_intent


class TwiceOutput(NamedTuple):
    distribution: IntentDistribution
    emo_pos: Tensor
    emo_neg: Tensor
    emo_fused: Tensor
    twice_logits: Optional[Tensor]
    actions: Optional[np.ndarray]
    l_kl_pos: Tensor
    l_kl_neg: Tensor
    l_intent: Tensor
    l_pg: Tensor

    @property
    def intent_twice(self) -> np.ndarray:
        if self.twice_logits is None:
            return self.distribution.first_pass
        return np.argmax(self.twice_logits.data, axis=-1)


class IntentTwice(Module):
    def __init__(
        self,
        d_model: int,
        rng: np.random.Generator,
        schedule: NoiseSchedule,
        alpha: float = 1.0,
        emu_steps: int = 5,
        hidden: int = 128,
        time_dim: int = 16,
        ratio_clip: Tuple[float, float] = (0.1, 10.0),
        table: Optional[IntentTable] = None,
    ):
        self.head = Linear(d_model, N_INTENTS, rng)
        self.E_int = Parameter(normal(rng, (N_INTENTS, d_model), d_model**-0.5))
        self.emu = EmotionMimicry(d_model, rng, hidden, time_dim)
        self.policy = PolicyNet(d_model, rng)
        self.schedule = schedule
        self.alpha = alpha
        self.emu_steps = emu_steps
        self.ratio_clip = tuple(ratio_clip)
        self.table = table or load_intent_table()

    def forward(
        self,
        Q: Tensor,
        H: Tensor,
        H_mask: np.ndarray,
        emotion_ids: np.ndarray,
        rng: np.random.Generator,
        gold_intent: Optional[np.ndarray] = None,
        use_emu: bool = True,
        use_twice: bool = True,
    ) -> TwiceOutput:
        """
        `emotion_ids` pick the reference intents and the reward polarity (gold labels
        in training, predictions at inference). With `gold_intent` the policy samples
        from μ and every loss term is built; without it actions are the policy argmax.
        """
        training = gold_intent is not None
        dist = intent_first(Q, self.head, self.E_int, self.alpha)
        is_pos = np.asarray([EMOTIONS[int(e)].polarity == Polarity.POS for e in emotion_ids])
        zero = Tensor(0.0)

        if use_emu:
            emo_pos, emo_neg = self.emu.states(Q, dist.intent_first, self.schedule, self.emu_steps, rng)
            if training:
                l_pos, l_neg = train_denoisers(self.emu.pos, self.emu.neg, Q.detach(), is_pos, dist.intent_first, self.schedule, rng)
            else:
                l_pos, l_neg = zero, zero
        else:
            emo_pos = emo_neg = Q
            l_pos, l_neg = zero, zero
        emo_fused = self.emu.emu_fuse(emo_pos, emo_neg, H, H_mask)

        l_first = cross_entropy_or_zero(dist.logits, gold_intent)
        if not use_twice:
            return TwiceOutput(dist, emo_pos, emo_neg, emo_fused, None, None, l_pos, l_neg, l_first, zero)

        refer = self.table.refer_ids(emotion_ids)
        pi = self.policy(emo_fused)
        rows = np.arange(refer.shape[0])
        if training:
            mu = self.policy.behavior_probs(emo_fused.data)
            actions, _ = sample_action(pi.data, mu, rng, self.ratio_clip)
            chosen = refer[rows, actions]
            R = reward(is_pos, emo_pos.data, emo_neg.data, self.E_int.data[chosen])
            l_pg = policy_update(pi, actions, mu, R, self.ratio_clip)
        else:
            actions = np.argmax(pi.data, axis=-1)
            chosen = refer[rows, actions]
            l_pg = zero
        twice_logits, l_correct = correct_intent(
            Q, embedding(self.E_int, chosen), dist.intent_first, self.head, self.E_int, gold_intent
        )
        l_intent = l_first + l_correct if training else zero
        return TwiceOutput(dist, emo_pos, emo_neg, emo_fused, twice_logits, actions, l_pos, l_neg, l_intent, l_pg)


def cross_entropy_or_zero(logits: Tensor, gold: Optional[np.ndarray]) -> Tensor:
    return Tensor(0.0) if gold is None else cross_entropy(logits, gold)
