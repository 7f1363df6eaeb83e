"""Numeric loss kernels for SFT, preference-with-SFT, and odds-ratio training.

The kernels operate on precomputed sequence log-probabilities, so they are
decoupled from any model runtime: a batch carries, per example, the policy
and reference log-probabilities of the chosen (winning) and rejected
(losing) responses. Every loss returns the scalar together with analytic
gradients with respect to the policy log-probabilities, and a toy softmax
policy exercises those gradients end to end with plain gradient descent.

Loss definitions, per example, then averaged over the batch:

  sft:      -logp_w
  dpo_sft:  -log sigmoid(beta * ((logp_w - logp_w_ref) - (logp_l - logp_l_ref)))
            + lambda * (-logp_w)
  orpo:     -lambda * log sigmoid(log odds(p_w) - log odds(p_l)) - logp_w,
            odds(p) = p / (1 - p), p = exp(logp)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

LOSS_SFT = "sft"
LOSS_DPO_SFT = "dpo_sft"
LOSS_ORPO = "orpo"
LOSS_KINDS = (LOSS_SFT, LOSS_DPO_SFT, LOSS_ORPO)

# exp(_MAX_LOGP) is the largest probability the odds transform accepts.
_MAX_LOGP = -1e-12


@dataclass(frozen=True)
class LossConfig:
    beta: float = 0.1
    sft_weight: float = 1.0
    loss_kind: str = LOSS_DPO_SFT

    def __post_init__(self) -> None:
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.sft_weight < 0:
            raise ValueError("sft_weight must be >= 0")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")


@dataclass
class PolicyLogProbBatch:
    """Per-example log-probabilities of winning/losing responses.

    All values must be finite and <= 0. Reference fields may be omitted for
    losses that ignore them (sft, orpo).
    """

    logp_w_policy: np.ndarray
    logp_l_policy: np.ndarray | None = None
    logp_w_ref: np.ndarray | None = None
    logp_l_ref: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.logp_w_policy = _as_logp_array(self.logp_w_policy, "logp_w_policy")
        n = self.logp_w_policy.shape[0]
        for name in ("logp_l_policy", "logp_w_ref", "logp_l_ref"):
            value = getattr(self, name)
            if value is not None:
                value = _as_logp_array(value, name)
                if value.shape[0] != n:
                    raise ValueError(f"{name} length differs from logp_w_policy")
                setattr(self, name, value)

    def __len__(self) -> int:
        return int(self.logp_w_policy.shape[0])

    @classmethod
    def from_rows(cls, rows: Sequence[dict[str, Any]]) -> "PolicyLogProbBatch":
        def column(name: str) -> np.ndarray | None:
            if not rows or name not in rows[0]:
                return None
            return np.array([float(r[name]) for r in rows], dtype=np.float64)

        w = column("logp_w_policy")
        if w is None:
            raise ValueError("rows lack logp_w_policy")
        return cls(
            logp_w_policy=w,
            logp_l_policy=column("logp_l_policy"),
            logp_w_ref=column("logp_w_ref"),
            logp_l_ref=column("logp_l_ref"),
        )


def _as_logp_array(values: Any, name: str) -> np.ndarray:
    array = np.asarray(values, dtype=np.float64)
    if array.ndim != 1 or array.shape[0] == 0:
        raise ValueError(f"{name} must be a nonempty 1-D array")
    if not np.all(np.isfinite(array)):
        raise ValueError(f"{name} contains non-finite values")
    if np.any(array > 0):
        raise ValueError(f"{name} contains log-probabilities above 0")
    return array


@dataclass(frozen=True)
class LossResult:
    value: float
    grad_w_policy: np.ndarray
    grad_l_policy: np.ndarray | None = None


def sft_loss(batch: PolicyLogProbBatch) -> LossResult:
    """Mean negative log-likelihood of the winning responses."""
    n = len(batch)
    value = float(np.mean(-batch.logp_w_policy))
    grad = np.full(n, -1.0 / n)
    return LossResult(value, grad)


def dpo_sft_loss(batch: PolicyLogProbBatch, config: LossConfig | None = None) -> LossResult:
    """Preference loss on policy/reference margins plus a weighted SFT term.

    At policy == reference the margin is zero and the preference term is
    exactly log 2 for every beta.
    """
    config = config or LossConfig(loss_kind=LOSS_DPO_SFT)
    if batch.logp_l_policy is None or batch.logp_w_ref is None or batch.logp_l_ref is None:
        raise ValueError("dpo_sft_loss requires losing and reference log-probabilities")
    beta, lam = config.beta, config.sft_weight
    margin = beta * (
        (batch.logp_w_policy - batch.logp_w_ref) - (batch.logp_l_policy - batch.logp_l_ref)
    )
    # -log sigmoid(m) == log(1 + exp(-m)), computed stably.
    pref_term = np.logaddexp(0.0, -margin)
    value = float(np.mean(pref_term + lam * (-batch.logp_w_policy)))
    n = len(batch)
    sig_neg = _sigmoid(-margin)
    grad_w = (-beta * sig_neg - lam) / n
    grad_l = (beta * sig_neg) / n
    return LossResult(value, grad_w, grad_l)


def orpo_loss(batch: PolicyLogProbBatch, config: LossConfig | None = None) -> LossResult:
    """Reference-free odds-ratio preference loss with the SFT anchor term.

    Sequence probabilities are exp of the total sequence log-probability;
    a probability of exactly 1 makes the odds singular and is rejected, the
    caller clamps below 1 - 1e-12.
    """
    config = config or LossConfig(loss_kind=LOSS_ORPO)
    if batch.logp_l_policy is None:
        raise ValueError("orpo_loss requires losing log-probabilities")
    lw, ll = batch.logp_w_policy, batch.logp_l_policy
    if np.any(lw >= 0) or np.any(ll >= 0):
        raise ValueError("orpo requires strictly negative log-probabilities (p < 1)")
    lam = config.sft_weight
    # log odds(p) = logp - log(1 - p), with log1p(-exp(logp)) for stability.
    log_one_minus_w = np.log1p(-np.exp(lw))
    log_one_minus_l = np.log1p(-np.exp(ll))
    margin = (lw - log_one_minus_w) - (ll - log_one_minus_l)
    value = float(np.mean(lam * np.logaddexp(0.0, -margin) - lw))
    n = len(batch)
    sig_neg = _sigmoid(-margin)
    # d log odds / d logp = 1 / (1 - p)
    d_odds_w = 1.0 / (1.0 - np.exp(lw))
    d_odds_l = 1.0 / (1.0 - np.exp(ll))
    grad_w = (-lam * sig_neg * d_odds_w - 1.0) / n
    grad_l = (lam * sig_neg * d_odds_l) / n
    return LossResult(value, grad_w, grad_l)


def compute_loss(
    batch: PolicyLogProbBatch, config: LossConfig
) -> LossResult:
    if config.loss_kind == LOSS_SFT:
        return sft_loss(batch)
    if config.loss_kind == LOSS_DPO_SFT:
        return dpo_sft_loss(batch, config)
    return orpo_loss(batch, config)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def gradient_check(
    loss_kind: str,
    trials: int = 100,
    seed: int = 0,
    batch_size: int = 8,
    step: float = 1e-6,
) -> float:
    """Max relative deviation between analytic and central-difference gradients.

    Used by the CLI self-check; the test suite keeps its own independent
    differencing.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        config = LossConfig(
            beta=float(rng.choice([0.05, 0.1, 0.5])),
            sft_weight=float(rng.choice([0.0, 0.5, 1.0, 2.0])),
            loss_kind=loss_kind,
        )
        batch = _random_batch(rng, batch_size)
        result = compute_loss(batch, config)
        for attr, grad in (("logp_w_policy", result.grad_w_policy), ("logp_l_policy", result.grad_l_policy)):
            if grad is None or (loss_kind == LOSS_SFT and attr == "logp_l_policy"):
                continue
            for i in range(len(batch)):
                numeric = _central_difference(batch, config, attr, i, step)
                denom = max(abs(grad[i]), abs(numeric), 1e-8)
                worst = max(worst, abs(grad[i] - numeric) / denom)
    return worst


def _central_difference(
    batch: PolicyLogProbBatch, config: LossConfig, attr: str, index: int, step: float
) -> float:
    def value_at(delta: float) -> float:
        arrays = {
            name: None if getattr(batch, name) is None else getattr(batch, name).copy()
            for name in ("logp_w_policy", "logp_l_policy", "logp_w_ref", "logp_l_ref")
        }
        arrays[attr][index] += delta
        shifted = PolicyLogProbBatch(**arrays)
        return compute_loss(shifted, config).value

    return (value_at(step) - value_at(-step)) / (2 * step)


def _random_batch(rng: np.random.Generator, size: int) -> PolicyLogProbBatch:
    def draw() -> np.ndarray:
        return -rng.uniform(0.05, 6.0, size)

    return PolicyLogProbBatch(
        logp_w_policy=draw(),
        logp_l_policy=draw(),
        logp_w_ref=draw(),
        logp_l_ref=draw(),
    )


# ---------------------------------------------------------------------------
# Toy policy


@dataclass(frozen=True)
class ToyPair:
    """A preference pair of step sequences; each step is (context, token)."""

    winner: tuple[tuple[int, int], ...]
    loser: tuple[tuple[int, int], ...]


@dataclass
class TraceStep:
    step: int
    loss: float
    margin: float
    mean_logp_w: float


@dataclass
class TrainingTrace:
    steps: list[TraceStep] = field(default_factory=list)
    diverged: bool = False

    def margins(self) -> list[float]:
        return [s.margin for s in self.steps]

    def losses(self) -> list[float]:
        return [s.loss for s in self.steps]


class ToySoftmaxPolicy:
    """Tabular softmax policy over (context, token) scores.

    A sequence's log-probability is the sum of per-step log-softmax terms.
    This is a desk-scale stand-in for an LLM policy, enough to drive the loss
    kernels through full training steps.
    """

    def __init__(self, num_contexts: int, vocab_size: int, seed: int = 0, scale: float = 0.1):
        if num_contexts < 1 or vocab_size < 2:
            raise ValueError("need at least one context and two tokens")
        rng = np.random.default_rng(seed)
        self.num_contexts = num_contexts
        self.vocab_size = vocab_size
        self.params = rng.normal(0.0, scale, (num_contexts, vocab_size))

    def copy(self) -> "ToySoftmaxPolicy":
        clone = ToySoftmaxPolicy(self.num_contexts, self.vocab_size)
        clone.params = self.params.copy()
        return clone

    def _log_softmax(self) -> np.ndarray:
        shifted = self.params - self.params.max(axis=1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def log_prob(self, sequence: Sequence[tuple[int, int]]) -> float:
        table = self._log_softmax()
        total = 0.0
        for context, token in sequence:
            self._check_step(context, token)
            total += table[context, token]
        return float(total)

    def log_prob_grad(self, sequence: Sequence[tuple[int, int]]) -> tuple[float, np.ndarray]:
        """Log-probability and its gradient with respect to the score table."""
        table = self._log_softmax()
        probs = np.exp(table)
        grad = np.zeros_like(self.params)
        total = 0.0
        for context, token in sequence:
            self._check_step(context, token)
            total += table[context, token]
            grad[context] -= probs[context]
            grad[context, token] += 1.0
        return float(total), grad

    def _check_step(self, context: int, token: int) -> None:
        if not (0 <= context < self.num_contexts and 0 <= token < self.vocab_size):
            raise ValueError(f"step ({context}, {token}) outside policy tables")


def train_toy(
    policy: ToySoftmaxPolicy,
    pairs: Sequence[ToyPair],
    config: LossConfig,
    steps: int,
    learning_rate: float,
) -> TrainingTrace:
    """Plain gradient descent of the configured loss on toy preference pairs.

    The reference policy is the frozen starting point. The trace records the
    pre-update loss and preference margin (mean logp_w - logp_l) per step; a
    non-finite loss aborts the run with the trace marked diverged.
    """
    if not pairs:
        raise ValueError("no training pairs")
    reference = policy.copy()
    ref_w = np.array([reference.log_prob(p.winner) for p in pairs])
    ref_l = np.array([reference.log_prob(p.loser) for p in pairs])
    trace = TrainingTrace()
    for step in range(steps):
        winners = [policy.log_prob_grad(p.winner) for p in pairs]
        losers = [policy.log_prob_grad(p.loser) for p in pairs]
        lw = _clamp_logp(np.array([w[0] for w in winners]))
        ll = _clamp_logp(np.array([l[0] for l in losers]))
        if not (np.isfinite(lw).all() and np.isfinite(ll).all()):
            trace.steps.append(
                TraceStep(step, float("inf"), float("nan"), float("nan"))
            )
            trace.diverged = True
            break
        batch = PolicyLogProbBatch(
            logp_w_policy=lw, logp_l_policy=ll, logp_w_ref=ref_w, logp_l_ref=ref_l
        )
        result = compute_loss(batch, config)
        margin = float(np.mean(lw - ll))
        trace.steps.append(TraceStep(step, result.value, margin, float(np.mean(lw))))
        if not np.isfinite(result.value):
            trace.diverged = True
            break
        update = np.zeros_like(policy.params)
        for i in range(len(pairs)):
            update += result.grad_w_policy[i] * winners[i][1]
            if result.grad_l_policy is not None:
                update += result.grad_l_policy[i] * losers[i][1]
        policy.params = policy.params - learning_rate * update
    return trace


def _clamp_logp(values: np.ndarray) -> np.ndarray:
    return np.minimum(values, _MAX_LOGP)
