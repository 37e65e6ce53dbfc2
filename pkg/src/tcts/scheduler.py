"""Task-selection policy: features, action distribution, sampling and REINFORCE.

The policy is a one-hidden-layer MLP mapping a per-example feature vector
to a softmax over the task set.  Sampled (feature, action) pairs are kept in
a buffer until the end of the episode, when a single policy-gradient step
``w <- w + lr * reward * sum grad log P(action | feature)`` consumes them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import _Module
from .tasks import HORIZON, LATENCY, TaskSet, TaskSpec

LATENCY_FEATURES = (
    "src_len_ratio", "tgt_len_ratio", "train_loss", "mean_train_loss",
    "valid_loss", "mean_valid_loss", "progress",
)
# feature groups that can be switched off for ablation runs
ABLATION_GROUPS = {
    "i": ("src_len_ratio", "tgt_len_ratio"),
    "ii": ("train_loss", "mean_train_loss"),
    "iii": ("valid_loss", "mean_valid_loss"),
    "iv": ("progress",),
}
WINDOW_SUMMARY = ("open", "close", "high", "low", "volume", "ret_mean", "ret_std")
DEFAULT_HIDDEN = {LATENCY: 256, HORIZON: 32}
DEFAULT_ACTIVATION = {LATENCY: "tanh", HORIZON: "relu"}


def feature_names(family: str, task_set: TaskSet | None = None, mask: Sequence[str] = ()) -> list[str]:
    """Names of the policy input features, in order, after removing masked groups."""
    if family == LATENCY:
        dropped = set()
        for group in mask:
            if group not in ABLATION_GROUPS:
                raise ValueError(f"unknown ablation group {group!r}; expected one of {sorted(ABLATION_GROUPS)}")
            dropped.update(ABLATION_GROUPS[group])
        return [f for f in LATENCY_FEATURES if f not in dropped]
    if family == HORIZON:
        if mask:
            raise ValueError("feature ablation groups are defined for the latency family only")
        if task_set is None:
            raise ValueError("horizon features depend on the task set")
        return [*WINDOW_SUMMARY, "prev_train_loss",
                *(f"forecast_{k}" for k in task_set.indices),
                *(f"label_{k}" for k in task_set.indices)]
    raise ValueError(f"unknown task family {family!r}")


@dataclass
class History:
    """Running loss statistics; all zero before anything is recorded."""

    train_sum: float = 0.0
    train_count: int = 0
    valid: list[float] = field(default_factory=list)
    last_train: float = 0.0

    def record_train(self, loss: float) -> None:
        self.train_sum += loss
        self.train_count += 1
        self.last_train = loss

    def record_valid(self, loss: float) -> None:
        self.valid.append(loss)

    @property
    def mean_train(self) -> float:
        return self.train_sum / self.train_count if self.train_count else 0.0

    @property
    def prev_valid(self) -> float:
        return self.valid[-1] if self.valid else 0.0

    @property
    def mean_valid(self) -> float:
        return float(np.mean(self.valid)) if self.valid else 0.0

    def to_dict(self) -> dict:
        return {"train_sum": self.train_sum, "train_count": self.train_count,
                "valid": list(self.valid), "last_train": self.last_train}

    @classmethod
    def from_dict(cls, d: dict) -> History:
        return cls(d["train_sum"], d["train_count"], list(d["valid"]), d["last_train"])


def latency_features(src_len, tgt_len, mean_src_len: float, mean_tgt_len: float, main_loss,
                     history: History, step: int, total_steps: int, mask: Sequence[str] = ()) -> np.ndarray:
    """Feature rows for a batch of transduction examples, shape (B, dim).

    ``main_loss`` is each example's per-token loss under the main task and
    ``step`` is the 1-based global inner step.
    """
    if not 0 <= step <= total_steps or total_steps < 1:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    src_len = np.asarray(src_len, dtype=np.float64)
    B = src_len.shape[0]
    cols = {
        "src_len_ratio": src_len / mean_src_len,
        "tgt_len_ratio": np.asarray(tgt_len, dtype=np.float64) / mean_tgt_len,
        "train_loss": np.asarray(main_loss, dtype=np.float64),
        "mean_train_loss": np.full(B, history.mean_train),
        "valid_loss": np.full(B, history.prev_valid),
        "mean_valid_loss": np.full(B, history.mean_valid),
        "progress": np.full(B, step / total_steps),
    }
    names = feature_names(LATENCY, mask=mask)
    return np.stack([cols[n] for n in names], axis=1)


def window_summary(last_features: np.ndarray, closes: np.ndarray) -> np.ndarray:
    """Last-row features plus mean and std of simple close-to-close returns, shape (B, 7)."""
    closes = np.asarray(closes, dtype=np.float64)
    rets = closes[:, 1:] / closes[:, :-1] - 1.0
    return np.concatenate([np.asarray(last_features, dtype=np.float64),
                           rets.mean(axis=1, keepdims=True), rets.std(axis=1, keepdims=True)], axis=1)


def horizon_features(summary: np.ndarray, prev_train_loss: float, forecasts: np.ndarray,
                     labels: np.ndarray) -> np.ndarray:
    """Window summary, previous training loss, every head's forecast and every task's label."""
    B = summary.shape[0]
    return np.concatenate([summary, np.full((B, 1), prev_train_loss), forecasts, labels], axis=1)


class Policy(_Module):
    """One-hidden-layer MLP producing a distribution over the task set.

    The output layer starts at zero, so the initial distribution is uniform.
    """

    def __init__(self, in_dim: int, task_set: TaskSet, hidden: int | None = None,
                 activation: str | None = None, seed: int = 0):
        if in_dim < 1:
            raise ValueError("policy input dimension must be >= 1")
        self.in_dim = in_dim
        self.task_set = task_set
        self.hidden = hidden or DEFAULT_HIDDEN[task_set.family]
        self.activation = activation or DEFAULT_ACTIVATION[task_set.family]
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        rng = np.random.default_rng(seed)
        n = len(task_set)
        self.params = {
            "policy.w1": ad.parameter((in_dim, self.hidden), rng, name="policy.w1"),
            "policy.b1": ad.parameter((self.hidden,), rng, fan_in=in_dim, name="policy.b1"),
            "policy.w2": ad.Tensor(np.zeros((self.hidden, n)), requires_grad=True, name="policy.w2"),
            "policy.b2": ad.Tensor(np.zeros(n), requires_grad=True, name="policy.b2"),
        }
        self.buffer_features: list[np.ndarray] = []
        self.buffer_actions: list[np.ndarray] = []
        self.warnings = 0
        self.updates = 0

    @property
    def n_tasks(self) -> int:
        return len(self.task_set)

    def _check(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=np.float64)
        if f.ndim == 1:
            f = f[None, :]
        if f.ndim != 2 or f.shape[1] != self.in_dim:
            raise ad.ShapeError(f"policy expects features of dimension {self.in_dim}, got shape {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ValueError("policy features must be finite")
        return f

    def logits(self, f) -> Tensor:
        p = self.params
        h = ad.add(ad.matmul(ad.Tensor(self._check(f)), p["policy.w1"]), p["policy.b1"])
        h = ad.tanh(h) if self.activation == "tanh" else ad.relu(h)
        return ad.add(ad.matmul(h, p["policy.w2"]), p["policy.b2"])

    def distribution(self, f) -> np.ndarray:
        """Task probabilities, shape (B, |tasks|)."""
        with ad.no_grad():
            return ad.softmax(self.logits(f), axis=-1).value

    def record(self, f, actions) -> None:
        self.buffer_features.append(self._check(f))
        self.buffer_actions.append(np.asarray(actions, dtype=np.int64).reshape(-1))

    def clear_buffer(self) -> None:
        self.buffer_features.clear()
        self.buffer_actions.clear()

    @property
    def buffer_size(self) -> int:
        return sum(len(a) for a in self.buffer_actions)


def sample_indices(probs: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling: row i picks the first task whose cumulative mass exceeds ``uniforms[i]``."""
    probs = np.atleast_2d(probs)
    cdf = np.cumsum(probs, axis=1)[:, :-1]
    return (np.asarray(uniforms)[:, None] >= cdf).sum(axis=1).astype(np.int64)


def policy_distribution(policy: Policy, f) -> np.ndarray:
    """Distribution for a single feature vector (1-D) or a batch (2-D)."""
    probs = policy.distribution(f)
    return probs[0] if np.asarray(f).ndim == 1 else probs


def sample_tasks(policy: Policy, f, rng: np.random.Generator) -> np.ndarray:
    """Sample one task position per feature row and record the pairs in the buffer."""
    f = policy._check(f)
    actions = sample_indices(policy.distribution(f), rng.random(f.shape[0]))
    policy.record(f, actions)
    return actions


def sample_task(policy: Policy, f, rng: np.random.Generator) -> TaskSpec:
    """Sample a single task for one feature vector, recording it in the buffer."""
    action = sample_tasks(policy, np.asarray(f).reshape(1, -1), rng)[0]
    return policy.task_set.specs[action]


def reinforce_update(policy: Policy, reward, lr: float) -> bool:
    """One ascent step on ``reward * sum log P(action | feature)`` over the buffer.

    ``reward`` is a scalar shared by every buffered pair or one value per
    pair.  The buffer is cleared afterwards.  An empty buffer is counted in
    ``policy.warnings`` and leaves the policy untouched; returns whether an
    update happened.
    """
    if policy.buffer_size == 0:
        policy.warnings += 1
        return False
    f = np.concatenate(policy.buffer_features)
    actions = np.concatenate(policy.buffer_actions)
    reward = np.broadcast_to(np.asarray(reward, dtype=np.float64), actions.shape)
    if not np.all(np.isfinite(reward)):
        raise ValueError("reward must be finite")
    policy.clear_buffer()
    params = policy.parameters()
    if not np.any(reward):
        policy.updates += 1
        return True
    with ad.Graph():
        logp = ad.pick(ad.log_softmax(policy.logits(f), axis=-1), actions)
        objective = ad.sum_(ad.mul(logp, ad.Tensor(-reward)))
        ad.zero_grad(params)
        ad.backward(objective)
    ad.sgd_step(params, lr)
    policy.updates += 1
    return True


def shaped_reward(current: float, previous: float) -> float:
    """Improvement of the validation metric over the previous episode."""
    return current - previous
