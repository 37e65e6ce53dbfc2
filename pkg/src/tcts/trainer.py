"""Bi-level training loop and the task-scheduling baselines.

Every strategy shares one inner loop: sample a minibatch, assign a task to
each example, take one gradient step on the summed per-example loss scaled
by ``lr_model / B``.  After ``inner_steps`` steps the main-task validation
loss is measured; strategy ``ours`` then updates its policy with the change
in validation metric as reward.

Randomness is split into independent streams (model init, data order, task
draws, policy init, validation subsampling).  Task draws always consume
exactly ``B`` uniforms per step and map them to tasks by inverse CDF, so
strategies that differ only in their task distribution see identical data
and identical random numbers.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import metrics
from .models import ForecastModel, TransductionModel
from .scheduler import (
    History, Policy, feature_names, horizon_features, latency_features,
    reinforce_update, sample_indices, shaped_reward, window_summary,
)
from .tasks import HORIZON, LATENCY, ParallelCorpus, SeriesPanel, TaskSet, assemble_batch

STRATEGIES = ("ours", "mtl", "cl", "waitk", "waitk_star", "anneal", "spl", "window_around_kstar")
OPTIMIZERS = ("sgd", "adam")
DEFAULT_TASKS = {LATENCY: tuple(range(1, 14)), HORIZON: (1, 2, 3)}
DEFAULT_HIDDEN = {LATENCY: 64, HORIZON: 32}
EVAL_CHUNK = 256


class ConfigError(ValueError):
    """A configuration field holds an invalid value."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class TrainingAborted(RuntimeError):
    """Training hit a non-finite loss."""

    def __init__(self, message: str, episode: int, step: int):
        super().__init__(message)
        self.episode = episode
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    family: str = LATENCY
    strategy: str = "ours"
    tasks: tuple[int, ...] = ()          # empty -> family default
    main_task: int = 1
    episodes: int = 10
    inner_steps: int = 0                 # 0 -> one pass over the training set
    batch_size: int = 64
    lr_model: float = 0.5
    lr_policy: float = 5e-4
    optimizer: str = "sgd"
    clip_norm: float = 5.0               # 0 disables clipping
    policy_clip_norm: float = 0.0
    seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    beam: int = 1
    eval_every: int = 0                  # decode-based validation metrics every n episodes; 0 = never
    final_decode: bool = True
    valid_fraction: float = 1.0
    width: int = 1
    kstar: int = 0                       # 0 -> found by a wait-k* run
    feature_mask: tuple[str, ...] = ()
    policy_hidden: int = 0               # 0 -> family default
    emb_dim: int = 32
    hidden: int = 0                      # 0 -> family default
    layers: int = 2
    window: int = 60
    spl_tau0: float = 40.0

    def __post_init__(self):
        if not self.tasks:
            object.__setattr__(self, "tasks", DEFAULT_TASKS.get(self.family, ()))
        object.__setattr__(self, "tasks", tuple(int(t) for t in self.tasks))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "feature_mask", tuple(self.feature_mask))
        self.validate()

    def validate(self) -> None:
        if self.family not in (LATENCY, HORIZON):
            raise ConfigError("family", f"must be {LATENCY!r} or {HORIZON!r}, got {self.family!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError("strategy", f"must be one of {', '.join(STRATEGIES)}; got {self.strategy!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError("optimizer", f"must be one of {', '.join(OPTIMIZERS)}; got {self.optimizer!r}")
        for name in ("episodes", "batch_size", "beam", "emb_dim", "layers", "window"):
            if getattr(self, name) < 1:
                raise ConfigError(name, f"must be >= 1, got {getattr(self, name)}")
        for name in ("inner_steps", "eval_every", "width", "kstar", "policy_hidden", "hidden"):
            if getattr(self, name) < 0:
                raise ConfigError(name, f"must be >= 0, got {getattr(self, name)}")
        for name in ("lr_model", "lr_policy", "clip_norm", "policy_clip_norm"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(name, f"must be finite and >= 0, got {v}")
        if not 0 < self.valid_fraction <= 1:
            raise ConfigError("valid_fraction", f"must be in (0, 1], got {self.valid_fraction}")
        if not 0 <= self.spl_tau0 <= 100:
            raise ConfigError("spl_tau0", f"must be in [0, 100], got {self.spl_tau0}")
        if not self.tasks or min(self.tasks) < 1 or len(set(self.tasks)) != len(self.tasks):
            raise ConfigError("tasks", f"must be distinct integers >= 1, got {list(self.tasks)}")
        if self.main_task not in self.tasks:
            raise ConfigError("main_task", f"{self.main_task} is not in tasks {list(self.tasks)}")
        if not self.seeds:
            raise ConfigError("seeds", "must not be empty")
        if self.strategy in ("cl", "anneal"):
            lo = self.main_task if self.strategy == "cl" else min(self.tasks)
            need = set(range(lo, max(self.tasks) + 1))
            if not need <= set(self.tasks):
                raise ConfigError("tasks", f"strategy {self.strategy} needs every index in {lo}..{max(self.tasks)}")
        if self.kstar and self.kstar not in self.tasks:
            raise ConfigError("kstar", f"{self.kstar} is not in tasks {list(self.tasks)}")
        try:
            feature_names(self.family, self.task_set, self.feature_mask)
        except ValueError as exc:
            raise ConfigError("feature_mask", str(exc)) from None

    @property
    def task_set(self) -> TaskSet:
        return TaskSet(self.family, tuple(self.tasks), self.main_task)

    @property
    def model_hidden(self) -> int:
        return self.hidden or DEFAULT_HIDDEN[self.family]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("tasks", "seeds", "feature_mask"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown field")
        return cls(**d)


# ---------------------------------------------------------------------------
# data containers

@dataclass
class TransductionData:
    train: ParallelCorpus
    valid: ParallelCorpus
    test: ParallelCorpus
    family: str = field(default=LATENCY, init=False)

    def __post_init__(self):
        if len({self.train.vocab, self.valid.vocab, self.test.vocab}) != 1:
            raise ValueError("train/valid/test vocabularies differ")
        self.mean_src, self.mean_tgt = self.train.mean_lengths()

    @property
    def vocab(self) -> int:
        return self.train.vocab

    def split(self, name: str) -> ParallelCorpus:
        return {"train": self.train, "valid": self.valid, "test": self.test}[name]


@dataclass
class SeriesData:
    panel: SeriesPanel
    window: int = 60
    family: str = field(default=HORIZON, init=False)

    def keys(self, split: str, horizons: Sequence[int]) -> np.ndarray:
        return self.panel.samples(split, self.window, horizons)


# ---------------------------------------------------------------------------
# schedule formulas

def cl_task_at(t: int, t_max: int, M: int, k: int) -> int:
    """Curriculum task index ``M - floor((t-1)/t_max * (M-k+1))`` for step ``t`` in ``1..t_max``."""
    if t_max < 1 or not 1 <= t <= t_max:
        raise ValueError(f"step {t} outside 1..{t_max}")
    if not 1 <= k <= M:
        raise ValueError(f"need 1 <= k <= M, got k={k}, M={M}")
    return M - ((t - 1) * (M - k + 1)) // t_max


def anneal_distribution(t: float, t_max: float, m_min: int, m_max: int) -> np.ndarray:
    """Linear blend from uniform to ``p(m) = m / sum(i)`` over ``m_min..m_max``."""
    if m_min > m_max or m_min < 1:
        raise ValueError(f"need 1 <= m_min <= m_max, got {m_min}, {m_max}")
    if t_max <= 0 or not 0 <= t <= t_max:
        raise ValueError(f"t={t} outside [0, {t_max}]")
    m = np.arange(m_min, m_max + 1, dtype=np.float64)
    frac = t / t_max
    return (1.0 - frac) * np.full(m.size, 1.0 / m.size) + frac * (m / m.sum())


def spl_filter(losses: Sequence[float], tau: float) -> np.ndarray:
    """Indices of the ``ceil(B * (1 - tau/100))`` lowest losses (at least one), in index order."""
    losses = np.asarray(losses, dtype=np.float64)
    if not 0 <= tau <= 100:
        raise ValueError(f"tau must be in [0, 100], got {tau}")
    B = losses.size
    keep = max(1, math.ceil(B * (1.0 - tau / 100.0) - 1e-12))
    order = np.argsort(losses, kind="stable")
    return np.sort(order[:keep])


def spl_tau(t: int, t_max: int, tau0: float = 40.0) -> float:
    """Linear decay from ``tau0`` at the first step to 0 at the last."""
    if t_max <= 1:
        return 0.0
    return tau0 * (1.0 - (t - 1) / (t_max - 1))


# ---------------------------------------------------------------------------
# reports

@dataclass
class RunReport:
    config: dict
    episodes: list[dict] = field(default_factory=list)
    initial_valid_loss: float | None = None
    test: dict = field(default_factory=dict)
    kstar: int | None = None
    candidates: dict = field(default_factory=dict)
    status: str = "running"
    failure: str | None = None
    policy_warnings: int = 0
    model: object = field(default=None, repr=False, compare=False)
    policy: object = field(default=None, repr=False, compare=False)

    @property
    def final_valid_loss(self) -> float:
        if not self.episodes:
            raise ValueError("no completed episodes")
        return self.episodes[-1]["valid_loss"]

    def summary(self) -> dict:
        out = {
            "config": self.config, "status": self.status, "failure": self.failure,
            "episodes": len(self.episodes), "initial_valid_loss": self.initial_valid_loss,
            "final_valid_loss": self.episodes[-1]["valid_loss"] if self.episodes else None,
            "test": self.test, "policy_warnings": self.policy_warnings,
        }
        if self.kstar is not None:
            out["kstar"] = self.kstar
            out["candidates"] = {str(k): v for k, v in self.candidates.items()}
        return out

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.jsonl", "w") as fh:
            for rec in self.episodes:
                fh.write(json.dumps(rec) + "\n")
        with open(out / "summary.json", "w") as fh:
            json.dump(self.summary(), fh, indent=2)
        write_histogram_csv(out / "histogram.csv", self.episodes, self.config["tasks"])


def write_histogram_csv(path, episodes: Sequence[dict], tasks: Sequence[int]) -> None:
    with open(path, "w") as fh:
        fh.write("episode,task_index,frequency,expected_frequency\n")
        for rec in episodes:
            for k, f, q in zip(tasks, rec["histogram"], rec["expected_histogram"]):
                fh.write(f"{int(rec['episode'])},{k},{float(f)!r},{float(q)!r}\n")


def read_histogram_csv(path) -> dict[int, dict[int, tuple[float, float]]]:
    out: dict[int, dict[int, tuple[float, float]]] = {}
    with open(path) as fh:
        next(fh)
        for line in fh:
            e, k, f, q = line.strip().split(",")
            out.setdefault(int(e), {})[int(k)] = (float(f), float(q))
    return out


def total_variation(p: Sequence[float], q: Sequence[float]) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


# ---------------------------------------------------------------------------
# model construction and evaluation

def build_model(config: TrainConfig, data, seed: int | None = None):
    seed = config.seed if seed is None else seed
    init_seed = int(np.random.SeedSequence(seed).spawn(1)[0].generate_state(1)[0])
    if config.family == LATENCY:
        V = data.vocab + 1
        return TransductionModel(V, V, emb_dim=config.emb_dim, hidden=config.model_hidden, seed=init_seed)
    return ForecastModel(window=config.window, hidden=config.model_hidden, layers=config.layers,
                         n_tasks=len(config.tasks), seed=init_seed)


def _pairs_with_eos(corpus: ParallelCorpus, idx) -> list:
    return [(corpus.pairs[i][0], corpus.pairs[i][1] + [corpus.eos]) for i in idx]


def transduction_nll(model: TransductionModel, corpus: ParallelCorpus, wait: int, idx=None) -> dict:
    """Teacher-forced per-token NLL and token accuracy under wait-``wait`` (EOS included)."""
    from .models import make_transduction_batch
    idx = np.arange(len(corpus)) if idx is None else np.asarray(idx)
    if idx.size == 0:
        raise ValueError("cannot evaluate an empty split")
    nll = 0.0
    correct = 0
    tokens = 0
    with ad.no_grad():
        for lo in range(0, idx.size, EVAL_CHUNK):
            batch = make_transduction_batch(_pairs_with_eos(corpus, idx[lo:lo + EVAL_CHUNK]), wait, corpus.eos)
            lp = model.vocab_logprobs(batch).value
            mask = np.arange(batch.tgt.shape[1])[None, :] < batch.tgt_len[:, None]
            picked = np.take_along_axis(lp, batch.tgt[..., None], axis=-1)[..., 0]
            nll -= float(picked[mask].sum())
            correct += int((lp.argmax(axis=-1) == batch.tgt)[mask].sum())
            tokens += int(mask.sum())
    return {"loss": nll / tokens, "token_accuracy": correct / tokens, "tokens": tokens}


def decode_metrics(model: TransductionModel, corpus: ParallelCorpus, k: int, beam: int = 1) -> dict:
    """BLEU, AP and AL of wait-k decoding over a corpus."""
    hyps, refs, ap, al_hyp, al_ref = [], [], [], [], []
    for x, y in corpus.pairs:
        res = model.decode_incremental(x, k, beam)
        hyps.append(res.tokens)
        refs.append(y)
        ref_trace = metrics.waitk_trace(k, len(x), len(y))
        al_ref.append(metrics.average_lagging(ref_trace, len(x), len(y)))
        if res.tokens:
            ap.append(metrics.average_proportion(res.delays, len(x)))
            if res.delays[-1] == len(x):
                al_hyp.append(metrics.average_lagging(res.delays, len(x)))
    return {
        "bleu": metrics.corpus_bleu(hyps, refs),
        "ap": float(np.mean(ap)) if ap else math.nan,
        "al": float(np.mean(al_hyp)) if al_hyp else math.nan,
        "al_reference": float(np.mean(al_ref)),
        "empty_hypotheses": sum(1 for h in hyps if not h),
    }


def forecast_predictions(model: ForecastModel, data: SeriesData, keys: np.ndarray, head: int) -> np.ndarray:
    out = np.empty(len(keys))
    with ad.no_grad():
        for lo in range(0, len(keys), EVAL_CHUNK):
            chunk = keys[lo:lo + EVAL_CHUNK]
            out[lo:lo + len(chunk)] = model.predict(data.panel.windows(chunk, data.window)).value[:, head]
    return out


def evaluate(model, data, split: str, task_set: TaskSet, decode: bool = False, beam: int = 1,
             idx=None) -> dict:
    """Main-task metrics on a split; ``metric`` is the negated loss (higher is better).

    Parameters are never modified.
    """
    if task_set.family == LATENCY:
        corpus = data.split(split)
        rec = transduction_nll(model, corpus, task_set.main, idx)
        if decode:
            rec.update(decode_metrics(model, corpus, task_set.main, beam))
    else:
        k = task_set.main
        keys = data.keys(split, [k])
        if idx is not None:
            keys = keys[np.asarray(idx)]
        if len(keys) == 0:
            raise ValueError(f"split {split!r} has no samples")
        preds = forecast_predictions(model, data, keys, task_set.main_position)
        labels = data.panel.normalized_label(k)[keys[:, 0], keys[:, 1]]
        raw = data.panel.label(k)[keys[:, 0], keys[:, 1]]
        rec = {"loss": metrics.mse(preds, labels), "mse": metrics.mse(preds, labels), "samples": len(keys)}
        try:
            ic, daily = metrics.rank_ic(keys[:, 1], preds, raw, return_daily=True)
            rec["rank_ic"] = ic
            rec["icir"] = metrics.icir(list(daily.values()))
        except metrics.MetricError:
            rec.setdefault("rank_ic", math.nan)
            rec.setdefault("icir", math.nan)
    rec["metric"] = -rec["loss"]
    return rec


# ---------------------------------------------------------------------------
# the inner loop

class _Order:
    """Endless stream of shuffled example indices."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.perm = rng.permutation(n)
        self.pos = 0

    def take(self, B: int) -> np.ndarray:
        out = []
        while B:
            if self.pos == self.n:
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
            chunk = self.perm[self.pos:self.pos + B]
            self.pos += len(chunk)
            B -= len(chunk)
            out.append(chunk)
        return np.concatenate(out)

    def state(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "perm": self.perm.tolist(), "pos": self.pos}

    def load(self, st: dict) -> None:
        self.rng.bit_generator.state = st["rng"]
        self.perm = np.array(st["perm"], dtype=np.int64)
        self.pos = st["pos"]


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "data", "tasks", "policy", "valid")
    return {n: np.random.default_rng(s) for n, s in zip(names, np.random.SeedSequence(seed).spawn(len(names)))}


class _Run:
    """State of one training run over (model, policy)."""

    def __init__(self, config: TrainConfig, data, model, policy, fixed_task: int | None, allowed: Sequence[int] | None):
        self.cfg = config
        self.data = data
        self.ts = config.task_set
        self.model = model
        self.fixed_task = fixed_task
        self.rng = _streams(config.seed)
        n = len(self.ts)
        positions = range(n) if allowed is None else [self.ts.indices.index(m) for m in allowed]
        self.allowed_mask = np.zeros(n, dtype=bool)
        self.allowed_mask[list(positions)] = True
        if config.family == LATENCY:
            self.n_train = len(data.train)
        else:
            self.train_keys = data.keys("train", self.ts.indices)
            self.n_train = len(self.train_keys)
            if self.n_train == 0:
                raise ValueError("training split has no usable samples")
        self.B = config.batch_size
        self.S = config.inner_steps or math.ceil(self.n_train / self.B)
        self.total_steps = config.episodes * self.S
        self.order = _Order(self.n_train, self.rng["data"])
        self.history = History()
        self.params = model.parameters()
        self.adam = ad.Adam(self.params, lr=config.lr_model) if config.optimizer == "adam" else None
        if config.strategy == "ours":
            dim = len(feature_names(config.family, self.ts, config.feature_mask))
            if policy is None:
                pseed = int(self.rng["policy"].integers(2 ** 31))
                policy = Policy(dim, self.ts, hidden=config.policy_hidden or None, seed=pseed)
            elif policy.in_dim != dim or policy.n_tasks != n:
                raise ad.ShapeError(f"policy shape ({policy.in_dim}, {policy.n_tasks}) does not match "
                                    f"features ({dim}) and task set ({n})")
        self.policy = policy
        self.prev_metric: float | None = None
        self.episode = 0
        self.model_updates = 0

    # -- task assignment ----------------------------------------------------

    def _distribution(self, step: int, features) -> np.ndarray:
        """Task distribution for each example of the current batch, shape (B, |tasks|)."""
        n = len(self.ts)
        cfg = self.cfg
        if self.fixed_task is not None:
            p = np.zeros(n)
            p[self.ts.indices.index(self.fixed_task)] = 1.0
        elif cfg.strategy == "ours":
            return self.policy.distribution(features)
        elif cfg.strategy in ("mtl", "window_around_kstar"):
            p = self.allowed_mask / self.allowed_mask.sum()
        elif cfg.strategy == "cl":
            m = cl_task_at(step, self.total_steps, max(self.ts.indices), self.ts.main)
            p = np.zeros(n)
            p[self.ts.indices.index(m)] = 1.0
        elif cfg.strategy == "anneal":
            lo, hi = min(self.ts.indices), max(self.ts.indices)
            q = anneal_distribution(step, self.total_steps, lo, hi)
            p = np.array([q[m - lo] for m in self.ts.indices])
        else:  # waitk, spl
            p = np.zeros(n)
            p[self.ts.main_position] = 1.0
        return np.broadcast_to(p, (self.B, n))

    def _features(self, batch_idx, step, forecasts=None) -> np.ndarray | None:
        if self.cfg.strategy != "ours" or self.fixed_task is not None:
            return None
        if self.cfg.family == LATENCY:
            corpus = self.data.train
            with ad.no_grad():
                mb = assemble_batch(corpus, [(i, self.ts.main_spec) for i in batch_idx], self.ts)
                main_loss = self.model.example_losses(mb).value / mb.tgt_len
            return latency_features(mb.src_len, [len(corpus.pairs[i][1]) for i in batch_idx],
                                    self.data.mean_src, self.data.mean_tgt, main_loss,
                                    self.history, step, self.total_steps, self.cfg.feature_mask)
        keys = self.train_keys[batch_idx]
        panel = self.data.panel
        w = self.data.window
        rows = keys[:, 1][:, None] + np.arange(-w + 1, 1)[None, :]
        summary = window_summary(panel.features[keys[:, 0], keys[:, 1]], panel.close[keys[:, 0][:, None], rows])
        labels = np.stack([panel.normalized_label(k)[keys[:, 0], keys[:, 1]] for k in self.ts.indices], axis=1)
        return horizon_features(summary, self.history.last_train, forecasts, labels)

    # -- one inner step --------------------------------------------------------

    def step(self, step: int, stats: dict) -> None:
        cfg = self.cfg
        idx = self.order.take(self.B)
        uniforms = self.rng["tasks"].random(self.B)
        with ad.Graph():
            if cfg.family == LATENCY:
                feats = self._features(idx, step)
                probs = self._distribution(step, feats)
                actions = sample_indices(probs, uniforms)
                specs = [self.ts.specs[a] for a in actions]
                batch = assemble_batch(self.data.train, list(zip(idx, specs)), self.ts)
                losses = self.model.example_losses(batch)
                tokens = batch.tgt_len
            else:
                keys = self.train_keys[idx]
                preds = self.model.predict(self.data.panel.windows(keys, self.data.window))
                feats = self._features(idx, step, preds.value)
                probs = self._distribution(step, feats)
                actions = sample_indices(probs, uniforms)
                specs = [self.ts.specs[a] for a in actions]
                batch = assemble_batch(self.data.panel, list(zip(keys, specs)), self.ts, self.data.window)
                if batch.skipped:
                    raise RuntimeError("training keys must have every task label defined")
                err = ad.sub(ad.pick(preds, batch.heads), batch.labels)
                losses = ad.mul(err, err)
                tokens = np.ones(self.B)
            keep = np.arange(self.B)
            if cfg.strategy == "spl" and self.fixed_task is None:
                keep = spl_filter(losses.value, spl_tau(step, self.total_steps, cfg.spl_tau0))
                total = ad.sum_(ad.index(losses, keep))
            else:
                total = ad.sum_(losses)
            if not math.isfinite(total.item()):
                raise FloatingPointError("non-finite loss")
            ad.zero_grad(self.params)
            ad.backward(total)
        if feats is not None:
            self.policy.record(feats, actions)
        self._update(len(keep))
        self.model_updates += 1
        per_token = float(losses.value.sum() / tokens.sum())
        self.history.record_train(per_token)
        stats["loss"] += per_token
        stats["counts"] += np.bincount(actions, minlength=len(self.ts))
        stats["probs"] += probs.mean(axis=0)

    def _update(self, n: int) -> None:
        cfg = self.cfg
        if self.adam is None and not cfg.clip_norm:
            ad.sgd_step(self.params, cfg.lr_model / n)
            return
        for p in self.params:
            p.grad = p.grad / n
        if self.adam is not None:
            if cfg.clip_norm:
                ad.clip_grad_norm(self.params, cfg.clip_norm)
            self.adam.step()
        else:
            ad.sgd_step(self.params, cfg.lr_model, clip_norm=cfg.clip_norm)

    # -- validation ---------------------------------------------------------

    def validate(self) -> float:
        cfg = self.cfg
        idx = None
        if cfg.valid_fraction < 1:
            n = len(self.data.valid) if cfg.family == LATENCY else len(self.data.keys("valid", [self.ts.main]))
            size = max(1, int(round(n * cfg.valid_fraction)))
            idx = np.sort(self.rng["valid"].choice(n, size=size, replace=False))
        return evaluate(self.model, self.data, "valid", self.ts, idx=idx)["loss"]

    def checked_validate(self, episode: int) -> float:
        """Validation loss, aborting the run if it is not finite (episode 0 is the pre-training pass)."""
        step = self.S if episode else 0
        try:
            loss = self.validate()
        except FloatingPointError as exc:
            raise TrainingAborted(f"non-finite value in validation at episode {episode}: {exc}",
                                  episode, step) from exc
        if not math.isfinite(loss):
            raise TrainingAborted(f"non-finite validation loss at episode {episode}", episode, step)
        return loss

    # -- episodes ------------------------------------------------------------

    def run_episode(self) -> dict:
        cfg = self.cfg
        e = self.episode + 1
        n = len(self.ts)
        stats = {"loss": 0.0, "counts": np.zeros(n), "probs": np.zeros(n)}
        for s in range(1, self.S + 1):
            step = (e - 1) * self.S + s
            try:
                self.step(step, stats)
            except FloatingPointError as exc:
                raise TrainingAborted(f"non-finite value at episode {e}, step {s}: {exc}", e, s) from exc
        valid_loss = self.checked_validate(e)
        metric = -valid_loss
        reward = shaped_reward(metric, self.prev_metric)
        if self.policy is not None and self.fixed_task is None:
            reinforce_update(self.policy, reward, cfg.lr_policy)
        self.prev_metric = metric
        self.history.record_valid(valid_loss)
        self.episode = e
        rec = {
            "episode": e, "train_loss": stats["loss"] / self.S, "valid_loss": valid_loss, "metric": metric,
            "reward": reward, "histogram": (stats["counts"] / stats["counts"].sum()).tolist(),
            "expected_histogram": (stats["probs"] / self.S).tolist(), "model_updates": self.model_updates,
        }
        if cfg.eval_every and cfg.family == LATENCY and e % cfg.eval_every == 0:
            rec["decode"] = decode_metrics(self.model, self.data.valid, self.ts.main, cfg.beam)
        return rec

    # -- checkpointing -------------------------------------------------------

    def save(self, out_dir: Path, report: RunReport) -> None:
        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        if self.policy is not None:
            tensors.update(self.policy.state_dict())
        if self.adam is not None:
            tensors.update({f"opt.{k}": v for k, v in self.adam.state().items()})
        ad.save_tensors(out_dir / "checkpoint.tcts", tensors)
        state = {
            "config": self.cfg.to_dict(), "model": self.model.config(), "episode": self.episode,
            "prev_metric": self.prev_metric, "history": self.history.to_dict(),
            "order": self.order.state(), "tasks_rng": self.rng["tasks"].bit_generator.state,
            "valid_rng": self.rng["valid"].bit_generator.state, "model_updates": self.model_updates,
            "policy_warnings": self.policy.warnings if self.policy else 0,
            "initial_valid_loss": report.initial_valid_loss, "episodes": report.episodes,
        }
        tmp = out_dir / "checkpoint.json.tmp"
        tmp.write_text(json.dumps(state))
        os.replace(tmp, out_dir / "checkpoint.json")

    def load(self, out_dir: Path, report: RunReport) -> None:
        state = json.loads((out_dir / "checkpoint.json").read_text())
        if state["config"] != self.cfg.to_dict():
            raise ValueError("checkpoint was written with a different configuration")
        tensors = ad.load_tensors(out_dir / "checkpoint.tcts")
        self.model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
        if self.policy is not None:
            self.policy.load_state_dict({k: v for k, v in tensors.items() if k.startswith("policy.")})
            self.policy.warnings = state["policy_warnings"]
        if self.adam is not None:
            self.adam.load_state({k[4:]: v for k, v in tensors.items() if k.startswith("opt.")})
        self.episode = state["episode"]
        self.prev_metric = state["prev_metric"]
        self.history = History.from_dict(state["history"])
        self.order.load(state["order"])
        self.rng["tasks"].bit_generator.state = state["tasks_rng"]
        self.rng["valid"].bit_generator.state = state["valid_rng"]
        self.model_updates = state["model_updates"]
        report.initial_valid_loss = state["initial_valid_loss"]
        report.episodes = state["episodes"]


def _run_loop(config: TrainConfig, data, model=None, policy=None, fixed_task: int | None = None,
              allowed: Sequence[int] | None = None, out_dir=None, resume: bool = False) -> RunReport:
    model = model if model is not None else build_model(config, data)
    run = _Run(config, data, model, policy, fixed_task, allowed)
    report = RunReport(config=config.to_dict(), model=model, policy=run.policy)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    try:
        if resume and out is not None and (out / "checkpoint.json").exists():
            run.load(out, report)
        else:
            initial = run.checked_validate(0)
            report.initial_valid_loss = initial
            run.prev_metric = -initial
        while run.episode < config.episodes:
            report.episodes.append(run.run_episode())
            if out is not None:
                run.save(out, report)
        report.test = evaluate(model, data, "test", config.task_set,
                               decode=config.final_decode and config.family == LATENCY, beam=config.beam)
        report.status = "completed"
    except TrainingAborted as exc:
        report.status = "aborted"
        report.failure = str(exc)
        raise
    finally:
        report.policy_warnings = run.policy.warnings if run.policy else 0
        if out is not None:
            report.write(out)
    return report


# ---------------------------------------------------------------------------
# public entry points

def train(config: TrainConfig, data, model=None, policy=None, out_dir=None, resume: bool = False) -> RunReport:
    """Train with ``config.strategy`` and return the run report (model attached)."""
    s = config.strategy
    if s == "waitk_star":
        return train_waitk_star(config, data, out_dir=out_dir)
    if s == "window_around_kstar":
        kstar = config.kstar or train_waitk_star(replace(config, strategy="waitk_star"), data).kstar
        return train_window_around_kstar(config, data, kstar, config.width, model=model, out_dir=out_dir,
                                         resume=resume)
    if s == "mtl" and policy is not None:
        raise ValueError("strategy mtl takes no policy")
    return _run_loop(config, data, model, policy, out_dir=out_dir, resume=resume)


def train_ours(config: TrainConfig, data, model=None, policy=None, **kw) -> RunReport:
    return train(replace(config, strategy="ours"), data, model, policy, **kw)


def train_mtl(config: TrainConfig, data, model=None, **kw) -> RunReport:
    return train(replace(config, strategy="mtl"), data, model, **kw)


def train_single(config: TrainConfig, data, task: int, model=None, **kw) -> RunReport:
    """Vanilla training on one task of the task set; validation still uses the main task."""
    if task not in config.tasks:
        raise ValueError(f"task {task} not in {list(config.tasks)}")
    return _run_loop(replace(config, strategy="waitk"), data, model, fixed_task=task, **kw)


def train_waitk_star(config: TrainConfig, data, out_dir=None) -> RunReport:
    """One single-task model per task; keep the best by main-task validation loss (smallest index on ties)."""
    best: RunReport | None = None
    candidates = {}
    for m in sorted(config.tasks):
        sub = None if out_dir is None else Path(out_dir) / f"task_{m}"
        rep = train_single(config, data, m, out_dir=sub)
        candidates[m] = rep.final_valid_loss
        if best is None or rep.final_valid_loss < best.final_valid_loss:
            best, kstar = rep, m
    best.kstar = kstar
    best.candidates = candidates
    best.config = replace(config, strategy="waitk_star").to_dict()
    if out_dir is not None:
        best.write(out_dir)
    return best


def train_window_around_kstar(config: TrainConfig, data, kstar: int, width: int, model=None,
                              out_dir=None, resume: bool = False) -> RunReport:
    """Uniform task sampling restricted to ``|m - kstar| <= width``."""
    if kstar not in config.tasks:
        raise ValueError(f"kstar {kstar} not in {list(config.tasks)}")
    allowed = [m for m in config.tasks if abs(m - kstar) <= width]
    cfg = replace(config, strategy="window_around_kstar", kstar=kstar, width=width)
    rep = _run_loop(cfg, data, model, allowed=allowed, out_dir=out_dir, resume=resume)
    rep.kstar = kstar
    return rep
