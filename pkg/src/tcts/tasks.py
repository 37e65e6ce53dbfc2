"""Task families, synthetic datasets, CSV ingestion and batch assembly.

Two families of temporally correlated tasks are supported:

* ``latency``: wait-m transduction, offset ``delta = m - 1``;
* ``horizon``: forecast the return ``sigma = k`` days ahead,
  ``y_t = p_{t+k} / p_{t+k-1} - 1``.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .models import ForecastModel, TransductionBatch, make_transduction_batch

LATENCY = "latency"
HORIZON = "horizon"
CSV_COLUMNS = ("date", "symbol", "open", "close", "high", "low", "volume")
PRICE_COLUMNS = ("open", "close", "high", "low")


class DataError(ValueError):
    """Malformed input data."""


@dataclass(frozen=True, order=True)
class TaskSpec:
    family: str
    index: int

    def __post_init__(self):
        if self.family not in (LATENCY, HORIZON):
            raise ValueError(f"unknown task family {self.family!r}")
        if self.index < 1:
            raise ValueError(f"task index must be >= 1, got {self.index}")

    @property
    def delta(self) -> int:
        """Extra source tokens available per step (latency family)."""
        if self.family != LATENCY:
            raise AttributeError("delta is defined for latency tasks only")
        return self.index - 1

    @property
    def sigma(self) -> int:
        """Days ahead being predicted (horizon family)."""
        if self.family != HORIZON:
            raise AttributeError("sigma is defined for horizon tasks only")
        return self.index

    def __str__(self):
        return f"wait-{self.index}" if self.family == LATENCY else f"horizon-{self.index}"


@dataclass(frozen=True)
class TaskSet:
    """The ordered task set with a designated main task."""

    family: str
    indices: tuple[int, ...]
    main: int

    def __post_init__(self):
        if not self.indices:
            raise ValueError("task set is empty")
        if len(set(self.indices)) != len(self.indices):
            raise ValueError(f"duplicate task indices {self.indices}")
        if self.main not in self.indices:
            raise ValueError(f"main task {self.main} not in task set {self.indices}")
        object.__setattr__(self, "specs", tuple(TaskSpec(self.family, i) for i in self.indices))

    @classmethod
    def range(cls, family: str, size: int, main: int) -> TaskSet:
        return cls(family, tuple(range(1, size + 1)), main)

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.specs)

    def __contains__(self, spec) -> bool:
        return isinstance(spec, TaskSpec) and spec.family == self.family and spec.index in self.indices

    def position(self, spec: TaskSpec) -> int:
        if spec not in self:
            raise ValueError(f"{spec} is not in the task set {self.indices}")
        return self.indices.index(spec.index)

    @property
    def main_spec(self) -> TaskSpec:
        return TaskSpec(self.family, self.main)

    @property
    def main_position(self) -> int:
        return self.indices.index(self.main)


# ---------------------------------------------------------------------------
# transduction data

@dataclass
class ParallelCorpus:
    pairs: list[tuple[list[int], list[int]]]
    vocab: int
    split: str = "train"
    dependency: int | None = None

    def __post_init__(self):
        for n, (x, y) in enumerate(self.pairs):
            if not x or not y:
                raise DataError(f"pair {n}: empty sequence")
            for tok in (*x, *y):
                if not 0 <= tok < self.vocab:
                    raise DataError(f"pair {n}: token {tok} outside vocabulary of size {self.vocab}")

    def __len__(self):
        return len(self.pairs)

    @property
    def eos(self) -> int:
        return self.vocab

    @property
    def model_vocab(self) -> int:
        """Vocabulary size seen by the model: content tokens plus EOS."""
        return self.vocab + 1

    def mean_lengths(self) -> tuple[float, float]:
        return (float(np.mean([len(x) for x, _ in self.pairs])),
                float(np.mean([len(y) for _, y in self.pairs])))

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for x, y in self.pairs:
                fh.write(" ".join(map(str, x)) + "\t" + " ".join(map(str, y)) + "\n")

    @classmethod
    def read(cls, path, vocab: int, split: str = "train") -> ParallelCorpus:
        pairs = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                try:
                    src, tgt = line.split("\t")
                    pairs.append(([int(t) for t in src.split()], [int(t) for t in tgt.split()]))
                except ValueError:
                    raise DataError(f"{path}:{lineno}: expected 'src ids<TAB>tgt ids'") from None
        return cls(pairs, vocab, split)


def write_vocab(path, vocab: int) -> None:
    with open(path, "w") as fh:
        for tok in range(vocab):
            fh.write(f"{tok}\n")
        fh.write("</s>\n")


def read_vocab(path) -> list[str]:
    with open(path) as fh:
        return [line.rstrip("\n") for line in fh]


SPLITS = ("train", "valid", "test")


def synthetic_target(x: Sequence[int], vocab: int, dependency: int) -> list[int]:
    """``y_t = (x_t + x_{min(t+d, L)}) mod vocab``."""
    L = len(x)
    return [(x[t] + x[min(t + dependency, L - 1)]) % vocab for t in range(L)]


def make_synthetic_transduction(seed: int, size: int, vocab: int, dependency: int,
                                split: str = "train", persistence: float = 0.75,
                                min_len: int = 5, max_len: int = 20) -> ParallelCorpus:
    """Random source sequences mapped through :func:`synthetic_target`.

    Sources follow a sticky walk: with probability ``persistence`` the next
    token is the previous one plus one (mod vocab), otherwise it is uniform.
    That makes future tokens partly predictable from the prefix, so low-wait
    tasks are hard but not hopeless.
    """
    if dependency < 0:
        raise ValueError("dependency must be >= 0")
    if vocab < 4:
        raise ValueError("vocab must be >= 4")
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    rng = np.random.default_rng([seed, SPLITS.index(split)])
    pairs = []
    for _ in range(size):
        L = int(rng.integers(min_len, max_len + 1))
        fresh = rng.integers(0, vocab, size=L)
        stick = rng.random(L) < persistence
        x = [int(fresh[0])]
        for t in range(1, L):
            x.append((x[-1] + 1) % vocab if stick[t] else int(fresh[t]))
        pairs.append((x, synthetic_target(x, vocab, dependency)))
    return ParallelCorpus(pairs, vocab, split, dependency)


# ---------------------------------------------------------------------------
# time series data

@dataclass
class SeriesPanel:
    """Aligned daily records for several instruments.

    ``raw`` holds open, close, high, low, volume per (instrument, day), NaN
    where an instrument has no record.  ``features`` is ``raw`` z-scored per
    instrument with statistics from the training days only.
    """

    symbols: list[str]
    dates: list[dt.date]
    raw: np.ndarray
    train_frac: float = 0.70
    valid_frac: float = 0.15
    signal: np.ndarray | None = None
    meta: dict = field(default_factory=dict)
    features: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.raw.shape != (len(self.symbols), len(self.dates), 5):
            raise DataError(f"raw shape {self.raw.shape} does not match symbols x dates x 5")
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise DataError("dates must be strictly increasing")
        prices = self.raw[..., :4]
        if np.any(prices[np.isfinite(prices)] <= 0):
            raise DataError("prices must be strictly positive")
        if not (0 < self.train_frac and 0 < self.valid_frac and self.train_frac + self.valid_frac < 1):
            raise ValueError("split fractions must be positive and leave room for a test split")
        D = len(self.dates)
        self.train_end = int(round(D * self.train_frac))
        self.valid_end = int(round(D * (self.train_frac + self.valid_frac)))
        train = self.raw[:, :self.train_end]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            mu = np.nanmean(train, axis=1, keepdims=True)
            sd = np.nanstd(train, axis=1, keepdims=True)
        mu = np.nan_to_num(mu)
        sd = np.where(np.isfinite(sd) & (sd > 0), sd, 1.0)
        self.features = (self.raw - mu) / sd
        self._labels: dict[int, np.ndarray] = {}
        self._norm_labels: dict[int, np.ndarray] = {}

    @property
    def n_instruments(self) -> int:
        return len(self.symbols)

    @property
    def n_days(self) -> int:
        return len(self.dates)

    @property
    def close(self) -> np.ndarray:
        return self.raw[..., 1]

    def split_range(self, split: str) -> tuple[int, int]:
        return {"train": (0, self.train_end), "valid": (self.train_end, self.valid_end),
                "test": (self.valid_end, self.n_days)}[split]

    def label(self, k: int) -> np.ndarray:
        """``p_{t+k} / p_{t+k-1} - 1`` for every (instrument, day t); NaN if undefined."""
        if k < 1:
            raise ValueError("horizon must be >= 1")
        if k not in self._labels:
            out = np.full(self.close.shape, np.nan)
            D = self.n_days
            if k < D:
                out[:, :D - k] = self.close[:, k:] / self.close[:, k - 1:D - 1] - 1.0
            self._labels[k] = out
        return self._labels[k]

    def normalized_label(self, k: int) -> np.ndarray:
        """Label z-scored across instruments on each day."""
        if k not in self._norm_labels:
            y = self.label(k)
            # days near the end have no defined label for any instrument
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                mu = np.nanmean(y, axis=0, keepdims=True)
                sd = np.nanstd(y, axis=0, keepdims=True)
            z = (y - mu) / np.where(sd > 0, sd, 1.0)
            self._norm_labels[k] = np.where(np.isfinite(y), np.nan_to_num(z), np.nan)
        return self._norm_labels[k]

    def samples(self, split: str, window: int, horizons: Iterable[int]) -> np.ndarray:
        """(instrument, day) pairs usable in ``split``.

        A day qualifies when its whole window is recorded and every requested
        label is defined without reaching past the end of the split.
        """
        lo, hi = self.split_range(split)
        horizons = list(horizons)
        kmax = max(horizons)
        ok = np.isfinite(self.features).all(axis=2)
        counts = np.concatenate([np.zeros((self.n_instruments, 1)), np.cumsum(ok, axis=1)], axis=1)
        out = []
        for t in range(max(lo, window - 1), min(hi - kmax, self.n_days)):
            full = counts[:, t + 1] - counts[:, t + 1 - window] == window
            for k in horizons:
                full &= np.isfinite(self.label(k)[:, t])
            for i in np.nonzero(full)[0]:
                out.append((i, t))
        return np.array(out, dtype=np.int64).reshape(-1, 2)

    def windows(self, keys: np.ndarray, window: int) -> np.ndarray:
        idx = keys[:, 1][:, None] + np.arange(-window + 1, 1)[None, :]
        return self.features[keys[:, 0][:, None], idx]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for j, d in enumerate(self.dates):
                for i, sym in enumerate(self.symbols):
                    rec = self.raw[i, j]
                    if np.all(np.isfinite(rec)):
                        w.writerow([d.isoformat(), sym, *(repr(float(v)) for v in rec)])


def make_synthetic_series(seed: int, instruments: int, days: int, horizon_signal: int = 1,
                          noise: float = 0.02, coef: float = 0.01, persistence: float = 0.9,
                          noise_ar: float = 0.2, window: int = 60, max_horizon: int = 10,
                          train_frac: float = 0.70, valid_frac: float = 0.15) -> SeriesPanel:
    """Log-price random walk whose returns carry a planted, observable signal.

    ``r_t = coef * s_{t-h} + noise * e_t`` where ``s`` is a persistent AR(1)
    signal that also drives trading volume, and ``e`` is AR(1) noise.  The
    ``h``-day-ahead label is therefore ``exp(coef * s_t + noise * e_{t+h}) - 1``;
    with ``noise = 0`` it is an increasing function of ``s_t``.
    """
    if days <= window + max_horizon:
        raise ValueError(f"need more than window + max_horizon = {window + max_horizon} days")
    if horizon_signal < 1:
        raise ValueError("horizon_signal must be >= 1")
    rng = np.random.default_rng(seed)
    N, D, h = instruments, days, horizon_signal
    s = np.empty((N, D))
    e = np.empty((N, D))
    s[:, 0] = rng.standard_normal(N)
    e[:, 0] = rng.standard_normal(N)
    inn_s = rng.standard_normal((N, D))
    inn_e = rng.standard_normal((N, D))
    for t in range(1, D):
        s[:, t] = persistence * s[:, t - 1] + math.sqrt(1 - persistence ** 2) * inn_s[:, t]
        e[:, t] = noise_ar * e[:, t - 1] + math.sqrt(1 - noise_ar ** 2) * inn_e[:, t]
    r = noise * e
    r[:, h:] += coef * s[:, :D - h]
    logp = np.log(rng.uniform(10.0, 100.0, size=(N, 1))) + np.cumsum(r, axis=1)
    close = np.exp(logp)
    prev = np.concatenate([close[:, :1], close[:, :-1]], axis=1)
    open_ = prev * np.exp(0.5 * noise * rng.standard_normal((N, D)))
    high = np.maximum(open_, close) * np.exp(0.3 * noise * np.abs(rng.standard_normal((N, D))))
    low = np.minimum(open_, close) * np.exp(-0.3 * noise * np.abs(rng.standard_normal((N, D))))
    volume = 1e6 * np.exp(0.5 * s)
    raw = np.stack([open_, close, high, low, volume], axis=2)
    start = dt.date(2010, 1, 1)
    dates = [start + dt.timedelta(days=j) for j in range(D)]
    symbols = [f"S{i:03d}" for i in range(N)]
    meta = {"seed": seed, "horizon_signal": h, "noise": noise, "coef": coef,
            "persistence": persistence, "noise_ar": noise_ar}
    return SeriesPanel(symbols, dates, raw, train_frac, valid_frac, signal=s, meta=meta)


def oracle_prediction(panel: SeriesPanel) -> np.ndarray:
    """Known-coefficient predictor of the planted-horizon label, per (instrument, day)."""
    if panel.signal is None:
        raise ValueError("panel has no planted signal")
    return panel.meta["coef"] * panel.signal


def ingest_csv(path, train_frac: float = 0.70, valid_frac: float = 0.15) -> SeriesPanel:
    """Read ``date,symbol,open,close,high,low,volume`` rows into a panel."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        unknown = [h for h in header if h not in CSV_COLUMNS]
        if unknown:
            raise DataError(f"{path}:1: unknown column(s) {unknown}")
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}:1: missing column(s) {missing}")
        pos = {c: header.index(c) for c in CSV_COLUMNS}
        records: dict[str, dict[dt.date, list[float]]] = {}
        last_date: dict[str, dt.date] = {}
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                date = dt.date.fromisoformat(row[pos["date"]].strip())
            except ValueError:
                raise DataError(f"{path}:{lineno}: column 'date': bad date {row[pos['date']]!r}") from None
            sym = row[pos["symbol"]].strip()
            if not sym:
                raise DataError(f"{path}:{lineno}: column 'symbol': empty")
            values = []
            for col in CSV_COLUMNS[2:]:
                try:
                    v = float(row[pos[col]])
                except ValueError:
                    raise DataError(f"{path}:{lineno}: column {col!r}: not a number {row[pos[col]]!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}:{lineno}: column {col!r}: non-finite value")
                if col in PRICE_COLUMNS and v <= 0:
                    raise DataError(f"{path}:{lineno}: column {col!r}: non-positive price {v}")
                if col == "volume" and v < 0:
                    raise DataError(f"{path}:{lineno}: column 'volume': negative volume {v}")
                values.append(v)
            if sym in last_date and date <= last_date[sym]:
                raise DataError(f"{path}:{lineno}: column 'date': {date} not after {last_date[sym]} for {sym}")
            last_date[sym] = date
            records.setdefault(sym, {})[date] = values
    if not records:
        raise DataError(f"{path}: no data rows")
    symbols = sorted(records)
    dates = sorted({d for recs in records.values() for d in recs})
    col = {d: j for j, d in enumerate(dates)}
    raw = np.full((len(symbols), len(dates), 5), np.nan)
    for i, sym in enumerate(symbols):
        for d, values in records[sym].items():
            raw[i, col[d]] = values
    return SeriesPanel(symbols, dates, raw, train_frac, valid_frac)


# ---------------------------------------------------------------------------
# batches

@dataclass
class ForecastBatch:
    windows: np.ndarray    # (B, L, 5)
    labels: np.ndarray     # (B,) label of each example's assigned horizon
    heads: np.ndarray      # (B,) position of the assigned task in the task set
    keys: np.ndarray       # (B, 2) (instrument, day)
    skipped: int = 0

    @property
    def size(self) -> int:
        return len(self.labels)


def assemble_batch(data, assignments: Sequence[tuple[object, TaskSpec]], task_set: TaskSet,
                   window: int | None = None, normalize_labels: bool = True):
    """Pair each example with its assigned task.

    For a :class:`ParallelCorpus` examples are pair indices and the result
    is a :class:`TransductionBatch` carrying per-example waits.  For a
    :class:`SeriesPanel` examples are (instrument, day) keys; examples whose
    assigned label is undefined are skipped and counted.
    """
    for _, spec in assignments:
        if spec not in task_set:
            raise ValueError(f"{spec} is not in the task set {task_set.indices}")
    if isinstance(data, ParallelCorpus):
        pairs = [data.pairs[i] for i, _ in assignments]
        pairs = [(x, y + [data.eos]) for x, y in pairs]
        return make_transduction_batch(pairs, [s.index for _, s in assignments], data.eos)
    if isinstance(data, SeriesPanel):
        if window is None:
            raise ValueError("window length required for series batches")
        keys, labels, heads = [], [], []
        skipped = 0
        for key, spec in assignments:
            i, t = int(key[0]), int(key[1])
            y = (data.normalized_label if normalize_labels else data.label)(spec.sigma)[i, t]
            if not np.isfinite(y) or t < window - 1:
                skipped += 1
                continue
            keys.append((i, t))
            labels.append(y)
            heads.append(task_set.position(spec))
        keys = np.array(keys, dtype=np.int64).reshape(-1, 2)
        return ForecastBatch(data.windows(keys, window), np.array(labels), np.array(heads, dtype=np.int64),
                             keys, skipped)
    raise TypeError(f"unsupported data type {type(data).__name__}")
