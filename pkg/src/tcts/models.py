"""Sequence models built on :mod:`tcts.autodiff`.

``TransductionModel`` is a GRU encoder with one causal self-attention block
followed by a GRU decoder that cross-attends to a wait-m source prefix.
``ForecastModel`` is a stacked GRU regressor over a fixed-length window with
one output per horizon task.

Token conventions: content tokens are ``0..vocab-1``; the extra id ``vocab``
serves as source end-of-sentence, decoder start symbol and target EOS.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MASK_BIAS = -1e30


def attention_weights(q: np.ndarray, keys: np.ndarray, w_q: np.ndarray, w_k: np.ndarray) -> np.ndarray:
    scores = (keys @ w_k * (q @ w_q)).sum(axis=-1)
    e = np.exp(scores - scores.max())
    return e / e.sum()


def attn(q, K, V, w_q, w_k, w_v) -> Tensor:
    """``sum_i alpha_i W_v v_i`` with ``alpha = softmax_i((W_q q)^T (W_k k_i))``.

    Vectors are rows, so ``W x`` is written ``x @ W``.  Differentiable in
    every argument.
    """
    q, K, V = ad._as_tensor(q), ad._as_tensor(K), ad._as_tensor(V)
    if K.ndim != 2 or K.shape[0] == 0:
        raise ValueError("attn: needs at least one key")
    if V.shape[0] != K.shape[0]:
        raise ad.ShapeError(f"attn: {K.shape[0]} keys but {V.shape[0]} values")
    qq = ad.matmul(ad.reshape(q, (1, q.size)), w_q)
    scores = ad.matmul(qq, ad.transpose(ad.matmul(K, w_k)))
    alpha = ad.softmax(scores, axis=-1)
    return ad.reshape(ad.matmul(alpha, ad.matmul(V, w_v)), (-1,))


def _gru_cell(x: np.ndarray, h: np.ndarray, p: dict, prefix: str) -> np.ndarray:
    """Single GRU step, same arithmetic as :func:`autodiff.gru`."""
    H = h.shape[-1]
    gi = x @ p[prefix + "w_ih"].value + p[prefix + "b_ih"].value
    gh = h @ p[prefix + "w_hh"].value + p[prefix + "b_hh"].value
    r = ad._sigmoid(gi[:, :H] + gh[:, :H])
    z = ad._sigmoid(gi[:, H:2 * H] + gh[:, H:2 * H])
    n = np.tanh(gi[:, 2 * H:] + r * gh[:, 2 * H:])
    return (1.0 - z) * n + z * h


def _gru_params(rng, prefix: str, n_in: int, n_hidden: int) -> dict[str, Tensor]:
    return {
        prefix + "w_ih": ad.parameter((n_in, 3 * n_hidden), rng, fan_in=n_hidden, name=prefix + "w_ih"),
        prefix + "w_hh": ad.parameter((n_hidden, 3 * n_hidden), rng, fan_in=n_hidden, name=prefix + "w_hh"),
        prefix + "b_ih": ad.parameter((3 * n_hidden,), rng, fan_in=n_hidden, name=prefix + "b_ih"),
        prefix + "b_hh": ad.parameter((3 * n_hidden,), rng, fan_in=n_hidden, name=prefix + "b_hh"),
    }


def _run_gru(x: Tensor, p: dict, prefix: str) -> Tensor:
    B = x.shape[0]
    H = p[prefix + "w_hh"].shape[0]
    return ad.gru(x, np.zeros((B, H)), p[prefix + "w_ih"], p[prefix + "w_hh"],
                  p[prefix + "b_ih"], p[prefix + "b_hh"])


class _Module:
    params: dict[str, Tensor]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters {sorted(missing)}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ad.ShapeError(f"{k}: checkpoint shape {state[k].shape} != {p.shape}")
            p.value = np.array(state[k], dtype=np.float64)

    def fingerprint(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(self.params[k].value.tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# transduction

def visible_source(t: np.ndarray, m: np.ndarray, src_len: np.ndarray) -> np.ndarray:
    """Number of encoder positions a decoder step may attend to.

    ``t`` is the 1-based target step.  The wait-m read count is
    ``g = min(t + m - 1, L_x)``; once the whole source is read the trailing
    EOS position becomes visible too.
    """
    g = np.minimum(t + m - 1, src_len)
    return np.where(g >= src_len, src_len + 1, g)


@dataclass
class TransductionBatch:
    src: np.ndarray        # (B, Tx+1) content ids, EOS, then padding
    src_len: np.ndarray    # (B,) content lengths
    tgt: np.ndarray        # (B, Ty) ids to predict, padded with 0
    tgt_len: np.ndarray    # (B,)
    waits: np.ndarray      # (B,) wait-m per example

    @property
    def size(self) -> int:
        return len(self.src_len)


def make_transduction_batch(pairs, waits, eos_id: int) -> TransductionBatch:
    """Pad (source, target) pairs; targets are used exactly as given."""
    B = len(pairs)
    src_len = np.array([len(x) for x, _ in pairs], dtype=np.int64)
    tgt_len = np.array([len(y) for _, y in pairs], dtype=np.int64)
    if B == 0 or src_len.min() < 1 or tgt_len.min() < 1:
        raise ValueError("batch needs non-empty source and target sequences")
    src = np.zeros((B, src_len.max() + 1), dtype=np.int64)
    tgt = np.zeros((B, tgt_len.max()), dtype=np.int64)
    for b, (x, y) in enumerate(pairs):
        src[b, :len(x)] = x
        src[b, len(x)] = eos_id
        tgt[b, :len(y)] = y
    waits = np.broadcast_to(np.asarray(waits, dtype=np.int64), (B,)).copy()
    if waits.min() < 1:
        raise ValueError(f"wait values must be >= 1, got {waits.min()}")
    return TransductionBatch(src, src_len, tgt, tgt_len, waits)


@dataclass
class DecodeResult:
    tokens: list[int]
    delays: list[int]      # g(t): source tokens read before emitting token t


class TransductionModel(_Module):
    def __init__(self, src_vocab: int, tgt_vocab: int, emb_dim: int = 32, hidden: int = 64, seed: int = 0):
        self.src_vocab, self.tgt_vocab = src_vocab, tgt_vocab
        self.emb_dim, self.hidden = emb_dim, hidden
        self.eos_id = tgt_vocab - 1
        self.src_eos = src_vocab - 1
        rng = np.random.default_rng(seed)
        H = hidden
        p = {
            "src_emb": ad.parameter((src_vocab, emb_dim), rng, fan_in=src_vocab),
            "tgt_emb": ad.parameter((tgt_vocab, emb_dim), rng, fan_in=tgt_vocab),
        }
        p.update(_gru_params(rng, "enc.", emb_dim, H))
        p.update({
            "enc.w_q": ad.parameter((H, H), rng), "enc.w_k": ad.parameter((H, H), rng),
            "enc.w_v": ad.parameter((H, H), rng),
        })
        p.update(_gru_params(rng, "dec.", emb_dim, H))
        p.update({
            "dec.w_q": ad.parameter((H, H), rng), "dec.w_k": ad.parameter((H, H), rng),
            "dec.w_v": ad.parameter((H, H), rng),
            "out.w_h": ad.parameter((2 * H, H), rng), "out.b_h": ad.parameter((H,), rng, fan_in=2 * H),
            "out.w": ad.parameter((H, tgt_vocab), rng), "out.b": ad.parameter((tgt_vocab,), rng, fan_in=H),
        })
        for k, v in p.items():
            v.name = k
        self.params = p

    def config(self) -> dict:
        return {"kind": "transduction", "src_vocab": self.src_vocab, "tgt_vocab": self.tgt_vocab,
                "emb_dim": self.emb_dim, "hidden": self.hidden}

    def _check_ids(self, ids, vocab: int, what: str) -> None:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= vocab):
            raise ValueError(f"{what} token id {int(ids.max())} outside vocabulary of size {vocab}")

    # -- batched, differentiable path (training / teacher-forced scoring) --

    def encode(self, src: np.ndarray) -> Tensor:
        p = self.params
        h0 = _run_gru(ad.take(p["src_emb"], src), p, "enc.")
        T = src.shape[1]
        causal = np.where(np.tril(np.ones((T, T), dtype=bool)), 0.0, MASK_BIAS)
        q = ad.matmul(h0, p["enc.w_q"])
        k = ad.matmul(h0, p["enc.w_k"])
        v = ad.matmul(h0, p["enc.w_v"])
        alpha = ad.softmax(ad.add(ad.matmul(q, ad.transpose(k, (0, 2, 1))), causal), axis=-1)
        return ad.add(h0, ad.matmul(alpha, v))

    def cross_mask(self, batch: TransductionBatch) -> np.ndarray:
        Ty, Tx1 = batch.tgt.shape[1], batch.src.shape[1]
        t = np.arange(1, Ty + 1)[None, :]
        vis = visible_source(t, batch.waits[:, None], batch.src_len[:, None])  # (B, Ty)
        return np.arange(Tx1)[None, None, :] < vis[:, :, None]

    def vocab_logprobs(self, batch: TransductionBatch) -> Tensor:
        """Log-distribution over the target vocabulary at every step, shape (B, Ty, V)."""
        self._check_ids(batch.src, self.src_vocab, "source")
        self._check_ids(batch.tgt, self.tgt_vocab, "target")
        p = self.params
        enc = self.encode(batch.src)
        B = batch.size
        dec_in = np.concatenate([np.full((B, 1), self.eos_id), batch.tgt[:, :-1]], axis=1)
        s = _run_gru(ad.take(p["tgt_emb"], dec_in), p, "dec.")
        q = ad.matmul(s, p["dec.w_q"])
        k = ad.matmul(enc, p["dec.w_k"])
        v = ad.matmul(enc, p["dec.w_v"])
        bias = np.where(self.cross_mask(batch), 0.0, MASK_BIAS)
        alpha = ad.softmax(ad.add(ad.matmul(q, ad.transpose(k, (0, 2, 1))), bias), axis=-1)
        ctx = ad.matmul(alpha, v)
        o = ad.tanh(ad.add(ad.matmul(ad.concat([s, ctx], axis=-1), p["out.w_h"]), p["out.b_h"]))
        logits = ad.add(ad.matmul(o, p["out.w"]), p["out.b"])
        return ad.log_softmax(logits, axis=-1)

    def token_logprobs(self, batch: TransductionBatch) -> Tensor:
        """Log-probability of every reference token, shape (B, Ty)."""
        return ad.pick(self.vocab_logprobs(batch), batch.tgt)

    def example_losses(self, batch: TransductionBatch) -> Tensor:
        """Per-example NLL summed over target tokens, shape (B,)."""
        lp = self.token_logprobs(batch)
        mask = np.arange(batch.tgt.shape[1])[None, :] < batch.tgt_len[:, None]
        return ad.neg(ad.sum_(ad.mul(lp, mask.astype(np.float64)), axis=1))

    # -- incremental, inference-only path ----------------------------------

    def encode_incremental(self, x, return_weights: bool = False):
        """Encoder states for ``x`` followed by EOS, one position at a time.

        Position t consumes only ``x[:t+1]``; every array touched while
        computing it has a shape that depends on t alone, so prefixes are
        bit-identical under extension of ``x``.
        """
        x = list(x)
        if not x:
            raise ValueError("encode_incremental: empty input")
        self._check_ids(x, self.src_vocab, "source")
        p = self.params
        wq, wk, wv = p["enc.w_q"].value, p["enc.w_k"].value, p["enc.w_v"].value
        emb = p["src_emb"].value
        h = np.zeros((1, self.hidden))
        keys, values, states, weights = [], [], [], []
        for tok in x + [self.src_eos]:
            h = _gru_cell(emb[tok][None, :], h, p, "enc.")
            keys.append((h @ wk)[0])
            values.append((h @ wv)[0])
            K, V = np.array(keys), np.array(values)
            scores = (K * (h @ wq)).sum(axis=1)
            alpha = np.exp(scores - scores.max())
            alpha = alpha / alpha.sum()
            states.append(h[0] + (alpha[:, None] * V).sum(axis=0))
            weights.append(alpha)
        H = np.array(states)
        return (H, weights) if return_weights else H

    def _decoder_step(self, tok: int, h: np.ndarray, enc: np.ndarray, visible: int):
        p = self.params
        h = _gru_cell(p["tgt_emb"].value[tok][None, :], h, p, "dec.")
        K = enc[:visible] @ p["dec.w_k"].value
        V = enc[:visible] @ p["dec.w_v"].value
        scores = (K * (h @ p["dec.w_q"].value)).sum(axis=1)
        alpha = np.exp(scores - scores.max())
        alpha /= alpha.sum()
        ctx = (alpha[:, None] * V).sum(axis=0)[None, :]
        o = np.tanh(np.concatenate([h, ctx], axis=1) @ p["out.w_h"].value + p["out.b_h"].value)
        logits = (o @ p["out.w"].value + p["out.b"].value)[0]
        z = logits - logits.max()
        return h, z - np.log(np.exp(z).sum())

    def decode_incremental(self, x, k: int, beam: int = 1) -> DecodeResult:
        """Wait-k decoding: greedy while the source is partial, beam search after."""
        if k < 1 or beam < 1:
            raise ValueError("k and beam must be >= 1")
        x = list(x)
        L = len(x)
        enc = self.encode_incremental(x)
        cap = 2 * L + 8
        h = np.zeros((1, self.hidden))
        prev = self.eos_id
        out: list[int] = []
        t = 1
        while t <= L - k and len(out) < cap:
            h, lp = self._decoder_step(prev, h, enc, t + k - 1)
            prev = int(np.argmax(lp))
            if prev == self.eos_id:
                return DecodeResult(out, _delays(len(out), k, L))
            out.append(prev)
            t += 1
        tokens = self._beam_search(enc, h, prev, out, beam, cap)
        return DecodeResult(tokens, _delays(len(tokens), k, L))

    def _beam_search(self, enc, h, prev, prefix, beam, cap):
        full = enc.shape[0]
        beams = [(0.0, list(prefix), h, prev)]
        finished: list[tuple[float, list[int]]] = []
        while beams and len(finished) < beam:
            candidates = []
            for score, toks, hh, last in beams:
                if len(toks) >= cap:
                    finished.append((score, toks))
                    continue
                h2, lp = self._decoder_step(last, hh, enc, full)
                for w in np.argsort(-lp, kind="stable")[:beam]:
                    candidates.append((score + lp[w], toks, h2, int(w)))
            if not candidates:
                break
            order = sorted(range(len(candidates)), key=lambda i: -candidates[i][0])[:beam]
            beams = []
            for i in order:
                score, toks, h2, w = candidates[i]
                if w == self.eos_id:
                    finished.append((score, toks))
                else:
                    beams.append((score, toks + [w], h2, w))
        if not finished:
            finished = [(s, t) for s, t, _, _ in beams]
        return max(finished, key=lambda f: f[0])[1]


def _delays(n: int, k: int, src_len: int) -> list[int]:
    return [min(t + k - 1, src_len) for t in range(1, n + 1)]


def waitk_loss(model: TransductionModel, x, y, m: int) -> Tensor:
    """Negative log-likelihood of ``y`` when target step t reads ``x[:t+m-1]``."""
    if m < 1:
        raise ValueError(f"wait value must be >= 1, got {m}")
    if len(y) == 0:
        raise ValueError("waitk_loss: empty target")
    batch = make_transduction_batch([(list(x), list(y))], [m], model.src_eos)
    return ad.sum_(model.example_losses(batch))


def encode_incremental(model: TransductionModel, x, return_weights: bool = False):
    """Encoder states of the content tokens of ``x`` (one row per token, no EOS row)."""
    H, weights = model.encode_incremental(x, return_weights=True)
    return (H[:-1], weights[:-1]) if return_weights else H[:-1]


def decode_incremental(model: TransductionModel, x, k: int, beam: int = 1) -> DecodeResult:
    return model.decode_incremental(x, k, beam)


# ---------------------------------------------------------------------------
# forecasting

@dataclass
class ForecastModel(_Module):
    n_features: int = 5
    window: int = 60
    hidden: int = 32
    layers: int = 2
    n_tasks: int = 1
    seed: int = 0
    params: dict = field(init=False, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        p = {}
        n_in = self.n_features
        for i in range(self.layers):
            p.update(_gru_params(rng, f"gru{i}.", n_in, self.hidden))
            n_in = self.hidden
        p["head.w"] = ad.parameter((self.hidden, self.n_tasks), rng)
        p["head.b"] = ad.parameter((self.n_tasks,), rng, fan_in=self.hidden)
        for k, v in p.items():
            v.name = k
        self.params = p

    def config(self) -> dict:
        return {"kind": "forecast", "n_features": self.n_features, "window": self.window,
                "hidden": self.hidden, "layers": self.layers, "n_tasks": self.n_tasks}

    def predict(self, windows) -> Tensor:
        """Predictions of every task head, shape (B, n_tasks)."""
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim != 3 or windows.shape[1:] != (self.window, self.n_features):
            raise ad.ShapeError(
                f"forecast windows must be (B, {self.window}, {self.n_features}), got {windows.shape}")
        h = Tensor(windows)
        for i in range(self.layers):
            h = _run_gru(h, self.params, f"gru{i}.")
        last = ad.index(h, (slice(None), -1))
        return ad.add(ad.matmul(last, self.params["head.w"]), self.params["head.b"])


def forecast(model: ForecastModel, window, task: int = 0) -> float:
    """Prediction of head ``task`` for a single (L, n_features) window."""
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (model.window, model.n_features):
        raise ad.ShapeError(f"window must be ({model.window}, {model.n_features}), got {window.shape}")
    if not np.all(np.isfinite(window)):
        raise ValueError("window contains non-finite values")
    with ad.no_grad():
        return float(model.predict(window[None])[0, task].item())
