"""Tiny decoder-only transformer LM with greedy decoding and top-k sampling."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad

MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 64
    context_len: int = 128
    mlp_ratio: int = 4
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("vocab_size", "n_layers", "n_heads", "d_model", "context_len", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")


class LanguageModel:
    """GPT-2 style pre-norm decoder with learned positions and tied embeddings."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        d, std = config.d_model, config.init_std
        hidden = config.mlp_ratio * d

        def normal(*shape):
            return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

        def const(value, n):
            return Tensor(np.full(n, value), requires_grad=True)

        p = {"wte": normal(config.vocab_size, d), "wpe": normal(config.context_len, d)}
        for i in range(config.n_layers):
            p[f"h{i}.ln1_g"], p[f"h{i}.ln1_b"] = const(1.0, d), const(0.0, d)
            for w in "qkvo":
                p[f"h{i}.w{w}"], p[f"h{i}.b{w}"] = normal(d, d), const(0.0, d)
            p[f"h{i}.ln2_g"], p[f"h{i}.ln2_b"] = const(1.0, d), const(0.0, d)
            p[f"h{i}.w1"], p[f"h{i}.b1"] = normal(d, hidden), const(0.0, hidden)
            p[f"h{i}.w2"], p[f"h{i}.b2"] = normal(hidden, d), const(0.0, d)
        p["lnf_g"], p["lnf_b"] = const(1.0, d), const(0.0, d)
        self.params: dict[str, Tensor] = p
        self._masks: dict[int, np.ndarray] = {}

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    @property
    def context_len(self) -> int:
        return self.config.context_len

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise KeyError(f"state keys differ: {sorted(set(state) ^ set(self.params))}")
        for k, t in self.params.items():
            if state[k].shape != t.shape:
                raise ValueError(f"{k}: checkpoint shape {state[k].shape} vs {t.shape}")
            t.data = np.array(state[k], dtype=np.float64)

    def copy(self) -> "LanguageModel":
        other = LanguageModel.__new__(LanguageModel)
        other.config = self.config
        other.params = {k: Tensor(t.data.copy(), requires_grad=True) for k, t in self.params.items()}
        other._masks = {}
        return other

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, t in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def _causal(self, n: int) -> np.ndarray:
        if n not in self._masks:
            self._masks[n] = np.triu(np.ones((n, n), dtype=bool), k=1)
        return self._masks[n]

    def _check_ids(self, ids: np.ndarray) -> None:
        if ids.ndim != 2 or ids.shape[1] < 1:
            raise ValueError(f"expected a (batch, length) id array, got shape {ids.shape}")
        if ids.shape[1] > self.config.context_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds context_len {self.config.context_len}")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise ValueError(f"token id out of vocabulary range [0, {self.config.vocab_size})")

    def forward(self, ids) -> Tensor:
        """Logits of shape (batch, length, vocab) for right-padded ``ids``."""
        ids = np.asarray(ids, dtype=np.int64)
        self._check_ids(ids)
        cfg, p = self.config, self.params
        B, L = ids.shape
        H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        x = ad.add(ad.embedding_gather(p["wte"], ids), ad.embedding_gather(p["wpe"], np.arange(L)))
        mask = self._causal(L)
        scale = 1.0 / math.sqrt(dh)
        for i in range(cfg.n_layers):
            h = ad.layernorm(x, p[f"h{i}.ln1_g"], p[f"h{i}.ln1_b"])

            def heads(w):
                y = ad.add(ad.matmul(h, p[f"h{i}.w{w}"]), p[f"h{i}.b{w}"])
                return ad.transpose(ad.reshape(y, (B, L, H, dh)), (0, 2, 1, 3))

            q, k, v = heads("q"), heads("k"), heads("v")
            att = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), scale)
            att = ad.softmax(ad.masked_fill(att, mask, MASK_VALUE))
            y = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, L, cfg.d_model))
            x = ad.add(x, ad.add(ad.matmul(y, p[f"h{i}.wo"]), p[f"h{i}.bo"]))
            h = ad.layernorm(x, p[f"h{i}.ln2_g"], p[f"h{i}.ln2_b"])
            h = ad.gelu(ad.add(ad.matmul(h, p[f"h{i}.w1"]), p[f"h{i}.b1"]))
            x = ad.add(x, ad.add(ad.matmul(h, p[f"h{i}.w2"]), p[f"h{i}.b2"]))
        x = ad.layernorm(x, p["lnf_g"], p["lnf_b"])
        return ad.matmul(x, ad.transpose(p["wte"], (1, 0)))

    def logits_numpy(self, ids) -> np.ndarray:
        with no_grad():
            return self.forward(ids).data

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        meta = dict(meta or {})
        meta["model_config"] = asdict(self.config)
        ad.save_arrays(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path: str | Path) -> tuple["LanguageModel", dict]:
        arrays, meta = ad.load_arrays(path)
        model = cls(ModelConfig(**meta["model_config"]))
        model.load_state_dict(arrays)
        return model, meta


class LogitTableModel:
    """Hand-built model whose next-token logits come from a Python function.

    ``fn(prefix)`` receives the tuple of tokens seen so far and returns a
    logit vector of length ``vocab_size``. Useful as a constructed teacher.
    """

    def __init__(self, vocab_size: int, fn: Callable[[tuple[int, ...]], Sequence[float]],
                 context_len: int = 128):
        self.vocab_size = vocab_size
        self.context_len = context_len
        self.fn = fn

    def logits_numpy(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        out = np.empty(ids.shape + (self.vocab_size,))
        for b in range(ids.shape[0]):
            for t in range(ids.shape[1]):
                out[b, t] = self.fn(tuple(int(i) for i in ids[b, :t + 1]))
        return out

    def checksum(self) -> str:
        return f"table:{id(self.fn)}"


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = 0) -> np.ndarray:
    L = max(len(s) for s in seqs)
    out = np.full((len(seqs), L), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def forward_logits(model, tokens: Sequence[int]) -> np.ndarray:
    """Logits matrix (len(tokens), vocab); row t scores the token after position t."""
    tokens = list(tokens)
    if not tokens:
        raise ValueError("empty token sequence")
    return model.logits_numpy(np.asarray([tokens], dtype=np.int64))[0]


def log_probs_with_temperature(logits, tau: float) -> np.ndarray:
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class Decoded:
    tokens: tuple[int, ...]
    truncated: bool


def _next_rows(model, seqs: list[list[int]], active: list[int], pad_id: int) -> np.ndarray:
    batch = [seqs[i] for i in active]
    logits = model.logits_numpy(pad_batch(batch, pad_id))
    rows = logits[np.arange(len(batch)), [len(s) - 1 for s in batch]].copy()
    rows[:, pad_id] = -np.inf
    return rows


def _np_layernorm(x, g, b, eps: float = 1e-5):
    xc = x - x.mean(axis=-1, keepdims=True)
    return xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps) * g + b


def _np_gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * x * (1.0 + 0.044715 * x * x)))


def _np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class _CachedDecoder:
    """No-grad inference that keeps every layer's keys and values, so each
    decoding step only runs the newly appended token through the network."""

    def __init__(self, model: LanguageModel, seqs: list[list[int]], room: int):
        cfg = model.config
        self.p = {k: t.data for k, t in model.params.items()}
        self.H, self.dh, self.n_layers = cfg.n_heads, cfg.d_model // cfg.n_heads, cfg.n_layers
        self.scale = 1.0 / math.sqrt(self.dh)
        ids = pad_batch(seqs, 0)
        B, L = ids.shape
        width = min(cfg.context_len, L + room)
        self.k = np.zeros((cfg.n_layers, B, self.H, width, self.dh))
        self.v = np.zeros_like(self.k)
        self.lengths = np.array([len(s) for s in seqs])
        p = self.p
        x = p["wte"][ids] + p["wpe"][np.arange(L)]
        mask = np.triu(np.ones((L, L), dtype=bool), k=1)
        for i in range(self.n_layers):
            h = _np_layernorm(x, p[f"h{i}.ln1_g"], p[f"h{i}.ln1_b"])
            q, k, v = (self._heads(h, i, w).reshape(B, L, self.H, self.dh).transpose(0, 2, 1, 3)
                       for w in "qkv")
            self.k[i, :, :, :L], self.v[i, :, :, :L] = k, v
            att = _np_softmax(np.where(mask, MASK_VALUE, (q @ k.transpose(0, 1, 3, 2)) * self.scale))
            y = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, -1)
            x = self._mlp(x + y @ p[f"h{i}.wo"] + p[f"h{i}.bo"], i)
        last = x[np.arange(B), self.lengths - 1]
        self.logits = self._out(last)

    def _heads(self, h, i, w):
        return h @ self.p[f"h{i}.w{w}"] + self.p[f"h{i}.b{w}"]

    def _mlp(self, x, i):
        p = self.p
        h = _np_layernorm(x, p[f"h{i}.ln2_g"], p[f"h{i}.ln2_b"])
        return x + _np_gelu(h @ p[f"h{i}.w1"] + p[f"h{i}.b1"]) @ p[f"h{i}.w2"] + p[f"h{i}.b2"]

    def _out(self, x):
        return _np_layernorm(x, self.p["lnf_g"], self.p["lnf_b"]) @ self.p["wte"].T

    def step(self, rows: np.ndarray, tokens: np.ndarray) -> np.ndarray:
        """Append ``tokens`` to ``rows``; returns those rows' next-token logits."""
        p, n = self.p, len(rows)
        pos = self.lengths[rows]
        x = p["wte"][tokens] + p["wpe"][pos]
        future = np.arange(self.k.shape[3])[None, None, :] > pos[:, None, None]
        for i in range(self.n_layers):
            h = _np_layernorm(x, p[f"h{i}.ln1_g"], p[f"h{i}.ln1_b"])
            q, k, v = (self._heads(h, i, w).reshape(n, self.H, self.dh) for w in "qkv")
            self.k[i, rows, :, pos], self.v[i, rows, :, pos] = k, v
            keys, vals = self.k[i, rows], self.v[i, rows]
            att = np.einsum("nhd,nhld->nhl", q, keys) * self.scale
            att = _np_softmax(np.where(future, MASK_VALUE, att))
            y = np.einsum("nhl,nhld->nhd", att, vals).reshape(n, -1)
            x = self._mlp(x + y @ p[f"h{i}.wo"] + p[f"h{i}.bo"], i)
        self.lengths[rows] += 1
        return self._out(x)


def _decode(model, prefixes, stop_token, max_len, pad_id, pick) -> list[Decoded]:
    seqs = [list(p) for p in prefixes]
    for p in seqs:
        if not p:
            raise ValueError("empty prefix")
        if len(p) > model.context_len:
            raise ValueError(f"prefix length {len(p)} exceeds context_len {model.context_len}")
    budget = [min(max_len, model.context_len - len(p)) for p in seqs]
    out: list[list[int]] = [[] for _ in seqs]
    done = [b <= 0 for b in budget]
    stopped = [False] * len(seqs)
    if isinstance(model, LanguageModel):
        return _decode_cached(model, seqs, budget, done, stop_token, pad_id, pick)
    while not all(done):
        active = [i for i, d in enumerate(done) if not d]
        choice = pick(_next_rows(model, seqs, active, pad_id))
        for i, tok in zip(active, choice):
            tok = int(tok)
            if tok == stop_token:
                done[i] = stopped[i] = True
                continue
            out[i].append(tok)
            seqs[i].append(tok)
            if len(out[i]) >= budget[i]:
                done[i] = True
    return [Decoded(tuple(o), not s) for o, s in zip(out, stopped)]


def greedy_decode_batch(model, prefixes, stop_token: int, max_len: int,
                        pad_id: int = 0) -> list[Decoded]:
    # np.argmax returns the first maximum, i.e. the lowest token id on ties
    return _decode(model, prefixes, stop_token, max_len, pad_id, lambda rows: rows.argmax(axis=1))


def greedy_decode(model, prefix, stop_token: int, max_len: int, pad_id: int = 0) -> Decoded:
    """Append argmax tokens until ``stop_token`` or ``max_len``; returns the continuation."""
    return greedy_decode_batch(model, [prefix], stop_token, max_len, pad_id)[0]


def _top_k_picker(k: int, rng: np.random.Generator):
    def pick(rows: np.ndarray) -> np.ndarray:
        n_cand = int(np.isfinite(rows).sum(axis=1).min())
        kk = min(k, n_cand)
        # stable sort keeps lowest ids first among equal logits
        top = np.argsort(-rows, axis=1, kind="stable")[:, :kk]
        z = np.take_along_axis(rows, top, axis=1)
        z = np.exp(z - z[:, :1])
        cdf = np.cumsum(z / z.sum(axis=1, keepdims=True), axis=1)
        u = rng.random(len(rows))
        idx = np.minimum((cdf < u[:, None]).sum(axis=1), kk - 1)
        return top[np.arange(len(rows)), idx]
    return pick


def top_k_sample_batch(model, prefixes, k: int, rng: np.random.Generator, stop_token: int,
                       max_len: int, pad_id: int = 0) -> list[Decoded]:
    if not 1 <= k <= model.vocab_size:
        raise ValueError(f"k={k} outside [1, {model.vocab_size}]")
    return _decode(model, prefixes, stop_token, max_len, pad_id, _top_k_picker(k, rng))


def top_k_sample(model, prefix, k: int, rng: np.random.Generator, stop_token: int,
                 max_len: int, pad_id: int = 0) -> Decoded:
    """Sample from the renormalized top-``k`` softmax at every step."""
    return top_k_sample_batch(model, [prefix], k, rng, stop_token, max_len, pad_id)[0]


def _decode_cached(model, seqs, budget, done, stop_token, pad_id, pick) -> list[Decoded]:
    out: list[list[int]] = [[] for _ in seqs]
    stopped = [False] * len(seqs)
    if all(done):
        return [Decoded((), True) for _ in seqs]
    dec = _CachedDecoder(model, seqs, max(budget))
    rows = np.array([i for i, d in enumerate(done) if not d])
    logits = dec.logits[rows]
    while len(rows):
        logits[:, pad_id] = -np.inf
        choice = pick(logits)
        keep = []
        for j, (i, tok) in enumerate(zip(rows, choice)):
            tok = int(tok)
            if tok == stop_token:
                stopped[i] = True
                continue
            out[i].append(tok)
            if len(out[i]) < budget[i]:
                keep.append(j)
        if not keep:
            break
        rows, toks = rows[keep], choice[keep]
        logits = dec.step(rows, toks)
    return [Decoded(tuple(o), not s) for o, s in zip(out, stopped)]
