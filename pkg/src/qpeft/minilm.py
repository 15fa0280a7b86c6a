"""Miniature pre-norm decoder-only language model (the frozen base model)."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import numcore as nc
from .numcore import Param, Tensor
from .textdata import BOS


class SequenceLengthError(ValueError):
    pass


@dataclass
class LMConfig:
    vocab_size: int
    model_dim: int = 32
    layers: int = 2
    heads: int = 2
    ffn_dim: int = 128
    max_seq_len: int = 256
    seed: int = 0
    emb_std: float = 0.1

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be >= 4")


class LMParams:
    """All base-model weights as named :class:`Param` objects."""

    def __init__(self, config: LMConfig, tensors: dict[str, Param]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Param:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    @property
    def tok_emb(self) -> Param:
        return self.tensors["tok_emb"]

    def freeze(self) -> "LMParams":
        for p in self.tensors.values():
            p.freeze()
        return self

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.tensors.items()}

    @classmethod
    def init(cls, config: LMConfig, dtype=np.float64) -> "LMParams":
        rng = nc.make_rng(config.seed, "lm-init")
        d, f, V = config.model_dim, config.ffn_dim, config.vocab_size
        std = 0.02
        resid_std = std / math.sqrt(2 * config.layers)

        def normal(shape, s):
            return rng.standard_normal(shape).astype(dtype) * s

        t: dict[str, np.ndarray] = {
            "tok_emb": normal((V, d), config.emb_std),
            "pos_emb": normal((config.max_seq_len, d), 0.02),
        }
        for i in range(config.layers):
            p = f"blocks.{i}."
            t[p + "ln1.g"] = np.ones((1, d), dtype)
            t[p + "ln1.b"] = np.zeros((1, d), dtype)
            t[p + "attn.wq"] = normal((d, d), 1 / math.sqrt(d))
            t[p + "attn.wk"] = normal((d, d), 1 / math.sqrt(d))
            t[p + "attn.wv"] = normal((d, d), 1 / math.sqrt(d))
            t[p + "attn.wo"] = normal((d, d), resid_std * 5)
            t[p + "attn.bo"] = np.zeros((1, d), dtype)
            t[p + "ln2.g"] = np.ones((1, d), dtype)
            t[p + "ln2.b"] = np.zeros((1, d), dtype)
            t[p + "ffn.w1"] = normal((d, f), 1 / math.sqrt(d))
            t[p + "ffn.b1"] = np.zeros((1, f), dtype)
            t[p + "ffn.w2"] = normal((f, d), resid_std * 5)
            t[p + "ffn.b2"] = np.zeros((1, d), dtype)
        t["lnf.g"] = np.ones((1, d), dtype)
        t["lnf.b"] = np.zeros((1, d), dtype)
        t["out.w"] = normal((d, V), 1 / math.sqrt(d))
        t["out.b"] = np.zeros((1, V), dtype)
        return cls(config, {k: Param(k, v) for k, v in t.items()})


def embed(params: LMParams, ids: Sequence[int]) -> Tensor:
    """Frozen token-embedding lookup, ``len(ids) x d``; no positions."""
    ids = np.asarray(list(ids), dtype=np.int64)
    if ids.size == 0:
        return Tensor(np.zeros((0, params.config.model_dim), dtype=params.tok_emb.data.dtype))
    return nc.take_rows(params.tok_emb, ids)


def _attention(x: Tensor, params: LMParams, prefix: str, heads: int, mask: np.ndarray) -> Tensor:
    B, T, d = x.shape
    dh = d // heads

    def split(h: Tensor) -> Tensor:
        return nc.transpose(nc.reshape(h, (B, T, heads, dh)), (0, 2, 1, 3))

    q = split(x @ params[prefix + "wq"])
    k = split(x @ params[prefix + "wk"])
    v = split(x @ params[prefix + "wv"])
    att = nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    att = nc.softmax(att, axis=-1, mask=mask)
    y = nc.matmul(att, v)
    y = nc.reshape(nc.transpose(y, (0, 2, 1, 3)), (B, T, d))
    return y @ params[prefix + "wo"] + params[prefix + "bo"]


def lm_forward(params: LMParams, input_embeds) -> Tensor:
    """Logits for a ``T x d`` or ``B x T x d`` input; causal, learned positions."""
    x = nc.as_tensor(input_embeds)
    squeeze = x.data.ndim == 2
    if squeeze:
        x = nc.reshape(x, (1,) + x.shape)
    B, T, d = x.shape
    cfg = params.config
    if T > cfg.max_seq_len:
        raise SequenceLengthError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    if d != cfg.model_dim:
        raise nc.DimensionError(f"input width {d} != model_dim {cfg.model_dim}")
    x = x + nc.take_rows(params["pos_emb"], np.arange(T))
    mask = np.tril(np.ones((T, T), dtype=bool))
    for i in range(cfg.layers):
        p = f"blocks.{i}."
        h = nc.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        x = x + _attention(h, params, p + "attn.", cfg.heads, mask)
        h = nc.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        h = nc.gelu(h @ params[p + "ffn.w1"] + params[p + "ffn.b1"])
        x = x + (h @ params[p + "ffn.w2"] + params[p + "ffn.b2"])
    x = nc.layer_norm(x, params["lnf.g"], params["lnf.b"])
    logits = x @ params["out.w"] + params["out.b"]
    return nc.reshape(logits, (T, cfg.vocab_size)) if squeeze else logits


def batch_loglik(
    params: LMParams,
    prefixes: Sequence[Tensor],
    targets: Sequence[Sequence[int]],
    mode: str = "sum",
) -> Tensor:
    """Conditional log-likelihoods of each target given its prefix, shape ``(B,)``.

    Sequences are right-padded to a common length; the causal mask keeps
    padding from influencing real positions.  An empty prefix is replaced by
    the BOS embedding so the first target token has a conditioning position.
    """
    if mode not in ("sum", "mean"):
        raise ValueError(f"unknown score mode {mode!r}")
    if len(prefixes) != len(targets):
        raise ValueError("prefixes and targets differ in length")
    cfg = params.config
    seqs, b_idx, t_idx, v_idx, seg = [], [], [], [], []
    for b, (pre, tgt) in enumerate(zip(prefixes, targets)):
        pre = nc.as_tensor(pre)
        tgt = list(tgt)
        if pre.shape[0] == 0:
            pre = embed(params, [BOS])
        P = pre.shape[0]
        if P + len(tgt) > cfg.max_seq_len:
            raise SequenceLengthError(f"prefix {P} + target {len(tgt)} exceeds max_seq_len {cfg.max_seq_len}")
        seqs.append(nc.concat([pre, embed(params, tgt[:-1])]) if len(tgt) > 1 else pre)
        for l, tok in enumerate(tgt):
            b_idx.append(b)
            t_idx.append(P - 1 + l)
            v_idx.append(tok)
            seg.append(b)
    if not b_idx:
        return Tensor(np.zeros(len(prefixes)))
    logp = nc.log_softmax(lm_forward(params, nc.pad_stack(seqs)), axis=-1)
    picked = nc.gather(logp, (np.array(b_idx), np.array(t_idx), np.array(v_idx)))
    total = nc.segment_sum(picked, seg, len(prefixes))
    if mode == "mean":
        n = np.array([max(len(t), 1) for t in targets], dtype=total.data.dtype)
        total = total * (1.0 / n)
    return total


def continuation_loglik(params: LMParams, prefix_embeds, target_ids: Sequence[int], mode: str = "sum") -> Tensor:
    """``sum_l log p(target_l | prefix, target_<l)`` as a scalar tensor."""
    if len(target_ids) == 0:
        return Tensor(np.zeros(()))
    return nc.reshape(batch_loglik(params, [prefix_embeds], [target_ids], mode), ())


# ---------------------------------------------------------------------------
# pretraining


def _doc_sequences(docs: Iterable[Sequence[int]], max_len: int) -> list[list[int]]:
    # BOS occupies one slot
    return [list(d)[: max_len - 1] for d in docs if len(d) > 0]


def pretrain_lm(
    docs: Iterable[Sequence[int]],
    config: LMConfig,
    steps: int,
    lr: float = 3e-3,
    batch_size: int = 8,
    seed: int | None = None,
    log_every: int = 0,
) -> LMParams:
    """Next-token cross-entropy on token sequences, then freeze.

    Every sequence is conditioned on a leading BOS.  Batches are drawn with a
    seeded generator; the returned parameters are frozen.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    params = LMParams.init(config)
    seqs = _doc_sequences(docs, config.max_seq_len)
    if steps and not seqs:
        raise ValueError("no non-empty sequences to pretrain on")
    rng = nc.make_rng(config.seed if seed is None else seed, "lm-batches")
    opt = nc.Adam(list(params), lr=lr)
    for step in range(steps):
        pick = rng.integers(len(seqs), size=batch_size)
        batch = [seqs[i] for i in pick]
        bos = [embed(params, [BOS]) for _ in batch]
        ll = batch_loglik(params, bos, batch)
        ntok = float(sum(len(s) for s in batch))
        loss = nc.sum(ll) * (-1.0 / ntok)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log_every and (step + 1) % log_every == 0:
            print(f"pretrain step {step + 1}: loss {loss.item():.4f}")
    return params.freeze()


def corpus_perplexity(params: LMParams, docs: Iterable[Sequence[int]], chunk: int = 32) -> float:
    seqs = _doc_sequences(docs, params.config.max_seq_len)
    total, ntok = 0.0, 0
    with nc.no_grad():
        for i in range(0, len(seqs), chunk):
            batch = seqs[i : i + chunk]
            ll = batch_loglik(params, [embed(params, [BOS]) for _ in batch], batch)
            total += float(ll.data.sum())
            ntok += sum(len(s) for s in batch)
    return math.exp(-total / ntok)


def unigram_perplexity(docs: Iterable[Sequence[int]]) -> float:
    """Perplexity of the maximum-likelihood unigram model on its own corpus."""
    counts: Counter[int] = Counter()
    for d in docs:
        counts.update(d)
    n = sum(counts.values())
    ll = sum(c * math.log(c / n) for c in counts.values())
    return math.exp(-ll / n)
