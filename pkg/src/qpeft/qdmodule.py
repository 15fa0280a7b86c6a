"""Query-dependent hint module: retrieval (R) and attention (A) variants."""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .minilm import LMParams
from .numcore import Param, Tensor


@dataclass
class QDConfig:
    variant: str = "A"
    k: int = 10
    heads: int = 2
    mlp_layers: int = 1
    model_dim: int = 32
    seed: int = 0
    match_scale: float = 4.0

    def __post_init__(self):
        self.variant = self.variant.upper()
        if self.variant not in ("R", "A"):
            raise ValueError(f"variant must be R or A, got {self.variant!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.model_dim % self.heads:
            raise ValueError("heads must divide model_dim")
        if self.mlp_layers not in (0, 1, 2):
            raise ValueError("mlp_layers must be 0, 1 or 2")


class QDParams:
    """Trainable hint-module weights; ``f_embed`` starts as a copy of the LM table."""

    def __init__(self, config: QDConfig, tensors: dict[str, Param]):
        self.config = config
        self.tensors = tensors
        # selection cache used by hold_selection
        self.held: dict | None = None

    def __getitem__(self, name: str) -> Param:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    @property
    def f_embed(self) -> Param:
        return self.tensors["f_embed"]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.tensors.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            self.tensors[k].data[...] = v

    @classmethod
    def init(cls, config: QDConfig, lm: LMParams) -> "QDParams":
        d = config.model_dim
        if lm.config.model_dim != d:
            raise ValueError("QD model_dim must match the LM")
        dtype = lm.tok_emb.data.dtype
        rng = nc.make_rng(config.seed, "qd-init")
        t: dict[str, np.ndarray] = {"f_embed": lm.tok_emb.data.copy()}
        if config.variant == "A":
            # scaled identity query/key maps start the attention as token
            # matching; a small seeded perturbation breaks the symmetry
            c = config.match_scale
            t["attn.wq"] = c * np.eye(d, dtype=dtype) + rng.standard_normal((d, d)).astype(dtype) * (0.01 / math.sqrt(d))
            t["attn.wk"] = c * np.eye(d, dtype=dtype) + rng.standard_normal((d, d)).astype(dtype) * (0.01 / math.sqrt(d))
            t["attn.wv"] = np.eye(d, dtype=dtype)
            t["attn.wo"] = np.eye(d, dtype=dtype)
        for i in range(config.mlp_layers):
            t[f"mlp.{i}.w"] = np.eye(d, dtype=dtype)
            t[f"mlp.{i}.b"] = np.zeros((1, d), dtype)
        return cls(config, {k: Param(k, v, trainable=True) for k, v in t.items()})


@contextmanager
def hold_selection(params: QDParams):
    """Freeze variant-R token selection at whatever it is first computed as.

    Inside the block each (query, document) pair reuses its first selection,
    so finite differences see the loss with the selection held fixed.
    """
    params.held = {}
    try:
        yield params
    finally:
        params.held = None


def mlp_apply(x, params: QDParams, layers: int | None = None) -> Tensor:
    """Shape-preserving MLP: affine layers with tanh between them, none after the last."""
    layers = params.config.mlp_layers if layers is None else layers
    x = nc.as_tensor(x)
    if x.shape[0] == 0:
        return x
    for i in range(layers):
        x = x @ params[f"mlp.{i}.w"] + params[f"mlp.{i}.b"]
        if i < layers - 1:
            x = nc.tanh(x)
    return x


def _unit_rows(m: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(m, axis=1, keepdims=True)
    return np.divide(m, n, out=np.zeros_like(m), where=n > 0)


def cosine_matrix(query_ids: Sequence[int], doc_ids: Sequence[int], params: QDParams, lm: LMParams) -> np.ndarray:
    """``|q| x |d|`` cosines between learnable query rows and frozen document rows."""
    q = params.f_embed.data[np.asarray(query_ids, dtype=np.int64)]
    d = lm.tok_emb.data[np.asarray(doc_ids, dtype=np.int64)]
    return _unit_rows(q) @ _unit_rows(d).T


def topk_unique(cos: np.ndarray, doc_ids: Sequence[int], k: int) -> list[int]:
    """Top-k distinct document token ids, each scored by its best cosine."""
    doc_ids = np.asarray(doc_ids, dtype=np.int64)
    if cos.shape[1] != doc_ids.size:
        raise nc.DimensionError("cosine matrix width does not match document length")
    if doc_ids.size == 0 or cos.shape[0] == 0:
        return []
    # cosines closer than 1e-12 count as tied so the id tie-break decides
    col_best = np.round(cos.max(axis=0), 12)
    uniq, inv = np.unique(doc_ids, return_inverse=True)
    best = np.full(uniq.size, -np.inf)
    np.maximum.at(best, inv, col_best)
    # uniq is ascending, so a stable sort on -score breaks ties by ascending id
    order = np.argsort(-best, kind="stable")
    return uniq[order[:k]].tolist()


def qd_r_hint(query_ids, doc_ids, params: QDParams, lm: LMParams) -> Tensor:
    cfg = params.config
    d = cfg.model_dim
    if len(doc_ids) == 0 or len(query_ids) == 0:
        return Tensor(np.zeros((0, d), dtype=params.f_embed.data.dtype))
    key = (tuple(query_ids), tuple(doc_ids))
    if params.held is not None and key in params.held:
        sel = list(params.held[key])
    else:
        sel = topk_unique(cosine_matrix(query_ids, doc_ids, params, lm), doc_ids, cfg.k)
        if params.held is not None:
            params.held[key] = tuple(sel)
    # rows follow document order; score order would flip on exact cosine ties
    first = {}
    for i, t in enumerate(doc_ids):
        first.setdefault(int(t), i)
    sel.sort(key=first.__getitem__)
    return mlp_apply(nc.take_rows(params.f_embed, sel), params)


def qd_a_hint(query_ids, doc_ids, params: QDParams, lm: LMParams) -> Tensor:
    """Cross-attention from query tokens (learnable rows) onto document tokens."""
    cfg = params.config
    if len(doc_ids) == 0:
        raise ValueError("attention hint needs a non-empty document")
    d, h = cfg.model_dim, cfg.heads
    dh = d // h
    nq, nd = len(query_ids), len(doc_ids)
    qe = nc.take_rows(params.f_embed, query_ids)
    de = nc.take_rows(lm.tok_emb, doc_ids)
    q = nc.transpose(nc.reshape(qe @ params["attn.wq"], (nq, h, dh)), (1, 0, 2))
    k = nc.transpose(nc.reshape(de @ params["attn.wk"], (nd, h, dh)), (1, 2, 0))
    v = nc.transpose(nc.reshape(de @ params["attn.wv"], (nd, h, dh)), (1, 0, 2))
    att = nc.softmax(nc.matmul(q, k) * (1.0 / math.sqrt(dh)), axis=-1)
    y = nc.reshape(nc.transpose(nc.matmul(att, v), (1, 0, 2)), (nq, d))
    return mlp_apply(y @ params["attn.wo"], params)


def make_hint(query_ids, doc_ids, params: QDParams, lm: LMParams) -> Tensor:
    if params.config.variant == "R":
        return qd_r_hint(query_ids, doc_ids, params, lm)
    return qd_a_hint(query_ids, doc_ids, params, lm)
