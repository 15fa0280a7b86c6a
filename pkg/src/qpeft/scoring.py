"""Prompt presets, prefix assembly and batched query-likelihood scoring.

Shared by the trainer (losses) and by evaluation (reranking), so that
training and inference score a (query, document) pair through exactly the
same code path.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from .minilm import LMParams, batch_loglik, embed
from .numcore import Tensor
from .qdmodule import QDParams, make_hint
from .textdata import Vocab, tokenize

PROMPT_PRESETS: dict[str, str] = {
    "p1": "please generate a question for the input passage",
    "p2": "please generate a Question for the input Passage",
    "p3": "what is the question for the input passage",
    "p4": "given the hints, please generate a question for the input passage",
    "p5": "please generate a question for the input passage based on the hints",
}
DEFAULT_PROMPT = "p4"


@dataclass(frozen=True)
class PromptPreset:
    id: str
    text: str

    @classmethod
    def get(cls, preset_id: str = DEFAULT_PROMPT) -> "PromptPreset":
        if preset_id not in PROMPT_PRESETS:
            raise KeyError(f"unknown prompt preset {preset_id!r}")
        return cls(preset_id, PROMPT_PRESETS[preset_id])

    def ids(self, vocab: Vocab) -> list[int]:
        return tokenize(self.text, vocab)


@dataclass
class OverflowCounter:
    truncated: int = 0


def assemble_input(
    doc_ids: Sequence[int],
    hint: Tensor | None,
    prompt_ids: Sequence[int],
    lm: LMParams,
    query_len: int = 0,
    lead: Tensor | None = None,
    counter: OverflowCounter | None = None,
) -> Tensor:
    """Prefix ``[lead ; doc ; hint ; prompt]`` for scoring a query of ``query_len`` tokens.

    ``lead`` carries an optional in-context exemplar block.  When the whole
    sequence would exceed ``max_seq_len`` the document is cut from its tail.
    """
    d = lm.config.model_dim
    n_lead = 0 if lead is None else lead.shape[0]
    n_hint = 0 if hint is None else hint.shape[0]
    budget = lm.config.max_seq_len - n_lead - n_hint - len(prompt_ids) - query_len
    if budget < 0:
        raise ValueError("hint, prompt and query alone exceed max_seq_len")
    doc_ids = list(doc_ids)
    if len(doc_ids) > budget:
        doc_ids = doc_ids[:budget]
        if counter is not None:
            counter.truncated += 1
    parts = [] if lead is None else [lead]
    parts.append(embed(lm, doc_ids))
    if n_hint:
        parts.append(hint)
    parts.append(embed(lm, prompt_ids))
    parts = [p for p in parts if p.shape[0]]
    if not parts:
        return Tensor(np.zeros((0, d), dtype=lm.tok_emb.data.dtype))
    return nc.concat(parts) if len(parts) > 1 else parts[0]


@dataclass
class Scorer:
    """Computes ``I(q | d, s)`` with an optional hint module.

    ``qd=None`` is the UPR scorer (empty hint).  ``exemplar`` is an optional
    ``(query_ids, doc_ids)`` pair placed in front as ``[d* ; prompt ; q*]``.
    """

    lm: LMParams
    prompt_ids: list[int]
    qd: QDParams | None = None
    mode: str = "sum"
    exemplar: tuple[Sequence[int], Sequence[int]] | None = None
    chunk: int = 64
    overflow: OverflowCounter = field(default_factory=OverflowCounter)

    def _lead(self) -> Tensor | None:
        if self.exemplar is None:
            return None
        q_star, d_star = self.exemplar
        return embed(self.lm, list(d_star) + list(self.prompt_ids) + list(q_star))

    def hint(self, query_ids, doc_ids) -> Tensor | None:
        if self.qd is None:
            return None
        return make_hint(query_ids, doc_ids, self.qd, self.lm)

    def prefix(self, query_ids, doc_ids) -> Tensor:
        return assemble_input(
            doc_ids,
            self.hint(query_ids, doc_ids),
            self.prompt_ids,
            self.lm,
            query_len=len(query_ids),
            lead=self._lead(),
            counter=self.overflow,
        )

    def score_pairs(self, pairs: Sequence[tuple[Sequence[int], Sequence[int]]]) -> Tensor:
        """Differentiable scores for ``(query_ids, doc_ids)`` pairs, shape ``(B,)``."""
        prefixes = [self.prefix(q, d) for q, d in pairs]
        return batch_loglik(self.lm, prefixes, [q for q, _ in pairs], self.mode)

    def score_many(self, pairs: Sequence[tuple[Sequence[int], Sequence[int]]]) -> np.ndarray:
        out = np.empty(len(pairs))
        with nc.no_grad():
            for i in range(0, len(pairs), self.chunk):
                out[i : i + self.chunk] = self.score_pairs(pairs[i : i + self.chunk]).data
        return out

    def score(self, query_ids, doc_ids) -> float:
        return float(self.score_many([(query_ids, doc_ids)])[0])
