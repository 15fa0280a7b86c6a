"""Query-likelihood reranking, Recall@k / Hit@k, paired t-tests and reports."""
from __future__ import annotations

import csv
import io
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import betainc

from . import numcore as nc
from .bm25 import Run, sort_run_entries
from .minilm import LMParams, batch_loglik
from .numcore import Tensor
from .qdmodule import QDParams
from .scoring import DEFAULT_PROMPT, PROMPT_PRESETS, PromptPreset, Scorer, assemble_input  # noqa: F401
from .textdata import Document, relevant_ids

log = logging.getLogger(__name__)

ScoreFn = Callable[[str, Sequence[str]], Sequence[float]]


def score_qpeft(query_ids, doc_ids, lm: LMParams, qd: QDParams | None, prompt_ids, mode: str = "sum", hint: Tensor | None = None) -> float:
    """``I(q | d, s)`` with the hint built by ``qd`` (or the given ``hint``)."""
    with nc.no_grad():
        if hint is None:
            return Scorer(lm, list(prompt_ids), qd, mode).score(query_ids, doc_ids)
        prefix = assemble_input(doc_ids, hint, prompt_ids, lm, query_len=len(query_ids))
        return float(batch_loglik(lm, [prefix], [query_ids], mode).data[0])


def score_upr(query_ids, doc_ids, lm: LMParams, prompt_ids, mode: str = "sum", exemplar=None) -> float:
    with nc.no_grad():
        return Scorer(lm, list(prompt_ids), None, mode, exemplar=exemplar).score(query_ids, doc_ids)


def rerank(candidates: Run, score_fn: ScoreFn, depth: int | None = None) -> Run:
    """Rescore the top ``depth`` candidates of every query and reorder them.

    Candidates below the depth keep their first-stage order underneath the
    reranked block; their scores are rewritten to continue strictly below it.
    """
    out: Run = {}
    for qid, entries in candidates.items():
        entries = list(entries)
        k = len(entries) if depth is None else min(depth, len(entries))
        if k == 0:
            out[qid] = []
            continue
        head = [doc for doc, _ in entries[:k]]
        scores = np.asarray(score_fn(qid, head), dtype=float)
        block = sort_run_entries(zip(head, scores.tolist()))
        floor = block[-1][1]
        tail = [(doc, floor - (i + 1)) for i, (doc, _) in enumerate(entries[k:])]
        out[qid] = block + tail
    return out


def rerank_queries(candidates: Run, query_ids: Sequence[str], score_fn: ScoreFn, depth: int | None = None) -> tuple[Run, int]:
    """Rerank the listed queries; those absent from ``candidates`` are skipped and counted."""
    present = {q: candidates[q] for q in query_ids if q in candidates}
    missing = len(query_ids) - len(present)
    if missing:
        log.warning("%d queries missing from the candidate run were skipped", missing)
    return rerank(present, score_fn, depth), missing


# ---------------------------------------------------------------------------
# metrics


def recall_at_k(run: Run, qrels: Mapping[str, Mapping[str, int]], k: int) -> tuple[dict[str, float], float, int]:
    """Per-query recall, macro mean, and the number of queries without relevant docs."""
    per: dict[str, float] = {}
    excluded = 0
    for qid in sorted(run):
        rel = relevant_ids(qrels, qid)
        if not rel:
            excluded += 1
            continue
        top = {d for d, _ in run[qid][: max(k, 0)]}
        per[qid] = len(rel & top) / len(rel)
    macro = math.fsum(per.values()) / len(per) if per else 0.0
    return per, macro, excluded


def contains_span(text: str, answer: str) -> bool:
    """Case-insensitive match of ``answer`` at token boundaries."""
    ans = answer.strip().lower()
    if not ans:
        return False
    return re.search(r"(?<!\w)" + re.escape(ans) + r"(?!\w)", text.lower()) is not None


def hit_at_k(
    run: Run,
    answers: Mapping[str, Sequence[str]] | None,
    corpus: Mapping[str, Document],
    k: int,
    qrels: Mapping[str, Mapping[str, int]] | None = None,
) -> tuple[dict[str, float], float, int, bool]:
    """Answer-span Hit@k; falls back to qrels membership when no answers are given.

    Returns per-query values, macro mean, excluded count and the fallback flag.
    """
    fallback = not answers
    if fallback and qrels is None:
        raise ValueError("hit_at_k needs answers or qrels")
    per: dict[str, float] = {}
    excluded = 0
    for qid in sorted(run):
        top = [d for d, _ in run[qid][: max(k, 0)]]
        if fallback:
            rel = relevant_ids(qrels, qid)
            if not rel:
                excluded += 1
                continue
            per[qid] = float(any(d in rel for d in top))
            continue
        ans = answers.get(qid)
        if not ans:
            excluded += 1
            continue
        per[qid] = float(any(contains_span(corpus[d].full_text, a) for d in top for a in ans))
    macro = math.fsum(per.values()) / len(per) if per else 0.0
    return per, macro, excluded, fallback


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided paired t-test; returns ``(t, p)``.

    Zero-variance differences give ``p = 1`` when their mean is zero and
    ``p = 0`` otherwise.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    diff = a - b
    m = diff.mean()
    sd = diff.std(ddof=1)
    if sd == 0.0:
        if m == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, m), 0.0
    t = m / (sd / math.sqrt(n))
    df = n - 1
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return float(t), min(1.0, p)


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class ReportRow:
    system: str
    metric: str
    k: int
    value: float
    p_vs_retriever: float | None
    p_vs_upr: float | None


@dataclass
class EvalReport:
    rows: list[ReportRow]
    per_query: dict[tuple[str, str, int], dict[str, float]] = field(default_factory=dict, compare=False)
    retriever: str = "retriever"

    def value(self, system: str, metric: str, k: int) -> float:
        for r in self.rows:
            if (r.system, r.metric, r.k) == (system, metric, k):
                return r.value
        raise KeyError((system, metric, k))

    def improvement(self, system: str, metric: str, k: int) -> float:
        """Relative improvement over the retriever, in percent."""
        base = self.value(self.retriever, metric, k)
        if base == 0:
            return math.nan
        return (self.value(system, metric, k) - base) / base * 100.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["system", "metric", "k", "value", "p_vs_retriever", "p_vs_upr"])
        for r in self.rows:
            w.writerow([
                r.system,
                r.metric,
                r.k,
                repr(r.value),
                "" if r.p_vs_retriever is None else repr(r.p_vs_retriever),
                "" if r.p_vs_upr is None else repr(r.p_vs_upr),
            ])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, retriever: str = "retriever") -> "EvalReport":
        rows = []
        for x in csv.DictReader(io.StringIO(text)):
            rows.append(ReportRow(
                x["system"],
                x["metric"],
                int(x["k"]),
                float(x["value"]),
                float(x["p_vs_retriever"]) if x["p_vs_retriever"] else None,
                float(x["p_vs_upr"]) if x["p_vs_upr"] else None,
            ))
        return cls(rows, retriever=retriever)


def _aligned(per_a: Mapping[str, float], per_b: Mapping[str, float]) -> tuple[list[float], list[float]]:
    keys = sorted(set(per_a) & set(per_b))
    return [per_a[q] for q in keys], [per_b[q] for q in keys]


def report(
    baseline: Run,
    systems: Mapping[str, Run],
    qrels: Mapping[str, Mapping[str, int]],
    answers: Mapping[str, Sequence[str]] | None,
    corpus: Mapping[str, Document],
    ks: Sequence[int] = (10,),
    retriever: str = "retriever",
    upr: str = "upr",
) -> EvalReport:
    """Metrics for the retriever and each system, with paired p-values.

    p-values are computed against the retriever and against the system named
    ``upr`` when present; a system compared with itself gets ``p = 1``.
    """
    all_runs = {retriever: baseline, **systems}
    per: dict[tuple[str, str, int], dict[str, float]] = {}
    for name, run in all_runs.items():
        for k in ks:
            per[(name, "R", k)] = recall_at_k(run, qrels, k)[0]
            per[(name, "H", k)] = hit_at_k(run, answers, corpus, k, qrels)[0]
    rows = []
    for name in all_runs:
        for metric in ("R", "H"):
            for k in ks:
                vals = per[(name, metric, k)]
                value = math.fsum(vals.values()) / len(vals) if vals else 0.0

                def pval(other: str) -> float | None:
                    if other not in all_runs:
                        return None
                    a, b = _aligned(vals, per[(other, metric, k)])
                    return paired_ttest(a, b)[1] if len(a) >= 2 else None

                rows.append(ReportRow(name, metric, k, value, pval(retriever), pval(upr)))
    return EvalReport(rows, per, retriever)
