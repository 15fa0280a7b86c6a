"""Okapi BM25 first-stage retrieval and TREC-style run files."""
from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

from .textdata import UNK, Document, DataFormatError

Run = dict[str, list[tuple[str, float]]]


@dataclass
class InvertedIndex:
    postings: dict[int, list[tuple[str, int]]]
    doc_len: dict[str, int]
    avgdl: float
    N: int

    def df(self, token: int) -> int:
        return len(self.postings.get(token, ()))


def build_index(corpus: Iterable[Document]) -> InvertedIndex:
    """Index over ``title + text`` token ids; UNK is not indexed."""
    docs = sorted(corpus, key=lambda d: d.doc_id)
    if not docs:
        raise ValueError("cannot index an empty corpus")
    postings: dict[int, list[tuple[str, int]]] = defaultdict(list)
    doc_len = {}
    for d in docs:
        doc_len[d.doc_id] = len(d.token_ids)
        for tok, tf in sorted(Counter(d.token_ids).items()):
            if tok != UNK:
                postings[tok].append((d.doc_id, tf))
    avgdl = sum(doc_len.values()) / len(docs)
    if avgdl <= 0:
        raise ValueError("corpus has no tokens")
    return InvertedIndex(dict(postings), doc_len, avgdl, len(docs))


def idf(df: int, N: int) -> float:
    return math.log(1.0 + (N - df + 0.5) / (df + 0.5))


def bm25_score(query_ids: Sequence[int], doc: Document, index: InvertedIndex, k1: float = 1.2, b: float = 0.75) -> float:
    tf = Counter(doc.token_ids)
    dl = len(doc.token_ids)
    norm = k1 * (1 - b + b * dl / index.avgdl)
    score = 0.0
    for t in query_ids:
        f = tf.get(t, 0)
        if t == UNK or f == 0:
            continue
        score += idf(index.df(t), index.N) * f * (k1 + 1) / (f + norm)
    return score


def sort_run_entries(entries: Iterable[tuple[str, float]]) -> list[tuple[str, float]]:
    return sorted(entries, key=lambda e: (-e[1], e[0]))


def search(query_ids: Sequence[int], index: InvertedIndex, K: int, k1: float = 1.2, b: float = 0.75) -> list[tuple[str, float]]:
    """Exact top-K over the union of the query terms' postings."""
    if K < 1:
        raise ValueError("K must be >= 1")
    scores: dict[str, float] = defaultdict(float)
    for t in query_ids:
        if t == UNK or t not in index.postings:
            continue
        w = idf(index.df(t), index.N)
        for doc_id, f in index.postings[t]:
            norm = k1 * (1 - b + b * index.doc_len[doc_id] / index.avgdl)
            scores[doc_id] += w * f * (k1 + 1) / (f + norm)
    return sort_run_entries(scores.items())[:K]


def retrieve(queries: dict[str, Sequence[int]], index: InvertedIndex, K: int, k1: float = 1.2, b: float = 0.75) -> Run:
    return {qid: search(q, index, K, k1, b) for qid, q in queries.items()}


def write_run(path, run: Run, tag: str = "bm25") -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for qid, entries in run.items():
            for rank, (doc_id, score) in enumerate(entries, start=1):
                f.write(f"{qid} Q0 {doc_id} {rank} {score:.6f} {tag}\n")


def load_run(path) -> Run:
    run: dict[str, dict[str, float]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise DataFormatError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            qid, _, doc_id, rank, score, _ = parts
            try:
                int(rank)
                val = float(score)
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: bad rank or score") from exc
            per = run.setdefault(qid, {})
            if doc_id in per:
                raise DataFormatError(f"{path}:{lineno}: duplicate entry ({qid}, {doc_id})")
            per[doc_id] = val
    return {qid: sort_run_entries(per.items()) for qid, per in run.items()}
