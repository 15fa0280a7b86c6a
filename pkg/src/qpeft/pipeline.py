"""End-to-end helpers shared by the command line, the scripts and the tests."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import numcore as nc
from .bm25 import Run, build_index, retrieve
from .evalrank import paired_ttest, recall_at_k, hit_at_k, rerank
from .minilm import LMConfig, LMParams, pretrain_lm
from .qdmodule import QDConfig, QDParams, hold_selection
from .scoring import PROMPT_PRESETS, PromptPreset, Scorer
from .textdata import (
    QUESTION_WORDS,
    Dataset,
    Document,
    SyntheticConfig,
    Vocab,
    attach_tokens,
    build_dataset,
    build_vocab,
    make_synthetic_dataset,
    relevant_ids,
    tokenize,
)
from .trainer import FitResult, TrainConfig, fit, scorer_fn

HINT_PROMPTS = ("p4", "p5")
PLAIN_PROMPTS = ("p1", "p2", "p3")


@dataclass
class PretrainConfig:
    steps: int = 2000
    lr: float = 1e-2
    batch_size: int = 16
    pairs_per_doc: int = 2


def make_vocab(texts: Iterable[str], max_size: int | None = None) -> Vocab:
    """Vocabulary over ``texts`` that always covers every prompt preset."""
    return build_vocab(texts, max_size=max_size, extra=PROMPT_PRESETS.values())


def instruction_sequences(
    docs: Sequence[Sequence[int]],
    vocab: Vocab,
    seed: int,
    pairs_per_doc: int = 2,
    max_len: int = 256,
) -> list[list[int]]:
    """Documents plus document-to-pseudo-query sequences in the scoring layout.

    A pseudo-query is a question word followed by 3-6 tokens drawn from the
    document.  Half of the extra sequences read ``doc ; hint ; p4|p5 ; query``
    where the hint lists the pseudo-query tokens shuffled together with a few
    other document tokens; the rest read ``doc ; p1|p2|p3 ; query``.  Only
    document text is used, never real queries.
    """
    rng = nc.make_rng(seed, "instruction-data")
    qwords = [vocab.id(w) for w in QUESTION_WORDS if w in vocab]
    prompts = {p: PromptPreset.get(p).ids(vocab) for p in PROMPT_PRESETS}
    out = [list(d) for d in docs]
    for doc in docs:
        doc = list(doc)
        if len(doc) < 3:
            continue
        for _ in range(pairs_per_doc):
            n = int(rng.integers(3, min(6, len(doc)) + 1))
            pq = [doc[i] for i in rng.choice(len(doc), n, replace=False)]
            query = ([qwords[int(rng.integers(len(qwords)))]] if qwords else []) + pq
            if rng.random() < 0.5:
                extra = [doc[i] for i in rng.choice(len(doc), int(rng.integers(0, 5)))]
                hint = pq + extra
                hint = [hint[i] for i in rng.permutation(len(hint))]
                tail = hint + prompts[HINT_PROMPTS[int(rng.integers(len(HINT_PROMPTS)))]] + query
            else:
                tail = prompts[PLAIN_PROMPTS[int(rng.integers(len(PLAIN_PROMPTS)))]] + query
            room = max_len - len(tail)
            out.append(doc[:room] + tail)
    return out


def pretrain(docs: Sequence[Sequence[int]], vocab: Vocab, seed: int, cfg: PretrainConfig | None = None, lm_cfg: LMConfig | None = None) -> LMParams:
    cfg = cfg or PretrainConfig()
    lm_cfg = lm_cfg or LMConfig(vocab_size=len(vocab), seed=seed)
    seqs = instruction_sequences(docs, vocab, seed, cfg.pairs_per_doc, lm_cfg.max_seq_len)
    return pretrain_lm(seqs, lm_cfg, steps=cfg.steps, lr=cfg.lr, batch_size=cfg.batch_size, seed=seed)


def hard_negatives(run: Run, qrels) -> dict[str, list[str]]:
    """Non-relevant first-stage candidates, in rank order, as negative pools."""
    return {q: [d for d, _ in entries if d not in relevant_ids(qrels, q)] for q, entries in run.items()}


@dataclass
class Workspace:
    vocab: Vocab
    corpus: dict[str, Document]
    queries: dict[str, str]
    qrels: dict[str, dict[str, int]]
    answers: dict[str, list[str]] | None
    run: Run
    splits: dict[str, list[str]] = field(default_factory=dict)

    @property
    def query_tokens(self) -> dict[str, list[int]]:
        return {q: tokenize(t, self.vocab) for q, t in self.queries.items()}

    def dataset(self, split: str, query_ids: Sequence[str] | None = None) -> Dataset:
        ids = self.splits[split] if query_ids is None else query_ids
        negs = hard_negatives({q: self.run.get(q, []) for q in ids}, self.qrels)
        return build_dataset(split, ids, self.queries, self.qrels, self.corpus, self.vocab, negs)

    def candidates(self, split: str) -> Run:
        return {q: self.run[q] for q in self.splits[split] if q in self.run}


def synthetic_workspace(seed: int, synth: SyntheticConfig | None = None, depth: int = 20, k1: float = 1.2, b: float = 0.75) -> Workspace:
    data = make_synthetic_dataset(synth or SyntheticConfig(), seed=seed)
    vocab = make_vocab([d.full_text for d in data.corpus.values()] + list(data.queries.values()))
    corpus = attach_tokens(data.corpus.values(), vocab)
    ws = Workspace(vocab, corpus, data.queries, data.qrels, data.answers, {}, data.splits)
    ws.run = retrieve(ws.query_tokens, build_index(corpus.values()), depth, k1, b)
    return ws


def train_qd(ws: Workspace, lm: LMParams, qd_cfg: QDConfig, cfg: TrainConfig, depth: int | None = None, verbose: bool = False) -> tuple[QDParams, FitResult]:
    qd = QDParams.init(qd_cfg, lm)
    prompt = PromptPreset.get(cfg.prompt).ids(ws.vocab)
    res = fit(ws.dataset("train"), ws.dataset("eval"), lm, qd, cfg, ws.run, ws.qrels, ws.corpus, prompt, depth=depth, verbose=verbose)
    qd.load(res.best_state)
    return qd, res


def rerank_split(ws: Workspace, lm: LMParams, qd: QDParams | None, split: str, prompt: str = "p4", depth: int | None = None, mode: str = "sum") -> Run:
    scorer = Scorer(lm, PromptPreset.get(prompt).ids(ws.vocab), qd, mode)
    return rerank(ws.candidates(split), scorer_fn(scorer, ws.query_tokens, ws.corpus), depth)


@dataclass
class ReplicationResult:
    seed: int
    qpeft: dict[str, float]
    upr: dict[str, float]
    t: float
    p: float
    seconds: float
    log: list = field(default_factory=list)

    @property
    def delta(self) -> float:
        keys = sorted(self.qpeft)
        return float(np.mean([self.qpeft[k] for k in keys]) - np.mean([self.upr[k] for k in keys]))

    def passed(self, margin: float = 0.02, alpha: float = 0.05) -> bool:
        return self.delta >= margin and self.p < alpha


def replicate(
    seed: int,
    variant: str = "A",
    synth: SyntheticConfig | None = None,
    pre: PretrainConfig | None = None,
    train: TrainConfig | None = None,
    depth: int = 20,
    k: int = 10,
    verbose: bool = False,
) -> ReplicationResult:
    """Trained hint module versus the empty-hint scorer on the synthetic test split."""
    t0 = time.perf_counter()
    ws = synthetic_workspace(seed, synth, depth)
    lm = pretrain([d.token_ids for d in ws.corpus.values()], ws.vocab, seed, pre)
    train = train or TrainConfig(seed=seed)
    qd, res = train_qd(ws, lm, QDConfig(variant, seed=seed), train, depth=depth, verbose=verbose)
    q_run = rerank_split(ws, lm, qd, "test", train.prompt, depth)
    u_run = rerank_split(ws, lm, None, "test", train.prompt, depth)
    q_per = recall_at_k(q_run, ws.qrels, k)[0]
    u_per = recall_at_k(u_run, ws.qrels, k)[0]
    keys = sorted(q_per)
    t, p = paired_ttest([q_per[q] for q in keys], [u_per[q] for q in keys])
    return ReplicationResult(seed, q_per, u_per, t, p, time.perf_counter() - t0, res.log)


def sweep_rows(
    ws: Workspace,
    lm: LMParams,
    variant: str,
    prompts: Sequence[str],
    train_sizes: Sequence[int],
    seeds: Sequence[int],
    base: TrainConfig,
    qd_cfg: QDConfig | None = None,
    depth: int | None = None,
    k: int = 10,
) -> list[tuple[str, str, int, int, float, float]]:
    """``(variant, prompt, train_size, seed, R@k, H@k)`` on the test split for every grid point."""
    rows = []
    for prompt in prompts:
        for size in train_sizes:
            for seed in seeds:
                cfg = TrainConfig(**{**base.__dict__, "prompt": prompt, "train_size": size, "seed": seed})
                qcfg = QDConfig(**{**(qd_cfg or QDConfig(variant)).__dict__, "variant": variant, "seed": seed})
                qd, _ = train_qd(ws, lm, qcfg, cfg, depth)
                run = rerank_split(ws, lm, qd, "test", prompt, depth, base.score_mode)
                r = recall_at_k(run, ws.qrels, k)[1]
                h = hit_at_k(run, ws.answers, ws.corpus, k, ws.qrels)[1]
                rows.append((qcfg.variant.lower(), prompt, size, seed, r, h))
    return rows


GRADCHECK_SYNTH = SyntheticConfig(num_docs=60, num_queries=30, vocab_size=300, num_topics=6, doc_len=24, splits=(10, 10, 10))


def gradient_check(variant: str, seed: int = 0, sample: int = 100, eps: float = 1e-3, batch: int = 2) -> nc.GradCheckReport:
    """Finite-difference check of the batch loss w.r.t. every hint-module tensor.

    Uses a seeded, untrained, frozen mini-LM over a small synthetic corpus.
    """
    from .trainer import batch_loss, build_in_batch_negatives

    ws = synthetic_workspace(seed, GRADCHECK_SYNTH, depth=10)
    # unit-scale-ish embeddings keep layer-norm curvature low enough that
    # central differences at eps=1e-3 resolve 1e-4
    lm = LMParams.init(LMConfig(vocab_size=len(ws.vocab), seed=seed, emb_std=0.5)).freeze()
    qd = QDParams.init(QDConfig(variant, seed=seed), lm)
    scorer = Scorer(lm, PromptPreset.get().ids(ws.vocab), qd)
    insts = list(ws.dataset("train"))[:batch]
    triples = build_in_batch_negatives(insts, nc.make_rng(seed, "negative-sampling"))
    with hold_selection(qd):
        return nc.finite_diff_check(lambda: batch_loss(scorer, triples), list(qd), eps=eps, sample=sample, seed=seed)
