"""Tokenizer, vocabulary, TSV loaders and the seeded synthetic QA generator."""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numcore import make_rng

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

_TOKEN_RE = re.compile(r"\w+")


class DataFormatError(ValueError):
    pass


def split_words(text: str) -> list[str]:
    """Lowercase word tokens; whitespace and punctuation only separate."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocab:
    itos: list[str]
    stoi: dict[str, int] = field(init=False)

    def __post_init__(self):
        if tuple(self.itos[:4]) != SPECIAL_TOKENS:
            raise ValueError("vocab must start with the reserved special tokens")
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate token in vocab")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.itos[i] for i in ids)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").split("\n")[:-1])


def tokenize(text: str, vocab: Vocab) -> list[int]:
    return [vocab.stoi.get(w, UNK) for w in split_words(text)]


def build_vocab(texts: Iterable[str], max_size: int | None = None, extra: Iterable[str] = ()) -> Vocab:
    """Frequency-ranked vocabulary with lexicographic tie-break.

    ``texts`` is usually corpus documents plus queries.  Tokens of ``extra``
    (prompt texts) are always kept, placed after the reserved ids, so that
    prompt words never collapse to UNK under truncation.
    """
    counts: Counter[str] = Counter()
    n = 0
    for t in texts:
        n += 1
        counts.update(split_words(t))
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    forced: list[str] = []
    for t in extra:
        for w in split_words(t):
            if w not in forced:
                forced.append(w)
    forced.sort()
    ranked = [w for w, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])) if w not in forced]
    itos = list(SPECIAL_TOKENS) + forced + ranked
    if max_size is not None:
        if max_size < 4 + len(forced):
            raise ValueError(f"max_size={max_size} cannot hold reserved and prompt tokens")
        itos = itos[:max_size]
    return Vocab(itos)


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    text: str
    token_ids: tuple[int, ...] = ()

    @property
    def full_text(self) -> str:
        return f"{self.title} {self.text}"


@dataclass(frozen=True)
class Instance:
    query_id: str
    query_text: str
    query_ids: tuple[int, ...]
    positive: Document
    negatives: tuple[Document, ...]


@dataclass
class Dataset:
    instances: list[Instance]
    split: str = "train"

    def __post_init__(self):
        ids = [i.query_id for i in self.instances]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate query ids in split {self.split!r}")

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def sample(self, size: int, seed: int) -> "Dataset":
        """Seeded subsample (``D^X`` from ``D``), original order kept."""
        if size > len(self.instances):
            raise ValueError(f"sample size {size} exceeds split size {len(self.instances)}")
        rng = make_rng(seed, f"sample-{self.split}")
        keep = sorted(rng.choice(len(self.instances), size=size, replace=False).tolist())
        return Dataset([self.instances[i] for i in keep], self.split)


def attach_tokens(docs: Iterable[Document], vocab: Vocab) -> dict[str, Document]:
    out = {}
    for d in docs:
        out[d.doc_id] = Document(d.doc_id, d.title, d.text, tuple(tokenize(d.full_text, vocab)))
    return out


# ---------------------------------------------------------------------------
# file formats


def _rows(path, ncols: int):
    with open(path, encoding="utf-8", newline="\n") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != ncols:
                raise DataFormatError(f"{path}:{lineno}: expected {ncols} tab-separated fields, got {len(parts)}")
            yield lineno, parts


def load_corpus(path, vocab: Vocab | None = None) -> dict[str, Document]:
    docs: dict[str, Document] = {}
    for lineno, (doc_id, title, text) in _rows(path, 3):
        if doc_id in docs:
            raise DataFormatError(f"{path}:{lineno}: duplicate doc_id {doc_id!r}")
        docs[doc_id] = Document(doc_id, title, text)
    return attach_tokens(docs.values(), vocab) if vocab is not None else docs


def load_queries(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, (qid, text) in _rows(path, 2):
        if qid in out:
            raise DataFormatError(f"{path}:{lineno}: duplicate query_id {qid!r}")
        out[qid] = text
    return out


def load_qrels(path, corpus: dict[str, Document] | None = None) -> dict[str, dict[str, int]]:
    """query_id -> {doc_id: label}; unknown doc ids are rejected when a corpus is given."""
    out: dict[str, dict[str, int]] = {}
    for lineno, (qid, did, label) in _rows(path, 3):
        if label not in ("0", "1"):
            raise DataFormatError(f"{path}:{lineno}: label must be 0 or 1, got {label!r}")
        if corpus is not None and did not in corpus:
            raise DataFormatError(f"{path}:{lineno}: unknown doc_id {did!r}")
        out.setdefault(qid, {})[did] = int(label)
    return out


def load_answers(path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for lineno, (qid, answers) in _rows(path, 2):
        items = [a for a in answers.split("||") if a]
        if not items:
            raise DataFormatError(f"{path}:{lineno}: no answers")
        out[qid] = items
    return out


def write_corpus(path, docs: Iterable[Document]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for d in docs:
            f.write(f"{d.doc_id}\t{d.title}\t{d.text}\n")


def write_queries(path, queries: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for qid, text in queries.items():
            f.write(f"{qid}\t{text}\n")


def write_qrels(path, qrels: dict[str, dict[str, int]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for qid, rel in qrels.items():
            for did, label in rel.items():
                f.write(f"{qid}\t{did}\t{label}\n")


def write_answers(path, answers: dict[str, list[str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for qid, items in answers.items():
            f.write(f"{qid}\t{'||'.join(items)}\n")


def relevant_ids(qrels: dict[str, dict[str, int]], qid: str) -> set[str]:
    return {d for d, lab in qrels.get(qid, {}).items() if lab > 0}


def build_dataset(
    split: str,
    query_ids: Sequence[str],
    queries: dict[str, str],
    qrels: dict[str, dict[str, int]],
    corpus: dict[str, Document],
    vocab: Vocab,
    negatives: dict[str, list[str]],
) -> Dataset:
    """Join queries, qrels and per-query negative pools into instances.

    Queries with several relevant documents use the lexicographically first
    one as the positive.
    """
    instances = []
    for qid in query_ids:
        rel = sorted(relevant_ids(qrels, qid))
        if not rel:
            continue
        pos = corpus[rel[0]]
        negs = tuple(corpus[d] for d in negatives.get(qid, []) if d not in rel)
        text = queries[qid]
        instances.append(Instance(qid, text, tuple(tokenize(text, vocab)), pos, negs))
    return Dataset(instances, split)


# ---------------------------------------------------------------------------
# synthetic data


QUESTION_WORDS = ("what", "who", "where", "when", "which", "how")
_SYLLABLES = (
    "ba be bi bo bu da de di do du fa fe fi fo fu ga ge gi go gu ka ke ki ko ku la le li lo lu "
    "ma me mi mo mu na ne ni no nu pa pe pi po pu ra re ri ro ru sa se si so su ta te ti to tu "
    "va ve vi vo vu za ze zi zo zu"
).split()


@dataclass
class SyntheticConfig:
    seed: int = 0
    num_docs: int = 500
    num_queries: int = 300
    vocab_size: int = 600
    negatives_per_query: int = 10
    num_topics: int = 25
    doc_len: int = 40
    num_common: int = 40
    salient_per_doc: int = 3
    query_salient: int = 1
    query_topic: int = 3
    query_noise: int = 1
    splits: tuple[int, int, int] = (200, 50, 50)


@dataclass
class SyntheticData:
    corpus: dict[str, Document]
    queries: dict[str, str]
    qrels: dict[str, dict[str, int]]
    answers: dict[str, list[str]]
    negatives: dict[str, list[str]]
    splits: dict[str, list[str]]


def _make_words(rng, n: int) -> list[str]:
    words: list[str] = []
    seen = set(QUESTION_WORDS)
    while len(words) < n:
        w = "".join(rng.choice(_SYLLABLES, size=int(rng.integers(2, 4))))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def make_synthetic_dataset(cfg: SyntheticConfig | None = None, **overrides) -> SyntheticData:
    """Topic-model corpus with salient-token queries.

    Each document draws from a topic's word distribution plus common filler
    words and a few document-specific salient words repeated in the text.  A
    query is a question word, some of its positive document's salient words,
    some topic words and random noise words.  The answer is a salient word of
    the positive document, so the span always occurs there.
    """
    cfg = cfg or SyntheticConfig()
    if overrides:
        cfg = SyntheticConfig(**{**cfg.__dict__, **overrides})
    if cfg.num_docs < cfg.num_queries:
        raise ValueError("num_docs must be >= num_queries")
    if cfg.vocab_size < 50:
        raise ValueError("vocab_size must be >= 50")
    if sum(cfg.splits) > cfg.num_queries:
        raise ValueError("splits exceed num_queries")
    if cfg.negatives_per_query >= cfg.num_docs:
        raise ValueError("negatives_per_query must be < num_docs")
    n_content = cfg.vocab_size - cfg.num_common - len(QUESTION_WORDS)
    if n_content < cfg.num_topics * 4:
        raise ValueError("vocab_size too small for the topic count")

    rng = make_rng(cfg.seed, "synthetic")
    words = _make_words(rng, cfg.vocab_size - len(QUESTION_WORDS))
    common, content = words[: cfg.num_common], words[cfg.num_common :]

    topic_words = []
    per_topic = max(8, len(content) // cfg.num_topics * 2)
    for _ in range(cfg.num_topics):
        topic_words.append(rng.choice(len(content), size=min(per_topic, len(content)), replace=False))
    # Zipf-like weights inside a topic
    tw = 1.0 / (1.0 + np.arange(per_topic))
    tw = tw / tw.sum()

    corpus: dict[str, Document] = {}
    doc_topic = []
    doc_salient: list[list[str]] = []
    width = len(str(cfg.num_docs - 1))
    for i in range(cfg.num_docs):
        topic = int(rng.integers(cfg.num_topics))
        sal = [content[j] for j in rng.choice(len(content), size=cfg.salient_per_doc, replace=False)]
        n_topic = cfg.doc_len // 2
        n_common = cfg.doc_len - n_topic - 2 * cfg.salient_per_doc
        toks = [content[j] for j in rng.choice(topic_words[topic], size=n_topic, p=tw[: len(topic_words[topic])])]
        toks += [common[j] for j in rng.integers(len(common), size=max(n_common, 0))]
        toks += sal * 2
        order = rng.permutation(len(toks))
        body = [toks[j] for j in order]
        doc_id = f"d{i:0{width}d}"
        corpus[doc_id] = Document(doc_id, sal[0], " ".join(body))
        doc_topic.append(topic)
        doc_salient.append(sal)

    doc_ids = list(corpus)
    pos_idx = rng.choice(cfg.num_docs, size=cfg.num_queries, replace=False)
    queries: dict[str, str] = {}
    qrels: dict[str, dict[str, int]] = {}
    answers: dict[str, list[str]] = {}
    negatives: dict[str, list[str]] = {}
    qwidth = len(str(cfg.num_queries - 1))
    for qi, di in enumerate(pos_idx.tolist()):
        qid = f"q{qi:0{qwidth}d}"
        doc = corpus[doc_ids[di]]
        sal = doc_salient[di]
        q_sal = [sal[j] for j in rng.choice(len(sal), size=min(cfg.query_salient, len(sal)), replace=False)]
        doc_words = doc.text.split()
        topical = [w for w in doc_words if w not in common and w not in sal]
        q_top = [topical[j] for j in rng.choice(len(topical), size=cfg.query_topic)] if topical else []
        q_noise = [content[j] for j in rng.integers(len(content), size=cfg.query_noise)]
        body = q_sal + q_top + q_noise
        body = [body[j] for j in rng.permutation(len(body))]
        qword = QUESTION_WORDS[int(rng.integers(len(QUESTION_WORDS)))]
        queries[qid] = " ".join([qword] + body)
        qrels[qid] = {doc.doc_id: 1}
        answers[qid] = [q_sal[0]]
        same = [j for j in range(cfg.num_docs) if j != di and doc_topic[j] == doc_topic[di]]
        other = [j for j in range(cfg.num_docs) if j != di and doc_topic[j] != doc_topic[di]]
        n_same = min(len(same), cfg.negatives_per_query // 2)
        picks = list(rng.choice(same, size=n_same, replace=False)) if n_same else []
        picks += list(rng.choice(other, size=cfg.negatives_per_query - n_same, replace=False))
        negatives[qid] = [doc_ids[int(j)] for j in picks]

    qids = list(queries)
    a, b, c = cfg.splits
    splits = {"train": qids[:a], "eval": qids[a : a + b], "test": qids[a + b : a + b + c]}
    return SyntheticData(corpus, queries, qrels, answers, negatives, splits)

