"""Losses, in-batch negatives, the training loop and the checkpoint container."""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .minilm import LMParams
from .numcore import Tensor
from .qdmodule import QDParams
from .evalrank import recall_at_k, rerank
from .scoring import DEFAULT_PROMPT, Scorer, assemble_input  # noqa: F401
from .textdata import Dataset, Document, Instance


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 4
    max_epochs: int = 20
    patience: int = 5
    lr: float = 3e-2
    train_size: int | None = None
    eval_size: int | None = None
    seed: int = 0
    prompt: str = DEFAULT_PROMPT
    score_mode: str = "sum"
    eval_k: int = 10

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience > self.max_epochs and self.max_epochs > 0:
            raise ValueError("patience must not exceed max_epochs")


@dataclass(frozen=True)
class Triple:
    query_id: str
    query_ids: tuple[int, ...]
    positive: Document
    negative: Document


def build_in_batch_negatives(batch: Sequence[Instance], rng: np.random.Generator) -> list[Triple]:
    """Expand ``b`` instances into ``b * (2b - 1)`` triples.

    One negative is sampled per instance from its own pool.  Query ``i`` is
    then paired with the other ``b - 1`` positives and all ``b`` sampled
    negatives.  Pool entries that are a positive of this batch are excluded
    from sampling so no query ever meets its own positive as a negative.
    """
    b = len(batch)
    if b < 1:
        raise ValueError("empty batch")
    pos_ids = [inst.positive.doc_id for inst in batch]
    if len(set(pos_ids)) != b:
        raise ValueError("duplicate positive documents inside one batch")
    taken = set(pos_ids)
    sampled: list[Document] = []
    for inst in batch:
        pool = [d for d in inst.negatives if d.doc_id not in taken]
        if not pool:
            raise ValueError(f"query {inst.query_id!r} has no usable negative")
        sampled.append(pool[int(rng.integers(len(pool)))])
    triples = []
    for i, inst in enumerate(batch):
        negs = [batch[j].positive for j in range(b) if j != i] + sampled
        for neg in negs:
            triples.append(Triple(inst.query_id, inst.query_ids, inst.positive, neg))
    return triples


# ---------------------------------------------------------------------------
# losses


def hinge(i_pos, i_neg):
    """``max(0, I- - I+)`` on floats or tensors."""
    if isinstance(i_pos, Tensor) or isinstance(i_neg, Tensor):
        return nc.relu(nc.sub(i_neg, i_pos))
    return max(0.0, i_neg - i_pos)


def loss_point(scorer: Scorer, query_ids, pos: Document) -> Tensor:
    return nc.reshape(scorer.score_pairs([(query_ids, pos.token_ids)]), ()) * -1.0


def loss_pair(scorer: Scorer, query_ids, pos: Document, neg: Document) -> Tensor:
    s = scorer.score_pairs([(query_ids, pos.token_ids), (query_ids, neg.token_ids)])
    return hinge(nc.gather(s, (0,)), nc.gather(s, (1,)))


def loss_total(scorer: Scorer, triple: Triple) -> Tensor:
    s = scorer.score_pairs([(triple.query_ids, triple.positive.token_ids), (triple.query_ids, triple.negative.token_ids)])
    i_pos, i_neg = nc.gather(s, (0,)), nc.gather(s, (1,))
    return i_pos * -1.0 + hinge(i_pos, i_neg)


def batch_loss(scorer: Scorer, triples: Sequence[Triple]) -> Tensor:
    """Mean of point + pair loss over triples.

    Every distinct (query, document) pair is scored once; the positive's
    score is shared by all triples of its query, which is the same value the
    per-triple formula would compute.
    """
    keys: dict[tuple[str, str], int] = {}
    pairs = []
    for t in triples:
        for doc in (t.positive, t.negative):
            key = (t.query_id, doc.doc_id)
            if key not in keys:
                keys[key] = len(pairs)
                pairs.append((t.query_ids, doc.token_ids))
    scores = scorer.score_pairs(pairs)
    ip = np.array([keys[(t.query_id, t.positive.doc_id)] for t in triples])
    ineg = np.array([keys[(t.query_id, t.negative.doc_id)] for t in triples])
    i_pos, i_neg = nc.gather(scores, (ip,)), nc.gather(scores, (ineg,))
    per = i_pos * -1.0 + nc.relu(i_neg - i_pos)
    return nc.mean(per)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    eval_R10: float
    best_so_far: float


@dataclass
class FitResult:
    best_state: dict[str, np.ndarray]
    best_epoch: int
    best_metric: float
    log: list[EpochLog] = field(default_factory=list)


def scorer_fn(scorer: Scorer, query_tokens: dict[str, Sequence[int]], corpus: dict[str, Document]):
    def score(qid: str, doc_ids: Sequence[str]) -> np.ndarray:
        q = query_tokens[qid]
        return scorer.score_many([(q, corpus[d].token_ids) for d in doc_ids])

    return score


def fit(
    train: Dataset,
    eval_set: Dataset,
    lm: LMParams,
    qd: QDParams,
    config: TrainConfig,
    eval_candidates: dict[str, list[tuple[str, float]]],
    qrels: dict[str, dict[str, int]],
    corpus: dict[str, Document],
    prompt_ids: Sequence[int],
    depth: int | None = None,
    verbose: bool = False,
) -> FitResult:
    """Adam on the hint module only, early-stopped on eval Recall@k.

    Epoch 0 is the evaluation of the initial parameters.  The best state is
    the parameter snapshot with the highest eval metric (earliest on ties).
    """
    if config.train_size is not None:
        train = train.sample(config.train_size, nc.derive_seed(config.seed, "train-sample"))
    if config.eval_size is not None:
        eval_set = eval_set.sample(config.eval_size, nc.derive_seed(config.seed, "eval-sample"))
    scorer = Scorer(lm, list(prompt_ids), qd, config.score_mode)
    query_tokens = {inst.query_id: inst.query_ids for inst in eval_set}
    eval_cands = {q: eval_candidates[q] for q in query_tokens if q in eval_candidates}

    def eval_metric() -> float:
        run = rerank(eval_cands, scorer_fn(scorer, query_tokens, corpus), depth)
        return recall_at_k(run, qrels, config.eval_k)[1]

    shuffle_rng = nc.make_rng(config.seed, "shuffle")
    neg_rng = nc.make_rng(config.seed, "negative-sampling")
    opt = nc.Adam(list(qd), lr=config.lr)

    best = eval_metric()
    best_state, best_epoch = qd.snapshot(), 0
    log = [EpochLog(0, math.nan, best, best)]
    if verbose:
        print(f"epoch 0: eval R@{config.eval_k} {best:.4f}")
    stale = 0
    instances = list(train)
    b = config.batch_size
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(len(instances))
        losses = []
        for start in range(0, len(order), b):
            batch = [instances[i] for i in order[start : start + b]]
            triples = build_in_batch_negatives(batch, neg_rng)
            opt.zero_grad()
            try:
                loss = batch_loss(scorer, triples)
            except nc.NumericError as exc:
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start}: {exc}") from exc
            loss.backward()
            opt.step()
            losses.append(loss.item())
        metric = eval_metric()
        if metric > best:
            best, best_state, best_epoch, stale = metric, qd.snapshot(), epoch, 0
        else:
            stale += 1
        log.append(EpochLog(epoch, float(np.mean(losses)) if losses else math.nan, metric, best))
        if verbose:
            print(f"epoch {epoch}: loss {log[-1].train_loss:.4f} eval R@{config.eval_k} {metric:.4f} best {best:.4f}")
        if stale >= config.patience:
            break
    return FitResult(best_state, best_epoch, best, log)


def write_log(path, log: Sequence[EpochLog]) -> None:
    with open(path, "w", newline="\n", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "eval_R10", "best_so_far"])
        for row in log:
            w.writerow([row.epoch, repr(row.train_loss), repr(row.eval_R10), repr(row.best_so_far)])


def read_log(path) -> list[EpochLog]:
    with open(path, encoding="utf-8") as f:
        r = csv.DictReader(f)
        return [EpochLog(int(x["epoch"]), float(x["train_loss"]), float(x["eval_R10"]), float(x["best_so_far"])) for x in r]


# ---------------------------------------------------------------------------
# checkpoint container

MAGIC = b"QPEFTCKP"
VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``MAGIC | u32 version | u64 len | JSON manifest | f32 LE payloads``."""
    directory, offset = [], 0
    payloads = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"meta": meta or {}, "tensors": directory}
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(blob)))
        f.write(blob)
        for p in payloads:
            f.write(p)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, n = struct.unpack_from("<IQ", raw, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + 12
    manifest = json.loads(raw[start : start + n].decode("utf-8"))
    base = start + n
    tensors = {}
    for ent in manifest["tensors"]:
        count = int(np.prod(ent["shape"])) if ent["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=base + ent["offset"])
        tensors[ent["name"]] = arr.reshape(ent["shape"]).astype(np.float64)
    return manifest["meta"], tensors


def config_dict(cfg) -> dict:
    return asdict(cfg)
