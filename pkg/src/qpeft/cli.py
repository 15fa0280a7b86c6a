"""Command line: ``qpeft <command> [flags]``.

Every command reads its inputs from files, writes only into ``--out`` and
records the resolved configuration in ``<out>/<command>.log``.  Settings come
from built-in defaults, then an optional ``--config`` key=value file, then
flags; a flag that disagrees with the config file wins and the conflict is
noted in the log header.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import numcore as nc
from .bm25 import InvertedIndex, build_index, load_run, retrieve, write_run
from .evalrank import report, rerank
from .minilm import LMConfig, LMParams
from .numcore import Param
from .pipeline import PretrainConfig, Workspace, gradient_check, make_vocab, pretrain, rerank_split, sweep_rows
from .qdmodule import QDConfig, QDParams
from .scoring import PROMPT_PRESETS, PromptPreset, Scorer
from .textdata import (
    SyntheticConfig,
    Vocab,
    attach_tokens,
    load_answers,
    load_corpus,
    load_qrels,
    load_queries,
    make_synthetic_dataset,
    relevant_ids,
    tokenize,
    write_answers,
    write_corpus,
    write_qrels,
    write_queries,
)
from .trainer import TrainConfig, fit, load_checkpoint, save_checkpoint, scorer_fn, write_log

COMMANDS = ("build-vocab", "pretrain-lm", "index", "retrieve", "synth", "train", "rerank", "eval", "gradcheck", "sweep")

# name -> (type, default)
OPTIONS: dict[str, tuple[type, object]] = {
    "corpus": (str, None),
    "queries": (str, None),
    "eval_queries": (str, None),
    "test_queries": (str, None),
    "qrels": (str, None),
    "answers": (str, None),
    "run": (str, None),
    "systems": (str, None),
    "vocab": (str, None),
    "lm": (str, None),
    "checkpoint": (str, None),
    "index": (str, None),
    "out": (str, "."),
    "seed": (int, 0),
    "seeds": (str, "0"),
    "variant": (str, "a"),
    "k": (int, 10),
    "heads": (int, 2),
    "mlp_layers": (int, 1),
    "lr": (float, 3e-2),
    "batch_size": (int, 4),
    "max_epochs": (int, 20),
    "patience": (int, 5),
    "prompt": (str, "p4"),
    "prompts": (str, "p1,p2,p3,p4,p5"),
    "depth": (int, 20),
    "score_mode": (str, "sum"),
    "k1": (float, 1.2),
    "b": (float, 0.75),
    "train_sizes": (str, "50,100,200"),
    "train_size": (int, None),
    "eval_size": (int, None),
    "exemplar": (str, "none"),
    "ks": (str, "10,20"),
    "steps": (int, 2000),
    "pretrain_lr": (float, 1e-2),
    "max_vocab": (int, None),
    "sample": (int, 100),
}
CHOICES = {
    "variant": ("r", "a"),
    "prompt": tuple(PROMPT_PRESETS),
    "score_mode": ("sum", "mean"),
    "exemplar": ("none", "first"),
}


class CliError(Exception):
    pass


def read_config(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    p = Path(path)
    if not p.is_file():
        raise CliError(f"missing config file: {path}")
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in OPTIONS:
            raise CliError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def _convert(key: str, value):
    typ = OPTIONS[key][0]
    if value is None:
        return None
    v = typ(value)
    if key == "variant":
        v = v.lower()
    if key in CHOICES and v not in CHOICES[key]:
        raise CliError(f"{key} must be one of {', '.join(CHOICES[key])}, got {v!r}")
    return v


def resolve(args: argparse.Namespace) -> tuple[dict, list[str]]:
    """Merge defaults, config file and flags; returns settings and conflict notes."""
    cfg = {k: d for k, (_, d) in OPTIONS.items()}
    from_file = read_config(args.config) if args.config else {}
    for k, v in from_file.items():
        cfg[k] = _convert(k, v)
    notes = []
    for k in OPTIONS:
        v = getattr(args, k, None)
        if v is None:
            continue
        v = _convert(k, v)
        if k in from_file and _convert(k, from_file[k]) != v:
            notes.append(f"conflict: {k} config={from_file[k]} flag={v} (flag wins)")
        cfg[k] = v
    return cfg, notes


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qpeft", description="Query-dependent hint reranking at desk scale.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config")
        for key, (typ, _) in OPTIONS.items():
            flag = "--" + key.replace("_", "-")
            kw = {"dest": key, "default": None}
            if key in CHOICES:
                kw["choices"] = CHOICES[key]
                if key == "variant":
                    kw["type"] = str.lower
            p.add_argument(flag, **kw)
    return ap


# ---------------------------------------------------------------------------
# helpers


def _need(cfg: dict, *keys: str) -> None:
    for k in keys:
        if not cfg.get(k):
            raise CliError(f"--{k.replace('_', '-')} is required")
        if not Path(cfg[k]).exists():
            raise CliError(f"missing input file: {cfg[k]}")


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _write_log_header(out: Path, command: str, cfg: dict, notes: list[str]) -> None:
    lines = [f"# command={command}"]
    lines += [f"# {k}={cfg[k]}" for k in sorted(cfg)]
    lines += [f"# {n}" for n in notes]
    (out / f"{command}.log").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _vocab(cfg) -> Vocab:
    _need(cfg, "vocab")
    return Vocab.load(cfg["vocab"])


def _corpus(cfg, vocab: Vocab):
    _need(cfg, "corpus")
    return attach_tokens(load_corpus(cfg["corpus"]).values(), vocab)


def save_lm(path, lm: LMParams) -> None:
    save_checkpoint(path, lm.snapshot(), {"kind": "lm", "lm_config": asdict(lm.config)})


def load_lm(path) -> LMParams:
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "lm":
        raise CliError(f"{path}: not a language-model checkpoint")
    return LMParams(LMConfig(**meta["lm_config"]), {k: Param(k, v, trainable=False) for k, v in tensors.items()})


def load_qd(path) -> QDParams:
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "qd":
        raise CliError(f"{path}: not a hint-module checkpoint")
    return QDParams(QDConfig(**meta["qd_config"]), {k: Param(k, v) for k, v in tensors.items()})


def _qd_config(cfg, lm: LMParams, seed: int | None = None) -> QDConfig:
    return QDConfig(cfg["variant"], cfg["k"], cfg["heads"], cfg["mlp_layers"], lm.config.model_dim, cfg["seed"] if seed is None else seed)


def _train_config(cfg) -> TrainConfig:
    return TrainConfig(
        batch_size=cfg["batch_size"],
        max_epochs=cfg["max_epochs"],
        patience=cfg["patience"],
        lr=cfg["lr"],
        train_size=cfg["train_size"],
        eval_size=cfg["eval_size"],
        seed=cfg["seed"],
        prompt=cfg["prompt"],
        score_mode=cfg["score_mode"],
    )


def _workspace(cfg, vocab: Vocab, split_keys: dict[str, str]) -> Workspace:
    _need(cfg, "qrels", "run", *split_keys.values())
    corpus = _corpus(cfg, vocab)
    queries, splits = {}, {}
    for split, key in split_keys.items():
        qs = load_queries(cfg[key])
        queries.update(qs)
        splits[split] = list(qs)
    answers = None
    if cfg.get("answers"):
        _need(cfg, "answers")
        answers = load_answers(cfg["answers"])
    return Workspace(vocab, corpus, queries, load_qrels(cfg["qrels"], corpus), answers, load_run(cfg["run"]), splits)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg, out: Path) -> None:
    data = make_synthetic_dataset(SyntheticConfig(), seed=cfg["seed"])
    write_corpus(out / "corpus.tsv", data.corpus.values())
    write_queries(out / "queries.tsv", data.queries)
    write_qrels(out / "qrels.tsv", data.qrels)
    write_answers(out / "answers.tsv", data.answers)
    for split, ids in data.splits.items():
        write_queries(out / f"queries.{split}.tsv", {q: data.queries[q] for q in ids})


def cmd_build_vocab(cfg, out: Path) -> None:
    _need(cfg, "corpus")
    texts = [d.full_text for d in load_corpus(cfg["corpus"]).values()]
    if cfg.get("queries"):
        _need(cfg, "queries")
        texts += list(load_queries(cfg["queries"]).values())
    make_vocab(texts, cfg["max_vocab"]).save(out / "vocab.txt")


def cmd_pretrain_lm(cfg, out: Path) -> None:
    vocab = _vocab(cfg)
    corpus = _corpus(cfg, vocab)
    pre = PretrainConfig(steps=cfg["steps"], lr=cfg["pretrain_lr"])
    lm = pretrain([d.token_ids for d in corpus.values()], vocab, cfg["seed"], pre)
    save_lm(out / "lm.ckpt", lm)


def cmd_index(cfg, out: Path) -> None:
    vocab = _vocab(cfg)
    idx = build_index(_corpus(cfg, vocab).values())
    blob = {
        "N": idx.N,
        "avgdl": idx.avgdl,
        "doc_len": idx.doc_len,
        "postings": {str(t): [[d, f] for d, f in p] for t, p in sorted(idx.postings.items())},
    }
    (out / "index.json").write_text(json.dumps(blob, sort_keys=True, separators=(",", ":")), encoding="utf-8")


def load_index(path) -> InvertedIndex:
    blob = json.loads(Path(path).read_text(encoding="utf-8"))
    postings = {int(t): [(d, int(f)) for d, f in p] for t, p in blob["postings"].items()}
    return InvertedIndex(postings, blob["doc_len"], blob["avgdl"], blob["N"])


def cmd_retrieve(cfg, out: Path) -> None:
    vocab = _vocab(cfg)
    _need(cfg, "index", "queries")
    queries = {q: tokenize(t, vocab) for q, t in load_queries(cfg["queries"]).items()}
    run = retrieve(queries, load_index(cfg["index"]), cfg["depth"], cfg["k1"], cfg["b"])
    write_run(out / "run.txt", run, "bm25")


def cmd_train(cfg, out: Path) -> None:
    vocab = _vocab(cfg)
    _need(cfg, "lm")
    lm = load_lm(cfg["lm"])
    ws = _workspace(cfg, vocab, {"train": "queries", "eval": "eval_queries"})
    qd = QDParams.init(_qd_config(cfg, lm), lm)
    tcfg = _train_config(cfg)
    prompt = PromptPreset.get(tcfg.prompt).ids(vocab)
    res = fit(ws.dataset("train"), ws.dataset("eval"), lm, qd, tcfg, ws.run, ws.qrels, ws.corpus, prompt, depth=cfg["depth"])
    meta = {
        "kind": "qd",
        "qd_config": asdict(qd.config),
        "train_config": asdict(tcfg),
        "best_epoch": res.best_epoch,
        "best_metric": res.best_metric,
    }
    save_checkpoint(out / "qd.ckpt", res.best_state, meta)
    write_log(out / "train_log.csv", res.log)


def _exemplar(cfg, vocab: Vocab, corpus) -> tuple[list[int], list[int]] | None:
    """``first``: the first query (by id) of ``--eval-queries`` with its relevant document."""
    if cfg["exemplar"] == "none":
        return None
    _need(cfg, "eval_queries", "qrels")
    qrels = load_qrels(cfg["qrels"], corpus)
    for qid, text in sorted(load_queries(cfg["eval_queries"]).items()):
        rel = sorted(relevant_ids(qrels, qid))
        if rel:
            return tokenize(text, vocab), list(corpus[rel[0]].token_ids)
    raise CliError("no exemplar query with a relevant document")


def cmd_rerank(cfg, out: Path) -> None:
    vocab = _vocab(cfg)
    _need(cfg, "lm", "queries", "run")
    lm = load_lm(cfg["lm"])
    corpus = _corpus(cfg, vocab)
    qd = None
    if cfg.get("checkpoint"):
        _need(cfg, "checkpoint")
        qd = load_qd(cfg["checkpoint"])
    prompt = PromptPreset.get(cfg["prompt"]).ids(vocab)
    scorer = Scorer(lm, prompt, qd, cfg["score_mode"], exemplar=_exemplar(cfg, vocab, corpus))
    queries = {q: tokenize(t, vocab) for q, t in load_queries(cfg["queries"]).items()}
    cands = load_run(cfg["run"])
    run = rerank({q: cands[q] for q in queries if q in cands}, scorer_fn(scorer, queries, corpus), cfg["depth"])
    write_run(out / "rerank.run", run, "upr" if qd is None else "qpeft")


def cmd_eval(cfg, out: Path) -> None:
    _need(cfg, "run", "qrels", "corpus")
    corpus = load_corpus(cfg["corpus"])
    systems = {}
    for item in (cfg.get("systems") or "").split(","):
        if not item.strip():
            continue
        name, _, path = item.partition("=")
        if not path:
            raise CliError(f"--systems entries look like name=path, got {item!r}")
        if not Path(path).exists():
            raise CliError(f"missing input file: {path}")
        systems[name.strip()] = load_run(path)
    answers = None
    if cfg.get("answers"):
        _need(cfg, "answers")
        answers = load_answers(cfg["answers"])
    ks = _ints(cfg["ks"])
    if max(ks) > cfg["depth"]:
        raise CliError(f"largest k {max(ks)} exceeds the rerank depth {cfg['depth']}")
    rep = report(load_run(cfg["run"]), systems, load_qrels(cfg["qrels"], corpus), answers, corpus, ks)
    (out / "report.csv").write_text(rep.to_csv(), encoding="utf-8")


def cmd_gradcheck(cfg, out: Path) -> None:
    lines = []
    for variant in ("R", "A"):
        rep = gradient_check(variant, cfg["seed"], cfg["sample"])
        lines.append(f"variant {variant}: checked {rep.checked} coordinates, max relative error {rep.max_rel_error:.3e}")
    (out / "gradcheck.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))


def cmd_sweep(cfg, out: Path) -> None:
    vocab = _vocab(cfg)
    _need(cfg, "lm")
    lm = load_lm(cfg["lm"])
    ws = _workspace(cfg, vocab, {"train": "queries", "eval": "eval_queries", "test": "test_queries"})
    prompts = [p.strip() for p in cfg["prompts"].split(",") if p.strip()]
    for p in prompts:
        PromptPreset.get(p)
    rows = sweep_rows(
        ws, lm, cfg["variant"].upper(), prompts, _ints(cfg["train_sizes"]), _ints(cfg["seeds"]),
        _train_config(cfg), _qd_config(cfg, lm), cfg["depth"],
    )
    text = "variant,prompt,train_size,seed,R10,H10\n" + "".join(f"{v},{p},{x},{s},{r!r},{h!r}\n" for v, p, x, s, r, h in rows)
    (out / "sweep.csv").write_text(text, encoding="utf-8")


HANDLERS = {
    "synth": cmd_synth,
    "build-vocab": cmd_build_vocab,
    "pretrain-lm": cmd_pretrain_lm,
    "index": cmd_index,
    "retrieve": cmd_retrieve,
    "train": cmd_train,
    "rerank": cmd_rerank,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, notes = resolve(args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        _write_log_header(out, args.command, cfg, notes)
        HANDLERS[args.command](cfg, out)
    except (CliError, ValueError, KeyError, nc.NumericError) as exc:
        print(f"qpeft {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
