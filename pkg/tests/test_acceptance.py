"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are repeated in the "acceptance criteria" section of the pytest
terminal summary.
"""
import math
import time

import numpy as np
import pytest
from scipy import stats

from qpeft import bm25
from qpeft import numcore as nc
from qpeft import trainer as tr
from qpeft.cli import build_parser, resolve
from qpeft.evalrank import paired_ttest, rerank, score_qpeft, score_upr
from qpeft.minilm import LMConfig, LMParams
from qpeft.pipeline import GRADCHECK_SYNTH, gradient_check, synthetic_workspace
from qpeft.qdmodule import QDConfig, QDParams, cosine_matrix, qd_a_hint, topk_unique
from qpeft.scoring import PROMPT_PRESETS, PromptPreset, Scorer
from qpeft.textdata import UNK, Document, Instance

from conftest import record, run_pipeline


# 1 ---------------------------------------------------------------------------


def test_c01_gradient_fidelity():
    t0 = time.perf_counter()
    reps = {v: gradient_check(v, seed=0, sample=100, eps=1e-3) for v in ("R", "A")}
    secs = time.perf_counter() - t0
    vocab = len(synthetic_workspace(0, GRADCHECK_SYNTH, depth=10).vocab)
    worst = max(r.max_rel_error for r in reps.values())
    ok = worst < 1e-4 and all(r.checked >= 100 for r in reps.values()) and secs < 120 and 250 <= vocab <= 350
    detail = ", ".join(f"{v}: {r.checked} coords max rel {r.max_rel_error:.2e}" for v, r in reps.items())
    assert record(1, ok, f"{detail}; V={vocab}; {secs:.1f}s")


# 2 ---------------------------------------------------------------------------


def test_c02_frozen_lm(monkeypatch):
    ws = synthetic_workspace(1, GRADCHECK_SYNTH, depth=10)
    lm = LMParams.init(LMConfig(vocab_size=len(ws.vocab), seed=1)).freeze()
    before = lm.snapshot()
    qd = QDParams.init(QDConfig("A", seed=1), lm)
    init = qd.snapshot()
    touched: dict[str, float] = {}

    class Tracking(nc.Adam):
        def step(self):
            for p in self.params:
                if p.grad is not None:
                    touched[p.name] = touched.get(p.name, 0.0) + float(np.abs(p.grad).sum())
            super().step()

    monkeypatch.setattr(tr.nc, "Adam", Tracking)
    cfg = tr.TrainConfig(max_epochs=3, patience=3, seed=1)
    prompt = PromptPreset.get().ids(ws.vocab)
    tr.fit(ws.dataset("train"), ws.dataset("eval"), lm, qd, cfg, ws.run, ws.qrels, ws.corpus, prompt, depth=10)
    lm_same = all(lm[k].data.tobytes() == v.tobytes() for k, v in before.items())
    moved = [k for k, g in touched.items() if g > 0]
    theta_moved = all(not np.array_equal(qd[k].data, init[k]) for k in moved)
    ok = lm_same and theta_moved and len(moved) == len(init)
    assert record(2, ok, f"LM bitwise unchanged={lm_same}; {len(moved)}/{len(init)} hint tensors had gradient, all changed={theta_moved}")


# 3 ---------------------------------------------------------------------------


def _inst(i):
    d = lambda n: Document(n, "", "", (4,))  # noqa: E731
    return Instance(f"q{i}", "", (4,), d(f"p{i}"), tuple(d(f"n{i}_{j}") for j in range(5)))


def test_c03_batching_combinatorics():
    ok = True
    for b in (1, 2, 3, 4):
        batch = [_inst(i) for i in range(b)]
        triples = tr.build_in_batch_negatives(batch, nc.make_rng(b, "negative-sampling"))
        ok &= len(triples) == b * (2 * b - 1)
        sampled = sorted({t.negative.doc_id for t in triples if t.negative.doc_id.startswith("n")})
        ok &= len(sampled) == b
        for inst in batch:
            mine = sorted(t.negative.doc_id for t in triples if t.query_id == inst.query_id)
            expect = sorted([f"p{j}" for j in range(b) if f"p{j}" != inst.positive.doc_id] + sampled)
            ok &= mine == expect
            ok &= all(t.positive.doc_id == inst.positive.doc_id for t in triples if t.query_id == inst.query_id)
    n4 = len(tr.build_in_batch_negatives([_inst(i) for i in range(4)], nc.make_rng(0)))
    assert record(3, ok and n4 == 28, f"b=1..4 counts and membership exhaustive; b=4 -> {n4}")


# 4 ---------------------------------------------------------------------------


def test_c04_hinge_exactness():
    rng = nc.make_rng(4, "hinge")
    ok = True
    for _ in range(1000):
        ip, ineg = rng.uniform(-50, 0, size=2)
        if rng.random() < 0.1:
            ineg = ip
        v = tr.hinge(ip, ineg)
        ok &= v == (0.0 if ip >= ineg else ineg - ip)
        tp, tn = nc.Param("p", np.array(ip)), nc.Param("n", np.array(ineg))
        out = tr.hinge(tp, tn)
        ok &= float(out.data) == v
        if ip > ineg:
            out.backward()
            ok &= tp.grad == 0.0 and tn.grad == 0.0
    assert record(4, bool(ok), "1000 random pairs exact; zero gradient strictly inside the zero region")


# 5 ---------------------------------------------------------------------------


def _brute(q, d, qe, de, k):
    best = {}
    for i in q:
        for j in d:
            na, nb = math.sqrt(sum(x * x for x in qe[i])), math.sqrt(sum(x * x for x in de[j]))
            c = 0.0 if na == 0 or nb == 0 else sum(a * b for a, b in zip(qe[i], de[j])) / (na * nb)
            best[j] = max(best.get(j, -math.inf), round(c, 12))
    return [t for t, _ in sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))][:k]


def test_c05_selection_oracle():
    V = 80
    lm = LMParams.init(LMConfig(vocab_size=V, model_dim=16, layers=1, heads=2, ffn_dim=16, max_seq_len=16, seed=5))
    qd = QDParams.init(QDConfig("R", model_dim=16, seed=5), lm)
    rng = nc.make_rng(5, "selection")
    qd.f_embed.data[...] = rng.standard_normal((V, 16))
    qe, de = qd.f_embed.data.tolist(), lm.tok_emb.data.tolist()
    bad = 0
    for case in range(1000):
        k = (1, 5, 10)[case % 3]
        q = rng.integers(4, V, size=int(rng.integers(1, 9))).tolist()
        d = rng.integers(4, V, size=int(rng.integers(1, 65))).tolist()
        bad += topk_unique(cosine_matrix(q, d, qd, lm), d, k) != _brute(q, d, qe, de, k)
    assert record(5, bad == 0, f"1000 seeded cases, {bad} mismatches against brute force")


# 6 ---------------------------------------------------------------------------


def test_c06_attention_properties():
    V, D = 60, 16
    lm = LMParams.init(LMConfig(vocab_size=V, model_dim=D, layers=1, heads=2, ffn_dim=16, max_seq_len=16, seed=6))
    qd = QDParams.init(QDConfig("A", model_dim=D, heads=2, seed=6), lm)
    rng = nc.make_rng(6, "attention")
    for name in ("attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.0.w"):
        qd[name].data[...] = rng.standard_normal((D, D)) / math.sqrt(D)
    worst, shapes = 0.0, True
    for _ in range(200):
        q = rng.integers(4, V, size=int(rng.integers(1, 9))).tolist()
        d = rng.integers(4, V, size=int(rng.integers(1, 40))).tolist()
        h = qd_a_hint(q, d, qd, lm).data
        shapes &= h.shape == (len(q), D)
        perm = [d[i] for i in rng.permutation(len(d))]
        worst = max(worst, float(np.abs(qd_a_hint(q, perm, qd, lm).data - h).max()))
    tok = 17
    row = lm.tok_emb.data[tok] @ qd["attn.wv"].data @ qd["attn.wo"].data
    closed = row @ qd["mlp.0.w"].data + qd["mlp.0.b"].data
    single = qd_a_hint([5, 9, 30], [tok], qd, lm).data
    closed_err = float(np.abs(single - np.tile(closed, (3, 1))).max())
    ok = worst <= 1e-6 and shapes and closed_err <= 1e-12
    assert record(6, ok, f"permutation max diff {worst:.1e}; shapes |q|xd={shapes}; single-key closed form err {closed_err:.1e}")


# 7 ---------------------------------------------------------------------------


def test_c07_directional_replication(replication):
    results, secs = replication
    parts = []
    for r in results:
        keys = sorted(r.qpeft)
        q = np.mean([r.qpeft[k] for k in keys])
        u = np.mean([r.upr[k] for k in keys])
        parts.append(f"seed {r.seed}: {q:.2f} vs {u:.2f} (p={r.p:.3f})")
    wins = sum(r.passed() for r in results)
    ok = wins >= 2 and secs < 30 * 60
    assert record(7, ok, f"{wins}/3 seeds with delta>=0.02 and p<0.05; " + "; ".join(parts) + f"; {secs / 60:.1f} min")


# 8 ---------------------------------------------------------------------------


def test_c08_upr_degeneracy():
    V = 50
    lm = LMParams.init(LMConfig(vocab_size=V, model_dim=16, layers=2, heads=2, ffn_dim=32, max_seq_len=96, seed=8)).freeze()
    qd = QDParams.init(QDConfig("A", model_dim=16, seed=8), lm)
    rng = nc.make_rng(8, "upr")
    prompt = list(range(4, 12))
    bad = 0
    for _ in range(100):
        q = rng.integers(4, V, size=int(rng.integers(1, 8))).tolist()
        d = rng.integers(4, V, size=int(rng.integers(1, 50))).tolist()
        a = score_qpeft(q, d, lm, qd, prompt, hint=nc.Tensor(np.zeros((0, 16))))
        b = score_upr(q, d, lm, prompt)
        bad += np.float64(a).tobytes() != np.float64(b).tobytes()
    assert record(8, bad == 0, f"100 random pairs, {bad} not bit-identical")


# 9 ---------------------------------------------------------------------------


def test_c09_bm25_exactness():
    docs = [Document(f"d{i}", "", "", tuple(t)) for i, t in enumerate(
        [[4, 5, 6, 6], [5, 7, 8], [4, 4, 4, 9, UNK], [10, 11], [6, 7, 4, 12, 13, 14]])]
    idx = bm25.build_index(docs)
    N, avgdl = len(docs), sum(len(d.token_ids) for d in docs) / len(docs)

    def oracle(q, d):
        s = 0.0
        for t in q:
            f = d.token_ids.count(t)
            if t == UNK or f == 0:
                continue
            df = sum(t in x.token_ids for x in docs)
            s += math.log(1 + (N - df + 0.5) / (df + 0.5)) * f * 2.2 / (f + 1.2 * (0.25 + 0.75 * len(d.token_ids) / avgdl))
        return s

    worst, same = 0.0, True
    for q in ([4], [5, 6], [4, 7, 9], [6, 6, 12], [UNK, 10], [4, 5, 6, 7, 8, 9, 10]):
        for d in docs:
            worst = max(worst, abs(bm25.bm25_score(q, d, idx) - oracle(q, d)))
        brute = sorted(((d.doc_id, oracle(q, d)) for d in docs if set(q) & set(d.token_ids) - {UNK}), key=lambda e: (-e[1], e[0]))
        got = bm25.search(q, idx, K=len(docs))
        same &= [d for d, _ in got] == [d for d, _ in brute]
    assert record(9, worst <= 1e-9 and same, f"max |score - oracle| {worst:.1e}; search equals brute force={same}")


# 10 --------------------------------------------------------------------------


def test_c10_sum_mean_invariance():
    ws = synthetic_workspace(10, GRADCHECK_SYNTH, depth=10)
    lm = LMParams.init(LMConfig(vocab_size=len(ws.vocab), seed=10)).freeze()
    qd = QDParams.init(QDConfig("A", seed=10), lm)
    prompt = PromptPreset.get().ids(ws.vocab)
    qt = ws.query_tokens
    runs = {}
    for mode in ("sum", "mean"):
        sc = Scorer(lm, prompt, qd, mode)
        runs[mode] = rerank(ws.run, lambda q, docs: sc.score_many([(qt[q], ws.corpus[d].token_ids) for d in docs]))
    diff = sum([d for d, _ in runs["sum"][q]] != [d for d, _ in runs["mean"][q]] for q in ws.run)
    assert record(10, diff == 0, f"{len(ws.run)} queries, {diff} with differing order")


# 11 --------------------------------------------------------------------------


T_VECTORS = [
    [0.1, -0.2, 0.3, 0.05, 0.15],
    [1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0],
    [0.5, 0.25, -0.125, 0.75],
    [-1.0, -2.0, -1.5, -0.5, -3.0],
    [0.01, 0.02, 0.015, -0.005, 0.0, 0.03],
    [3.0, -3.0, 2.9],
    [0.2] * 19 + [0.21],
    [1.0, 0.0] * 10,
    [0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [-0.4, 0.35, -0.3, 0.25, -0.2, 0.15, -0.1, 0.05],
]


def test_c11_ttest():
    worst = 0.0
    for v in T_VECTORS:
        t, p = paired_ttest(np.array(v), np.zeros(len(v)))
        ref = stats.ttest_rel(np.array(v), np.zeros(len(v)))
        worst = max(worst, abs(t - ref.statistic), abs(p - ref.pvalue))
    deg_equal = paired_ttest([0.3, 0.4, 0.5], [0.3, 0.4, 0.5])[1] == 1.0
    deg_const = paired_ttest([2.0, 2.0, 2.0, 2.0], [1.0, 1.0, 1.0, 1.0])[1] == 0.0
    ok = worst <= 1e-6 and deg_equal and deg_const
    assert record(11, ok, f"max |diff| vs reference {worst:.1e}; zero-variance rules p=1 {deg_equal}, p=0 {deg_const}")


# 12 --------------------------------------------------------------------------


def test_c12_determinism(tmp_path):
    a = run_pipeline(tmp_path / "a", seed=3)
    b = run_pipeline(tmp_path / "b", seed=3)
    files = ["lm.ckpt", "index.json", "run.txt", "train/qd.ckpt", "train/train_log.csv", "qpeft/rerank.run",
             "upr/rerank.run", "eval/report.csv", "sweep/sweep.csv"]
    differ = [f for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    assert record(12, not differ, f"{len(files)} artifacts compared; differing: {differ or 'none'}")


# 13 --------------------------------------------------------------------------


def test_c13_protocol_defaults():
    t, q = tr.TrainConfig(), QDConfig()
    cli_cfg, _ = resolve(build_parser().parse_args(["train"]))
    checks = {
        "lr": t.lr == 3e-2 and cli_cfg["lr"] == 3e-2,
        "batch": t.batch_size == 4 and cli_cfg["batch_size"] == 4,
        "epochs": t.max_epochs == 20 and cli_cfg["max_epochs"] == 20,
        "patience": t.patience == 5 and cli_cfg["patience"] == 5,
        "k": q.k == 10 and cli_cfg["k"] == 10,
        "heads": q.heads == 2 and cli_cfg["heads"] == 2,
        "mlp": q.mlp_layers == 1 and cli_cfg["mlp_layers"] == 1,
        "prompt": t.prompt == "p4" and cli_cfg["prompt"] == "p4"
        and PROMPT_PRESETS["p4"] == "given the hints, please generate a question for the input passage",
    }
    bad = [k for k, v in checks.items() if not v]
    assert record(13, not bad, f"lr, batch, epochs, patience, k, heads, mlp, p4 text; mismatches: {bad or 'none'}")
