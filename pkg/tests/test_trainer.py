import json
import math
import struct
from collections import Counter

import numpy as np
import pytest

from qpeft import numcore as nc
from qpeft import trainer as tr
from qpeft.minilm import LMConfig, LMParams, embed, lm_forward
from qpeft.pipeline import GRADCHECK_SYNTH, synthetic_workspace
from qpeft.qdmodule import QDConfig, QDParams
from qpeft.scoring import OverflowCounter, PromptPreset, Scorer, assemble_input
from qpeft.textdata import Document, Instance


def mkdoc(name, ids=(4, 5)):
    return Document(name, "", "", tuple(ids))


def mkinst(i, n_neg=3):
    return Instance(f"q{i}", "", (4, 5), mkdoc(f"p{i}"), tuple(mkdoc(f"n{i}_{j}") for j in range(n_neg)))


@pytest.mark.parametrize("b", [1, 2, 3, 4])
def test_in_batch_counts(b):
    batch = [mkinst(i) for i in range(b)]
    triples = tr.build_in_batch_negatives(batch, nc.make_rng(0))
    assert len(triples) == b * (2 * b - 1)
    for inst in batch:
        mine = [t for t in triples if t.query_id == inst.query_id]
        assert len(mine) == 2 * b - 1
        assert all(t.positive == inst.positive for t in mine)
        assert all(t.negative != inst.positive for t in mine)


def test_in_batch_b2_hand():
    batch = [mkinst(1), mkinst(2)]
    triples = tr.build_in_batch_negatives(batch, nc.make_rng(5))
    sampled = {t.negative.doc_id for t in triples if t.negative.doc_id.startswith("n")}
    n1 = next(s for s in sampled if s.startswith("n1"))
    n2 = next(s for s in sampled if s.startswith("n2"))
    got = Counter((t.query_id, t.positive.doc_id, t.negative.doc_id) for t in triples)
    want = Counter([("q1", "p1", "p2"), ("q1", "p1", n1), ("q1", "p1", n2), ("q2", "p2", "p1"), ("q2", "p2", n1), ("q2", "p2", n2)])
    assert got == want


def test_in_batch_errors():
    with pytest.raises(ValueError):
        tr.build_in_batch_negatives([mkinst(1), mkinst(1)], nc.make_rng(0))
    only_pos = Instance("q9", "", (4,), mkdoc("p9"), (mkdoc("p1"),))
    with pytest.raises(ValueError):
        tr.build_in_batch_negatives([mkinst(1), only_pos], nc.make_rng(0))


def test_pool_excludes_batch_positives():
    a = Instance("qa", "", (4,), mkdoc("pa"), (mkdoc("pb"), mkdoc("na")))
    b = Instance("qb", "", (4,), mkdoc("pb"), (mkdoc("pa"), mkdoc("nb")))
    for seed in range(20):
        negs = {t.negative.doc_id for t in tr.build_in_batch_negatives([a, b], nc.make_rng(seed))}
        assert {"na", "nb"} <= negs


def test_hinge_examples():
    assert tr.hinge(-5.0, -7.0) == 0.0
    assert tr.hinge(-7.0, -5.0) == 2.0
    assert tr.hinge(-3.0, -3.0) == 0.0


# ---------------------------------------------------------------------------
# losses on a toy LM


@pytest.fixture
def lm():
    return LMParams.init(LMConfig(vocab_size=20, model_dim=8, layers=1, heads=2, ffn_dim=16, max_seq_len=48, seed=2, emb_std=0.5)).freeze()


def test_loss_point_uniform():
    lm10 = LMParams.init(LMConfig(vocab_size=10, model_dim=8, layers=1, heads=2, ffn_dim=16, max_seq_len=48)).freeze()
    lm10["out.w"].data[...] = 0.0
    val = tr.loss_point(Scorer(lm10, [5]), [4, 6, 7], mkdoc("d", (8, 9))).item()
    assert val == pytest.approx(3 * math.log(10), abs=1e-12)
    assert val == pytest.approx(6.907755, abs=1e-6)


def test_loss_point_decomposition(lm):
    sc = Scorer(lm, [5, 6])
    q, d = [7, 8, 9], mkdoc("d", (10, 11, 12))
    got = tr.loss_point(sc, q, d).item()
    ids = [10, 11, 12, 5, 6]
    total = 0.0
    for l, tok in enumerate(q):
        logits = lm_forward(lm, embed(lm, ids + q[:l])).data[-1]
        total += logits[tok] - (logits.max() + np.log(np.exp(logits - logits.max()).sum()))
    assert got == pytest.approx(-total, abs=1e-10)
    assert got >= 0


def test_loss_total_components(lm):
    qd = QDParams.init(QDConfig("A", model_dim=8, seed=1), lm)
    sc = Scorer(lm, [5, 6], qd)
    q, pos, neg = (7, 8), mkdoc("p", (10, 11, 12)), mkdoc("n", (13, 7, 8))
    t = tr.Triple("q", q, pos, neg)
    total = tr.loss_total(sc, t).item()
    point = tr.loss_point(sc, q, pos).item()
    pair = tr.loss_pair(sc, q, pos, neg).item()
    assert total == pytest.approx(point + pair, abs=1e-12)
    assert total >= point


def test_loss_total_gradient_fd(lm):
    qd = QDParams.init(QDConfig("A", model_dim=8, seed=4), lm)
    sc = Scorer(lm, [5, 6], qd)
    t = tr.Triple("q", (7, 8), mkdoc("p", (10, 11, 12)), mkdoc("n", (13, 7, 9)))
    rep = nc.finite_diff_check(lambda: tr.loss_total(sc, t), list(qd), eps=1e-3, sample=60)
    assert rep.max_rel_error < 1e-4


def test_hinge_gradient_zero_inside(lm):
    i_pos = nc.Param("p", np.array(-2.0))
    i_neg = nc.Param("n", np.array(-5.0))
    tr.hinge(i_pos, i_neg).backward()
    assert i_pos.grad == 0.0 and i_neg.grad == 0.0


def test_batch_loss_is_mean_of_triples(lm):
    qd = QDParams.init(QDConfig("R", model_dim=8, k=3), lm)
    sc = Scorer(lm, [5], qd)
    batch = [Instance(f"q{i}", "", (7 + i, 8), mkdoc(f"p{i}", (10 + i, 11, 12)), (mkdoc(f"n{i}", (13 + i, 4)),)) for i in range(3)]
    triples = tr.build_in_batch_negatives(batch, nc.make_rng(1))
    got = tr.batch_loss(sc, triples).item()
    ref = np.mean([tr.loss_total(sc, t).item() for t in triples])
    assert got == pytest.approx(ref, abs=1e-10)


# ---------------------------------------------------------------------------
# assembly


def test_assemble_examples(lm):
    doc = [10, 11, 12, 13, 14]
    prompt = list(range(4, 13))
    flat = assemble_input(doc, None, prompt, lm)
    assert np.array_equal(flat.data, embed(lm, doc + prompt).data)
    hint = nc.Tensor(np.ones((10, 8)))
    x = assemble_input(doc, hint, prompt, lm)
    assert x.shape == (24, 8)
    assert x.data[:5].tobytes() == embed(lm, doc).data.tobytes()
    assert np.array_equal(x.data[5:15], hint.data)


def test_assemble_overflow(lm):
    c = OverflowCounter()
    x = assemble_input(list(range(4, 20)) * 3, None, [5, 6], lm, query_len=4, counter=c)
    assert x.shape[0] == 48 - 4
    assert c.truncated == 1


# ---------------------------------------------------------------------------
# training loop


def test_protocol_defaults():
    cfg = tr.TrainConfig()
    assert (cfg.lr, cfg.batch_size, cfg.max_epochs, cfg.patience, cfg.prompt) == (3e-2, 4, 20, 5, "p4")
    with pytest.raises(ValueError):
        tr.TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        tr.TrainConfig(patience=30, max_epochs=20)


@pytest.fixture(scope="module")
def tiny():
    ws = synthetic_workspace(0, GRADCHECK_SYNTH, depth=10)
    lm = LMParams.init(LMConfig(vocab_size=len(ws.vocab), model_dim=16, layers=1, heads=2, ffn_dim=32, max_seq_len=64)).freeze()
    return ws, lm


def _fit(ws, lm, variant="A", epochs=2, seed=0):
    qd = QDParams.init(QDConfig(variant, model_dim=16, seed=seed), lm)
    cfg = tr.TrainConfig(batch_size=2, max_epochs=epochs, patience=min(2, max(epochs, 1)), seed=seed, train_size=6, eval_size=5)
    prompt = PromptPreset.get().ids(ws.vocab)
    return qd, tr.fit(ws.dataset("train"), ws.dataset("eval"), lm, qd, cfg, ws.run, ws.qrels, ws.corpus, prompt, depth=10)


def test_fit_zero_epochs(tiny):
    ws, lm = tiny
    init = QDParams.init(QDConfig("A", model_dim=16), lm).snapshot()
    qd, res = _fit(ws, lm, epochs=0)
    assert len(res.log) == 1 and res.best_epoch == 0
    assert 0.0 <= res.log[0].eval_R10 <= 1.0
    for k, v in init.items():
        assert qd[k].data.tobytes() == v.tobytes()


def test_fit_keeps_lm_frozen_and_is_deterministic(tiny, tmp_path):
    ws, lm = tiny
    before = lm.snapshot()
    qd1, r1 = _fit(ws, lm, "A")
    qd2, r2 = _fit(ws, lm, "A")
    for k, v in before.items():
        assert lm[k].data.tobytes() == v.tobytes()
    tr.save_checkpoint(tmp_path / "a.ckpt", r1.best_state, {"x": 1})
    tr.save_checkpoint(tmp_path / "b.ckpt", r2.best_state, {"x": 1})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert [(e.epoch, e.eval_R10) for e in r1.log] == [(e.epoch, e.eval_R10) for e in r2.log]
    assert any(not np.array_equal(qd1[k].data, v) for k, v in QDParams.init(QDConfig("A", model_dim=16), lm).snapshot().items())


def test_fit_non_finite_aborts(tiny):
    ws, lm = tiny
    qd = QDParams.init(QDConfig("R", model_dim=16), lm)
    qd["mlp.0.w"].data[0, 0] = np.nan
    cfg = tr.TrainConfig(batch_size=2, max_epochs=1, patience=1, train_size=2, eval_size=2)
    with pytest.raises((tr.TrainingError, nc.NumericError)):
        tr.fit(ws.dataset("train"), ws.dataset("eval"), lm, qd, cfg, ws.run, ws.qrels, ws.corpus, [5], depth=10)


def test_log_roundtrip(tmp_path):
    log = [tr.EpochLog(0, math.nan, 0.5, 0.5), tr.EpochLog(1, 12.25, 0.6, 0.6)]
    tr.write_log(tmp_path / "log.csv", log)
    text = (tmp_path / "log.csv").read_text()
    assert text.splitlines()[0] == "epoch,train_loss,eval_R10,best_so_far"
    back = tr.read_log(tmp_path / "log.csv")
    assert back[1] == log[1] and math.isnan(back[0].train_loss)


# ---------------------------------------------------------------------------
# checkpoint container


def test_checkpoint_layout(tmp_path):
    tensors = {"b": np.arange(6.0).reshape(2, 3), "a": np.array([[1.5]])}
    tr.save_checkpoint(tmp_path / "x.ckpt", tensors, {"variant": "A"})
    raw = (tmp_path / "x.ckpt").read_bytes()
    assert raw[:8] == b"QPEFTCKP"
    version, n = struct.unpack_from("<IQ", raw, 8)
    assert version == 1
    manifest = json.loads(raw[20 : 20 + n])
    assert [t["name"] for t in manifest["tensors"]] == ["a", "b"]
    assert manifest["tensors"][1] == {"name": "b", "shape": [2, 3], "offset": 4}
    payload = np.frombuffer(raw[20 + n :], dtype="<f4")
    assert payload.tolist() == [1.5, 0, 1, 2, 3, 4, 5]
    meta, back = tr.load_checkpoint(tmp_path / "x.ckpt")
    assert meta == {"variant": "A"}
    assert np.array_equal(back["b"], tensors["b"])


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOTACKPT" + bytes(20))
    with pytest.raises(ValueError):
        tr.load_checkpoint(tmp_path / "bad")
