import time
from pathlib import Path

import pytest

from qpeft.cli import main

# small settings so a full command chain finishes in well under a minute
FAST = ["--steps", "30", "--train-size", "8", "--eval-size", "6", "--max-epochs", "2", "--patience", "1"]


def cli(*args) -> int:
    return main([str(a) for a in args])


def run_pipeline(out: Path, seed: int = 0, sweep: bool = True) -> Path:
    """synth -> build-vocab -> pretrain-lm -> index -> retrieve -> train -> rerank -> eval [-> sweep]."""
    out = Path(out)
    d = out / "data"
    assert cli("synth", "--seed", seed, "--out", d) == 0
    assert cli("build-vocab", "--corpus", d / "corpus.tsv", "--queries", d / "queries.tsv", "--out", out) == 0
    common = ["--corpus", d / "corpus.tsv", "--vocab", out / "vocab.txt", "--seed", seed]
    assert cli("pretrain-lm", *common, *FAST, "--out", out) == 0
    assert cli("index", *common, "--out", out) == 0
    assert cli("retrieve", *common, "--index", out / "index.json", "--queries", d / "queries.tsv", "--out", out) == 0
    split = ["--qrels", d / "qrels.tsv", "--run", out / "run.txt", "--lm", out / "lm.ckpt"]
    assert cli("train", *common, *split, *FAST, "--queries", d / "queries.train.tsv", "--eval-queries", d / "queries.eval.tsv", "--out", out / "train") == 0
    assert cli("rerank", *common, *split, "--queries", d / "queries.test.tsv", "--checkpoint", out / "train" / "qd.ckpt", "--out", out / "qpeft") == 0
    assert cli("rerank", *common, *split, "--queries", d / "queries.test.tsv", "--out", out / "upr") == 0
    test_run = out / "run.test.txt"
    test_ids = {line.split("\t")[0] for line in (d / "queries.test.tsv").read_text().splitlines()}
    test_run.write_text("".join(line + "\n" for line in (out / "run.txt").read_text().splitlines() if line.split()[0] in test_ids))
    systems = f"upr={out / 'upr' / 'rerank.run'},qpeft={out / 'qpeft' / 'rerank.run'}"
    assert cli("eval", "--run", test_run, "--systems", systems, "--qrels", d / "qrels.tsv", "--answers", d / "answers.tsv", "--corpus", d / "corpus.tsv", "--out", out / "eval") == 0
    if sweep:
        assert cli(
            "sweep", *common, *split, *FAST, "--queries", d / "queries.train.tsv", "--eval-queries", d / "queries.eval.tsv",
            "--test-queries", d / "queries.test.tsv", "--train-sizes", "4,8", "--seeds", "0", "--prompts", "p4", "--max-epochs", "1",
            "--out", out / "sweep",
        ) == 0
    return out


ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, ok: bool, detail: str) -> bool:
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def replication():
    """Full train-and-compare run on seeds 0, 1, 2 with default settings."""
    from qpeft.pipeline import replicate

    t0 = time.perf_counter()
    results = [replicate(seed) for seed in (0, 1, 2)]
    return results, time.perf_counter() - t0
