from pathlib import Path

import pytest

from poolbench.data import generate_synthetic_corpus, split_corpus, write_jsonl

FIXTURES = Path(__file__).parent / "fixtures"

TINY_CONFIG = """\
base_lr = 1e-3
epochs = 1
micro_batch = 8
grad_accum = 2
max_seq_len = 64
attention_heads = 2
num_layers = 1
hidden = 8
heads = 2
ffn_dim = 16
vocab_size = 120
max_positions = 64
train_path = train.jsonl
eval_path = test.jsonl
"""


def write_config(directory: Path, text: str, name: str = "run.cfg") -> Path:
    path = directory / name
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def tiny_workspace(tmp_path_factory):
    """A 48/6/6 synthetic split plus a one-layer config next to it."""
    root = tmp_path_factory.mktemp("tiny")
    train, dev, test = split_corpus(generate_synthetic_corpus(30, seed=2), seed=2)
    for name, part in (("train", train), ("dev", dev), ("test", test)):
        write_jsonl(part, root / f"{name}.jsonl")
    return root, write_config(root, TINY_CONFIG)


# acceptance criteria report: test_acceptance records one verdict per criterion
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}  {title}: {detail}")
