import dataclasses

import pytest

from amtss.config import RunConfig
from amtss.data import SyntheticCorpusSpec
from amtss.distillation import DistillConfig, FineTuneConfig
from amtss.models import EncoderConfig
from amtss.scheduler import AdaptiveConfig


def tiny_config(seed: int = 0, languages=("L0", "L1", "L2"), **kw) -> RunConfig:
    """A run config small enough for unit tests: seconds, not minutes."""
    corpus = SyntheticCorpusSpec(languages=list(languages), num_classes=3, vocab_size=150, seq_len=(4, 10),
                                 split_sizes={"train": 32, "valid": 12, "test": 12}, seed=seed)
    cfg = RunConfig(
        corpus=corpus,
        teacher_encoder=EncoderConfig(kind="mean_pool_mlp", vocab_size=150, embed_dim=12, num_layers=1,
                                      ffn_dim=12, max_seq_len=10, dropout=0.0),
        student_encoder=EncoderConfig(vocab_size=150, embed_dim=8, num_layers=1, num_heads=2, ffn_dim=8,
                                      max_seq_len=10),
        finetune=FineTuneConfig(max_epochs=3, patience=2, batch_size=16),
        distill=DistillConfig(batch_size=16),
        adaptive=AdaptiveConfig(max_epochs=3, top_k=2, epsilon=1e-6),
    )
    return dataclasses.replace(cfg.with_seed(seed), **kw)


@pytest.fixture
def tiny():
    return tiny_config


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
