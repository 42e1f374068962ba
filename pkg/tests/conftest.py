import json
from pathlib import Path

import numpy as np
import pytest

from xsyscomb.conformer import ConformerConfig, ConformerModel
from xsyscomb.corpus import CorpusConfig, FeatureSequence, generate_corpus
from xsyscomb.rng import Stream
from xsyscomb.tdnn import TdnnConfig, TdnnModel

FIXTURES = Path(__file__).parent / "fixtures"

TINY_TDNN = TdnnConfig(feat_dim=4, vocab_size=3, conv_layers=0, hidden_dim=8, bottleneck_dim=4,
                       offsets=((-1, 0, 1), (-1, 0, 1)), dropout=0.0)
TINY_CFM = ConformerConfig(feat_dim=4, vocab_size=3, enc_blocks=1, dec_blocks=1, heads=2, d_model=8,
                           ffn_dim=16, subsample_channels=2, dropout=0.0)
SMALL_CORPUS = CorpusConfig(n_train_speakers=3, train_utts_per_speaker=8, n_test_speakers=2,
                            test_utts_per_speaker=4, adapt_utts_per_speaker=3)


def random_utterance(T: int, D: int, seed: int, speaker: str = "spk", tokens=(0,)) -> FeatureSequence:
    frames = Stream(seed, "test/frames").normal((T, D))
    return FeatureSequence(frames, speaker, f"{speaker}-{seed:04d}-{T}", tuple(tokens))


def sharpen(model, scale: float) -> None:
    """Scale the output layer so that tiny random models have peaked distributions."""
    out = model.output if hasattr(model, "output") else model.ctc_head
    out.weight.data = out.weight.data * scale


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(SMALL_CORPUS, 11)


@pytest.fixture
def tiny_tdnn():
    return TdnnModel(TINY_TDNN, 3).eval()


@pytest.fixture
def tiny_cfm():
    return ConformerModel(TINY_CFM, 3).eval()


@pytest.fixture(scope="session")
def tiny_manifest_raw():
    return json.loads((FIXTURES / "tiny_manifest.json").read_text())


# ------------------------------------------------------ acceptance report

ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


def record_acceptance(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d} {title}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


np.set_printoptions(precision=6, suppress=True)
