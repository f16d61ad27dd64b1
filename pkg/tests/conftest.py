import numpy as np
import pytest

from relattn.model import ModelConfig, Seq2Seq
from relattn.text import SEP, build_vocab, synth_corpus

_CRITERIA: dict[str, tuple[int, str]] = {}
_OUTCOMES: dict[str, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _CRITERIA[item.nodeid] = (mark.args[0], mark.args[1])


def pytest_runtest_logreport(report):
    if report.nodeid not in _CRITERIA:
        return
    if report.failed:
        _OUTCOMES[report.nodeid] = "FAIL"
    elif report.when == "call" and report.nodeid not in _OUTCOMES:
        _OUTCOMES[report.nodeid] = "SKIP" if report.skipped else "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    rows = sorted((_CRITERIA[n][0], _CRITERIA[n][1], _OUTCOMES[n]) for n in _OUTCOMES)
    for num, title, outcome in rows:
        terminalreporter.write_line(f"criterion {num}: {title}: {outcome}")


@pytest.fixture(scope="session")
def small_corpus():
    return synth_corpus(3, 6)


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    return build_vocab(small_corpus.texts(), specials=[SEP])


def tiny_config(vocab_size: int, **kw) -> ModelConfig:
    base = dict(d_model=16, n_heads=2, n_enc_layers=2, n_dec_layers=2, d_ff=24, max_src_len=96, max_tgt_len=12)
    base.update(kw)
    return ModelConfig(vocab_size=vocab_size, **base)


@pytest.fixture
def tiny_model(small_vocab):
    return Seq2Seq.init(tiny_config(len(small_vocab)), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
