import numpy as np
import pytest

from bottomup_mwp.config import ModelConfig
from bottomup_mwp.dataio import SynthConfig, make_record, synth_generate
from bottomup_mwp.encoder import Vocab
from bottomup_mwp.engine import Model

TINY = ModelConfig(d_model=16, n_heads=2, n_layers=1, d_ff=32, d_op=8, head_hidden=16, comb_heads=2)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def synth_small():
    return synth_generate(SynthConfig(num_records=40, max_layers=3, seed=0))


@pytest.fixture
def tiny_model(synth_small):
    return Model(TINY, Vocab.build(synth_small), [], seed=0, l_max=3, beam_k=4)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def simple_record(rid="r", equation="x=n0+n1", answer=5):
    return make_record(rid, "tom has 2 apples . sam has 3 apples . how many apples ?", equation, answer)


# --- acceptance reporting -----------------------------------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.fixture
def detail(request):
    """Free-form measurements a criterion test wants shown next to its verdict."""
    notes: list[str] = []
    request.node.criterion_notes = notes
    return notes


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "passed": True, "notes": []})
    entry["passed"] &= report.passed
    entry["notes"] += getattr(item, "criterion_notes", [])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        verdict = "PASS" if entry["passed"] else "FAIL"
        notes = "; ".join(entry["notes"])
        terminalreporter.write_line(f"criterion {number} [{verdict}] {entry['title']}" + (f" | {notes}" if notes else ""))
