import pytest

from fgam import corpus, pe_format


@pytest.fixture(scope="session")
def small_corpus():
    return corpus.generate(corpus.CorpusSpec(n_malware=12, n_benign=12, seed=3))


@pytest.fixture(scope="session")
def sample_pe(small_corpus):
    return small_corpus[0].data


@pytest.fixture(scope="session")
def one_section_pe():
    plan = corpus.SectionPlan(".text", bytes(range(256)) * 4, pe_format.IMAGE_SCN_CNT_CODE | pe_format.IMAGE_SCN_MEM_READ)
    return corpus.assemble_pe([plan])


ACCEPTANCE_LINES = pytest.StashKey[list]()


@pytest.fixture
def acceptance_line(request):
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash.setdefault(ACCEPTANCE_LINES, [])

    def emit(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        lines.append(line)
        return ok
    return emit


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
