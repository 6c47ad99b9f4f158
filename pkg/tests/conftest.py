import pytest

from pdws.corpus import SynthSpec, gen_synth_corpus


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """About 200 control-train utterances plus small dysarthric train/enroll/eval splits."""
    root = tmp_path_factory.mktemp("toy_corpus")
    spec = SynthSpec(n_keywords=4, n_filler_classes=6, n_confusers=1, control_speakers=4, dysarthric_speakers=2,
                     target_speakers=1, wake_reps=5, filler_reps=5, enroll_reps=2, seed=3)
    records = gen_synth_corpus(spec, root)
    return root, records


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for a criterion and fail the test when it does not hold."""

    def record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE_LINES.append(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
