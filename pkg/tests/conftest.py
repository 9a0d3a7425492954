import pytest

from toy import train_toy


@pytest.fixture(scope="session")
def toy_run():
    """The seed-0 toy model, trained once per session, with Polyak snapshots."""
    return train_toy(seed=0, snapshots=True)


# acceptance criterion number -> (passed, detail), filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
