from pathlib import Path

import pytest

from gosm import cli

ROOT = Path(__file__).resolve().parents[1]
SYNTHETIC_INI = ROOT / "configs" / "synthetic.ini"


def run_cli(*argv) -> int:
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="session")
def small_run(tmp_path_factory):
    """A 6-frame 40x30 synthetic dataset and its reconstructed map."""
    d = tmp_path_factory.mktemp("small")
    assert run_cli("synth", d, "--frames", 6, "--width", 40, "--height", 30, "--focal", 50) == 0
    provider = ["--fixtures", d / "fixtures", "--embeddings", d / "embeddings.txt"]
    assert run_cli("--config", SYNTHETIC_INI, "reconstruct", d / "manifest.json", d / "map.gsm", *provider) == 0
    return d, provider


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
