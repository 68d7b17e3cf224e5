import os

import torch

# one thread keeps float results reproducible across runs on the same machine
torch.set_num_threads(int(os.environ.get("CAAE_TEST_THREADS", "1")))

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
