import time

import pytest

from noduleproj.experiment import ExperimentConfig, make_split, run_end_to_end

_ACCEPTANCE = []


@pytest.fixture
def criterion(capsys):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
        _ACCEPTANCE.append(line)
        with capsys.disabled():
            print(f"\n[acceptance] {line}")
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def e2e_run(tmp_path_factory):
    """Default phantom run (small AttentionMIP, 30 train / 10 held out), trained once per session."""
    cfg = ExperimentConfig()
    split = make_split(cfg)
    out = tmp_path_factory.mktemp("e2e")
    t0 = time.perf_counter()
    model, cands, result = run_end_to_end(cfg, seed=0, out_dir=str(out), split=split)
    return {"cfg": cfg, "split": split, "model": model, "candidates": cands,
            "result": result, "out_dir": out, "seconds": time.perf_counter() - t0}
