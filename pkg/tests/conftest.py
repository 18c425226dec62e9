import pytest

from idcloak import frcore, synthdata

ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for the acceptance summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny(tmp_path_factory):
    """4 identities x 20 images of 16x16: 2 probe, 14 seen, 4 unseen each."""
    return synthdata.gen_dataset(tmp_path_factory.mktemp("tiny"), 4, 20, 16, seed=1)


@pytest.fixture(scope="session")
def tiny_pool(tiny):
    specs = [("conv3", 1, 1.0), ("conv5", 2, 0.8), ("conv5", 3, 0.7)]
    return [frcore.train_pool_model(tiny, arch, seed, frac, epochs=15, model_id=f"{arch}-{i}")
            for i, (arch, seed, frac) in enumerate(specs)]
