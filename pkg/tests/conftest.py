import numpy as np
import pytest

from tscbench.agent.checkpoint import load_checkpoint, save_checkpoint
from tscbench.agent.nets import Architecture
from tscbench.agent.ppo import PpoConfig, train
from tscbench.env import make_env_factory
from tscbench.sim import SimConfig


@pytest.fixture(scope="session")
def trained_checkpoint(tmp_path_factory):
    """Default-config PPO agent (seed 0), trained once per session."""
    sim = SimConfig(emergency_prob=0.0)
    cfg = PpoConfig(seed=0)
    weights, curve = train(make_env_factory(sim), cfg, Architecture.for_sim(sim))
    path = tmp_path_factory.mktemp("ckpt") / "agent.json"
    save_checkpoint(weights, path, cfg.to_dict())
    return path, curve


@pytest.fixture(scope="session")
def trained_weights(trained_checkpoint):
    return load_checkpoint(trained_checkpoint[0])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance reporting -----------------------------------------------------

ACCEPTANCE: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    entry = ACCEPTANCE.setdefault(marker.args[0], [True, "", item.name])
    if rep.failed:
        entry[0] = False
        if call.excinfo is not None and not entry[1]:
            entry[1] = call.excinfo.exconly().splitlines()[0][:160]


@pytest.fixture
def record(request):
    """Attach a one-line result summary to the current acceptance criterion."""
    n = request.node.get_closest_marker("criterion").args[0]

    def note(detail):
        ACCEPTANCE.setdefault(n, [True, "", request.node.name])[1] = detail

    return note


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail, name = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {name}  {detail}")
