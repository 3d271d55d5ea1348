from __future__ import annotations

import os
import random
import socket
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT / "src") not in sys.path:
    sys.path.insert(0, str(ROOT / "src"))

from chainiot.localnet import LocalNetwork  # noqa: E402

_used_ports: set[int] = set()


def _free(port: int) -> bool:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            s.bind(("127.0.0.1", port))
        except OSError:
            return False
    return True


def free_port_block(n: int = 12) -> int:
    """Base of ``n`` consecutive free ports, never handed out twice in one session."""
    rng = random.Random()
    for _ in range(500):
        base = rng.randrange(10000, 32000 - n)  # below the ephemeral range
        span = range(base, base + n)
        if any(p in _used_ports for p in span):
            continue
        if all(_free(p) for p in span):
            _used_ports.update(span)
            return base
    raise RuntimeError("no free port block")


@pytest.fixture
def localnet() -> LocalNetwork:
    return LocalNetwork()


@pytest.fixture
def port_base() -> int:
    return free_port_block()


class RunningNetwork:
    """A live multi-process network in a temp dir; torn down by the fixture."""

    def __init__(self, tmp: Path, **kw):
        from chainiot.network import network_up
        from chainiot.topology import default_topology

        self.cfg = default_topology(str(tmp / "net"), base_port=free_port_block(), **kw)
        self.info = network_up(self.cfg)

    @property
    def data_dir(self) -> str:
        return self.cfg.data_dir

    def down(self):
        from chainiot.network import network_down

        return network_down(self.data_dir)


@pytest.fixture
def make_network(tmp_path_factory):
    nets: list[RunningNetwork] = []

    def make(**kw) -> RunningNetwork:
        net = RunningNetwork(tmp_path_factory.mktemp("net"), **kw)
        nets.append(net)
        return net

    yield make
    for n in nets:
        n.down()


@pytest.fixture(scope="module")
def shared_network(tmp_path_factory):
    """One default-topology network (2 orgs x 2 peers, 3 orderers) per test module."""
    from chainiot.ordering.cutter import BatchConfig

    net = RunningNetwork(tmp_path_factory.mktemp("shared"), batch=BatchConfig(batch_timeout=0.3))
    yield net
    net.down()


# -- acceptance reporting -------------------------------------------------------------

_criteria: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        detail = ""
        crash = getattr(rep.longrepr, "reprcrash", None)
        if rep.outcome == "failed" and crash is not None:
            detail = crash.message.splitlines()[0][:160]
        prev = _criteria.get(n)
        if prev is not None and prev[0] == "FAIL":
            return  # one failing part fails the whole criterion
        _criteria[n] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        status, title, detail = _criteria[n]
        line = f"criterion {n:>2}: {status}  {title}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)


def pytest_collection_modifyitems(config, items):
    if os.environ.get("CHAINIOT_SKIP_NETWORK"):
        skip = pytest.mark.skip(reason="CHAINIOT_SKIP_NETWORK set")
        for item in items:
            if "network" in item.keywords:
                item.add_marker(skip)
