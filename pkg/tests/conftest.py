import sys
import time

import pytest

from eaas.agent import AgentConfig, EdgeAgent
from eaas.clock import FakeClock
from eaas.controller import Controller, ControllerConfig, Role
from eaas.runtime import MockBackend, RuntimeDelays
from eaas.transport import LocalFrameLink
from eaas.protocol import Ack


def wait_until(predicate, timeout=5.0, interval=0.01, message="condition"):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return
        time.sleep(interval)
    raise AssertionError(f"timed out waiting for {message}")


@pytest.fixture
def fake_clock():
    return FakeClock()


@pytest.fixture
def local_network():
    return LocalFrameLink()


def make_controller(clock=None, network=None, **config_kwargs) -> Controller:
    config = ControllerConfig(bind_address="127.0.0.1", **config_kwargs)
    return Controller(config, agent_link=network, clock=clock)


def register_offer_endpoint(network: LocalFrameLink, controller: Controller,
                            address="127.0.0.1", port=1):
    def handler(msg):
        controller.handle_offer(msg)
        return Ack(ok=True)

    network.register(address, port, handler)


def seed_admin(controller: Controller, username="root", password="rootpw") -> str:
    controller.register_user(username, password, Role.ADMINISTRATOR)
    return controller.authenticate(username, password)


def seed_owner(controller: Controller, admin_token: str, username="alice",
               password="alicepw") -> str:
    controller.register_user(username, password, Role.APPLICATION_OWNER,
                             session_token=admin_token)
    return controller.authenticate(username, password)


class LocalStack:
    """Controller plus mock agents wired over the in-process frame network."""

    def __init__(self, clock=None, n_agents=1, delays=None, scripts=None, **config_kwargs):
        self.clock = clock or FakeClock()
        self.network = LocalFrameLink()
        self.controller = make_controller(clock=self.clock, network=self.network,
                                          **config_kwargs)
        register_offer_endpoint(self.network, self.controller)
        self.agents: list[EdgeAgent] = []
        self.backends: list[MockBackend] = []
        for i in range(n_agents):
            backend = MockBackend(
                delays if delays is not None else RuntimeDelays.zero(),
                clock=self.clock,
                script=(scripts or {}).get(i),
            )
            config = AgentConfig(
                controller_address="127.0.0.1",
                controller_port=1,
                agent_port=7700 + i,
                advertise_address="127.0.0.1",
            )
            agent = EdgeAgent(config, backend, clock=self.clock,
                              controller_link=self.network, node_id=f"n{i}")
            agent.advertised_port = config.agent_port
            self.network.register("127.0.0.1", config.agent_port, agent.handle_message)
            agent.announce()
            self.agents.append(agent)
            self.backends.append(backend)
        self.admin_token = seed_admin(self.controller)
        self.owner_token = seed_owner(self.controller, self.admin_token)

    def kill_agent(self, index: int) -> None:
        agent = self.agents[index]
        self.network.unregister("127.0.0.1", agent.advertised_port)


def pytest_runtest_logreport(report):
    # one visible pass/fail line per acceptance criterion
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::", 1)[1]
        sys.stderr.write(f"\nACCEPTANCE {name}: {report.outcome.upper()}\n")
