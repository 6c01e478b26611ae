"""End-to-end API tests over real sockets: HTTP front-end, framed agent link."""

import uuid

import pytest
import requests as requests_lib

from eaas.agent import AgentConfig, AgentServer, EdgeAgent
from eaas.client import ApiClient
from eaas.controller import Controller, ControllerConfig, Role
from eaas.errors import (
    AlreadyDownloaded,
    BadCredentials,
    BindFailure,
    DuplicateUser,
    InvalidTransition,
    Unauthorized,
    UnknownNode,
)
from eaas.httpapi import ControllerServer, SESSION_HEADER
from eaas.protocol import Action, ContainerKind, ContainerState, ServiceRequest
from eaas.runtime import MockBackend, RuntimeDelays


class HttpStack:
    def __init__(self):
        self.controller = Controller(
            ControllerConfig(bind_address="127.0.0.1", agent_port=0, api_port=0)
        )
        self.server = ControllerServer(self.controller, run_monitor=False)
        self.server.start()
        self.backend = MockBackend(RuntimeDelays.zero())
        self.agent = EdgeAgent(
            AgentConfig(
                controller_address="127.0.0.1",
                controller_port=self.server.agent_port,
                agent_port=0,
                advertise_address="127.0.0.1",
                bind_address="127.0.0.1",
            ),
            self.backend,
            node_id="n-http",
        )
        self.agent_server = AgentServer(self.agent)
        self.agent_server.start(announce=False)
        self.agent.announce()
        self.controller.register_user("root", "rootpw", Role.ADMINISTRATOR)
        self.base_url = f"http://127.0.0.1:{self.server.api_port}"
        self.admin = ApiClient(self.base_url)
        self.admin.login("root", "rootpw")
        self.admin.create_user("alice", "alicepw", "owner")
        self.owner = ApiClient(self.base_url)
        self.owner.login("alice", "alicepw")

    def stop(self):
        self.admin.close()
        self.owner.close()
        self.agent_server.stop()
        self.server.stop()


@pytest.fixture(scope="module")
def stack():
    s = HttpStack()
    yield s
    s.stop()


def make_request(node, action, cid, kind=ContainerKind.OS, image=None):
    return ServiceRequest(
        request_id=uuid.uuid4().hex,
        con_type=kind,
        node_id=node,
        action=action,
        container_id=cid,
        app_image=image,
    )


def test_login_bad_credentials(stack):
    client = ApiClient(stack.base_url)
    with pytest.raises(BadCredentials):
        client.login("root", "nope")


def test_missing_session_is_unauthorized(stack):
    client = ApiClient(stack.base_url)
    with pytest.raises(Unauthorized):
        client.nodes()


def test_duplicate_user_conflict(stack):
    with pytest.raises(DuplicateUser):
        stack.admin.create_user("alice", "x", "owner")


def test_owner_cannot_create_user(stack):
    with pytest.raises(Unauthorized):
        stack.owner.create_user("eve", "x", "owner")


def test_nodes_visible(stack):
    nodes = stack.owner.nodes()
    assert [n["nodeId"] for n in nodes] == ["n-http"]
    assert nodes[0]["alive"] is True


def test_os_launch_key_download_once(stack):
    response = stack.owner.request(make_request("n-http", Action.LAUNCH, "web-c1"))
    assert response.new_state is ContainerState.RUNNING
    assert response.key_handle
    key = stack.owner.download_key(response.key_handle)
    assert b"OPENSSH PRIVATE KEY" in key
    with pytest.raises(AlreadyDownloaded):
        stack.owner.download_key(response.key_handle)


def test_admin_cannot_download_owner_key(stack):
    response = stack.owner.request(make_request("n-http", Action.LAUNCH, "web-c2"))
    with pytest.raises(Unauthorized):
        stack.admin.download_key(response.key_handle)


def test_app_launch_returns_result(stack):
    response = stack.owner.request(
        make_request("n-http", Action.LAUNCH, "web-a1", kind=ContainerKind.APP,
                     image="echo:hi")
    )
    assert response.app_result == b"hi"


def test_invalid_transition_maps_to_409(stack):
    stack.owner.request(make_request("n-http", Action.LAUNCH, "web-c3"))
    with pytest.raises(InvalidTransition):
        stack.owner.request(make_request("n-http", Action.START, "web-c3"))


def test_container_listing_scoped_by_owner(stack):
    stack.admin.request(make_request("n-http", Action.LAUNCH, "admin-c1"))
    owner_view = {d["containerId"] for d in stack.owner.containers()}
    assert "admin-c1" not in owner_view
    admin_view = {d["containerId"] for d in stack.admin.containers()}
    assert "admin-c1" in admin_view and "web-c1" in admin_view


def test_state_filter(stack):
    stack.owner.request(make_request("n-http", Action.LAUNCH, "web-c4"))
    stack.owner.request(make_request("n-http", Action.STOP, "web-c4"))
    stopped = {d["containerId"] for d in stack.owner.containers(state="stopped")}
    assert "web-c4" in stopped
    running = {d["containerId"] for d in stack.owner.containers(state="running")}
    assert "web-c4" not in running


def test_metrics_endpoint(stack):
    stack.controller.poll_metrics_tick()
    sample = stack.owner.metrics("n-http")
    assert sample.node_id == "n-http"
    with pytest.raises(UnknownNode):
        stack.owner.metrics("ghost")


def test_monitor_interval_admin_only(stack):
    assert stack.admin.set_monitor_interval(2.5) == 2.5
    with pytest.raises(Unauthorized):
        stack.owner.set_monitor_interval(1.0)


def test_active_users_listing(stack):
    users = stack.admin.active_users()
    names = {u["username"] for u in users}
    assert {"root", "alice"} <= names


def test_unknown_route_404(stack):
    response = requests_lib.get(stack.base_url + "/nope", timeout=5)
    assert response.status_code == 404
    assert response.json()["error"] == "NotFound"


def test_error_docs_carry_class_names(stack):
    response = requests_lib.get(
        stack.base_url + "/nodes", headers={SESSION_HEADER: "bogus"}, timeout=5
    )
    assert response.status_code == 403
    assert response.json()["error"] == "Unauthorized"


def test_bind_failure_on_occupied_port(stack):
    config = ControllerConfig(
        bind_address="127.0.0.1", agent_port=stack.server.agent_port, api_port=0
    )
    other = ControllerServer(Controller(config), run_monitor=False)
    with pytest.raises(BindFailure):
        other.start()


def test_static_ui_serving(tmp_path):
    (tmp_path / "index.html").write_text("<!doctype html><title>eaas</title>")
    controller = Controller(ControllerConfig(bind_address="127.0.0.1", agent_port=0, api_port=0))
    server = ControllerServer(controller, ui_dir=tmp_path, run_monitor=False)
    server.start()
    try:
        base = f"http://127.0.0.1:{server.api_port}"
        assert "eaas" in requests_lib.get(base + "/ui", timeout=5).text
        assert "eaas" in requests_lib.get(base + "/ui/index.html", timeout=5).text
        assert requests_lib.get(base + "/ui/../secret", timeout=5).status_code == 404
    finally:
        server.stop()
