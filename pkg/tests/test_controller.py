"""Controller behaviour: registry, users, request brokering, keys, monitor."""

import uuid
from concurrent.futures import ThreadPoolExecutor

import pytest
from hypothesis import given, settings, strategies as st

from conftest import LocalStack, make_controller, seed_admin, seed_owner
from eaas.clock import FakeClock
from eaas.controller import Controller, ControllerConfig, Role
from eaas.errors import (
    AgentError,
    AlreadyDownloaded,
    BadCredentials,
    DuplicateUser,
    Expired,
    InvalidTransition,
    NodeUnreachable,
    Unauthorized,
    UnknownHandle,
    UnknownNode,
)
from eaas.protocol import (
    Action,
    ContainerKind,
    ContainerState,
    NodeOffer,
    Outcome,
    ServiceRequest,
    next_state,
)
from eaas.store import SqliteStore

OS = ContainerKind.OS
APP = ContainerKind.APP


def request(node, action, container_id, kind=OS, image=None):
    return ServiceRequest(
        request_id=uuid.uuid4().hex,
        con_type=kind,
        node_id=node,
        action=action,
        container_id=container_id,
        app_image=image,
    )


class TestDiscovery:
    def test_hundred_duplicate_offers_one_record(self, fake_clock):
        controller = make_controller(clock=fake_clock)
        offer = NodeOffer("n1", "10.0.0.5", 7700)
        for _ in range(100):
            controller.handle_offer(offer)
        assert len(controller.nodes) == 1

    def test_upsert_refreshes_but_keeps_registration_time(self, fake_clock):
        controller = make_controller(clock=fake_clock)
        first = controller.handle_offer(NodeOffer("n1", "10.0.0.5", 7700))
        registered = controller.nodes["n1"].registered_at_ms
        fake_clock.advance(5)
        second = controller.handle_offer(NodeOffer("n1", "10.0.0.5", 7800))
        record = controller.nodes["n1"]
        assert first.inserted and not second.inserted
        assert record.port == 7800
        assert record.registered_at_ms == registered
        assert record.last_seen_ms > registered

    def test_two_distinct_nodes(self, fake_clock):
        controller = make_controller(clock=fake_clock)
        controller.handle_offer(NodeOffer("n1", "10.0.0.5", 7700))
        controller.handle_offer(NodeOffer("n2", "10.0.0.6", 7700))
        assert len(controller.nodes) == 2

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from(["a", "b", "c", "d"]),
                              st.integers(1, 65535)), max_size=40))
    def test_registry_size_equals_distinct_ids(self, stream):
        controller = make_controller(clock=FakeClock())
        for node_id, port in stream:
            controller.handle_offer(NodeOffer(node_id, "10.0.0.1", port))
        assert len(controller.nodes) == len({node_id for node_id, _ in stream})


class TestUsers:
    def test_register_then_authenticate(self, fake_clock):
        controller = make_controller(clock=fake_clock)
        token = seed_admin(controller)
        assert token and len(token) == 64  # 256-bit hex token

    def test_wrong_password(self, fake_clock):
        controller = make_controller(clock=fake_clock)
        seed_admin(controller)
        with pytest.raises(BadCredentials):
            controller.authenticate("root", "wrong")

    def test_unknown_user(self, fake_clock):
        controller = make_controller(clock=fake_clock)
        seed_admin(controller)
        with pytest.raises(BadCredentials):
            controller.authenticate("nobody", "pw")

    def test_duplicate_username(self, fake_clock):
        controller = make_controller(clock=fake_clock)
        token = seed_admin(controller)
        with pytest.raises(DuplicateUser):
            controller.register_user("root", "other", Role.ADMINISTRATOR,
                                     session_token=token)

    def test_first_user_must_be_admin(self, fake_clock):
        controller = make_controller(clock=fake_clock)
        with pytest.raises(Unauthorized):
            controller.register_user("alice", "pw", Role.APPLICATION_OWNER)

    def test_owner_cannot_create_users(self, fake_clock):
        controller = make_controller(clock=fake_clock)
        admin = seed_admin(controller)
        owner = seed_owner(controller, admin)
        with pytest.raises(Unauthorized):
            controller.register_user("eve", "pw", Role.APPLICATION_OWNER,
                                     session_token=owner)

    def test_two_logins_two_sessions(self, fake_clock):
        controller = make_controller(clock=fake_clock)
        token = seed_admin(controller)
        controller.authenticate("root", "rootpw")
        users = controller.list_active_users(token)
        assert users[0]["username"] == "root"
        assert len(users[0]["sessions"]) == 2

    def test_stale_sessions_drop_out_of_active_list(self, fake_clock):
        controller = make_controller(clock=fake_clock)
        admin = seed_admin(controller)
        seed_owner(controller, admin)
        fake_clock.advance(16 * 60)  # beyond the 15 min activity window
        users = controller.list_active_users(admin)
        # the admin's own call refreshes its activity; the owner session is stale
        assert [u["username"] for u in users] == ["root"]

    def test_active_users_admin_only(self, fake_clock):
        controller = make_controller(clock=fake_clock)
        admin = seed_admin(controller)
        owner = seed_owner(controller, admin)
        with pytest.raises(Unauthorized):
            controller.list_active_users(owner)


class TestRequests:
    def test_os_launch_returns_handle_and_running_record(self):
        stack = LocalStack()
        response = stack.controller.handle_request(
            stack.owner_token, request("n0", Action.LAUNCH, "c1")
        )
        assert response.outcome is Outcome.OK
        assert response.new_state is ContainerState.RUNNING
        assert response.key_handle is not None
        assert response.container_address == "172.31.0.1"
        assert response.private_key is None  # key material never reaches the front-end
        record = stack.controller.containers["c1"]
        assert record.state is ContainerState.RUNNING
        assert record.key_fingerprint is not None
        assert record.owner == "alice"

    def test_app_launch_relays_result(self):
        stack = LocalStack()
        response = stack.controller.handle_request(
            stack.owner_token, request("n0", Action.LAUNCH, "a1", kind=APP, image="echo:hi")
        )
        assert response.app_result == b"hi"
        assert stack.controller.containers["a1"].state is ContainerState.COMPLETED

    def test_owner_cannot_touch_others_container(self):
        stack = LocalStack()
        bob = seed_owner(stack.controller, stack.admin_token, username="bob", password="bobpw")
        stack.controller.handle_request(stack.owner_token, request("n0", Action.LAUNCH, "c1"))
        with pytest.raises(Unauthorized):
            stack.controller.handle_request(bob, request("n0", Action.STOP, "c1"))
        assert stack.controller.containers["c1"].state is ContainerState.RUNNING

    def test_admin_can_stop_any_container(self):
        stack = LocalStack()
        stack.controller.handle_request(stack.owner_token, request("n0", Action.LAUNCH, "c1"))
        response = stack.controller.handle_request(
            stack.admin_token, request("n0", Action.STOP, "c1")
        )
        assert response.new_state is ContainerState.STOPPED

    def test_start_on_running_rejected_without_agent_call(self):
        stack = LocalStack()
        stack.controller.handle_request(stack.owner_token, request("n0", Action.LAUNCH, "c1"))
        before = list(stack.backends[0].event_log)
        with pytest.raises(InvalidTransition):
            stack.controller.handle_request(stack.owner_token, request("n0", Action.START, "c1"))
        assert stack.backends[0].event_log == before

    def test_unknown_node(self):
        stack = LocalStack()
        with pytest.raises(UnknownNode):
            stack.controller.handle_request(stack.owner_token,
                                            request("ghost", Action.LAUNCH, "c1"))

    def test_dead_node_is_unreachable(self):
        stack = LocalStack()
        stack.clock.advance(stack.controller.config.liveness_timeout_s + 1)
        with pytest.raises(NodeUnreachable):
            stack.controller.handle_request(stack.owner_token,
                                            request("n0", Action.LAUNCH, "c1"))

    def test_unauthenticated_rejected(self):
        stack = LocalStack()
        with pytest.raises(Unauthorized):
            stack.controller.handle_request("bogus", request("n0", Action.LAUNCH, "c1"))

    def test_record_states_track_oracle_over_lifecycle(self):
        stack = LocalStack()
        state = None
        for action in (Action.LAUNCH, Action.STOP, Action.START, Action.TERMINATE):
            state = next_state(OS, state, action)
            stack.controller.handle_request(stack.owner_token, request("n0", action, "c1"))
            assert stack.controller.containers["c1"].state is state

    def test_updated_at_is_monotone(self):
        stack = LocalStack()
        stack.controller.handle_request(stack.owner_token, request("n0", Action.LAUNCH, "c1"))
        t1 = stack.controller.containers["c1"].updated_at_ms
        stack.clock.advance(1)
        stack.controller.handle_request(stack.owner_token, request("n0", Action.STOP, "c1"))
        t2 = stack.controller.containers["c1"].updated_at_ms
        assert t2 >= t1

    def test_launch_failure_marks_record_failed(self):
        from eaas.runtime import MockScript

        stack = LocalStack(scripts={0: MockScript.parse("fail launch c1")})
        with pytest.raises(AgentError):
            stack.controller.handle_request(stack.owner_token,
                                            request("n0", Action.LAUNCH, "c1"))
        assert stack.controller.containers["c1"].state is ContainerState.FAILED

    def test_container_id_never_reused_after_terminate(self):
        stack = LocalStack()
        for action in (Action.LAUNCH, Action.TERMINATE):
            stack.controller.handle_request(stack.owner_token, request("n0", action, "c1"))
        with pytest.raises(InvalidTransition):
            stack.controller.handle_request(stack.owner_token,
                                            request("n0", Action.LAUNCH, "c1"))


class TestViews:
    def test_admin_sees_all_containers(self):
        stack = LocalStack()
        stack.controller.handle_request(stack.owner_token, request("n0", Action.LAUNCH, "c1"))
        stack.controller.handle_request(stack.admin_token, request("n0", Action.LAUNCH, "c2"))
        assert len(stack.controller.list_containers(stack.admin_token)) == 2

    def test_owner_sees_only_own(self):
        stack = LocalStack()
        stack.controller.handle_request(stack.owner_token, request("n0", Action.LAUNCH, "c1"))
        stack.controller.handle_request(stack.admin_token, request("n0", Action.LAUNCH, "c2"))
        docs = stack.controller.list_containers(stack.owner_token)
        assert [d["containerId"] for d in docs] == ["c1"]
        # an owner filter for someone else is forced back to self
        docs = stack.controller.list_containers(stack.owner_token, owner="root")
        assert [d["containerId"] for d in docs] == ["c1"]

    def test_state_filter_tracks_transitions(self):
        stack = LocalStack()
        stack.controller.handle_request(stack.owner_token, request("n0", Action.LAUNCH, "c1"))
        stack.controller.handle_request(stack.owner_token, request("n0", Action.LAUNCH, "c2"))
        stack.controller.handle_request(stack.owner_token, request("n0", Action.STOP, "c2"))
        running = stack.controller.list_containers(stack.admin_token,
                                                   state=ContainerState.RUNNING)
        assert [d["containerId"] for d in running] == ["c1"]

    def test_list_nodes_requires_auth(self):
        stack = LocalStack()
        with pytest.raises(Unauthorized):
            stack.controller.list_nodes(None)
        assert len(stack.controller.list_nodes(stack.admin_token)) == 1

    def test_no_offers_means_empty_registry(self, fake_clock):
        controller = make_controller(clock=fake_clock)
        token = seed_admin(controller)
        assert controller.list_nodes(token) == []


class TestKeyBroker:
    def launch(self, stack, cid="c1"):
        return stack.controller.handle_request(stack.owner_token,
                                               request("n0", Action.LAUNCH, cid))

    def test_download_exactly_once(self):
        stack = LocalStack()
        handle = self.launch(stack).key_handle
        data = stack.controller.download_key(stack.owner_token, handle)
        assert b"OPENSSH PRIVATE KEY" in data
        with pytest.raises(AlreadyDownloaded):
            stack.controller.download_key(stack.owner_token, handle)

    def test_key_material_erased_after_download(self):
        stack = LocalStack()
        handle = self.launch(stack).key_handle
        stack.controller.download_key(stack.owner_token, handle)
        assert stack.controller.pending_keys[handle].private_key is None

    def test_expired_handle(self):
        stack = LocalStack()
        handle = self.launch(stack).key_handle
        stack.clock.advance(3601)
        with pytest.raises(Expired):
            stack.controller.download_key(stack.owner_token, handle)
        # purged entirely after expiry
        with pytest.raises(UnknownHandle):
            stack.controller.download_key(stack.owner_token, handle)

    def test_admin_cannot_download_owners_key(self):
        stack = LocalStack()
        handle = self.launch(stack).key_handle
        with pytest.raises(Unauthorized):
            stack.controller.download_key(stack.admin_token, handle)

    def test_unknown_handle(self):
        stack = LocalStack()
        with pytest.raises(UnknownHandle):
            stack.controller.download_key(stack.owner_token, "f" * 64)

    def test_sweep_purges_expired_keys(self):
        stack = LocalStack()
        self.launch(stack)
        stack.clock.advance(3601)
        assert stack.controller.sweep_expired_keys() == 1
        assert stack.controller.pending_keys == {}

    def test_concurrent_downloads_single_success(self):
        stack = LocalStack()
        handle = self.launch(stack).key_handle
        outcomes = []

        def attempt():
            try:
                stack.controller.download_key(stack.owner_token, handle)
                return "ok"
            except (AlreadyDownloaded, UnknownHandle):
                return "dup"

        with ThreadPoolExecutor(max_workers=16) as pool:
            outcomes = list(pool.map(lambda _: attempt(), range(16)))
        assert outcomes.count("ok") == 1
        assert outcomes.count("dup") == 15


class TestMonitor:
    def test_samples_from_all_alive_nodes(self):
        stack = LocalStack(n_agents=3)
        samples = stack.controller.poll_metrics_tick()
        assert len(samples) == 3
        for sample in samples:
            assert 0.0 <= sample.cpu_percent <= 100.0
            assert 0.0 <= sample.mem_percent <= 100.0

    def test_interval_two_seconds_over_21s_gives_10_or_11(self):
        stack = LocalStack()
        stack.controller.config.monitor_interval_s = 2.0
        counts = stack.controller.run_monitor(21.0)
        assert counts["n0"] in (10, 11)

    def test_dead_node_flips_alive_within_timeout_plus_interval(self):
        stack = LocalStack(n_agents=2)
        stack.controller.config.monitor_interval_s = 10.0
        stack.kill_agent(1)
        timeout = stack.controller.config.liveness_timeout_s
        stack.controller.run_monitor(timeout + 10.0)
        assert stack.controller.nodes["n0"].alive is True
        assert stack.controller.nodes["n1"].alive is False

    def test_metrics_refresh_keeps_node_alive(self):
        stack = LocalStack()
        timeout = stack.controller.config.liveness_timeout_s
        stack.controller.config.monitor_interval_s = 10.0
        stack.controller.run_monitor(timeout * 3)  # no offers, only metrics polls
        assert stack.controller.nodes["n0"].alive is True

    def test_interval_settable_by_admin_only(self):
        stack = LocalStack()
        stack.controller.set_monitor_interval(stack.admin_token, 2.0)
        assert stack.controller.config.monitor_interval_s == 2.0
        with pytest.raises(Unauthorized):
            stack.controller.set_monitor_interval(stack.owner_token, 5.0)

    def test_get_metrics_roundtrip(self):
        stack = LocalStack()
        stack.controller.poll_metrics_tick()
        sample = stack.controller.get_metrics(stack.owner_token, "n0")
        assert sample is not None and sample.node_id == "n0"
        with pytest.raises(UnknownNode):
            stack.controller.get_metrics(stack.owner_token, "ghost")


class TestIsolation:
    def test_no_owner_call_mutates_anothers_container(self):
        stack = LocalStack()
        bob = seed_owner(stack.controller, stack.admin_token, username="bob", password="bobpw")
        launch = stack.controller.handle_request(stack.owner_token,
                                                 request("n0", Action.LAUNCH, "c1"))
        snapshot = stack.controller.containers["c1"].to_doc()

        for action in Action:  # ownership guards every action on a foreign container
            with pytest.raises(Unauthorized):
                stack.controller.handle_request(bob, request("n0", action, "c1"))
        with pytest.raises(Unauthorized):
            stack.controller.download_key(bob, launch.key_handle)
        assert stack.controller.containers["c1"].to_doc() == snapshot
        assert [d["containerId"] for d in stack.controller.list_containers(bob)] == []


class TestPersistence:
    def test_state_survives_controller_restart(self, tmp_path):
        db = str(tmp_path / "eaas.db")
        clock = FakeClock()
        first = Controller(ControllerConfig(db_path=db), clock=clock)
        first.handle_offer(NodeOffer("n1", "10.0.0.5", 7700))
        first.register_user("root", "rootpw", Role.ADMINISTRATOR)
        first.store.close()

        second = Controller(ControllerConfig(db_path=db), clock=clock)
        assert "n1" in second.nodes
        assert "root" in second.users
        token = second.authenticate("root", "rootpw")
        assert token
        second.store.close()

    def test_wal_mode_enabled(self, tmp_path):
        store = SqliteStore(str(tmp_path / "eaas.db"))
        mode = store._conn.execute("PRAGMA journal_mode").fetchone()[0]
        assert mode == "wal"
        store.close()
