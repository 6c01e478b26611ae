"""Master node controller.

Holds the edge registry, the container table and the user database; forwards
container actions to agents over the framed link; brokers one-time private
key downloads; and polls node metrics.  All registry mutations happen under
coarse locks, actions on one container are serialized by a per-container
mutex, and pending-key consumption is atomic.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import logging
import secrets
import threading
from dataclasses import dataclass, field
from enum import Enum

from .clock import SYSTEM_CLOCK, Clock
from .errors import (
    AgentError,
    AlreadyDownloaded,
    BadCredentials,
    DuplicateUser,
    Expired,
    InvalidTransition,
    InvariantViolation,
    NodeUnreachable,
    Unauthorized,
    UnknownHandle,
    UnknownNode,
)
from .protocol import (
    Action,
    Command,
    ContainerKind,
    ContainerState,
    MetricsSample,
    NodeOffer,
    Outcome,
    ServiceRequest,
    ServiceResponse,
    message_to_doc,
    next_state,
    validate_message,
)
from .store import open_store
from .transport import TcpFrameLink

log = logging.getLogger(__name__)

# memory-hard password digest parameters, pinned
SCRYPT_N = 2**14
SCRYPT_R = 8
SCRYPT_P = 1
SCRYPT_DKLEN = 32
_SALT_LEN = 16

_DUMMY_DIGEST = None  # computed lazily; equalizes timing for unknown users


class Role(str, Enum):
    ADMINISTRATOR = "administrator"
    APPLICATION_OWNER = "application-owner"


_ROLE_ALIASES = {
    "admin": Role.ADMINISTRATOR,
    "administrator": Role.ADMINISTRATOR,
    "owner": Role.APPLICATION_OWNER,
    "application-owner": Role.APPLICATION_OWNER,
}


def parse_role(text: str) -> Role:
    role = _ROLE_ALIASES.get(text.strip().lower())
    if role is None:
        raise InvariantViolation(f"unknown role: {text!r}")
    return role


@dataclass
class ControllerConfig:
    bind_address: str = "0.0.0.0"
    agent_port: int = 7600
    api_port: int = 8080
    monitor_interval_s: float = 10.0
    liveness_timeout_s: float = 90.0
    key_expiry_s: float = 3600.0
    activity_window_s: float = 900.0
    db_path: str | None = None


@dataclass
class EdgeNodeRecord:
    node_id: str
    address: str
    port: int
    registered_at_ms: int
    last_seen_ms: int
    alive: bool = True
    coordinator: str | None = None  # opaque, never interpreted
    latest_metrics: MetricsSample | None = None

    def to_doc(self) -> dict:
        return {
            "nodeId": self.node_id,
            "ip": self.address,
            "port": self.port,
            "registeredAtMs": self.registered_at_ms,
            "lastSeenMs": self.last_seen_ms,
            "alive": self.alive,
            "coordinator": self.coordinator,
            "metrics": message_to_doc(self.latest_metrics) if self.latest_metrics else None,
        }


@dataclass
class ContainerRecord:
    container_id: str
    node_id: str
    kind: ContainerKind
    state: ContainerState
    owner: str
    address: str | None = None
    key_fingerprint: str | None = None
    created_at_ms: int = 0
    updated_at_ms: int = 0

    def to_doc(self) -> dict:
        return {
            "containerId": self.container_id,
            "nodeId": self.node_id,
            "conType": self.kind.value,
            "status": self.state.value,
            "owner": self.owner,
            "ip": self.address,
            "fingerprint": self.key_fingerprint,
            "createdAtMs": self.created_at_ms,
            "updatedAtMs": self.updated_at_ms,
        }


@dataclass
class Session:
    token: str
    username: str
    started_at_ms: int
    last_activity_at_ms: int


@dataclass
class UserRecord:
    username: str
    password_digest: bytes
    role: Role
    sessions: list[Session] = field(default_factory=list)


@dataclass
class PendingKey:
    key_handle: str
    container_id: str
    owner: str
    private_key: bytes | None
    created_at_ms: int
    downloaded: bool = False


@dataclass(frozen=True)
class RegistryDelta:
    node_id: str
    inserted: bool


class Controller:
    def __init__(
        self,
        config: ControllerConfig | None = None,
        *,
        store=None,
        agent_link=None,
        clock: Clock | None = None,
        link_delays: dict[Action, tuple[float, float]] | None = None,
    ):
        self.config = config or ControllerConfig()
        self.clock = clock or SYSTEM_CLOCK
        self.store = store if store is not None else open_store(self.config.db_path)
        self.link = agent_link or TcpFrameLink()
        #: bench-only injected (frontend<->master, master<->edge) delays in ms
        self.link_delays = link_delays or {}
        self.nodes: dict[str, EdgeNodeRecord] = {}
        self.containers: dict[str, ContainerRecord] = {}
        self.users: dict[str, UserRecord] = {}
        self.sessions: dict[str, Session] = {}
        self.pending_keys: dict[str, PendingKey] = {}
        self._registry_lock = threading.RLock()
        self._users_lock = threading.RLock()
        self._keys_lock = threading.Lock()
        self._container_locks: dict[str, threading.Lock] = {}
        self._container_locks_guard = threading.Lock()
        self._load()

    # -- persistence -----------------------------------------------------------

    def _load(self) -> None:
        for key, doc in self.store.all("nodes").items():
            self.nodes[key] = EdgeNodeRecord(
                node_id=doc["nodeId"],
                address=doc["ip"],
                port=doc["port"],
                registered_at_ms=doc["registeredAtMs"],
                last_seen_ms=doc["lastSeenMs"],
                alive=doc.get("alive", False),
                coordinator=doc.get("coordinator"),
            )
        for key, doc in self.store.all("containers").items():
            self.containers[key] = ContainerRecord(
                container_id=doc["containerId"],
                node_id=doc["nodeId"],
                kind=ContainerKind(doc["conType"]),
                state=ContainerState(doc["status"]),
                owner=doc["owner"],
                address=doc.get("ip"),
                key_fingerprint=doc.get("fingerprint"),
                created_at_ms=doc.get("createdAtMs", 0),
                updated_at_ms=doc.get("updatedAtMs", 0),
            )
        for key, doc in self.store.all("users").items():
            self.users[key] = UserRecord(
                username=doc["username"],
                password_digest=base64.b64decode(doc["digest"]),
                role=Role(doc["role"]),
            )

    def _save_node(self, record: EdgeNodeRecord) -> None:
        doc = record.to_doc()
        doc["metrics"] = None  # live metrics are ephemeral
        self.store.put("nodes", record.node_id, doc)

    def _save_container(self, record: ContainerRecord) -> None:
        self.store.put("containers", record.container_id, record.to_doc())

    def _save_user(self, user: UserRecord) -> None:
        self.store.put(
            "users",
            user.username,
            {
                "username": user.username,
                "digest": base64.b64encode(user.password_digest).decode("ascii"),
                "role": user.role.value,
            },
        )

    # -- liveness ----------------------------------------------------------------

    def _is_alive(self, record: EdgeNodeRecord) -> bool:
        return (self.clock.now_ms() - record.last_seen_ms) <= self.config.liveness_timeout_s * 1000

    # -- discovery ------------------------------------------------------------------

    def handle_offer(self, offer: NodeOffer) -> RegistryDelta:
        """Upsert the registry; offers are never rejected."""
        validate_message(offer)
        now = self.clock.now_ms()
        with self._registry_lock:
            record = self.nodes.get(offer.node_id)
            if record is None:
                record = EdgeNodeRecord(
                    node_id=offer.node_id,
                    address=offer.address,
                    port=offer.port,
                    registered_at_ms=now,
                    last_seen_ms=now,
                )
                self.nodes[offer.node_id] = record
                inserted = True
            else:
                record.address = offer.address
                record.port = offer.port
                record.last_seen_ms = max(record.last_seen_ms, now)
                inserted = False
            record.alive = True
            self._save_node(record)
        return RegistryDelta(node_id=offer.node_id, inserted=inserted)

    # -- users and sessions ------------------------------------------------------------

    @staticmethod
    def _digest(password: str, salt: bytes) -> bytes:
        return salt + hashlib.scrypt(
            password.encode("utf-8"), salt=salt, n=SCRYPT_N, r=SCRYPT_R, p=SCRYPT_P,
            maxmem=64 * 1024 * 1024, dklen=SCRYPT_DKLEN,
        )

    def register_user(self, username: str, password: str, role: Role,
                      session_token: str | None = None) -> UserRecord:
        """Create a user; only administrators may do this once any user exists.

        The very first user bootstraps the platform and must be an
        administrator, otherwise nobody could ever create further accounts.
        """
        if not isinstance(role, Role):
            role = parse_role(str(role))
        if not username or len(username) > 64:
            raise InvariantViolation("username must be 1-64 characters")
        with self._users_lock:
            if self.users:
                self._require_admin(session_token)
            elif role is not Role.ADMINISTRATOR:
                raise Unauthorized("the first user must be an administrator")
            if username in self.users:
                raise DuplicateUser(f"username taken: {username}")
            user = UserRecord(
                username=username,
                password_digest=self._digest(password, secrets.token_bytes(_SALT_LEN)),
                role=role,
            )
            self.users[username] = user
            self._save_user(user)
            return user

    def authenticate(self, username: str, password: str) -> str:
        global _DUMMY_DIGEST
        with self._users_lock:
            user = self.users.get(username)
            if user is None:
                # burn the same digest cost for unknown users
                if _DUMMY_DIGEST is None:
                    _DUMMY_DIGEST = self._digest("*", b"\x00" * _SALT_LEN)
                self._digest(password, b"\x00" * _SALT_LEN)
                raise BadCredentials("unknown user or wrong password")
            salt, expected = user.password_digest[:_SALT_LEN], user.password_digest[_SALT_LEN:]
            candidate = self._digest(password, salt)[_SALT_LEN:]
            if not hmac.compare_digest(candidate, expected):
                raise BadCredentials("unknown user or wrong password")
            now = self.clock.now_ms()
            token = secrets.token_hex(32)
            session = Session(token=token, username=username, started_at_ms=now,
                              last_activity_at_ms=now)
            user.sessions.append(session)
            self.sessions[token] = session
            return token

    def logout(self, token: str) -> None:
        with self._users_lock:
            session = self.sessions.pop(token, None)
            if session is not None:
                user = self.users.get(session.username)
                if user is not None:
                    user.sessions = [s for s in user.sessions if s.token != token]

    def _session(self, token: str | None) -> Session:
        if not token:
            raise Unauthorized("missing session token")
        with self._users_lock:
            session = self.sessions.get(token)
            if session is None:
                raise Unauthorized("invalid session token")
            session.last_activity_at_ms = self.clock.now_ms()
            return session

    def _role_of(self, session: Session) -> Role:
        return self.users[session.username].role

    def _require_admin(self, token: str | None) -> Session:
        session = self._session(token)
        if self._role_of(session) is not Role.ADMINISTRATOR:
            raise Unauthorized("administrator role required")
        return session

    def list_active_users(self, token: str) -> list[dict]:
        self._require_admin(token)
        cutoff = self.clock.now_ms() - self.config.activity_window_s * 1000
        out = []
        with self._users_lock:
            for user in self.users.values():
                active = [
                    {"startedAtMs": s.started_at_ms, "lastActivityAtMs": s.last_activity_at_ms}
                    for s in user.sessions
                    if s.last_activity_at_ms >= cutoff
                ]
                if active:
                    out.append({"username": user.username, "role": user.role.value,
                                "sessions": active})
        return out

    # -- views -------------------------------------------------------------------------

    def list_nodes(self, token: str) -> list[dict]:
        self._session(token)
        with self._registry_lock:
            docs = []
            for record in self.nodes.values():
                record.alive = self._is_alive(record)
                docs.append(record.to_doc())
            return docs

    def list_containers(self, token: str, state: ContainerState | None = None,
                        owner: str | None = None) -> list[dict]:
        session = self._session(token)
        if self._role_of(session) is not Role.ADMINISTRATOR:
            owner = session.username  # owners only ever see their own
        with self._registry_lock:
            docs = []
            for record in self.containers.values():
                if owner is not None and record.owner != owner:
                    continue
                if state is not None and record.state is not state:
                    continue
                docs.append(record.to_doc())
            return docs

    def get_metrics(self, token: str, node_id: str) -> MetricsSample | None:
        self._session(token)
        with self._registry_lock:
            record = self.nodes.get(node_id)
            if record is None:
                raise UnknownNode(f"unknown node: {node_id}")
            return record.latest_metrics

    # -- container actions ----------------------------------------------------------------

    def _container_lock(self, container_id: str) -> threading.Lock:
        with self._container_locks_guard:
            lock = self._container_locks.get(container_id)
            if lock is None:
                lock = self._container_locks[container_id] = threading.Lock()
            return lock

    def handle_request(self, token: str, req: ServiceRequest) -> ServiceResponse:
        session = self._session(token)
        validate_message(req)
        with self._registry_lock:
            node = self.nodes.get(req.node_id)
            if node is None:
                raise UnknownNode(f"unknown node: {req.node_id}")
            if not self._is_alive(node):
                node.alive = False
                raise NodeUnreachable(f"node {req.node_id} is not alive")
            node_address, node_port = node.address, node.port

        with self._container_lock(req.container_id):
            return self._dispatch_locked(session, req, node_address, node_port)

    def _dispatch_locked(self, session: Session, req: ServiceRequest,
                         address: str, port: int) -> ServiceResponse:
        now = self.clock.now_ms()
        is_admin = self._role_of(session) is Role.ADMINISTRATOR
        with self._registry_lock:
            record = self.containers.get(req.container_id)
            if record is not None:
                if record.kind is not req.con_type:
                    raise InvalidTransition(
                        f"container {req.container_id} is a {record.kind.value} container"
                    )
                if not is_admin and record.owner != session.username:
                    raise Unauthorized("not the owner of this container")
            current = record.state if record is not None else None
            target = next_state(req.con_type, current, req.action)
            if req.action is Action.LAUNCH:
                record = ContainerRecord(
                    container_id=req.container_id,
                    node_id=req.node_id,
                    kind=req.con_type,
                    state=ContainerState.LAUNCHING,
                    owner=session.username,
                    created_at_ms=now,
                    updated_at_ms=now,
                )
                self.containers[req.container_id] = record
                self._save_container(record)

        fe_ms, me_ms = self.link_delays.get(req.action, (0.0, 0.0))
        fwd_ms = self.clock.monotonic_ms()
        try:
            if me_ms:
                self.clock.sleep_precise(me_ms / 2000.0)
            reply = self.link.call(address, port, req)
            if me_ms:
                self.clock.sleep_precise(me_ms / 2000.0)
        except NodeUnreachable:
            self._mark_failed_launch(req, record)
            raise
        recv_ms = self.clock.monotonic_ms()

        if not isinstance(reply, ServiceResponse) or reply.request_id != req.request_id:
            self._mark_failed_launch(req, record)
            raise AgentError(f"agent returned an unexpected reply: {reply!r}")

        if reply.outcome is Outcome.ERROR:
            if reply.error_kind == "invalid_transition":
                # divergence between controller and agent views
                self._mark_failed_launch(req, record)
                raise InvalidTransition(reply.error_detail or "agent rejected the transition")
            self._apply_failure(req, record, reply)
            raise AgentError(reply.error_detail or "agent reported a runtime failure")

        if reply.new_state is not target:
            self._mark_failed_launch(req, record)
            raise AgentError(
                f"agent state {reply.new_state} does not match expected {target.value}"
            )

        key_handle = None
        if req.action is Action.LAUNCH and req.con_type is ContainerKind.OS:
            if reply.private_key is None or reply.container_address is None:
                self._mark_failed_launch(req, record)
                raise AgentError("agent omitted key material or address on OS launch")
            key_handle = self._mint_key_handle(req.container_id, session.username,
                                               reply.private_key)
        if req.action is Action.LAUNCH and req.con_type is ContainerKind.APP:
            if reply.app_result is None:
                self._mark_failed_launch(req, record)
                raise AgentError("agent omitted the app result on launch")

        with self._registry_lock:
            record.state = target
            if reply.container_address:
                record.address = reply.container_address
            if reply.key_fingerprint:
                record.key_fingerprint = reply.key_fingerprint
            record.updated_at_ms = max(record.updated_at_ms, self.clock.now_ms())
            self._save_container(record)

        return ServiceResponse(
            request_id=req.request_id,
            outcome=Outcome.OK,
            new_state=target,
            container_address=record.address,
            key_handle=key_handle,
            app_result=reply.app_result,
            result_truncated=reply.result_truncated,
            key_fingerprint=reply.key_fingerprint,
            op_start_ms=reply.op_start_ms,
            op_end_ms=reply.op_end_ms,
            fwd_ms=fwd_ms,
            recv_ms=recv_ms,
        )

    def _apply_failure(self, req: ServiceRequest, record: ContainerRecord | None,
                       reply: ServiceResponse) -> None:
        with self._registry_lock:
            if record is None:
                return
            if reply.new_state is ContainerState.FAILED or req.action is Action.LAUNCH:
                record.state = ContainerState.FAILED
                record.updated_at_ms = max(record.updated_at_ms, self.clock.now_ms())
                self._save_container(record)

    def _mark_failed_launch(self, req: ServiceRequest, record: ContainerRecord | None) -> None:
        if req.action is not Action.LAUNCH or record is None:
            return
        with self._registry_lock:
            record.state = ContainerState.FAILED
            record.updated_at_ms = max(record.updated_at_ms, self.clock.now_ms())
            self._save_container(record)

    # -- key brokering -------------------------------------------------------------------

    def _mint_key_handle(self, container_id: str, owner: str, private_key: bytes) -> str:
        handle = secrets.token_hex(32)
        with self._keys_lock:
            self.pending_keys[handle] = PendingKey(
                key_handle=handle,
                container_id=container_id,
                owner=owner,
                private_key=private_key,
                created_at_ms=self.clock.now_ms(),
            )
        return handle

    def download_key(self, token: str, key_handle: str) -> bytes:
        """Hand out a private key exactly once, to the launching owner only."""
        session = self._session(token)
        with self._keys_lock:
            pending = self.pending_keys.get(key_handle)
            if pending is None:
                raise UnknownHandle("no such key handle")
            if pending.downloaded:
                raise AlreadyDownloaded("key was already downloaded")
            if self.clock.now_ms() - pending.created_at_ms > self.config.key_expiry_s * 1000:
                pending.private_key = None
                del self.pending_keys[key_handle]
                raise Expired("key handle expired")
            if pending.owner != session.username:
                raise Unauthorized("keys belong to the launching owner")
            data = pending.private_key
            pending.private_key = None  # erase key material from memory
            pending.downloaded = True
            return data

    def sweep_expired_keys(self) -> int:
        cutoff = self.clock.now_ms() - self.config.key_expiry_s * 1000
        with self._keys_lock:
            stale = [h for h, p in self.pending_keys.items() if p.created_at_ms < cutoff]
            for handle in stale:
                self.pending_keys[handle].private_key = None
                del self.pending_keys[handle]
            return len(stale)

    # -- monitoring ---------------------------------------------------------------------------

    def set_monitor_interval(self, token: str, seconds: float) -> None:
        self._require_admin(token)
        if seconds <= 0:
            raise InvariantViolation("monitor interval must be positive")
        self.config.monitor_interval_s = float(seconds)

    def poll_metrics_tick(self) -> list[MetricsSample]:
        """Query every alive node once; refresh liveness flags; sweep old keys."""
        self.sweep_expired_keys()
        with self._registry_lock:
            targets = [
                (r.node_id, r.address, r.port) for r in self.nodes.values() if self._is_alive(r)
            ]
        samples: list[MetricsSample] = []
        for node_id, address, port in targets:
            try:
                reply = self.link.call(address, port, Command(command="metrics"))
            except NodeUnreachable as exc:
                log.warning("metrics poll failed for %s: %s", node_id, exc)
                continue
            if not isinstance(reply, MetricsSample) or reply.node_id != node_id:
                log.warning("unexpected metrics reply from %s: %r", node_id, reply)
                continue
            with self._registry_lock:
                record = self.nodes.get(node_id)
                if record is None:
                    continue
                latest = record.latest_metrics
                if latest is None or reply.timestamp_ms >= latest.timestamp_ms:
                    record.latest_metrics = reply
                record.last_seen_ms = max(record.last_seen_ms, self.clock.now_ms())
            samples.append(reply)
        with self._registry_lock:
            for record in self.nodes.values():
                record.alive = self._is_alive(record)
        return samples

    def run_monitor(self, horizon_s: float) -> dict[str, int]:
        """Drive monitor ticks over a horizon using the injected clock.

        Returns per-node sample counts; used by tests and the bench harness
        with a fake clock (the production loop lives in the server wrapper).
        """
        counts: dict[str, int] = {}
        elapsed = 0.0
        while elapsed + self.config.monitor_interval_s <= horizon_s:
            self.clock.sleep(self.config.monitor_interval_s)
            elapsed += self.config.monitor_interval_s
            for sample in self.poll_metrics_tick():
                counts[sample.node_id] = counts.get(sample.node_id, 0) + 1
        return counts
