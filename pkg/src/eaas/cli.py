"""Command-line front-end, agent launcher and controller launcher.

``eaas`` drives the controller's HTTP API (login, nodes, containers,
requests, key download, metrics, user admin) and hosts the bench
subcommands.  ``--machine`` emits one JSON text document per line, in the
same format as the wire bodies.  Every platform error class maps to its own
exit code (see README).
"""

from __future__ import annotations

import argparse
import getpass
import json
import logging
import os
import stat
import sys
import time
import uuid
from pathlib import Path

from . import bench
from .agent import AgentConfig, AgentServer, EdgeAgent
from .client import ApiClient
from .config import get_bool, get_float, get_int, parse_kv_file
from .controller import Controller, ControllerConfig, Role
from .errors import ConfigError, EaasError
from .httpapi import ControllerServer
from .protocol import (
    Action,
    ContainerKind,
    ContainerState,
    ServiceRequest,
    encode_body,
    message_to_doc,
)
from .runtime import MockBackend, MockScript, RuntimeDelays

log = logging.getLogger(__name__)

DEFAULT_API = "http://127.0.0.1:8080"


def _doc_line(doc: dict) -> str:
    return json.dumps(doc, separators=(",", ":"), sort_keys=True)


# --- session file ------------------------------------------------------------------


def _session_path(args) -> Path:
    if args.session_file:
        return Path(args.session_file)
    return Path(os.environ.get("EAAS_SESSION_FILE", Path.home() / ".eaas" / "session"))


def _load_session(args) -> dict:
    path = _session_path(args)
    if not path.exists():
        return {}
    try:
        return json.loads(path.read_text())
    except (OSError, ValueError):
        return {}


def _save_session(args, doc: dict) -> None:
    path = _session_path(args)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w") as fh:
        fh.write(json.dumps(doc))
    os.chmod(path, stat.S_IRUSR | stat.S_IWUSR)


def _client(args, need_token: bool = True) -> ApiClient:
    session = _load_session(args)
    api = args.api or os.environ.get("EAAS_API") or session.get("api") or DEFAULT_API
    token = session.get("token") if need_token else None
    return ApiClient(api, token=token)


def _write_key_file(path: Path, data: bytes) -> None:
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)


# --- eaas subcommand handlers ---------------------------------------------------------


def _cmd_login(args) -> int:
    password = args.password if args.password is not None else getpass.getpass("password: ")
    client = _client(args, need_token=False)
    client.login(args.user, password)
    _save_session(args, {"token": client.token, "api": client.base_url})
    if args.machine:
        print(_doc_line({"type": "ack", "ok": True, "user": args.user}))
    else:
        print(f"logged in as {args.user}")
    return 0


def _cmd_logout(args) -> int:
    path = _session_path(args)
    if path.exists():
        path.unlink()
    if not args.machine:
        print("logged out")
    return 0


def _cmd_nodes(args) -> int:
    docs = _client(args).nodes()
    if args.machine:
        for doc in docs:
            print(_doc_line(doc))
        return 0
    print(f"{'node':<20} {'address':<22} {'alive':<6} {'cpu%':>6} {'mem%':>6}")
    for doc in docs:
        metrics = doc.get("metrics") or {}
        cpu = metrics.get("cpuPercent")
        mem = metrics.get("memPercent")
        print(
            f"{doc['nodeId']:<20} {doc['ip'] + ':' + str(doc['port']):<22} "
            f"{str(doc['alive']).lower():<6} "
            f"{cpu if cpu is not None else '-':>6} {mem if mem is not None else '-':>6}"
        )
    return 0


def _cmd_containers(args) -> int:
    docs = _client(args).containers(state=args.state, owner=args.owner)
    if args.machine:
        for doc in docs:
            print(_doc_line(doc))
        return 0
    print(f"{'container':<20} {'node':<20} {'type':<5} {'state':<11} {'owner':<12} address")
    for doc in docs:
        print(
            f"{doc['containerId']:<20} {doc['nodeId']:<20} {doc['conType']:<5} "
            f"{doc['status']:<11} {doc['owner']:<12} {doc.get('ip') or '-'}"
        )
    return 0


def _cmd_users_create(args) -> int:
    doc = _client(args).create_user(args.user, args.password, args.role)
    print(_doc_line(doc) if args.machine else f"created {doc['username']} ({doc['role']})")
    return 0


def _cmd_users_active(args) -> int:
    users = _client(args).active_users()
    if args.machine:
        for doc in users:
            print(_doc_line(doc))
        return 0
    for doc in users:
        print(f"{doc['username']} ({doc['role']}): {len(doc['sessions'])} active session(s)")
    return 0


def _cmd_metrics(args) -> int:
    sample = _client(args).metrics(args.node)
    doc = message_to_doc(sample)
    if args.machine:
        print(_doc_line(doc))
        return 0
    print(f"node {sample.node_id}: cpu {sample.cpu_percent:.1f}% mem {sample.mem_percent:.1f}%")
    for cid, cpu, mem in sample.per_container:
        print(f"  {cid}: cpu {cpu:.1f}% mem {mem:.1f}%")
    return 0


def _cmd_key_download(args) -> int:
    client = _client(args)
    data = client.download_key(args.handle)
    out = Path(args.out) if args.out else Path(f"{args.handle[:12]}.key")
    _write_key_file(out, data)
    if args.machine:
        print(_doc_line({"keyHandle": args.handle, "bytes": len(data), "path": str(out)}))
    else:
        print(f"private key saved to {out} ({len(data)} bytes)")
    return 0


def _cmd_request(args) -> int:
    req = ServiceRequest(
        request_id=args.request_id or uuid.uuid4().hex,
        con_type=ContainerKind(args.type),
        node_id=args.node,
        action=Action(args.action),
        container_id=args.container,
        app_image=args.image,
    )
    client = _client(args)
    response = client.request(req)
    if args.machine:
        print(encode_body(response))
    else:
        state = response.new_state.value if response.new_state else "-"
        print(f"{req.action.value} {req.container_id}: {response.outcome.value} (state {state})")
        if response.container_address:
            print(f"address: {response.container_address}")
        if response.key_handle:
            print(f"key handle: {response.key_handle}")
            if not args.download_key:
                print("download once with: eaas key download " + response.key_handle)
    if response.app_result is not None:
        if args.result_out:
            Path(args.result_out).write_bytes(response.app_result)
            if not args.machine:
                print(f"result written to {args.result_out}")
        elif not args.machine:
            sys.stdout.flush()
            sys.stdout.buffer.write(response.app_result)
            sys.stdout.buffer.write(b"\n")
    if response.key_handle and args.download_key:
        data = client.download_key(response.key_handle)
        _write_key_file(Path(args.download_key), data)
        if not args.machine:
            print(f"private key saved to {args.download_key}")
    return 0


def _cmd_monitor_interval(args) -> int:
    seconds = _client(args).set_monitor_interval(args.seconds)
    print(_doc_line({"seconds": seconds}) if args.machine else f"monitor interval: {seconds}s")
    return 0


# --- bench subcommands ---------------------------------------------------------------


def _bench_delays(args) -> RuntimeDelays:
    return RuntimeDelays.fast() if args.fast else RuntimeDelays()


def _cmd_bench_overhead(args) -> int:
    delays = _bench_delays(args)
    transport = "local" if args.fast else "tcp"
    report = bench.measure_overheads(args.trials, delays, transport=transport)
    if args.data_out:
        Path(args.data_out).write_text("\n".join(report.data_rows()) + "\n")
    if args.machine:
        print(_doc_line(report.to_doc()))
    else:
        print(report.render())
        if args.data_out:
            print(f"per-trial rows written to {args.data_out}")
    return 0


def _cmd_bench_scale(args) -> int:
    delays = _bench_delays(args)
    transport = "local" if args.fast else "tcp"
    script = MockScript.load(args.mock_script) if args.mock_script else None
    report = bench.scalability_run(args.n, delays, transport=transport, script=script)
    print(_doc_line(report.to_doc()) if args.machine else report.render())
    return 0 if report.passed else 1


def _cmd_bench_compare(args) -> int:
    report = bench.latency_compare(
        args.users,
        args.cloud_rtt,
        args.edge_rtt,
        args.horizon,
        args.rate,
        sync_period_s=args.sync_period,
        seed=args.seed,
    )
    print(_doc_line(report.to_doc()) if args.machine else report.render())
    return 0


# --- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eaas", description="Edge-as-a-Service front-end")
    parser.add_argument("--api", help=f"controller API URL (default {DEFAULT_API})")
    parser.add_argument("--machine", action="store_true",
                        help="emit one JSON document per line")
    parser.add_argument("--session-file", help="where the session token lives")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("login", help="authenticate and store the session token")
    p.add_argument("--user", required=True)
    p.add_argument("--password")
    p.set_defaults(fn=_cmd_login)

    p = sub.add_parser("logout", help="forget the stored session")
    p.set_defaults(fn=_cmd_logout)

    p = sub.add_parser("nodes", help="list discovered edge nodes")
    p.set_defaults(fn=_cmd_nodes)

    p = sub.add_parser("containers", help="list containers")
    p.add_argument("--state", choices=[s.value for s in ContainerState])
    p.add_argument("--owner")
    p.set_defaults(fn=_cmd_containers)

    p = sub.add_parser("users", help="user administration")
    usub = p.add_subparsers(dest="users_command", required=True)
    pc = usub.add_parser("create", help="create a user (admin only)")
    pc.add_argument("--user", required=True)
    pc.add_argument("--password", required=True)
    pc.add_argument("--role", required=True, choices=["admin", "administrator", "owner", "application-owner"])
    pc.set_defaults(fn=_cmd_users_create)
    pa = usub.add_parser("active", help="list active sessions (admin only)")
    pa.set_defaults(fn=_cmd_users_active)

    p = sub.add_parser("metrics", help="latest metrics for a node")
    p.add_argument("--node", required=True)
    p.set_defaults(fn=_cmd_metrics)

    p = sub.add_parser("key", help="private key operations")
    ksub = p.add_subparsers(dest="key_command", required=True)
    kd = ksub.add_parser("download", help="one-time private key download")
    kd.add_argument("handle")
    kd.add_argument("--out")
    kd.set_defaults(fn=_cmd_key_download)

    p = sub.add_parser("request", help="launch/start/stop/terminate a container")
    p.add_argument("--type", required=True, choices=["os", "app"])
    p.add_argument("--node", required=True)
    p.add_argument("--action", required=True,
                   choices=["launch", "start", "stop", "terminate"])
    p.add_argument("--container", required=True)
    p.add_argument("--image", help="app image (required for app launch)")
    p.add_argument("--request-id")
    p.add_argument("--download-key", metavar="PATH",
                   help="immediately download the private key to PATH (OS launch)")
    p.add_argument("--result-out", metavar="PATH", help="write the app result to PATH")
    p.set_defaults(fn=_cmd_request)

    p = sub.add_parser("monitor", help="monitor settings")
    msub = p.add_subparsers(dest="monitor_command", required=True)
    mi = msub.add_parser("interval", help="set the metrics polling interval (admin only)")
    mi.add_argument("--seconds", type=float, required=True)
    mi.set_defaults(fn=_cmd_monitor_interval)

    p = sub.add_parser("bench", help="benchmark harness")
    bsub = p.add_subparsers(dest="bench_command", required=True)
    bo = bsub.add_parser("overhead", help="per-action round-trip overhead decomposition")
    bo.add_argument("--trials", type=int, default=10)
    bo.add_argument("--fast", action="store_true",
                    help="divide calibrated delays by 100 and run in-process")
    bo.add_argument("--data-out", metavar="PATH", help="write per-trial CSV rows")
    bo.set_defaults(fn=_cmd_bench_overhead)
    bs = bsub.add_parser("scale", help="sequential-launch scalability run")
    bs.add_argument("--n", type=int, default=50)
    bs.add_argument("--fast", action="store_true")
    bs.add_argument("--mock-script", metavar="PATH", help="mock fault-injection script")
    bs.set_defaults(fn=_cmd_bench_scale)
    bc = bsub.add_parser("compare", help="synthetic cloud-vs-edge comparison")
    bc.add_argument("--users", type=int, default=64)
    bc.add_argument("--cloud-rtt", type=float, default=100.0)
    bc.add_argument("--edge-rtt", type=float, default=10.0)
    bc.add_argument("--horizon", type=float, default=300.0)
    bc.add_argument("--rate", type=float, default=1.0)
    bc.add_argument("--sync-period", type=float, default=30.0)
    bc.add_argument("--seed", type=int, default=0)
    bc.set_defaults(fn=_cmd_bench_compare)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("EAAS_LOG", "WARNING"))
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except EaasError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


# --- eaas-agent -----------------------------------------------------------------------


def _split_host_port(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"expected host:port, got {text!r}")
    return host, int(port)


def agent_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="eaas-agent", description="Edge node agent")
    parser.add_argument("--controller", help="controller address as host:port")
    parser.add_argument("--agent-port", type=int)
    parser.add_argument("--backend", choices=["mock", "process"])
    parser.add_argument("--offer-interval", type=int)
    parser.add_argument("--state-dir")
    parser.add_argument("--advertise", help="IP to advertise (default: auto-detected)")
    parser.add_argument("--bind", help="bind address (default 0.0.0.0)")
    parser.add_argument("--mock-delays", choices=["paper", "fast", "zero"])
    parser.add_argument("--mock-script", metavar="PATH")
    parser.add_argument("--keygen-delay-ms", type=float)
    parser.add_argument("--no-service", action="store_true",
                        help="run with the service flag off (no offers are sent)")
    parser.add_argument("--config", help="key=value config file (env EAAS_AGENT_CONFIG)")
    args = parser.parse_args(argv)

    logging.basicConfig(level=os.environ.get("EAAS_LOG", "INFO"))
    try:
        values: dict[str, str] = {}
        config_path = args.config or os.environ.get("EAAS_AGENT_CONFIG")
        if config_path:
            values = parse_kv_file(config_path)
        controller = args.controller or values.get("controller")
        if not controller:
            raise ConfigError("--controller host:port is required (flag or config)")
        host, port = _split_host_port(controller)
        config = AgentConfig(
            controller_address=host,
            controller_port=port,
            agent_port=args.agent_port if args.agent_port is not None else get_int(values, "agent_port", 7700),
            service=not args.no_service and get_bool(values, "service", True),
            runtime_backend=args.backend or values.get("backend", "mock"),
            offer_interval_s=args.offer_interval if args.offer_interval is not None else get_int(values, "offer_interval_s", 30),
            state_dir=args.state_dir or values.get("state_dir"),
            key_generation_delay_ms=args.keygen_delay_ms if args.keygen_delay_ms is not None else get_float(values, "keygen_delay_ms", 0.0),
            advertise_address=args.advertise or values.get("advertise_address"),
            bind_address=args.bind or values.get("bind_address", "0.0.0.0"),
        )
        backend = None
        if config.runtime_backend == "mock":
            profile = args.mock_delays or values.get("mock_delays", "paper")
            delays = {"paper": RuntimeDelays(), "fast": RuntimeDelays.fast(),
                      "zero": RuntimeDelays.zero()}[profile]
            script_path = args.mock_script or values.get("mock_script")
            script = MockScript.load(script_path) if script_path else None
            backend = MockBackend(delays, script=script)
        agent = EdgeAgent(config, backend)
        server = AgentServer(agent)
        server.start()
        log.info("agent %s serving on port %d (controller %s:%d)",
                 agent.node_id, agent.advertised_port, host, port)
        try:
            while True:
                time.sleep(3600)
        except KeyboardInterrupt:
            pass
        finally:
            server.stop()
        return 0
    except EaasError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


# --- eaas-controller --------------------------------------------------------------------


def controller_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="eaas-controller", description="Master node controller")
    parser.add_argument("--bind")
    parser.add_argument("--agent-port", type=int)
    parser.add_argument("--api-port", type=int)
    parser.add_argument("--monitor-interval", type=float)
    parser.add_argument("--liveness-timeout", type=float)
    parser.add_argument("--key-expiry", type=float)
    parser.add_argument("--db", help="database file (default: in-memory)")
    parser.add_argument("--ui-dir", help="static web UI assets directory")
    parser.add_argument("--init-admin", metavar="USER:PASS",
                        help="bootstrap an administrator account if none exists")
    parser.add_argument("--config", help="key=value config file (env EAAS_CONFIG)")
    args = parser.parse_args(argv)

    logging.basicConfig(level=os.environ.get("EAAS_LOG", "INFO"))
    try:
        values: dict[str, str] = {}
        config_path = args.config or os.environ.get("EAAS_CONFIG")
        if config_path:
            values = parse_kv_file(config_path)
        config = ControllerConfig(
            bind_address=args.bind or values.get("bind_address", "0.0.0.0"),
            agent_port=args.agent_port if args.agent_port is not None else get_int(values, "agent_port", 7600),
            api_port=args.api_port if args.api_port is not None else get_int(values, "api_port", 8080),
            monitor_interval_s=args.monitor_interval if args.monitor_interval is not None else get_float(values, "monitor_interval_s", 10.0),
            liveness_timeout_s=args.liveness_timeout if args.liveness_timeout is not None else get_float(values, "liveness_timeout_s", 90.0),
            key_expiry_s=args.key_expiry if args.key_expiry is not None else get_float(values, "key_expiry_s", 3600.0),
            db_path=args.db or values.get("db_path"),
        )
        controller = Controller(config)
        if args.init_admin:
            user, sep, password = args.init_admin.partition(":")
            if not sep:
                raise ConfigError("--init-admin expects USER:PASS")
            if user not in controller.users:
                controller.register_user(user, password, Role.ADMINISTRATOR)
                log.info("bootstrapped administrator %r", user)
        ui_dir = args.ui_dir or values.get("ui_dir") or os.environ.get("EAAS_UI_DIR")
        server = ControllerServer(controller, ui_dir=ui_dir)
        server.start()
        log.info("controller: agent link on %s:%d, API on %s:%d",
                 config.bind_address, server.agent_port, config.bind_address, server.api_port)
        try:
            while True:
                time.sleep(3600)
        except KeyboardInterrupt:
            pass
        finally:
            server.stop()
        return 0
    except EaasError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
