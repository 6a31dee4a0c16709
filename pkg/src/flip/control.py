"""Command facade over planner, fabric, and engine configs.

Accepts the fixed verb set (topology queries, flow table edits, engine
config management, and the two datapath request forms) either in process,
from a script file, or over a newline-delimited JSON socket protocol.
Every mutation is serialized under one lock and appended to a command log;
replaying the log onto a fresh session reproduces the same fabric state.
"""

from __future__ import annotations

import json
import os
import socket
import socketserver
import threading
from dataclasses import dataclass, field
from pathlib import Path

from . import dsl, planner
from .dataplane import Fabric
from .epb import ConfigStore, EngineConfig
from .errors import FlipError, UnknownSwitchError, UnknownVerbError, ValidationError
from .dsl import RequestMode
from .planner import FlowRule
from .topology import NodeKind, Topology, natural_key

VERBS = (
    "getswitches",
    "getlinks",
    "gethosts",
    "getswdesc",
    "getflows",
    "gettables",
    "getports",
    "addflow",
    "modflow",
    "delflow",
    "delflowall",
    "getconfig",
    "getconfig/user",
    "setconfig/user",
    "setconfig/user/module",
    "datapath_m",
    "datapath_a",
)

MUTATING_VERBS = frozenset(
    {
        "addflow",
        "modflow",
        "delflow",
        "delflowall",
        "setconfig/user",
        "setconfig/user/module",
        "datapath_m",
        "datapath_a",
    }
)

MANUFACTURER = "flip-sim"


@dataclass(frozen=True)
class Command:
    verb: str
    args: dict = field(default_factory=dict)


@dataclass
class CommandResult:
    status: str  # "ok" | "error"
    body: dict
    code: str | None = None
    message: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_doc(self) -> dict:
        doc = {"status": self.status, "body": self.body}
        if self.code:
            doc["code"] = self.code
        if self.message:
            doc["message"] = self.message
        return doc


class Session:
    """One loaded topology plus its running fabric and config store."""

    def __init__(
        self,
        topology: Topology,
        coverage: dsl.CoverageMap | None = None,
        config_dir: str | Path | None = None,
        trace: bool = False,
    ):
        config_dir = config_dir or os.environ.get("FLIP_CONFIG_DIR")
        store_path = Path(config_dir) / "engine_configs.json" if config_dir else None
        self.topology = topology
        self.coverage = coverage or {}
        self.store = ConfigStore(store_path)
        self.fabric = Fabric(topology, self.store, trace=trace)
        self.command_log: list[dict] = []
        self._lock = threading.Lock()
        self._dpids = {sw: i + 1 for i, sw in enumerate(topology.switches())}

    # -- dispatch --

    def execute(self, verb, args: dict | None = None) -> CommandResult:
        if isinstance(verb, Command):
            verb, args = verb.verb, verb.args
        args = args or {}
        with self._lock:
            try:
                body = self._dispatch(verb, args)
            except FlipError as exc:
                return CommandResult("error", {}, code=exc.code, message=str(exc))
            if verb in MUTATING_VERBS:
                self.command_log.append({"verb": verb, "args": args})
            return CommandResult("ok", body)

    def _dispatch(self, verb: str, args: dict) -> dict:
        handler = {
            "getswitches": self._getswitches,
            "getlinks": self._getlinks,
            "gethosts": self._gethosts,
            "getswdesc": self._getswdesc,
            "getflows": self._getflows,
            "gettables": self._gettables,
            "getports": self._getports,
            "addflow": self._addflow,
            "modflow": self._modflow,
            "delflow": self._delflow,
            "delflowall": self._delflowall,
            "getconfig": self._getconfig,
            "getconfig/user": self._getconfig_user,
            "setconfig/user": self._setconfig_user,
            "setconfig/user/module": self._setconfig_module,
            "datapath_a": self._datapath,
            "datapath_m": self._datapath,
        }.get(verb)
        if handler is None:
            raise UnknownVerbError(f"unknown verb {verb!r}")
        if verb.startswith("datapath"):
            return handler(verb, args)
        return handler(args)

    # -- topology verbs --

    def _getswitches(self, args) -> dict:
        switches = []
        for sw in self.topology.switches():
            neighbors = self.topology.neighbors(sw)
            engine = next(
                (n for n in neighbors if self.topology.kind(n) is NodeKind.ENGINE), None
            )
            switches.append(
                {
                    "dpid": self._dpids[sw],
                    "id": sw,
                    "ports": len(neighbors),
                    "engine": engine,
                    "manufacturer": MANUFACTURER,
                }
            )
        return {"switches": switches}

    def _getlinks(self, args) -> dict:
        return {
            "links": [
                {"a": l.a, "b": l.b, "delay_ms": l.delay_ms} for l in self.topology.links()
            ]
        }

    def _gethosts(self, args) -> dict:
        hosts = []
        for kind in (NodeKind.BASE_STATION, NodeKind.DESTINATION, NodeKind.CLOUD):
            for node in self.topology.nodes_of_kind(kind):
                peer = next(iter(self.topology.neighbors(node)), None)
                hosts.append({"id": node, "kind": kind.value, "switch": peer})
        return {"hosts": hosts}

    def _resolve_dpid(self, args) -> str:
        dpid = args.get("dpid")
        if isinstance(dpid, int):
            for sw, n in self._dpids.items():
                if n == dpid:
                    return sw
            raise UnknownSwitchError(f"unknown dpid {dpid}")
        if dpid in self.fabric.tables:
            return dpid
        raise UnknownSwitchError(f"unknown switch {dpid!r}")

    def _getswdesc(self, args) -> dict:
        sw = self._resolve_dpid(args)
        return {
            "dpid": self._dpids[sw],
            "id": sw,
            "manufacturer": MANUFACTURER,
            "hw_desc": "simulated switch",
            "sw_desc": "flip fabric",
        }

    def _getflows(self, args) -> dict:
        sw = self._resolve_dpid(args)
        table = self.fabric.tables[sw]
        return {
            "dpid": self._dpids[sw],
            "id": sw,
            "flows": [
                {**rule.to_doc(), "index": i, "count": table.counters[i]}
                for i, rule in enumerate(table.rules)
            ],
        }

    def _gettables(self, args) -> dict:
        sw = self._resolve_dpid(args)
        return {
            "dpid": self._dpids[sw],
            "id": sw,
            "tables": [{"table_id": 0, "active_count": len(self.fabric.tables[sw].rules)}],
        }

    def _getports(self, args) -> dict:
        sw = self._resolve_dpid(args)
        rx = self.fabric.stats().port_rx[sw]
        tx = self.fabric.stats().port_tx[sw]
        ports = []
        for port_no, peer in enumerate(sorted(self.topology.neighbors(sw), key=natural_key), 1):
            ports.append(
                {
                    "port": port_no,
                    "peer": peer,
                    "rx_packets": rx.get(peer, 0),
                    "tx_packets": tx.get(peer, 0),
                }
            )
        return {"dpid": self._dpids[sw], "id": sw, "ports": ports}

    # -- flow verbs --

    def _rule_from_args(self, sw: str, args: dict) -> FlowRule:
        doc = {
            "switch": sw,
            "match": args.get("match", {}),
            "action": args.get("action", {}),
        }
        return FlowRule.from_doc(doc)

    def _addflow(self, args) -> dict:
        sw = self._resolve_dpid(args)
        added = self.fabric.install_rules([self._rule_from_args(sw, args)])
        return {"added": added}

    def _modflow(self, args) -> dict:
        sw = self._resolve_dpid(args)
        table = self.fabric.tables[sw]
        index = args.get("index")
        if not isinstance(index, int) or not (0 <= index < len(table.rules)):
            raise ValidationError(f"no flow at index {index!r} on {sw}")
        table.remove(index)
        rule = self._rule_from_args(sw, args)
        self.fabric.install_rules([rule])
        return {"modified": index}

    def _delflow(self, args) -> dict:
        sw = self._resolve_dpid(args)
        table = self.fabric.tables[sw]
        index = args.get("index")
        if not isinstance(index, int) or not (0 <= index < len(table.rules)):
            raise ValidationError(f"no flow at index {index!r} on {sw}")
        table.remove(index)
        return {"removed": 1}

    def _delflowall(self, args) -> dict:
        sw = self._resolve_dpid(args)
        return {"removed": self.fabric.tables[sw].clear()}

    # -- engine config verbs --

    def _engine_arg(self, args) -> str:
        engine = args.get("engine")
        if engine not in self.fabric.engines:
            raise UnknownSwitchError(f"unknown engine {engine!r}")
        return engine

    def _getconfig(self, args) -> dict:
        engine = self._engine_arg(args)
        configs = self.store.configs_for(engine)
        return {
            "engine": engine,
            "configs": [{"user": c.user, **c.to_doc()} for c in configs],
        }

    def _getconfig_user(self, args) -> dict:
        engine = self._engine_arg(args)
        user = args.get("user", "")
        configs = self.store.user_configs(engine, user)
        return {"engine": engine, "user": user, "configs": [c.to_doc() for c in configs]}

    def _setconfig_user(self, args) -> dict:
        engine = self._engine_arg(args)
        user = args.get("user")
        if not user:
            raise ValidationError("setconfig/user needs a user")
        cfg = EngineConfig.from_doc(engine, user, args.get("config", {}))
        self.store.set_config(cfg)
        return {"engine": engine, "user": user, "set": cfg.to_doc()}

    def _setconfig_module(self, args) -> dict:
        """Update one named section (compute, rate, jitter, source,
        destination) of an existing config."""
        engine = self._engine_arg(args)
        user = args.get("user")
        module = args.get("module")
        value = args.get("value")
        configs = self.store.user_configs(engine, user or "")
        if args.get("destination"):
            configs = [c for c in configs if c.destination == args["destination"]]
        if not configs:
            raise ValidationError(f"no config for user {user!r} on {engine}")
        if len(configs) > 1:
            raise ValidationError(
                f"user {user!r} has {len(configs)} configs on {engine}; pass destination"
            )
        current = configs[0]
        doc = current.to_doc()
        if module == "compute":
            doc["compute"] = value
        elif module == "rate":
            doc["rate"] = value
        elif module == "jitter":
            doc["jitter"] = value
        elif module == "source":
            doc["source"] = value
        elif module == "destination":
            doc["destination"] = value
        else:
            raise ValidationError(f"unknown config module {module!r}")
        updated = EngineConfig.from_doc(engine, current.user, doc)
        if module == "destination":
            self.store.remove(current.key())
        self.store.set_config(updated)
        return {"engine": engine, "user": current.user, "set": updated.to_doc()}

    # -- datapath verbs --

    def _datapath(self, verb: str, args: dict) -> dict:
        text = args.get("request")
        if not isinstance(text, str):
            raise ValidationError(f"{verb} needs a request string")
        request = dsl.parse_request(text)
        expected = RequestMode.AUTOMATED if verb == "datapath_a" else RequestMode.MANUAL
        if request.mode is not expected:
            raise ValidationError(f"{verb} got a {request.mode.value} request")
        if args.get("baseline"):
            return self._install_baseline(request)
        plan = planner.plan(request, self.topology, self.coverage)
        installed = self.fabric.install_rules(plan.rules)
        for cfg in plan.engine_configs:
            self.store.set_config(cfg)
        return {
            "plan": plan.to_doc(),
            "installed_rules": installed,
            "configs_set": len(plan.engine_configs),
        }

    def _install_baseline(self, request: dsl.Request) -> dict:
        """Send-everything mode: shortest-path rules, no engines."""
        tg = dsl.expand_sources(request, self.topology, self.coverage)
        destination = planner.resolve_endpoint(self.topology, request.destination)
        rules = planner.compile_baseline(self.topology, tg.leaves(), destination)
        installed = self.fabric.install_rules(rules)
        return {
            "baseline": True,
            "destination": destination,
            "sources": tg.leaves(),
            "installed_rules": installed,
            "configs_set": 0,
        }

    # -- scripts, replay, state --

    def run_script(
        self, source: str | Path, keep_going: bool = False, baseline: bool = False
    ) -> list[CommandResult]:
        """Execute datapath commands line by line; `#` comments and blank
        lines are skipped. Stops at the first error unless keep_going."""
        if isinstance(source, Path) or "\n" not in str(source) and Path(str(source)).exists():
            text = Path(source).read_text(encoding="utf-8")
        else:
            text = str(source)
        results: list[CommandResult] = []
        for line_no, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            verb = "datapath_m" if line.startswith("datapath_m") else "datapath_a"
            result = self.execute(verb, {"request": line, "baseline": baseline})
            if not result.ok:
                result.message = f"line {line_no}: {result.message}"
            results.append(result)
            if not result.ok and not keep_going:
                break
        return results

    def state_doc(self) -> dict:
        return self.fabric.state_doc()

    def state_json(self) -> str:
        return json.dumps(self.state_doc(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def replay(
        cls,
        topology: Topology,
        log: list[dict],
        coverage: dsl.CoverageMap | None = None,
        config_dir: str | Path | None = None,
    ) -> "Session":
        """Rebuild a session by re-executing a command log in order."""
        session = cls(topology, coverage, config_dir)
        for entry in log:
            result = session.execute(entry["verb"], entry["args"])
            if not result.ok:
                raise FlipError(f"replay failed on {entry['verb']}: {result.message}")
        return session


# -- socket protocol -----------------------------------------------------------


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        while True:
            line = self.rfile.readline()
            if not line:
                return
            try:
                doc = json.loads(line)
                result = self.server.session.execute(doc.get("verb", ""), doc.get("args"))
                out = result.to_doc()
            except (json.JSONDecodeError, AttributeError) as exc:
                out = {"status": "error", "code": "bad_request", "message": str(exc), "body": {}}
            self.wfile.write(json.dumps(out, sort_keys=True).encode() + b"\n")


class CommandServer(socketserver.ThreadingUnixStreamServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, session: Session, socket_path: str | Path):
        path = Path(socket_path)
        if path.exists():
            path.unlink()
        super().__init__(str(path), _Handler)
        self.session = session
        self.socket_path = path


def serve(session: Session, socket_path: str | Path) -> None:
    """Blocking command server on a unix socket (one JSON object per line)."""
    with CommandServer(session, socket_path) as server:
        server.serve_forever()


def send_command(socket_path: str | Path, verb: str, args: dict | None = None) -> dict:
    """Client helper for the socket protocol."""
    with socket.socket(socket.AF_UNIX, socket.SOCK_STREAM) as sock:
        sock.connect(str(socket_path))
        payload = json.dumps({"verb": verb, "args": args or {}}) + "\n"
        sock.sendall(payload.encode())
        buf = b""
        while not buf.endswith(b"\n"):
            chunk = sock.recv(65536)
            if not chunk:
                break
            buf += chunk
    return json.loads(buf)
