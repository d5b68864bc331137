"""Multi-process mode: one OS process (or asyncio task) per role.

Every edge of the protocol graph is a TCP connection opened by the *sender*.
The sender introduces itself with a HELLO line and from then on only
writes; the receiver only reads. A receiver refuses (closes) any connection
whose HELLO names a role that is not one of its inbound neighbours, and a
sender aborts if a single byte ever arrives from the receiver. After END
the receiver closes its side, which is how the sender learns that
everything was delivered; no data ever flows backwards.

Messages are flat JSON objects, one per line::

    {"type":"SOURCE_PULSE","trial":0,"axis":0.0}
    {"type":"SETTING","trial":0,"label":2}
    {"type":"OUTCOME","trial":0,"side":"X","label":2,"axis":0.0,"detected":1}
    {"type":"RECORD","trial":0,"mode":"VH","a":2,"b":1,"x":1,"y":0}
    {"type":"LABEL_DISCLOSURE","trial":0,"label":2}
    {"type":"REPORT","trials_checked":1000,"mismatches":0,"verdict":"PASS"}
    {"type":"END","count":1000}
"""

from __future__ import annotations

import asyncio
import json
import logging
import os
import socket
import subprocess
import sys
import time
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Optional

from eprsim import io as eio
from eprsim.core import HALF_PI, ExperimentConfig, Role, SettingLabel, derive_stream
from eprsim.protocol import (
    Collector,
    MalusPoissonStrategy,
    OutcomeMsg,
    ProtocolError,
    Randomizer,
    RefereeReport,
    SettingMsg,
    Side,
    Source,
    SourcePulseMsg,
    Station,
    Verdict,
    referee_verify,
)

log = logging.getLogger(__name__)

ROLES = ("O", "A", "B", "X", "Y", "collector", "referee")

TOPOLOGY = frozenset(
    {
        ("O", "X"),
        ("O", "Y"),
        ("A", "X"),
        ("B", "Y"),
        ("X", "collector"),
        ("Y", "collector"),
        ("A", "referee"),
        ("B", "referee"),
        ("collector", "referee"),
    }
)

# payload types each edge may carry, END excepted
EDGE_TYPES = {
    ("O", "X"): "SOURCE_PULSE",
    ("O", "Y"): "SOURCE_PULSE",
    ("A", "X"): "SETTING",
    ("B", "Y"): "SETTING",
    ("X", "collector"): "OUTCOME",
    ("Y", "collector"): "OUTCOME",
    ("A", "referee"): "LABEL_DISCLOSURE",
    ("B", "referee"): "LABEL_DISCLOSURE",
    ("collector", "referee"): "RECORD",
}

ENV_PREFIX = "EPRSIM_ENDPOINT_"
MAX_LINE = 4096

EXIT_OK = 0
EXIT_FAILURE = 3
EXIT_VERDICT_FAIL = 4


def inbound(role: str) -> frozenset[str]:
    return frozenset(src for src, dst in TOPOLOGY if dst == role)


def outbound(role: str) -> frozenset[str]:
    return frozenset(dst for src, dst in TOPOLOGY if src == role)


def is_listener(role: str) -> bool:
    return bool(inbound(role))


class WireError(ProtocolError):
    """A line on the wire could not be decoded or validated."""


class TopologyError(ProtocolError):
    """An endpoint or connection would create an edge outside the topology."""


class OneWayViolation(ProtocolError):
    """A sender received bytes on a connection it owns."""


# ---------------------------------------------------------------- wire format


@dataclass(frozen=True)
class WireMessage:
    type: str
    trial: Optional[int] = None
    payload: dict = field(default_factory=dict)

    def encode(self) -> bytes:
        obj = {"type": self.type}
        if self.trial is not None:
            obj["trial"] = self.trial
        obj.update(self.payload)
        return (eio.dump_line(obj) + "\n").encode("ascii")


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _count(v) -> bool:
    return _is_int(v) and v >= 0


def _axis(v) -> bool:
    return isinstance(v, float) and v in (0.0, HALF_PI)


def _label(v) -> bool:
    return _is_int(v) and v in (1, 2)


def _bit(v) -> bool:
    return _is_int(v) and v in (0, 1)


_PAYLOADS = {
    "HELLO": (False, {"role": lambda v: v in ROLES}),
    "SOURCE_PULSE": (True, {"axis": _axis}),
    "SETTING": (True, {"label": _label}),
    "OUTCOME": (True, {"side": lambda v: v in ("X", "Y"), "label": _label, "axis": _axis, "detected": _bit}),
    "LABEL_DISCLOSURE": (True, {"label": _label}),
    "RECORD": (True, None),
    "REPORT": (
        False,
        {"trials_checked": _count, "mismatches": _count, "verdict": lambda v: v in ("PASS", "FAIL")},
    ),
    "END": (False, {"count": _count}),
}


def decode(line: bytes | str) -> WireMessage:
    """Parse and validate one wire line. Raises WireError on any defect."""
    if isinstance(line, bytes):
        if len(line) > MAX_LINE:
            raise WireError("line too long")
        try:
            line = line.decode("ascii")
        except UnicodeDecodeError:
            raise WireError("line is not ASCII") from None
    if not line.endswith("\n"):
        raise WireError("line is not newline-terminated")
    try:
        obj = json.loads(line)
    except ValueError:
        raise WireError(f"not JSON: {line[:80]!r}") from None
    if not isinstance(obj, dict):
        raise WireError("message is not a JSON object")
    kind = obj.pop("type", None)
    if kind not in _PAYLOADS:
        raise WireError(f"unknown message type {kind!r}")
    has_trial, schema = _PAYLOADS[kind]
    trial = None
    if has_trial:
        trial = obj.get("trial")
        if not _count(trial):
            raise WireError(f"{kind}: trial must be a non-negative integer")
        if kind != "RECORD":
            del obj["trial"]
    elif "trial" in obj:
        raise WireError(f"{kind} carries no trial index")
    if kind == "RECORD":
        try:
            eio.record_from_fields(obj)
        except eio.LogFormatError as exc:
            raise WireError(f"RECORD: {exc}") from None
        del obj["trial"]
        return WireMessage(kind, trial, obj)
    if set(obj) != set(schema):
        raise WireError(f"{kind}: expected fields {sorted(schema)}, got {sorted(obj)}")
    for key, ok in schema.items():
        if not ok(obj[key]):
            raise WireError(f"{kind}: bad value for {key}: {obj[key]!r}")
    return WireMessage(kind, trial, obj)


def hello(role: str) -> WireMessage:
    return WireMessage("HELLO", payload={"role": role})


def end(count: int) -> WireMessage:
    return WireMessage("END", payload={"count": count})


def pulse_message(msg: SourcePulseMsg) -> WireMessage:
    return WireMessage("SOURCE_PULSE", msg.trial, {"axis": msg.pulse_axis})


def setting_message(msg: SettingMsg) -> WireMessage:
    return WireMessage("SETTING", msg.trial, {"label": int(msg.label)})


def outcome_message(msg: OutcomeMsg) -> WireMessage:
    return WireMessage(
        "OUTCOME",
        msg.trial,
        {"side": msg.side.value, "label": int(msg.label), "axis": msg.pulse_axis, "detected": int(msg.detected)},
    )


def record_message(rec) -> WireMessage:
    fields = eio.record_fields(rec)
    trial = fields.pop("trial")
    return WireMessage("RECORD", trial, fields)


def report_message(report: RefereeReport) -> WireMessage:
    return WireMessage(
        "REPORT",
        payload={
            "trials_checked": report.trials_checked,
            "mismatches": report.mismatches,
            "verdict": report.verdict.value,
        },
    )


# ------------------------------------------------------------------ endpoints


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host or not port.isdigit() or not 0 < int(port) < 65536:
        raise TopologyError(f"bad address {text!r}, expected HOST:PORT")
    return host, int(port)


def required_endpoints(role: str) -> frozenset[str]:
    """Keys a role needs: its own listen address (if any) plus its out-neighbours."""
    if role not in ROLES:
        raise TopologyError(f"unknown role {role!r}")
    own = {role} if is_listener(role) else set()
    return frozenset(own | outbound(role))


def resolve_endpoints(
    role: str,
    explicit: Mapping[str, str],
    environ: Optional[Mapping[str, str]] = None,
) -> dict[str, tuple[str, int]]:
    """Validate endpoints for ``role``.

    Explicit endpoints must all be incident to the role; naming any other
    role (say, Y's address for station X) is refused. Missing ones are
    looked up as ``EPRSIM_ENDPOINT_<ROLE>`` in ``environ``.
    """
    need = required_endpoints(role)
    extra = set(explicit) - need
    if extra:
        raise TopologyError(
            f"role {role} has no edge to {sorted(extra)}; allowed endpoints are {sorted(need)}"
        )
    environ = os.environ if environ is None else environ
    out = {k: parse_address(v) for k, v in explicit.items()}
    for key in need - set(out):
        env = environ.get(ENV_PREFIX + key.upper())
        if env is None:
            raise TopologyError(f"role {role} needs an endpoint for {key}")
        out[key] = parse_address(env)
    return out


# ---------------------------------------------------------------- connections


class Outbox:
    """Write-only end of one topology edge."""

    def __init__(self, me: str, peer: str, address: tuple[str, int]):
        if (me, peer) not in TOPOLOGY:
            raise TopologyError(f"no edge {me} -> {peer}")
        self.me, self.peer, self.address = me, peer, address
        self.sent = 0
        self._reader: Optional[asyncio.StreamReader] = None
        self._writer: Optional[asyncio.StreamWriter] = None
        self._watch: Optional[asyncio.Task] = None
        self._peer_closed = False
        self._violation: Optional[str] = None

    async def open(self, deadline: float) -> None:
        while True:
            try:
                self._reader, self._writer = await asyncio.open_connection(*self.address)
                break
            except OSError:
                if time.monotonic() > deadline:
                    raise ProtocolError(f"{self.me}: cannot reach {self.peer} at {self.address}") from None
                await asyncio.sleep(0.05)
        self._writer.write(hello(self.me).encode())
        self._watch = asyncio.create_task(self._watchdog())

    async def _watchdog(self) -> None:
        try:
            data = await self._reader.read(64)
        except (ConnectionError, OSError):
            data = b""
        if data:
            self._violation = f"{self.me}: received {len(data)} byte(s) from {self.peer} on a one-way edge"
            self._writer.close()
        else:
            self._peer_closed = True

    def _check(self) -> None:
        if self._violation:
            raise OneWayViolation(self._violation)
        if self._peer_closed:
            raise ProtocolError(f"{self.me}: {self.peer} closed the connection")

    async def send(self, msg: WireMessage) -> None:
        if msg.type != EDGE_TYPES[(self.me, self.peer)]:
            raise ProtocolError(f"{self.me}: {msg.type} may not travel on edge to {self.peer}")
        self._check()
        self._writer.write(msg.encode())
        self.sent += 1
        try:
            await self._writer.drain()
        except (ConnectionError, OSError) as exc:
            raise ProtocolError(f"{self.me}: lost connection to {self.peer}: {exc}") from None

    async def finish(self, deadline: float) -> None:
        """Send END and wait until the receiver closes its side."""
        self._check()
        self._writer.write(end(self.sent).encode())
        try:
            await self._writer.drain()
            await asyncio.wait_for(asyncio.shield(self._watch), max(deadline - time.monotonic(), 0.01))
        except asyncio.TimeoutError:
            raise ProtocolError(f"{self.me}: {self.peer} did not acknowledge END by closing") from None
        except (ConnectionError, OSError) as exc:
            raise ProtocolError(f"{self.me}: lost connection to {self.peer}: {exc}") from None
        finally:
            self._writer.close()
        if self._violation:
            raise OneWayViolation(self._violation)

    def abort(self) -> None:
        if self._watch is not None:
            self._watch.cancel()
        if self._writer is not None:
            self._writer.close()


class _StreamEnded:
    """Queue marker: a peer's connection closed, with or without END."""

    def __init__(self, clean: bool, reason: str = ""):
        self.clean = clean
        self.reason = reason


class Inbox:
    """Listening side of a role: accepts only its inbound edges.

    Items on ``queue`` are ``(peer, WireMessage | Exception | _StreamEnded)``.
    """

    def __init__(self, role: str, address: tuple[str, int]):
        self.role = role
        self.address = address
        self.allowed = inbound(role)
        self.connected: set[str] = set()
        self.refused: list[str] = []
        self.queue: asyncio.Queue = asyncio.Queue()
        self._server: Optional[asyncio.base_events.Server] = None

    async def start(self) -> None:
        self._server = await asyncio.start_server(
            self._handle, *self.address, limit=MAX_LINE + 1, reuse_address=True
        )

    def close(self) -> None:
        if self._server is not None:
            self._server.close()

    def _refuse(self, writer: asyncio.StreamWriter, why: str) -> None:
        log.warning("%s: refused connection: %s", self.role, why)
        self.refused.append(why)
        writer.close()

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            first = await asyncio.wait_for(reader.readline(), 10.0)
            msg = decode(first)
        except (asyncio.TimeoutError, ValueError, ProtocolError, ConnectionError) as exc:
            self._refuse(writer, f"bad or missing HELLO ({exc})")
            return
        if msg.type != "HELLO":
            self._refuse(writer, f"expected HELLO, got {msg.type}")
            return
        peer = msg.payload["role"]
        if peer not in self.allowed:
            self._refuse(writer, f"{peer} -> {self.role} is not an edge of the topology")
            return
        if peer in self.connected:
            self._refuse(writer, f"{peer} is already connected")
            return
        self.connected.add(peer)
        expected_type = EDGE_TYPES[(peer, self.role)]
        next_trial = 0
        try:
            while True:
                try:
                    line = await reader.readline()
                except (ValueError, asyncio.LimitOverrunError):
                    raise WireError(f"line from {peer} exceeds {MAX_LINE} bytes") from None
                except ConnectionError:
                    line = b""
                if not line:
                    await self.queue.put((peer, _StreamEnded(False, f"{peer} closed without END")))
                    return
                msg = decode(line)
                if msg.type == "END":
                    if msg.payload["count"] != next_trial:
                        raise ProtocolError(
                            f"{peer} END announces {msg.payload['count']} messages, {next_trial} received"
                        )
                    await self.queue.put((peer, msg))
                    await self.queue.put((peer, _StreamEnded(True)))
                    return
                if msg.type != expected_type:
                    raise ProtocolError(f"{peer} sent {msg.type} on an edge that carries {expected_type}")
                if msg.trial != next_trial:
                    raise ProtocolError(f"{peer} sent trial {msg.trial}, expected {next_trial}")
                if msg.type == "OUTCOME" and msg.payload["side"] != peer:
                    raise ProtocolError(f"{peer} sent an OUTCOME for side {msg.payload['side']}")
                next_trial += 1
                await self.queue.put((peer, msg))
        except ProtocolError as exc:
            await self.queue.put((peer, exc))
        finally:
            writer.close()

    async def get(self, deadline: float):
        try:
            return await asyncio.wait_for(self.queue.get(), max(deadline - time.monotonic(), 0.01))
        except asyncio.TimeoutError:
            raise ProtocolError(f"{self.role}: timed out waiting for {sorted(self.allowed)}") from None


# ---------------------------------------------------------------------- roles


@dataclass
class RoleResult:
    status: int
    log: Optional[list] = None
    report: Optional[RefereeReport] = None
    disclosed: Optional[list] = None


async def _run_source(config, endpoints, deadline):
    source = Source(derive_stream(config.master_seed, Role.SOURCE))
    to_x = Outbox("O", "X", endpoints["X"])
    to_y = Outbox("O", "Y", endpoints["Y"])
    boxes = [to_x, to_y]
    try:
        for box in boxes:
            await box.open(deadline)
        for _ in range(config.trials):
            px, py, _mode = source.step()
            await to_x.send(pulse_message(px))
            await to_y.send(pulse_message(py))
        for box in boxes:
            await box.finish(deadline)
    finally:
        for box in boxes:
            box.abort()
    return RoleResult(EXIT_OK)


async def _run_randomizer(role, config, endpoints, deadline):
    stream_role, station = (Role.RAND_A, "X") if role == "A" else (Role.RAND_B, "Y")
    rnd = Randomizer(derive_stream(config.master_seed, stream_role))
    to_station = Outbox(role, station, endpoints[station])
    to_referee = Outbox(role, "referee", endpoints["referee"])
    try:
        await to_station.open(deadline)
        await to_referee.open(deadline)
        for _ in range(config.trials):
            await to_station.send(setting_message(rnd.step()))
        await to_station.finish(deadline)
        # disclosure happens only after every label has been used
        for n, label in enumerate(rnd.disclose()):
            await to_referee.send(WireMessage("LABEL_DISCLOSURE", n, {"label": int(label)}))
        await to_referee.finish(deadline)
    finally:
        to_station.abort()
        to_referee.abort()
    return RoleResult(EXIT_OK, disclosed=rnd.disclose())


async def _run_station(role, config, endpoints, deadline):
    side, angles, stream_role, setter = (
        (Side.LEFT, config.left_angles, Role.STATION_X, "A")
        if role == "X"
        else (Side.RIGHT, config.right_angles, Role.STATION_Y, "B")
    )
    station = Station(
        side, angles, MalusPoissonStrategy(config.detector_rule), derive_stream(config.master_seed, stream_role)
    )
    inbox = Inbox(role, endpoints[role])
    out = Outbox(role, "collector", endpoints["collector"])
    await inbox.start()
    try:
        await out.open(deadline)
        done: set[str] = set()
        sent = 0
        while done != {"O", setter}:
            peer, item = await inbox.get(deadline)
            if isinstance(item, Exception):
                raise item
            if isinstance(item, _StreamEnded):
                if not item.clean:
                    raise ProtocolError(f"{role}: {item.reason}")
                done.add(peer)
                continue
            if item.type == "END":
                continue
            if peer == "O":
                outcome = station.receive_pulse(SourcePulseMsg(item.trial, item.payload["axis"]))
            else:
                outcome = station.receive_setting(SettingMsg(item.trial, SettingLabel(item.payload["label"])))
            if outcome is not None:
                await out.send(outcome_message(outcome))
                sent += 1
        if station.pending or sent != config.trials:
            raise ProtocolError(f"{role}: produced {sent} outcomes for {config.trials} trials")
        await out.finish(deadline)
    finally:
        inbox.close()
        out.abort()
    return RoleResult(EXIT_OK)


async def _run_collector(config, endpoints, deadline, log_out):
    collector = Collector()
    inbox = Inbox("collector", endpoints["collector"])
    out = Outbox("collector", "referee", endpoints["referee"])
    await inbox.start()
    try:
        await out.open(deadline)
        done: set[str] = set()
        while done != {"X", "Y"}:
            peer, item = await inbox.get(deadline)
            if isinstance(item, Exception):
                raise item
            if isinstance(item, _StreamEnded):
                if not item.clean:
                    raise ProtocolError(f"collector: {item.reason}")
                done.add(peer)
                continue
            if item.type == "END":
                continue
            p = item.payload
            record = collector.receive(
                OutcomeMsg(item.trial, Side(p["side"]), SettingLabel(p["label"]), p["axis"], bool(p["detected"]))
            )
            if record is not None:
                await out.send(record_message(record))
        if collector.pending or len(collector.records) != config.trials:
            raise ProtocolError(f"collector: assembled {len(collector.records)} of {config.trials} trials")
        if log_out is not None:
            eio.write_log(collector.records, config, log_out)
        await out.finish(deadline)
    finally:
        inbox.close()
        out.abort()
    return RoleResult(EXIT_OK, log=collector.records)


def referee_service(
    disclosures_a: Iterable[WireMessage],
    disclosures_b: Iterable[WireMessage],
    collector_log: Iterable[WireMessage],
    expected_trials: int,
) -> RefereeReport:
    """Referee verdict over three message streams, each terminated by END.

    A stream that stops without END yields a FAIL with a diagnostic, even if
    the data received so far is consistent.
    """
    problems = []

    def drain(name, stream, kind):
        items, ended = [], False
        for msg in stream:
            if msg.type == "END":
                ended = True
                break
            if msg.type != kind:
                problems.append(f"{name}: unexpected {msg.type}")
                continue
            items.append(msg)
        if not ended:
            problems.append(f"{name}: stream ended before END")
        return items

    a = [m.payload["label"] for m in drain("A", disclosures_a, "LABEL_DISCLOSURE")]
    b = [m.payload["label"] for m in drain("B", disclosures_b, "LABEL_DISCLOSURE")]
    records = [
        eio.record_from_fields({"trial": m.trial, **m.payload})
        for m in drain("collector", collector_log, "RECORD")
    ]
    for n, rec in enumerate(records):
        if rec.index != n:
            problems.append(f"collector: record {n} carries trial {rec.index}")
            records = records[:n]
            break
    report = referee_verify(a, b, records, expected_trials)
    if problems:
        diag = "; ".join(problems + ([report.diagnostic] if report.diagnostic else []))
        return RefereeReport(report.trials_checked, report.mismatches, Verdict.FAIL, diag)
    return report


async def _run_referee(config, endpoints, deadline, report_out):
    inbox = Inbox("referee", endpoints["referee"])
    await inbox.start()
    streams: dict[str, list[WireMessage]] = {"A": [], "B": [], "collector": []}
    closed: set[str] = set()
    problems = []
    try:
        while closed != set(streams):
            try:
                peer, item = await inbox.get(deadline)
            except ProtocolError as exc:
                problems.append(str(exc))
                break
            if isinstance(item, Exception):
                problems.append(f"{peer}: {item}")
                closed.add(peer)
            elif isinstance(item, _StreamEnded):
                closed.add(peer)
            else:
                streams[peer].append(item)
    finally:
        inbox.close()
    report = referee_service(streams["A"], streams["B"], streams["collector"], config.trials)
    if problems:
        diag = "; ".join(problems + ([report.diagnostic] if report.diagnostic else []))
        report = RefereeReport(report.trials_checked, report.mismatches, Verdict.FAIL, diag)
    if report_out is not None:
        report_out.write(report_message(report).encode().decode("ascii"))
        report_out.flush()
    if report.diagnostic:
        log.warning("referee: %s", report.diagnostic)
    status = EXIT_OK if report.verdict is Verdict.PASS else EXIT_VERDICT_FAIL
    return RoleResult(status, report=report)


async def run_role(
    role: str,
    config: ExperimentConfig,
    endpoints: Mapping[str, tuple[str, int]],
    *,
    timeout: float = 60.0,
    log_out=None,
    report_out: Optional[IO[str]] = None,
) -> RoleResult:
    """Run one role to completion inside the current event loop."""
    need = required_endpoints(role)
    if set(endpoints) != need:
        raise TopologyError(f"role {role} needs exactly endpoints {sorted(need)}, got {sorted(endpoints)}")
    deadline = time.monotonic() + timeout
    if role == "O":
        return await _run_source(config, endpoints, deadline)
    if role in ("A", "B"):
        return await _run_randomizer(role, config, endpoints, deadline)
    if role in ("X", "Y"):
        return await _run_station(role, config, endpoints, deadline)
    if role == "collector":
        return await _run_collector(config, endpoints, deadline, log_out)
    return await _run_referee(config, endpoints, deadline, report_out)


def serve_role(
    role: str,
    config: ExperimentConfig,
    endpoints: Mapping[str, tuple[str, int]],
    *,
    timeout: float = 60.0,
    log_out=None,
    report_out: Optional[IO[str]] = None,
) -> int:
    """Process entry point for one role; returns an exit status."""
    try:
        result = asyncio.run(
            run_role(role, config, endpoints, timeout=timeout, log_out=log_out, report_out=report_out)
        )
    except ProtocolError as exc:
        log.error("%s: aborted: %s", role, exc)
        return EXIT_FAILURE
    return result.status


# ------------------------------------------------------------ local sessions


def free_ports(n: int, host: str = "127.0.0.1") -> list[int]:
    socks = []
    try:
        for _ in range(n):
            s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            s.bind((host, 0))
            socks.append(s)
        return [s.getsockname()[1] for s in socks]
    finally:
        for s in socks:
            s.close()


def local_address_book(host: str = "127.0.0.1") -> dict[str, tuple[str, int]]:
    listeners = [r for r in ROLES if is_listener(r)]
    return dict(zip(listeners, ((host, p) for p in free_ports(len(listeners), host))))


def endpoints_for(role: str, book: Mapping[str, tuple[str, int]]) -> dict[str, tuple[str, int]]:
    return {k: book[k] for k in required_endpoints(role)}


@dataclass
class NetworkSession:
    log: list
    report: RefereeReport
    statuses: dict[str, int]


async def run_network_tasks(config: ExperimentConfig, *, timeout: float = 60.0) -> NetworkSession:
    """All seven roles as asyncio tasks over real localhost sockets."""
    book = local_address_book()
    # listeners first so senders rarely need to retry
    order = ["referee", "collector", "X", "Y", "A", "B", "O"]
    tasks = {
        role: asyncio.create_task(run_role(role, config, endpoints_for(role, book), timeout=timeout))
        for role in order
    }
    results = {}
    statuses = {}
    for role, task in tasks.items():
        try:
            results[role] = await task
            statuses[role] = results[role].status
        except ProtocolError as exc:
            log.error("%s: aborted: %s", role, exc)
            statuses[role] = EXIT_FAILURE
    collector = results.get("collector")
    referee = results.get("referee")
    return NetworkSession(
        collector.log if collector else [],
        referee.report if referee else RefereeReport(0, 0, Verdict.FAIL, "referee aborted"),
        statuses,
    )


def _format_angles(angles) -> str:
    return ",".join(repr(float(a)) for a in angles)


def role_command(role: str, config: ExperimentConfig, endpoints: Mapping[str, tuple[str, int]], **extra) -> list[str]:
    cmd = [
        sys.executable,
        "-m",
        "eprsim",
        "net",
        "--role",
        role,
        "--trials",
        str(config.trials),
        "--seed",
        str(config.master_seed),
        f"--left-angles={_format_angles(config.left_angles)}",
        f"--right-angles={_format_angles(config.right_angles)}",
        "--detector-rule",
        config.detector_rule.value,
    ]
    for key, (host, port) in sorted(endpoints.items()):
        if key == role:
            cmd += ["--listen", f"{host}:{port}"]
        else:
            cmd += ["--peer", f"{key}={host}:{port}"]
    for flag, value in extra.items():
        cmd += [f"--{flag.replace('_', '-')}", str(value)]
    return cmd


def run_network_processes(config: ExperimentConfig, log_path, *, timeout: float = 120.0) -> NetworkSession:
    """Seven OS processes, one per role, talking over localhost TCP."""
    book = local_address_book()
    order = ["referee", "collector", "X", "Y", "A", "B", "O"]
    procs = {}
    for role in order:
        extra = {"out": log_path} if role == "collector" else {}
        procs[role] = subprocess.Popen(
            role_command(role, config, endpoints_for(role, book), timeout=timeout, **extra),
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
        )
    outputs = {}
    for role, proc in procs.items():
        try:
            out, err = proc.communicate(timeout=timeout + 30)
        except subprocess.TimeoutExpired:
            proc.kill()
            out, err = proc.communicate()
        outputs[role] = (proc.returncode, out, err)
    statuses = {role: rc for role, (rc, _, _) in outputs.items()}
    report_lines = [ln for ln in outputs["referee"][1].splitlines() if ln.strip()]
    if report_lines:
        msg = decode(report_lines[-1] + "\n")
        report = RefereeReport(
            msg.payload["trials_checked"], msg.payload["mismatches"], Verdict(msg.payload["verdict"])
        )
    else:
        report = RefereeReport(0, 0, Verdict.FAIL, outputs["referee"][2][-2000:])
    records = eio.read_log(log_path)[1] if statuses["collector"] == EXIT_OK else []
    failed = {r: outputs[r][2][-2000:] for r, rc in statuses.items() if rc != EXIT_OK}
    if failed:
        log.error("role failures: %s", failed)
    return NetworkSession(records, report, statuses)
