import asyncio
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eprsim import net
from eprsim.core import ExperimentConfig
from eprsim.protocol import ProtocolError, Verdict, run_experiment, run_session

VALID = [
    b'{"type":"HELLO","role":"A"}\n',
    b'{"type":"SOURCE_PULSE","trial":0,"axis":0.0}\n',
    b'{"type":"SOURCE_PULSE","trial":4,"axis":1.5707963267948966}\n',
    b'{"type":"SETTING","trial":3,"label":2}\n',
    b'{"type":"OUTCOME","trial":1,"side":"Y","label":1,"axis":0.0,"detected":0}\n',
    b'{"type":"RECORD","trial":9,"mode":"HV","a":1,"b":2,"x":0,"y":1}\n',
    b'{"type":"LABEL_DISCLOSURE","trial":2,"label":1}\n',
    b'{"type":"REPORT","trials_checked":10,"mismatches":0,"verdict":"PASS"}\n',
    b'{"type":"END","count":10}\n',
]

INVALID = [
    b'{"type":"SETTING","trial":3,"label":3}\n',
    b'{"type":"SETTING","trial":-1,"label":1}\n',
    b'{"type":"SETTING","trial":true,"label":1}\n',
    b'{"type":"SETTING","label":1}\n',
    b'{"type":"SOURCE_PULSE","trial":0,"axis":0.5}\n',
    b'{"type":"SOURCE_PULSE","trial":0,"axis":0}\n',
    b'{"type":"END","trial":0,"count":1}\n',
    b'{"type":"RECORD","trial":9,"mode":"XX","a":1,"b":2,"x":0,"y":1}\n',
    b'{"type":"HELLO","role":"Z"}\n',
    b'{"type":"NOPE"}\n',
    b'{"type":"SETTING","trial":3,"label":2}',
    b"[1,2]\n",
    b"\xff\xfe\n",
    b"\n",
]


@pytest.mark.parametrize("line", VALID)
def test_decode_round_trip(line):
    msg = net.decode(line)
    assert msg.encode() == line


@pytest.mark.parametrize("line", INVALID)
def test_decode_rejects(line):
    with pytest.raises(net.WireError):
        net.decode(line)


@settings(max_examples=500)
@given(st.binary(max_size=200))
def test_fuzzed_bytes_abort_cleanly(data):
    try:
        net.decode(data + b"\n")
    except net.WireError:
        pass


@settings(max_examples=300)
@given(st.sampled_from(VALID), st.integers(0, 60), st.binary(min_size=1, max_size=3))
def test_mutated_valid_lines(line, pos, junk):
    pos = min(pos, len(line) - 1)
    mutated = line[:pos] + junk + line[pos + 1 :]
    try:
        msg = net.decode(mutated)
    except net.WireError:
        return
    # anything that still decodes re-encodes to a valid line
    assert net.decode(msg.encode()) == msg


def test_topology_has_no_station_link():
    assert ("X", "Y") not in net.TOPOLOGY and ("Y", "X") not in net.TOPOLOGY
    assert net.inbound("X") == {"O", "A"}
    assert net.inbound("Y") == {"O", "B"}
    assert net.outbound("X") == {"collector"}
    assert net.inbound("referee") == {"A", "B", "collector"}


def test_resolve_endpoints_refuses_non_edges():
    with pytest.raises(net.TopologyError):
        net.resolve_endpoints("X", {"X": "127.0.0.1:9000", "collector": "127.0.0.1:9001", "Y": "127.0.0.1:9002"}, {})
    with pytest.raises(net.TopologyError):
        net.resolve_endpoints("X", {"X": "127.0.0.1:9000"}, {})


def test_resolve_endpoints_from_environment():
    env = {
        "EPRSIM_ENDPOINT_X": "127.0.0.1:9000",
        "EPRSIM_ENDPOINT_COLLECTOR": "127.0.0.1:9001",
        "EPRSIM_ENDPOINT_Y": "127.0.0.1:9002",
    }
    got = net.resolve_endpoints("X", {}, env)
    assert got == {"X": ("127.0.0.1", 9000), "collector": ("127.0.0.1", 9001)}
    got = net.resolve_endpoints("O", {"X": "h:1"}, env)
    assert got == {"X": ("h", 1), "Y": ("127.0.0.1", 9002)}


def test_bad_address():
    with pytest.raises(net.TopologyError):
        net.parse_address("localhost")


def test_outbox_refuses_non_edge():
    with pytest.raises(net.TopologyError):
        net.Outbox("X", "Y", ("127.0.0.1", 1))


def test_run_role_requires_exact_endpoints():
    cfg = ExperimentConfig(trials=1)
    with pytest.raises(net.TopologyError):
        asyncio.run(net.run_role("X", cfg, {"X": ("127.0.0.1", 1), "Y": ("127.0.0.1", 2)}))


async def _read_all(reader):
    while await reader.read(1024):
        pass


def test_station_refuses_connection_from_other_station():
    async def scenario():
        port = net.free_ports(1)[0]
        inbox = net.Inbox("X", ("127.0.0.1", port))
        await inbox.start()
        try:
            reader, writer = await asyncio.open_connection("127.0.0.1", port)
            writer.write(net.hello("Y").encode())
            await writer.drain()
            closed = await asyncio.wait_for(reader.read(1), 5)
            writer.close()
            return closed, list(inbox.refused), inbox.connected
        finally:
            inbox.close()

    closed, refused, connected = asyncio.run(scenario())
    assert closed == b""
    assert refused and "Y -> X" in refused[0]
    assert connected == set()


def test_sender_aborts_on_backchannel_byte():
    async def scenario():
        async def rogue(reader, writer):
            await reader.readline()
            writer.write(b"!")
            await writer.drain()
            await _read_all(reader)

        server = await asyncio.start_server(rogue, "127.0.0.1", 0)
        port = server.sockets[0].getsockname()[1]
        box = net.Outbox("O", "X", ("127.0.0.1", port))
        deadline = time.monotonic() + 5
        await box.open(deadline)
        await asyncio.sleep(0.2)
        try:
            with pytest.raises(net.OneWayViolation):
                await box.send(net.WireMessage("SOURCE_PULSE", 0, {"axis": 0.0}))
        finally:
            box.abort()
            server.close()

    asyncio.run(scenario())


def test_sender_rejects_wrong_message_type():
    async def scenario():
        server = await asyncio.start_server(lambda r, w: _read_all(r), "127.0.0.1", 0)
        port = server.sockets[0].getsockname()[1]
        box = net.Outbox("A", "X", ("127.0.0.1", port))
        await box.open(time.monotonic() + 5)
        try:
            with pytest.raises(ProtocolError):
                await box.send(net.WireMessage("SOURCE_PULSE", 0, {"axis": 0.0}))
        finally:
            box.abort()
            server.close()

    asyncio.run(scenario())


def test_station_aborts_on_malformed_line():
    async def scenario():
        book = net.local_address_book()
        sink = await asyncio.start_server(lambda r, w: _read_all(r), *book["collector"])
        cfg = ExperimentConfig(trials=5)
        task = asyncio.create_task(net.run_role("X", cfg, net.endpoints_for("X", book), timeout=10))
        box = net.Outbox("O", "X", book["X"])
        await box.open(time.monotonic() + 5)
        box._writer.write(b'{"type":"SOURCE_PULSE","trial":0,"axis":0.0}\n{"garbage\n')
        await box._writer.drain()
        try:
            with pytest.raises(net.WireError):
                await asyncio.wait_for(task, 10)
        finally:
            box.abort()
            sink.close()

    asyncio.run(scenario())


def test_station_aborts_on_out_of_order_trial():
    async def scenario():
        book = net.local_address_book()
        sink = await asyncio.start_server(lambda r, w: _read_all(r), *book["collector"])
        task = asyncio.create_task(net.run_role("X", ExperimentConfig(trials=5), net.endpoints_for("X", book), timeout=10))
        box = net.Outbox("A", "X", book["X"])
        await box.open(time.monotonic() + 5)
        await box.send(net.WireMessage("SETTING", 0, {"label": 1}))
        await box.send(net.WireMessage("SETTING", 2, {"label": 1}))
        try:
            with pytest.raises(ProtocolError, match="expected 1"):
                await asyncio.wait_for(task, 10)
        finally:
            box.abort()
            sink.close()

    asyncio.run(scenario())


def _streams(session, tamper_b_at=None):
    a = [net.WireMessage("LABEL_DISCLOSURE", n, {"label": int(l)}) for n, l in enumerate(session.disclosed_a)]
    b = [net.WireMessage("LABEL_DISCLOSURE", n, {"label": int(l)}) for n, l in enumerate(session.disclosed_b)]
    if tamper_b_at is not None:
        old = b[tamper_b_at].payload["label"]
        b[tamper_b_at] = net.WireMessage("LABEL_DISCLOSURE", tamper_b_at, {"label": 3 - old})
    recs = [net.record_message(r) for r in session.log]
    end = [net.end(len(session.log))]
    return a + end, b + end, recs + end


def test_referee_service_pass():
    s = run_session(ExperimentConfig(trials=40, master_seed=3))
    rep = net.referee_service(*_streams(s), expected_trials=40)
    assert rep.verdict is Verdict.PASS and rep.trials_checked == 40


def test_referee_service_tampered_b():
    s = run_session(ExperimentConfig(trials=40, master_seed=3))
    rep = net.referee_service(*_streams(s, tamper_b_at=7), expected_trials=40)
    assert rep.verdict is Verdict.FAIL and rep.mismatches >= 1


def test_referee_service_zero_trials():
    end = [net.end(0)]
    rep = net.referee_service(end, end, end, expected_trials=0)
    assert rep.verdict is Verdict.PASS and rep.trials_checked == 0


def test_referee_service_premature_end():
    s = run_session(ExperimentConfig(trials=40, master_seed=3))
    a, b, recs = _streams(s)
    rep = net.referee_service(a, b, recs[:-1], expected_trials=40)
    assert rep.verdict is Verdict.FAIL
    assert "before END" in rep.diagnostic


def test_task_network_matches_in_process():
    cfg = ExperimentConfig(trials=300, master_seed=77)
    session = asyncio.run(net.run_network_tasks(cfg, timeout=30))
    assert set(session.statuses.values()) == {0}
    assert session.log == run_experiment(cfg)
    assert session.report.verdict is Verdict.PASS


def test_role_command_round_trips_config():
    cfg = ExperimentConfig(right_angles=(-0.3, 0.2), trials=9, master_seed=5)
    cmd = net.role_command("Y", cfg, {"Y": ("127.0.0.1", 5000), "collector": ("127.0.0.1", 5001)})
    assert "--right-angles=-0.3,0.2" in cmd
    assert "--listen" in cmd and "collector=127.0.0.1:5001" in cmd
