"""Acceptance suite: one test per published criterion, one verdict line each.

Each test prints ``PASS criterion N`` (or ``FAIL``) so a plain log shows the
scoreboard; under default capture the per-test pytest verdict carries the
same information.  Criterion 4 paces 500 steps against three deliberately
slow backends and takes about eleven minutes; everything else is fast.
"""

from __future__ import annotations

import json
import math
import random
import socket
import struct
import sys
import threading
import time
from contextlib import contextmanager

import pytest

from cosimlink.backend import AuthenticationRejected
from cosimlink.cli import demo2_scenario
from cosimlink.descriptor import VariableType
from cosimlink.master import RunMode, initialize_session, scripted_run_demo1
from cosimlink.models import AdderModel, create_model, run_reference_simulation
from cosimlink.proxy import (
    LEGAL_CALLS,
    CallOutcome,
    InstanceState,
    ProxyInstance,
)
from cosimlink.wire import (
    DoStep,
    EnterInit,
    ExitInit,
    FreeInstance,
    GetValues,
    Handshake,
    MessageKind,
    SetupExperiment,
    SetValues,
    Status,
    StatusReply,
    StreamDecoder,
    Terminate,
    ValuesReply,
    decode_message,
    encode_message,
)

from support import (
    BackendThread,
    RecordingModel,
    SocketAudit,
    adder_descriptor,
    free_port,
    load_golden_vectors,
    message_from_json,
)


@contextmanager
def criterion(number: int, summary: str):
    try:
        yield
    except BaseException:
        print(f"FAIL criterion {number}: {summary}", file=sys.stderr)
        raise
    print(f"PASS criterion {number}: {summary}")


def distributed_demo2(reply_delay_ms=0, **scenario_kwargs):
    """Demo 2 over loopback TCP with one serving thread per unit."""
    scenario = demo2_scenario(base_port=free_port(), token="acc3pt",
                              **scenario_kwargs)
    threads = {
        unit.unit_name: BackendThread(create_model(unit.unit_name),
                                      unit.listen_address, unit.unit_name,
                                      "acc3pt", reply_delay_ms=reply_delay_ms)
        for unit in scenario.units
    }
    session = initialize_session(
        scenario, accept_timeout=30.0, call_timeout=30.0,
        on_unit_instantiating=lambda unit: threads[unit.unit_name].start())
    return scenario, session, threads


def test_criterion_1_distributed_run_matches_reference():
    with criterion(1, "distributed closed loop reproduces the in-process "
                      "reference within 1e-12 (bitwise in practice)"):
        began = time.monotonic()
        scenario, session, threads = distributed_demo2()
        result = session.run(RunMode.AS_FAST_AS_POSSIBLE)
        elapsed = time.monotonic() - began
        for thread in threads.values():
            thread.join()

        labels, reference = run_reference_simulation(scenario)
        assert len(result.steps) == 500
        assert result.labels == labels
        bitwise_mismatches = 0
        for record, expected_row in zip(result.steps, reference):
            assert record.time == expected_row[0]
            for label, expected in zip(labels, expected_row[1:]):
                got = record.outputs[label]
                assert abs(got - expected) <= 1e-12, (record.step_index, label)
                if struct.pack("<d", got) != struct.pack("<d", expected):
                    bitwise_mismatches += 1
        assert bitwise_mismatches == 0
        assert elapsed < 60.0


def test_criterion_2_scripted_loop_call_pattern():
    with criterion(2, "1000 write/step/read iterations all yield 3.0 with "
                      "the exact request tally"):
        address = ("127.0.0.1", free_port())
        backend = BackendThread(AdderModel(), address, "adder", "acc3pt")
        began = time.monotonic()
        result = scripted_run_demo1(address, "acc3pt", iterations=1000,
                                    step_size=0.01,
                                    accept_timeout=30.0,
                                    on_instantiating=backend.start)
        elapsed = time.monotonic() - began
        backend.join()

        assert len(result.steps) == 1000
        assert all(s.outputs["adder.real_c"] == 3.0 for s in result.steps)
        assert backend.report.clean_exit
        assert backend.report.counts == {
            "SETUP_EXPERIMENT": 1, "ENTER_INIT": 1, "EXIT_INIT": 1,
            "SET_REAL": 1000, "DO_STEP": 1000, "GET_REAL": 1000,
            "TERMINATE": 1, "FREE_INSTANCE": 1,
        }
        assert elapsed < 30.0


def test_criterion_3_real_time_pacing_floor_and_ceiling():
    with criterion(3, "real-time pacing lands the 10 s scripted run in "
                      "[10.0 s, 11.5 s]"):
        address = ("127.0.0.1", free_port())
        backend = BackendThread(AdderModel(), address, "adder", "acc3pt")
        result = scripted_run_demo1(address, "acc3pt", iterations=1000,
                                    step_size=0.01, mode=RunMode.REAL_TIME,
                                    accept_timeout=30.0,
                                    on_instantiating=backend.start)
        backend.join()
        assert result.report.mode == "real-time"
        assert 10.0 <= result.report.total_wall <= 11.5
        assert result.report.infeasible is False


def test_criterion_4_wan_like_delay_breaks_real_time():
    with criterion(4, "150 ms reply delay makes every real-time step "
                      "overrun its 100 ms period"):
        scenario, session, threads = distributed_demo2(reply_delay_ms=150)
        result = session.run(RunMode.REAL_TIME)
        for thread in threads.values():
            thread.join()

        report = result.report
        assert report.step_count == 500
        assert all(r.wall_duration > 0.1 for r in result.records)
        assert report.average_step_time > 0.1
        assert report.overrun_count == 500
        assert report.total_wall > 50.0
        assert report.infeasible is True

        # the slow run still computes exactly the reference trajectory
        _, reference = run_reference_simulation(scenario)
        final = result.steps[-1].outputs
        assert final["generator.omega"] == reference[-1][3]


def test_criterion_5_socket_roles_and_token_gate(monkeypatch):
    with criterion(5, "proxies never dial out, each backend dials exactly "
                      "once, and a bad token is refused without side effects"):
        scenario = demo2_scenario(base_port=free_port(), token="acc3pt")
        audit = SocketAudit().install(monkeypatch)

        threads = {
            unit.unit_name: BackendThread(create_model(unit.unit_name),
                                          unit.listen_address, unit.unit_name,
                                          "acc3pt")
            for unit in scenario.units
        }
        session = initialize_session(
            scenario, accept_timeout=30.0,
            on_unit_instantiating=lambda unit: threads[unit.unit_name].start())
        session.run(RunMode.AS_FAST_AS_POSSIBLE)
        for thread in threads.values():
            thread.join()

        main_thread = threading.main_thread().name
        assert audit.ops_by_thread("connect").get(main_thread, 0) == 0
        assert audit.ops_by_thread("bind").get(main_thread, 0) == 3
        assert audit.ops_by_thread("listen").get(main_thread, 0) == 3
        assert audit.ops_by_thread("accept").get(main_thread, 0) == 3
        connects = audit.ops_by_thread("connect")
        for unit in scenario.units:
            backend_thread = f"backend-{unit.unit_name}"
            assert connects.get(backend_thread, 0) == 1
            for op in ("bind", "listen", "accept"):
                assert audit.ops_by_thread(op).get(backend_thread, 0) == 0

        # wrong token: rejected before any model callback, and the proxy
        # keeps listening for an honest backend within the same window
        proxy = ProxyInstance(adder_descriptor(), ("127.0.0.1", free_port()),
                              "acc3pt", accept_timeout=20.0,
                              unit_name="adder")
        proxy.listen()
        impostor_model = RecordingModel()
        impostor = BackendThread(impostor_model, proxy.listen_address,
                                 "adder", "st0len").start()
        time.sleep(0.3)
        honest = BackendThread(AdderModel(), proxy.listen_address,
                               "adder", "acc3pt").start()
        proxy.instantiate()
        assert proxy.state is InstanceState.INSTANTIATED
        impostor.join()
        assert isinstance(impostor.error, AuthenticationRejected)
        assert impostor_model.calls == []
        proxy.free()
        honest.join()
        assert honest.report.clean_exit


SAMPLE_CALLS = {
    MessageKind.HANDSHAKE: Handshake("adder", "acc3pt"),
    MessageKind.SETUP_EXPERIMENT: SetupExperiment(0.0, 1.0, None),
    MessageKind.ENTER_INIT: EnterInit(),
    MessageKind.EXIT_INIT: ExitInit(),
    MessageKind.DO_STEP: DoStep(0.0, 0.1),
    MessageKind.SET_REAL: SetValues(MessageKind.SET_REAL, (0,), (1.0,)),
    MessageKind.SET_INT: SetValues(MessageKind.SET_INT, (0,), (1,)),
    MessageKind.SET_BOOL: SetValues(MessageKind.SET_BOOL, (0,), (True,)),
    MessageKind.SET_STRING: SetValues(MessageKind.SET_STRING, (0,), ("x",)),
    MessageKind.GET_REAL: GetValues(MessageKind.GET_REAL, (2,)),
    MessageKind.GET_INT: GetValues(MessageKind.GET_INT, (2,)),
    MessageKind.GET_BOOL: GetValues(MessageKind.GET_BOOL, (2,)),
    MessageKind.GET_STRING: GetValues(MessageKind.GET_STRING, (2,)),
    MessageKind.TERMINATE: Terminate(),
    MessageKind.FREE_INSTANCE: FreeInstance(),
}

SET_CALLS = [MessageKind.SET_REAL, MessageKind.SET_INT,
             MessageKind.SET_BOOL, MessageKind.SET_STRING]
GET_CALLS = [MessageKind.GET_REAL, MessageKind.GET_INT,
             MessageKind.GET_BOOL, MessageKind.GET_STRING]


def test_criterion_6_state_machine_exhaustion(monkeypatch):
    with criterion(6, "every illegal state/call pair answers locally with "
                      "Error and zero bytes sent"):
        proxy_sends = {"count": 0}
        original_sendall = socket.socket.sendall

        def counting_sendall(sock, *args):
            if threading.current_thread() is threading.main_thread():
                proxy_sends["count"] += 1
            return original_sendall(sock, *args)

        monkeypatch.setattr(socket.socket, "sendall", counting_sendall)

        illegal_checked: list[tuple[InstanceState, MessageKind]] = []
        legal_exercised: list[tuple[InstanceState, MessageKind]] = []

        def probe_illegal(proxy: ProxyInstance):
            state = proxy.state
            legal_here = {kind for kind, states in LEGAL_CALLS.items()
                          if state in states}
            for kind, message in SAMPLE_CALLS.items():
                if kind in legal_here:
                    continue
                sends_before = proxy_sends["count"]
                outcome = proxy.forward_call(message)
                assert outcome == CallOutcome(Status.ERROR), (state, kind)
                assert proxy.state is state, (state, kind)
                assert proxy_sends["count"] == sends_before, (state, kind)
                illegal_checked.append((state, kind))

        def call_legal(proxy: ProxyInstance, kind: MessageKind):
            state = proxy.state
            assert proxy.forward_call(SAMPLE_CALLS[kind]).status is Status.OK
            legal_exercised.append((state, kind))

        proxy = ProxyInstance(adder_descriptor(), ("127.0.0.1", free_port()),
                              "acc3pt", accept_timeout=20.0,
                              call_timeout=10.0, unit_name="adder")
        proxy.listen()
        probe_illegal(proxy)                      # Listening: all 15

        backend = BackendThread(AdderModel(), proxy.listen_address,
                                "adder", "acc3pt").start()
        proxy.instantiate()
        probe_illegal(proxy)                      # Instantiated: 9
        for kind in SET_CALLS:
            call_legal(proxy, kind)
        call_legal(proxy, MessageKind.SETUP_EXPERIMENT)
        call_legal(proxy, MessageKind.ENTER_INIT)

        assert proxy.state is InstanceState.INITIALIZATION_MODE
        probe_illegal(proxy)                      # InitializationMode: 6
        for kind in SET_CALLS + GET_CALLS:
            call_legal(proxy, kind)
        call_legal(proxy, MessageKind.EXIT_INIT)

        assert proxy.state is InstanceState.STEP_MODE
        probe_illegal(proxy)                      # StepMode: 5
        for kind in SET_CALLS + GET_CALLS:
            call_legal(proxy, kind)
        call_legal(proxy, MessageKind.DO_STEP)
        assert proxy.state is InstanceState.STEP_MODE
        call_legal(proxy, MessageKind.TERMINATE)

        assert proxy.state is InstanceState.TERMINATED
        probe_illegal(proxy)                      # Terminated: 14
        call_legal(proxy, MessageKind.FREE_INSTANCE)
        backend.join()
        assert backend.report.clean_exit
        proxy.free()

        # reach Errored on a second endpoint: a reply that never arrives
        class GlacialStep(AdderModel):
            def do_step(self, current_time, step_size):
                time.sleep(1.0)
                return Status.OK

        errored = ProxyInstance(adder_descriptor(),
                                ("127.0.0.1", free_port()), "acc3pt",
                                accept_timeout=20.0, call_timeout=0.2,
                                unit_name="adder")
        errored.listen()
        glacial = BackendThread(GlacialStep(), errored.listen_address,
                                "adder", "acc3pt").start()
        errored.instantiate()
        for message in (SetupExperiment(0.0, 1.0, None), EnterInit(),
                        ExitInit()):
            errored.forward_call(message)
        with pytest.raises(Exception):
            errored.forward_call(DoStep(0.0, 0.1))
        assert errored.state is InstanceState.ERRORED
        probe_illegal(errored)                    # Errored: all 15
        errored.free()
        glacial.join()

        assert len(illegal_checked) == 64
        assert len(legal_exercised) == 26
        assert len(illegal_checked) + len(legal_exercised) \
            == len(InstanceState) * len(SAMPLE_CALLS)
        assert set(legal_exercised) \
            == {(state, kind) for kind, states in LEGAL_CALLS.items()
                for state in states}
        assert set(illegal_checked).isdisjoint(set(legal_exercised))


def random_message(rng: random.Random):
    def text():
        alphabet = "abcdefgh διακριτικό 漢字 é́"
        return "".join(rng.choice(alphabet)
                       for _ in range(rng.randrange(0, 12)))

    def real():
        return rng.choice([
            rng.uniform(-1e12, 1e12), 0.0, -0.0, math.inf, -math.inf,
            math.nan, 5e-324, 1.7976931348623157e308])

    def i32():
        return rng.choice([rng.randrange(-2**31, 2**31), -2**31, 2**31 - 1, 0])

    def vrs(n):
        return tuple(rng.randrange(0, 2**32) for _ in range(n))

    makers = {
        "real": real, "int": i32, "bool": lambda: rng.random() < 0.5,
        "string": text}
    set_kinds = {"real": MessageKind.SET_REAL, "int": MessageKind.SET_INT,
                 "bool": MessageKind.SET_BOOL, "string": MessageKind.SET_STRING}
    get_kinds = {"real": MessageKind.GET_REAL, "int": MessageKind.GET_INT,
                 "bool": MessageKind.GET_BOOL, "string": MessageKind.GET_STRING}

    choice = rng.randrange(11)
    if choice == 0:
        return Handshake(text(), text(), rng.randrange(0, 65536))
    if choice == 1:
        return SetupExperiment(real(),
                               rng.choice([None, real()]),
                               rng.choice([None, real()]))
    if choice == 2:
        return rng.choice([EnterInit(), ExitInit(), Terminate(),
                           FreeInstance()])
    if choice == 3:
        return DoStep(real(), real())
    if choice in (4, 5, 6):
        family = rng.choice(list(makers))
        n = rng.randrange(0, 6)
        return SetValues(set_kinds[family], vrs(n),
                         tuple(makers[family]() for _ in range(n)))
    if choice in (7, 8):
        family = rng.choice(list(makers))
        return GetValues(get_kinds[family], vrs(rng.randrange(0, 6)))
    if choice == 9:
        kind = rng.choice([k for k in MessageKind
                           if not k.name.startswith("GET_")])
        return StatusReply(kind, rng.choice(list(Status)))
    family = rng.choice(list(makers))
    return ValuesReply(get_kinds[family], rng.choice(list(Status)),
                       tuple(makers[family]()
                             for _ in range(rng.randrange(0, 6))))


def test_criterion_7_codec_round_trip_and_golden_corpus():
    with criterion(7, "10,000 messages survive encode/stream/decode bitwise "
                      "and the frozen corpus matches"):
        rng = random.Random(20260814)
        messages = [random_message(rng) for _ in range(10_000)]
        frames = [encode_message(m) for m in messages]
        stream = b"".join(frames)

        decoder = StreamDecoder()
        recovered: list[bytes] = []
        position = 0
        while position < len(stream):
            size = rng.randrange(1, 8192)
            decoder.feed(stream[position:position + size])
            position += size
            while True:
                message = decoder.next_message()
                if message is None:
                    break
                recovered.append(encode_message(message))
        assert decoder.pending_bytes() == 0
        assert len(recovered) == 10_000
        assert recovered == frames

        vectors = load_golden_vectors()
        assert len(vectors) == 37
        for vector in vectors:
            frame = bytes.fromhex(vector["frame_hex"])
            expected = message_from_json(vector["message"])
            assert encode_message(expected) == frame, vector["name"]
            decoded, consumed = decode_message(frame)
            assert consumed == len(frame)
            assert encode_message(decoded) == frame, vector["name"]

        assert encode_message(DoStep(0.0, 0.01)).hex() \
            == "11000000130000000000000000" + "7b14ae47e17a843f"
        handshake = encode_message(Handshake("adder", "s3cret"))
        assert struct.unpack("<I", handshake[:4])[0] == 22
        reply = encode_message(
            ValuesReply(MessageKind.GET_REAL, Status.OK, (3.0,)))
        assert reply[5:] == bytes([0]) + struct.pack("<I", 1) \
            + struct.pack("<d", 3.0)
