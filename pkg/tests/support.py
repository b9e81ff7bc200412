"""Shared helpers for the test suite."""

from __future__ import annotations

import json
import socket
import threading
from pathlib import Path

from cosimlink.backend import BackendConfig, connect_and_serve
from cosimlink.descriptor import parse_descriptor
from cosimlink.models import AdderModel, VariableStoreModel, packaged_descriptor_text
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
    Terminate,
    ValuesReply,
)

GOLDEN_PATH = Path(__file__).resolve().parent.parent / "golden" / "wire_vectors.json"


def load_golden_vectors() -> list[dict]:
    return json.loads(GOLDEN_PATH.read_text(encoding="utf-8"))["vectors"]


def message_from_json(doc: dict):
    """Rebuild the message object a golden-vector entry describes."""
    kind_name = doc["type"]
    if kind_name == "HANDSHAKE":
        return Handshake(doc["instance_name"], doc["auth_token"],
                         doc["protocol_version"])
    if kind_name == "SETUP_EXPERIMENT":
        return SetupExperiment(doc["start_time"], doc["stop_time"],
                               doc["tolerance"])
    if kind_name == "ENTER_INIT":
        return EnterInit()
    if kind_name == "EXIT_INIT":
        return ExitInit()
    if kind_name == "DO_STEP":
        return DoStep(doc["current_time"], doc["step_size"])
    if kind_name == "TERMINATE":
        return Terminate()
    if kind_name == "FREE_INSTANCE":
        return FreeInstance()
    if kind_name == "STATUS_REPLY":
        return StatusReply(MessageKind[doc["request_kind"]],
                           Status(doc["status"]))
    if kind_name == "VALUES_REPLY":
        return ValuesReply(MessageKind[doc["request_kind"]],
                           Status(doc["status"]), tuple(doc["values"]))
    kind = MessageKind[kind_name]
    if kind_name.startswith("SET_"):
        return SetValues(kind, tuple(doc["vrs"]), tuple(doc["values"]))
    if kind_name.startswith("GET_"):
        return GetValues(kind, tuple(doc["vrs"]))
    raise AssertionError(f"unhandled vector type {kind_name}")


def free_port() -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as probe:
        probe.bind(("127.0.0.1", 0))
        return probe.getsockname()[1]


def adder_descriptor():
    return parse_descriptor(packaged_descriptor_text("demo1_adder.json"))


class RecordingModel(AdderModel):
    """Adder that remembers every callback it receives, in order."""

    def __init__(self, descriptor=None):
        super().__init__(descriptor if descriptor is not None else adder_descriptor())
        self.calls: list[str] = []

    def setup_experiment(self, *args, **kwargs):
        self.calls.append("setup_experiment")
        return super().setup_experiment(*args, **kwargs)

    def enter_initialization(self):
        self.calls.append("enter_initialization")
        return super().enter_initialization()

    def exit_initialization(self):
        self.calls.append("exit_initialization")
        return super().exit_initialization()

    def do_step(self, current_time, step_size):
        self.calls.append("do_step")
        return super().do_step(current_time, step_size)

    def set_values(self, var_type, vrs, values):
        self.calls.append("set_values")
        return super().set_values(var_type, vrs, values)

    def get_values(self, var_type, vrs):
        self.calls.append("get_values")
        return super().get_values(var_type, vrs)

    def terminate(self):
        self.calls.append("terminate")
        return super().terminate()


class BackendThread:
    """Serve one model on a daemon thread; capture the report or the error."""

    def __init__(self, model: VariableStoreModel, address: tuple[str, int],
                 instance_name: str, token: str, reply_delay_ms: int = 0,
                 **config_kwargs):
        self.model = model
        self.config = BackendConfig(address, instance_name, token,
                                    reply_delay_ms=reply_delay_ms,
                                    **config_kwargs)
        self.report = None
        self.error: BaseException | None = None
        self.thread = threading.Thread(target=self._serve, daemon=True,
                                       name=f"backend-{instance_name}")

    def _serve(self):
        try:
            self.report = connect_and_serve(self.model, self.config)
        except BaseException as exc:
            self.error = exc

    def start(self) -> "BackendThread":
        self.thread.start()
        return self

    def join(self, timeout: float = 30.0) -> "BackendThread":
        self.thread.join(timeout)
        assert not self.thread.is_alive(), \
            f"backend {self.config.instance_name} still running"
        return self


class SocketAudit:
    """Record which thread performed which low-level socket operation.

    Installed with monkeypatch over the socket class methods; loopback test
    traffic is small enough that recording every call is cheap.
    """

    OPS = ("connect", "bind", "listen", "accept")

    def __init__(self):
        self.events: list[tuple[str, str]] = []
        self._lock = threading.Lock()

    def record(self, op: str):
        with self._lock:
            self.events.append((op, threading.current_thread().name))

    def install(self, monkeypatch):
        for op in self.OPS:
            original = getattr(socket.socket, op)

            def wrapper(sock, *args, _op=op, _original=original):
                self.record(_op)
                return _original(sock, *args)

            monkeypatch.setattr(socket.socket, op, wrapper)
        return self

    def ops_by_thread(self, op: str) -> dict[str, int]:
        out: dict[str, int] = {}
        for name, thread in self.events:
            if name == op:
                out[thread] = out.get(thread, 0) + 1
        return out
