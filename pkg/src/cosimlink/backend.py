"""Dialing-side model runtime.

The backend lives next to the actual model, on the side of the link that can
open outbound connections.  It dials the proxy, authenticates, then serves
the request stream against a model object until freed or disconnected.
Exactly one outbound connection per served instance; nothing here ever
listens.
"""

from __future__ import annotations

import json
import logging
import socket
import time
from dataclasses import dataclass, field
from typing import Optional

from .descriptor import VariableType
from .models import VariableStoreModel
from .wire import (
    DEFAULT_CALL_TIMEOUT,
    Connection,
    ConnectionClosed,
    DoStep,
    EnterInit,
    ExitInit,
    FreeInstance,
    GetValues,
    Handshake,
    MessageKind,
    ProtocolError,
    SetupExperiment,
    SetValues,
    Status,
    StatusReply,
    Terminate,
    ValuesReply,
)

log = logging.getLogger("cosimlink.backend")

CONNECT_ATTEMPTS = 5
CONNECT_RETRY_DELAY = 0.5

_KIND_TO_TYPE = {
    MessageKind.SET_REAL: VariableType.REAL,
    MessageKind.SET_INT: VariableType.INTEGER,
    MessageKind.SET_BOOL: VariableType.BOOLEAN,
    MessageKind.SET_STRING: VariableType.TEXT,
    MessageKind.GET_REAL: VariableType.REAL,
    MessageKind.GET_INT: VariableType.INTEGER,
    MessageKind.GET_BOOL: VariableType.BOOLEAN,
    MessageKind.GET_STRING: VariableType.TEXT,
}


class AuthenticationRejected(RuntimeError):
    """The proxy refused the handshake; no model callback was invoked."""


@dataclass
class BackendConfig:
    proxy_address: tuple[str, int]
    instance_name: str
    auth_token: str
    reply_delay_ms: int = 0
    connect_attempts: int = CONNECT_ATTEMPTS
    retry_delay: float = CONNECT_RETRY_DELAY
    call_timeout: float = DEFAULT_CALL_TIMEOUT

    def __post_init__(self):
        if self.reply_delay_ms < 0:
            raise ValueError("reply_delay_ms must be >= 0")


@dataclass
class ExitReport:
    """What one serve loop did before it ended."""
    instance_name: str
    counts: dict[str, int] = field(default_factory=dict)
    clean_exit: bool = False
    reason: str = ""

    def to_json(self) -> str:
        return json.dumps({
            "instance_name": self.instance_name,
            "counts": dict(sorted(self.counts.items())),
            "clean_exit": self.clean_exit,
            "reason": self.reason,
        })


def _connect(config: BackendConfig) -> socket.socket:
    last_error: Optional[OSError] = None
    for attempt in range(config.connect_attempts):
        if attempt:
            time.sleep(config.retry_delay)
        try:
            return socket.create_connection(config.proxy_address,
                                            timeout=config.call_timeout)
        except OSError as exc:
            last_error = exc
    raise ConnectionError(
        f"{config.instance_name}: proxy at "
        f"{config.proxy_address[0]}:{config.proxy_address[1]} unreachable "
        f"after {config.connect_attempts} attempts: {last_error}")


def _dispatch(model: VariableStoreModel, request) -> "StatusReply | ValuesReply":
    kind = request.kind
    if isinstance(request, GetValues):
        status, values = model.get_values(_KIND_TO_TYPE[kind], request.vrs)
        return ValuesReply(kind, status, values)
    if isinstance(request, SetValues):
        status = model.set_values(_KIND_TO_TYPE[kind], request.vrs, request.values)
    elif isinstance(request, SetupExperiment):
        status = model.setup_experiment(request.start_time, request.stop_time,
                                        request.tolerance)
    elif isinstance(request, EnterInit):
        status = model.enter_initialization()
    elif isinstance(request, ExitInit):
        status = model.exit_initialization()
    elif isinstance(request, DoStep):
        status = model.do_step(request.current_time, request.step_size)
    elif isinstance(request, Terminate):
        status = model.terminate()
    elif isinstance(request, FreeInstance):
        status = Status.OK
    else:
        raise ProtocolError(f"request kind {kind.name} not serviceable")
    return StatusReply(kind, status)


def connect_and_serve(model: VariableStoreModel,
                      config: BackendConfig) -> ExitReport:
    """Dial the proxy, authenticate, then serve requests until released.

    Returns an :class:`ExitReport` counting every request kind served.  A
    rejected handshake raises :class:`AuthenticationRejected` before any
    model callback runs; a vanished peer ends the loop with
    ``clean_exit=False`` rather than raising.
    """
    delay = config.reply_delay_ms / 1000.0

    def pace():
        # Uniform artificial service delay ahead of every outgoing frame.
        if delay:
            time.sleep(delay)

    conn = Connection(_connect(config))
    report = ExitReport(config.instance_name)
    try:
        pace()
        reply = conn.request_reply(
            Handshake(config.instance_name, config.auth_token),
            timeout=config.call_timeout)
        if not isinstance(reply, StatusReply) or reply.status is not Status.OK:
            raise AuthenticationRejected(
                f"{config.instance_name}: proxy rejected handshake")
        log.info("EVENT=serving t=%.6f instance=%s", time.time(),
                 config.instance_name)
        while True:
            try:
                request = conn.read_message(timeout=None)
            except ConnectionClosed as exc:
                report.reason = str(exc)
                return report
            kind = request.kind
            if isinstance(request, Handshake):
                raise ProtocolError("handshake repeated mid-session")
            report.counts[kind.name] = report.counts.get(kind.name, 0) + 1
            try:
                reply = _dispatch(model, request)
            except ProtocolError:
                raise
            except Exception:
                log.exception("model callback failed for %s", kind.name)
                reply = (ValuesReply(kind, Status.ERROR, ())
                         if isinstance(request, GetValues)
                         else StatusReply(kind, Status.ERROR))
            pace()
            conn.send_message(reply)
            if isinstance(request, FreeInstance):
                report.clean_exit = True
                report.reason = "freed"
                return report
    finally:
        conn.close()
