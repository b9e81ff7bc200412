"""Listening-side simulation unit.

A proxy stands in for a model the orchestrator cannot reach directly.  It
binds a port, waits for the real model backend to dial in and authenticate,
then forwards lifecycle and data calls over that single connection while
holding the lifecycle state machine.  The proxy never opens an outbound
connection; only bind, listen, and accept ever touch the network from here.
"""

from __future__ import annotations

import hmac
import logging
import socket
import time
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .descriptor import ModelDescriptor
from .wire import (
    DEFAULT_CALL_TIMEOUT,
    PROTOCOL_VERSION,
    Connection,
    FreeInstance,
    Handshake,
    MessageKind,
    ProtocolError,
    Status,
    StatusReply,
    ValuesReply,
    WireError,
)

log = logging.getLogger("cosimlink.proxy")

DEFAULT_ACCEPT_TIMEOUT = 60.0


class InstantiationError(RuntimeError):
    """No backend authenticated in time, or the endpoint cannot be bound."""


class InstanceState(Enum):
    LISTENING = "Listening"
    INSTANTIATED = "Instantiated"
    INITIALIZATION_MODE = "InitializationMode"
    STEP_MODE = "StepMode"
    TERMINATED = "Terminated"
    ERRORED = "Errored"


_DATA_SET_STATES = frozenset({
    InstanceState.INSTANTIATED,
    InstanceState.INITIALIZATION_MODE,
    InstanceState.STEP_MODE,
})
_DATA_GET_STATES = frozenset({
    InstanceState.INITIALIZATION_MODE,
    InstanceState.STEP_MODE,
})

# Which states admit each forwarded call.  HANDSHAKE is deliberately absent:
# it belongs to instantiation, never to forward_call.
LEGAL_CALLS: dict[MessageKind, frozenset[InstanceState]] = {
    MessageKind.SETUP_EXPERIMENT: frozenset({InstanceState.INSTANTIATED}),
    MessageKind.ENTER_INIT: frozenset({InstanceState.INSTANTIATED}),
    MessageKind.EXIT_INIT: frozenset({InstanceState.INITIALIZATION_MODE}),
    MessageKind.DO_STEP: frozenset({InstanceState.STEP_MODE}),
    MessageKind.TERMINATE: frozenset({InstanceState.STEP_MODE}),
    MessageKind.FREE_INSTANCE: frozenset({InstanceState.TERMINATED}),
    MessageKind.SET_REAL: _DATA_SET_STATES,
    MessageKind.SET_INT: _DATA_SET_STATES,
    MessageKind.SET_BOOL: _DATA_SET_STATES,
    MessageKind.SET_STRING: _DATA_SET_STATES,
    MessageKind.GET_REAL: _DATA_GET_STATES,
    MessageKind.GET_INT: _DATA_GET_STATES,
    MessageKind.GET_BOOL: _DATA_GET_STATES,
    MessageKind.GET_STRING: _DATA_GET_STATES,
}

_TRANSITIONS = {
    MessageKind.ENTER_INIT: InstanceState.INITIALIZATION_MODE,
    MessageKind.EXIT_INIT: InstanceState.STEP_MODE,
    MessageKind.TERMINATE: InstanceState.TERMINATED,
}


@dataclass(frozen=True)
class CallOutcome:
    """Backend-reported status plus values for the read calls."""
    status: Status
    values: tuple = ()


class ProxyInstance:
    """One listening endpoint bound to one backend for one model instance."""

    def __init__(self, descriptor: ModelDescriptor,
                 listen_address: tuple[str, int], expected_token: str,
                 accept_timeout: float = DEFAULT_ACCEPT_TIMEOUT,
                 call_timeout: float = DEFAULT_CALL_TIMEOUT,
                 unit_name: Optional[str] = None):
        self.descriptor = descriptor
        self.listen_address = listen_address
        self.expected_token = expected_token
        self.accept_timeout = accept_timeout
        self.call_timeout = call_timeout
        self.unit_name = unit_name if unit_name is not None else descriptor.model_name
        self.state = InstanceState.LISTENING
        self._listener: Optional[socket.socket] = None
        self._connection: Optional[Connection] = None
        self._freed = False

    def _event(self, name: str, detail: str = ""):
        log.info("EVENT=%s t=%.6f unit=%s%s", name, time.time(), self.unit_name,
                 f" {detail}" if detail else "")

    # -- instantiation -------------------------------------------------------

    def listen(self) -> None:
        """Bind and start listening; separate from accept so callers can
        start the backend process after the port exists."""
        if self._listener is not None:
            return
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            listener.bind(self.listen_address)
            listener.listen(8)
        except OSError as exc:
            listener.close()
            self.state = InstanceState.ERRORED
            raise InstantiationError(
                f"unit {self.unit_name}: cannot listen on "
                f"{self.listen_address[0]}:{self.listen_address[1]}: {exc}") from exc
        self._listener = listener
        self._event("listen", "address=%s:%d" % self.listen_address)

    def instantiate(self) -> None:
        """Block until a backend authenticates, up to accept_timeout.

        A rejected client (bad token, name, or version) gets an Error reply
        and its connection closed; listening resumes on the same deadline, so
        failed attempts never extend the window.
        """
        self.listen()
        assert self._listener is not None
        deadline = time.monotonic() + self.accept_timeout
        try:
            while True:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                self._listener.settimeout(remaining)
                try:
                    raw_sock, peer = self._listener.accept()
                except socket.timeout:
                    break
                candidate = Connection(raw_sock)
                if self._authenticate(candidate, deadline, peer):
                    self._connection = candidate
                    self.state = InstanceState.INSTANTIATED
                    self._event("handshake_ok", f"peer={peer[0]}:{peer[1]}")
                    self._event("state_change", "state=Instantiated")
                    return
        finally:
            self._close_listener()
        self.state = InstanceState.ERRORED
        self._event("error", f"reason=accept_timeout after={self.accept_timeout}s")
        raise InstantiationError(
            f"unit {self.unit_name}: no authenticated backend within "
            f"{self.accept_timeout} s")

    def _authenticate(self, candidate: Connection, deadline: float,
                      peer) -> bool:
        try:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise WireError("deadline passed")
            message = candidate.read_message(timeout=remaining)
        except WireError as exc:
            self._event("handshake_reject", f"reason=unreadable detail={exc}")
            candidate.close()
            return False
        if not isinstance(message, Handshake):
            reason = f"reason=not_handshake kind={type(message).__name__}"
        elif message.protocol_version != PROTOCOL_VERSION:
            reason = f"reason=version got={message.protocol_version}"
        elif message.instance_name != self.unit_name:
            reason = f"reason=instance_name got={message.instance_name!r}"
        elif not hmac.compare_digest(message.auth_token.encode("utf-8"),
                                     self.expected_token.encode("utf-8")):
            reason = "reason=token"
        else:
            candidate.send_message(StatusReply(MessageKind.HANDSHAKE, Status.OK))
            return True
        self._event("handshake_reject", f"{reason} peer={peer[0]}:{peer[1]}")
        try:
            candidate.send_message(StatusReply(MessageKind.HANDSHAKE, Status.ERROR))
        except OSError:
            pass
        candidate.close()
        return False

    def _close_listener(self):
        if self._listener is not None:
            self._listener.close()
            self._listener = None

    # -- forwarding ----------------------------------------------------------

    def forward_call(self, message) -> CallOutcome:
        """Forward one request to the backend and report its status.

        Requests that are illegal in the current state are answered locally
        with Error; nothing reaches the wire.  A wire failure or a Fatal
        reply moves the instance to Errored.
        """
        kind = message.kind
        if self.state not in LEGAL_CALLS.get(kind, frozenset()) \
                or self._connection is None:
            self._event("error",
                        f"reason=illegal_call kind={kind.name} state={self.state.value}")
            return CallOutcome(Status.ERROR)
        try:
            reply = self._connection.request_reply(message, timeout=self.call_timeout)
        except WireError as exc:
            self._fail(f"reason=wire kind={kind.name} detail={exc}")
            raise
        if not isinstance(reply, (StatusReply, ValuesReply)):
            self._fail(f"reason=bad_reply kind={kind.name}")
            raise ProtocolError(f"reply to {kind.name} is {type(reply).__name__}")
        status = reply.status
        values = reply.values if isinstance(reply, ValuesReply) else ()
        if status is Status.FATAL:
            self._fail(f"reason=fatal kind={kind.name}")
        elif status in (Status.OK, Status.WARNING) and kind in _TRANSITIONS:
            self.state = _TRANSITIONS[kind]
            self._event("state_change", f"state={self.state.value}")
        return CallOutcome(status, tuple(values))

    def _fail(self, detail: str):
        self.state = InstanceState.ERRORED
        self._event("error", detail)
        if self._connection is not None:
            self._connection.close()
            self._connection = None

    # -- teardown ------------------------------------------------------------

    def free(self) -> None:
        """Release everything, best-effort and idempotent.

        Writes FREE_INSTANCE if the connection is still live; the reply is
        welcome but not required.  Never raises.
        """
        if self._freed:
            return
        self._freed = True
        if self._connection is not None and not self._connection.closed:
            try:
                self._connection.send_message(FreeInstance())
                self._connection.read_message(timeout=self.call_timeout)
            except (WireError, OSError):
                pass
            self._connection.close()
        self._connection = None
        self._close_listener()
        self._event("freed")


def instantiate(descriptor: ModelDescriptor, listen_address: tuple[str, int],
                expected_token: str,
                accept_timeout: float = DEFAULT_ACCEPT_TIMEOUT) -> ProxyInstance:
    """Create a proxy, then block until its backend has authenticated."""
    instance = ProxyInstance(descriptor, listen_address, expected_token,
                             accept_timeout)
    instance.instantiate()
    return instance
