"""Device-side clients: a TCP connection and an in-process loopback."""

import itertools
import socket
import threading

from ..errors import FormatError, NetworkError
from .protocol import (
    DEFAULT_MAX_FRAME,
    FRAME_REQUEST,
    FRAME_RESPONSE,
    decode_frame,
    decode_response_body,
    encode_frame,
    encode_request_body,
    frame_length,
)

_ids = itertools.count(1)
_ids_lock = threading.Lock()


def next_correlation_id():
    with _ids_lock:
        return next(_ids)


def request_frame(instruction, container, correlation_id=None, max_frame=DEFAULT_MAX_FRAME):
    """``(correlation_id, frame bytes)`` for one request."""
    cid = next_correlation_id() if correlation_id is None else correlation_id
    return cid, encode_frame(FRAME_REQUEST, cid, encode_request_body(instruction, container), max_frame)


def parse_response(data, max_frame=DEFAULT_MAX_FRAME):
    frame = decode_frame(data, max_frame)
    if frame.frame_type != FRAME_RESPONSE:
        raise FormatError(f"expected a response frame, got type {frame.frame_type}")
    return frame.correlation_id, decode_response_body(frame.body)


class EdgeClient:
    """Blocking TCP client; one outstanding request at a time per instance."""

    def __init__(self, host, port, timeout=30.0, max_frame=DEFAULT_MAX_FRAME):
        self.max_frame = max_frame
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise NetworkError(f"cannot connect to {host}:{port}: {exc}") from exc
        self._file = self._sock.makefile("rb")

    def send_request(self, instruction, container):
        """Frame and send one request; returns its correlation id."""
        cid, frame = request_frame(instruction, container, max_frame=self.max_frame)
        try:
            self._sock.sendall(frame)
        except OSError as exc:
            raise NetworkError(f"send failed: {exc}") from exc
        return cid

    def receive(self):
        """Next ``(correlation_id, Response)`` from the server."""
        try:
            prefix = self._file.read(4)
            if len(prefix) < 4:
                raise NetworkError("connection closed by server")
            rest = self._file.read(frame_length(prefix, self.max_frame))
        except OSError as exc:
            raise NetworkError(f"receive failed: {exc}") from exc
        return parse_response(prefix + rest, self.max_frame)

    def request(self, instruction, container):
        cid = self.send_request(instruction, container)
        got, response = self.receive()
        if got != cid:
            raise NetworkError(f"response for request {got}, expected {cid}")
        return response

    def send_raw(self, data):
        try:
            self._sock.sendall(data)
        except OSError as exc:
            raise NetworkError(f"send failed: {exc}") from exc

    def close(self):
        self._file.close()
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class LoopbackClient:
    """Same interface as :class:`EdgeClient`, delivering frames in process."""

    def __init__(self, edge, max_frame=DEFAULT_MAX_FRAME):
        self.edge = edge
        self.max_frame = max_frame
        self.sent = []
        self._pending = []

    def send_request(self, instruction, container):
        cid, frame = request_frame(instruction, container, max_frame=self.max_frame)
        self.send_raw(frame)
        return cid

    def send_raw(self, data):
        self.sent.append(bytes(data))
        self._pending.append(self.edge.handle_frame(bytes(data)))

    def receive(self):
        if not self._pending:
            raise NetworkError("no response pending")
        return parse_response(self._pending.pop(0), self.max_frame)

    def request(self, instruction, container):
        cid = self.send_request(instruction, container)
        got, response = self.receive()
        if got != cid:
            raise NetworkError(f"response for request {got}, expected {cid}")
        return response

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
