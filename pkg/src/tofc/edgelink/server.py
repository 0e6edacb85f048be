"""Edge server: decodes TOFC requests and answers with a decode summary."""

import logging
import socket
import socketserver
import threading
import time

from ..codec.container import TofcBitstream, decode_request, fnv1a64
from ..codec.tables import factorized_tables
from ..errors import ConfigError, CRCError, DecodeError, FormatError, TofcError
from .channel import ServerComputeModel
from .protocol import (
    DEFAULT_MAX_FRAME,
    FRAME_REQUEST,
    FRAME_RESPONSE,
    Response,
    Status,
    decode_frame,
    decode_request_body,
    encode_frame,
    encode_response_body,
    frame_length,
)

log = logging.getLogger(__name__)


def status_for(exc):
    """Response status for a typed decode failure."""
    if isinstance(exc, CRCError):
        return Status.CRC_ERROR
    if isinstance(exc, DecodeError):
        return Status.DECODE_ERROR
    if isinstance(exc, ConfigError):
        return Status.BANK_MISMATCH
    if isinstance(exc, FormatError):
        return Status.FORMAT_ERROR
    return Status.BAD_REQUEST


class EdgeServer:
    """Stateless request handler around an immutable parameter bank.

    Parameters
    ----------
    bank : ModelBank
        Must not be modified while serving.
    compute_model : ServerComputeModel
        Modeled per-token cost added to the measured decode time.
    echo : bool
        Include decoded residuals in responses (test mode).
    max_frame : int
        Largest accepted frame in bytes.
    """

    def __init__(self, bank, compute_model=None, echo=False, max_frame=DEFAULT_MAX_FRAME):
        self.bank = bank
        self.compute_model = compute_model or ServerComputeModel()
        self.echo = echo
        self.max_frame = max_frame
        # build lazy caches up front so request threads only read them
        for model in bank.models:
            model.medians()
            factorized_tables(model)

    def respond(self, request):
        """Decode one request into a :class:`Response`; never raises for bad input."""
        start = time.perf_counter()
        try:
            stream = TofcBitstream.from_bytes(request.container)
            decoded = decode_request(stream, self.bank)
        except TofcError as exc:
            elapsed = (time.perf_counter() - start) * 1000.0
            return Response(status_for(exc), elapsed, 0)
        elapsed = (time.perf_counter() - start) * 1000.0
        tokens = stream.n_p * stream.n_c
        return Response(
            Status.OK,
            elapsed + self.compute_model.modeled_ms(tokens),
            fnv1a64(decoded.residuals),
            decoded.residuals if self.echo else None,
        )

    def handle_frame(self, data):
        """Response frame bytes for raw request frame bytes."""
        try:
            frame = decode_frame(data, self.max_frame)
        except FormatError as exc:
            log.debug("rejecting malformed frame: %s", exc)
            return self._error_frame(0, Status.BAD_REQUEST)
        if frame.frame_type != FRAME_REQUEST:
            return self._error_frame(frame.correlation_id, Status.BAD_REQUEST)
        try:
            request = decode_request_body(frame.body)
        except FormatError:
            return self._error_frame(frame.correlation_id, Status.BAD_REQUEST)
        response = self.respond(request)
        return encode_frame(FRAME_RESPONSE, frame.correlation_id, encode_response_body(response), self.max_frame)

    def _error_frame(self, correlation_id, status):
        return encode_frame(FRAME_RESPONSE, correlation_id, encode_response_body(Response(status, 0.0, 0)))


def read_exact(sock_file, n):
    data = sock_file.read(n)
    if data is None or len(data) < n:
        return None
    return data


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        edge = self.server.edge
        while True:
            prefix = read_exact(self.rfile, 4)
            if prefix is None:
                return
            try:
                length = frame_length(prefix, edge.max_frame)
            except FormatError:
                # the stream cannot be resynchronized past a bad length
                self.wfile.write(edge._error_frame(0, Status.BAD_REQUEST))
                return
            rest = read_exact(self.rfile, length)
            if rest is None:
                return
            self.wfile.write(edge.handle_frame(prefix + rest))
            self.wfile.flush()


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class TcpEdgeServer:
    """Threaded TCP front end for :class:`EdgeServer`.

    Use as a context manager or call :meth:`start` / :meth:`stop`.
    """

    def __init__(self, edge, host="127.0.0.1", port=0):
        self.edge = edge
        self._server = _TCPServer((host, port), _Handler)
        self._server.edge = edge
        self._thread = None

    @property
    def address(self):
        return self._server.server_address[:2]

    def start(self):
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self):
        self._server.serve_forever()

    def stop(self):
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def port_is_open(host, port, timeout=0.2):
    try:
        with socket.create_connection((host, port), timeout=timeout):
            return True
    except OSError:
        return False
