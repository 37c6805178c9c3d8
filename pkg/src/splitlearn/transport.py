"""Frame transports: TCP sockets and an in-process socket pair.

Both carry the identical byte stream produced by :mod:`splitlearn.protocol`.
"""
from __future__ import annotations

import socket
import threading

from .protocol import Frame, FrameType, RemoteError, decode_error, read_frame, write_frame


class Connection:
    """One end of a framed, bidirectional byte stream."""

    def __init__(self, sock: socket.socket, timeout: float | None = None):
        self.sock = sock
        sock.settimeout(timeout)
        if sock.family in (socket.AF_INET, socket.AF_INET6):
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._rfile = sock.makefile("rb")
        self._wfile = sock.makefile("wb")
        self._send_lock = threading.Lock()

    def settimeout(self, timeout: float | None) -> None:
        self.sock.settimeout(timeout)

    def send(self, frame: Frame) -> None:
        with self._send_lock:
            write_frame(self._wfile, frame)

    def recv(self) -> Frame:
        return read_frame(self._rfile)

    def expect(self, ftype: FrameType) -> Frame:
        """Receive one frame, raising ``RemoteError`` on ERROR and on any other type."""
        frame = self.recv()
        if frame.type == FrameType.ERROR:
            raise RemoteError(*decode_error(frame.payload))
        if frame.type != ftype:
            raise RemoteError(0, f"expected {ftype.name}, got {frame.type.name}")
        return frame

    def close(self) -> None:
        for f in (self._wfile, self._rfile):
            try:
                f.close()
            except OSError:
                pass
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def inprocess_pair(timeout: float | None = None) -> tuple[Connection, Connection]:
    """Connected (client_end, server_end) over an OS socket pair."""
    a, b = socket.socketpair()
    return Connection(a, timeout), Connection(b, None)


def parse_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {address!r}")
    return host or "127.0.0.1", int(port)


def connect(address: str, timeout: float | None = None) -> Connection:
    host, port = parse_address(address)
    sock = socket.create_connection((host, port), timeout=timeout)
    return Connection(sock, timeout)


def listen(address: str) -> socket.socket:
    host, port = parse_address(address)
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen()
    return srv
