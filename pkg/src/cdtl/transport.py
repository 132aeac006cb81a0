"""Byte transports between a client and a server: in-process loopback and TCP."""
from __future__ import annotations

import socket
import socketserver
import threading

from .protocol import read_frame
from .server import Server


class LoopbackTransport:
    """Calls the server directly. Used by tests and by the in-process benchmark."""

    networked = False

    def __init__(self, server: Server):
        self.server = server

    def request(self, data: bytes) -> bytes:
        return self.server.handle(data)

    def close(self):
        pass


class TcpTransport:
    networked = True

    def __init__(self, host: str, port: int, timeout: float | None = 60.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)

    def request(self, data: bytes) -> bytes:
        self.sock.sendall(data)
        resp = read_frame(self.sock)
        if resp is None:
            raise ConnectionError("server closed the connection")
        return resp

    def close(self):
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        while True:
            data = read_frame(self.request)
            if data is None:
                return
            # Server.handle serializes requests across connections
            self.request.sendall(self.server.cdbs.handle(data))


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


def serve_tcp(server: Server, host: str, port: int) -> _TCPServer:
    """Start serving in a background thread; call ``shutdown()`` on the result to stop."""
    tcp = _TCPServer((host, port), _Handler)
    tcp.cdbs = server
    threading.Thread(target=tcp.serve_forever, daemon=True).start()
    return tcp
