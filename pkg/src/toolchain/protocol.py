"""Wire format between build clients and the compilation server.

A message is a u32 payload length, a u8 kind and the payload. BUILD and
REPORT payloads are JSON; TEXT is UTF-8; HELLO carries the u16 protocol
version; DONE carries a u8 status (0 success).
"""
import json
import logging
import socket
import struct
import time
from dataclasses import dataclass
from typing import Optional

logger = logging.getLogger()

PROTOCOL_VERSION = 1
HELLO, BUILD, TEXT, REPORT, DONE, SHUTDOWN = range(1, 7)
KIND_NAMES = {HELLO: 'HELLO', BUILD: 'BUILD', TEXT: 'TEXT', REPORT: 'REPORT', DONE: 'DONE', SHUTDOWN: 'SHUTDOWN'}
MAX_PAYLOAD = 64 * 1024 * 1024
_HEAD = struct.Struct('<IB')


class ProtocolError(Exception):
    """Base class for client/server protocol errors."""
    pass


class ConnectFailed(ProtocolError):
    def __init__(self, socket_path, attempts, detail=''):
        self.socket_path = socket_path
        self.attempts = attempts
        super().__init__(f"cannot reach compilation server at {socket_path} after {attempts} attempt(s): {detail}")


class ProtocolVersionMismatch(ProtocolError):
    def __init__(self, ours, theirs):
        self.ours = ours
        self.theirs = theirs
        super().__init__(f"protocol version {theirs} does not match {ours}")


class MalformedMessage(ProtocolError):
    def __init__(self, reason):
        self.reason = reason
        super().__init__(f"malformed message: {reason}")


@dataclass(frozen=True)
class Message:
    kind: int
    payload: bytes = b''

    def json(self):
        try:
            return json.loads(self.payload.decode('utf-8'))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise MalformedMessage(f"{KIND_NAMES.get(self.kind, self.kind)} payload is not JSON: {e}") from None

    def text(self) -> str:
        return self.payload.decode('utf-8', errors='replace')


def encode_message(kind: int, payload: bytes = b'') -> bytes:
    if kind not in KIND_NAMES:
        raise MalformedMessage(f"unknown kind {kind}")
    return _HEAD.pack(len(payload), kind) + payload


def send_message(sock: socket.socket, kind: int, payload: bytes = b'') -> None:
    sock.sendall(encode_message(kind, payload))


def send_json(sock: socket.socket, kind: int, obj) -> None:
    send_message(sock, kind, json.dumps(obj, sort_keys=True).encode('utf-8'))


def send_hello(sock: socket.socket) -> None:
    send_message(sock, HELLO, struct.pack('<H', PROTOCOL_VERSION))


def _recv_exact(sock: socket.socket, n: int, started: bool) -> Optional[bytes]:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(min(remaining, 65536))
        if not chunk:
            if not started and remaining == n:
                return None
            raise MalformedMessage(f"connection closed with {remaining} byte(s) outstanding")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b''.join(chunks)


def recv_message(sock: socket.socket) -> Optional[Message]:
    """Next message, or None on a clean end of stream."""
    head = _recv_exact(sock, _HEAD.size, started=False)
    if head is None:
        return None
    length, kind = _HEAD.unpack(head)
    if kind not in KIND_NAMES:
        raise MalformedMessage(f"unknown kind {kind}")
    if length > MAX_PAYLOAD:
        raise MalformedMessage(f"payload of {length} bytes exceeds limit")
    payload = _recv_exact(sock, length, started=True) if length else b''
    return Message(kind, payload)


def check_hello(msg: Optional[Message]) -> None:
    if msg is None or msg.kind != HELLO:
        raise MalformedMessage('expected HELLO')
    if len(msg.payload) != 2:
        raise MalformedMessage('HELLO payload must be a u16 version')
    (version,) = struct.unpack('<H', msg.payload)
    if version != PROTOCOL_VERSION:
        raise ProtocolVersionMismatch(PROTOCOL_VERSION, version)


def connect_with_retry(socket_path: str, max_attempts: int = 1, base_delay: float = 0.05) -> socket.socket:
    """Connect to the server socket, retrying with exponential backoff."""
    last_error = ''
    for attempt in range(max(1, max_attempts)):
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        try:
            sock.connect(socket_path)
            return sock
        except OSError as e:
            sock.close()
            last_error = str(e)
            logger.debug(f"Connect to {socket_path} failed (attempt {attempt + 1}): {last_error}")
            if attempt < max_attempts - 1:
                time.sleep(base_delay * (2 ** attempt))
    raise ConnectFailed(socket_path, max(1, max_attempts), last_error)
