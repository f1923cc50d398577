"""Framed binary protocol for remote perception, plus a file-backed echo server.

Every message on the stream is preceded by a big-endian u32 byte count.

Request::

    "COBS" | version u8 | frame_id u64 | width u16 | height u16 | RGB (w*h*3)
    | object_label (u16 len + UTF-8) | robot_label (u16 len + UTF-8) | flags u8

Response::

    "COBS" | version u8 | frame_id u64 | status u8
    | robot bitmap | object bitmap | [depth: w*h u16]

Bitmaps are row-major, MSB-first, ``ceil(w*h/8)`` bytes. Error responses
stop after the status byte. The depth block is omitted when it was not
requested or the source has no depth for the frame.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from taskobs import codecs
from taskobs.errors import (
    CodecError,
    MalformedResponseError,
    MissingInputError,
    RemoteStatusError,
    TaskObsError,
)

log = logging.getLogger(__name__)

MAGIC = b"COBS"
VERSION = 1
FLAG_WANT_DEPTH = 0x01
MAX_MESSAGE = 64 * 1024 * 1024

STATUS_OK = 0
STATUS_MALFORMED = 1
STATUS_NOT_FOUND = 2
STATUS_SIZE_MISMATCH = 3
STATUS_INTERNAL = 4

_REQ_HEAD = struct.Struct(">4sBQHH")
_RESP_HEAD = struct.Struct(">4sBQB")
_LEN = struct.Struct(">I")
_U16 = struct.Struct(">H")


class MalformedRequestError(CodecError):
    def __init__(self, message, frame_id=0):
        self.frame_id = frame_id
        super().__init__(message)


@dataclass
class Request:
    frame_id: int
    image: np.ndarray
    object_label: str
    robot_label: str
    want_depth: bool


@dataclass
class Response:
    frame_id: int
    status: int
    robot: np.ndarray | None = None
    object: np.ndarray | None = None
    depth: np.ndarray | None = None  # raw u16 samples


def _label(text: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise CodecError("label longer than 65535 bytes")
    return _U16.pack(len(raw)) + raw


def encode_request(frame_id, image, object_label, robot_label, want_depth=True) -> bytes:
    img = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = img.shape[:2]
    return b"".join([
        _REQ_HEAD.pack(MAGIC, VERSION, int(frame_id), w, h),
        img.tobytes(),
        _label(object_label),
        _label(robot_label),
        bytes([FLAG_WANT_DEPTH if want_depth else 0]),
    ])


def decode_request(msg: bytes) -> Request:
    if len(msg) < _REQ_HEAD.size:
        raise MalformedRequestError("request shorter than header")
    magic, version, frame_id, w, h = _REQ_HEAD.unpack_from(msg)
    if magic != MAGIC:
        raise MalformedRequestError(f"bad magic {magic!r}")
    if version != VERSION:
        raise MalformedRequestError(f"unsupported version {version}", frame_id)
    pos = _REQ_HEAD.size
    n = w * h * 3
    if w == 0 or h == 0 or len(msg) < pos + n:
        raise MalformedRequestError("truncated RGB payload", frame_id)
    image = np.frombuffer(msg, np.uint8, n, pos).reshape(h, w, 3).copy()
    pos += n
    labels = []
    for _ in range(2):
        if len(msg) < pos + 2:
            raise MalformedRequestError("truncated label", frame_id)
        (ln,) = _U16.unpack_from(msg, pos)
        pos += 2
        if len(msg) < pos + ln:
            raise MalformedRequestError("truncated label", frame_id)
        try:
            labels.append(msg[pos:pos + ln].decode("utf-8"))
        except UnicodeDecodeError:
            raise MalformedRequestError("label is not UTF-8", frame_id) from None
        pos += ln
    if len(msg) != pos + 1:
        raise MalformedRequestError("missing flags or trailing bytes", frame_id)
    return Request(frame_id, image, labels[0], labels[1], bool(msg[pos] & FLAG_WANT_DEPTH))


def pack_bitmap(mask: np.ndarray) -> bytes:
    return np.packbits(np.asarray(mask, dtype=bool).ravel(), bitorder="big").tobytes()


def unpack_bitmap(data: bytes, w: int, h: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(data, np.uint8), bitorder="big", count=w * h)
    return bits.reshape(h, w).astype(bool)


def encode_response(frame_id, status, robot=None, obj=None, depth_samples=None) -> bytes:
    head = _RESP_HEAD.pack(MAGIC, VERSION, int(frame_id), status)
    if status != STATUS_OK:
        return head
    parts = [head, pack_bitmap(robot), pack_bitmap(obj)]
    if depth_samples is not None:
        parts.append(np.ascontiguousarray(depth_samples, dtype=">u2").tobytes())
    return b"".join(parts)


def decode_response(msg: bytes, width: int, height: int) -> Response:
    if len(msg) < _RESP_HEAD.size:
        raise MalformedResponseError("response shorter than header")
    magic, version, frame_id, status = _RESP_HEAD.unpack_from(msg)
    if magic != MAGIC or version != VERSION:
        raise MalformedResponseError(f"bad response header {magic!r} v{version}")
    if status != STATUS_OK:
        raise RemoteStatusError(status, frame_id)
    nbits = (width * height + 7) // 8
    ndepth = width * height * 2
    body = len(msg) - _RESP_HEAD.size
    if body not in (2 * nbits, 2 * nbits + ndepth):
        raise MalformedResponseError(f"response body has {body} bytes, expected {2 * nbits} or {2 * nbits + ndepth}")
    pos = _RESP_HEAD.size
    robot = unpack_bitmap(msg[pos:pos + nbits], width, height)
    obj = unpack_bitmap(msg[pos + nbits:pos + 2 * nbits], width, height)
    depth = None
    if body == 2 * nbits + ndepth:
        start = pos + 2 * nbits
        depth = np.frombuffer(msg, ">u2", width * height, start).reshape(height, width).astype(np.uint16)
    return Response(frame_id, status, robot, obj, depth)


def _recv_exact(sock, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(min(remaining, 1 << 16))
        if not chunk:
            raise MalformedResponseError(f"connection closed with {remaining} of {n} bytes outstanding")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def send_message(sock, msg: bytes):
    sock.sendall(_LEN.pack(len(msg)) + msg)


def recv_message(sock) -> bytes:
    (n,) = _LEN.unpack(_recv_exact(sock, _LEN.size))
    if n > MAX_MESSAGE:
        raise MalformedResponseError(f"message length {n} exceeds limit")
    return _recv_exact(sock, n)


def answer(msg: bytes, source) -> bytes:
    """Build the response bytes for one request against an episode directory."""
    from taskobs.providers import episode_paths

    try:
        req = decode_request(msg)
    except MalformedRequestError as exc:
        log.debug("malformed request: %s", exc)
        return encode_response(exc.frame_id, STATUS_MALFORMED)
    paths = episode_paths(source, req.frame_id)
    try:
        if not paths["robot"].exists() or not paths["object"].exists():
            return encode_response(req.frame_id, STATUS_NOT_FOUND)
        robot = codecs.read_mask(paths["robot"])
        obj = codecs.read_mask(paths["object"])
        if robot.shape != req.image.shape[:2] or obj.shape != req.image.shape[:2]:
            return encode_response(req.frame_id, STATUS_SIZE_MISMATCH)
        depth = None
        if req.want_depth and paths["depth"].exists():
            depth = codecs.read_depth_samples(paths["depth"])
            if depth.shape != robot.shape:
                return encode_response(req.frame_id, STATUS_SIZE_MISMATCH)
        return encode_response(req.frame_id, STATUS_OK, robot, obj, depth)
    except (TaskObsError, MissingInputError, OSError) as exc:
        log.warning("frame %d failed: %s", req.frame_id, exc)
        return encode_response(req.frame_id, STATUS_INTERNAL)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        server = self.server
        while True:
            try:
                head = self.request.recv(_LEN.size, socket.MSG_WAITALL)
                if len(head) < _LEN.size:
                    return
                (n,) = _LEN.unpack(head)
                if n > MAX_MESSAGE:
                    send_message(self.request, encode_response(0, STATUS_MALFORMED))
                    return
                msg = _recv_exact(self.request, n)
            except (OSError, MalformedResponseError):
                return
            if server.delay:
                time.sleep(server.delay)
            try:
                send_message(self.request, answer(msg, server.source))
            except OSError:
                return


class EchoServer(socketserver.ThreadingTCPServer):
    """Serve an episode directory's masks and depth over the wire protocol."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, source, host="127.0.0.1", port=0, delay=0.0):
        self.source = Path(source)
        self.delay = delay
        super().__init__((host, port), _Handler)

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread
