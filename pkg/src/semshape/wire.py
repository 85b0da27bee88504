"""Client side of the framed prior protocol.

A frame is a 4-byte little-endian payload length N followed by N bytes:
a JSON header (UTF-8, canonical key order on write) terminated by one
0x0A byte, then the raw little-endian float32 tensor whose byte count
the header declares in "tensor_bytes". Protocol version 1 exchanges:

    {"kind": "hello", "proto": 1, "tensor_bytes": 0}
      -> {"kind": "hello", "model": "<identity>", "proto": 1, "tensor_bytes": 0}
    {"kind": "predict", "seq": k, "prior": "nd", "timestep": t,
     "prompt": "..."|null, "unconditional": false,
     "views": [[az, el], ...], "focus_index": 0,
     "shape": [V, H, W, C], "tensor_bytes": n} + payload
      -> {"kind": "response", "seq": k, "shape": [...], "tensor_bytes": n} + payload
    {"kind": "error", "msg": "...", "tensor_bytes": 0}

One connection, one request in flight; responses echo the request seq.
"""

from __future__ import annotations

import json
import socket
import time
from typing import Tuple

import numpy as np
import torch

from .diffusion import PriorRequest, PriorResponse
from .errors import ProtocolError

PROTO_VERSION = 1
MAX_FRAME = 256 * 1024 * 1024


def encode_frame(header: dict, payload: bytes = b"") -> bytes:
    head = dict(header)
    head["tensor_bytes"] = len(payload)
    blob = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = blob + b"\n" + payload
    if len(body) > MAX_FRAME:
        raise ProtocolError("frame too large")
    return len(body).to_bytes(4, "little") + body


def decode_frame(body: bytes) -> Tuple[dict, bytes]:
    """Split a frame body (without the length prefix) into header + payload."""
    nl = body.find(b"\n")
    if nl < 0:
        raise ProtocolError("malformed frame: missing header terminator")
    try:
        header = json.loads(body[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed frame header: {exc}") from exc
    payload = body[nl + 1 :]
    declared = header.get("tensor_bytes")
    if declared != len(payload):
        raise ProtocolError(
            f"header declares {declared} tensor bytes but frame carries {len(payload)}"
        )
    return header, payload


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(min(65536, n - got))
        if not chunk:
            raise ProtocolError("connection closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> Tuple[dict, bytes]:
    n = int.from_bytes(_recv_exact(sock, 4), "little")
    if n > MAX_FRAME:
        raise ProtocolError("frame too large")
    return decode_frame(_recv_exact(sock, n))


def parse_endpoint(endpoint: str) -> Tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not host:
        raise ProtocolError(f"endpoint must be host:port, got {endpoint!r}")
    try:
        return host, int(port)
    except ValueError as exc:
        raise ProtocolError(f"bad port in endpoint {endpoint!r}") from exc


class RemotePrior:
    """Synchronous prior client over the framed protocol."""

    kinds = ("nd", "rgbd", "normal2d")

    def __init__(self, endpoint: str, timeout: float = 30.0):
        host, port = parse_endpoint(endpoint)
        self.endpoint = endpoint
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise ProtocolError(f"cannot connect to prior at {endpoint}: {exc}") from exc
        self._seq = 0
        self.identity = self._hello()

    def _hello(self) -> str:
        self._send({"kind": "hello", "proto": PROTO_VERSION})
        header, _ = read_frame(self._sock)
        if header.get("kind") == "error":
            raise ProtocolError(f"bridge error during handshake: {header.get('msg')}")
        if header.get("kind") != "hello" or header.get("proto") != PROTO_VERSION:
            raise ProtocolError(f"protocol mismatch in handshake: {header}")
        return str(header.get("model", "unknown"))

    def _send(self, header: dict, payload: bytes = b"") -> None:
        try:
            self._sock.sendall(encode_frame(header, payload))
        except OSError as exc:
            raise ProtocolError(f"send failed: {exc}") from exc

    def predict(self, request: PriorRequest, true_eps=None, render_config=None) -> PriorResponse:
        tensor = request.tensors.detach().to(torch.float32).numpy().astype("<f4")
        header = {
            "kind": "predict",
            "seq": self._seq,
            "prior": request.kind,
            "timestep": request.timestep,
            "prompt": request.prompt,
            "unconditional": request.unconditional,
            "views": [[float(a), float(e)] for a, e in request.views],
            "focus_index": request.focus_index,
            "shape": list(tensor.shape),
        }
        self._send(header, tensor.tobytes())
        resp, payload = read_frame(self._sock)
        if resp.get("kind") == "error":
            raise ProtocolError(f"bridge error: {resp.get('msg')}")
        if resp.get("kind") != "response":
            raise ProtocolError(f"unexpected frame kind {resp.get('kind')!r}")
        if resp.get("seq") != self._seq:
            raise ProtocolError(
                f"out-of-order response: sent seq {self._seq}, got {resp.get('seq')}"
            )
        self._seq += 1
        shape = tuple(resp.get("shape", ()))
        if shape != tensor.shape:
            raise ProtocolError(f"response shape {shape} does not match request {tensor.shape}")
        arr = np.frombuffer(payload, dtype="<f4")
        if arr.size != tensor.size:
            raise ProtocolError("response payload size mismatch")
        return PriorResponse(torch.from_numpy(arr.reshape(shape).copy()))

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


def probe(endpoint: str, size: int = 16) -> Tuple[str, float]:
    """Handshake plus a small echo predict; returns (identity, latency_s)."""
    prior = RemotePrior(endpoint, timeout=10.0)
    try:
        tensor = torch.arange(size * size * 4, dtype=torch.float32).reshape(1, size, size, 4)
        tensor = tensor / tensor.numel()
        request = PriorRequest("nd", 1, None, True, [(0.0, 0.0)], 0, tensor)
        start = time.monotonic()
        response = prior.predict(request)
        latency = time.monotonic() - start
        if response.tensors.shape != tensor.shape:
            raise ProtocolError("probe response has the wrong shape")
        return prior.identity, latency
    finally:
        prior.close()
