"""Frame codec for the prior protocol, version 1.

A frame is a 4-byte little-endian unsigned payload length N followed by
N bytes: a JSON header in UTF-8 terminated by a single 0x0A byte, then
the raw little-endian float32 tensor payload. The header always carries
"tensor_bytes", and len(header) + 1 + tensor_bytes == N. Writers emit
canonical JSON (sorted keys, no spaces) so frames are reproducible
byte-for-byte.

Messages:
    {"kind": "hello", "proto": 1}                      -> hello + "model"
    {"kind": "predict", "seq": k, "prior": kind, "timestep": t,
     "prompt": text-or-null, "unconditional": bool,
     "views": [[az, el], ...], "focus_index": i, "shape": [V, H, W, C]}
                                                       -> response + payload
    {"kind": "error", "msg": text}
"""

from __future__ import annotations

import json
from typing import Tuple

MAX_FRAME = 256 * 1024 * 1024
PROTO_VERSION = 1


class FramingError(Exception):
    pass


def encode(header: dict, payload: bytes = b"") -> bytes:
    head = dict(header)
    head["tensor_bytes"] = len(payload)
    blob = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = blob + b"\n" + payload
    if len(body) > MAX_FRAME:
        raise FramingError("frame too large")
    return len(body).to_bytes(4, "little") + body


def decode(body: bytes) -> Tuple[dict, bytes]:
    """Split a frame body (after the length prefix) into (header, payload)."""
    nl = body.find(b"\n")
    if nl < 0:
        raise FramingError("missing header terminator")
    try:
        header = json.loads(body[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FramingError(f"bad header: {exc}") from exc
    if not isinstance(header, dict) or "kind" not in header:
        raise FramingError("header is not an object with a kind")
    payload = body[nl + 1 :]
    if header.get("tensor_bytes") != len(payload):
        raise FramingError(
            f"declared {header.get('tensor_bytes')} tensor bytes, got {len(payload)}"
        )
    return header, payload


def read_frame(recv_exact) -> Tuple[dict, bytes]:
    """Read one frame via a callable returning exactly n bytes."""
    n = int.from_bytes(recv_exact(4), "little")
    if n > MAX_FRAME:
        raise FramingError("frame too large")
    return decode(recv_exact(n))
