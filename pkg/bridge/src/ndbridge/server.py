"""Single-connection TCP server speaking the framed prior protocol."""

from __future__ import annotations

import argparse
import signal
import socket
import sys

import numpy as np

from .adapters import make_adapter
from .framing import MAX_FRAME, PROTO_VERSION, FramingError, decode, encode

SUPPORTED_KINDS = ("nd", "rgbd", "normal2d")


class _Disconnect(Exception):
    pass


def _recv_exact(conn: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = conn.recv(min(65536, n - got))
        if not chunk:
            raise _Disconnect
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def adapt_predict(adapter, header: dict, payload: bytes) -> bytes:
    """Decode the tensor, run the adapter, re-encode; enforces the contract
    that unconditional requests reach the model without a prompt."""
    kind = header.get("prior")
    if kind not in getattr(adapter, "kinds", SUPPORTED_KINDS):
        raise FramingError(f"unsupported prior kind {kind!r}")
    shape = tuple(header.get("shape", ()))
    if len(shape) != 4:
        raise FramingError(f"predict shape must be rank 4, got {shape}")
    expected = int(np.prod(shape)) * 4
    if expected != len(payload):
        raise FramingError(f"shape {shape} wants {expected} payload bytes, got {len(payload)}")
    tensor = np.frombuffer(payload, dtype="<f4").reshape(shape)
    if header.get("unconditional"):
        header = dict(header, prompt=None)
    out = np.asarray(adapter.predict(header, tensor), dtype="<f4")
    if out.shape != shape:
        raise FramingError(f"adapter returned shape {out.shape}, expected {shape}")
    return out.tobytes()


def _handle_connection(conn: socket.socket, adapter) -> None:
    while True:
        try:
            n = int.from_bytes(_recv_exact(conn, 4), "little")
            if n > MAX_FRAME:
                conn.sendall(encode({"kind": "error", "msg": "frame too large"}))
                return
            header, payload = decode(_recv_exact(conn, n))
        except FramingError as exc:
            try:
                conn.sendall(encode({"kind": "error", "msg": str(exc)}))
            except OSError:
                pass
            return
        kind = header.get("kind")
        if kind == "hello":
            if header.get("proto") != PROTO_VERSION:
                conn.sendall(
                    encode({"kind": "error", "msg": f"unsupported proto {header.get('proto')}"})
                )
                return
            conn.sendall(
                encode({"kind": "hello", "proto": PROTO_VERSION, "model": adapter.identity})
            )
        elif kind == "predict":
            try:
                out = adapt_predict(adapter, header, payload)
            except FramingError as exc:
                conn.sendall(encode({"kind": "error", "msg": str(exc)}))
                return
            conn.sendall(
                encode(
                    {"kind": "response", "seq": header.get("seq"), "shape": header.get("shape")},
                    out,
                )
            )
        else:
            conn.sendall(encode({"kind": "error", "msg": f"unknown frame kind {kind!r}"}))
            return


def serve(endpoint: str, adapter, ready_callback=None) -> None:
    """Accept one connection at a time until terminated."""
    host, _, port = endpoint.rpartition(":")
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    listener.bind((host or "127.0.0.1", int(port)))
    listener.listen(1)
    bound = listener.getsockname()
    print(f"ndbridge[{adapter.identity}] listening on {bound[0]}:{bound[1]}", flush=True)
    if ready_callback is not None:
        ready_callback(f"{bound[0]}:{bound[1]}")
    try:
        while True:
            conn, _ = listener.accept()
            with conn:
                try:
                    _handle_connection(conn, adapter)
                except _Disconnect:
                    pass
    finally:
        listener.close()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ndbridge", description=__doc__)
    parser.add_argument("--listen", default="127.0.0.1:7060", help="host:port to bind")
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--echo", action="store_true", help="serve the echo adapter")
    group.add_argument("--model", help="serve a named real-model adapter")
    args = parser.parse_args(argv)

    signal.signal(signal.SIGTERM, lambda *_: sys.exit(0))
    try:
        adapter = make_adapter("echo" if args.echo or not args.model else args.model)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        serve(args.listen, adapter)
    except KeyboardInterrupt:
        pass
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
