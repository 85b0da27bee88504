"""PNG and PFM output for rendered maps."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .errors import OutputError


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def write_rgb_png(rgb, path) -> None:
    arr = np.asarray(rgb, dtype=np.float64)
    try:
        Image.fromarray(_to_u8(arr), mode="RGB").save(path)
    except OSError as exc:
        raise OutputError(f"cannot write PNG {path}: {exc}") from exc


def write_normal_png(normal, path) -> None:
    """Camera-space normals encoded as (n+1)/2; exact-zero normals mark
    background pixels and come out black."""
    arr = np.asarray(normal, dtype=np.float64)
    enc = (arr + 1.0) / 2.0
    background = (arr == 0.0).all(axis=-1)
    enc[background] = 0.0
    try:
        Image.fromarray(_to_u8(enc), mode="RGB").save(path)
    except OSError as exc:
        raise OutputError(f"cannot write PNG {path}: {exc}") from exc


def write_pfm(gray, path) -> None:
    """Grayscale PFM, little-endian (negative scale), rows bottom-to-top."""
    arr = np.asarray(gray, dtype="<f4")
    if arr.ndim != 2:
        raise OutputError("PFM writer expects a single-channel image")
    h, w = arr.shape
    try:
        with open(path, "wb") as fh:
            fh.write(b"Pf\n")
            fh.write(f"{w} {h}\n".encode("ascii"))
            fh.write(b"-1.0\n")
            fh.write(arr[::-1].tobytes())
    except OSError as exc:
        raise OutputError(f"cannot write PFM {path}: {exc}") from exc


def read_pfm(path) -> np.ndarray:
    """Inverse of write_pfm, for round trips and the render command tests."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"Pf":
            raise OutputError(f"{path} is not a grayscale PFM")
        w, h = (int(x) for x in fh.readline().split())
        scale = float(fh.readline())
        data = np.frombuffer(fh.read(4 * w * h), dtype="<f4" if scale < 0 else ">f4")
    return data.reshape(h, w)[::-1].copy()
