"""Analytic reference shapes for the oracle prior.

Closed-loop runs need priors with known ground truth: each prompt maps
to a signed distance sampled on the engine grid, either from a centered
primitive (sphere, box, cylinder) or from a watertight mesh loaded from
a PLY file.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch

from .errors import ConfigurationError
from .tet_field import SdfField, TetGrid, guard_zeros

PRIMITIVES = ("sphere", "box", "cylinder", "mesh")


@dataclass(frozen=True)
class ReferenceSpec:
    prompt: str
    shape: str  # sphere | box | cylinder | mesh
    params: Tuple[float, ...] = ()
    color: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    mesh_path: Optional[str] = None

    def __post_init__(self):
        if self.shape not in PRIMITIVES:
            raise ConfigurationError(f"unknown reference shape {self.shape!r}")
        need = {"sphere": 1, "box": 3, "cylinder": 2, "mesh": 0}[self.shape]
        if len(self.params) != need:
            raise ConfigurationError(
                f"{self.shape} reference takes {need} parameters, got {len(self.params)}"
            )
        if self.shape == "mesh" and not self.mesh_path:
            raise ConfigurationError("mesh reference needs a file path")


def sphere_sdf(points: np.ndarray, radius: float) -> np.ndarray:
    return np.linalg.norm(points, axis=1) - radius


def box_sdf(points: np.ndarray, half_extents) -> np.ndarray:
    q = np.abs(points) - np.asarray(half_extents)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return outside + inside


def cylinder_sdf(points: np.ndarray, radius: float, half_height: float) -> np.ndarray:
    """Capped cylinder around the z axis."""
    d_r = np.hypot(points[:, 0], points[:, 1]) - radius
    d_z = np.abs(points[:, 2]) - half_height
    d = np.stack([d_r, d_z], axis=1)
    outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
    inside = np.minimum(d.max(axis=1), 0.0)
    return outside + inside


def _point_triangle_distance(points: np.ndarray, v0, v1, v2) -> np.ndarray:
    """Min distance from each point to each triangle; (N,F)."""
    # Ericson, Real-Time Collision Detection 5.1.5, vectorized over N x F
    p = points[:, None, :]
    a, b, c = v0[None], v1[None], v2[None]
    ab, ac, ap = b - a, c - a, p - a
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = p - b
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = p - c
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    denom = np.where(np.abs(vc + vb + va) < 1e-30, 1.0, va + vb + vc)
    v = vb / denom
    w = vc / denom
    closest = a + v[..., None] * ab + w[..., None] * ac  # face region

    # vertex regions
    closest = np.where(((d1 <= 0) & (d2 <= 0))[..., None], a, closest)
    closest = np.where(((d3 >= 0) & (d4 <= d3))[..., None], b, closest)
    closest = np.where(((d6 >= 0) & (d5 <= d6))[..., None], c, closest)
    # edge regions
    ab_t = np.clip(d1 / np.where(np.abs(d1 - d3) < 1e-30, 1.0, d1 - d3), 0.0, 1.0)
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    closest = np.where(on_ab[..., None], a + ab_t[..., None] * ab, closest)
    ac_t = np.clip(d2 / np.where(np.abs(d2 - d6) < 1e-30, 1.0, d2 - d6), 0.0, 1.0)
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    closest = np.where(on_ac[..., None], a + ac_t[..., None] * ac, closest)
    bc_t = np.clip(
        (d4 - d3) / np.where(np.abs((d4 - d3) + (d5 - d6)) < 1e-30, 1.0, (d4 - d3) + (d5 - d6)),
        0.0,
        1.0,
    )
    on_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    closest = np.where(on_bc[..., None], b + bc_t[..., None] * (c - b), closest)
    return np.linalg.norm(p - closest, axis=-1)


def _ray_parity(points: np.ndarray, v0, v1, v2) -> np.ndarray:
    """Crossing parity along a fixed, slightly tilted ray; True = inside."""
    d = np.array([1.0, 3.1e-4, 7.7e-4])
    d /= np.linalg.norm(d)
    e1 = v1 - v0
    e2 = v2 - v0
    h = np.cross(d, e2)
    det = (e1 * h).sum(-1)  # (F,)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    counts = np.zeros(points.shape[0], dtype=np.int64)
    s = points[:, None, :] - v0[None]  # (N,F,3)
    u = (s * h[None]).sum(-1) * inv[None]
    q = np.cross(s, e1[None])
    v = (q * d).sum(-1) * inv[None]
    t = (q * e2[None]).sum(-1) * inv[None]
    hit = ok[None] & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-12)
    counts += hit.sum(axis=1)
    return counts % 2 == 1


def mesh_sdf(points: np.ndarray, vertices: np.ndarray, triangles: np.ndarray, chunk: int = 128) -> np.ndarray:
    """Signed distance to a watertight triangle mesh (negative inside)."""
    if triangles.shape[0] == 0:
        raise ConfigurationError("mesh reference has no triangles")
    v0 = vertices[triangles[:, 0]]
    v1 = vertices[triangles[:, 1]]
    v2 = vertices[triangles[:, 2]]
    out = np.empty(points.shape[0])
    inside = np.empty(points.shape[0], dtype=bool)
    for lo in range(0, points.shape[0], chunk):
        pts = points[lo : lo + chunk]
        out[lo : lo + pts.shape[0]] = _point_triangle_distance(pts, v0, v1, v2).min(axis=1)
        inside[lo : lo + pts.shape[0]] = _ray_parity(pts, v0, v1, v2)
    return np.where(inside, -out, out)


def read_ply_mesh(path):
    """Minimal reader for the writer's binary-little-endian layout."""
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply\n") or end < 0:
        raise ConfigurationError(f"{path} is not a binary PLY file")
    header = blob[:end].decode("ascii").splitlines()
    n_vert = n_face = 0
    colored = False
    for line in header:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n_vert = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_face = int(parts[2])
        elif parts[:3] == ["property", "uchar", "red"]:
            colored = True
    off = end + len(b"end_header\n")
    stride = 12 + (3 if colored else 0)
    raw = np.frombuffer(blob, dtype=np.uint8, count=n_vert * stride, offset=off)
    raw = raw.reshape(n_vert, stride)
    verts = raw[:, :12].copy().view("<f4").astype(np.float64)
    off += n_vert * stride
    faces = np.zeros((n_face, 3), dtype=np.int64)
    for i in range(n_face):
        cnt = blob[off]
        if cnt != 3:
            raise ConfigurationError(f"{path}: only triangle faces are supported")
        faces[i] = np.frombuffer(blob, dtype="<u4", count=3, offset=off + 1)
        off += 1 + 12
    return verts, faces


def build_reference_field(
    ref: ReferenceSpec, grid: TetGrid, dtype: torch.dtype = torch.float32
) -> SdfField:
    pts = grid.vertices
    if ref.shape == "sphere":
        values = sphere_sdf(pts, ref.params[0])
    elif ref.shape == "box":
        values = box_sdf(pts, ref.params)
    elif ref.shape == "cylinder":
        values = cylinder_sdf(pts, ref.params[0], ref.params[1])
    else:
        verts, faces = read_ply_mesh(ref.mesh_path)
        values = mesh_sdf(pts, verts, faces)
    return SdfField(grid, guard_zeros(torch.from_numpy(values).to(dtype)))
