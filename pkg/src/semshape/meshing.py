"""Marching-tetrahedra extraction, color baking, stats, and mesh export.

Each tet contributes 0, 1 or 2 triangles depending on its corner sign
pattern. Crossing-edge vertices are deduplicated by their ascending
vertex-id pair, so neighboring tets stitch exactly and closed level
sets come out watertight. Triangle winding is fixed against the tet's
SDF gradient, which keeps normals outward without a flood fill.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .errors import OutputError
from .tet_field import SdfField, interpolate, tet_gradients

DEGENERATE_AREA = 1e-12

# sign-case -> triangle count, indexed by the 4-bit inside pattern
CASE_TRIANGLE_COUNTS = (0, 1, 1, 2, 1, 2, 2, 1, 1, 2, 2, 1, 2, 1, 1, 0)

_FAULT_ENV = "TF_FAULT"
_FAULT_CASE_FLIP = "mt_case_flip"


@dataclass
class Mesh:
    vertices: np.ndarray  # (V,3) float64
    triangles: np.ndarray  # (F,3) int64, outward winding
    colors: Optional[np.ndarray] = None  # (V,3) float64 in [0,1]

    @property
    def is_empty(self) -> bool:
        return self.triangles.shape[0] == 0


@dataclass
class MeshStats:
    n_vertices: int
    n_edges: int
    n_triangles: int
    watertight: bool
    euler_characteristic: int
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    max_sdf_residual: Optional[float] = None


def empty_mesh() -> Mesh:
    return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


def marching_tetrahedra(field: SdfField) -> Mesh:
    values = field.values.detach().double().numpy()
    grid = field.grid
    with torch.no_grad():
        grads = tet_gradients(field).double().numpy()
    fault = os.environ.get(_FAULT_ENV) == _FAULT_CASE_FLIP
    return extract_surface(values, grid.vertices, grid.tets, grads, fault=fault)


def extract_surface(
    values: np.ndarray,
    positions: np.ndarray,
    tets: np.ndarray,
    tet_grads: np.ndarray,
    fault: bool = False,
) -> Mesh:
    """Case-table extraction over arbitrary tets; values must carry no
    exact zeros."""
    inside = values < 0.0
    inside4 = inside[tets]
    pattern = (inside4 * (1, 2, 4, 8)).sum(axis=1)
    count = inside4.sum(axis=1)
    tet_ids = np.arange(tets.shape[0])

    if fault:
        # deliberately corrupt one case so the validation matrix trips
        keep = pattern != 1
        tets, inside4, count, tet_ids = tets[keep], inside4[keep], count[keep], tet_ids[keep]

    single = (count == 1) | (count == 3)
    double = count == 2
    if not (single.any() or double.any()):
        return empty_mesh()

    tri_chunks = []  # (N,3,2) arrays: a (vid_a, vid_b) crossing edge per corner
    tet_chunks = []  # emitting tet index per triangle, for orientation

    if single.any():
        t4 = tets[single]
        lone_inside = count[single] == 1
        pat = inside4[single]
        lone_slot = np.where(lone_inside, pat.argmax(axis=1), (~pat).argmax(axis=1))
        slots = np.arange(4)[None, :]
        others = np.argsort(np.where(slots == lone_slot[:, None], 9, slots), axis=1)[:, :3]
        rows = np.arange(t4.shape[0])
        lone_vid = t4[rows, lone_slot]
        other_vid = t4[rows[:, None], others]
        corners = np.stack(
            [np.stack([lone_vid, other_vid[:, m]], axis=1) for m in range(3)], axis=1
        )
        tri_chunks.append(corners)
        tet_chunks.append(tet_ids[single])

    if double.any():
        t4 = tets[double]
        pat = inside4[double]
        slot = np.argsort(~pat, kind="stable", axis=1)  # inside slots first, ascending
        rows = np.arange(t4.shape[0])
        a, b = t4[rows, slot[:, 0]], t4[rows, slot[:, 1]]
        c, d = t4[rows, slot[:, 2]], t4[rows, slot[:, 3]]
        # quad cycle P_ac, P_ad, P_bd, P_bc split along (P_ac, P_bd)
        e_ac = np.stack([a, c], axis=1)
        e_ad = np.stack([a, d], axis=1)
        e_bd = np.stack([b, d], axis=1)
        e_bc = np.stack([b, c], axis=1)
        tri_chunks.append(np.stack([e_ac, e_ad, e_bd], axis=1))
        tri_chunks.append(np.stack([e_ac, e_bd, e_bc], axis=1))
        tet_chunks.append(tet_ids[double])
        tet_chunks.append(tet_ids[double])

    corner_edges = np.concatenate(tri_chunks, axis=0)  # (F,3,2)
    emit_tet = np.concatenate(tet_chunks, axis=0)

    keys = np.sort(corner_edges.reshape(-1, 2), axis=1)
    unique_keys, corner_idx = np.unique(keys, axis=0, return_inverse=True)
    triangles = corner_idx.reshape(-1, 3)

    fu = values[unique_keys[:, 0]]
    fv = values[unique_keys[:, 1]]
    t_param = (fu / (fu - fv))[:, None]
    verts = positions[unique_keys[:, 0]] + t_param * (
        positions[unique_keys[:, 1]] - positions[unique_keys[:, 0]]
    )

    v0, v1, v2 = (verts[triangles[:, k]] for k in range(3))
    geom_n = np.cross(v1 - v0, v2 - v0)
    flip = (geom_n * tet_grads[emit_tet]).sum(axis=1) < 0.0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]

    area = 0.5 * np.linalg.norm(geom_n, axis=1)
    triangles = triangles[area > DEGENERATE_AREA]
    return _compact(verts, triangles)


def _compact(vertices: np.ndarray, triangles: np.ndarray) -> Mesh:
    """Drop unreferenced vertices and remap indices."""
    if triangles.shape[0] == 0:
        return empty_mesh()
    used, remap = np.unique(triangles.reshape(-1), return_inverse=True)
    return Mesh(vertices[used], remap.reshape(-1, 3).astype(np.int64))


def mesh_vertex_normals(mesh: Mesh) -> np.ndarray:
    """Area-weighted vertex normals from triangle geometry."""
    n = np.zeros_like(mesh.vertices)
    if mesh.is_empty:
        return n
    v0, v1, v2 = (mesh.vertices[mesh.triangles[:, k]] for k in range(3))
    face_n = np.cross(v1 - v0, v2 - v0)
    for k in range(3):
        np.add.at(n, mesh.triangles[:, k], face_n)
    lens = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.maximum(lens, 1e-30)


def bake_vertex_colors(mesh: Mesh, appearance) -> Mesh:
    from .appearance import material_at, shade

    if mesh.is_empty:
        return Mesh(mesh.vertices, mesh.triangles, np.zeros((0, 3)))
    normals = mesh_vertex_normals(mesh)
    pts = torch.from_numpy(np.clip(mesh.vertices, -1.0, 1.0)).to(appearance.features.dtype)
    with torch.no_grad():
        sample = material_at(appearance, pts)
        rgb = shade(sample, torch.from_numpy(normals).to(pts.dtype))
    return Mesh(mesh.vertices, mesh.triangles, rgb.double().numpy())


def mesh_stats(mesh: Mesh, field: Optional[SdfField] = None) -> MeshStats:
    tris = mesh.triangles
    if tris.shape[0] == 0:
        return MeshStats(
            n_vertices=mesh.vertices.shape[0],
            n_edges=0,
            n_triangles=0,
            watertight=False,
            euler_characteristic=mesh.vertices.shape[0],
            bbox_min=np.zeros(3),
            bbox_max=np.zeros(3),
            max_sdf_residual=None,
        )
    pairs = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    pairs.sort(axis=1)
    edges, counts = np.unique(pairs, axis=0, return_counts=True)
    residual = None
    if field is not None:
        pts = torch.from_numpy(np.clip(mesh.vertices, -1.0, 1.0)).to(field.dtype)
        with torch.no_grad():
            val, _, _ = interpolate(field, pts)
        residual = float(val.abs().max())
    return MeshStats(
        n_vertices=mesh.vertices.shape[0],
        n_edges=edges.shape[0],
        n_triangles=tris.shape[0],
        watertight=bool((counts == 2).all()),
        euler_characteristic=int(mesh.vertices.shape[0] - edges.shape[0] + tris.shape[0]),
        bbox_min=mesh.vertices.min(axis=0),
        bbox_max=mesh.vertices.max(axis=0),
        max_sdf_residual=residual,
    )


def write_ply(mesh: Mesh, path) -> None:
    colored = mesh.colors is not None
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {mesh.vertices.shape[0]}"]
    header += ["property float x", "property float y", "property float z"]
    if colored:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [
        f"element face {mesh.triangles.shape[0]}",
        "property list uchar uint vertex_indices",
        "end_header",
    ]
    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            xyz = mesh.vertices.astype("<f4")
            if colored:
                rgb = np.clip(np.rint(mesh.colors * 255.0), 0, 255).astype(np.uint8)
                for i in range(xyz.shape[0]):
                    fh.write(struct.pack("<fff", *xyz[i]) + struct.pack("BBB", *rgb[i]))
            else:
                fh.write(xyz.tobytes())
            idx = mesh.triangles.astype("<u4")
            for i in range(idx.shape[0]):
                fh.write(struct.pack("<B", 3) + idx[i].tobytes())
    except OSError as exc:
        raise OutputError(f"cannot write PLY {path}: {exc}") from exc


def write_obj(mesh: Mesh, path) -> None:
    try:
        with open(path, "w", encoding="ascii") as fh:
            for i, v in enumerate(mesh.vertices):
                if mesh.colors is not None:
                    c = mesh.colors[i]
                    fh.write(
                        "v %.9g %.9g %.9g %.9g %.9g %.9g\n" % (v[0], v[1], v[2], c[0], c[1], c[2])
                    )
                else:
                    fh.write("v %.9g %.9g %.9g\n" % (v[0], v[1], v[2]))
            for t in mesh.triangles:
                fh.write("f %d %d %d\n" % (t[0] + 1, t[1] + 1, t[2] + 1))
    except OSError as exc:
        raise OutputError(f"cannot write OBJ {path}: {exc}") from exc
