"""Shared fixtures and independent oracles.

The oracles deliberately avoid the engine's permutation-based gradient
path: per-tet gradients come from solving the 3x3 linear system of each
tet's vertex positions and values, which is the defining property being
checked.
"""

import struct

import numpy as np
import pytest
import torch

from semshape.tet_field import TetGrid


def brute_tet_gradients(grid: TetGrid, values: np.ndarray) -> np.ndarray:
    """(T,3) per-tet gradients via np.linalg.solve on vertex systems."""
    p = grid.vertices[grid.tets]
    f = values[grid.tets]
    a = p[:, 1:4] - p[:, 0:1]
    rhs = (f[:, 1:4] - f[:, 0:1])[..., None]
    return np.linalg.solve(a, rhs)[..., 0]


def brute_eikonal(grid: TetGrid, values: np.ndarray) -> float:
    g = brute_tet_gradients(grid, values)
    return float(((np.linalg.norm(g, axis=1) - 1.0) ** 2).sum())


def brute_vertex_normals(grid: TetGrid, values: np.ndarray):
    """Volume-weighted averaged gradients, normalized; (normals, degenerate)."""
    g = brute_tet_gradients(grid, values)
    p = grid.vertices[grid.tets]
    vol = np.abs(np.linalg.det(p[:, 1:4] - p[:, 0:1])) / 6.0
    acc = np.zeros((grid.n_vertices, 3))
    wsum = np.zeros(grid.n_vertices)
    for k in range(4):
        np.add.at(acc, grid.tets[:, k], g * vol[:, None])
        np.add.at(wsum, grid.tets[:, k], vol)
    mean = acc / np.maximum(wsum, 1e-300)[:, None]
    norms = np.linalg.norm(mean, axis=1)
    degenerate = norms < 1e-12
    normals = np.zeros_like(acc)
    ok = ~degenerate
    normals[ok] = acc[ok] / np.linalg.norm(acc[ok], axis=1, keepdims=True)
    return normals, degenerate


def brute_normal_consistency(grid: TetGrid, values: np.ndarray) -> float:
    """Edge iteration over the near-surface band."""
    normals, degenerate = brute_vertex_normals(grid, values)
    band = np.abs(values) <= 2.0 * grid.cell_size
    total = 0.0
    for a, b in grid.edges:
        if not (band[a] and band[b]):
            continue
        if degenerate[a] or degenerate[b]:
            continue
        total += 1.0 - float(normals[a] @ normals[b])
    return total


def parse_ply_independent(path):
    """Minimal PLY reader written against the documented layout, sharing no
    code with the package writer or reader."""
    with open(path, "rb") as fh:
        data = fh.read()
    head_end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:head_end].decode("ascii").splitlines()
    assert header[0] == "ply"
    assert header[1] == "format binary_little_endian 1.0"
    n_vertex = n_face = 0
    props = []
    current = None
    for line in header[2:]:
        parts = line.split()
        if parts[0] == "element":
            current = parts[1]
            if current == "vertex":
                n_vertex = int(parts[2])
            elif current == "face":
                n_face = int(parts[2])
        elif parts[0] == "property" and current == "vertex":
            props.append((parts[1], parts[2]))
    colored = ("uchar", "red") in props
    off = head_end
    verts = np.zeros((n_vertex, 3), dtype=np.float32)
    colors = np.zeros((n_vertex, 3), dtype=np.uint8) if colored else None
    for i in range(n_vertex):
        verts[i] = struct.unpack_from("<fff", data, off)
        off += 12
        if colored:
            colors[i] = struct.unpack_from("BBB", data, off)
            off += 3
    faces = np.zeros((n_face, 3), dtype=np.int64)
    for i in range(n_face):
        (cnt,) = struct.unpack_from("<B", data, off)
        assert cnt == 3
        faces[i] = struct.unpack_from("<III", data, off + 1)
        off += 13
    return verts, faces, colors


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)
