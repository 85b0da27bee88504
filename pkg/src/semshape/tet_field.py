"""Tetrahedral SDF on a regular lattice over [-1,1]^3.

Each of the R^3 cubic cells is split into the six Kuhn simplices around
the main diagonal, so every face is shared consistently with the
neighboring cell. Inside tet number ``6*cell + k`` the field is the
barycentric interpolation of its four corner values, which makes the
spatial gradient constant per tet and lets a point be located in O(1):
cell index by flooring, simplex by sorting the three local coordinates.

Values live in a torch tensor so the regularizers and the renderer get
exact reverse-mode derivatives with respect to them.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import torch

from .errors import ConfigurationError, ContractError, DomainError

# Cell-local simplex k covers {u : u[p0] >= u[p1] >= u[p2]} for the k-th
# lexicographic axis permutation (p0, p1, p2).
PERMS = ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0))

ZERO_GUARD = 1e-8
DEGENERATE_NORMAL_EPS = 1e-12
MAX_RESOLUTION = 512


class TetGrid:
    """Lattice geometry and connectivity. Immutable; heavy arrays are lazy."""

    def __init__(self, resolution: int):
        if not (1 <= int(resolution) <= MAX_RESOLUTION):
            raise ConfigurationError(
                f"grid resolution must be in [1, {MAX_RESOLUTION}], got {resolution}"
            )
        self.resolution = int(resolution)
        self.cell_size = 2.0 / self.resolution
        self.n_vertices = (self.resolution + 1) ** 3
        self.n_tets = 6 * self.resolution**3

    def vertex_id(self, ix, iy, iz):
        n = self.resolution + 1
        return (ix * n + iy) * n + iz

    @cached_property
    def vertices(self) -> np.ndarray:
        """(V,3) float64 positions, x-major lattice order."""
        n = self.resolution + 1
        axis = np.linspace(-1.0, 1.0, n)
        gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)

    def _cell_corner_ids(self) -> np.ndarray:
        """(C,3) integer lattice coordinates of each cell's min corner."""
        r = self.resolution
        idx = np.arange(r)
        gx, gy, gz = np.meshgrid(idx, idx, idx, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)

    def _path_corner_table(self) -> np.ndarray:
        """(6,4,3) lattice offsets of each simplex's corners in path order."""
        table = np.zeros((6, 4, 3), dtype=np.int64)
        for k, (p0, p1, p2) in enumerate(PERMS):
            c = np.zeros(3, dtype=np.int64)
            table[k, 0] = c
            c = c.copy()
            c[p0] += 1
            table[k, 1] = c
            c = c.copy()
            c[p1] += 1
            table[k, 2] = c
            table[k, 3] = (1, 1, 1)
        return table

    @cached_property
    def path_corners(self) -> np.ndarray:
        """(T,4) vertex ids per tet in diagonal-path order (interpolation order)."""
        cells = self._cell_corner_ids()  # (C,3)
        table = self._path_corner_table()  # (6,4,3)
        coords = cells[:, None, None, :] + table[None, :, :, :]  # (C,6,4,3)
        n = self.resolution + 1
        ids = (coords[..., 0] * n + coords[..., 1]) * n + coords[..., 2]
        return ids.reshape(-1, 4)

    @cached_property
    def tets(self) -> np.ndarray:
        """(T,4) vertex ids, reordered so each tet has positive signed volume."""
        ids = self.path_corners.reshape(-1, 6, 4).copy()
        for k, perm in enumerate(PERMS):
            parity = _perm_parity(perm)
            if parity < 0:
                ids[:, k, [2, 3]] = ids[:, k, [3, 2]]
        return ids.reshape(-1, 4)

    @cached_property
    def edges(self) -> np.ndarray:
        """(E,2) deduplicated ascending vertex-id pairs over all tet edges."""
        t = self.tets
        pairs = np.concatenate(
            [t[:, [a, b]] for a, b in ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))]
        )
        pairs.sort(axis=1)
        return np.unique(pairs, axis=0)

    @cached_property
    def grad_axes(self) -> np.ndarray:
        """(T,3) axis of each path-difference gradient component."""
        axes = np.array(PERMS, dtype=np.int64)  # (6,3)
        return np.tile(axes, (self.resolution**3, 1))

    # torch views, cached per grid so loss passes avoid re-conversion
    @cached_property
    def torch_path_corners(self) -> torch.Tensor:
        return torch.from_numpy(self.path_corners)

    @cached_property
    def torch_grad_axes(self) -> torch.Tensor:
        return torch.from_numpy(self.grad_axes)

    @cached_property
    def torch_edges(self) -> torch.Tensor:
        return torch.from_numpy(self.edges)

    @cached_property
    def incident_tet_count(self) -> torch.Tensor:
        """(V,) number of tets touching each vertex."""
        counts = np.bincount(self.path_corners.reshape(-1), minlength=self.n_vertices)
        return torch.from_numpy(counts)


def _perm_parity(perm) -> int:
    inversions = sum(
        1 for i in range(3) for j in range(i + 1, 3) if perm[i] > perm[j]
    )
    return -1 if inversions % 2 else 1


def build_grid(resolution: int) -> TetGrid:
    return TetGrid(resolution)


@dataclass
class SdfField:
    grid: TetGrid
    values: torch.Tensor  # (V,) float32 or float64

    def __post_init__(self):
        if self.values.shape != (self.grid.n_vertices,):
            raise ContractError(
                f"values shape {tuple(self.values.shape)} does not match "
                f"{self.grid.n_vertices} grid vertices"
            )

    @property
    def dtype(self) -> torch.dtype:
        return self.values.dtype

    def replace_values(self, values: torch.Tensor) -> "SdfField":
        return SdfField(self.grid, guard_zeros(values))


@dataclass
class VertexNormals:
    vectors: torch.Tensor  # (V,3), unit rows except where degenerate
    degenerate: torch.Tensor  # (V,) bool


def guard_zeros(values: torch.Tensor) -> torch.Tensor:
    """Push stored values off exact zero so sign tests never see 0."""
    return torch.where(
        values.abs() < ZERO_GUARD,
        torch.full_like(values, ZERO_GUARD),
        values,
    )


def init_sphere(grid: TetGrid, radius: float, dtype: torch.dtype = torch.float32) -> SdfField:
    """Signed distance to the sphere of the given radius, sampled at vertices."""
    if not (0.0 < radius < 1.0):
        raise ConfigurationError(f"sphere radius must be in (0,1), got {radius}")
    pos = torch.from_numpy(grid.vertices).to(dtype)
    values = pos.norm(dim=1) - radius
    return SdfField(grid, guard_zeros(values))


def field_from_function(grid: TetGrid, fn, dtype: torch.dtype = torch.float64) -> SdfField:
    """Sample an arbitrary callable fn((V,3) ndarray) -> (V,) at the vertices."""
    values = np.asarray(fn(grid.vertices), dtype=np.float64)
    return SdfField(grid, guard_zeros(torch.from_numpy(values).to(dtype)))


def interpolate(field: SdfField, points: torch.Tensor):
    """Barycentric value, constant per-tet gradient, and tet index per point.

    points: (N,3) inside [-1,1]^3 (callers clamp). Differentiable with
    respect to field.values; the simplex assignment itself is treated as
    constant data.
    """
    grid = field.grid
    r = grid.resolution
    u_all = (points + 1.0) * (r / 2.0)
    cell = u_all.floor().long().clamp_(0, r - 1)
    u = u_all - cell.to(u_all.dtype)

    # descending local coordinates; stable sort breaks ties by lower axis
    perm = torch.argsort(-u, dim=1, stable=True)
    u_sorted = torch.gather(u, 1, perm)

    n = r + 1
    c0 = cell
    c1 = c0 + torch.nn.functional.one_hot(perm[:, 0], 3)
    c2 = c1 + torch.nn.functional.one_hot(perm[:, 1], 3)
    c3 = cell + 1
    corners = torch.stack([c0, c1, c2, c3], dim=1)  # (N,4,3)
    ids = (corners[..., 0] * n + corners[..., 1]) * n + corners[..., 2]
    fvals = field.values[ids]  # (N,4)

    lam = torch.stack(
        [
            1.0 - u_sorted[:, 0],
            u_sorted[:, 0] - u_sorted[:, 1],
            u_sorted[:, 1] - u_sorted[:, 2],
            u_sorted[:, 2],
        ],
        dim=1,
    )
    value = (lam * fvals).sum(dim=1)

    comps = (fvals[:, 1:] - fvals[:, :-1]) / grid.cell_size
    grad = torch.zeros_like(points).scatter(1, perm, comps)

    p0, p1 = perm[:, 0], perm[:, 1]
    rank = 2 * p0 + torch.where(p1 > p0, p1 - 1, p1)
    cell_flat = (cell[:, 0] * r + cell[:, 1]) * r + cell[:, 2]
    tet_index = cell_flat * 6 + rank
    return value, grad, tet_index


def sdf_at(field: SdfField, point):
    """Single-point query: (value, gradient, tet_index)."""
    p = np.asarray(point, dtype=np.float64)
    if p.shape != (3,):
        raise ContractError(f"expected a 3D point, got shape {p.shape}")
    if np.any(np.abs(p) > 1.0):
        raise DomainError(f"point {p.tolist()} outside [-1,1]^3")
    pt = torch.from_numpy(p).to(field.dtype).unsqueeze(0)
    with torch.no_grad():
        value, grad, tet = interpolate(field, pt)
    return float(value[0]), grad[0].double().numpy(), int(tet[0])


def tet_gradients(field: SdfField) -> torch.Tensor:
    """(T,3) constant SDF gradient of every tet, in scene units."""
    grid = field.grid
    fvals = field.values[grid.torch_path_corners]  # (T,4)
    comps = (fvals[:, 1:] - fvals[:, :-1]) / grid.cell_size
    grad = torch.zeros(
        grid.n_tets, 3, dtype=field.values.dtype, device=field.values.device
    )
    return grad.scatter(1, grid.torch_grad_axes, comps)


def eikonal_loss(field: SdfField) -> torch.Tensor:
    """Sum over tets of (||grad f|| - 1)^2."""
    g = tet_gradients(field)
    norm = g.pow(2).sum(dim=1).clamp_min(1e-24).sqrt()
    return (norm - 1.0).pow(2).sum()


def vertex_normals(field: SdfField) -> VertexNormals:
    """Volume-weighted average of incident tet gradients, normalized.

    All tets share the same volume, so the weighting reduces to a plain
    sum before normalization. Vertices whose averaged gradient is below
    DEGENERATE_NORMAL_EPS are flagged and zeroed.
    """
    grid = field.grid
    g = tet_gradients(field)
    acc = torch.zeros(
        grid.n_vertices, 3, dtype=field.values.dtype, device=field.values.device
    )
    idx = grid.torch_path_corners.reshape(-1)
    acc = acc.index_add(0, idx, g.repeat_interleave(4, dim=0))
    counts = grid.incident_tet_count.to(acc.dtype).clamp_min(1.0)
    mean_norm = acc.norm(dim=1) / counts
    degenerate = mean_norm < DEGENERATE_NORMAL_EPS
    unit = acc / acc.norm(dim=1, keepdim=True).clamp_min(1e-20)
    vectors = torch.where(degenerate.unsqueeze(1), torch.zeros_like(unit), unit)
    return VertexNormals(vectors=vectors, degenerate=degenerate)


def edge_disagreement(normals: VertexNormals, edges: torch.Tensor) -> torch.Tensor:
    """Per-edge 1 - cos(n_a, n_b); edges with a degenerate endpoint give 0."""
    a, b = edges[:, 0], edges[:, 1]
    cos = (normals.vectors[a] * normals.vectors[b]).sum(dim=1)
    ok = ~(normals.degenerate[a] | normals.degenerate[b])
    return torch.where(ok, 1.0 - cos, torch.zeros_like(cos))


def normal_consistency_loss(field: SdfField) -> torch.Tensor:
    """Sum of edge disagreements over the near-surface band.

    Only edges whose endpoints both satisfy |f| <= 2*cell_size count;
    far-field normals carry no information about the surface.
    """
    grid = field.grid
    edges = grid.torch_edges
    with torch.no_grad():
        band = field.values.abs() <= 2.0 * grid.cell_size
        active = band[edges[:, 0]] & band[edges[:, 1]]
    if not bool(active.any()):
        return field.values.sum() * 0.0
    normals = vertex_normals(field)
    per_edge = edge_disagreement(normals, edges[active])
    return per_edge.sum()
