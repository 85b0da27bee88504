"""Differentiable ray-marched rendering of the tetrahedral SDF.

Rays are stepped at a fixed spacing through the part of [near, far]
that intersects the domain cube. Per-sample opacity uses the logistic
CDF ratio

    alpha_j = clamp((sig(f_j/tau) - sig(f_{j+1}/tau)) / max(sig(f_j/tau), 1e-6), 0, 1)

so mass concentrates where the SDF crosses zero, and the usual
front-to-back weights w_j = alpha_j * prod_{k<j}(1 - alpha_k) composite
normals, depth and albedo. Everything is a torch expression of the
field values (and appearance features), so reverse mode through the
image is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .errors import ConfigurationError, ContractError
from .tet_field import SdfField, TetGrid, interpolate

BACKGROUND_ALPHA = 1e-4


@dataclass(frozen=True)
class Camera:
    azimuth: float  # degrees
    elevation: float  # degrees
    radius: float  # scene units, > sqrt(3)
    fov_y: float  # degrees
    width: int
    height: int

    def __post_init__(self):
        if self.radius <= math.sqrt(3.0):
            raise ConfigurationError(f"camera radius {self.radius} must exceed sqrt(3)")
        if not (-89.0 <= self.elevation <= 89.0):
            raise ConfigurationError(f"elevation {self.elevation} outside [-89, 89]")
        if not (1 <= self.width <= 4096 and 1 <= self.height <= 4096):
            raise ConfigurationError("image size must be within 1..4096 pixels")
        if not (0.0 < self.fov_y < 180.0):
            raise ConfigurationError(f"fov_y {self.fov_y} outside (0, 180)")


@dataclass(frozen=True)
class RenderConfig:
    step_size: float
    tau: float
    near: float
    far: float
    jitter: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.step_size <= 0.0:
            raise ConfigurationError("step_size must be positive")
        if self.tau <= 0.0:
            raise ConfigurationError("tau must be positive")
        if not (0.0 < self.near < self.far):
            raise ConfigurationError("need 0 < near < far")

    def scaled_tau(self, factor: float) -> "RenderConfig":
        return RenderConfig(
            self.step_size, self.tau * factor, self.near, self.far, self.jitter, self.seed
        )


@dataclass
class GBuffer:
    normal: torch.Tensor  # (H,W,3) camera-space, zero on background
    depth: torch.Tensor  # (H,W) normalized, zero on background
    alpha: torch.Tensor  # (H,W) in [0,1]
    rgb: Optional[torch.Tensor] = None  # (H,W,3), only with an appearance field

    def detached(self) -> "GBuffer":
        return GBuffer(
            self.normal.detach(),
            self.depth.detach(),
            self.alpha.detach(),
            None if self.rgb is None else self.rgb.detach(),
        )


def camera_from_angles(azimuth, elevation, radius, fov_y, width, height) -> Camera:
    return Camera(float(azimuth), float(elevation), float(radius), float(fov_y), int(width), int(height))


def auto_config(grid: TetGrid, camera: Camera, jitter: bool = False, seed: int = 0) -> RenderConfig:
    """Defaults tied to the grid: step = cell, tau = 2*cell, near/far = radius -/+ 1."""
    cell = grid.cell_size
    return RenderConfig(
        step_size=cell,
        tau=2.0 * cell,
        near=camera.radius - 1.0,
        far=camera.radius + 1.0,
        jitter=jitter,
        seed=seed,
    )


def camera_position(camera: Camera) -> np.ndarray:
    az = math.radians(camera.azimuth)
    el = math.radians(camera.elevation)
    return camera.radius * np.array(
        [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
    )


def camera_basis(camera: Camera):
    """(position, right, up, back) as float64 arrays; back = unit(position)."""
    pos = camera_position(camera)
    back = pos / np.linalg.norm(pos)
    world_up = np.array([0.0, 0.0, 1.0])
    up = world_up - np.dot(world_up, back) * back
    nrm = np.linalg.norm(up)
    if nrm < 1e-9:  # looking straight up/down is excluded by |el| <= 89
        raise ConfigurationError("degenerate camera orientation")
    up /= nrm
    right = np.cross(up, back)
    return pos, right, up, back


def _pixel_rays(camera: Camera, dtype: torch.dtype):
    """Unit ray directions (P,3) and the shared origin (3,)."""
    pos, right, up, back = camera_basis(camera)
    tan_y = math.tan(math.radians(camera.fov_y) / 2.0)
    tan_x = tan_y * camera.width / camera.height
    xs = (2.0 * (np.arange(camera.width) + 0.5) / camera.width - 1.0) * tan_x
    ys = (1.0 - 2.0 * (np.arange(camera.height) + 0.5) / camera.height) * tan_y
    px, py = np.meshgrid(xs, ys, indexing="xy")
    fwd = -back
    dirs = (
        fwd[None, None, :]
        + px[..., None] * right[None, None, :]
        + py[..., None] * up[None, None, :]
    )
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origin = torch.from_numpy(pos).to(dtype)
    return torch.from_numpy(dirs.reshape(-1, 3)).to(dtype), origin


def _clip_to_cube(origin: torch.Tensor, dirs: torch.Tensor, near: float, far: float):
    """Per-ray [t0, t1] of the segment inside the domain cube and [near, far]."""
    inv = 1.0 / torch.where(dirs.abs() < 1e-12, torch.full_like(dirs, 1e-12), dirs)
    ta = (-1.0 - origin) * inv
    tb = (1.0 - origin) * inv
    t0 = torch.minimum(ta, tb).amax(dim=1).clamp_min(near)
    t1 = torch.maximum(ta, tb).amin(dim=1).clamp_max(far)
    return t0, t1


def _march(field: SdfField, appearance, camera: Camera, config: RenderConfig):
    """Differentiable forward pass; returns flat per-pixel channels."""
    if config.step_size > field.grid.cell_size + 1e-12:
        raise ConfigurationError(
            f"step_size {config.step_size} exceeds cell size {field.grid.cell_size}"
        )
    if camera.radius <= math.sqrt(3.0) or config.near >= config.far:
        raise ConfigurationError("camera/config invariants violated")

    dtype = field.dtype
    dirs, origin = _pixel_rays(camera, dtype)
    n_pix = dirs.shape[0]
    t0, t1 = _clip_to_cube(origin, dirs, config.near, config.far)
    hit = t1 > t0
    span = torch.where(hit, t1 - t0, torch.zeros_like(t0))
    max_span = float(span.max()) if n_pix else 0.0
    n_seg = max(int(math.ceil(max_span / config.step_size)), 0)

    zeros = lambda *shape: torch.zeros(*shape, dtype=dtype)
    if n_seg == 0:
        alpha = zeros(n_pix)
        out_rgb = None if appearance is None else torch.ones(n_pix, 3, dtype=dtype)
        return zeros(n_pix, 3), zeros(n_pix), alpha, out_rgb

    j = torch.arange(n_seg + 1, dtype=dtype)
    if config.jitter:
        gen = torch.Generator().manual_seed(config.seed)
        shift = torch.rand(n_pix, 1, generator=gen, dtype=dtype) * config.step_size
    else:
        shift = torch.zeros(n_pix, 1, dtype=dtype)
    t = t0.unsqueeze(1) + shift + j.unsqueeze(0) * config.step_size  # (P, S+1)
    sample_ok = t <= t1.unsqueeze(1) + 1e-12
    seg_ok = sample_ok[:, 1:] & hit.unsqueeze(1)

    pts = origin.unsqueeze(0).unsqueeze(0) + dirs.unsqueeze(1) * t.unsqueeze(2)
    pts = pts.clamp(-1.0, 1.0)
    flat = pts.reshape(-1, 3)
    f, g, _ = interpolate(field, flat)
    f = f.reshape(n_pix, n_seg + 1)
    g = g.reshape(n_pix, n_seg + 1, 3)

    sig = torch.sigmoid(f / config.tau)
    alpha_seg = ((sig[:, :-1] - sig[:, 1:]) / sig[:, :-1].clamp_min(1e-6)).clamp(0.0, 1.0)
    alpha_seg = alpha_seg * seg_ok.to(dtype)
    trans = torch.cumprod(1.0 - alpha_seg, dim=1)
    trans = torch.cat([torch.ones(n_pix, 1, dtype=dtype), trans[:, :-1]], dim=1)
    w = alpha_seg * trans  # (P, S)

    acc = w.sum(dim=1)
    depth_raw = (w * t[:, :-1]).sum(dim=1) / acc.clamp_min(1e-6)
    depth = acc * (config.far - depth_raw) / (config.far - config.near)

    pos_np, right, up, back = camera_basis(camera)
    rot = torch.from_numpy(np.stack([right, up, back], axis=0)).to(dtype)  # rows
    n_world = (w.unsqueeze(2) * g[:, :-1, :]).sum(dim=1)
    n_world = n_world / n_world.norm(dim=1, keepdim=True).clamp_min(1e-12)
    n_cam = n_world @ rot.T
    n_cam = torch.where(n_cam[:, 2:3] < 0.0, -n_cam, n_cam)

    background = (acc < BACKGROUND_ALPHA).unsqueeze(1)
    n_cam = torch.where(background, torch.zeros_like(n_cam), n_cam)
    depth = torch.where(background.squeeze(1), torch.zeros_like(depth), depth)

    rgb = None
    if appearance is not None:
        from .appearance import material_at

        kd = material_at(appearance, flat).kd.reshape(n_pix, n_seg + 1, 3)
        rgb = (w.unsqueeze(2) * kd[:, :-1, :]).sum(dim=1) + (1.0 - acc).unsqueeze(1)
    return n_cam, depth, acc, rgb


def render(
    field: SdfField,
    appearance,
    camera: Camera,
    config: RenderConfig,
    track_grad: bool = False,
) -> GBuffer:
    """Render normal/depth/alpha (and rgb with an appearance field).

    With track_grad=True the returned tensors stay attached to the
    autograd graph of field.values / appearance.features.
    """
    if track_grad:
        n, d, a, rgb = _march(field, appearance, camera, config)
    else:
        with torch.no_grad():
            n, d, a, rgb = _march(field, appearance, camera, config)
    h, w = camera.height, camera.width
    return GBuffer(
        normal=n.reshape(h, w, 3),
        depth=d.reshape(h, w),
        alpha=a.reshape(h, w),
        rgb=None if rgb is None else rgb.reshape(h, w, 3),
    )


def render_backward(
    field: SdfField,
    appearance,
    camera: Camera,
    config: RenderConfig,
    gbuffer_grad: GBuffer,
):
    """Exact reverse-mode pullback of render.

    gbuffer_grad supplies cotangents for any subset of channels (None
    entries mean zero). Returns (d/d values, d/d features or None).
    """
    values = field.values.detach().clone().requires_grad_(True)
    f = SdfField(field.grid, values)
    feats = None
    app = None
    if appearance is not None:
        feats = appearance.features.detach().clone().requires_grad_(True)
        app = appearance.replace_features(feats)
    out = render(f, app, camera, config, track_grad=True)

    terms = []
    for got, cot in (
        (out.normal, gbuffer_grad.normal),
        (out.depth, gbuffer_grad.depth),
        (out.alpha, gbuffer_grad.alpha),
        (out.rgb, gbuffer_grad.rgb),
    ):
        if cot is None:
            continue
        if got is None or got.shape != cot.shape:
            raise ContractError("cotangent shape does not match the forward gbuffer")
        terms.append((got * cot.to(got.dtype)).sum())
    if not terms:
        zero_app = None if feats is None else torch.zeros_like(feats)
        return torch.zeros_like(values), zero_app

    total = torch.stack(terms).sum()
    inputs = [values] if feats is None else [values, feats]
    grads = torch.autograd.grad(total, inputs, allow_unused=True)
    vg = grads[0] if grads[0] is not None else torch.zeros_like(values)
    ag = None
    if feats is not None:
        ag = grads[1] if grads[1] is not None else torch.zeros_like(feats)
    return vg, ag


def nd_pack(gbuffer: GBuffer) -> torch.Tensor:
    """(H,W,4): camera-space normal then normalized depth."""
    return torch.cat([gbuffer.normal, gbuffer.depth.unsqueeze(-1)], dim=-1)


def nd_unpack(nd: torch.Tensor):
    if nd.ndim != 3 or nd.shape[-1] != 4:
        raise ContractError(f"expected (H,W,4) ND map, got {tuple(nd.shape)}")
    return nd[..., :3], nd[..., 3]


def rgbd_pack(gbuffer: GBuffer) -> torch.Tensor:
    """(H,W,4): rgb then normalized depth; needs an appearance render."""
    if gbuffer.rgb is None:
        raise ContractError("gbuffer has no rgb channel; render with an appearance field")
    return torch.cat([gbuffer.rgb, gbuffer.depth.unsqueeze(-1)], dim=-1)
