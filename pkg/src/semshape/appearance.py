"""Spatial material field: a dense trilinear feature lattice.

Eight raw channels per lattice vertex map through fixed activations to
albedo kd (3, logistic), roughness kr (1, logistic), metallic km
(1, logistic) and a tangent-space normal offset kn (3, tanh). Shading
is view-independent: under the fixed white environment the rendered
color collapses to kd, while kr/km/kn ride along for export.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigurationError, ContractError, DomainError

CHANNELS = 8  # kd rgb, kr, km, kn xyz


@dataclass
class AppearanceField:
    resolution: int
    features: torch.Tensor  # ((R+1)^3, 8) raw, pre-activation

    def __post_init__(self):
        expect = (self.resolution + 1) ** 3
        if self.features.shape != (expect, CHANNELS):
            raise ContractError(
                f"features shape {tuple(self.features.shape)} does not match "
                f"({expect}, {CHANNELS}) for resolution {self.resolution}"
            )

    def replace_features(self, features: torch.Tensor) -> "AppearanceField":
        return AppearanceField(self.resolution, features)


@dataclass
class MaterialSample:
    kd: torch.Tensor  # (...,3) in [0,1]
    kr: torch.Tensor  # (...,) in [0,1]
    km: torch.Tensor  # (...,) in [0,1]
    kn: torch.Tensor  # (...,3) in [-1,1]


def new_field(resolution: int, dtype: torch.dtype = torch.float32) -> AppearanceField:
    """Zero-initialized field: mid-gray albedo, neutral normal offset."""
    if not (1 <= resolution <= 512):
        raise ConfigurationError(f"appearance resolution {resolution} outside [1, 512]")
    n = (resolution + 1) ** 3
    return AppearanceField(resolution, torch.zeros(n, CHANNELS, dtype=dtype))


def _interp_raw(field: AppearanceField, points: torch.Tensor) -> torch.Tensor:
    r = field.resolution
    u_all = (points + 1.0) * (r / 2.0)
    cell = u_all.floor().long().clamp_(0, r - 1)
    frac = u_all - cell.to(u_all.dtype)

    n = r + 1
    out = torch.zeros(points.shape[0], CHANNELS, dtype=points.dtype)
    for dx in (0, 1):
        wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
        for dy in (0, 1):
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            for dz in (0, 1):
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                ids = ((cell[:, 0] + dx) * n + cell[:, 1] + dy) * n + cell[:, 2] + dz
                out = out + (wx * wy * wz).unsqueeze(1) * field.features[ids]
    return out


def material_at(field: AppearanceField, points) -> MaterialSample:
    """Trilinear interpolation of raw features, then the activations.

    Differentiable with respect to field.features; points must lie in
    [-1,1]^3.
    """
    pts = points if isinstance(points, torch.Tensor) else torch.as_tensor(points)
    single = pts.ndim == 1
    if single:
        pts = pts.unsqueeze(0)
    if pts.shape[-1] != 3:
        raise ContractError(f"expected (...,3) points, got {tuple(pts.shape)}")
    if bool((pts.abs() > 1.0 + 1e-12).any()):
        raise DomainError("appearance query outside [-1,1]^3")
    pts = pts.to(field.features.dtype)
    raw = _interp_raw(field, pts.reshape(-1, 3))
    sample = MaterialSample(
        kd=torch.sigmoid(raw[:, 0:3]),
        kr=torch.sigmoid(raw[:, 3]),
        km=torch.sigmoid(raw[:, 4]),
        kn=torch.tanh(raw[:, 5:8]),
    )
    if single:
        return MaterialSample(sample.kd[0], sample.kr[0], sample.km[0], sample.kn[0])
    return sample


def shade(sample: MaterialSample, normal) -> torch.Tensor:
    """View-independent shading: the white-environment Lambertian collapse.

    kr/km/kn deliberately do not influence the result; they exist for
    export. The normal argument is part of the shading contract but the
    collapsed model ignores it.
    """
    return sample.kd


def uniform_color_field(
    resolution: int, color, dtype: torch.dtype = torch.float32
) -> AppearanceField:
    """Constant-albedo field (used by oracle references)."""
    field = new_field(resolution, dtype)
    c = torch.as_tensor(color, dtype=dtype).clamp(1e-4, 1.0 - 1e-4)
    field.features[:, 0:3] = torch.log(c / (1.0 - c))
    return field
