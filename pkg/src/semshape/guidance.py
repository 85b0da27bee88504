"""Observation views, influence weights, and the view-adaptive scale.

Every camera direction c scores each observation view v_i with
w_i = 1 / max(1 - c.v_i, 1e-6); the guidance scale
s = s0 * (w'_0 - w'_1) / sum w' then peaks at the views and vanishes on
the bisector between the two nearest ones, so semantic supervision
hands over smoothly instead of fighting at the boundary. The camera
always receives the single nearest prompt: blending prompt embeddings
by weight was evaluated and rejected (it washes out the per-view
geometry), so no interpolation path exists here on purpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
import torch

from .errors import ConfigurationError
from .renderer import Camera

WEIGHT_CLAMP = 1e-6
AZIMUTH_JITTER = 50.0  # degrees around each observation view
ELEVATION_JITTER = 25.0

MAX_OBSERVATIONS = 8


def view_direction(azimuth_deg: float, elevation_deg: float) -> np.ndarray:
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    return np.array(
        [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
    )


@dataclass(frozen=True)
class Observation:
    prompt: str
    azimuth: float
    elevation: float
    direction: np.ndarray  # unit vector; matches the camera convention


@dataclass(frozen=True)
class ObservationSet:
    entries: Tuple[Observation, ...]
    s0: float

    @property
    def directions(self) -> np.ndarray:
        return np.stack([e.direction for e in self.entries])

    def __len__(self) -> int:
        return len(self.entries)


def observation_set(semantics: Sequence[Tuple[str, float, float]], s0: float) -> ObservationSet:
    """semantics: (prompt, azimuth_deg, elevation_deg) per entry."""
    if not (1 <= len(semantics) <= MAX_OBSERVATIONS):
        raise ConfigurationError(
            f"observation count {len(semantics)} outside [1, {MAX_OBSERVATIONS}]"
        )
    if s0 <= 0.0:
        raise ConfigurationError(f"s0 must be positive, got {s0}")
    entries = []
    for prompt, az, el in semantics:
        if not str(prompt).strip():
            raise ConfigurationError("empty semantic prompt")
        entries.append(Observation(str(prompt), float(az), float(el), view_direction(az, el)))
    return ObservationSet(entries=tuple(entries), s0=float(s0))


@dataclass(frozen=True)
class InfluenceWeights:
    raw: np.ndarray  # per observation, in input order
    order: np.ndarray  # indices sorting raw descending, ties by lower index
    sorted_desc: np.ndarray


def influence_weights(camera_dir: np.ndarray, obs: ObservationSet) -> InfluenceWeights:
    c = np.asarray(camera_dir, dtype=np.float64)
    dots = obs.directions @ c
    raw = 1.0 / np.maximum(1.0 - dots, WEIGHT_CLAMP)
    order = np.argsort(-raw, kind="stable")
    return InfluenceWeights(raw=raw, order=order, sorted_desc=raw[order])


def guidance_scale(weights: InfluenceWeights, s0: float) -> float:
    """View-adaptive CFG scale; a single observation keeps the base scale."""
    w = weights.sorted_desc
    if len(w) == 1:
        return float(s0)
    return float(s0 * (w[0] - w[1]) / w.sum())


def select_semantics(weights: InfluenceWeights, obs: ObservationSet) -> str:
    return obs.entries[int(weights.order[0])].prompt


def sample_camera(
    obs: ObservationSet,
    generator: torch.Generator,
    radius: float,
    fov_y: float,
    width: int,
    height: int,
):
    """One training camera near a uniformly chosen observation view.

    Azimuth offset is uniform in +-50 deg, elevation offset uniform in
    +-25 deg clamped to [-89, 89]. Returns (camera, weights, prompt,
    scale); drawing order is fixed for reproducibility.
    """
    i = int(torch.randint(len(obs), (1,), generator=generator).item())
    u = torch.rand(2, generator=generator, dtype=torch.float64)
    d_az = (2.0 * float(u[0]) - 1.0) * AZIMUTH_JITTER
    d_el = (2.0 * float(u[1]) - 1.0) * ELEVATION_JITTER
    base = obs.entries[i]
    az = base.azimuth + d_az
    el = min(max(base.elevation + d_el, -89.0), 89.0)
    camera = Camera(az, el, float(radius), float(fov_y), int(width), int(height))
    weights = influence_weights(view_direction(az, el), obs)
    return camera, weights, select_semantics(weights, obs), guidance_scale(weights, obs.s0)
