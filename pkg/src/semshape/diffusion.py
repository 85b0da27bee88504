"""DDPM schedule, forward noising, CFG combination, and prior handles.

The engine talks to any noise predictor through PriorRequest /
PriorResponse. Request tensors are always float32 (that is also the
wire representation), regardless of the engine's compute dtype. Two
in-process priors live here: an analytic oracle built from reference
renders (closed-loop testing) and an echo prior (boundary testing).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import torch

from .errors import ConfigurationError, ContractError, PriorError
from .renderer import Camera, RenderConfig, nd_pack, render
from .tet_field import SdfField

PRIOR_KINDS = ("nd", "rgbd", "normal2d")
MAX_VIEWS = 8


@dataclass(frozen=True)
class NoiseSchedule:
    betas: torch.Tensor  # (T,) float64, strictly increasing in (0,1)
    alpha_bars: torch.Tensor  # (T,) float64, strictly decreasing in (0,1)

    @property
    def steps(self) -> int:
        return self.betas.shape[0]

    def alpha_bar(self, t: int) -> float:
        """Cumulative alpha for 1-based timestep t."""
        if not (1 <= t <= self.steps):
            raise ContractError(f"timestep {t} outside [1, {self.steps}]")
        return float(self.alpha_bars[t - 1])

    def omega(self, t: int) -> float:
        """Loss weight 1 - alpha_bar(t); damps low-noise steps."""
        return 1.0 - self.alpha_bar(t)


def make_schedule(steps: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if steps < 2:
        raise ConfigurationError(f"schedule needs at least 2 steps, got {steps}")
    if not (0.0 < beta_min < beta_max < 1.0):
        raise ConfigurationError(
            f"need 0 < beta_min < beta_max < 1, got ({beta_min}, {beta_max})"
        )
    betas = torch.linspace(beta_min, beta_max, steps, dtype=torch.float64)
    alpha_bars = torch.cumprod(1.0 - betas, dim=0)
    return NoiseSchedule(betas=betas, alpha_bars=alpha_bars)


def add_noise(g0: torch.Tensor, t: int, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Forward process: sqrt(ab)*g0 + sqrt(1-ab)*eps."""
    if g0.shape != eps.shape:
        raise ContractError(f"shape mismatch {tuple(g0.shape)} vs {tuple(eps.shape)}")
    ab = schedule.alpha_bar(t)
    return math.sqrt(ab) * g0 + math.sqrt(1.0 - ab) * eps.to(g0.dtype)


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, scale: float) -> torch.Tensor:
    """Classifier-free guidance: s*cond + (1-s)*uncond."""
    if eps_cond.shape != eps_uncond.shape:
        raise ContractError(
            f"shape mismatch {tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}"
        )
    return scale * eps_cond + (1.0 - scale) * eps_uncond


def duplicate_views(nd: torch.Tensor, n_views: int) -> torch.Tensor:
    """Stack n identical copies of a noise-free map; noise is added per slot."""
    if n_views < 1:
        raise ContractError("need at least one view")
    return nd.unsqueeze(0).expand(n_views, *nd.shape).clone()


@dataclass
class PriorRequest:
    kind: str  # nd | rgbd | normal2d
    timestep: int
    prompt: Optional[str]  # None for unconditional
    unconditional: bool
    views: List[Tuple[float, float]]  # (azimuth, elevation) degrees
    focus_index: int
    tensors: torch.Tensor  # (V,H,W,C) float32

    def __post_init__(self):
        if self.kind not in PRIOR_KINDS:
            raise ContractError(f"unknown prior kind {self.kind!r}")
        if not (1 <= len(self.views) <= MAX_VIEWS):
            raise ContractError(f"view count {len(self.views)} outside [1, {MAX_VIEWS}]")
        if not (0 <= self.focus_index < len(self.views)):
            raise ContractError("focus_index outside the view set")
        expect_c = 3 if self.kind == "normal2d" else 4
        if self.tensors.ndim != 4 or self.tensors.shape[0] != len(self.views):
            raise ContractError(f"tensors must be (V,H,W,C), got {tuple(self.tensors.shape)}")
        if self.tensors.shape[-1] != expect_c:
            raise ContractError(
                f"{self.kind} maps carry {expect_c} channels, got {self.tensors.shape[-1]}"
            )
        if self.tensors.dtype != torch.float32:
            raise ContractError("request tensors must be float32")
        if self.unconditional and self.prompt is not None:
            raise ContractError("unconditional requests must not carry a prompt")


@dataclass
class PriorResponse:
    tensors: torch.Tensor  # (V,H,W,C) float32

    def __post_init__(self):
        if not torch.isfinite(self.tensors).all():
            raise PriorError("prior returned non-finite values")


@dataclass(frozen=True)
class OracleReference:
    field: SdfField
    color: Tuple[float, float, float] = (0.5, 0.5, 0.5)


class OraclePrior:
    """Analytic stand-in: predicts the noise that would reproduce a
    reference render, making the conditional pull point exactly from the
    current map toward the reference.

    Unconditional requests return the true injected noise, which the
    engine supplies alongside the request in closed-loop mode; CFG then
    scales only the conditional pull.
    """

    identity = "oracle"
    kinds = PRIOR_KINDS

    def __init__(
        self,
        references: Dict[str, OracleReference],
        schedule: NoiseSchedule,
        radius: float,
        fov_y: float,
        config: RenderConfig,
    ):
        self.references = dict(references)
        self.schedule = schedule
        self.radius = radius
        self.fov_y = fov_y
        self.config = config
        self._cache: Dict[tuple, torch.Tensor] = {}

    def reference_map(
        self,
        prompt: str,
        kind: str,
        view,
        height: int,
        width: int,
        config: Optional[RenderConfig] = None,
    ) -> torch.Tensor:
        """Noise-free reference map (H,W,C) float32, cached by quantized view.

        References render under the caller's active config so the closed
        loop has an exact fixed point: when the engine's field equals the
        reference, both sides produce the same map at any stage sharpness.
        """
        if prompt not in self.references:
            raise PriorError(f"oracle has no reference for prompt {prompt!r}")
        config = config or self.config
        az = round(float(view[0]) % 360.0 * 2.0) / 2.0
        el = round(float(view[1]) * 2.0) / 2.0
        key = (prompt, kind, az, el, height, width, config.tau, config.step_size)
        if key not in self._cache:
            ref = self.references[prompt]
            cam = Camera(az, el, self.radius, self.fov_y, width, height)
            gb = render(ref.field, None, cam, config)
            if kind == "nd":
                out = nd_pack(gb)
            elif kind == "normal2d":
                out = gb.normal
            else:  # rgbd: constant albedo collapses to c*A + (1-A)
                c = torch.tensor(ref.color, dtype=gb.alpha.dtype)
                rgb = gb.alpha.unsqueeze(-1) * c + (1.0 - gb.alpha.unsqueeze(-1))
                out = torch.cat([rgb, gb.depth.unsqueeze(-1)], dim=-1)
            self._cache[key] = out.to(torch.float32)
        return self._cache[key]

    def predict(
        self,
        request: PriorRequest,
        true_eps: Optional[torch.Tensor] = None,
        render_config: Optional[RenderConfig] = None,
    ) -> PriorResponse:
        if request.unconditional:
            if true_eps is None:
                raise PriorError("oracle unconditional branch needs the closed-loop noise")
            return PriorResponse(true_eps.clone())
        h, w = request.tensors.shape[1:3]
        refs = torch.stack(
            [
                self.reference_map(request.prompt, request.kind, v, h, w, render_config)
                for v in request.views
            ]
        )
        ab = self.schedule.alpha_bar(request.timestep)
        eps_hat = (request.tensors - math.sqrt(ab) * refs) / math.sqrt(1.0 - ab)
        return PriorResponse(eps_hat)


def oracle_predict(
    oracle: OraclePrior,
    request: PriorRequest,
    schedule: NoiseSchedule,
    true_eps: Optional[torch.Tensor] = None,
    render_config: Optional[RenderConfig] = None,
) -> PriorResponse:
    if schedule is not oracle.schedule and schedule.steps != oracle.schedule.steps:
        raise ContractError("oracle was built against a different schedule")
    return oracle.predict(request, true_eps=true_eps, render_config=render_config)


class EchoPrior:
    """Returns the request tensors untouched; proves a boundary is inert."""

    identity = "echo"
    kinds = PRIOR_KINDS

    def predict(
        self,
        request: PriorRequest,
        true_eps: Optional[torch.Tensor] = None,
        render_config: Optional[RenderConfig] = None,
    ) -> PriorResponse:
        return PriorResponse(request.tensors.clone())
