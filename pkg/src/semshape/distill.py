"""Score distillation on rendered geometry maps, staged training, checkpoints.

One step follows the geometry-aware distillation recipe: sample a
camera near the observation views, render the noise-free map from it,
duplicate that map across the surrounding view set with fresh noise per
slot, ask the prior for conditional and unconditional noise, combine
them with the view-adaptive scale, and push the focus-slot residual
back through the renderer. Geometry stages add the eikonal and
normal-consistency regularizers; the appearance stage freezes the SDF
and drives albedo features with RGBD maps instead.
"""

from __future__ import annotations

import hashlib
import math
import struct
from collections import deque
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
import torch

from .appearance import AppearanceField
from .diffusion import NoiseSchedule, PriorRequest, add_noise, cfg_combine, duplicate_views
from .errors import (
    ConfigurationError,
    ContractError,
    DivergenceError,
    OutputError,
    PriorError,
)
from .guidance import ObservationSet, sample_camera
from .renderer import Camera, RenderConfig, nd_pack, render, rgbd_pack
from .tet_field import (
    SdfField,
    build_grid,
    eikonal_loss,
    guard_zeros,
    normal_consistency_loss,
)

STAGE_NAMES = ("coarse", "refine", "appearance")
ADAM_BETAS = (0.9, 0.99)
ADAM_EPS = 1e-8

REJECT_WINDOW = 500
REJECT_LIMIT = 0.10

CHECKPOINT_MAGIC = b"TFCK"
CHECKPOINT_VERSION = 1


@dataclass
class StageConfig:
    name: str
    iterations: int
    t_lo: float
    t_hi: float
    lr: float
    lambda_lgad: float = 1.0
    lambda_sds: float = 0.0
    lambda_eik: float = 0.1
    lambda_nc: float = 0.05
    tau_scale: float = 1.0

    def __post_init__(self):
        if self.name not in STAGE_NAMES:
            raise ConfigurationError(f"unknown stage name {self.name!r}")
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")
        if not (0.0 <= self.t_lo < self.t_hi <= 1.0):
            raise ConfigurationError(
                f"need 0 <= t_lo < t_hi <= 1, got ({self.t_lo}, {self.t_hi})"
            )
        if self.lr <= 0.0:
            raise ConfigurationError("learning rate must be positive")
        for w in (self.lambda_lgad, self.lambda_sds, self.lambda_eik, self.lambda_nc):
            if w < 0.0:
                raise ConfigurationError("loss weights must be >= 0")

    def timestep_bounds(self, steps: int) -> Tuple[int, int]:
        lo = max(1, int(math.ceil(self.t_lo * steps)))
        hi = min(steps, int(math.floor(self.t_hi * steps)))
        return lo, max(lo, hi)


def default_stages() -> Tuple[StageConfig, StageConfig, StageConfig]:
    coarse = StageConfig("coarse", 1000, 0.02, 0.98, 1e-2)
    refine = StageConfig("refine", 2000, 0.02, 0.50, 5e-3, tau_scale=0.5)
    appearance = StageConfig(
        "appearance", 2000, 0.02, 0.75, 1e-2, lambda_eik=0.0, lambda_nc=0.0, tau_scale=0.5
    )
    return coarse, refine, appearance


@dataclass
class RenderSetup:
    """Camera intrinsics plus marcher settings shared by all stages."""

    radius: float
    fov_y: float
    width: int
    height: int
    config: RenderConfig
    view_set_size: int = 4

    def __post_init__(self):
        if not (1 <= self.view_set_size <= 8):
            raise ConfigurationError("view_set_size outside [1, 8]")


@dataclass
class AdamSlot:
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0

    @staticmethod
    def like(params: torch.Tensor) -> "AdamSlot":
        return AdamSlot(torch.zeros_like(params), torch.zeros_like(params))


def optimizer_update(
    params: torch.Tensor,
    grads: torch.Tensor,
    slot: AdamSlot,
    lr: float,
) -> torch.Tensor:
    """Adam with bias correction, betas (0.9, 0.99); mutates slot, returns
    the updated parameters."""
    if params.shape != grads.shape:
        raise ContractError("gradient shape does not match parameters")
    if not bool(torch.isfinite(grads).all()):
        raise ContractError("non-finite gradient")
    b1, b2 = ADAM_BETAS
    slot.step += 1
    slot.m.mul_(b1).add_(grads, alpha=1.0 - b1)
    slot.v.mul_(b2).addcmul_(grads, grads, value=1.0 - b2)
    m_hat = slot.m / (1.0 - b1**slot.step)
    v_hat = slot.v / (1.0 - b2**slot.step)
    return params - lr * m_hat / (v_hat.sqrt() + ADAM_EPS)


@dataclass
class TrainState:
    field: SdfField
    appearance: Optional[AppearanceField]
    sdf_slot: AdamSlot
    app_slot: Optional[AdamSlot]
    generator: torch.Generator
    prior: object
    iteration: int = 0
    rejected_total: int = 0

    @staticmethod
    def fresh(field: SdfField, prior, seed: int = 0) -> "TrainState":
        gen = torch.Generator()
        gen.manual_seed(seed)
        return TrainState(
            field=field,
            appearance=None,
            sdf_slot=AdamSlot.like(field.values),
            app_slot=None,
            generator=gen,
            prior=prior,
            iteration=0,
        )

    def attach_appearance(self, appearance: AppearanceField) -> None:
        self.appearance = appearance
        self.app_slot = AdamSlot.like(appearance.features)


@dataclass
class StepDiagnostics:
    iteration: int
    stage: str
    scale: float
    timestep: int
    residual_norm: float
    grad_norm: float
    loss_eik: float
    loss_nc: float
    sds_residual_norm: float
    rejected: bool
    prompt: str
    azimuth: float
    elevation: float


def surround_views(camera: Camera, n_views: int) -> List[Tuple[float, float]]:
    """Focus view first, then equally spaced azimuths at the same elevation."""
    step = 360.0 / n_views
    return [(camera.azimuth + k * step, camera.elevation) for k in range(n_views)]


def _timestep(stage: StageConfig, schedule: NoiseSchedule, gen: torch.Generator) -> int:
    lo, hi = stage.timestep_bounds(schedule.steps)
    return int(torch.randint(lo, hi + 1, (1,), generator=gen).item())


def _prior_residual(
    prior,
    kind: str,
    g0: torch.Tensor,
    timestep: int,
    prompt: str,
    scale: float,
    views,
    schedule: NoiseSchedule,
    gen: torch.Generator,
    config: RenderConfig,
) -> torch.Tensor:
    """Residual (guided prediction - injected noise) for the focus slot.

    The injected noise is drawn in float32 — the prior interface's wire
    precision — so in-process and remote priors see identical bytes.
    """
    g0_32 = g0.detach().to(torch.float32)
    n_views = len(views)
    eps = torch.randn(
        (n_views,) + tuple(g0_32.shape), generator=gen, dtype=torch.float32
    )
    copies = duplicate_views(g0_32, n_views)
    noised = add_noise(copies, timestep, eps, schedule)
    cond = prior.predict(
        PriorRequest(kind, timestep, prompt, False, list(views), 0, noised),
        true_eps=eps,
        render_config=config,
    )
    uncond = prior.predict(
        PriorRequest(kind, timestep, None, True, list(views), 0, noised),
        true_eps=eps,
        render_config=config,
    )
    guided = cfg_combine(cond.tensors[0], uncond.tensors[0], scale)
    return (guided - eps[0]).to(g0.dtype)


def aux_sds_step(
    field: SdfField,
    appearance,
    camera: Camera,
    prompt: str,
    scale: float,
    schedule: NoiseSchedule,
    stage: StageConfig,
    config: RenderConfig,
    prior,
    gen: torch.Generator,
):
    """Plain score distillation on the rendered normal map via a 2D prior.

    Returns (gradient wrt the stage's parameters, residual norm). Skipped
    by callers when lambda_sds is zero.
    """
    if "normal2d" not in getattr(prior, "kinds", ()):
        raise PriorError("configured prior does not support normal2d requests")
    values = field.values.detach().clone().requires_grad_(True)
    f = SdfField(field.grid, values)
    gb = render(f, None, camera, config, track_grad=True)
    timestep = _timestep(stage, schedule, gen)
    residual = _prior_residual(
        prior,
        "normal2d",
        gb.normal,
        timestep,
        prompt,
        scale,
        [(camera.azimuth, camera.elevation)],
        schedule,
        gen,
        config,
    )
    weight = schedule.omega(timestep) * stage.lambda_sds
    proxy = (gb.normal * (weight * residual)).sum()
    (grad,) = torch.autograd.grad(proxy, values)
    return grad, float(residual.norm())


def compute_step(
    state: TrainState,
    obs: ObservationSet,
    schedule: NoiseSchedule,
    setup: RenderSetup,
    stage: StageConfig,
    scale_override: Optional[float] = None,
):
    """One full step's gradient and diagnostics without touching state
    parameters. Advances only the rng."""
    geometry = stage.name != "appearance"
    cfg = setup.config.scaled_tau(stage.tau_scale)
    camera, _, prompt, scale = sample_camera(
        obs, state.generator, setup.radius, setup.fov_y, setup.width, setup.height
    )
    if scale_override is not None:
        scale = float(scale_override)
    views = surround_views(camera, setup.view_set_size)
    timestep = _timestep(stage, schedule, state.generator)

    if geometry:
        params = state.field.values.detach().clone().requires_grad_(True)
        f = SdfField(state.field.grid, params)
        gb = render(f, None, camera, cfg, track_grad=True)
        target = nd_pack(gb)
        kind = "nd"
    else:
        if state.appearance is None:
            raise ContractError("appearance stage requires an attached appearance field")
        params = state.appearance.features.detach().clone().requires_grad_(True)
        app = state.appearance.replace_features(params)
        gb = render(state.field, app, camera, cfg, track_grad=True)
        target = rgbd_pack(gb)
        kind = "rgbd"

    residual = _prior_residual(
        state.prior, kind, target, timestep, prompt, scale, views, schedule, state.generator, cfg
    )
    omega = schedule.omega(timestep)
    proxy = (target * (omega * stage.lambda_lgad * residual)).sum()

    loss_eik = loss_nc = 0.0
    if geometry and (stage.lambda_eik > 0.0 or stage.lambda_nc > 0.0):
        eik = eikonal_loss(f)
        nc = normal_consistency_loss(f)
        proxy = proxy + stage.lambda_eik * eik + stage.lambda_nc * nc
        loss_eik, loss_nc = float(eik.detach()), float(nc.detach())

    (grad,) = torch.autograd.grad(proxy, params)

    sds_norm = 0.0
    if stage.lambda_sds > 0.0 and geometry:
        sds_grad, sds_norm = aux_sds_step(
            state.field,
            None,
            camera,
            prompt,
            scale,
            schedule,
            stage,
            cfg,
            state.prior,
            state.generator,
        )
        grad = grad + sds_grad

    diag = StepDiagnostics(
        iteration=state.iteration + 1,
        stage=stage.name,
        scale=scale,
        timestep=timestep,
        residual_norm=float(residual.norm()),
        grad_norm=float(grad.norm()),
        loss_eik=loss_eik,
        loss_nc=loss_nc,
        sds_residual_norm=sds_norm,
        rejected=False,
        prompt=prompt,
        azimuth=camera.azimuth,
        elevation=camera.elevation,
    )
    return grad, diag


def lgad_step(
    state: TrainState,
    obs: ObservationSet,
    schedule: NoiseSchedule,
    setup: RenderSetup,
    stage: StageConfig,
    scale_override: Optional[float] = None,
) -> StepDiagnostics:
    """One optimization iteration; prior failures propagate as retriable
    PriorError, rejected steps advance rng and counters but leave
    parameters and moments untouched."""
    grad, diag = compute_step(state, obs, schedule, setup, stage, scale_override)
    state.iteration += 1
    if not bool(torch.isfinite(grad).all()):
        diag.rejected = True
        state.rejected_total += 1
        return diag

    if stage.name != "appearance":
        updated = optimizer_update(state.field.values, grad, state.sdf_slot, stage.lr)
        state.field = SdfField(state.field.grid, guard_zeros(updated.detach()))
    else:
        updated = optimizer_update(state.appearance.features, grad, state.app_slot, stage.lr)
        state.appearance = state.appearance.replace_features(updated.detach())
    return diag


def _run_stage(
    state: TrainState,
    obs: ObservationSet,
    schedule: NoiseSchedule,
    setup: RenderSetup,
    stage: StageConfig,
    log: Optional[Callable[[StepDiagnostics], None]],
) -> None:
    window: deque = deque(maxlen=REJECT_WINDOW)
    for _ in range(stage.iterations):
        diag = lgad_step(state, obs, schedule, setup, stage)
        window.append(diag.rejected)
        if len(window) == REJECT_WINDOW and sum(window) > REJECT_LIMIT * REJECT_WINDOW:
            raise DivergenceError(
                f"{sum(window)} of the last {REJECT_WINDOW} steps rejected "
                f"during stage {stage.name!r}"
            )
        if log is not None and diag.iteration % 100 == 0:
            log(diag)


def run_geometry_stage(
    state: TrainState,
    obs: ObservationSet,
    schedule: NoiseSchedule,
    coarse: StageConfig,
    refine: StageConfig,
    setup: RenderSetup,
    log: Optional[Callable[[StepDiagnostics], None]] = None,
) -> TrainState:
    """Coarse structure formation, then refinement with a lowered timestep
    range and a sharper opacity profile."""
    for stage in (coarse, refine):
        _run_stage(state, obs, schedule, setup, stage, log)
    return state


def run_appearance_stage(
    state: TrainState,
    obs: ObservationSet,
    schedule: NoiseSchedule,
    stage: StageConfig,
    setup: RenderSetup,
    log: Optional[Callable[[StepDiagnostics], None]] = None,
) -> TrainState:
    if state.appearance is None:
        raise ContractError("attach an appearance field before the appearance stage")
    _run_stage(state, obs, schedule, setup, stage, log)
    return state


def params_checksum(state: TrainState) -> str:
    """SHA-256 over the raw parameter bytes; rejected steps must not move it."""
    h = hashlib.sha256()
    h.update(state.field.values.detach().numpy().tobytes())
    if state.appearance is not None:
        h.update(state.appearance.features.detach().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(state: TrainState, path) -> None:
    """Versioned binary blob: magic, resolutions, iteration, float32 LE
    parameter arrays, rng state."""
    sdf = state.field.values.detach().to(torch.float32).numpy().astype("<f4")
    app_res = 0 if state.appearance is None else state.appearance.resolution
    app = (
        b""
        if state.appearance is None
        else state.appearance.features.detach().to(torch.float32).numpy().astype("<f4").tobytes()
    )
    n_app = 0 if state.appearance is None else state.appearance.features.shape[0] * 8
    rng = state.generator.get_state().numpy().tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<IIIQ", CHECKPOINT_VERSION, state.field.grid.resolution, app_res, state.iteration))
            fh.write(struct.pack("<Q", sdf.size))
            fh.write(sdf.tobytes())
            fh.write(struct.pack("<Q", n_app))
            fh.write(app)
            fh.write(struct.pack("<Q", len(rng)))
            fh.write(rng)
    except OSError as exc:
        raise OutputError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path, dtype: torch.dtype = torch.float32, prior=None) -> TrainState:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise OutputError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ConfigurationError("bad checkpoint magic")
    off = 4
    version, grid_res, app_res, iteration = struct.unpack_from("<IIIQ", blob, off)
    off += struct.calcsize("<IIIQ")
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {version}")
    (n_sdf,) = struct.unpack_from("<Q", blob, off)
    off += 8
    sdf = np.frombuffer(blob, dtype="<f4", count=n_sdf, offset=off).copy()
    off += 4 * n_sdf
    (n_app,) = struct.unpack_from("<Q", blob, off)
    off += 8
    app = np.frombuffer(blob, dtype="<f4", count=n_app, offset=off).copy()
    off += 4 * n_app
    (rng_len,) = struct.unpack_from("<Q", blob, off)
    off += 8
    rng = blob[off : off + rng_len]
    if len(rng) != rng_len:
        raise ConfigurationError("truncated checkpoint")

    grid = build_grid(grid_res)
    if n_sdf != grid.n_vertices:
        raise ConfigurationError("checkpoint SDF array does not match its grid resolution")
    field = SdfField(grid, guard_zeros(torch.from_numpy(sdf).to(dtype)))
    gen = torch.Generator()
    gen.set_state(torch.frombuffer(bytearray(rng), dtype=torch.uint8).clone())
    state = TrainState(
        field=field,
        appearance=None,
        sdf_slot=AdamSlot.like(field.values),
        app_slot=None,
        generator=gen,
        prior=prior,
        iteration=iteration,
    )
    if app_res:
        expect = ((app_res + 1) ** 3) * 8
        if n_app != expect:
            raise ConfigurationError("checkpoint appearance array does not match its resolution")
        feats = torch.from_numpy(app).to(dtype).reshape(-1, 8)
        state.attach_appearance(AppearanceField(app_res, feats))
    return state
