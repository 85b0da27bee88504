"""Command-line entry points: generate, extract, render, validate, probe-prior.

Exit codes: 0 success, 2 configuration error, 3 divergence, 4
prior/protocol error, 5 I/O error. TF_THREADS caps torch worker
threads; TF_FAULT enables fault-injection modes used by the validation
suite's own tests.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time
from collections import deque

import numpy as np
import torch

from . import __version__
from .appearance import new_field
from .diffusion import EchoPrior, OraclePrior, OracleReference, add_noise, make_schedule
from .distill import (
    StepDiagnostics,
    TrainState,
    load_checkpoint,
    run_appearance_stage,
    run_geometry_stage,
    save_checkpoint,
)
from .errors import ConfigurationError, SemshapeError
from .guidance import guidance_scale, influence_weights, observation_set, view_direction
from .images import write_normal_png, write_pfm, write_rgb_png
from .meshing import (
    CASE_TRIANGLE_COUNTS,
    bake_vertex_colors,
    extract_surface,
    marching_tetrahedra,
    mesh_stats,
    write_obj,
    write_ply,
)
from .references import build_reference_field, read_ply_mesh
from .renderer import GBuffer, auto_config, camera_from_angles, render, render_backward
from .scene import SceneSpec, dump_scene, parse_scene
from .tet_field import (
    SdfField,
    build_grid,
    eikonal_loss,
    field_from_function,
    guard_zeros,
    init_sphere,
    interpolate,
    normal_consistency_loss,
)


def _torch_dtype(spec: SceneSpec) -> torch.dtype:
    return torch.float64 if spec.dtype == "f64" else torch.float32


def _build_prior(spec: SceneSpec, schedule, grid, dtype):
    mode = spec.prior.mode
    if mode == "echo":
        return EchoPrior()
    if mode == "remote":
        from .wire import RemotePrior

        return RemotePrior(spec.prior.endpoint)
    refs = {}
    for ref in spec.prior.references:
        refs[ref.prompt] = OracleReference(
            field=build_reference_field(ref, grid, dtype), color=ref.color
        )
    missing = [s.prompt for s in spec.semantics if s.prompt not in refs]
    if missing:
        raise ConfigurationError(f"oracle mode lacks references for prompts: {missing}")
    setup = spec.render_setup()
    return OraclePrior(refs, schedule, setup.radius, setup.fov_y, setup.config)


def _diag_line(d: StepDiagnostics) -> str:
    return (
        f"iter={d.iteration} stage={d.stage} s={d.scale!r} t={d.timestep} "
        f"resid={d.residual_norm!r} grad={d.grad_norm!r} eik={d.loss_eik!r} "
        f"nc={d.loss_nc!r} sds={d.sds_residual_norm!r} rejected={int(d.rejected)}"
    )


def cmd_generate(args) -> int:
    spec = parse_scene(args.scene)
    for w in spec.warnings:
        print(f"warning: {w}", file=sys.stderr)
    os.makedirs(args.out, exist_ok=True)
    dtype = _torch_dtype(spec)
    grid = build_grid(spec.grid_resolution)
    field = init_sphere(grid, spec.init_radius, dtype)
    schedule = make_schedule(spec.schedule.steps, spec.schedule.beta_min, spec.schedule.beta_max)
    prior = _build_prior(spec, schedule, grid, dtype)
    obs = spec.observation_set()
    setup = spec.render_setup()
    state = TrainState.fresh(field, prior, spec.seed)

    tail: deque = deque(maxlen=5)
    log_path = os.path.join(args.out, "diagnostics.log")
    coarse, refine, appearance_stage = spec.stages
    try:
        with open(log_path, "w", encoding="utf-8") as log_fh:

            def log(d: StepDiagnostics) -> None:
                line = _diag_line(d)
                tail.append(line)
                log_fh.write(line + "\n")

            run_geometry_stage(state, obs, schedule, coarse, refine, setup, log)
            state.attach_appearance(new_field(spec.appearance_resolution, dtype))
            run_appearance_stage(state, obs, schedule, appearance_stage, setup, log)
    except SemshapeError:
        for line in tail:
            print(line, file=sys.stderr)
        raise
    save_checkpoint(state, os.path.join(args.out, "checkpoint.tfck"))
    with open(os.path.join(args.out, "scene.normalized"), "w", encoding="utf-8") as fh:
        fh.write(dump_scene(spec))
    print(f"generated {state.iteration} iterations -> {args.out}")
    return 0


def cmd_extract(args) -> int:
    state = load_checkpoint(args.checkpoint)
    mesh = marching_tetrahedra(state.field)
    if mesh.is_empty:
        print("warning: field has no zero crossing; writing an empty mesh", file=sys.stderr)
    if state.appearance is not None and not mesh.is_empty:
        mesh = bake_vertex_colors(mesh, state.appearance)
    write_ply(mesh, args.out)
    if args.obj:
        write_obj(mesh, args.obj)
    stats = mesh_stats(mesh, state.field)
    print(
        f"mesh: {stats.n_vertices} vertices, {stats.n_triangles} triangles, "
        f"watertight={stats.watertight}, euler={stats.euler_characteristic}"
    )
    return 0


def cmd_render(args) -> int:
    state = load_checkpoint(args.checkpoint)
    camera = camera_from_angles(
        args.azimuth, args.elevation, args.radius, args.fov_y, args.width, args.height
    )
    config = auto_config(state.field.grid, camera)
    gbuffer = render(state.field, state.appearance, camera, config)
    write_normal_png(gbuffer.normal.numpy(), args.out_prefix + "_normal.png")
    write_pfm(gbuffer.depth.to(torch.float32).numpy(), args.out_prefix + "_depth.pfm")
    if gbuffer.rgb is not None:
        write_rgb_png(gbuffer.rgb.numpy(), args.out_prefix + "_rgb.png")
    print(f"wrote {args.out_prefix}_{{normal.png,depth.pfm" + (",rgb.png}" if gbuffer.rgb is not None else "}"))
    return 0


def cmd_probe_prior(args) -> int:
    from .wire import probe

    identity, latency = probe(args.endpoint)
    print(f"bridge model: {identity} (echo round trip {latency * 1e3:.1f} ms)")
    return 0


# ---------------------------------------------------------------------------
# embedded validation suite


def _check_grid():
    g = build_grid(2)
    assert g.n_vertices == 27 and g.n_tets == 48
    v = g.vertices[g.tets]
    vol = np.linalg.det(v[:, 1:4] - v[:, 0:1]) / 6.0
    assert vol.min() > 0 and abs(vol.sum() - 8.0) < 1e-12
    faces = np.sort(
        np.concatenate([g.tets[:, c] for c in ([0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3])]),
        axis=1,
    )
    _, counts = np.unique(faces, axis=0, return_counts=True)
    assert set(counts.tolist()) <= {1, 2}
    return "counts, volumes, conforming faces"


def _check_linear():
    g = build_grid(4)
    n = np.array([0.4, -1.1, 0.7])
    fld = field_from_function(g, lambda p: p @ n - 0.0371)
    pts = torch.rand(200, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(1)) * 2 - 1
    val, grad, _ = interpolate(fld, pts)
    ref = torch.from_numpy(pts.numpy() @ n - 0.0371)
    assert (val - ref).abs().max() < 1e-12
    assert (grad - torch.from_numpy(n)).abs().max() < 1e-12
    return "affine fields reproduced to 1e-12"


def _check_regularizer_zeros():
    g = build_grid(8)
    offset = g.cell_size / 2.0  # exactly representable, off every lattice plane
    plane = field_from_function(g, lambda p: p[:, 2] - offset)
    assert float(eikonal_loss(plane)) <= 1e-20
    assert float(normal_consistency_loss(plane)) <= 1e-12
    doubled = field_from_function(g, lambda p: 2.0 * (p[:, 2] - offset))
    assert float(eikonal_loss(doubled)) == 6 * 8**3
    return "plane 0 / doubled plane exactly 6R^3"


def _check_regularizer_gradients():
    g = build_grid(8)
    f = init_sphere(g, 0.47, torch.float64)
    for loss_fn in (eikonal_loss, normal_consistency_loss):
        vals = f.values.clone().requires_grad_(True)
        loss_fn(SdfField(g, vals)).backward()
        for idx in (100, 311, 500):
            h = 1e-5
            vp, vm = f.values.clone(), f.values.clone()
            vp[idx] += h
            vm[idx] -= h
            fd = (float(loss_fn(SdfField(g, vp))) - float(loss_fn(SdfField(g, vm)))) / (2 * h)
            an = float(vals.grad[idx])
            assert abs(fd - an) <= 1e-6 * max(abs(fd), abs(an), 1e-3)
    return "eikonal + consistency match finite differences"


def _check_render_gradients():
    torch.manual_seed(5)
    g = build_grid(8)
    vals = guard_zeros(
        init_sphere(g, 0.47, torch.float64).values
        + 0.02 * torch.randn(g.n_vertices, dtype=torch.float64)
    )
    f = SdfField(g, vals)
    cam = camera_from_angles(15.0, 5.0, 2.5, 40.0, 16, 16)
    cfg = auto_config(g, cam)
    cot = GBuffer(
        normal=torch.randn(16, 16, 3, dtype=torch.float64),
        depth=torch.randn(16, 16, dtype=torch.float64),
        alpha=torch.randn(16, 16, dtype=torch.float64),
    )
    vg, _ = render_backward(f, None, cam, cfg, cot)

    def functional(values):
        gb = render(SdfField(g, values), None, cam, cfg)
        return float(
            (gb.normal * cot.normal).sum() + (gb.depth * cot.depth).sum() + (gb.alpha * cot.alpha).sum()
        )

    h = 1e-5
    for _ in range(10):
        d = torch.randn(g.n_vertices, dtype=torch.float64)
        d /= d.norm()
        fd = (functional(vals + h * d) - functional(vals - h * d)) / (2 * h)
        an = float((vg * d).sum())
        assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-9)
    return "reverse mode matches finite differences"


def _check_sphere_render():
    g = build_grid(64)
    f = init_sphere(g, 0.5, torch.float64)
    cam = camera_from_angles(0.0, 0.0, 2.5, 40.0, 64, 64)
    cfg = auto_config(g, cam)
    gb = render(f, None, cam, cfg)
    a = float(gb.alpha[32, 32])
    depth_raw = cfg.far - float(gb.depth[32, 32]) / a * (cfg.far - cfg.near)
    assert abs(depth_raw - 2.0) <= 2 * cfg.step_size
    assert a >= 0.99
    mask = gb.alpha > 0.5
    z = gb.normal[..., 2][mask]
    assert float(z.min()) > 0.0
    return "center depth and alpha on the analytic sphere"


def _check_guidance():
    obs = observation_set([("a", 0.0, 0.0), ("b", 90.0, 0.0)], 70.0)
    w = influence_weights(view_direction(30.0, 0.0), obs)
    assert abs(guidance_scale(w, 1.0) - 0.5773502691896257) < 1e-4
    w45 = influence_weights(view_direction(45.0, 0.0), obs)
    assert abs(guidance_scale(w45, 70.0)) < 1e-9
    w0 = influence_weights(view_direction(0.0, 0.0), obs)
    assert abs(guidance_scale(w0, 70.0) - 70.0) <= 1e-3 * 70.0
    return "scale 0.57735 at 30 deg, 0 on bisector, s0 at the view"


def _check_case_matrix():
    positions = np.array(
        [[0.0, 0.0, 0.0], [1.0, 0.1, 0.0], [0.3, 1.0, 0.0], [0.2, 0.3, 1.0]]
    )
    tets = np.array([[0, 1, 2, 3]])
    grads = np.zeros((1, 3))
    fault = os.environ.get("TF_FAULT") == "mt_case_flip"
    for pattern in range(16):
        values = np.where([(pattern >> k) & 1 for k in range(4)], -0.4, 0.7)
        mesh = extract_surface(values, positions, tets, grads, fault=fault)
        got = mesh.triangles.shape[0]
        assert got == CASE_TRIANGLE_COUNTS[pattern], (
            f"pattern {pattern}: {got} triangles, expected {CASE_TRIANGLE_COUNTS[pattern]}"
        )
    return "all 16 sign cases produce table counts"


def _check_sphere_extraction():
    g = build_grid(32)
    f = init_sphere(g, 0.6, torch.float64)
    mesh = marching_tetrahedra(f)
    stats = mesh_stats(mesh, f)
    assert stats.watertight and stats.euler_characteristic == 2
    dev = np.abs(np.linalg.norm(mesh.vertices, axis=1) - 0.6).max()
    assert dev <= 2 * math.sqrt(3) / 32
    return f"watertight, euler 2, deviation {dev:.2e}"


def _check_ddpm():
    sch = make_schedule()
    assert abs(sch.alpha_bar(1) - 0.9999) < 1e-12
    assert abs(sch.alpha_bar(1000) - 4.0358297653756754e-05) < 1e-18
    g0 = torch.full((5, 5), 0.3)
    eps = torch.randn(5, 5, generator=torch.Generator().manual_seed(0))
    t = 600
    gt = add_noise(g0, t, eps, sch)
    ab = sch.alpha_bar(t)
    rec = (gt - math.sqrt(1 - ab) * eps) / math.sqrt(ab)
    assert (rec - g0).abs().max() < 1e-6
    return "schedule constants and noising round trip"


def _check_ply_round_trip(tmp_path):
    from .meshing import Mesh

    mesh = Mesh(
        vertices=np.array([[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [0.0, 0.5, 0.0]]),
        triangles=np.array([[0, 1, 2]]),
        colors=np.array([[1.0, 0.0, 0.0]] * 3),
    )
    path = os.path.join(tmp_path, "probe.ply")
    write_ply(mesh, path)
    verts, faces = read_ply_mesh(path)
    assert verts.shape == (3, 3) and faces.shape == (1, 3)
    assert np.array_equal(verts.astype("<f4"), mesh.vertices.astype("<f4"))
    return "write then reparse is exact"


def cmd_validate(args) -> int:
    import tempfile

    checks = [
        ("grid_combinatorics", _check_grid),
        ("linear_reproduction", _check_linear),
        ("regularizer_zeros", _check_regularizer_zeros),
        ("regularizer_gradients", _check_regularizer_gradients),
        ("renderer_gradients", _check_render_gradients),
        ("sphere_render_oracle", _check_sphere_render),
        ("guidance_scale", _check_guidance),
        ("mt_case_matrix", _check_case_matrix),
        ("sphere_extraction", _check_sphere_extraction),
        ("ddpm_schedule", _check_ddpm),
    ]
    failures = 0
    start = time.monotonic()
    with tempfile.TemporaryDirectory() as tmp:
        checks.append(("ply_round_trip", lambda: _check_ply_round_trip(tmp)))
        for name, fn in checks:
            t0 = time.monotonic()
            try:
                detail = fn()
                status = "PASS"
            except AssertionError as exc:
                detail = str(exc) or "assertion failed"
                status = "FAIL"
                failures += 1
            print(f"{status}  {name:24s} {time.monotonic() - t0:6.2f}s  {detail}")
    print(f"{'FAIL' if failures else 'PASS'}  total {time.monotonic() - start:.1f}s, {failures} failure(s)")
    return 1 if failures else 0


def main(argv=None) -> int:
    threads = os.environ.get("TF_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"warning: ignoring bad TF_THREADS={threads!r}", file=sys.stderr)

    parser = argparse.ArgumentParser(prog="semshape", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="run geometry and appearance distillation")
    p.add_argument("scene", help="scene spec file")
    p.add_argument("out", help="output directory")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("extract", help="marching tetrahedra + color bake to PLY/OBJ")
    p.add_argument("checkpoint")
    p.add_argument("out", help="output PLY path")
    p.add_argument("--obj", help="also write an OBJ here")
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("render", help="render a checkpoint to PNG + PFM")
    p.add_argument("checkpoint")
    p.add_argument("azimuth", type=float)
    p.add_argument("elevation", type=float)
    p.add_argument("out_prefix")
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--radius", type=float, default=2.5)
    p.add_argument("--fov-y", type=float, default=40.0)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("validate", help="run the embedded invariant suite")
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("probe-prior", help="handshake + echo check against a prior bridge")
    p.add_argument("endpoint", help="host:port")
    p.set_defaults(fn=cmd_probe_prior)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except SemshapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
