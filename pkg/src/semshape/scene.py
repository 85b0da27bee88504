"""Scene-spec text format: strict parser, defaults, normalized dump.

The format is a line-oriented key/value tree. `#` starts a comment,
quoting follows shell rules, `key ... {` opens a block and a lone `}`
closes it. Unknown keys are rejected with their line number. Parsing
fills every default and resolves `auto` values, so dumping a parsed
spec yields a stable normalized form (parse . dump is idempotent).

See scenes/reference.scene for a commented example of every key.
"""

from __future__ import annotations

import math
import os
import shlex
from dataclasses import dataclass, field as dc_field
from typing import Dict, List, Optional, Tuple

from .distill import RenderSetup, StageConfig, default_stages
from .errors import ConfigurationError
from .guidance import ObservationSet, observation_set, view_direction
from .references import ReferenceSpec
from .renderer import RenderConfig

PRIOR_MODES = ("oracle", "remote", "echo")
DTYPES = ("f32", "f64")
MAX_SEMANTICS = 4
VIEW_ANGLE_WARN_DEG = 60.0


@dataclass
class SemanticEntry:
    prompt: str
    azimuth: float
    elevation: float


@dataclass
class ScheduleSettings:
    steps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02


@dataclass
class RenderSettings:
    width: int = 64
    height: int = 64
    fov_y: float = 40.0
    radius: float = 2.5
    near: float = 0.0  # resolved from `auto` at parse time
    far: float = 0.0
    step_size: float = 0.0
    tau: float = 0.0
    jitter: bool = False
    seed: int = 0


@dataclass
class PriorSettings:
    mode: str = "oracle"
    endpoint: str = ""
    references: List[ReferenceSpec] = dc_field(default_factory=list)


@dataclass
class SceneSpec:
    semantics: List[SemanticEntry]
    seed: int = 0
    dtype: str = "f32"
    grid_resolution: int = 64
    appearance_resolution: int = 64
    init_radius: float = 0.5
    s0: float = 70.0
    view_set_size: int = 4
    schedule: ScheduleSettings = dc_field(default_factory=ScheduleSettings)
    render: RenderSettings = dc_field(default_factory=RenderSettings)
    stages: Tuple[StageConfig, StageConfig, StageConfig] = dc_field(default_factory=default_stages)
    prior: PriorSettings = dc_field(default_factory=PriorSettings)
    warnings: List[str] = dc_field(default_factory=list)

    def observation_set(self) -> ObservationSet:
        return observation_set(
            [(s.prompt, s.azimuth, s.elevation) for s in self.semantics], self.s0
        )

    def render_setup(self) -> RenderSetup:
        r = self.render
        return RenderSetup(
            radius=r.radius,
            fov_y=r.fov_y,
            width=r.width,
            height=r.height,
            config=RenderConfig(r.step_size, r.tau, r.near, r.far, r.jitter, r.seed),
            view_set_size=self.view_set_size,
        )

    def stage(self, name: str) -> StageConfig:
        for st in self.stages:
            if st.name == name:
                return st
        raise ConfigurationError(f"no stage named {name!r}")


# ---------------------------------------------------------------------------
# tokenizer / tree


@dataclass
class _Node:
    line: int
    key: str
    args: List[str]
    children: Optional[List["_Node"]] = None  # None for leaves


def _tree(text: str, path: str) -> List[_Node]:
    root: List[_Node] = []
    stack: List[List[_Node]] = [root]
    for lineno, raw in enumerate(text.splitlines(), start=1):
        try:
            tokens = shlex.split(raw, comments=True, posix=True)
        except ValueError as exc:
            raise ConfigurationError(f"{path}:{lineno}: {exc}") from exc
        if not tokens:
            continue
        if tokens == ["}"]:
            if len(stack) == 1:
                raise ConfigurationError(f"{path}:{lineno}: unbalanced '}}'")
            stack.pop()
            continue
        if tokens[-1] == "{":
            node = _Node(lineno, tokens[0], tokens[1:-1], children=[])
            stack[-1].append(node)
            stack.append(node.children)
            continue
        if "{" in tokens or "}" in tokens:
            raise ConfigurationError(
                f"{path}:{lineno}: blocks open with a trailing '{{' and close "
                f"with a '}}' on its own line"
            )
        stack[-1].append(_Node(lineno, tokens[0], tokens[1:]))
    if len(stack) != 1:
        raise ConfigurationError(f"{path}: unclosed block at end of file")
    return root


class _Scope:
    """Strict accessor over one block's nodes."""

    def __init__(self, nodes: List[_Node], path: str, where: str):
        self.path = path
        self.where = where
        self.leaves: Dict[str, _Node] = {}
        self.repeats: Dict[str, List[_Node]] = {}
        self.blocks: List[_Node] = []
        for n in nodes:
            if n.children is not None:
                self.blocks.append(n)
            elif n.key in ("semantic", "reference"):
                self.repeats.setdefault(n.key, []).append(n)
            elif n.key in self.leaves:
                raise ConfigurationError(
                    f"{path}:{n.line}: duplicate key {n.key!r} in {where}"
                )
            else:
                self.leaves[n.key] = n
        self.used = set()

    def fail(self, node: _Node, msg: str):
        raise ConfigurationError(f"{self.path}:{node.line}: {msg}")

    def get(self, key, convert, default):
        self.used.add(key)
        node = self.leaves.get(key)
        if node is None:
            return default
        if len(node.args) != 1:
            self.fail(node, f"{key} takes exactly one value")
        try:
            return convert(node.args[0])
        except ValueError as exc:
            self.fail(node, f"bad value for {key}: {exc}")

    def get_auto(self, key, default_fn):
        self.used.add(key)
        node = self.leaves.get(key)
        if node is None or node.args == ["auto"]:
            return default_fn()
        if len(node.args) != 1:
            self.fail(node, f"{key} takes one value or 'auto'")
        try:
            return float(node.args[0])
        except ValueError as exc:
            self.fail(node, f"bad value for {key}: {exc}")

    def finish(self, allowed_blocks=()):
        for key, node in self.leaves.items():
            if key not in self.used:
                self.fail(node, f"unknown key {key!r} in {self.where}")
        for node in self.blocks:
            if node.key not in allowed_blocks:
                self.fail(node, f"unknown block {node.key!r} in {self.where}")


def _boolean(token: str) -> bool:
    if token in ("on", "true", "1"):
        return True
    if token in ("off", "false", "0"):
        return False
    raise ValueError(f"expected on/off, got {token!r}")


def _choice(options):
    def convert(token):
        if token not in options:
            raise ValueError(f"expected one of {options}, got {token!r}")
        return token

    return convert


# ---------------------------------------------------------------------------
# schema


def parse_scene_text(text: str, path: str = "<scene>", base_dir: str = ".") -> SceneSpec:
    root = _tree(text, path)
    scope = _Scope(root, path, "scene")

    semantics = []
    for node in scope.repeats.get("semantic", []):
        semantics.append(_parse_semantic(scope, node))
    if not (1 <= len(semantics) <= MAX_SEMANTICS):
        raise ConfigurationError(
            f"{path}: need between 1 and {MAX_SEMANTICS} semantic entries, got {len(semantics)}"
        )

    spec = SceneSpec(semantics=semantics)
    spec.seed = scope.get("seed", int, 0)
    spec.dtype = scope.get("dtype", _choice(DTYPES), "f32")
    spec.grid_resolution = scope.get("grid_resolution", int, 64)
    spec.appearance_resolution = scope.get("appearance_resolution", int, 64)
    spec.init_radius = scope.get("init_radius", float, 0.5)
    spec.s0 = scope.get("s0", float, 70.0)
    spec.view_set_size = scope.get("view_set_size", int, 4)

    blocks = {}
    for node in scope.blocks:
        name = node.key if node.key != "stage" else _stage_block_name(path, node)
        if name in blocks:
            raise ConfigurationError(f"{path}:{node.line}: duplicate block {name!r}")
        blocks[name] = node

    spec.schedule = _parse_schedule(path, blocks.get("schedule"))
    spec.render = _parse_render(path, blocks.get("render"), spec)
    spec.stages = tuple(
        _parse_stage(path, blocks.get(name), name) for name in ("coarse", "refine", "appearance")
    )
    spec.prior = _parse_prior(path, blocks.get("prior"), base_dir)
    scope.finish(allowed_blocks=("schedule", "render", "prior", "stage"))

    _validate(spec, path)
    return spec


def _stage_block_name(path, node) -> str:
    if len(node.args) != 1 or node.args[0] not in ("coarse", "refine", "appearance"):
        raise ConfigurationError(
            f"{path}:{node.line}: stage block needs a name: coarse, refine or appearance"
        )
    return node.args[0]


def _parse_semantic(scope: _Scope, node: _Node) -> SemanticEntry:
    a = node.args
    if len(a) != 5 or a[1] != "azimuth" or a[3] != "elevation":
        scope.fail(node, 'expected: semantic "prompt" azimuth <deg> elevation <deg>')
    try:
        return SemanticEntry(a[0], float(a[2]), float(a[4]))
    except ValueError as exc:
        scope.fail(node, f"bad semantic angles: {exc}")


def _parse_schedule(path, node) -> ScheduleSettings:
    out = ScheduleSettings()
    if node is None:
        return out
    scope = _Scope(node.children, path, "schedule")
    out.steps = scope.get("steps", int, out.steps)
    out.beta_min = scope.get("beta_min", float, out.beta_min)
    out.beta_max = scope.get("beta_max", float, out.beta_max)
    scope.finish()
    return out


def _parse_render(path, node, spec: SceneSpec) -> RenderSettings:
    out = RenderSettings()
    scope = _Scope(node.children if node else [], path, "render")
    out.width = scope.get("width", int, out.width)
    out.height = scope.get("height", int, out.height)
    out.fov_y = scope.get("fov_y", float, out.fov_y)
    out.radius = scope.get("radius", float, out.radius)
    cell = 2.0 / spec.grid_resolution
    out.step_size = scope.get_auto("step_size", lambda: cell)
    out.tau = scope.get_auto("tau", lambda: 2.0 * cell)
    out.near = scope.get_auto("near", lambda: out.radius - 1.0)
    out.far = scope.get_auto("far", lambda: out.radius + 1.0)
    out.jitter = scope.get("jitter", _boolean, False)
    out.seed = scope.get("seed", int, 0)
    scope.finish()
    return out


def _parse_stage(path, node, name: str) -> StageConfig:
    defaults = {st.name: st for st in default_stages()}[name]
    if node is None:
        return defaults
    scope = _Scope(node.children, path, f"stage {name}")
    cfg = StageConfig(
        name=name,
        iterations=scope.get("iterations", int, defaults.iterations),
        t_lo=scope.get("t_lo", float, defaults.t_lo),
        t_hi=scope.get("t_hi", float, defaults.t_hi),
        lr=scope.get("lr", float, defaults.lr),
        lambda_lgad=scope.get("lambda_lgad", float, defaults.lambda_lgad),
        lambda_sds=scope.get("lambda_sds", float, defaults.lambda_sds),
        lambda_eik=scope.get("lambda_eik", float, defaults.lambda_eik),
        lambda_nc=scope.get("lambda_nc", float, defaults.lambda_nc),
        tau_scale=scope.get("tau_scale", float, defaults.tau_scale),
    )
    scope.finish()
    return cfg


def _parse_prior(path, node, base_dir: str) -> PriorSettings:
    out = PriorSettings()
    if node is None:
        return out
    scope = _Scope(node.children, path, "prior")
    out.mode = scope.get("mode", _choice(PRIOR_MODES), "oracle")
    out.endpoint = scope.get("endpoint", str, "")
    for ref_node in scope.repeats.get("reference", []):
        out.references.append(_parse_reference(scope, ref_node, base_dir))
    scope.finish()
    return out


def _parse_reference(scope: _Scope, node: _Node, base_dir: str) -> ReferenceSpec:
    a = list(node.args)
    if len(a) < 2:
        scope.fail(node, 'expected: reference "prompt" <shape> <params...> [color r g b]')
    prompt, shape = a[0], a[1]
    rest = a[2:]
    color = (0.5, 0.5, 0.5)
    if "color" in rest:
        i = rest.index("color")
        if len(rest) - i != 4:
            scope.fail(node, "color takes three components")
        try:
            color = tuple(float(x) for x in rest[i + 1 : i + 4])
        except ValueError as exc:
            scope.fail(node, f"bad color: {exc}")
        rest = rest[:i]
    mesh_path = None
    params: Tuple[float, ...] = ()
    if shape == "mesh":
        if len(rest) != 1:
            scope.fail(node, "mesh reference takes a single path")
        mesh_path = os.path.join(base_dir, rest[0])
        if not os.path.isfile(mesh_path):
            scope.fail(node, f"referenced mesh file not found: {mesh_path}")
    else:
        try:
            params = tuple(float(x) for x in rest)
        except ValueError as exc:
            scope.fail(node, f"bad shape parameters: {exc}")
    try:
        return ReferenceSpec(prompt, shape, params, color, mesh_path)
    except ConfigurationError as exc:
        scope.fail(node, str(exc))


def _validate(spec: SceneSpec, path: str) -> None:
    if not (1 <= spec.grid_resolution <= 512):
        raise ConfigurationError(f"{path}: grid_resolution outside [1, 512]")
    if not (0.0 < spec.init_radius < 1.0):
        raise ConfigurationError(f"{path}: init_radius must be in (0, 1)")
    if spec.prior.mode == "remote" and not spec.prior.endpoint:
        raise ConfigurationError(f"{path}: remote prior needs an endpoint")
    seen = set()
    for s in spec.semantics:
        if s.prompt in seen:
            raise ConfigurationError(f"{path}: duplicate semantic prompt {s.prompt!r}")
        seen.add(s.prompt)
    dirs = [view_direction(s.azimuth, s.elevation) for s in spec.semantics]
    for i in range(len(dirs)):
        for j in range(i + 1, len(dirs)):
            dot = float(min(1.0, max(-1.0, dirs[i] @ dirs[j])))
            angle = math.degrees(math.acos(dot))
            if angle < VIEW_ANGLE_WARN_DEG:
                spec.warnings.append(
                    f"observation views {i} and {j} are only {angle:.1f} deg apart "
                    f"(below {VIEW_ANGLE_WARN_DEG:.0f})"
                )


def parse_scene(path) -> SceneSpec:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read scene file {path}: {exc}") from exc
    return parse_scene_text(text, str(path), base_dir=os.path.dirname(os.path.abspath(path)))


# ---------------------------------------------------------------------------
# normalized dump


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "on" if x else "off"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def dump_scene(spec: SceneSpec) -> str:
    lines = ["# normalized scene spec"]
    for s in spec.semantics:
        lines.append(
            f"semantic {shlex.quote(s.prompt)} azimuth {_fmt(s.azimuth)} elevation {_fmt(s.elevation)}"
        )
    lines.append(f"seed {spec.seed}")
    lines.append(f"dtype {spec.dtype}")
    lines.append(f"grid_resolution {spec.grid_resolution}")
    lines.append(f"appearance_resolution {spec.appearance_resolution}")
    lines.append(f"init_radius {_fmt(spec.init_radius)}")
    lines.append(f"s0 {_fmt(spec.s0)}")
    lines.append(f"view_set_size {spec.view_set_size}")
    sch = spec.schedule
    lines.append("schedule {")
    lines.append(f"  steps {sch.steps}")
    lines.append(f"  beta_min {_fmt(sch.beta_min)}")
    lines.append(f"  beta_max {_fmt(sch.beta_max)}")
    lines.append("}")
    r = spec.render
    lines.append("render {")
    for key in ("width", "height", "fov_y", "radius", "near", "far", "step_size", "tau", "jitter", "seed"):
        lines.append(f"  {key} {_fmt(getattr(r, key))}")
    lines.append("}")
    for st in spec.stages:
        lines.append(f"stage {st.name} {{")
        for key in ("iterations", "t_lo", "t_hi", "lr", "lambda_lgad", "lambda_sds", "lambda_eik", "lambda_nc", "tau_scale"):
            lines.append(f"  {key} {_fmt(getattr(st, key))}")
        lines.append("}")
    p = spec.prior
    lines.append("prior {")
    lines.append(f"  mode {p.mode}")
    if p.endpoint:
        lines.append(f"  endpoint {shlex.quote(p.endpoint)}")
    for ref in p.references:
        parts = [f"  reference {shlex.quote(ref.prompt)} {ref.shape}"]
        if ref.shape == "mesh":
            parts.append(shlex.quote(ref.mesh_path))
        else:
            parts.extend(_fmt(x) for x in ref.params)
        parts.append("color " + " ".join(_fmt(c) for c in ref.color))
        lines.append(" ".join(parts))
    lines.append("}")
    return "\n".join(lines) + "\n"
