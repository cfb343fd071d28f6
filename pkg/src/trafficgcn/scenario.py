"""Egocentric traffic scenario data model, file format, and interventions.

A scenario is a feature-level clip: per-agent tracklets with 3D positions
and appearance vectors, per-frame scene context, a global ego feature, and
a behavior label. Scenario values are immutable after construction; the
causal-intervention primitives (`mask_agent`, `mask_group`) return new
scenarios with agents removed rather than editing in place.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .exceptions import ScenarioFormatError, UnknownAgentError
from .geometry import CameraIntrinsics, PixelObservation, Point3

SCENARIO_SCHEMA_VERSION = 1
MANIFEST_SCHEMA_VERSION = 1


class AgentClass(Enum):
    """Road agent categories; persons and bicycles count as vulnerable."""

    PERSON = "Person"
    BICYCLE = "Bicycle"
    CAR = "Car"
    MOTORCYCLE = "Motorcycle"
    BUS = "Bus"
    TRUCK = "Truck"

    @property
    def vulnerable(self) -> bool:
        return self in (AgentClass.PERSON, AgentClass.BICYCLE)

    @property
    def vulnerability(self) -> int:
        """The binary flag selecting vulnerability-specific parameters."""
        return 1 if self.vulnerable else 0


def _readonly(a, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class Tracklet:
    """Presence record of one agent across the clip."""

    agent_id: int
    agent_class: AgentClass
    presence: np.ndarray  # (gamma,) bool

    def __post_init__(self):
        object.__setattr__(self, "presence", _readonly(self.presence, dtype=bool))

    @property
    def present_frames(self) -> np.ndarray:
        return np.nonzero(self.presence)[0]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Tracklet)
            and self.agent_id == other.agent_id
            and self.agent_class is other.agent_class
            and np.array_equal(self.presence, other.presence)
        )


@dataclass(frozen=True, eq=False)
class AgentFrameState:
    """One agent's attributes at one frame."""

    position: Point3
    appearance: np.ndarray  # (F,)
    observation: PixelObservation | None = None

    def __post_init__(self):
        object.__setattr__(self, "appearance", _readonly(self.appearance))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, AgentFrameState)
            and self.position == other.position
            and np.array_equal(self.appearance, other.appearance)
            and self.observation == other.observation
        )


@dataclass(frozen=True, eq=False)
class ScenarioAgent:
    """A tracklet plus its per-frame states, keyed by frame index."""

    tracklet: Tracklet
    states: dict[int, AgentFrameState]

    @property
    def agent_id(self) -> int:
        return self.tracklet.agent_id

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ScenarioAgent)
            and self.tracklet == other.tracklet
            and self.states == other.states
        )


@dataclass(frozen=True, eq=False)
class Scenario:
    """A feature-level egocentric clip with labels and optional ground truth."""

    gamma: int
    fps: float
    intrinsics: CameraIntrinsics
    agents: tuple[ScenarioAgent, ...]
    context: np.ndarray  # (gamma, F)
    ego_feature: np.ndarray  # (F,)
    label: str
    ground_truth_risk: int | None = None
    ground_truth_group: frozenset[int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "context", _readonly(self.context))
        object.__setattr__(self, "ego_feature", _readonly(self.ego_feature))

    @property
    def feature_dim(self) -> int:
        return int(self.ego_feature.shape[0])

    @property
    def agent_ids(self) -> tuple[int, ...]:
        return tuple(a.agent_id for a in self.agents)

    def agent(self, agent_id: int) -> ScenarioAgent:
        for a in self.agents:
            if a.agent_id == agent_id:
                return a
        raise UnknownAgentError(f"agent id {agent_id} not in scenario (have {sorted(self.agent_ids)})")

    def validate(self) -> None:
        """Check every structural invariant; raises ScenarioFormatError."""
        _validate_scenario(self)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Scenario)
            and self.gamma == other.gamma
            and self.fps == other.fps
            and self.intrinsics == other.intrinsics
            and self.agents == other.agents
            and np.array_equal(self.context, other.context)
            and np.array_equal(self.ego_feature, other.ego_feature)
            and self.label == other.label
            and self.ground_truth_risk == other.ground_truth_risk
            and self.ground_truth_group == other.ground_truth_group
        )


def fuse_context(appearance: np.ndarray, context: np.ndarray) -> np.ndarray:
    """Scene-prior fusion: element-wise sum of appearance and context vectors."""
    a = np.asarray(appearance, dtype=np.float64)
    c = np.asarray(context, dtype=np.float64)
    if a.shape != c.shape:
        raise ValueError(f"appearance/context length mismatch: {a.shape} vs {c.shape}")
    return a + c


def mask_agent(scenario: Scenario, agent_id: int) -> Scenario:
    """Remove one agent entirely, as if it had never been observed."""
    if agent_id not in scenario.agent_ids:
        raise UnknownAgentError(f"cannot mask unknown agent id {agent_id}")
    agents = tuple(a for a in scenario.agents if a.agent_id != agent_id)
    risk = scenario.ground_truth_risk
    if risk == agent_id:
        risk = None
    group = scenario.ground_truth_group
    if group is not None:
        group = frozenset(group - {agent_id}) or None
    return replace(scenario, agents=agents, ground_truth_risk=risk, ground_truth_group=group)


def mask_group(scenario: Scenario, agent_ids) -> Scenario:
    """Remove a set of agents in a single intervention; order independent."""
    ids = set(agent_ids)
    missing = ids - set(scenario.agent_ids)
    if missing:
        raise UnknownAgentError(f"cannot mask unknown agent ids {sorted(missing)}")
    out = scenario
    for agent_id in sorted(ids):
        out = mask_agent(out, agent_id)
    return out


# ---------------------------------------------------------------------------
# serialization


def _require(mapping: dict, key: str, ctx: str):
    if key not in mapping:
        raise ScenarioFormatError(f"{ctx}: missing required field '{key}'")
    return mapping[key]


def _float_list(values, ctx: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ScenarioFormatError(f"{ctx}: expected a flat list of numbers")
    if not np.all(np.isfinite(arr)):
        raise ScenarioFormatError(f"{ctx}: values must be finite")
    return arr


def scenario_to_dict(s: Scenario) -> dict:
    """JSON-ready dict with the documented key order."""
    agents = []
    for a in s.agents:
        states = []
        for t in sorted(a.states):
            st = a.states[t]
            entry = {
                "t": int(t),
                "position": [st.position.x, st.position.y, st.position.z],
                "appearance": [float(x) for x in st.appearance],
            }
            if st.observation is not None:
                obs = st.observation
                entry["observation"] = [obs.u, obs.v, obs.depth]
            states.append(entry)
        agents.append(
            {
                "agent_id": int(a.agent_id),
                "class": a.tracklet.agent_class.value,
                "presence": [int(p) for p in a.tracklet.presence],
                "states": states,
            }
        )
    return {
        "schema_version": SCENARIO_SCHEMA_VERSION,
        "gamma": int(s.gamma),
        "fps": float(s.fps),
        "intrinsics": {
            "fx": s.intrinsics.fx,
            "fy": s.intrinsics.fy,
            "cx": s.intrinsics.cx,
            "cy": s.intrinsics.cy,
        },
        "ego_feature": [float(x) for x in s.ego_feature],
        "context": [[float(x) for x in row] for row in s.context],
        "agents": agents,
        "label": s.label,
        "ground_truth_risk": s.ground_truth_risk,
        "ground_truth_group": sorted(s.ground_truth_group) if s.ground_truth_group is not None else None,
    }


def save_scenario(s: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(s), separators=(",", ":")) + "\n", encoding="utf-8")


def scenario_from_dict(data: dict, ctx: str = "scenario") -> Scenario:
    if not isinstance(data, dict):
        raise ScenarioFormatError(f"{ctx}: top level must be a JSON object")
    version = _require(data, "schema_version", ctx)
    if version != SCENARIO_SCHEMA_VERSION:
        raise ScenarioFormatError(f"{ctx}: unsupported schema_version {version!r}")
    gamma = _require(data, "gamma", ctx)
    if not isinstance(gamma, int) or gamma < 1:
        raise ScenarioFormatError(f"{ctx}: 'gamma' must be a positive integer")
    fps = float(_require(data, "fps", ctx))
    kd = _require(data, "intrinsics", ctx)
    try:
        intrinsics = CameraIntrinsics(
            fx=float(_require(kd, "fx", f"{ctx}.intrinsics")),
            fy=float(_require(kd, "fy", f"{ctx}.intrinsics")),
            cx=float(_require(kd, "cx", f"{ctx}.intrinsics")),
            cy=float(_require(kd, "cy", f"{ctx}.intrinsics")),
        )
    except TypeError as e:
        raise ScenarioFormatError(f"{ctx}.intrinsics: {e}") from e
    ego_feature = _float_list(_require(data, "ego_feature", ctx), f"{ctx}.ego_feature")
    context_rows = _require(data, "context", ctx)
    if len(context_rows) != gamma:
        raise ScenarioFormatError(f"{ctx}.context: expected {gamma} rows, got {len(context_rows)}")
    feature_dim = ego_feature.shape[0]
    context = np.empty((gamma, feature_dim))
    for t, row in enumerate(context_rows):
        vec = _float_list(row, f"{ctx}.context[{t}]")
        if vec.shape[0] != feature_dim:
            raise ScenarioFormatError(
                f"{ctx}.context[{t}]: expected length {feature_dim}, got {vec.shape[0]}"
            )
        context[t] = vec

    class_by_value = {c.value: c for c in AgentClass}
    agents = []
    for i, ad in enumerate(_require(data, "agents", ctx)):
        actx = f"{ctx}.agents[{i}]"
        agent_id = _require(ad, "agent_id", actx)
        if not isinstance(agent_id, int):
            raise ScenarioFormatError(f"{actx}.agent_id: must be an integer")
        class_name = _require(ad, "class", actx)
        if class_name not in class_by_value:
            raise ScenarioFormatError(f"{actx}.class: unknown class {class_name!r}")
        presence_raw = _require(ad, "presence", actx)
        if len(presence_raw) != gamma:
            raise ScenarioFormatError(
                f"{actx}.presence: expected length gamma={gamma}, got {len(presence_raw)}"
            )
        if any(p not in (0, 1) for p in presence_raw):
            raise ScenarioFormatError(f"{actx}.presence: entries must be 0 or 1")
        presence = np.asarray(presence_raw, dtype=bool)
        tracklet = Tracklet(agent_id=agent_id, agent_class=class_by_value[class_name], presence=presence)
        states: dict[int, AgentFrameState] = {}
        for j, sd in enumerate(_require(ad, "states", actx)):
            sctx = f"{actx}.states[{j}]"
            t = _require(sd, "t", sctx)
            if not isinstance(t, int) or not (0 <= t < gamma):
                raise ScenarioFormatError(f"{sctx}.t: frame index {t!r} outside [0, {gamma})")
            pos = _float_list(_require(sd, "position", sctx), f"{sctx}.position")
            if pos.shape[0] != 3:
                raise ScenarioFormatError(f"{sctx}.position: expected 3 components")
            appearance = _float_list(_require(sd, "appearance", sctx), f"{sctx}.appearance")
            observation = None
            if "observation" in sd and sd["observation"] is not None:
                ov = _float_list(sd["observation"], f"{sctx}.observation")
                if ov.shape[0] != 3:
                    raise ScenarioFormatError(f"{sctx}.observation: expected [u, v, depth]")
                if not ov[2] > 0:
                    raise ScenarioFormatError(f"{sctx}.observation: depth must be positive")
                observation = PixelObservation(float(ov[0]), float(ov[1]), float(ov[2]))
            states[t] = AgentFrameState(
                position=Point3(float(pos[0]), float(pos[1]), float(pos[2])),
                appearance=appearance,
                observation=observation,
            )
        agents.append(ScenarioAgent(tracklet=tracklet, states=states))

    label = _require(data, "label", ctx)
    if not isinstance(label, str):
        raise ScenarioFormatError(f"{ctx}.label: must be a string")
    risk = _require(data, "ground_truth_risk", ctx)
    if risk is not None and not isinstance(risk, int):
        raise ScenarioFormatError(f"{ctx}.ground_truth_risk: must be an integer or null")
    group_raw = _require(data, "ground_truth_group", ctx)
    group = None
    if group_raw is not None:
        if not all(isinstance(g, int) for g in group_raw):
            raise ScenarioFormatError(f"{ctx}.ground_truth_group: must be a list of integers or null")
        group = frozenset(group_raw)

    scenario = Scenario(
        gamma=gamma,
        fps=fps,
        intrinsics=intrinsics,
        agents=tuple(agents),
        context=context,
        ego_feature=ego_feature,
        label=label,
        ground_truth_risk=risk,
        ground_truth_group=group,
    )
    _validate_scenario(scenario, ctx=ctx)
    return scenario


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ScenarioFormatError(f"{path}: not valid JSON ({e})") from e
    return scenario_from_dict(data, ctx=str(path))


def _validate_scenario(s: Scenario, ctx: str = "scenario") -> None:
    if s.gamma < 1:
        raise ScenarioFormatError(f"{ctx}: gamma must be >= 1")
    if not s.fps > 0:
        raise ScenarioFormatError(f"{ctx}: fps must be positive")
    if not (s.intrinsics.fx > 0 and s.intrinsics.fy > 0):
        raise ScenarioFormatError(f"{ctx}.intrinsics: focal lengths must be positive")
    feature_dim = s.ego_feature.shape[0]
    if s.context.shape != (s.gamma, feature_dim):
        raise ScenarioFormatError(
            f"{ctx}.context: expected shape ({s.gamma}, {feature_dim}), got {s.context.shape}"
        )
    seen_ids: set[int] = set()
    for i, a in enumerate(s.agents):
        actx = f"{ctx}.agents[{i}]"
        if a.agent_id in seen_ids:
            raise ScenarioFormatError(f"{actx}: duplicate agent_id {a.agent_id}")
        seen_ids.add(a.agent_id)
        presence = a.tracklet.presence
        if presence.shape != (s.gamma,):
            raise ScenarioFormatError(
                f"{actx}.presence: expected length gamma={s.gamma}, got {presence.shape[0]}"
            )
        present = set(int(t) for t in np.nonzero(presence)[0])
        if not present:
            raise ScenarioFormatError(f"{actx}.presence: tracklet must be present in at least one frame")
        if set(a.states) != present:
            raise ScenarioFormatError(
                f"{actx}.states: frames {sorted(a.states)} do not match presence {sorted(present)}"
            )
        for t, st in a.states.items():
            sctx = f"{actx}.states[t={t}]"
            if st.appearance.shape != (feature_dim,):
                raise ScenarioFormatError(
                    f"{sctx}.appearance: expected length {feature_dim}, got {st.appearance.shape[0]}"
                )
            p = st.position
            if not all(np.isfinite(v) for v in (p.x, p.y, p.z)):
                raise ScenarioFormatError(f"{sctx}.position: components must be finite")
    if s.ground_truth_risk is not None and s.ground_truth_risk not in seen_ids:
        raise ScenarioFormatError(f"{ctx}.ground_truth_risk: unknown agent id {s.ground_truth_risk}")
    if s.ground_truth_group is not None:
        unknown = set(s.ground_truth_group) - seen_ids
        if unknown:
            raise ScenarioFormatError(f"{ctx}.ground_truth_group: unknown agent ids {sorted(unknown)}")


# ---------------------------------------------------------------------------
# dataset manifests


@dataclass(frozen=True)
class DatasetManifest:
    """Index of generated scenario files, split tags, and provenance."""

    seed: int
    config_digest: str
    splits: dict[str, tuple[str, ...]]

    def paths(self, split: str) -> tuple[str, ...]:
        if split not in self.splits:
            raise ScenarioFormatError(f"manifest has no split {split!r} (have {sorted(self.splits)})")
        return self.splits[split]


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "seed": manifest.seed,
        "config_digest": manifest.config_digest,
        "splits": {name: list(paths) for name, paths in manifest.splits.items()},
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ScenarioFormatError(f"{path}: not valid JSON ({e})") from e
    ctx = str(path)
    version = _require(data, "schema_version", ctx)
    if version != MANIFEST_SCHEMA_VERSION:
        raise ScenarioFormatError(f"{ctx}: unsupported schema_version {version!r}")
    splits_raw = _require(data, "splits", ctx)
    splits: dict[str, tuple[str, ...]] = {}
    seen: dict[str, str] = {}
    for name, paths in splits_raw.items():
        for p in paths:
            if p in seen:
                raise ScenarioFormatError(f"{ctx}: path {p!r} appears in splits {seen[p]!r} and {name!r}")
            seen[p] = name
        splits[name] = tuple(paths)
    return DatasetManifest(
        seed=int(_require(data, "seed", ctx)),
        config_digest=str(_require(data, "config_digest", ctx)),
        splits=splits,
    )


def load_split(manifest: DatasetManifest, base_dir, split: str) -> list[tuple[str, Scenario]]:
    """Load every scenario of a split; paths resolve relative to the manifest dir."""
    base = Path(base_dir)
    return [(p, load_scenario(base / p)) for p in manifest.paths(split)]
