"""Rule-based synthetic scenario generator with planted ground truth.

Agents move with constant velocity in the ego camera frame. The label rule
is purely geometric: a clip is a Stop iff some agent's closest approach to
the origin, over frames where it is present and in front of the ego
(z > 0), comes below ``d_stop``. The triggering agent (earliest closest
approach, then smallest id) is the planted risk object; when two or more
vulnerable agents trigger together the triggering set is recorded as the
risk group. Labels are always re-derived from the stored positions, so the
rule can be checked independently after the fact.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, GenerationError
from .geometry import CameraIntrinsics, Point3, inverse_project, project
from .scenario import (
    AgentClass,
    AgentFrameState,
    DatasetManifest,
    Scenario,
    ScenarioAgent,
    Tracklet,
    save_manifest,
    save_scenario,
)

_DEFAULT_CLASS_WEIGHTS = {
    "Car": 0.35,
    "Person": 0.25,
    "Bicycle": 0.10,
    "Motorcycle": 0.10,
    "Bus": 0.10,
    "Truck": 0.10,
}

_DEFAULT_SPEED_RANGES = {
    "Person": (0.4, 2.2),
    "Bicycle": (1.0, 5.0),
    "Car": (2.0, 9.0),
    "Motorcycle": (2.0, 9.0),
    "Bus": (2.0, 7.0),
    "Truck": (2.0, 7.0),
}


@dataclass
class GeneratorConfig:
    """Knobs of the synthetic scenario generator; all defaults are desk scale."""

    gamma: int = 20
    fps: float = 3.0
    feature_dim: int = 16
    agent_count: tuple[int, int] = (1, 6)
    class_weights: dict = field(default_factory=lambda: dict(_DEFAULT_CLASS_WEIGHTS))
    stop_fraction: float = 0.5
    group_fraction: float = 0.0
    group_size: tuple[int, int] = (2, 3)
    d_stop: float = 2.0
    # clearance beyond d_stop enforced for every non-risk agent
    margin: float = 1.2
    # closest-approach distance range for planted risk agents; must stay < d_stop
    approach_range: tuple[float, float] = (0.4, 1.7)
    spawn_max: float = 12.0
    speed_ranges: dict = field(default_factory=lambda: dict(_DEFAULT_SPEED_RANGES))
    partial_presence_prob: float = 0.3
    min_presence: int = 4
    noise: float = 0.1
    context_scale: float = 0.1
    prototype_seed: int = 0
    intrinsics: tuple[float, float, float, float] = (180.0, 180.0, 178.0, 100.0)
    splits: dict = field(default_factory=lambda: {"train": 1.0})

    def validate(self) -> None:
        if self.gamma < 1:
            raise ConfigError("gamma must be >= 1")
        if not self.fps > 0:
            raise ConfigError("fps must be positive")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        lo, hi = self.agent_count
        if not (0 <= lo <= hi):
            raise ConfigError(f"agent_count range ({lo}, {hi}) is invalid")
        if not all(w >= 0 for w in self.class_weights.values()) or sum(self.class_weights.values()) <= 0:
            raise ConfigError("class_weights must be nonnegative and not all zero")
        unknown = set(self.class_weights) - {c.value for c in AgentClass}
        if unknown:
            raise ConfigError(f"class_weights has unknown classes {sorted(unknown)}")
        if not 0 <= self.stop_fraction <= 1:
            raise ConfigError("stop_fraction must be in [0, 1]")
        if not 0 <= self.group_fraction <= 1:
            raise ConfigError("group_fraction must be in [0, 1]")
        if self.group_size[0] < 2 or self.group_size[0] > self.group_size[1]:
            raise ConfigError("group_size must be a range with minimum >= 2")
        if not self.d_stop > 0:
            raise ConfigError("d_stop must be positive")
        alo, ahi = self.approach_range
        if not (0 < alo <= ahi < self.d_stop):
            raise ConfigError(f"approach_range ({alo}, {ahi}) must lie inside (0, d_stop={self.d_stop})")
        if not self.margin > 0:
            raise ConfigError("margin must be positive")
        if self.spawn_max <= self.d_stop + self.margin:
            raise ConfigError("spawn_max must exceed d_stop + margin")
        if not 0 <= self.partial_presence_prob <= 1:
            raise ConfigError("partial_presence_prob must be in [0, 1]")
        if self.min_presence < 1:
            raise ConfigError("min_presence must be >= 1")
        if self.noise < 0 or self.context_scale < 0:
            raise ConfigError("noise levels must be nonnegative")
        if not self.splits or abs(sum(self.splits.values()) - 1.0) > 1e-9:
            raise ConfigError("split fractions must sum to 1")
        if any(f < 0 for f in self.splits.values()):
            raise ConfigError("split fractions must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["agent_count"] = list(self.agent_count)
        d["group_size"] = list(self.group_size)
        d["approach_range"] = list(self.approach_range)
        d["intrinsics"] = list(self.intrinsics)
        d["speed_ranges"] = {k: list(v) for k, v in self.speed_ranges.items()}
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    @staticmethod
    def from_dict(data: dict) -> "GeneratorConfig":
        known = set(GeneratorConfig.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown generator config keys {sorted(unknown)}")
        kwargs = dict(data)
        for key in ("agent_count", "group_size", "approach_range", "intrinsics"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        if "speed_ranges" in kwargs:
            kwargs["speed_ranges"] = {k: tuple(v) for k, v in kwargs["speed_ranges"].items()}
        cfg = GeneratorConfig(**kwargs)
        cfg.validate()
        return cfg


def derive_ground_truth(scenario: Scenario, d_stop: float = 2.0):
    """Re-derive (label, risk id, risk group) from stored positions.

    Returns ("Go", None, None) when no agent's closest in-front approach
    beats d_stop; otherwise ("Stop", risk_id, group) where the group is the
    full triggering set if it has at least two members, else None.
    """
    triggers: list[tuple[int, int]] = []  # (frame of closest approach, agent_id)
    for agent in scenario.agents:
        best: tuple[float, int] | None = None
        for t in sorted(agent.states):
            p = agent.states[t].position
            if p.z <= 0:
                continue
            dist = math.sqrt(p.x * p.x + p.y * p.y + p.z * p.z)
            if best is None or dist < best[0]:
                best = (dist, t)
        if best is not None and best[0] < d_stop:
            triggers.append((best[1], agent.agent_id))
    if not triggers:
        return "Go", None, None
    triggers.sort()
    risk = triggers[0][1]
    group = frozenset(aid for _, aid in triggers) if len(triggers) >= 2 else None
    return "Stop", risk, group


@dataclass
class _AgentSpec:
    agent_class: AgentClass
    approach: float  # closest-approach distance to the origin
    t_close: int  # frame index of the closest approach
    risk: bool


def _sample_trajectory(spec: _AgentSpec, cfg: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    """Constant-velocity positions (gamma, 3) whose in-front closest approach
    to the origin is exactly spec.approach at frame spec.t_close."""
    y = rng.uniform(-0.3, 0.3)
    if abs(y) >= spec.approach:
        y = math.copysign(0.5 * spec.approach, y)
    r_xz = math.sqrt(spec.approach**2 - y**2)
    # keep the closest point in front of the camera
    phi = rng.uniform(-math.pi / 3, math.pi / 3)
    qx, qz = r_xz * math.sin(phi), r_xz * math.cos(phi)
    side = 1.0 if rng.random() < 0.5 else -1.0
    ux, uz = side * math.cos(phi), -side * math.sin(phi)  # unit vector, perpendicular to (qx, qz)
    lo, hi = cfg.speed_ranges.get(spec.agent_class.value, (0.5, 8.0))
    speed = rng.uniform(lo, hi)
    dt = 1.0 / cfg.fps
    steps = (np.arange(cfg.gamma) - spec.t_close) * dt * speed
    out = np.empty((cfg.gamma, 3))
    out[:, 0] = qx + ux * steps
    out[:, 1] = y
    out[:, 2] = qz + uz * steps
    return out


def _sample_presence(spec: _AgentSpec, cfg: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    gamma = cfg.gamma
    presence = np.zeros(gamma, dtype=bool)
    if spec.risk or rng.random() >= cfg.partial_presence_prob:
        presence[:] = True
        return presence
    length = int(rng.integers(min(cfg.min_presence, gamma), gamma + 1))
    start = int(rng.integers(0, gamma - length + 1))
    presence[start : start + length] = True
    return presence


def _class_prototypes(cfg: GeneratorConfig) -> tuple[dict[str, np.ndarray], np.ndarray]:
    rng = np.random.default_rng(cfg.prototype_seed)
    protos = {c.value: rng.normal(0.0, 1.0, cfg.feature_dim) for c in AgentClass}
    ego = rng.normal(0.0, 1.0, cfg.feature_dim)
    return protos, ego


def generate_scenario(cfg: GeneratorConfig, seed: int) -> Scenario:
    """Deterministically generate one labeled scenario from (cfg, seed)."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    protos, ego_proto = _class_prototypes(cfg)
    intrinsics = CameraIntrinsics(*cfg.intrinsics)

    class_names = sorted(cfg.class_weights)
    weights = np.array([cfg.class_weights[c] for c in class_names], dtype=np.float64)
    weights = weights / weights.sum()
    vulnerable_names = [c.value for c in AgentClass if c.vulnerable]

    target_stop = rng.random() < cfg.stop_fraction
    is_group = target_stop and rng.random() < cfg.group_fraction
    lo, hi = cfg.agent_count
    if target_stop and hi < 1:
        raise GenerationError("cannot generate a Stop scenario with zero agents allowed")

    n_agents = int(rng.integers(lo, hi + 1))
    n_risk = 0
    if is_group:
        n_risk = int(rng.integers(cfg.group_size[0], cfg.group_size[1] + 1))
    elif target_stop:
        n_risk = 1
    n_agents = max(n_agents, n_risk)

    t_lo = min(2, cfg.gamma - 1)
    t_hi = max(cfg.gamma - 3, t_lo)
    specs: list[_AgentSpec] = []
    group_center = int(rng.integers(t_lo, t_hi + 1))
    for i in range(n_agents):
        risk = i < n_risk
        if risk and is_group:
            cls = AgentClass(vulnerable_names[int(rng.integers(0, len(vulnerable_names)))])
            t_close = int(np.clip(group_center + int(rng.integers(-2, 3)), t_lo, t_hi))
        else:
            cls = AgentClass(class_names[int(rng.choice(len(class_names), p=weights))])
            t_close = int(rng.integers(t_lo, t_hi + 1)) if risk else int(rng.integers(0, cfg.gamma))
        if risk:
            approach = float(rng.uniform(*cfg.approach_range))
        else:
            approach = float(rng.uniform(cfg.d_stop + cfg.margin, cfg.spawn_max))
        specs.append(_AgentSpec(agent_class=cls, approach=approach, t_close=t_close, risk=risk))
    specs = [specs[i] for i in rng.permutation(len(specs))]

    agents: list[ScenarioAgent] = []
    for idx, spec in enumerate(specs):
        agent_id = idx + 1
        positions = _sample_trajectory(spec, cfg, rng)
        presence = _sample_presence(spec, cfg, rng)
        proto = protos[spec.agent_class.value]
        states: dict[int, AgentFrameState] = {}
        for t in np.nonzero(presence)[0]:
            raw = Point3(*positions[t])
            appearance = proto + rng.normal(0.0, cfg.noise, cfg.feature_dim)
            if raw.z > 1e-6:
                # route the position through the camera model so stored
                # positions are exactly what inverse projection produces
                obs = project(raw, intrinsics)
                states[int(t)] = AgentFrameState(
                    position=inverse_project(obs, intrinsics), appearance=appearance, observation=obs
                )
            else:
                states[int(t)] = AgentFrameState(position=raw, appearance=appearance)
        agents.append(
            ScenarioAgent(
                tracklet=Tracklet(agent_id=agent_id, agent_class=spec.agent_class, presence=presence),
                states=states,
            )
        )

    context = rng.normal(0.0, cfg.context_scale, (cfg.gamma, cfg.feature_dim))
    ego_feature = ego_proto + rng.normal(0.0, cfg.noise, cfg.feature_dim)

    scenario = Scenario(
        gamma=cfg.gamma,
        fps=cfg.fps,
        intrinsics=intrinsics,
        agents=tuple(agents),
        context=context,
        ego_feature=ego_feature,
        label="",
        ground_truth_risk=None,
        ground_truth_group=None,
    )
    label, risk, group = derive_ground_truth(scenario, cfg.d_stop)
    expected = "Stop" if target_stop else "Go"
    if label != expected:
        raise GenerationError(
            f"constructed trajectories violate the label rule (wanted {expected}, derived {label})"
        )
    if is_group and (group is None or len(group) < cfg.group_size[0]):
        raise GenerationError("constructed group scenario does not contain a derivable risk group")
    scenario = replace(scenario, label=label, ground_truth_risk=risk, ground_truth_group=group)
    scenario.validate()
    return scenario


def random_scenario(
    seed: int,
    gamma: int = 4,
    agents: int = 2,
    feature_dim: int = 8,
    spread: float = 2.5,
    partial_presence: bool = True,
    label: str | None = None,
) -> Scenario:
    """A small unstructured scenario for checks: positions scattered inside
    the interaction range, random features, no planted ground truth."""
    rng = np.random.default_rng(seed)
    scenario_agents = []
    classes = list(AgentClass)
    for agent_id in range(1, agents + 1):
        presence = np.ones(gamma, dtype=bool)
        if partial_presence and gamma > 2 and rng.random() < 0.5:
            presence[int(rng.integers(0, gamma))] = False
        cls = classes[int(rng.integers(0, len(classes)))]
        states = {}
        for t in np.nonzero(presence)[0]:
            position = Point3(
                float(rng.uniform(-spread, spread)),
                float(rng.uniform(-0.5, 0.5)),
                float(rng.uniform(0.3, spread)),
            )
            states[int(t)] = AgentFrameState(
                position=position, appearance=rng.normal(0.0, 1.0, feature_dim)
            )
        scenario_agents.append(
            ScenarioAgent(
                tracklet=Tracklet(agent_id=agent_id, agent_class=cls, presence=presence),
                states=states,
            )
        )
    if label is None:
        label = "Stop" if rng.random() < 0.5 else "Go"
    scenario = Scenario(
        gamma=gamma,
        fps=3.0,
        intrinsics=CameraIntrinsics(180.0, 180.0, 178.0, 100.0),
        agents=tuple(scenario_agents),
        context=rng.normal(0.0, 0.1, (gamma, feature_dim)),
        ego_feature=rng.normal(0.0, 1.0, feature_dim),
        label=label,
    )
    scenario.validate()
    return scenario


def _split_counts(n: int, splits: dict[str, float]) -> dict[str, int]:
    names = list(splits)
    counts = {name: int(math.floor(n * splits[name])) for name in names}
    short = n - sum(counts.values())
    for name in names:
        if short == 0:
            break
        counts[name] += 1
        short -= 1
    return counts


def generate_dataset(cfg: GeneratorConfig, n: int, seed: int, out_dir) -> DatasetManifest:
    """Write n scenario files plus a manifest; per-scenario seeds are seed+index."""
    cfg.validate()
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(n):
        s = generate_scenario(cfg, seed + i)
        name = f"scenario_{i:05d}.json"
        save_scenario(s, out / name)
        names.append(name)
    counts = _split_counts(n, cfg.splits)
    splits: dict[str, tuple[str, ...]] = {}
    start = 0
    for split_name, count in counts.items():
        splits[split_name] = tuple(names[start : start + count])
        start += count
    manifest = DatasetManifest(seed=seed, config_digest=cfg.digest(), splits=splits)
    save_manifest(manifest, out / "manifest.json")
    return manifest
