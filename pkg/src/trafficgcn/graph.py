"""Interaction-graph construction: parameterized edges over agents plus ego.

An adjacency frame couples every pair of present nodes through three
factors: a hard distance gate, a learned nonnegative positional relation
(vulnerability-indexed position embeddings, Fourier-lifted, linearly read
out), and the exponential of a directional appearance relation. Each row of
a frame is normalized to sum to one over the surviving entries; rows whose
numerator vanishes entirely fall back to a pure self connection so the
tensor stays row-stochastic.

The math lives in tape-level helpers (`adjacency_tape` and friends) so the
classifier can differentiate through edge construction; the public
functions below run the same code with recording disabled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ConfigError
from .geometry import Point3
from .scenario import Scenario, fuse_context


@dataclass
class EdgeParams:
    """Parameters of the interaction-edge model.

    phi/omega hold one (D, C) appearance projection pair per network layer;
    theta_w/theta_b hold the two position embedders indexed by vulnerability
    flag; fourier_b is sampled once at initialization and never trained.
    """

    phi: list[np.ndarray]  # L x (D, C)
    omega: list[np.ndarray]  # L x (D, C)
    theta_w: np.ndarray  # (2, 3, d)
    theta_b: np.ndarray  # (2, d)
    w_p: np.ndarray  # (2k,)
    fourier_b: np.ndarray  # (k, d)
    embed_dim: int = 256
    pos_dim: int = 5
    fourier_dim: int = 30
    sigma: float = 10.0
    mu: float = 3.0

    @property
    def num_layers(self) -> int:
        return len(self.phi)


@dataclass(frozen=True)
class NodeSet:
    """Per-scenario node attributes with the ego at node index 0."""

    agent_ids: tuple[int, ...]  # ids of nodes 1..K, in scenario order
    vulnerability: np.ndarray  # (K+1,) float 0/1; ego is 0
    present: np.ndarray  # (gamma, K+1) bool; ego column all True
    positions: np.ndarray  # (gamma, K+1, 3); zero where absent
    features: np.ndarray  # (gamma, K+1, F) fused input features

    @property
    def num_nodes(self) -> int:
        return len(self.agent_ids) + 1


@dataclass(frozen=True)
class AdjacencyTensor:
    """Stacked per-frame interaction matrices plus the validity mask."""

    values: np.ndarray  # (gamma, K+1, K+1)
    valid: np.ndarray  # (gamma, K+1) bool
    agent_ids: tuple[int, ...]


def node_set_from_scenario(scenario: Scenario) -> NodeSet:
    """Assemble node attributes: context-fused agents plus the injected ego."""
    gamma = scenario.gamma
    n = len(scenario.agents) + 1
    feature_dim = scenario.feature_dim
    vulnerability = np.zeros(n)
    present = np.zeros((gamma, n), dtype=bool)
    present[:, 0] = True  # ego
    positions = np.zeros((gamma, n, 3))
    features = np.zeros((gamma, n, feature_dim))
    features[:, 0, :] = scenario.ego_feature
    for j, agent in enumerate(scenario.agents, start=1):
        vulnerability[j] = agent.tracklet.agent_class.vulnerability
        for t, st in agent.states.items():
            present[t, j] = True
            positions[t, j] = st.position.as_array()
            features[t, j] = fuse_context(st.appearance, scenario.context[t])
    return NodeSet(
        agent_ids=scenario.agent_ids,
        vulnerability=vulnerability,
        present=present,
        positions=positions,
        features=features,
    )


def distance_gate(positions: np.ndarray, present: np.ndarray, mu: float) -> np.ndarray:
    """(gamma, n, n) 0/1 mask: both nodes present and within mu (inclusive)."""
    if not mu > 0:
        raise ConfigError(f"distance threshold mu must be positive, got {mu}")
    diff = positions[:, :, None, :] - positions[:, None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    gate = (dist <= mu) & present[:, :, None] & present[:, None, :]
    return gate.astype(np.float64)


# ---------------------------------------------------------------------------
# tape-level builders (differentiable)


def fourier_tape(v: Tensor, fourier_b: np.ndarray) -> Tensor:
    """Gaussian Fourier lift of row vectors: (..., d) -> (..., 2k)."""
    ang = ad.matmul(ad.mul(v, 2.0 * math.pi), Tensor(fourier_b.T))
    return ad.concat([ad.cos(ang), ad.sin(ang)], axis=-1)


def positional_relations_tape(
    positions: np.ndarray,
    vulnerability: np.ndarray,
    theta_w: Tensor,
    theta_b: Tensor,
    w_p: Tensor,
    fourier_b: np.ndarray,
) -> Tensor:
    """All pairwise positional relations for a clip: (gamma, n, n)."""
    gamma, n, _ = positions.shape
    d = fourier_b.shape[1]
    flat = Tensor(positions.reshape(gamma * n, 3))
    emb0 = ad.add(ad.matmul(flat, theta_w[0]), theta_b[0])
    emb1 = ad.add(ad.matmul(flat, theta_w[1]), theta_b[1])
    vuln = vulnerability.reshape(1, n, 1)
    emb0 = ad.reshape(emb0, (gamma, n, d))
    emb1 = ad.reshape(emb1, (gamma, n, d))
    emb = ad.add(ad.mul(emb1, vuln), ad.mul(emb0, 1.0 - vuln))
    pair = ad.add(ad.reshape(emb, (gamma, n, 1, d)), ad.reshape(emb, (gamma, 1, n, d)))
    lifted = fourier_tape(ad.reshape(pair, (gamma * n * n, d)), fourier_b)
    k2 = fourier_b.shape[0] * 2
    scores = ad.matmul(lifted, ad.reshape(w_p, (k2, 1)))
    return ad.reshape(ad.relu(scores), (gamma, n, n))


def appearance_relations_tape(features: Tensor, phi: Tensor, omega: Tensor) -> Tensor:
    """All pairwise scaled dot products for a clip: (gamma, n, n)."""
    gamma, n, c = features.shape
    embed_dim = phi.shape[0]
    flat = ad.reshape(features, (gamma * n, c))
    left = ad.reshape(ad.matmul(flat, ad.transpose(phi, (1, 0))), (gamma, n, embed_dim))
    right = ad.reshape(ad.matmul(flat, ad.transpose(omega, (1, 0))), (gamma, n, embed_dim))
    raw = ad.matmul(left, ad.transpose(right, (0, 2, 1)))
    return ad.mul(raw, 1.0 / math.sqrt(embed_dim))


def normalize_adjacency_tape(gate: np.ndarray, f_p: Tensor, f_a: Tensor, present: np.ndarray) -> Tensor:
    """Combine gate, positional and appearance relations into row-stochastic
    frames; the gate, the row-max shift, and the all-zero-row fallback are
    constant structure that gradients do not flow through."""
    row_max = f_a.value.max(axis=-1, keepdims=True)  # detached; exact by shift invariance
    numer = ad.mul(ad.mul(ad.exp(ad.sub(f_a, row_max)), f_p), gate)
    denom = ad.tensor_sum(numer, axis=-1, keepdims=True)
    row_ok = (denom.value > 0) & present[:, :, None]
    safe = ad.add(denom, (~row_ok).astype(np.float64))
    normalized = ad.mul(ad.div(numer, safe), row_ok.astype(np.float64))
    fallback = np.zeros(gate.shape)
    t_idx, i_idx = np.nonzero(present & ~row_ok[:, :, 0])
    fallback[t_idx, i_idx, i_idx] = 1.0
    return ad.add(normalized, fallback)


def adjacency_tape(
    features: Tensor,
    nodes: NodeSet,
    f_p: Tensor,
    gate: np.ndarray,
    phi: Tensor,
    omega: Tensor,
) -> Tensor:
    f_a = appearance_relations_tape(features, phi, omega)
    return normalize_adjacency_tape(gate, f_p, f_a, nodes.present)


# ---------------------------------------------------------------------------
# public value-level operations


def fourier_map(v, fourier_b) -> np.ndarray:
    """gamma(v) = [cos(2 pi B v); sin(2 pi B v)] for one vector or rows of them."""
    v = np.asarray(v, dtype=np.float64)
    b = np.asarray(fourier_b, dtype=np.float64)
    if b.ndim != 2:
        raise ValueError(f"fourier matrix must be 2-D, got shape {b.shape}")
    if v.shape[-1] != b.shape[1]:
        raise ValueError(f"input dimension {v.shape[-1]} does not match fourier matrix {b.shape}")
    single = v.ndim == 1
    with ad.no_grad():
        out = fourier_tape(Tensor(v.reshape(-1, b.shape[1])), b).value
    return out[0] if single else out.reshape(v.shape[:-1] + (2 * b.shape[0],))


def _theta_embed(p: np.ndarray, m: int, params: EdgeParams) -> np.ndarray:
    return p @ params.theta_w[m] + params.theta_b[m]


def positional_relation(p_i, m_i: int, p_j, m_j: int, params: EdgeParams) -> float:
    """ReLU(W_p . gamma(theta_{m_i}(p_i) + theta_{m_j}(p_j)))."""
    pi = p_i.as_array() if isinstance(p_i, Point3) else np.asarray(p_i, dtype=np.float64)
    pj = p_j.as_array() if isinstance(p_j, Point3) else np.asarray(p_j, dtype=np.float64)
    lifted = fourier_map(_theta_embed(pi, m_i, params) + _theta_embed(pj, m_j, params), params.fourier_b)
    return float(max(lifted @ params.w_p, 0.0))


def appearance_relation(a_i, a_j, phi: np.ndarray, omega: np.ndarray) -> float:
    """Scaled dot product (phi a_i) . (omega a_j) / sqrt(D); directional."""
    a_i = np.asarray(a_i, dtype=np.float64)
    a_j = np.asarray(a_j, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    if phi.shape != omega.shape:
        raise ValueError(f"phi/omega shape mismatch: {phi.shape} vs {omega.shape}")
    if a_i.shape != (phi.shape[1],) or a_j.shape != (omega.shape[1],):
        raise ValueError(
            f"feature shapes {a_i.shape}/{a_j.shape} incompatible with projections {phi.shape}"
        )
    return float((phi @ a_i) @ (omega @ a_j) / math.sqrt(phi.shape[0]))


def adjacency_from_relations(gate, f_p, f_a, present) -> np.ndarray:
    """Row-normalize one frame (2-D inputs) or a stack of frames (3-D)."""
    gate = np.asarray(gate, dtype=np.float64)
    single = gate.ndim == 2
    gate3 = gate[None] if single else gate
    f_p3 = np.asarray(f_p, dtype=np.float64)
    f_a3 = np.asarray(f_a, dtype=np.float64)
    present3 = np.asarray(present, dtype=bool)
    if single:
        f_p3, f_a3, present3 = f_p3[None], f_a3[None], present3[None]
    with ad.no_grad():
        out = normalize_adjacency_tape(gate3, Tensor(f_p3), Tensor(f_a3), present3).value
    return out[0] if single else out


def _layer_projections(params: EdgeParams, layer: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0 <= layer < params.num_layers:
        raise ConfigError(f"layer index {layer} out of range for {params.num_layers} layers")
    return params.phi[layer], params.omega[layer]


def build_adjacency(nodes: NodeSet, features: np.ndarray, params: EdgeParams, layer: int = 0) -> AdjacencyTensor:
    """Interaction tensor for a whole clip from the given layer features."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[:2] != nodes.present.shape:
        raise ValueError(
            f"feature tensor shape {features.shape} does not match node set {nodes.present.shape}"
        )
    phi, omega = _layer_projections(params, layer)
    gate = distance_gate(nodes.positions, nodes.present, params.mu)
    with ad.no_grad():
        f_p = positional_relations_tape(
            nodes.positions,
            nodes.vulnerability,
            Tensor(params.theta_w),
            Tensor(params.theta_b),
            Tensor(params.w_p),
            params.fourier_b,
        )
        values = adjacency_tape(Tensor(features), nodes, f_p, gate, Tensor(phi), Tensor(omega)).value
    return AdjacencyTensor(values=values, valid=nodes.present.copy(), agent_ids=nodes.agent_ids)


def build_adjacency_frame(
    nodes: NodeSet, t: int, features_t: np.ndarray, params: EdgeParams, layer: int = 0
) -> np.ndarray:
    """One frame's (K+1, K+1) interaction matrix from that frame's features."""
    if not 0 <= t < nodes.present.shape[0]:
        raise ValueError(f"frame index {t} out of range")
    frame_nodes = NodeSet(
        agent_ids=nodes.agent_ids,
        vulnerability=nodes.vulnerability,
        present=nodes.present[t : t + 1],
        positions=nodes.positions[t : t + 1],
        features=nodes.features[t : t + 1],
    )
    features_t = np.asarray(features_t, dtype=np.float64)
    return build_adjacency(frame_nodes, features_t[None], params, layer).values[0]


def ego_interaction_profile(adjacency: AdjacencyTensor) -> dict[int, float]:
    """Mean ego-row edge weight per agent over the agent's present frames."""
    profile: dict[int, float] = {}
    for j, agent_id in enumerate(adjacency.agent_ids, start=1):
        frames = np.nonzero(adjacency.valid[:, j])[0]
        profile[agent_id] = float(adjacency.values[frames, 0, j].mean()) if frames.size else 0.0
    return profile
