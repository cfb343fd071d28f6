"""Spatio-temporal graph convolutional classifier over interaction graphs.

Forward pass per clip: fuse scene context into each agent's appearance,
inject the ego node, project to the hidden width, then for every layer
rebuild the interaction adjacency from the current features, aggregate
spatially (Eq.-style ``ReLU(G X W_a)`` with pre-activation normalization),
and convolve temporally with vulnerability-split kernels plus a residual.
A masked mean pool over valid node-frames feeds one affine classifier and
a softmax.

Everything is differentiable through the adjacency construction (the
distance gate, tracklet mask, and all-zero-row fallback are constant
structure); `grad_check` verifies the analytic gradients against central
finite differences.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import (
    ConfigError,
    ModelFormatError,
    NumericError,
    TrainingDivergedError,
)
from .graph import (
    AdjacencyTensor,
    EdgeParams,
    NodeSet,
    adjacency_tape,
    distance_gate,
    node_set_from_scenario,
    positional_relations_tape,
)
from .scenario import Scenario

MODEL_SCHEMA_VERSION = 1
_BN_EPS = 1e-5


@dataclass
class ModelConfig:
    """Architecture hyperconstants; defaults are desk scale except where the
    edge model dimensions follow the standard choices (D=256, d=5, k=30,
    sigma=10, mu=3)."""

    num_classes: int = 2
    class_names: tuple[str, ...] = ("Go", "Stop")
    feature_dim: int = 16  # F: input feature width
    hidden_dim: int = 16  # C: per-layer channel width
    num_layers: int = 3  # L
    tau: int = 3  # temporal kernel span, odd
    embed_dim: int = 256  # D: appearance embedding width
    pos_dim: int = 5  # d: position embedding width
    fourier_dim: int = 30  # k: Fourier feature count
    sigma: float = 10.0
    mu: float = 3.0
    normalization: str = "batch"  # "batch" | "none"

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if len(self.class_names) != self.num_classes:
            raise ConfigError(
                f"class_names {self.class_names} does not match num_classes={self.num_classes}"
            )
        if len(set(self.class_names)) != self.num_classes:
            raise ConfigError("class_names must be distinct")
        for name in ("feature_dim", "hidden_dim", "num_layers", "pos_dim", "fourier_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be >= 1")
        if self.tau < 1 or self.tau % 2 == 0:
            raise ConfigError(f"tau must be odd so the temporal kernel is centered, got {self.tau}")
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        if self.mu <= 0:
            raise ConfigError("mu must be positive")
        if self.normalization not in ("batch", "none"):
            raise ConfigError(f"unknown normalization mode {self.normalization!r}")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "class_names": list(self.class_names),
            "feature_dim": self.feature_dim,
            "hidden_dim": self.hidden_dim,
            "num_layers": self.num_layers,
            "tau": self.tau,
            "embed_dim": self.embed_dim,
            "pos_dim": self.pos_dim,
            "fourier_dim": self.fourier_dim,
            "sigma": self.sigma,
            "mu": self.mu,
            "normalization": self.normalization,
        }

    @staticmethod
    def from_dict(data: dict) -> "ModelConfig":
        known = set(ModelConfig.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        kwargs = dict(data)
        if "class_names" in kwargs:
            kwargs["class_names"] = tuple(kwargs["class_names"])
        cfg = ModelConfig(**kwargs)
        cfg.validate()
        return cfg


@dataclass
class TrainConfig:
    """Optimizer and loop settings; Adam with the usual defaults, lr 0.001."""

    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 50
    batch_size: int = 8
    seed: int = 0
    loss: str = "cross_entropy"
    bn_momentum: float = 0.1

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("moment decays must lie in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.loss != "cross_entropy":
            raise ConfigError(f"unsupported loss {self.loss!r}")
        if not 0 < self.bn_momentum <= 1:
            raise ConfigError("bn_momentum must be in (0, 1]")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "loss": self.loss,
            "bn_momentum": self.bn_momentum,
        }

    @staticmethod
    def from_dict(data: dict) -> "TrainConfig":
        known = set(TrainConfig.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown train config keys {sorted(unknown)}")
        cfg = TrainConfig(**data)
        cfg.validate()
        return cfg


@dataclass
class NormState:
    """One normalization layer: learned scale/shift plus running moments."""

    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray


@dataclass
class ModelParams:
    """All model state. `trainable()` exposes the tensors touched by the
    optimizer; the Fourier matrix and running moments are excluded."""

    config: ModelConfig
    seed: int
    w_in: np.ndarray  # (C, F)
    w_a: list[np.ndarray]  # L x (C, C)
    w_b: list[np.ndarray]  # L x (tau, 2, C, C)
    edge: EdgeParams
    norms_spatial: list[NormState]
    norms_temporal: list[NormState]
    w_fc: np.ndarray  # (num_classes, C)
    b_fc: np.ndarray  # (num_classes,)

    def trainable(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"w_in": self.w_in}
        for l in range(self.config.num_layers):
            out[f"layer{l}.w_a"] = self.w_a[l]
            out[f"layer{l}.w_b"] = self.w_b[l]
            out[f"layer{l}.phi"] = self.edge.phi[l]
            out[f"layer{l}.omega"] = self.edge.omega[l]
            if self.config.normalization == "batch":
                out[f"layer{l}.norm_spatial.scale"] = self.norms_spatial[l].scale
                out[f"layer{l}.norm_spatial.shift"] = self.norms_spatial[l].shift
                out[f"layer{l}.norm_temporal.scale"] = self.norms_temporal[l].scale
                out[f"layer{l}.norm_temporal.shift"] = self.norms_temporal[l].shift
        out["theta_w"] = self.edge.theta_w
        out["theta_b"] = self.edge.theta_b
        out["w_p"] = self.edge.w_p
        out["w_fc"] = self.w_fc
        out["b_fc"] = self.b_fc
        return out

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    def class_index(self, label: str) -> int:
        try:
            return self.config.class_names.index(label)
        except ValueError:
            raise ConfigError(
                f"label {label!r} is not one of the model classes {self.config.class_names}"
            ) from None


@dataclass
class OptimizerState:
    """Adam moment accumulators, keyed like `ModelParams.trainable()`."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_params(config: ModelConfig, seed: int) -> tuple[ModelParams, OptimizerState]:
    """Deterministic initialization: uniform weights scaled by 1/sqrt(fan_in),
    zero biases, unit normalization scales, frozen Gaussian Fourier matrix."""
    config.validate()
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        s = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-s, s, shape)

    c, f = config.hidden_dim, config.feature_dim
    d, k = config.pos_dim, config.fourier_dim
    w_in = uniform((c, f), f)
    w_a, w_b, phi, omega = [], [], [], []
    for _ in range(config.num_layers):
        w_a.append(uniform((c, c), c))
        w_b.append(uniform((config.tau, 2, c, c), c))
        phi.append(uniform((config.embed_dim, c), c))
        omega.append(uniform((config.embed_dim, c), c))
    theta_w = uniform((2, 3, d), 3)
    theta_b = np.zeros((2, d))
    w_p = uniform((2 * k,), 2 * k)
    w_fc = uniform((config.num_classes, c), c)
    b_fc = np.zeros(config.num_classes)
    fourier_b = rng.normal(0.0, config.sigma, (k, d))

    def norms():
        return [
            NormState(
                scale=np.ones(c), shift=np.zeros(c), running_mean=np.zeros(c), running_var=np.ones(c)
            )
            for _ in range(config.num_layers)
        ]

    params = ModelParams(
        config=config,
        seed=seed,
        w_in=w_in,
        w_a=w_a,
        w_b=w_b,
        edge=EdgeParams(
            phi=phi,
            omega=omega,
            theta_w=theta_w,
            theta_b=theta_b,
            w_p=w_p,
            fourier_b=fourier_b,
            embed_dim=config.embed_dim,
            pos_dim=d,
            fourier_dim=k,
            sigma=config.sigma,
            mu=config.mu,
        ),
        norms_spatial=norms(),
        norms_temporal=norms(),
        w_fc=w_fc,
        b_fc=b_fc,
    )
    return params, init_optimizer(params)


def init_optimizer(params: ModelParams) -> OptimizerState:
    zeros = {name: np.zeros_like(arr) for name, arr in params.trainable().items()}
    return OptimizerState(m=zeros, v={name: np.zeros_like(a) for name, a in zeros.items()}, step=0)


# ---------------------------------------------------------------------------
# forward machinery


@dataclass
class SceneInputs:
    """Precomputed constants of one scenario: node set, gate, masks, label."""

    nodes: NodeSet
    gate: np.ndarray  # (gamma, n, n)
    mask3: np.ndarray  # (gamma, n, 1)
    count: float  # valid node-frames
    label_index: int | None


def prepare_scenario(scenario: Scenario, config: ModelConfig, require_label: bool = False) -> SceneInputs:
    if scenario.feature_dim != config.feature_dim:
        raise ConfigError(
            f"scenario feature width {scenario.feature_dim} does not match model feature_dim {config.feature_dim}"
        )
    nodes = node_set_from_scenario(scenario)
    gate = distance_gate(nodes.positions, nodes.present, config.mu)
    mask3 = nodes.present.astype(np.float64)[:, :, None]
    label_index: int | None = None
    if scenario.label in config.class_names:
        label_index = config.class_names.index(scenario.label)
    elif require_label:
        raise ConfigError(
            f"label {scenario.label!r} is not one of the model classes {config.class_names}"
        )
    return SceneInputs(
        nodes=nodes, gate=gate, mask3=mask3, count=float(nodes.present.sum()), label_index=label_index
    )


def _make_leaves(params: ModelParams, trainable: bool) -> dict[str, Tensor]:
    make = ad.parameter if trainable else Tensor
    return {name: make(arr) for name, arr in params.trainable().items()}


def _log_softmax(logits: Tensor) -> Tensor:
    shifted = ad.sub(logits, float(logits.value.max()))
    return ad.sub(shifted, ad.log(ad.tensor_sum(ad.exp(shifted))))


def _batch_norm(
    ss: list[Tensor],
    inputs: list[SceneInputs],
    scale: Tensor,
    shift: Tensor,
    state: NormState,
    train: bool,
    stats_out: list | None,
    name: str,
) -> list[Tensor]:
    """Per-channel normalization over all valid node-frames of the batch.
    Absent node-frames are excluded from the statistics; callers re-zero
    them right after the following activation."""
    if train:
        count = sum(float(sc.mask3.sum()) for sc in inputs)
        total = None
        for s, sc in zip(ss, inputs):
            part = ad.tensor_sum(ad.mul(s, sc.mask3), axis=(0, 1))
            total = part if total is None else ad.add(total, part)
        mean = ad.mul(total, 1.0 / count)
        var_total = None
        for s, sc in zip(ss, inputs):
            diff = ad.sub(s, mean)
            part = ad.tensor_sum(ad.mul(ad.mul(diff, diff), sc.mask3), axis=(0, 1))
            var_total = part if var_total is None else ad.add(var_total, part)
        var = ad.mul(var_total, 1.0 / count)
        if stats_out is not None:
            stats_out.append((name, mean.value.copy(), var.value.copy(), count))
        inv = ad.div(1.0, ad.sqrt(ad.add(var, _BN_EPS)))
    else:
        mean = Tensor(state.running_mean)
        inv = Tensor(1.0 / np.sqrt(state.running_var + _BN_EPS))
    return [ad.add(ad.mul(ad.mul(ad.sub(s, mean), inv), scale), shift) for s in ss]


def _forward_tape(
    inputs: list[SceneInputs],
    leaves: dict[str, Tensor],
    params: ModelParams,
    train: bool,
    collect_adjacency: bool = False,
):
    """Run the full pipeline on a batch; returns (logprob tensors,
    layer-1 adjacency values when requested, batch normalization stats)."""
    cfg = params.config
    c, tau, half = cfg.hidden_dim, cfg.tau, cfg.tau // 2
    use_bn = cfg.normalization == "batch"

    xs = []
    for sc in inputs:
        gamma, n, f = sc.nodes.features.shape
        flat = Tensor(sc.nodes.features.reshape(gamma * n, f))
        xs.append(ad.reshape(ad.matmul(flat, ad.transpose(leaves["w_in"], (1, 0))), (gamma, n, c)))

    # positional relations and the gate depend only on static positions:
    # computed once and shared by every layer
    fps = [
        positional_relations_tape(
            sc.nodes.positions,
            sc.nodes.vulnerability,
            leaves["theta_w"],
            leaves["theta_b"],
            leaves["w_p"],
            params.edge.fourier_b,
        )
        for sc in inputs
    ]

    adj1: list[np.ndarray] = []
    stats: list = []
    for l in range(cfg.num_layers):
        phi, omega = leaves[f"layer{l}.phi"], leaves[f"layer{l}.omega"]
        gs = []
        for bi, sc in enumerate(inputs):
            g = adjacency_tape(xs[bi], sc.nodes, fps[bi], sc.gate, phi, omega)
            if l == 0 and collect_adjacency:
                adj1.append(g.value.copy())
            gs.append(g)

        ss = []
        for bi, sc in enumerate(inputs):
            gx = ad.matmul(gs[bi], xs[bi])
            gamma, n, _ = gx.shape
            ss.append(
                ad.reshape(ad.matmul(ad.reshape(gx, (gamma * n, c)), leaves[f"layer{l}.w_a"]), (gamma, n, c))
            )
        if use_bn:
            ss = _batch_norm(
                ss,
                inputs,
                leaves[f"layer{l}.norm_spatial.scale"],
                leaves[f"layer{l}.norm_spatial.shift"],
                params.norms_spatial[l],
                train,
                stats,
                f"layer{l}.norm_spatial",
            )
        xp = [ad.mul(ad.relu(s), sc.mask3) for s, sc in zip(ss, inputs)]

        w_b = leaves[f"layer{l}.w_b"]
        ts = []
        for bi, sc in enumerate(inputs):
            gamma, n, _ = xp[bi].shape
            vuln = sc.nodes.vulnerability.reshape(1, n, 1)
            acc = None
            for o in range(tau):
                shifted = ad.time_shift(xp[bi], o - half)
                flat = ad.reshape(shifted, (gamma * n, c))
                plain = ad.reshape(ad.matmul(flat, w_b[o, 0]), (gamma, n, c))
                vulnerable = ad.reshape(ad.matmul(flat, w_b[o, 1]), (gamma, n, c))
                term = ad.add(ad.mul(vulnerable, vuln), ad.mul(plain, 1.0 - vuln))
                acc = term if acc is None else ad.add(acc, term)
            ts.append(acc)
        if use_bn:
            ts = _batch_norm(
                ts,
                inputs,
                leaves[f"layer{l}.norm_temporal.scale"],
                leaves[f"layer{l}.norm_temporal.shift"],
                params.norms_temporal[l],
                train,
                stats,
                f"layer{l}.norm_temporal",
            )
        xs = [
            ad.mul(ad.relu(ad.add(t, x)), sc.mask3) for t, x, sc in zip(ts, xs, inputs)
        ]

    logprobs = []
    for bi, sc in enumerate(inputs):
        pooled = ad.mul(ad.tensor_sum(xs[bi], axis=(0, 1)), 1.0 / sc.count)
        logits = ad.add(
            ad.reshape(
                ad.matmul(ad.reshape(pooled, (1, c)), ad.transpose(leaves["w_fc"], (1, 0))),
                (cfg.num_classes,),
            ),
            leaves["b_fc"],
        )
        logprobs.append(_log_softmax(logits))
    return logprobs, adj1, stats


@dataclass
class ForwardResult:
    probs: np.ndarray
    layer1_adjacency: AdjacencyTensor


def forward(scenario: Scenario, params: ModelParams, mode: str = "eval") -> np.ndarray:
    """Class probabilities for one scenario; deterministic in eval mode."""
    return forward_detailed(scenario, params, mode).probs


def forward_detailed(scenario: Scenario, params: ModelParams, mode: str = "eval") -> ForwardResult:
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    sc = prepare_scenario(scenario, params.config)
    with ad.no_grad():
        leaves = _make_leaves(params, trainable=False)
        logprobs, adj1, _ = _forward_tape([sc], leaves, params, mode == "train", collect_adjacency=True)
    probs = np.exp(logprobs[0].value)
    if not np.all(np.isfinite(probs)):
        raise NumericError("forward pass produced non-finite probabilities")
    adjacency = AdjacencyTensor(values=adj1[0], valid=sc.nodes.present.copy(), agent_ids=sc.nodes.agent_ids)
    return ForwardResult(probs=probs, layer1_adjacency=adjacency)


# ---------------------------------------------------------------------------
# reference single-step operations


def spatial_conv(g_t: np.ndarray, x_t: np.ndarray, w_a: np.ndarray) -> np.ndarray:
    """One frame of spatial aggregation: ReLU(G X W_a)."""
    g_t, x_t, w_a = (np.asarray(a, dtype=np.float64) for a in (g_t, x_t, w_a))
    if g_t.shape[1] != x_t.shape[0] or x_t.shape[1] != w_a.shape[0]:
        raise ValueError(f"shape mismatch: G {g_t.shape}, X {x_t.shape}, W_a {w_a.shape}")
    return np.maximum(g_t @ x_t @ w_a, 0.0)


def _shift_frames(x: np.ndarray, offset: int) -> np.ndarray:
    out = np.zeros_like(x)
    n = x.shape[0]
    if offset >= 0:
        if offset < n:
            out[: n - offset] = x[offset:]
    elif -offset < n:
        out[-offset:] = x[: n + offset]
    return out


def temporal_conv(
    xp: np.ndarray,
    kernels: np.ndarray,
    vulnerability: np.ndarray,
    residual: np.ndarray,
    present: np.ndarray | None = None,
) -> np.ndarray:
    """Vulnerability-split temporal convolution with residual:
    ReLU(sum_i x[t+i] W_b[i][m] + residual[t]), zero padded in time."""
    xp = np.asarray(xp, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    residual = np.asarray(residual, dtype=np.float64)
    if xp.ndim != 3 or xp.shape[0] < 1:
        raise ValueError(f"expected (gamma, nodes, channels) features, got shape {xp.shape}")
    tau = kernels.shape[0]
    if tau % 2 == 0:
        raise ValueError(f"temporal span must be odd, got {tau}")
    vuln = np.asarray(vulnerability, dtype=np.float64).reshape(1, -1, 1)
    acc = np.zeros_like(xp)
    half = tau // 2
    for o in range(tau):
        shifted = _shift_frames(xp, o - half)
        acc += (shifted @ kernels[o, 1]) * vuln + (shifted @ kernels[o, 0]) * (1.0 - vuln)
    out = np.maximum(acc + residual, 0.0)
    if present is not None:
        out = out * np.asarray(present, dtype=np.float64)[:, :, None]
    return out


def loss(probs: np.ndarray, label: int) -> float:
    """Cross-entropy -log p[label], clamped at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < probs.shape[0]:
        raise ConfigError(f"label {label} out of range for {probs.shape[0]} classes")
    return float(-math.log(max(probs[label], 1e-12)))


# ---------------------------------------------------------------------------
# gradients


def backward(scenario: Scenario, params: ModelParams, label: int) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients of the training-mode cross-entropy loss
    with respect to every trainable tensor."""
    if not 0 <= label < params.config.num_classes:
        raise ConfigError(f"label {label} out of range for {params.config.num_classes} classes")
    sc = prepare_scenario(scenario, params.config)
    leaves = _make_leaves(params, trainable=True)
    logprobs, _, _ = _forward_tape([sc], leaves, params, train=True)
    nll = ad.mul(logprobs[0][label], -1.0)
    if not np.isfinite(nll.value):
        raise NumericError("loss is non-finite before backward")
    ad.backward(nll)
    grads = {
        name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
        for name, leaf in leaves.items()
    }
    bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NumericError(f"non-finite gradient in tensors {bad}")
    return grads


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients against central differences."""

    passed: bool
    tolerance: float
    step: float
    max_rel_error: float
    worst_tensor: str | None
    checked_coords: int
    skipped_kink_coords: int
    per_tensor: dict[str, float] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "passed": self.passed,
            "tolerance": self.tolerance,
            "step": self.step,
            "max_rel_error": self.max_rel_error,
            "worst_tensor": self.worst_tensor,
            "checked_coords": self.checked_coords,
            "skipped_kink_coords": self.skipped_kink_coords,
            "per_tensor": self.per_tensor,
        }


def grad_check(
    params: ModelParams,
    scenario: Scenario,
    h: float = 1e-5,
    tol: float = 1e-4,
    sample: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare `backward` with central finite differences, coordinate by
    coordinate. Coordinates whose +/-h evaluations land on different sides
    of any ReLU kink are skipped and counted, since the loss is not
    differentiable there."""
    label = params.class_index(scenario.label)
    analytic = backward(scenario, params, label)
    work = params.copy()
    tensors = work.trainable()
    sc = prepare_scenario(scenario, work.config)
    rng = np.random.default_rng(seed)

    def eval_loss():
        trace: list[np.ndarray] = []
        with ad.no_grad(), ad.relu_trace(trace):
            leaves = _make_leaves(work, trainable=False)
            logprobs, _, _ = _forward_tape([sc], leaves, work, train=True)
        return -float(logprobs[0].value[label]), [a > 0 for a in trace]

    max_rel, worst = 0.0, None
    checked, skipped = 0, 0
    per_tensor: dict[str, float] = {}
    for name, arr in tensors.items():
        flat = arr.reshape(-1)
        size = flat.shape[0]
        if sample is not None and sample < size:
            coords = np.sort(rng.choice(size, size=sample, replace=False))
        else:
            coords = np.arange(size)
        tensor_max = 0.0
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + h
            loss_p, signs_p = eval_loss()
            flat[idx] = orig - h
            loss_m, signs_m = eval_loss()
            flat[idx] = orig
            if any(not np.array_equal(a, b) for a, b in zip(signs_p, signs_m)):
                skipped += 1
                continue
            # a loss difference of a few ulps is rounding flutter, not signal;
            # below that resolution the central difference reads exactly zero
            noise = 8.0 * np.finfo(np.float64).eps * max(abs(loss_p), abs(loss_m))
            fd = 0.0 if abs(loss_p - loss_m) <= noise else (loss_p - loss_m) / (2.0 * h)
            ga = float(analytic[name].reshape(-1)[idx])
            rel = abs(ga - fd) / max(abs(ga), abs(fd), 1e-8)
            checked += 1
            tensor_max = max(tensor_max, rel)
            if rel > max_rel:
                max_rel, worst = rel, name
        per_tensor[name] = tensor_max
    return GradCheckReport(
        passed=max_rel < tol,
        tolerance=tol,
        step=h,
        max_rel_error=max_rel,
        worst_tensor=worst,
        checked_coords=checked,
        skipped_kink_coords=skipped,
        per_tensor=per_tensor,
    )


# ---------------------------------------------------------------------------
# optimization


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    config: TrainConfig,
) -> tuple[ModelParams, OptimizerState]:
    """One bias-corrected Adam update; returns fresh params and state."""
    new_params = params.copy()
    tensors = new_params.trainable()
    if set(grads) != set(tensors):
        raise ConfigError("gradient keys do not match trainable tensors")
    step = state.step + 1
    new_m, new_v = {}, {}
    for name, arr in tensors.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != arr.shape:
            raise ConfigError(f"gradient shape {g.shape} does not match {name} {arr.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        m = config.beta1 * state.m[name] + (1.0 - config.beta1) * g
        v = config.beta2 * state.v[name] + (1.0 - config.beta2) * g * g
        m_hat = m / (1.0 - config.beta1**step)
        v_hat = v / (1.0 - config.beta2**step)
        arr -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
        new_m[name], new_v[name] = m, v
    return new_params, OptimizerState(m=new_m, v=new_v, step=step)


def _apply_norm_updates(params: ModelParams, stats: list, momentum: float) -> None:
    by_name: dict[str, NormState] = {}
    for l in range(params.config.num_layers):
        if params.config.normalization == "batch":
            by_name[f"layer{l}.norm_spatial"] = params.norms_spatial[l]
            by_name[f"layer{l}.norm_temporal"] = params.norms_temporal[l]
    for name, mean, var, count in stats:
        st = by_name[name]
        unbiased = var * (count / (count - 1.0)) if count > 1 else var
        st.running_mean = (1.0 - momentum) * st.running_mean + momentum * mean
        st.running_var = (1.0 - momentum) * st.running_var + momentum * unbiased


def _ordered_map(fn, items, threads: int = 1):
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def evaluate(scenarios, params: ModelParams, threads: int = 1) -> dict:
    """Eval-mode loss/accuracy over labeled scenarios."""
    if not scenarios:
        raise ConfigError("cannot evaluate an empty scenario list")
    labels = [params.class_index(s.label) for s in scenarios]
    probs = _ordered_map(lambda s: forward(s, params, mode="eval"), list(scenarios), threads)
    losses = [loss(p, y) for p, y in zip(probs, labels)]
    hits = [int(np.argmax(p)) == y for p, y in zip(probs, labels)]
    return {
        "loss": float(np.mean(losses)),
        "accuracy": float(np.mean(hits)),
        "count": len(scenarios),
    }


def train(
    train_scenarios,
    model_config: ModelConfig,
    train_config: TrainConfig,
    val_scenarios=(),
) -> tuple[ModelParams, OptimizerState, list[dict]]:
    """Seeded mini-batch training; history carries per-epoch metrics."""
    model_config.validate()
    train_config.validate()
    if not train_scenarios:
        raise ConfigError("training split is empty")
    if model_config.normalization == "batch" and train_config.batch_size < 2:
        raise ConfigError("batch_size must be >= 2 when batch statistics are used")
    params, state = init_params(model_config, train_config.seed)
    inputs = [prepare_scenario(s, model_config, require_label=True) for s in train_scenarios]
    rng = np.random.default_rng(train_config.seed)
    history: list[dict] = []
    n = len(inputs)
    for epoch in range(train_config.epochs):
        order = rng.permutation(n)
        total_loss, correct = 0.0, 0
        for start in range(0, n, train_config.batch_size):
            batch = [inputs[i] for i in order[start : start + train_config.batch_size]]
            leaves = _make_leaves(params, trainable=True)
            logprobs, _, stats = _forward_tape(batch, leaves, params, train=True)
            nll = None
            for lp, sc in zip(logprobs, batch):
                term = ad.mul(lp[sc.label_index], -1.0)
                nll = term if nll is None else ad.add(nll, term)
                total_loss += -float(lp.value[sc.label_index])
                correct += int(np.argmax(lp.value)) == sc.label_index
            mean_nll = ad.mul(nll, 1.0 / len(batch))
            if not np.isfinite(mean_nll.value):
                raise TrainingDivergedError(f"training loss became non-finite at epoch {epoch}")
            ad.backward(mean_nll)
            grads = {
                name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
                for name, leaf in leaves.items()
            }
            params, state = adam_step(params, grads, state, train_config)
            _apply_norm_updates(params, stats, train_config.bn_momentum)
        entry = {
            "epoch": epoch,
            "train_loss": total_loss / n,
            "train_accuracy": correct / n,
        }
        if val_scenarios:
            val = evaluate(val_scenarios, params)
            entry["val_loss"] = val["loss"]
            entry["val_accuracy"] = val["accuracy"]
        history.append(entry)
    return params, state, history


# ---------------------------------------------------------------------------
# serialization


def _expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    c, f = config.hidden_dim, config.feature_dim
    d, k = config.pos_dim, config.fourier_dim
    shapes: dict[str, tuple[int, ...]] = {"w_in": (c, f)}
    for l in range(config.num_layers):
        shapes[f"layer{l}.w_a"] = (c, c)
        shapes[f"layer{l}.w_b"] = (config.tau, 2, c, c)
        shapes[f"layer{l}.phi"] = (config.embed_dim, c)
        shapes[f"layer{l}.omega"] = (config.embed_dim, c)
        if config.normalization == "batch":
            for stage in ("norm_spatial", "norm_temporal"):
                shapes[f"layer{l}.{stage}.scale"] = (c,)
                shapes[f"layer{l}.{stage}.shift"] = (c,)
                shapes[f"layer{l}.{stage}.running_mean"] = (c,)
                shapes[f"layer{l}.{stage}.running_var"] = (c,)
    shapes["theta_w"] = (2, 3, d)
    shapes["theta_b"] = (2, d)
    shapes["w_p"] = (2 * k,)
    shapes["w_fc"] = (config.num_classes, c)
    shapes["b_fc"] = (config.num_classes,)
    shapes["fourier_b"] = (k, d)
    return shapes


def _all_tensors(params: ModelParams) -> dict[str, np.ndarray]:
    out = dict(params.trainable())
    if params.config.normalization == "batch":
        for l in range(params.config.num_layers):
            out[f"layer{l}.norm_spatial.running_mean"] = params.norms_spatial[l].running_mean
            out[f"layer{l}.norm_spatial.running_var"] = params.norms_spatial[l].running_var
            out[f"layer{l}.norm_temporal.running_mean"] = params.norms_temporal[l].running_mean
            out[f"layer{l}.norm_temporal.running_var"] = params.norms_temporal[l].running_var
    out["fourier_b"] = params.edge.fourier_b
    return out


def model_to_dict(params: ModelParams) -> dict:
    tensors = _all_tensors(params)
    return {
        "schema_version": MODEL_SCHEMA_VERSION,
        "seed": params.seed,
        "config": params.config.to_dict(),
        "tensors": {name: tensors[name].tolist() for name in sorted(tensors)},
    }


def save_model(params: ModelParams, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(params), separators=(",", ":")) + "\n", encoding="utf-8")


def model_from_dict(data: dict, ctx: str = "model") -> ModelParams:
    if not isinstance(data, dict):
        raise ModelFormatError(f"{ctx}: top level must be a JSON object")
    if data.get("schema_version") != MODEL_SCHEMA_VERSION:
        raise ModelFormatError(f"{ctx}: unsupported schema_version {data.get('schema_version')!r}")
    try:
        config = ModelConfig.from_dict(data["config"])
    except KeyError:
        raise ModelFormatError(f"{ctx}: missing required field 'config'") from None
    except ConfigError as e:
        raise ModelFormatError(f"{ctx}: invalid config ({e})") from e
    if "tensors" not in data or "seed" not in data:
        raise ModelFormatError(f"{ctx}: missing required field 'tensors' or 'seed'")
    expected = _expected_shapes(config)
    raw = data["tensors"]
    missing = set(expected) - set(raw)
    if missing:
        raise ModelFormatError(f"{ctx}: missing tensors {sorted(missing)}")
    extra = set(raw) - set(expected)
    if extra:
        raise ModelFormatError(f"{ctx}: unexpected tensors {sorted(extra)}")
    tensors: dict[str, np.ndarray] = {}
    for name, shape in expected.items():
        arr = np.asarray(raw[name], dtype=np.float64)
        if arr.shape != shape:
            raise ModelFormatError(f"{ctx}: tensor {name} has shape {arr.shape}, expected {shape}")
        if not np.all(np.isfinite(arr)):
            raise ModelFormatError(f"{ctx}: tensor {name} contains non-finite values")
        tensors[name] = arr

    def norm_states(stage: str) -> list[NormState]:
        states = []
        for l in range(config.num_layers):
            if config.normalization == "batch":
                states.append(
                    NormState(
                        scale=tensors[f"layer{l}.{stage}.scale"],
                        shift=tensors[f"layer{l}.{stage}.shift"],
                        running_mean=tensors[f"layer{l}.{stage}.running_mean"],
                        running_var=tensors[f"layer{l}.{stage}.running_var"],
                    )
                )
            else:
                c = config.hidden_dim
                states.append(
                    NormState(
                        scale=np.ones(c), shift=np.zeros(c), running_mean=np.zeros(c), running_var=np.ones(c)
                    )
                )
        return states

    return ModelParams(
        config=config,
        seed=int(data["seed"]),
        w_in=tensors["w_in"],
        w_a=[tensors[f"layer{l}.w_a"] for l in range(config.num_layers)],
        w_b=[tensors[f"layer{l}.w_b"] for l in range(config.num_layers)],
        edge=EdgeParams(
            phi=[tensors[f"layer{l}.phi"] for l in range(config.num_layers)],
            omega=[tensors[f"layer{l}.omega"] for l in range(config.num_layers)],
            theta_w=tensors["theta_w"],
            theta_b=tensors["theta_b"],
            w_p=tensors["w_p"],
            fourier_b=tensors["fourier_b"],
            embed_dim=config.embed_dim,
            pos_dim=config.pos_dim,
            fourier_dim=config.fourier_dim,
            sigma=config.sigma,
            mu=config.mu,
        ),
        norms_spatial=norm_states("norm_spatial"),
        norms_temporal=norm_states("norm_temporal"),
        w_fc=tensors["w_fc"],
        b_fc=tensors["b_fc"],
    )


def load_model(path) -> ModelParams:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"{path}: not valid JSON ({e})") from e
    return model_from_dict(data, ctx=str(path))


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
