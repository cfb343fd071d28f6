"""Two-stage causal risk inference and recall evaluation.

Stage one predicts the Stop/Go behavior of a clip. When the Stop
confidence clears the threshold delta, stage two removes each agent in
turn (attribute masking before graph construction, never pixel edits) and
scores it by the Go probability of the manipulated clip; the top-scoring
agent is the predicted risk object. Groups are handled with one joint
intervention, selected either explicitly or by thresholding the ego row of
the layer-1 adjacency.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, EvaluationError
from .graph import ego_interaction_profile
from .model import ModelParams, _ordered_map, forward, forward_detailed
from .scenario import Scenario, mask_agent, mask_group

GO, STOP = "Go", "Stop"


def _check_two_class(params: ModelParams) -> tuple[int, int]:
    names = params.config.class_names
    if params.config.num_classes != 2 or set(names) != {GO, STOP}:
        raise ConfigError(
            f"risk inference requires a two-class Go/Stop model, got classes {names}"
        )
    return names.index(GO), names.index(STOP)


def predict_behavior(scenario: Scenario, params: ModelParams) -> dict[str, float]:
    """Eval-mode Stop/Go probabilities for the unmodified scenario."""
    go_idx, stop_idx = _check_two_class(params)
    probs = forward(scenario, params, mode="eval")
    return {GO: float(probs[go_idx]), STOP: float(probs[stop_idx])}


@dataclass
class GroupResult:
    members: tuple[int, ...]
    score: float
    eta: float | None = None

    def to_json_dict(self) -> dict:
        return {"members": sorted(self.members), "score": self.score, "eta": self.eta}


@dataclass
class RiskReport:
    """Stage-one confidence plus, when gated in, per-agent intervention scores."""

    stop_prob: float
    delta: float
    scores: dict[int, float] | None = None
    ranking: list[int] | None = None
    predicted_risk: int | None = None
    group: GroupResult | None = None
    warning: str | None = None

    def to_json_dict(self) -> dict:
        doc: dict = {"stop_prob": self.stop_prob, "delta": self.delta}
        if self.scores is not None:
            doc["scores"] = {str(agent_id): s for agent_id, s in sorted(self.scores.items())}
            doc["ranking"] = self.ranking
            doc["predicted_risk"] = self.predicted_risk
        if self.group is not None:
            doc["group"] = self.group.to_json_dict()
        if self.warning is not None:
            doc["warning"] = self.warning
        return doc


def risk_scores(scenario: Scenario, params: ModelParams, delta: float = 0.5, threads: int = 1) -> RiskReport:
    """Rank agents by the Go-probability gain under single-agent removal.

    Below the gate (stop_prob < delta) no interventions run and the report
    carries the stage-one confidence only.
    """
    if not 0 < delta < 1:
        raise ConfigError(f"delta must lie in (0, 1), got {delta}")
    go_idx, stop_idx = _check_two_class(params)
    stop_prob = float(forward(scenario, params, mode="eval")[stop_idx])
    if stop_prob < delta:
        return RiskReport(stop_prob=stop_prob, delta=delta)
    agent_ids = list(scenario.agent_ids)
    if not agent_ids:
        return RiskReport(
            stop_prob=stop_prob,
            delta=delta,
            scores={},
            ranking=[],
            predicted_risk=None,
            warning="no agents to intervene on",
        )
    gos = _ordered_map(
        lambda aid: float(forward(mask_agent(scenario, aid), params, mode="eval")[go_idx]),
        agent_ids,
        threads,
    )
    scores = dict(zip(agent_ids, gos))
    # descending score, ties to the smallest agent id
    ranking = sorted(agent_ids, key=lambda aid: (-scores[aid], aid))
    return RiskReport(
        stop_prob=stop_prob,
        delta=delta,
        scores=scores,
        ranking=ranking,
        predicted_risk=ranking[0],
    )


def group_risk_score(scenario: Scenario, params: ModelParams, group) -> float:
    """Go probability after removing the whole group in one intervention."""
    group = set(group)
    if not group:
        raise ConfigError("risk group must be nonempty")
    go_idx, _ = _check_two_class(params)
    return float(forward(mask_group(scenario, group), params, mode="eval")[go_idx])


def identify_risk_group(scenario: Scenario, params: ModelParams, eta: float = 0.2) -> set[int]:
    """Agents whose mean ego edge in the layer-1 adjacency exceeds eta."""
    if not 0 <= eta <= 1:
        raise ConfigError(f"eta must lie in [0, 1], got {eta}")
    detail = forward_detailed(scenario, params, mode="eval")
    profile = ego_interaction_profile(detail.layer1_adjacency)
    return {agent_id for agent_id, value in profile.items() if value > eta}


@dataclass
class RecallResult:
    """Recall of planted risk objects; gated-out positives count as misses."""

    total: int
    correct: int
    recall: float
    per_cause: dict[str, dict] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "total": self.total,
            "correct": self.correct,
            "recall": self.recall,
            "per_cause": self.per_cause,
        }


def evaluate_recall(
    items,
    params: ModelParams,
    delta: float = 0.5,
    eta: float = 0.2,
    threads: int = 1,
) -> RecallResult:
    """Exact-identification recall over ground-truth-positive scenarios.

    ``items`` holds (name, scenario) pairs; every scenario must carry a
    planted risk object or risk group. Group scenarios count as correct only
    when the eta-thresholded predicted set matches the planted set exactly.
    The per-cause breakdown keys single-agent causes by the risk object's
    class and group causes as "group".
    """
    items = list(items)
    if not items:
        raise EvaluationError("no scenarios to evaluate recall on")
    for name, s in items:
        if s.ground_truth_risk is None and s.ground_truth_group is None:
            raise EvaluationError(f"scenario {name!r} carries no ground-truth risk annotation")

    def judge(named):
        name, s = named
        if s.ground_truth_group is not None:
            cause = "group"
            report = risk_scores(s, params, delta=delta)
            if report.scores is None:
                return cause, False
            predicted = identify_risk_group(s, params, eta=eta)
            return cause, predicted == set(s.ground_truth_group)
        cause = s.agent(s.ground_truth_risk).tracklet.agent_class.value
        report = risk_scores(s, params, delta=delta)
        return cause, report.scores is not None and report.predicted_risk == s.ground_truth_risk

    outcomes = _ordered_map(judge, items, threads)
    per_cause: dict[str, dict] = {}
    correct = 0
    for cause, hit in outcomes:
        slot = per_cause.setdefault(cause, {"total": 0, "correct": 0})
        slot["total"] += 1
        slot["correct"] += int(hit)
        correct += int(hit)
    for slot in per_cause.values():
        slot["recall"] = slot["correct"] / slot["total"]
    return RecallResult(
        total=len(items),
        correct=correct,
        recall=correct / len(items),
        per_cause=per_cause,
    )
