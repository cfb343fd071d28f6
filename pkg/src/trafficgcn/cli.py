"""Command-line interface tying the pipeline together.

Subcommands: ``generate`` (synthetic datasets), ``train`` (behavior
classifier), ``eval`` (classification metrics plus risk recall), ``risk``
(two-stage risk ranking for one scenario), and ``gradcheck`` (finite
difference verification of the analytic gradients).

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 numeric
divergence, 5 gradient check failure. Every command that writes files also
writes a ``run.json`` echoing the fully resolved configuration and seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .estimator import infer_class_names
from .exceptions import (
    ConfigError,
    EvaluationError,
    GenerationError,
    ModelFormatError,
    NumericError,
    ScenarioFormatError,
    TrainingDivergedError,
    UnknownAgentError,
)
from .generator import GeneratorConfig, generate_dataset, random_scenario
from .model import (
    ModelConfig,
    TrainConfig,
    file_digest,
    forward,
    forward_detailed,
    grad_check,
    init_params,
    load_model,
    save_model,
    train,
)
from .risk import evaluate_recall, group_risk_score, identify_risk_group, risk_scores
from .scenario import load_manifest, load_scenario, load_split

REPORT_SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_GRADCHECK = 5


def _read_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return data


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _write_run_record(out_dir, command: str, config: dict, seed: int) -> None:
    _write_json(
        Path(out_dir) / "run.json",
        {"schema_version": REPORT_SCHEMA_VERSION, "command": command, "seed": seed, "config": config},
    )


def cmd_generate(args) -> int:
    cfg = GeneratorConfig.from_dict(_read_json(args.config) if args.config else {})
    if args.n < 1:
        raise ConfigError(f"--n must be >= 1, got {args.n}")
    out = Path(args.out)
    generate_dataset(cfg, args.n, args.seed, out)
    _write_run_record(out, "generate", {"generator": cfg.to_dict(), "n": args.n}, args.seed)
    print(out / "manifest.json")
    return EXIT_OK


def cmd_train(args) -> int:
    doc = _read_json(args.config) if args.config else {}
    unknown = set(doc) - {"model", "train"}
    if unknown:
        raise ConfigError(f"unknown train config sections {sorted(unknown)}")
    manifest = load_manifest(args.manifest)
    base = Path(args.manifest).parent
    scenarios = [s for _, s in load_split(manifest, base, args.split)]
    if not scenarios:
        raise ConfigError(f"split {args.split!r} is empty")
    val_scenarios = [s for _, s in load_split(manifest, base, "val")] if "val" in manifest.splits else ()

    model_doc = dict(doc.get("model", {}))
    model_doc.setdefault("feature_dim", scenarios[0].feature_dim)
    if "class_names" not in model_doc:
        names = infer_class_names([s.label for s in scenarios])
        model_doc["class_names"] = list(names)
        model_doc.setdefault("num_classes", len(names))
    model_config = ModelConfig.from_dict(model_doc)
    train_doc = dict(doc.get("train", {}))
    if args.seed is not None:
        train_doc["seed"] = args.seed
    train_config = TrainConfig.from_dict(train_doc)

    params, _, history = train(scenarios, model_config, train_config, val_scenarios=val_scenarios)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_path = out / "model.json"
    save_model(params, model_path)
    _write_json(
        out / "history.json",
        {"schema_version": REPORT_SCHEMA_VERSION, "seed": train_config.seed, "epochs": history},
    )
    _write_run_record(
        out,
        "train",
        {
            "model": model_config.to_dict(),
            "train": train_config.to_dict(),
            "manifest": str(args.manifest),
            "split": args.split,
        },
        train_config.seed,
    )
    print(model_path)
    print(f"model_digest {file_digest(model_path)}")
    return EXIT_OK


def _classification_metrics(scenarios, params, threads: int) -> dict:
    names = list(params.config.class_names)
    true_idx = [params.class_index(s.label) for s in scenarios]
    pred_idx = [int(np.argmax(forward(s, params, mode="eval"))) for s in scenarios]
    n = len(names)
    confusion = np.zeros((n, n), dtype=int)
    for t, p in zip(true_idx, pred_idx):
        confusion[t, p] += 1
    per_class = {}
    for i, name in enumerate(names):
        tp = int(confusion[i, i])
        fp = int(confusion[:, i].sum() - tp)
        fn = int(confusion[i, :].sum() - tp)
        per_class[name] = {
            "support": int(confusion[i, :].sum()),
            "precision": tp / (tp + fp) if tp + fp else 0.0,
            "recall": tp / (tp + fn) if tp + fn else 0.0,
        }
    return {
        "count": len(scenarios),
        "accuracy": float(np.mean([t == p for t, p in zip(true_idx, pred_idx)])),
        "per_class": per_class,
    }


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    base = Path(args.manifest).parent
    items = load_split(manifest, base, args.split)
    if not items:
        raise ConfigError(f"split {args.split!r} is empty")
    params = load_model(args.model)
    scenarios = [s for _, s in items]
    metrics = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "seed": params.seed,
        "split": args.split,
        "delta": args.delta,
        "eta": args.eta,
        "behavior": _classification_metrics(scenarios, params, args.threads),
    }
    annotated = [
        (name, s)
        for name, s in items
        if s.ground_truth_risk is not None or s.ground_truth_group is not None
    ]
    if annotated:
        metrics["risk_recall"] = evaluate_recall(
            annotated, params, delta=args.delta, eta=args.eta, threads=args.threads
        ).to_json_dict()
    print(json.dumps(metrics, indent=2))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "metrics.json", metrics)
        _write_run_record(
            out,
            "eval",
            {"manifest": str(args.manifest), "model": str(args.model), "split": args.split,
             "delta": args.delta, "eta": args.eta},
            params.seed,
        )
    return EXIT_OK


def cmd_risk(args) -> int:
    scenario = load_scenario(args.scenario)
    params = load_model(args.model)
    report = risk_scores(scenario, params, delta=args.delta, threads=args.threads)
    doc = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "seed": params.seed,
        "scenario_path": str(args.scenario),
        "model_digest": file_digest(args.model),
    }
    doc.update(report.to_json_dict())
    if args.group:
        members = sorted({int(x) for x in args.group.split(",") if x.strip() != ""})
        if not members:
            raise ConfigError("--group needs at least one agent id")
        doc["group"] = {
            "members": members,
            "score": group_risk_score(scenario, params, members),
            "eta": None,
        }
    elif args.eta is not None:
        members = sorted(identify_risk_group(scenario, params, eta=args.eta))
        if members:
            doc["group"] = {
                "members": members,
                "score": group_risk_score(scenario, params, members),
                "eta": args.eta,
            }
    if args.dump_graph:
        detail = forward_detailed(scenario, params, mode="eval")
        doc["layer1_adjacency"] = {
            "agent_ids": list(detail.layer1_adjacency.agent_ids),
            "valid": detail.layer1_adjacency.valid.astype(int).tolist(),
            "values": detail.layer1_adjacency.values.tolist(),
        }
    print(json.dumps(doc, indent=2))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "risk_report.json", doc)
        _write_run_record(
            out,
            "risk",
            {"scenario": str(args.scenario), "model": str(args.model), "delta": args.delta,
             "eta": args.eta, "group": args.group, "dump_graph": bool(args.dump_graph)},
            params.seed,
        )
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    config = ModelConfig(
        num_classes=2,
        class_names=("Go", "Stop"),
        feature_dim=args.width,
        hidden_dim=args.width,
        num_layers=3,
        tau=3,
        embed_dim=2 * args.width,
        pos_dim=5,
        fourier_dim=30,
        sigma=10.0,
        mu=3.0,
        normalization="batch",
    )
    params, _ = init_params(config, args.seed)
    scenario = random_scenario(
        seed=args.seed + 1, gamma=args.gamma, agents=args.agents, feature_dim=args.width
    )
    report = grad_check(params, scenario, h=args.step, tol=args.tol)
    doc = {"schema_version": REPORT_SCHEMA_VERSION, "seed": args.seed}
    doc.update(report.to_json_dict())
    print(json.dumps(doc, indent=2))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "gradcheck_report.json", doc)
        _write_run_record(
            out,
            "gradcheck",
            {"width": args.width, "gamma": args.gamma, "agents": args.agents,
             "tol": args.tol, "step": args.step},
            args.seed,
        )
    return EXIT_OK if report.passed else EXIT_GRADCHECK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trafficgcn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a labeled synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="generator config JSON file")
    p.add_argument("--n", type=int, default=16, help="number of scenarios")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the behavior classifier")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file with 'model' and 'train' sections")
    p.add_argument("--split", default="train")
    p.add_argument("--seed", type=int, default=None, help="override the training seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate behavior metrics and risk recall")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--delta", type=float, default=0.5)
    p.add_argument("--eta", type=float, default=0.2)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", help="optional output directory for metrics.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("risk", help="two-stage risk inference for one scenario")
    p.add_argument("--scenario", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--delta", type=float, default=0.5)
    p.add_argument("--eta", type=float, default=None,
                   help="threshold for automatic risk-group selection")
    p.add_argument("--group", help="comma-separated agent ids for a joint intervention")
    p.add_argument("--dump-graph", action="store_true", help="include the layer-1 adjacency")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", help="optional output directory for risk_report.json")
    p.set_defaults(func=cmd_risk)

    p = sub.add_parser("gradcheck", help="verify gradients on a small reference model")
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--gamma", type=int, default=4)
    p.add_argument("--agents", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--out", help="optional output directory for the report")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, ScenarioFormatError, ModelFormatError, UnknownAgentError,
            GenerationError, EvaluationError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergedError, NumericError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


def entrypoint() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entrypoint()
