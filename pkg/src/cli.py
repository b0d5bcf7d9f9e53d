"""
Command-line front end.

    python -m src.cli analyze model.json
    python -m src.cli prune --model model.json --goal 0.5 --steps 4 --alive 3 --cache cache.jsonl
    python -m src.cli curve model.json --group 1 --out curve.csv
    python -m src.cli cache stats cache.jsonl
    python -m src.cli toy mlp --out models/mlp.json
"""
import argparse
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
from pydantic import ValidationError

from src.agents.benchmark import latency_curve
from src.errors import (EXIT_INPUT_ERROR, EXIT_OK, ArchtreeError, GraphValidationError, InfeasibleGoalError,
                        ManifestError, exit_code_for)
from src.main import run_archtree
from src.models.graph_models import LayerKind, ModelGraph
from src.models.search_models import RunManifest, StepPolicy
from src.models.training_models import DatasetSpec
from src.state import SearchServices
from src.tools.datasets import load_dataset
from src.tools.graph_ir import build_channel_groups, parameter_count, validate_graph
from src.tools.importance import load_importances
from src.tools.latency import make_provider
from src.tools.latency_cache import LatencyCache, cache_fingerprint, load_cache_stats
from src.tools.model_io import load_model, save_model
from src.tools.zoo import ZOO
from src.utils import load_json, logger, save_json


def _load_valid_model(path: str, weights: Optional[str] = None) -> ModelGraph:
    model = load_model(Path(path), Path(weights) if weights else None)
    violations = validate_graph(model)
    if violations:
        raise GraphValidationError(violations)
    return model


def cmd_analyze(args: argparse.Namespace) -> int:
    model = _load_valid_model(args.model, args.weights)
    groups = build_channel_groups(model)
    table = pd.DataFrame(
        [{"group": g.index, "size": g.size, "prunable": g.prunable, "members": " ".join(str(m) for m in g.members)}
         for g in groups],
        columns=["group", "size", "prunable", "members"],
    )
    print(table.to_string(index=False))
    print(f"\n{len(groups)} channel groups, {sum(g.prunable for g in groups)} prunable, "
          f"{parameter_count(model)} parameters")
    return EXIT_OK


def _default_dataset(model: ModelGraph, seed: int) -> DatasetSpec:
    """Synthetic blobs shaped for the model's input and logits."""
    layers = model.layer_map()
    input_shape = next(l.params["shape"] for l in model.layers if l.kind == LayerKind.INPUT.value)
    output = next(l for l in model.layers if l.kind == LayerKind.OUTPUT.value)
    producer = layers[output.inputs[0]]
    while not producer.is_prunable:
        producer = layers[producer.inputs[0]]
    return DatasetSpec(
        seed=seed,
        n_features=int(np.prod(input_shape)),
        n_classes=int(producer.params.get("out_features", producer.params.get("out_channels"))),
        input_shape=list(input_shape) if len(input_shape) > 1 else None,
    )


def _manifest_from_args(args: argparse.Namespace) -> RunManifest:
    data = load_json(Path(args.manifest)) if args.manifest else {}
    overrides = {
        "model": args.model, "weights": args.weights, "goal": args.goal, "steps": args.steps,
        "alive": args.alive, "provider": args.provider, "cache": args.cache, "seed": args.seed,
        "out": args.out, "delta": args.delta, "workers": args.workers, "filter_by": args.filter,
        "importance": args.importance, "reductions": args.reductions,
    }
    data.update({key: value for key, value in overrides.items() if value is not None})
    if args.no_early_stop:
        data["early_stopping"] = False
    if args.no_finetune:
        data["finetune"] = False
    if args.dataset and args.dataset.startswith("csv:"):
        data["dataset"] = {"source": "csv-file", "path": args.dataset[4:], "seed": data.get("seed", 0)}
    if "model" not in data:
        raise ManifestError("prune needs --model or a manifest with a model")
    try:
        return RunManifest(**data)
    except ValidationError as e:
        raise ManifestError(f"invalid run manifest: {e}")


def cmd_prune(args: argparse.Namespace) -> int:
    manifest = _manifest_from_args(args)
    model = _load_valid_model(manifest.model, manifest.weights)
    config = manifest.search_config()

    dataset = None
    if args.dataset != "none":
        dataset = load_dataset(manifest.dataset or _default_dataset(model, manifest.seed))
    provider = make_provider(manifest.provider, model, manifest.noise_sigma, manifest.seed)
    cache = LatencyCache(Path(manifest.cache) if manifest.cache else None, cache_fingerprint(model, provider))
    importance = load_importances(Path(manifest.importance), config.reductions) if manifest.importance else None
    services = SearchServices(provider=provider, cache=cache, dataset=dataset, importance=importance,
                              workers=manifest.workers)

    bundles, report = run_archtree(model, config, services)

    out = Path(manifest.out)
    for bundle in bundles:
        save_model(bundle.model, out / f"model_{bundle.rank}.json")
    save_json(report, out / "report.json")

    print(f"\nroot {report.root_signature}: {report.root_latency_ms:.6g} ms, goal {report.goal_ms:.6g} ms")
    summary = pd.DataFrame(
        [{"rank": b.rank, "signature": str(tuple(b.signature)), "latency_ms": round(b.latency_ms, 6),
          "accuracy": b.accuracy, "parameters": b.parameters} for b in bundles],
        columns=["rank", "signature", "latency_ms", "accuracy", "parameters"],
    )
    print(summary.to_string(index=False))
    if report.cache is not None:
        print(f"cache: {report.cache.hits} hits, {report.cache.misses} misses, hit rate {report.cache.hit_rate:.2%}")
    return EXIT_OK


def cmd_curve(args: argparse.Namespace) -> int:
    model = _load_valid_model(args.model, args.weights)
    groups = build_channel_groups(model)
    if not 0 <= args.group < len(groups):
        raise ManifestError(f"group {args.group} does not exist ({len(groups)} groups)")
    provider = make_provider(args.provider, model)
    cache = LatencyCache(Path(args.cache), cache_fingerprint(model, provider)) if args.cache else None
    frame = latency_curve(model, groups, args.group, provider, StepPolicy.parse(args.delta), cache)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(args.out, index=False)
        logger.info(f"Saved latency curve to {args.out}")
    else:
        frame.to_csv(sys.stdout, index=False)
    fine, adaptive = (frame["sweep"] == "fine").sum(), (frame["sweep"] == "adaptive").sum()
    print(f"{fine} fine and {adaptive} adaptive probes ({fine / adaptive:.2f}x)", file=sys.stderr)
    return EXIT_OK


def cmd_cache_stats(args: argparse.Namespace) -> int:
    if args.model:
        model = _load_valid_model(args.model, args.weights)
        LatencyCache(Path(args.cache), cache_fingerprint(model, make_provider(args.provider, model)))
    stats = load_cache_stats(Path(args.cache))
    print(f"hits={stats.hits} misses={stats.misses} hit_rate={stats.hit_rate:.4f} entries={stats.entries}")
    timeline = pd.DataFrame(
        [{"index": e.index, "event": e.event, "signature": " ".join(map(str, e.signature))} for e in stats.events],
        columns=["index", "event", "signature"],
    )
    timeline.to_csv(sys.stdout, index=False)
    return EXIT_OK


def cmd_toy(args: argparse.Namespace) -> int:
    save_model(ZOO[args.name](args.seed), Path(args.out))
    print(f"wrote {args.name} to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="archtree", description="Latency-aware structured pruning")
    sub = parser.add_subparsers(dest="command", required=True)

    analyze = sub.add_parser("analyze", help="list the channel groups of a model")
    analyze.add_argument("model")
    analyze.add_argument("--weights")
    analyze.set_defaults(func=cmd_analyze)

    prune = sub.add_parser("prune", help="run the pruning search")
    prune.add_argument("--manifest", help="JSON run manifest; flags override its values")
    prune.add_argument("--model")
    prune.add_argument("--weights")
    prune.add_argument("--goal", help="'<x>ms' absolute or a fraction of the root latency")
    prune.add_argument("--steps", type=int)
    prune.add_argument("--alive", type=int, help="beam width")
    prune.add_argument("--provider", help="analytical | replay:<file> | command:<template>")
    prune.add_argument("--cache")
    prune.add_argument("--seed", type=int)
    prune.add_argument("--out")
    prune.add_argument("--no-early-stop", action="store_true")
    prune.add_argument("--delta", help="sqrt | log | fixed:<k>")
    prune.add_argument("--no-finetune", action="store_true")
    prune.add_argument("--workers", type=int)
    prune.add_argument("--dataset", default="blobs", help="blobs | csv:<file> | none")
    prune.add_argument("--filter", choices=["step", "cumulative"])
    prune.add_argument("--importance", help="importance container replacing gradient importance")
    prune.add_argument("--reductions", help="spatial,neural,group reductions, e.g. sum,linf,sum")
    prune.set_defaults(func=cmd_prune)

    curve = sub.add_parser("curve", help="latency against channels left in one group (CSV)")
    curve.add_argument("model")
    curve.add_argument("--weights")
    curve.add_argument("--group", type=int, required=True)
    curve.add_argument("--provider", default="analytical")
    curve.add_argument("--delta", default="sqrt")
    curve.add_argument("--cache")
    curve.add_argument("--out")
    curve.set_defaults(func=cmd_curve)

    cache = sub.add_parser("cache", help="latency cache tools")
    cache_sub = cache.add_subparsers(dest="cache_command", required=True)
    stats = cache_sub.add_parser("stats", help="hit/miss counters and timeline of the last run")
    stats.add_argument("cache")
    stats.add_argument("--model", help="verify the cache fingerprint against this model")
    stats.add_argument("--weights")
    stats.add_argument("--provider", default="analytical")
    stats.set_defaults(func=cmd_cache_stats)

    toy = sub.add_parser("toy", help="write a toy model")
    toy.add_argument("name", choices=sorted(ZOO))
    toy.add_argument("--out", required=True)
    toy.add_argument("--seed", type=int, default=0)
    toy.set_defaults(func=cmd_toy)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InfeasibleGoalError as e:
        print(f"error: infeasible latency goal at step {e.step}", file=sys.stderr)
        return exit_code_for(e)
    except GraphValidationError as e:
        print("error: invalid model graph", file=sys.stderr)
        for violation in e.violations:
            print(f"  {violation}", file=sys.stderr)
        return exit_code_for(e)
    except ArchtreeError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return exit_code_for(e)
    except (FileNotFoundError, ValidationError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
