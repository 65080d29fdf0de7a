from pathlib import Path
from typing import Dict, List, Optional, Sequence
import argparse
import json
import logging
import sys

from core.errors import ConfigError, MoELabError
from core.serialization import stable_hash
from core.types import Perturbation
from diagnostics.curves import load_logs
from diagnostics.metrics import (eae_by_shard, eae_per_layer, eca_per_layer, ewa_summary, expert_change_rate,
                                 router_margin, router_saturation, selection_ratio)
from diagnostics.routing_log import RoutingLog
from diagnostics.similarity import expert_similarity
from moe.routing import LayerRouting, RoutingOverrides, perturb_selection
from optimization.trainer import RunConfig, evaluate, train
from output.checkpoint import load_checkpoint
from output.report import MetricReport
from preprocessing.config_file import apply_overrides, load_config_dict, sections_to_dict
from .recipes import RECIPES, RecipeContext, report_run, run_recipe
from .sweep import SweepSpec, run_sweep

logger = logging.getLogger(__name__)

METRICS = ("eae", "ewa", "ecr", "saturation", "margin", "eca", "similarity", "selection")
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _print_json(data) -> None:
    print(json.dumps(data, indent=2, sort_keys=True))


def _load_run_config(path: Optional[str], overrides: Optional[List[str]]) -> RunConfig:
    if path is None:
        if overrides:
            return RunConfig.from_dict(sections_to_dict(apply_overrides({}, overrides)))
        return RunConfig()
    return RunConfig.from_dict(load_config_dict(path, overrides))


def cmd_train(args: argparse.Namespace) -> int:
    config = _load_run_config(args.config, args.set)
    result = train(config, args.out, force=args.force, progress=not args.no_progress)
    _print_json({"run": str(result.layout.root), "final_step": result.final_step,
                 "checkpoints": [str(p) for p in result.checkpoints], "config_hash": config.config_hash,
                 "final_val_ppl": result.eval_rows[-1]["val_ppl"] if result.eval_rows else None})
    return 0


def _overrides(args: argparse.Namespace) -> RoutingOverrides:
    perturbation = Perturbation(args.perturb) if getattr(args, "perturb", None) else None
    return RoutingOverrides(temperature=args.temperature, perturbation=perturbation)


def cmd_eval(args: argparse.Namespace) -> int:
    overrides = _overrides(args)
    result = evaluate(args.ckpt, split=args.split, overrides=overrides, max_windows=args.max_windows)
    if args.routing_log and result.routing is not None:
        result.routing.write(args.routing_log)
    _print_json({"checkpoint": str(args.ckpt), "split": args.split, "ppl": result.ppl, "mean_ce": result.mean_ce,
                 "n_tokens": result.n_tokens, "temperature": args.temperature, "perturbation": args.perturb})
    return 0


def _logs_hash(logs: Sequence[RoutingLog]) -> str:
    return stable_hash([log.header.to_dict() for log in logs])


def diagnose(metric: str, logs: Sequence[RoutingLog], k: Optional[int] = None, fractional: bool = False,
             n_shards: int = 1, checkpoint: Optional[Path] = None, layer: Optional[int] = None) -> MetricReport:
    """Compute one named diagnostic into a MetricReport."""
    if metric == "similarity":
        if checkpoint is None:
            raise ConfigError("similarity needs --ckpt")
        ckpt = load_checkpoint(checkpoint)
        config = ckpt.model_config()
        layers = [layer] if layer is not None else config.moe_layers
        report = MetricReport(metric="similarity", config_hash=ckpt.config_hash, steps=[ckpt.step],
                              parameters={"aggregation": "pairwise mean", "weights": "w_out"})
        for layer_id in layers:
            sim = expert_similarity(ckpt.arrays, config, layer_id)
            report.add("per_layer", f"layer={layer_id}", sim.mean)
            report.add_matrix(f"L{layer_id}", sim.matrix, sim.labels)
        return report

    needed = 2 if metric in ("ecr", "saturation") else 1
    if len(logs) < needed:
        raise ConfigError(f"metric {metric} needs {needed} routing log(s), got {len(logs)}")
    report = MetricReport(metric=metric, config_hash=_logs_hash(logs), steps=[log.header.step for log in logs])
    log = logs[-1]
    if metric == "eae":
        values = eae_per_layer(log)
        report.add_layers(values.per_layer, values.aggregate)
        if n_shards > 1:
            for layer_id, shards in eae_by_shard(log, n_shards).items():
                for shard, value in enumerate(shards):
                    report.add("per_shard", f"layer={layer_id}:shard={shard}",
                               float("nan") if value is None else value)
    elif metric == "ewa":
        summary = ewa_summary(log, n_shards)
        report.add_layers(summary.per_layer, summary.aggregate)
        report.parameters["renormalized"] = True
    elif metric == "ecr":
        values = expert_change_rate(logs[0], logs[1], fractional=fractional)
        report.add_layers(values.per_layer, values.aggregate)
        report.parameters.update(values.parameters)
    elif metric == "saturation":
        values = router_saturation(logs[0], logs[1], k)
        report.add_layers(values.per_layer, values.aggregate)
        report.parameters.update(values.parameters)
    elif metric == "margin":
        values = router_margin(log)
        report.add_layers(values.per_layer, values.aggregate)
        report.parameters.update(values.parameters)
    elif metric == "eca":
        labels = log.header.labels
        for layer_id, co in eca_per_layer(log).items():
            report.add_matrix(f"L{layer_id}", co.matrix, labels)
            report.parameters[f"L{layer_id}.empty_rows"] = co.empty_rows
    elif metric == "selection":
        for layer_id, ratio in selection_ratio(log).items():
            for expert, value in enumerate(ratio):
                report.add("per_layer", f"layer={layer_id}:expert={expert}", float(value))
    else:
        raise ConfigError(f"unknown metric '{metric}'")
    return report


def cmd_diagnose(args: argparse.Namespace) -> int:
    # ecr/saturation keep the given order: first log vs second (final) log
    if args.metric in ("ecr", "saturation"):
        logs = [RoutingLog.read(p) for p in args.logs or []]
    else:
        logs = load_logs(args.logs or [])
    report = diagnose(args.metric, logs, k=args.k, fractional=args.fractional, n_shards=args.shards,
                      checkpoint=args.ckpt, layer=args.layer)
    if args.out:
        report.write_json(args.out)
        if args.csv:
            report.write_csv(args.csv)
    print(report.to_json())
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    spec = SweepSpec.from_file(args.spec, args.set)
    spec.force = args.force
    if args.workers is not None:
        spec.workers = args.workers
    result = run_sweep(spec)
    _print_json({"axis": spec.axis.value, "runs": [str(d) for d in result.run_dirs], "table": str(result.table)})
    return 0


def _perturbed_log(log: RoutingLog, mode: Perturbation) -> RoutingLog:
    layers = []
    for layer_id in log.layer_ids:
        routing = log.layers[layer_id]
        ids, gates = perturb_selection(routing, mode)
        layers.append(LayerRouting(layer=layer_id, positions=routing.positions, ids=ids,
                                   gates=gates.astype("float32"), logits=routing.logits,
                                   score_kind=routing.score_kind))
    return RoutingLog(log.header, layers)


def cmd_perturb(args: argparse.Namespace) -> int:
    """DropTop: evaluate a checkpoint under each mode, or rewrite a logged selection."""
    modes = [Perturbation(m) for m in args.mode] if args.mode else list(Perturbation)
    if args.ckpt:
        base = evaluate(args.ckpt, max_windows=args.max_windows).ppl
        rows = {"none": base}
        for mode in modes:
            rows[mode.value] = evaluate(args.ckpt, overrides=RoutingOverrides(perturbation=mode),
                                        max_windows=args.max_windows).ppl
        _print_json({"checkpoint": str(args.ckpt), "ppl": rows,
                     "delta": {name: ppl - base for name, ppl in rows.items()},
                     "config_hash": load_checkpoint(args.ckpt).config_hash})
        return 0
    if not args.logs or not args.write:
        raise ConfigError("perturb needs --ckpt, or --logs with --write")
    if len(modes) != 1:
        raise ConfigError("rewriting a routing log needs exactly one --mode")
    log = RoutingLog.read(args.logs)
    path = _perturbed_log(log, modes[0]).write(args.write)
    _print_json({"log": str(args.logs), "mode": modes[0].value, "written": str(path)})
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    result = report_run(Path(args.run))
    _print_json({"run": str(args.run), "artifacts": [str(p) for p in result.artifacts]})
    return 0


def _parse_checkpoints(items: Optional[List[str]]) -> Dict[str, Path]:
    checkpoints: Dict[str, Path] = {}
    for item in items or []:
        label, sep, path = item.partition("=")
        if not sep:
            label, path = Path(item).stem, item
        checkpoints[label] = Path(path)
    return checkpoints


def cmd_recipe(args: argparse.Namespace) -> int:
    ctx = RecipeContext(out_dir=Path(args.out), base=_load_run_config(args.config, args.set),
                        runs=[Path(r) for r in args.runs or []], checkpoints=_parse_checkpoints(args.ckpt),
                        steps=args.steps, n_shards=args.shards, workers=args.workers or 0, force=args.force)
    result = run_recipe(args.name, ctx)
    _print_json({"recipe": args.name, "artifacts": [str(p) for p in result.artifacts]})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moe_lab", description="Desk-scale sparse mixture-of-experts laboratory")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one run")
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty run directory")
    p.add_argument("--no-progress", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="validation perplexity of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--temperature", type=float)
    p.add_argument("--perturb", choices=[m.value for m in Perturbation])
    p.add_argument("--split", default="val", choices=["train", "val"])
    p.add_argument("--max-windows", type=int)
    p.add_argument("--routing-log", help="write the routing log of this pass")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="compute a routing diagnostic")
    p.add_argument("--metric", required=True, choices=METRICS)
    p.add_argument("--logs", nargs="+", help="routing logs (ecr/saturation: earlier log, then later log)")
    p.add_argument("--k", type=int, help="saturation top-k")
    p.add_argument("--fractional", action="store_true", help="fractional ECR")
    p.add_argument("--shards", type=int, default=1)
    p.add_argument("--ckpt", type=Path, help="checkpoint for similarity")
    p.add_argument("--layer", type=int)
    p.add_argument("--out", help="write the report JSON here")
    p.add_argument("--csv", help="also write the report CSV here (with --out)")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("sweep", help="run a sweep spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--workers", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("perturb", help="DropTop perturbation")
    p.add_argument("--ckpt")
    p.add_argument("--logs")
    p.add_argument("--mode", action="append", choices=[m.value for m in Perturbation])
    p.add_argument("--write", help="output path of the perturbed routing log")
    p.add_argument("--max-windows", type=int)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("report", help="bundle CSV and SVG reports of a run")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("recipe", help="run a named experiment recipe")
    p.add_argument("name", choices=sorted(RECIPES))
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--runs", nargs="+")
    p.add_argument("--ckpt", action="append", metavar="LABEL=PATH")
    p.add_argument("--steps", type=int)
    p.add_argument("--shards", type=int, default=4)
    p.add_argument("--workers", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_recipe)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand; usage errors exit with 2 through argparse."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT, stream=sys.stderr)
    try:
        return args.func(args)
    except (MoELabError, OSError) as e:
        logger.debug("command %s failed", args.command, exc_info=True)
        record = {"error": type(e).__name__, "message": str(e), "command": args.command}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 1
