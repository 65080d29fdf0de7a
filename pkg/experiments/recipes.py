from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple
import logging

import numpy as np

from core.errors import ConfigError, DataError
from core.types import InitMode, Perturbation, PlotKind, Variant
from diagnostics.curves import Curve, ecr_curve, load_logs, margin_curve, saturation_curve
from diagnostics.metrics import eae_by_shard, eae_per_layer, eca_per_layer, ewa_summary, selection_ratio
from diagnostics.routing_log import RoutingLog
from diagnostics.similarity import similarity_curves
from moe.config import MoEConfig
from moe.routing import RoutingOverrides
from optimization.trainer import RunConfig, evaluate, read_log
from output.checkpoint import list_checkpoints, load_checkpoint
from output.layout import RunLayout
from output.plots import emit_plot, render_heatmap_png
from output.report import MetricReport, write_report_csv
from preprocessing.config_file import load_config_dict
from .sweep import SweepAxis, SweepSpec, run_sweep, train_many

logger = logging.getLogger(__name__)

INIT_STDS = ("0.02", "0.04", "0.06")
TEMPERATURES = (0.1, 1.0, 10.0)
BALANCE_WINDOW = (100, 1000)  # steps averaged by the init-std recipe
AUX_LOSS_SETTINGS = {"balance+no_z": (0.01, 0.0), "no_balance": (0.0, 0.0), "balance+z": (0.01, 0.001)}


@dataclass
class RecipeContext:
    """Inputs shared by every recipe."""
    out_dir: Path
    base: RunConfig = field(default_factory=RunConfig)
    runs: List[Path] = field(default_factory=list)  # trained run directories to analyse
    checkpoints: Dict[str, Path] = field(default_factory=dict)  # label -> checkpoint
    steps: Optional[int] = None  # total_steps override for recipes that train
    n_shards: int = 4
    workers: int = 0
    force: bool = False

    @property
    def layout(self) -> RunLayout:
        return RunLayout(self.out_dir)


@dataclass
class RecipeResult:
    reports: List[MetricReport] = field(default_factory=list)
    artifacts: List[Path] = field(default_factory=list)


def run_config_of(run_dir: Path) -> RunConfig:
    return RunConfig.from_dict(load_config_dict(RunLayout(run_dir).config_path))


def run_logs(run_dir: Path) -> List[RoutingLog]:
    paths = RunLayout(run_dir).routing_logs()
    if not paths:
        raise DataError(f"run {run_dir} has no routing logs")
    return load_logs(paths)


def _need_runs(ctx: RecipeContext, name: str) -> List[Path]:
    if not ctx.runs:
        raise ConfigError(f"recipe {name} needs at least one --runs directory")
    return ctx.runs


def _need_checkpoints(ctx: RecipeContext, name: str) -> Dict[str, Path]:
    if not ctx.checkpoints:
        raise ConfigError(f"recipe {name} needs --ckpt label=path entries")
    missing = [f"{label}={path}" for label, path in ctx.checkpoints.items() if not Path(path).is_file()]
    if missing:
        raise ConfigError(f"missing checkpoints: {', '.join(missing)}")
    return ctx.checkpoints


def _finish(ctx: RecipeContext, name: str, result: RecipeResult) -> RecipeResult:
    layout = ctx.layout
    for report in result.reports:
        result.artifacts.append(report.write_json(layout.report(f"{report.metric}.json")))
    if result.reports:
        result.artifacts.append(write_report_csv(result.reports, layout.report(f"{name}.csv")))
    logger.info("recipe %s wrote %d artifacts to %s", name, len(result.artifacts), ctx.out_dir)
    return result


def _curve_entries(report: MetricReport, label: str, curves: Mapping[str, Curve]) -> None:
    for series, points in curves.items():
        for step, value in points:
            report.add("curve", f"{label}:{series}@{step}", value)


def _plot_curves(ctx: RecipeContext, result: RecipeResult, name: str, series: Mapping[str, Curve],
                 title: str, y_label: str) -> None:
    path = emit_plot(dict(series), PlotKind.LINE, ctx.layout.plot(f"{name}.svg"), title=title,
                     x_label="step", y_label=y_label)
    result.artifacts.append(path)


def _per_run_curves(ctx: RecipeContext, name: str, title: str, y_label: str,
                    compute: Callable[[List[RoutingLog]], Dict[str, Curve]]) -> RecipeResult:
    result = RecipeResult()
    overall: Dict[str, Curve] = {}
    for run_dir in _need_runs(ctx, name):
        config = run_config_of(run_dir)
        curves = compute(run_logs(run_dir))
        report = MetricReport(metric=f"{name}.{config.run_id}", config_hash=config.config_hash,
                              steps=[step for step, _ in curves["all"]])
        _curve_entries(report, config.run_id, curves)
        result.reports.append(report)
        overall[config.run_id] = curves["all"]
        _plot_curves(ctx, result, f"{name}_{config.run_id}", {k: v for k, v in curves.items() if k != "all"},
                     f"{title} per layer ({config.run_id})", y_label)
    _plot_curves(ctx, result, name, overall, title, y_label)
    return result


def recipe_ecr_curve(ctx: RecipeContext) -> RecipeResult:
    """Expert change rate between consecutive checkpoints, per run."""
    result = _per_run_curves(ctx, "ecr-curve", "Expert change rate", "ECR", ecr_curve)
    for run_dir in ctx.runs:
        config = run_config_of(run_dir)
        fractional = ecr_curve(run_logs(run_dir), fractional=True)
        report = MetricReport(metric=f"ecr-fractional.{config.run_id}", config_hash=config.config_hash,
                              parameters={"fractional": True})
        _curve_entries(report, config.run_id, fractional)
        result.reports.append(report)
    return result


def recipe_saturation(ctx: RecipeContext) -> RecipeResult:
    """Top-1 and top-K saturation against each run's final checkpoint."""
    result = RecipeResult()
    for run_dir in _need_runs(ctx, "saturation"):
        config = run_config_of(run_dir)
        logs = run_logs(run_dir)
        series = {}
        for k in sorted({1, config.model.moe.top_k}):
            curves = saturation_curve(logs, k)
            report = MetricReport(metric=f"saturation-top{k}.{config.run_id}", config_hash=config.config_hash,
                                  parameters={"k": k, "final_step": logs[-1].header.step})
            _curve_entries(report, config.run_id, curves)
            result.reports.append(report)
            series[f"top-{k}"] = curves["all"]
        _plot_curves(ctx, result, f"saturation_{config.run_id}", series,
                     f"Router saturation ({config.run_id})", "saturation")
    return result


def recipe_margin(ctx: RecipeContext) -> RecipeResult:
    return _per_run_curves(ctx, "margin", "Router margin", "top1 - top2 score", margin_curve)


def recipe_eae(ctx: RecipeContext) -> RecipeResult:
    """EAE of the final routing log per layer and per corpus shard."""
    result = RecipeResult()
    series = {}
    for run_dir in _need_runs(ctx, "eae"):
        config = run_config_of(run_dir)
        log = run_logs(run_dir)[-1]
        values = eae_per_layer(log)
        report = MetricReport(metric=f"eae.{config.run_id}", config_hash=config.config_hash,
                              steps=[log.header.step], parameters={"n_shards": ctx.n_shards})
        report.add_layers(values.per_layer, values.aggregate)
        for layer, shards in eae_by_shard(log, ctx.n_shards).items():
            for shard, value in enumerate(shards):
                report.add("per_shard", f"layer={layer}:shard={shard}", float("nan") if value is None else value)
        result.reports.append(report)
        series[config.run_id] = sorted(values.per_layer.items())
    result.artifacts.append(emit_plot(series, PlotKind.LINE, ctx.layout.plot("eae.svg"),
                                      title="Expert activation entropy", x_label="layer", y_label="EAE"))
    return result


def recipe_ewa(ctx: RecipeContext) -> RecipeResult:
    """Mean EWA of the final routing log per layer and shard."""
    result = RecipeResult()
    series = {}
    for run_dir in _need_runs(ctx, "ewa"):
        config = run_config_of(run_dir)
        log = run_logs(run_dir)[-1]
        if log.top_k < 2:
            logger.warning("skipping %s: EWA needs K >= 2", config.run_id)
            continue
        summary = ewa_summary(log, ctx.n_shards)
        report = MetricReport(metric=f"ewa.{config.run_id}", config_hash=config.config_hash,
                              steps=[log.header.step], parameters={"renormalized": True, "n_shards": ctx.n_shards})
        report.add_layers(summary.per_layer, summary.aggregate)
        for layer, shards in summary.per_shard.items():
            for shard, value in enumerate(shards):
                report.add("per_shard", f"layer={layer}:shard={shard}", value)
        result.reports.append(report)
        series[config.run_id] = sorted(summary.per_layer.items())
    if series:
        result.artifacts.append(emit_plot(series, PlotKind.LINE, ctx.layout.plot("ewa.svg"),
                                          title="Expert weight entropy", x_label="layer", y_label="EWA"))
    return result


def recipe_eca(ctx: RecipeContext) -> RecipeResult:
    """Co-activation heatmaps (SVG plus PNG preview) of the final routing log."""
    result = RecipeResult()
    for run_dir in _need_runs(ctx, "eca"):
        config = run_config_of(run_dir)
        log = run_logs(run_dir)[-1]
        labels = config.model.moe.slot_labels()
        report = MetricReport(metric=f"eca.{config.run_id}", config_hash=config.config_hash,
                              steps=[log.header.step])
        for layer, co in eca_per_layer(log).items():
            report.add_matrix(f"L{layer}", co.matrix, labels)
            report.parameters[f"L{layer}.empty_rows"] = co.empty_rows
            name = f"eca_{config.run_id}_layer{layer}"
            result.artifacts.append(emit_plot(co.matrix, PlotKind.HEATMAP, ctx.layout.plot(f"{name}.svg"),
                                              title=f"Expert co-activation, layer {layer}",
                                              x_label="expert j", y_label="expert i", labels=labels))
            png = ctx.layout.plot(f"{name}.png")
            png.write_bytes(render_heatmap_png(co.matrix, labels, title=f"layer {layer}"))
            result.artifacts.append(png)
        result.reports.append(report)
    return result


def recipe_similarity(ctx: RecipeContext) -> RecipeResult:
    """Mean pairwise expert similarity per layer over each run's checkpoints."""
    result = RecipeResult()
    for run_dir in _need_runs(ctx, "similarity"):
        config = run_config_of(run_dir)
        curves = similarity_curves(list_checkpoints(RunLayout(run_dir).checkpoints))
        series = {f"layer {layer}": points for layer, points in sorted(curves.items())}
        report = MetricReport(metric=f"similarity.{config.run_id}", config_hash=config.config_hash,
                              parameters={"aggregation": "pairwise mean", "weights": "w_out"})
        _curve_entries(report, config.run_id, series)
        result.reports.append(report)
        _plot_curves(ctx, result, f"similarity_{config.run_id}", series,
                     f"Expert similarity ({config.run_id})", "mean cosine")
    return result


def _ppl_table(ctx: RecipeContext, name: str, settings: Sequence[Tuple[str, RoutingOverrides]],
               baseline: str) -> RecipeResult:
    result = RecipeResult()
    for label, path in _need_checkpoints(ctx, name).items():
        ppls = {setting: evaluate(path, overrides=overrides).ppl for setting, overrides in settings}
        report = MetricReport(metric=f"{name}.{label}", parameters={"checkpoint": str(path)})
        report.config_hash = _checkpoint_hash(path)
        for setting, ppl in ppls.items():
            report.add("table", f"{label}:{setting}:ppl", ppl)
            report.add("table", f"{label}:{setting}:delta", ppl - ppls[baseline])
        result.reports.append(report)
    return result


def _checkpoint_hash(path: Path) -> str:
    return load_checkpoint(path).config_hash


def recipe_drop_top(ctx: RecipeContext) -> RecipeResult:
    """PPL with the top-1 (and top-1,2) experts replaced by the next-ranked ones."""
    settings = [("none", RoutingOverrides())] + [(mode.value, RoutingOverrides(perturbation=mode))
                                                  for mode in Perturbation]
    return _ppl_table(ctx, "drop-top", settings, baseline="none")


def recipe_temperature(ctx: RecipeContext) -> RecipeResult:
    """PPL per checkpoint at tau in {0.1, 1, 10}, with deltas against tau = 1."""
    settings = [(f"tau={tau}", RoutingOverrides(temperature=tau)) for tau in TEMPERATURES]
    return _ppl_table(ctx, "temperature", settings, baseline="tau=1.0")


def _training_base(ctx: RecipeContext, default_steps: int) -> RunConfig:
    """Base config with the step budget applied; evals coincide with checkpoints."""
    steps = ctx.steps or default_steps
    every = ctx.base.checkpoint_every if steps % ctx.base.checkpoint_every == 0 else steps
    return ctx.base.with_changes(total_steps=steps, checkpoint_every=every, eval_every=every)


def recipe_init_std(ctx: RecipeContext) -> RecipeResult:
    """Three SMoE runs differing only in router_init_std; balance-loss curves and window means."""
    base = _training_base(ctx, 1000)
    smoe = MoEConfig.for_variant(Variant.SMOE, n_experts=base.model.moe.n_experts, top_k=base.model.moe.top_k,
                                 expert_dim=base.model.moe.expert_dim, balance_coef=base.model.moe.balance_coef)
    base = base.with_changes(model=replace(base.model, moe=smoe))
    spec = SweepSpec(base=base, axis=SweepAxis.INIT_STD, values=list(INIT_STDS), out_dir=ctx.out_dir,
                     workers=ctx.workers, force=ctx.force)
    sweep = run_sweep(spec)
    result = RecipeResult(artifacts=[sweep.table])
    series: Dict[str, Curve] = {}
    for row in sweep.rows:
        series.setdefault(row["series"], []).append((row["step"], row["balance_loss"]))
    lo, hi = BALANCE_WINDOW
    report = MetricReport(metric="init-std", config_hash=base.config_hash,
                          parameters={"window": [lo, min(hi, base.total_steps)], "values": list(INIT_STDS)})
    for name, points in series.items():
        window = [v for step, v in points if lo <= step <= hi]
        report.add("table", f"{name}:mean_balance", float(np.mean(window)) if window else float("nan"))
    result.reports.append(report)
    _plot_curves(ctx, result, "init_std_balance", series, "Balance loss by router init std", "balance loss")
    return result


def _final_summary(run_dir: Path, label: str, report: MetricReport) -> None:
    evals = read_log(RunLayout(run_dir).eval_log)
    report.add("table", f"{label}:val_ppl", evals[-1]["val_ppl"])
    logs = RunLayout(run_dir).routing_logs()
    if logs:
        for layer, ratio in selection_ratio(RoutingLog.read(logs[-1])).items():
            for expert, value in enumerate(ratio):
                report.add("per_layer", f"{label}:layer={layer}:expert={expert}", float(value))


def recipe_aux_loss(ctx: RecipeContext) -> RecipeResult:
    """Balance/z-loss ablation: val PPL and final selection ratio per setting."""
    base = _training_base(ctx, ctx.base.total_steps)
    configs = {}
    for name, (alpha, z) in AUX_LOSS_SETTINGS.items():
        moe = base.model.moe.with_changes(balance_coef=alpha, z_coef=z)
        configs[name] = base.with_changes(model=replace(base.model, moe=moe), run_id=name)
    ctx.layout.claim(ctx.force)
    dirs = train_many(configs, ctx.out_dir / "runs", ctx.workers, ctx.force)
    report = MetricReport(metric="aux-loss", config_hash=base.config_hash,
                          parameters={name: {"balance_coef": a, "z_coef": z}
                                      for name, (a, z) in AUX_LOSS_SETTINGS.items()})
    for name, run_dir in dirs.items():
        _final_summary(run_dir, name, report)
    series = {name: [(row["step"], row["val_ppl"]) for row in read_log(RunLayout(d).eval_log)]
              for name, d in dirs.items()}
    result = RecipeResult(reports=[report])
    _plot_curves(ctx, result, "aux_loss_val_ppl", series, "Validation PPL by auxiliary loss", "val ppl")
    return result


def recipe_upcycle_shared(ctx: RecipeContext) -> RecipeResult:
    """Shared experts from scratch vs shared experts upcycled from a dense source."""
    base = _training_base(ctx, ctx.base.total_steps)
    moe = base.model.moe
    ctx.layout.claim(ctx.force)
    dense_moe = MoEConfig.for_variant(Variant.DENSE, expert_dim=moe.expert_dim, dense_dim=moe.expert_dim)
    dense = base.with_changes(model=replace(base.model, moe=dense_moe), run_id="dense-source")
    dense_dir = train_many({"dense-source": dense}, ctx.out_dir / "runs", workers=1, force=ctx.force)["dense-source"]
    source = list_checkpoints(RunLayout(dense_dir).checkpoints)[-1]

    shared = MoEConfig.for_variant(Variant.SHARED_V2, n_experts=moe.n_experts, top_k=moe.top_k,
                                   expert_dim=moe.expert_dim, balance_coef=moe.balance_coef)
    shared_base = base.with_changes(model=replace(base.model, moe=shared))
    configs = {"shared-scratch": shared_base.with_changes(run_id="shared-scratch"),
               "shared-upcycled": shared_base.with_changes(run_id="shared-upcycled",
                                                           init_mode=InitMode.UPCYCLE_SHARED_ONLY,
                                                           dense_checkpoint_path=str(source))}
    dirs = train_many(configs, ctx.out_dir / "runs", ctx.workers, ctx.force)

    result = RecipeResult()
    for metric, compute in (("ecr", ecr_curve), ("margin", margin_curve)):
        series = {}
        report = MetricReport(metric=f"upcycle-shared.{metric}", config_hash=shared_base.config_hash,
                              parameters={"dense_source": str(source)})
        for name, run_dir in dirs.items():
            curves = compute(run_logs(run_dir))
            _curve_entries(report, name, curves)
            series[name] = curves["all"]
        result.reports.append(report)
        _plot_curves(ctx, result, f"upcycle_shared_{metric}", series, f"{metric.upper()}: scratch vs upcycled",
                     metric)
    summary = MetricReport(metric="upcycle-shared.ppl", config_hash=shared_base.config_hash)
    for name, run_dir in dirs.items():
        _final_summary(run_dir, name, summary)
    result.reports.append(summary)
    return result


RECIPES: Dict[str, Callable[[RecipeContext], RecipeResult]] = {
    "ecr-curve": recipe_ecr_curve,
    "drop-top": recipe_drop_top,
    "eae": recipe_eae,
    "ewa": recipe_ewa,
    "margin": recipe_margin,
    "similarity": recipe_similarity,
    "init-std": recipe_init_std,
    "eca": recipe_eca,
    "saturation": recipe_saturation,
    "temperature": recipe_temperature,
    "aux-loss": recipe_aux_loss,
    "upcycle-shared": recipe_upcycle_shared,
}

# Recipes that train their own runs claim the output directory themselves
_TRAINING = {"init-std", "aux-loss", "upcycle-shared"}


def run_recipe(name: str, ctx: RecipeContext) -> RecipeResult:
    if name not in RECIPES:
        raise ConfigError(f"unknown recipe '{name}', expected one of {sorted(RECIPES)}")
    if name not in _TRAINING:
        ctx.layout.claim(ctx.force)
    return _finish(ctx, name, RECIPES[name](ctx))


def report_run(run_dir: Path) -> RecipeResult:
    """Bundle a run's logs into reports/ (CSV + JSON) and plots/ (SVG)."""
    run_dir = Path(run_dir)
    layout = RunLayout(run_dir)
    config = run_config_of(run_dir)
    ctx = RecipeContext(out_dir=run_dir, base=config, runs=[run_dir])
    result = RecipeResult()

    train_rows = read_log(layout.train_log)
    for column in ("ce_loss", "balance_loss", "z_loss", "grad_norm", "lr"):
        points = [(row["step"], row[column]) for row in train_rows]
        if points:
            result.artifacts.append(emit_plot({column: points}, PlotKind.LINE, layout.plot(f"{column}.svg"),
                                              title=f"{column} ({config.run_id})", x_label="step",
                                              y_label=column))
    eval_rows = read_log(layout.eval_log)
    ppl = MetricReport(metric="val_ppl", config_hash=config.config_hash, steps=[r["step"] for r in eval_rows])
    for row in eval_rows:
        ppl.add("curve", f"step={row['step']}", row["val_ppl"])
    result.reports.append(ppl)
    if eval_rows:
        result.artifacts.append(emit_plot({"val_ppl": [(r["step"], r["val_ppl"]) for r in eval_rows]},
                                          PlotKind.LINE, layout.plot("val_ppl.svg"),
                                          title=f"Validation PPL ({config.run_id})", x_label="step",
                                          y_label="ppl"))

    if not config.model.moe.is_dense and layout.routing_logs():
        analyses = [recipe_margin, recipe_saturation, recipe_eae, recipe_eca]
        if len(layout.routing_logs()) >= 2:
            analyses.append(recipe_ecr_curve)
        if config.model.moe.n_experts >= 2:
            analyses.append(recipe_similarity)
        if config.model.moe.top_k >= 2:
            analyses.append(recipe_ewa)
        for analysis in analyses:
            part = analysis(ctx)
            result.reports.extend(part.reports)
            result.artifacts.extend(part.artifacts)
    return _finish(ctx, "summary", result)
