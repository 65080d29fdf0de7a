from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Union
import csv
import logging
import math
import os

from core.errors import ConfigError
from core.types import Perturbation, Variant
from moe.config import MoEConfig
from moe.routing import RoutingOverrides
from optimization.trainer import RunConfig, evaluate, read_log, train
from output.layout import RunLayout
from preprocessing.config_file import apply_overrides, read_sections, sections_to_dict

logger = logging.getLogger(__name__)

BALANCE_HEADER = ("series", "step", "balance_loss", "config_hash")
EVAL_HEADER = ("series", "ppl", "delta_vs_base", "config_hash")


class SweepAxis(Enum):
    INIT_STD = "init_std"
    TEMPERATURE = "temperature"
    VARIANT = "variant"
    PERTURBATION = "perturbation"

    @property
    def trains(self) -> bool:
        """Training axes launch runs; the others re-evaluate one checkpoint."""
        return self in (SweepAxis.INIT_STD, SweepAxis.VARIANT)


@dataclass
class SweepSpec:
    """One axis of variation over a base run configuration."""
    base: RunConfig
    axis: SweepAxis
    values: List[str]
    out_dir: Path
    checkpoint: Optional[Path] = None  # evaluation axes only
    workers: int = 0  # 0: one process per value, capped at the CPU count
    force: bool = False

    def validate(self) -> None:
        if not self.values:
            raise ConfigError("sweep needs at least one value")
        moe = self.base.model.moe
        try:
            self._validate_values(moe)
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"invalid {self.axis.value} sweep value: {e}") from e
        if not self.axis.trains and self.checkpoint is None:
            raise ConfigError(f"{self.axis.value} sweep needs a checkpoint to evaluate")

    def _validate_values(self, moe: MoEConfig) -> None:
        for raw in self.values:
            if self.axis == SweepAxis.INIT_STD:
                if float(raw) <= 0:
                    raise ConfigError(f"init_std values must be positive, got {raw}")
                if moe.is_dense:
                    raise ConfigError("init_std sweep needs a MoE variant")
            elif self.axis == SweepAxis.TEMPERATURE:
                if float(raw) <= 0:
                    raise ConfigError(f"temperature values must be positive, got {raw}")
            elif self.axis == SweepAxis.VARIANT:
                Variant(raw)
            else:
                RoutingOverrides(perturbation=Perturbation(raw)).validate(moe)

    def series_name(self, value: str) -> str:
        return f"{self.axis.value}={value}"

    def run_config(self, value: str) -> RunConfig:
        model = self.base.model
        if self.axis == SweepAxis.INIT_STD:
            moe = model.moe.with_changes(router_init_std=float(value))
        else:
            moe = MoEConfig.for_variant(Variant(value), n_experts=model.moe.n_experts, top_k=model.moe.top_k,
                                        expert_dim=model.moe.expert_dim,
                                        router_init_std=model.moe.router_init_std,
                                        balance_coef=model.moe.balance_coef, z_coef=model.moe.z_coef)
        return self.base.with_changes(model=replace(model, moe=moe),
                                      run_id=self.series_name(value))

    @classmethod
    def from_file(cls, path: Union[str, Path], overrides: Optional[List[str]] = None) -> "SweepSpec":
        """
        INI spec: the usual [run]/[model]/[moe]/[data] base sections plus

            [sweep]
            axis = init_std
            values = 0.02,0.04,0.06
            out = runs/init_std
            checkpoint = (evaluation axes)
            workers = 0
        """
        sections = apply_overrides(read_sections(path, extra_sections=("sweep",)), overrides)
        sweep = sections.get("sweep")
        if not sweep:
            raise ConfigError(f"sweep spec {path} has no [sweep] section")
        try:
            axis = SweepAxis(sweep["axis"].strip())
            out_dir = Path(sweep["out"].strip())
        except KeyError as e:
            raise ConfigError(f"[sweep] is missing key {e}") from e
        except ValueError as e:
            raise ConfigError(f"unknown sweep axis: {e}") from e
        values = [v.strip() for v in sweep.get("values", "").split(",") if v.strip()]
        checkpoint = sweep.get("checkpoint", "").strip() or None
        spec = cls(base=RunConfig.from_dict(sections_to_dict(sections)), axis=axis, values=values,
                   out_dir=out_dir, checkpoint=Path(checkpoint) if checkpoint else None,
                   workers=int(sweep.get("workers", "0")))
        spec.validate()
        return spec


def _train_child(config_dict: Dict[str, Any], out_dir: str, force: bool) -> str:
    """Entry point of a sweep child process."""
    train(RunConfig.from_dict(config_dict), out_dir, force=force, progress=False)
    return out_dir


@dataclass
class SweepResult:
    run_dirs: List[Path] = field(default_factory=list)
    table: Optional[Path] = None
    rows: List[Dict[str, Any]] = field(default_factory=list)


def merge_balance_logs(series: Dict[str, Path], configs: Dict[str, RunConfig], path: Path) -> List[Dict[str, Any]]:
    """One CSV with the per-step balance loss of every series."""
    rows: List[Dict[str, Any]] = []
    for name, run_dir in series.items():
        config_hash = configs[name].config_hash
        for row in read_log(RunLayout(run_dir).train_log):
            rows.append({"series": name, "step": int(row["step"]), "balance_loss": row["balance_loss"],
                         "config_hash": config_hash})
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=BALANCE_HEADER, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, "balance_loss": repr(float(row["balance_loss"]))})
    return rows


def train_many(configs: Dict[str, RunConfig], root: Path, workers: int = 0, force: bool = False) -> Dict[str, Path]:
    """Train independent runs as child processes; returns {name: run directory} once all finish."""
    dirs = {name: Path(root) / name.replace("=", "_") for name in configs}
    workers = workers or min(len(configs), os.cpu_count() or 1)
    logger.info("training %d runs on %d workers", len(configs), workers)
    if workers == 1:
        for name, config in configs.items():
            _train_child(config.to_dict(), str(dirs[name]), force)
        return dirs
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_train_child, config.to_dict(), str(dirs[name]), force)
                   for name, config in configs.items()]
        for future in futures:
            future.result()
    return dirs


def run_sweep(spec: SweepSpec) -> SweepResult:
    """Train (or evaluate) every value of the axis and aggregate after all complete."""
    spec.validate()
    layout = RunLayout(spec.out_dir).claim(force=spec.force)
    result = SweepResult()
    if spec.axis.trains:
        configs = {spec.series_name(v): spec.run_config(v) for v in spec.values}
        logger.info("sweep over %s", spec.axis.value)
        dirs = train_many(configs, spec.out_dir, spec.workers, spec.force)
        result.run_dirs = list(dirs.values())
        result.table = layout.report("balance_loss.csv")
        result.rows = merge_balance_logs(dirs, configs, result.table)
        return result

    rows = []
    base_hash = spec.base.config_hash
    for value in spec.values:
        if spec.axis == SweepAxis.TEMPERATURE:
            overrides = RoutingOverrides(temperature=float(value))
        else:
            overrides = RoutingOverrides(perturbation=Perturbation(value))
        ppl = evaluate(spec.checkpoint, overrides=overrides).ppl
        rows.append({"series": spec.series_name(value), "ppl": ppl, "config_hash": base_hash})
    base_ppl = evaluate(spec.checkpoint).ppl
    for row in rows:
        row["delta_vs_base"] = row["ppl"] - base_ppl
    result.table = layout.report("eval_sweep.csv")
    with open(result.table, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=EVAL_HEADER, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(float(row[k])) if isinstance(row[k], float) and math.isfinite(row[k])
                                 else row[k]) for k in EVAL_HEADER})
    result.rows = rows
    return result
