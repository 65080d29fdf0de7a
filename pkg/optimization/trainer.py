from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Union
import csv
import json
import logging

import numpy as np
from tqdm import tqdm

from core.errors import ConfigError, NonFiniteError
from core.ops import cross_entropy
from core.rng import Rng
from core.serialization import from_plain, stable_hash, to_plain
from core.tensor import Tensor
from core.types import InitMode, UpcycleMode
from model.config import ModelConfig
from model.transformer import build_model, forward_lm
from moe.routing import RoutingOverrides
from moe.upcycle import upcycle
from output.checkpoint import load_checkpoint, save_checkpoint
from output.layout import RunLayout
from preprocessing.config_file import dict_to_sections, write_sections
from preprocessing.corpus import Corpus, make_batches
from .adamw import AdamW, AdamWParameters
from .evaluation import EvalResult, evaluate_params
from .schedule import LearningRateSchedule, ScheduleParameters, clip_grad_norm

logger = logging.getLogger(__name__)

TRAIN_LOG_HEADER = ("step", "lr", "ce_loss", "balance_loss", "z_loss", "grad_norm")
EVAL_LOG_HEADER = ("step", "val_ppl")


@dataclass
class RunConfig:
    """Everything that determines one training run."""
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 2.5e-4
    warmup_steps: int = 100
    total_steps: int = 3000
    batch_size: int = 16
    grad_clip: float = 0.1
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    min_lr_mult: float = 0.1
    seed: int = 42
    checkpoint_every: int = 300
    eval_every: int = 300
    log_routing_on_eval: bool = True
    init_mode: InitMode = InitMode.SCRATCH
    dense_checkpoint_path: Optional[str] = None
    corpus_paths: List[str] = field(default_factory=list)
    val_fraction: float = 0.005
    min_val_tokens: int = 0
    eval_max_windows: int = 0  # 0: the whole validation split
    eval_batch_size: int = 16
    log_every: int = 50
    run_id: str = "run"

    def validate(self) -> None:
        self.model.validate()
        for name in ("total_steps", "batch_size", "checkpoint_every", "eval_every", "eval_batch_size", "log_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup_steps must be non-negative, got {self.warmup_steps}")
        if self.lr <= 0 or self.grad_clip <= 0:
            raise ConfigError("lr and grad_clip must be positive")
        if self.total_steps % self.checkpoint_every:
            raise ConfigError(f"checkpoint_every={self.checkpoint_every} must divide total_steps={self.total_steps}")
        if self.init_mode != InitMode.SCRATCH:
            if not self.dense_checkpoint_path:
                raise ConfigError(f"init_mode {self.init_mode.value} needs dense_checkpoint_path")
            if self.model.moe.is_dense:
                raise ConfigError("upcycling needs a MoE variant")
        if self.init_mode == InitMode.UPCYCLE_SHARED_ONLY and not self.model.moe.variant.has_shared:
            raise ConfigError(f"upcycle_shared_only needs a shared-expert variant, "
                              f"got {self.model.moe.variant.value}")

    @property
    def config_hash(self) -> str:
        return stable_hash(self.to_dict())

    def with_changes(self, **changes: Any) -> "RunConfig":
        return replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        return to_plain(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        return from_plain(cls, data)


@dataclass
class TrainResult:
    layout: RunLayout
    final_step: int
    checkpoints: List[Path] = field(default_factory=list)
    train_rows: List[Dict[str, float]] = field(default_factory=list)
    eval_rows: List[Dict[str, float]] = field(default_factory=list)


class _CsvLog:
    """Append-only CSV with a fixed header."""

    def __init__(self, path: Path, header):
        self.path = path
        self.header = header
        with open(path, "w", newline="", encoding="utf-8") as f:
            csv.writer(f, lineterminator="\n").writerow(header)

    def append(self, row: Dict[str, float]) -> None:
        with open(self.path, "a", newline="", encoding="utf-8") as f:
            csv.writer(f, lineterminator="\n").writerow(
                [row[k] if k == "step" else repr(float(row[k])) for k in self.header])


def read_log(path: Union[str, Path]) -> List[Dict[str, float]]:
    """Rows of a train/eval log CSV as dicts (step as int)."""
    with open(path, newline="", encoding="utf-8") as f:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(f)]


def initial_params(config: RunConfig, rng: Rng) -> Dict[str, Tensor]:
    """Fresh weights, or weights upcycled from the dense checkpoint."""
    if config.init_mode == InitMode.SCRATCH:
        return build_model(config.model, rng)
    dense = load_checkpoint(config.dense_checkpoint_path)
    mode = UpcycleMode.FULL if config.init_mode == InitMode.UPCYCLE_FULL else UpcycleMode.SHARED_ONLY
    logger.info("upcycling from %s (step %d)", config.dense_checkpoint_path, dense.step)
    return upcycle(dense.arrays, config.model, mode, rng)


class Trainer:
    """
    Runs one training job into a run directory.

    Loss = CE + balance + z. Checkpoints are written at step 0 and every
    checkpoint_every steps; validation passes (with routing logs) at step 0
    and every eval_every steps.
    """

    def __init__(self, config: RunConfig, out_dir: Union[str, Path], corpus: Optional[Corpus] = None,
                 force: bool = False, progress: bool = True):
        config.validate()
        self.config = config
        self.layout = RunLayout(Path(out_dir)).prepare(force=force)
        write_sections(dict_to_sections(config.to_dict()), self.layout.config_path)
        self.corpus = corpus or Corpus.from_files(config.corpus_paths, config.val_fraction, config.min_val_tokens)
        self.progress = progress

        rng = Rng(config.seed)
        self.params = initial_params(config, rng.fork("init"))
        self.batches: Iterator = make_batches(self.corpus.train_tokens, config.model.seq_len,
                                              config.batch_size, rng.fork("data"))
        self.optimizer = AdamW(self.params, AdamWParameters(beta1=config.beta1, beta2=config.beta2,
                                                            eps=config.eps, weight_decay=config.weight_decay))
        self.schedule = LearningRateSchedule(ScheduleParameters(base_lr=config.lr, warmup_steps=config.warmup_steps,
                                                                total_steps=config.total_steps,
                                                                min_mult=config.min_lr_mult))
        self.train_log = _CsvLog(self.layout.train_log, TRAIN_LOG_HEADER)
        self.eval_log = _CsvLog(self.layout.eval_log, EVAL_LOG_HEADER)
        self.result = TrainResult(layout=self.layout, final_step=0)

    def save(self, step: int) -> Path:
        path = save_checkpoint(self.params, step, self.layout.checkpoint(step), self.config.to_dict())
        self.result.checkpoints.append(path)
        return path

    def evaluate(self, step: int) -> EvalResult:
        config = self.config
        result = evaluate_params(self.params, config.model, self.corpus.val_tokens,
                                 max_windows=config.eval_max_windows, batch_size=config.eval_batch_size,
                                 collect_routing=config.log_routing_on_eval, run_id=config.run_id, step=step)
        if result.routing is not None:
            result.routing.write(self.layout.routing_log(step))
        row = {"step": step, "val_ppl": result.ppl}
        self.eval_log.append(row)
        self.result.eval_rows.append(row)
        logger.info("step %d: validation ppl %.3f over %d tokens", step, result.ppl, result.n_tokens)
        return result

    def train_step(self, step: int) -> Dict[str, float]:
        config = self.config
        inputs, targets = next(self.batches)
        lr = self.schedule.lr_at(step)
        self.optimizer.zero_grad()
        out = forward_lm(self.params, inputs, config.model)
        n = targets.size
        ce = cross_entropy(out.logits.reshape(n, config.model.vocab_size), targets.reshape(-1))
        loss = ce + out.aux.balance + out.aux.z
        values = {"step": step, "lr": lr, "ce_loss": float(ce.data), "balance_loss": out.aux.balance_value,
                  "z_loss": out.aux.z_value}
        if not np.isfinite(float(loss.data)):
            raise NonFiniteError(f"non-finite loss at step {step}: ce={values['ce_loss']}, "
                                 f"balance={values['balance_loss']}, z={values['z_loss']}")
        loss.backward()
        grads = {name: p.grad for name, p in self.params.items() if p.grad is not None}
        clipped, norm = clip_grad_norm(grads, config.grad_clip)
        values["grad_norm"] = norm
        self.optimizer.step(lr, clipped)
        return values

    def _fail(self, step: int, error: Exception) -> None:
        """Diagnostic checkpoint plus error.json for a run that hit non-finite values."""
        path = save_checkpoint(self.params, step, self.layout.diagnostic_checkpoint(step), self.config.to_dict())
        record = {"error": type(error).__name__, "message": str(error), "step": step,
                  "diagnostic_checkpoint": str(path), "config_hash": self.config.config_hash}
        self.layout.error_report.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        logger.error("run %s aborted at step %d: %s", self.config.run_id, step, error)

    def run(self) -> TrainResult:
        config = self.config
        logger.info("training %s (%s, config %s) for %d steps", config.run_id, config.model.moe.variant.value,
                    config.config_hash, config.total_steps)
        self.save(0)
        self.evaluate(0)
        bar = tqdm(range(1, config.total_steps + 1), desc=config.run_id, disable=not self.progress)
        for step in bar:
            try:
                values = self.train_step(step)
            except NonFiniteError as e:
                self._fail(step, e)
                raise
            self.train_log.append(values)
            self.result.train_rows.append(values)
            self.result.final_step = step
            bar.set_postfix(loss=f"{values['ce_loss']:.3f}", lr=f"{values['lr']:.2e}")
            if step % config.log_every == 0:
                logger.info("step %d: ce %.4f balance %.4f z %.5f grad_norm %.3f lr %.2e", step,
                            values["ce_loss"], values["balance_loss"], values["z_loss"],
                            values["grad_norm"], values["lr"])
            if step % config.eval_every == 0:
                self.evaluate(step)
            if step % config.checkpoint_every == 0:
                self.save(step)
        return self.result


def train(config: RunConfig, out_dir: Union[str, Path], corpus: Optional[Corpus] = None,
          force: bool = False, progress: bool = True) -> TrainResult:
    """Train one run; returns the checkpoint series and log rows."""
    return Trainer(config, out_dir, corpus=corpus, force=force, progress=progress).run()


def evaluate(checkpoint_path: Union[str, Path], split: str = "val",
             overrides: Optional[RoutingOverrides] = None, corpus: Optional[Corpus] = None,
             max_windows: Optional[int] = None) -> EvalResult:
    """
    Perplexity (and routing log) of a saved checkpoint on a corpus split.

    The corpus defaults to the one recorded in the checkpoint's run config.
    """
    checkpoint = load_checkpoint(checkpoint_path)
    config = RunConfig.from_dict(checkpoint.run_config)
    if corpus is None:
        corpus = Corpus.from_files(config.corpus_paths, config.val_fraction, config.min_val_tokens)
    return evaluate_params(checkpoint.params, config.model, corpus.split(split), overrides=overrides,
                           max_windows=config.eval_max_windows if max_windows is None else max_windows,
                           batch_size=config.eval_batch_size, run_id=config.run_id, step=checkpoint.step)
