"""Training loop, evaluation and resumable runs for the controlled vision transformer."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import ArrayDataset, load_datasets
from .errors import ConfigError, ContractError, NumericalError
from .losses import tpc_losses
from .metrics import CsvStreamSink, MetricsWriter, count_flops
from .model import TpcViT, build_model
from .optim import Adam, CosineSchedule

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.bin"
METRICS_NAME = "metrics.csv"
TRACE_NAME = "trace.csv"


@dataclass
class StepResult:
    step: int
    losses: dict
    lr: float
    mean_depth: float
    active_tokens_mean: float
    halting_histogram: np.ndarray


def _records_dump(records) -> list:
    dump = []
    for r in records:
        dump.append(
            {
                "layer": r.layer,
                "pause": np.asarray(r.pause).tolist(),
                "restart": np.asarray(r.restart).tolist(),
                "b_raw": np.asarray(r.b_raw).tolist(),
                "cumulation": np.asarray(r.cumulation).tolist(),
                "mask_after": np.asarray(r.mask_after).astype(int).tolist(),
            }
        )
    return dump


def train_step(model: TpcViT, images, labels, optim: Adam, trace=None, step: int = 0) -> StepResult:
    """One forward, backward and Adam update; the schedule advances with the optimizer step."""
    if len(labels) == 0:
        raise ContractError("train_step needs a non-empty batch")
    optim.zero_grad()
    try:
        out = model.forward(images, trace=trace, step=step)
    except NumericalError as exc:
        raise NumericalError(f"step {step}: {exc}", _records_dump(exc.records or [])) from exc
    losses = tpc_losses(out, labels, model.tpc, model.config.depth)
    values = losses.as_floats()
    if not all(math.isfinite(v) for v in values.values()):
        raise NumericalError(f"non-finite loss at step {step}: {values}", _records_dump(out.records))
    losses.final.backward()
    lr = optim.step()
    depths = out.patch_halting_layers()
    hist = np.bincount(depths.reshape(-1), minlength=model.config.depth + 1)[1:]
    counts = out.mean_active_per_layer()
    active = float(np.mean(counts)) if counts else float(model.config.num_tokens)
    return StepResult(step, values, lr, out.mean_depth(), active, hist)


@dataclass
class EvalResult:
    top1: float
    top5: float
    mean_depth: float
    active_per_layer: list
    flops: int
    dense_flops: int

    def as_dict(self) -> dict:
        return {
            "top1": self.top1,
            "top5": self.top5,
            "mean_depth": self.mean_depth,
            "active_per_layer": list(self.active_per_layer),
            "flops": self.flops,
            "dense_flops": self.dense_flops,
        }


def evaluate(model: TpcViT, dataset: ArrayDataset, batch_size: int = 128) -> EvalResult:
    """Accuracy, halting statistics and per-image FLOPs implied by the measured active counts."""
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    k = min(5, model.config.num_classes)
    hit1 = hit5 = 0
    depth_sum = 0.0
    active = np.zeros(model.config.depth)
    with T.no_grad():
        for images, labels in dataset.batches(batch_size):
            out = model.forward(images.astype(model.dtype))
            logits = out.logits.data
            top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
            hit1 += int((top[:, 0] == labels).sum())
            hit5 += int((top == labels[:, None]).any(axis=1).sum())
            depth_sum += float(out.patch_halting_layers().mean(axis=1).sum()) if model.config.depth else 0.0
            if model.config.depth:
                active += np.asarray(out.mean_active_per_layer()) * len(labels)
    n = len(dataset)
    active = active / n
    ledger = count_flops(model.config, [max(1, int(round(a))) for a in active], model.tpc)
    return EvalResult(hit1 / n, hit5 / n, depth_sum / n, active.tolist(), ledger.total, ledger.dense_equivalent)


# -- runs --------------------------------------------------------------------------


def _check_shapes(cfg: RunConfig, data: ArrayDataset) -> None:
    _, chans, height, width = data.images.shape
    m = cfg.model
    if chans != m.in_chans:
        raise ConfigError(f"data has {chans} channels, model.in_chans is {m.in_chans}", "model.in_chans")
    if height != m.image_size or width != m.image_size:
        raise ConfigError(f"data images are {height}x{width}, model.image_size is {m.image_size}", "model.image_size")
    if data.num_classes != m.num_classes:
        raise ConfigError(f"data has {data.num_classes} classes, model.num_classes is {m.num_classes}", "model.num_classes")


@dataclass
class Run:
    """Everything a training run mutates, kept together so it can be checkpointed."""

    cfg: RunConfig
    model: TpcViT
    optim: Adam
    rng: np.random.Generator
    train_data: ArrayDataset
    eval_data: ArrayDataset
    step: int = 0
    epoch_rng_state: dict = field(default_factory=dict)

    @property
    def steps_per_epoch(self) -> int:
        return max(1, math.ceil(len(self.train_data) / self.cfg.train.batch_size))

    @property
    def total_steps(self) -> int:
        return self.cfg.train.epochs * self.steps_per_epoch

    def checkpoint(self) -> Checkpoint:
        tensors = {k: np.ascontiguousarray(v) for k, v in self.model.state_dict().items()}
        return Checkpoint(self.cfg.to_dict(), tensors, self.optim.state, self.epoch_rng_state, self.step)


def build_run(cfg: RunConfig, datasets=None) -> Run:
    dtype = np.float32 if cfg.train.dtype == "float32" else np.float64
    train_data, eval_data = datasets if datasets is not None else load_datasets(cfg.data)
    _check_shapes(cfg, train_data)
    train_data, eval_data = train_data.astype(dtype), eval_data.astype(dtype)
    model = build_model(cfg.model, cfg.tpc, seed=cfg.train.seed, dtype=dtype)
    run = Run(cfg, model, None, np.random.default_rng(cfg.train.seed), train_data, eval_data)
    warmup = int(cfg.optim.warmup_frac * run.total_steps)
    schedule = CosineSchedule(cfg.optim.lr, max(run.total_steps, 1), warmup, cfg.optim.min_lr_ratio)
    o = cfg.optim
    run.optim = Adam(model.named_parameters(), schedule, o.beta1, o.beta2, o.eps, o.weight_decay)
    run.epoch_rng_state = run.rng.bit_generator.state
    return run


def restore_run(run: Run, ckpt: Checkpoint) -> None:
    """Load model, optimizer, shuffle RNG and step from a checkpoint into a freshly built run."""
    run.model.load_state_dict(ckpt.tensors)
    params = dict(run.model.named_parameters())
    if set(ckpt.optim.m) != set(params):
        raise ContractError("checkpoint optimizer state does not match the model parameters")
    run.optim.state.step = ckpt.optim.step
    for name in params:
        run.optim.state.m[name] = ckpt.optim.m[name].astype(params[name].dtype).copy()
        run.optim.state.v[name] = ckpt.optim.v[name].astype(params[name].dtype).copy()
    run.rng.bit_generator.state = ckpt.rng_state
    run.epoch_rng_state = ckpt.rng_state
    run.step = ckpt.step


@dataclass
class TrainResult:
    history: list
    final_eval: EvalResult | None
    run: Run


def train(cfg: RunConfig, out_dir=None, resume=None, datasets=None, max_steps: int | None = None,
          on_step=None) -> TrainResult:
    """Train per ``cfg``; with ``out_dir`` write metrics, trace and checkpoints there.

    ``resume`` is a checkpoint path. ``max_steps`` stops early (used to test
    resumption); the learning-rate schedule still spans the full run.
    """
    run = build_run(cfg, datasets)
    out = Path(out_dir) if out_dir is not None else None
    if resume is not None:
        restore_run(run, load_checkpoint(resume))
    metrics = trace = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics = MetricsWriter(out / METRICS_NAME, append=resume is not None)
        if cfg.train.trace:
            trace = CsvStreamSink(out / TRACE_NAME, append=resume is not None)
    history = []
    stop = run.total_steps if max_steps is None else min(run.total_steps, max_steps)
    bs = cfg.train.batch_size
    with T.debug_mode(cfg.train.debug):
        while run.step < stop:
            # each epoch's order comes from the RNG state saved at its start
            run.rng.bit_generator.state = run.epoch_rng_state
            order = run.rng.permutation(len(run.train_data))
            skip = run.step % run.steps_per_epoch
            for b in range(skip, run.steps_per_epoch):
                if run.step >= stop:
                    break
                idx = order[b * bs : (b + 1) * bs]
                res = train_step(run.model, run.train_data.images[idx], run.train_data.labels[idx],
                                 run.optim, trace, run.step)
                history.append(res)
                if metrics is not None:
                    metrics.write(res.step, res.losses, res.mean_depth, res.active_tokens_mean, res.lr)
                if on_step is not None:
                    on_step(res)
                run.step += 1
                if b == run.steps_per_epoch - 1:
                    run.epoch_rng_state = run.rng.bit_generator.state
                every = cfg.train.checkpoint_every
                if out is not None and every and run.step % every == 0:
                    save_checkpoint(out / CHECKPOINT_NAME, run.checkpoint())
    if out is not None:
        save_checkpoint(out / CHECKPOINT_NAME, run.checkpoint())
    final = evaluate(run.model, run.eval_data, bs) if len(run.eval_data) else None
    if out is not None and final is not None:
        (out / "eval.json").write_text(json.dumps(final.as_dict(), indent=2))
    return TrainResult(history, final, run)


def load_model(checkpoint_path) -> tuple:
    """Rebuild ``(RunConfig, model)`` from a checkpoint file."""
    ckpt = load_checkpoint(checkpoint_path)
    cfg = RunConfig.from_dict(ckpt.config)
    dtype = np.float32 if cfg.train.dtype == "float32" else np.float64
    model = build_model(cfg.model, cfg.tpc, seed=cfg.train.seed, dtype=dtype)
    model.load_state_dict(ckpt.tensors)
    return cfg, model
