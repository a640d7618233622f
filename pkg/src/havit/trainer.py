"""AdamW training with warmup + cosine decay, and the alpha-sweep driver."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from havit import tensor as T
from havit.attention import EVAL_STREAM, TRAIN_STREAM, BlendConfig, InitStrategy
from havit.data import Dataset, batches, compute_stats, num_batches, ChannelStats
from havit.errors import ConfigurationError, NumericalError
from havit.model import HAViT, ModelConfig
from havit.tensor import Tensor

log = logging.getLogger(__name__)

DEFAULT_ALPHA_GRID = (0.10, 0.25, 0.40, 0.45, 0.50, 0.60, 0.75, 0.80, 0.90)

METRICS_HEADER = ("epoch", "train_loss", "train_acc", "eval_acc", "lr")
SWEEP_HEADER = ("alpha", "init", "final_acc", "delta_vs_baseline")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    base_lr: float = 0.003
    weight_decay: float = 5e-2
    batch_size: int = 128
    warmup_epochs: int = 10
    label_smoothing: float = 0.1
    seed: int = 0
    alpha_grid: tuple[float, ...] = DEFAULT_ALPHA_GRID
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    # Stop after this many optimizer steps (0 = run all epochs).
    max_steps: int = 0

    def __post_init__(self):
        object.__setattr__(self, "alpha_grid", tuple(float(a) for a in self.alpha_grid))
        if self.epochs < 1 or self.batch_size < 1 or self.warmup_epochs < 0:
            raise ConfigurationError("epochs and batch_size must be >= 1, warmup_epochs >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigurationError(f"label_smoothing must lie in [0, 1), got {self.label_smoothing}")
        if self.base_lr < 0 or self.weight_decay < 0:
            raise ConfigurationError("base_lr and weight_decay must be non-negative")


def lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to zero at the last step."""
    if steps_per_epoch <= 0:
        raise ConfigurationError(f"steps_per_epoch must be positive, got {steps_per_epoch}")
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    warmup = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warmup:
        return cfg.base_lr * step / warmup
    if step >= total:
        return 0.0
    progress = (step - warmup) / (total - warmup)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8


def _grad_for(grads, name: str, p: Tensor) -> np.ndarray:
    g = grads[name] if name in grads else grads[p]
    return g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)


def adamw_step(params: dict[str, Tensor], grads, state: OptimizerState, lr: float,
               wd: float) -> tuple[dict[str, Tensor], OptimizerState]:
    """Decoupled weight decay, then a bias-corrected Adam update.

    ``grads`` may be keyed by parameter name or by the parameter tensor (as
    returned by :func:`havit.tensor.backward`). Returns fresh parameter
    tensors; ``state`` is updated in place and returned.
    """
    for name, p in params.items():
        if not np.isfinite(_grad_for(grads, name, p)).all():
            raise NumericalError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    updated = {}
    for name, p in params.items():
        g = _grad_for(grads, name, p)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        w = p.data - lr * wd * p.data
        w = w - lr * (m / c1) / (np.sqrt(v / c2) + state.eps_adam)
        updated[name] = Tensor(w, requires_grad=True, name=name)
    return updated, state


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    eval_acc: float
    lr: float


@dataclass
class FitResult:
    metrics: list[EpochMetrics]
    lr_trace: list[float]
    stats: ChannelStats
    steps: int


def evaluate(model: HAViT, ds: Dataset, stats: ChannelStats | None, batch_size: int = 256,
             label_smoothing: float = 0.0) -> tuple[float, float]:
    """Mean loss and accuracy; the H_0 stream is reset to the eval stream."""
    total_loss, correct = 0.0, 0
    for k, batch in enumerate(batches(ds, batch_size, stats=stats, shuffle=False)):
        trace = model.forward(batch.images, batch_counter=k, stream=EVAL_STREAM)
        loss = T.cross_entropy_smoothed(T.detach(trace.logits), batch.labels, label_smoothing)
        total_loss += loss.item() * len(batch.labels)
        correct += int((trace.logits.data.argmax(axis=1) == batch.labels).sum())
    return total_loss / len(ds), correct / len(ds)


def format_float(x: float) -> str:
    return f"{x:.10g}"


def metrics_csv(metrics: Sequence[EpochMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for m in metrics:
        w.writerow([m.epoch, format_float(m.train_loss), format_float(m.train_acc),
                    format_float(m.eval_acc), format_float(m.lr)])
    return buf.getvalue()


def fit(model: HAViT, dataset: Dataset, cfg: TrainConfig, eval_dataset: Dataset | None = None,
        out_dir=None, on_epoch: Callable[[EpochMetrics], None] | None = None) -> FitResult:
    """Train ``model`` in place; deterministic given ``cfg.seed`` and the model's blend seed.

    Writes ``metrics.csv`` and ``model.ckpt`` into ``out_dir`` when given.
    """
    mc = model.config
    if dataset.num_classes != mc.num_classes:
        raise ConfigurationError(
            f"dataset has {dataset.num_classes} classes but the model predicts {mc.num_classes}")
    if dataset.image_shape != (mc.channels, mc.image_height, mc.image_width):
        raise ConfigurationError(
            f"dataset images {dataset.image_shape} do not match model input "
            f"{(mc.channels, mc.image_height, mc.image_width)}")
    eval_dataset = dataset if eval_dataset is None else eval_dataset
    stats = compute_stats(dataset)
    spe = num_batches(dataset, cfg.batch_size)
    state = OptimizerState(beta1=cfg.beta1, beta2=cfg.beta2, eps_adam=cfg.eps_adam)
    params = model.params
    step = 0
    lr_trace: list[float] = []
    metrics: list[EpochMetrics] = []
    done = False
    for epoch in range(cfg.epochs):
        loss_sum, correct, seen = 0.0, 0, 0
        lr = 0.0
        for batch in batches(dataset, cfg.batch_size, cfg.seed, stats, epoch):
            lr = lr_at(step, spe, cfg)
            trace = model.forward(batch.images, batch_counter=step, stream=TRAIN_STREAM)
            loss = T.cross_entropy_smoothed(trace.logits, batch.labels, cfg.label_smoothing)
            grads = T.backward(loss, params.values())
            params, state = adamw_step(params, grads, state, lr, cfg.weight_decay)
            model.params = params
            lr_trace.append(lr)
            n = len(batch.labels)
            loss_sum += loss.item() * n
            correct += int((trace.logits.data.argmax(axis=1) == batch.labels).sum())
            seen += n
            step += 1
            if cfg.max_steps and step >= cfg.max_steps:
                done = True
                break
        _, eval_acc = evaluate(model, eval_dataset, stats, batch_size=max(cfg.batch_size, 256))
        m = EpochMetrics(epoch + 1, loss_sum / seen, correct / seen, eval_acc, lr)
        metrics.append(m)
        log.info("epoch %d loss %.4f train_acc %.4f eval_acc %.4f lr %.3g",
                 m.epoch, m.train_loss, m.train_acc, m.eval_acc, m.lr)
        if on_epoch is not None:
            on_epoch(m)
        if done:
            break
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(metrics_csv(metrics))
        model.save(out / "model.ckpt")
    return FitResult(metrics, lr_trace, stats, step)


# -- alpha sweep -------------------------------------------------------------

@dataclass(frozen=True)
class ModelFactory:
    """Builds sweep models from one base config with shared weight init."""

    base: ModelConfig
    seed: int = 0

    def __call__(self, alpha: float | None, init: InitStrategy | None, blend_seed: int) -> HAViT:
        if alpha is None:
            config = replace(self.base, baseline_mode=True)
        else:
            blend = replace(self.base.blend, alpha=alpha, init_strategy=init, seed=blend_seed)
            config = replace(self.base, blend=blend, baseline_mode=False)
        return HAViT(config, seed=self.seed)


@dataclass(frozen=True)
class SweepRow:
    alpha: float | None  # None marks the baseline row
    init: str
    final_acc: float
    delta_vs_baseline: float


def _run_cell(args) -> float:
    factory, alpha, init, blend_seed, dataset, eval_dataset, cfg = args
    model = factory(alpha, init, blend_seed)
    return fit(model, dataset, cfg, eval_dataset).metrics[-1].eval_acc


def alpha_sweep(factory: Callable, dataset: Dataset, cfg: TrainConfig,
                alpha_grid: Sequence[float] | None = None,
                strategies: Sequence = (InitStrategy.RANDOM, InitStrategy.ZERO),
                eval_dataset: Dataset | None = None, jobs: int = 1) -> list[SweepRow]:
    """Train a baseline plus one model per (alpha, init) cell.

    Every cell shares the weight-init and data-order seed so deltas are
    paired; cell ``i`` (baseline = 0) draws its H_0 stream from
    ``cfg.seed + i``. Accuracy is the final-epoch eval accuracy.
    """
    grid = list(cfg.alpha_grid if alpha_grid is None else alpha_grid)
    if not grid:
        raise ConfigurationError("alpha grid is empty")
    strategies = [InitStrategy(s) for s in strategies]
    if not strategies:
        raise ConfigurationError("no init strategies given")
    cells = [(None, None)] + [(a, s) for a in grid for s in strategies]
    tasks = [(factory, a, s, cfg.seed + i, dataset, eval_dataset, cfg) for i, (a, s) in enumerate(cells)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            accs = list(pool.map(_run_cell, tasks))
    else:
        accs = [_run_cell(t) for t in tasks]
    base = accs[0]
    rows = [SweepRow(None, "none", base, 0.0)]
    for (a, s), acc in zip(cells[1:], accs[1:]):
        rows.append(SweepRow(a, s.value, acc, acc - base))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        alpha = "baseline" if r.alpha is None else f"{r.alpha:.2f}"
        w.writerow([alpha, r.init, format_float(r.final_acc), format_float(r.delta_vs_baseline)])
    return buf.getvalue()


def format_delta(acc: float, delta: float) -> str:
    """``57.79 (↓0.03)`` style cell; values are percentages."""
    d = round(100.0 * delta, 2)
    arrow = "↑" if d > 0 else "↓" if d < 0 else "±"
    return f"{100.0 * acc:.2f} ({arrow}{abs(d):.2f})"


def render_sweep_table(rows: Sequence[SweepRow], title: str = "Results with alpha variation") -> str:
    base = next(r for r in rows if r.alpha is None)
    cells = {(r.alpha, r.init): r for r in rows if r.alpha is not None}
    alphas = sorted({a for a, _ in cells})
    inits = [i for i in ("random", "zero") if any(k[1] == i for k in cells)]
    header = ["alpha"] + [f"Accuracy ({i.capitalize()})" for i in inits]
    body = []
    for a in alphas:
        line = [f"{a:.2f}"]
        for i in inits:
            r = cells.get((a, i))
            line.append("-" if r is None else format_delta(r.final_acc, r.delta_vs_baseline))
        body.append(line)
    widths = [max(len(row[c]) for row in [header] + body) for c in range(len(header))]
    fmt = lambda row: "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
    lines = [f"{title} (Baseline ViT accuracy = {100.0 * base.final_acc:.2f})", fmt(header),
             "-" * len(fmt(header))]
    lines += [fmt(row) for row in body]
    return "\n".join(lines) + "\n"
