"""AdamW training loop, metric streaming and grokking detection."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Literal, Sequence

import numpy as np

from . import diagnostics
from .model import (
    ModelConfig,
    ModelParams,
    embedding_rows,
    loss_and_accuracy,
    loss_and_grads,
    param_shapes,
    save_checkpoint,
    weight_norms,
)
from .rng import make_rng
from .tensor_engine import NonFiniteError
from .zp_dataset import DatasetSplit, label_grid, tokenize_pairs

log = logging.getLogger(__name__)

CSV_COLUMNS = ("epoch", "train_loss", "test_loss", "train_acc", "test_acc", "med", "weight_norm_sum", "wall_ms")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class InitSpec:
    kind: Literal["standard", "circulant"] = "standard"
    std: float = 0.02
    seed: int | None = None  # circulant vector seed; defaults to the run seed

    def __post_init__(self):
        if self.kind not in ("standard", "circulant"):
            raise ValueError(f"unknown init kind {self.kind!r}")
        if self.std <= 0:
            raise ValueError("init std must be positive")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 1.0
    epochs: int = 20_000
    batch_size: int = 0  # 0 = full batch
    seed: int = 0
    init: InitSpec = field(default_factory=InitSpec)
    eval_every: int = 10
    # optional early stop: test_acc >= stop_test_acc for stop_patience consecutive evals
    stop_test_acc: float | None = None
    stop_patience: int = 100

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if isinstance(self.init, dict):
            object.__setattr__(self, "init", InitSpec(**self.init))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MetricsRow:
    epoch: int
    train_loss: float
    test_loss: float
    train_acc: float
    test_acc: float
    med: float
    weight_norm_sum: float
    wall_ms: float
    weight_norm_sq: float = 0.0
    med_raw: float = 0.0

    def csv_row(self) -> list:
        return [getattr(self, c) for c in CSV_COLUMNS]


@dataclass
class GrokkingReport:
    memorization_epoch: int | None
    go_epoch: int | None
    u_acc: float
    l_acc: float
    baseline: float | None = None

    @property
    def disappeared(self) -> bool:
        return self.go_epoch is None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    metrics: list[MetricsRow]
    params: ModelParams
    report: GrokkingReport
    stopped_early: bool = False
    diverged: bool = False


# ------------------------------------------------------------------ init


def circulant(v: np.ndarray, rows: int) -> np.ndarray:
    """``out[i, j] = v[(j - i) mod len(v)]``; rows past ``len(v)`` keep shifting."""
    d = len(v)
    idx = (np.arange(d)[None, :] - np.arange(rows)[:, None]) % d
    return v[idx]


def init_params(cfg: ModelConfig, init: InitSpec | None = None, seed: int = 0) -> ModelParams:
    init = init or InitSpec()
    rng = make_rng(seed, "init")
    params = {name: rng.normal(0.0, init.std, size=shape) for name, shape in param_shapes(cfg).items()}
    if init.kind == "circulant":
        vseed = seed if init.seed is None else init.seed
        v = make_rng(vseed, "init", 1).normal(0.0, init.std, size=cfg.d_model)
        params["W_E"] = circulant(v, cfg.vocab_size)
    return params


# ------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls({k: np.zeros_like(x) for k, x in params.items()}, {k: np.zeros_like(x) for k, x in params.items()})


def adamw_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig) -> tuple[ModelParams, AdamState]:
    """One decoupled-weight-decay Adam update; decay applies to every matrix."""
    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        if g.shape != theta.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {theta.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name} at step {t}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        step = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        new_params[name] = theta - cfg.lr * step - cfg.lr * cfg.weight_decay * theta
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v, t)


# ------------------------------------------------------------------ sinks


class MetricsSink:
    """Append-only CSV + JSONL writer, flushed per row."""

    def __init__(self, csv_path: str | Path | None = None, jsonl_path: str | Path | None = None):
        self._csv = open(csv_path, "w", newline="") if csv_path else None
        self._jsonl = open(jsonl_path, "w") if jsonl_path else None
        if self._csv:
            self._writer = csv.writer(self._csv)
            self._writer.writerow(CSV_COLUMNS)
            self._csv.flush()

    def write(self, row: MetricsRow) -> None:
        if self._csv:
            self._writer.writerow(row.csv_row())
            self._csv.flush()
        if self._jsonl:
            self._jsonl.write(json.dumps(asdict(row)) + "\n")
            self._jsonl.flush()

    def close(self) -> None:
        for f in (self._csv, self._jsonl):
            if f:
                f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics_csv(path: str | Path) -> list[MetricsRow]:
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for r in reader:
            rows.append(
                MetricsRow(
                    epoch=int(r["epoch"]),
                    **{c: float(r[c]) for c in CSV_COLUMNS if c != "epoch"},
                )
            )
    return rows


def read_metrics_jsonl(path: str | Path) -> list[MetricsRow]:
    with open(path) as f:
        return [MetricsRow(**json.loads(line)) for line in f if line.strip()]


# ---------------------------------------------------------------- training


def train(
    split: DatasetSplit,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    sink: MetricsSink | None = None,
    checkpoint_dir: str | Path | None = None,
    callback: Callable[[MetricsRow], None] | None = None,
    params: ModelParams | None = None,
    on_eval: Callable[[MetricsRow, ModelParams], None] | None = None,
) -> TrainResult:
    """Train on ``split.train``; evaluate on ``split.test`` every ``eval_every`` epochs.

    Epoch ``e`` rows describe the parameters after ``e`` optimizer epochs.
    ``on_eval`` also receives those parameters (do not mutate them).
    """
    task = split.task
    if model_cfg.out_classes != task.p or model_cfg.vocab_size != task.vocab_size:
        raise ValueError("model config does not match the task (out_classes/vocab_size)")
    grid = label_grid(task)
    x_train = tokenize_pairs(task, split.train)
    y_train = grid[split.train[:, 0], split.train[:, 1]]
    x_test = tokenize_pairs(task, split.test)
    y_test = grid[split.test[:, 0], split.test[:, 1]]

    params = init_params(model_cfg, train_cfg.init, train_cfg.seed) if params is None else dict(params)
    state = AdamState.zeros_like(params)
    batch_rng = make_rng(train_cfg.seed, "batch")
    n = len(y_train)
    bs = n if train_cfg.batch_size <= 0 else min(train_cfg.batch_size, n)

    metrics: list[MetricsRow] = []
    start = time.perf_counter()
    streak, stopped, diverged = 0, False, False

    def record(epoch: int, train_loss: float, train_acc: float) -> MetricsRow:
        test_loss, test_acc = loss_and_accuracy(params, x_test, y_test, model_cfg) if len(y_test) else (math.nan, math.nan)
        rows = embedding_rows(params, task.p)
        wsum, wsq = weight_norms(params, model_cfg.n_heads)
        row = MetricsRow(
            epoch=epoch,
            train_loss=train_loss,
            test_loss=test_loss,
            train_acc=train_acc,
            test_acc=test_acc,
            med=diagnostics.med(rows),
            weight_norm_sum=wsum,
            wall_ms=round((time.perf_counter() - start) * 1000.0, 3),
            weight_norm_sq=wsq,
            med_raw=diagnostics.med(rows, raw=True),
        )
        metrics.append(row)
        if sink:
            sink.write(row)
        if callback:
            callback(row)
        if on_eval:
            on_eval(row, params)
        return row

    try:
        for epoch in range(train_cfg.epochs + 1):
            evaluating = epoch % train_cfg.eval_every == 0 or epoch == train_cfg.epochs
            if epoch == train_cfg.epochs:
                tl, ta = loss_and_accuracy(params, x_train, y_train, model_cfg)
                record(epoch, tl, ta)
                break
            if bs == n:
                loss, acc, grads = loss_and_grads(params, x_train, y_train, model_cfg)
                if not math.isfinite(loss):
                    raise TrainingDiverged(f"non-finite training loss at epoch {epoch}")
                if evaluating:
                    row = record(epoch, loss, acc)
                params, state = adamw_step(params, grads, state, train_cfg)
            else:
                if evaluating:
                    tl, ta = loss_and_accuracy(params, x_train, y_train, model_cfg)
                    row = record(epoch, tl, ta)
                order = batch_rng.permutation(n)
                for lo in range(0, n, bs):
                    idx = order[lo : lo + bs]
                    loss, _, grads = loss_and_grads(params, x_train[idx], y_train[idx], model_cfg)
                    if not math.isfinite(loss):
                        raise TrainingDiverged(f"non-finite training loss at epoch {epoch}")
                    params, state = adamw_step(params, grads, state, train_cfg)
            if evaluating and train_cfg.stop_test_acc is not None:
                streak = streak + 1 if row.test_acc >= train_cfg.stop_test_acc else 0
                if streak >= train_cfg.stop_patience:
                    stopped = True
                    tl, ta = loss_and_accuracy(params, x_train, y_train, model_cfg)
                    record(epoch + 1, tl, ta)
                    break
    except (TrainingDiverged, NonFiniteError) as exc:
        log.error("training stopped: %s", exc)
        diverged = True
        if not metrics:
            raise TrainingDiverged(str(exc)) from exc

    if checkpoint_dir is not None:
        save_checkpoint(
            checkpoint_dir,
            model_cfg,
            params,
            metrics[-1].epoch if metrics else 0,
            extra={
                "optimizer_step": state.t,
                "train_config": train_cfg.to_dict(),
                "rng_state": batch_rng.bit_generator.state,
            },
        )
    return TrainResult(metrics, params, detect_grokking(metrics), stopped, diverged)


class MemorizationSnapshot:
    """``on_eval`` hook keeping the embedding rows at the memorisation epoch.

    Mirrors :func:`detect_grokking`: the snapshot is taken at the first eval of
    the first run of ``window`` evals with train_acc >= ``train_thresh``.
    """

    def __init__(self, p: int, train_thresh: float = 0.99, window: int = 50):
        self.p, self.train_thresh, self.window = p, train_thresh, window
        self.epoch: int | None = None
        self.rows: np.ndarray | None = None
        self._run = 0
        self._frozen = False

    def __call__(self, row: MetricsRow, params: ModelParams) -> None:
        if self._frozen:
            return
        if row.train_acc >= self.train_thresh:
            if self._run == 0:
                self.epoch, self.rows = row.epoch, embedding_rows(params, self.p).copy()
            self._run += 1
            self._frozen = self._run >= self.window
        else:
            self._run, self.epoch, self.rows = 0, None, None


# ------------------------------------------------------------ detection


def _first_sustained(flags: Sequence[bool], window: int) -> int | None:
    """Index of the first run of ``window`` consecutive True (or a True tail at the end)."""
    run = 0
    for k, ok in enumerate(flags):
        run = run + 1 if ok else 0
        if run >= window:
            return k - window + 1
    if run > 0:
        return len(flags) - run
    return None


def detect_grokking(
    rows: Iterable[MetricsRow], train_thresh: float = 0.99, window: int = 50, rise_frac: float = 0.5
) -> GrokkingReport:
    """Memorisation epoch, GO-Epoch, U-Acc and L-Acc from a metric stream.

    * memorisation: first eval of a run of ``window`` evals with train_acc >= train_thresh
    * U-Acc: max test_acc; baseline: median test_acc over the ``window`` evals from memorisation
    * GO-Epoch: first eval from memorisation on with test_acc >= baseline + rise_frac (U-Acc - baseline);
      absent when U-Acc - baseline < 0.05
    * L-Acc: min test_acc from the first eval reaching 0.98 U-Acc onward
    """
    rows = list(rows)
    if not rows:
        raise ValueError("empty metric stream")
    test = np.array([r.test_acc for r in rows], dtype=np.float64)
    u_acc = float(np.nanmax(test))
    top = int(np.argmax(test >= 0.98 * u_acc))
    l_acc = float(np.nanmin(test[top:]))

    mem = _first_sustained([r.train_acc >= train_thresh for r in rows], window)
    if mem is None:
        return GrokkingReport(None, None, u_acc, l_acc)
    baseline = float(np.median(test[mem : mem + window]))
    go = None
    if u_acc - baseline >= 0.05:
        target = baseline + rise_frac * (u_acc - baseline)
        hits = np.flatnonzero(test[mem:] >= target)
        if len(hits):
            go = rows[mem + int(hits[0])].epoch
    return GrokkingReport(rows[mem].epoch, go, u_acc, l_acc, baseline)
