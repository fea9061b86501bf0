"""Mini-batch training with early stopping, metrics and report files."""

from __future__ import annotations

import csv
import logging
import math
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .autodiff import adam_step
from .data import PARTITIONS, Dataset, SplitIndex, normalize_batch, normalize_fit, normalize_target
from .model import CritModel, forward_batch, predict
from .rng import stream

log = logging.getLogger(__name__)

HISTORY_HEADER = ("epoch", "train_mse", "val_mse")
PREDICTIONS_HEADER = ("cycle_id", "day_index", "k_target", "k_pred")
METRICS_HEADER = ("partition", "mse", "r2")


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128
    max_epochs: int = 1000
    patience: int = 20
    min_delta: float = 1e-9
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# -- metrics ----------------------------------------------------------------------


def mse(pred, target) -> float:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("mse of an empty vector")
    d = p - t
    return float(np.dot(d, d) / d.size)


def r_squared(pred, target) -> float:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    if t.size < 2:
        raise ValueError("r_squared needs at least 2 values")
    dev = t - t.mean()
    ss_tot = float(np.dot(dev, dev))
    if ss_tot == 0.0:
        raise ValueError("r_squared undefined for zero target variance")
    res = t - p
    return 1.0 - float(np.dot(res, res)) / ss_tot


@dataclass
class EvalReport:
    partition: str
    mse: float
    r2: float
    cycle_id: np.ndarray
    day_index: np.ndarray
    k_target: np.ndarray
    k_pred: np.ndarray
    history: List[tuple] = field(default_factory=list)
    config: dict = field(default_factory=dict)


@dataclass
class TrainResult:
    model: CritModel
    history: List[tuple]
    best_epoch: int
    reports: Dict[str, EvalReport]

    def __iter__(self):
        # allows ``model, report = train(...)``; the report is the test partition
        return iter((self.model, self.reports.get("test")))


def evaluate(model: CritModel, ds: Dataset, indices, partition: str = "eval",
             history=None) -> EvalReport:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("evaluate needs a non-empty index list")
    k_pred = predict_indices(model, ds, idx)
    k_target = ds.k_target[idx]
    r2 = r_squared(k_pred, k_target) if idx.size >= 2 and np.ptp(k_target) > 0 else float("nan")
    return EvalReport(
        partition=partition,
        mse=mse(k_pred, k_target),
        r2=r2,
        cycle_id=ds.cycle_id[idx].copy(),
        day_index=ds.day_index[idx].copy(),
        k_target=k_target.copy(),
        k_pred=k_pred,
        history=list(history or []),
        config={"model": model.config.to_dict(), **model.meta},
    )


def predict_indices(model: CritModel, ds: Dataset, indices, chunk: int = 128) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    out = np.empty(idx.size)
    for s in range(0, idx.size, chunk):
        sel = idx[s:s + chunk]
        out[s:s + chunk] = predict(model, ds.f3d[sel], ds.f2d[sel], ds.f0d[sel])
    return out


# -- training ----------------------------------------------------------------------


def _batch_inputs(model, ds, sel):
    x3, x2, x0 = normalize_batch(model.norm, ds.f3d[sel], ds.f2d[sel], ds.f0d[sel], model.dtype)
    y = normalize_target(model.norm, ds.k_target[sel]).astype(model.dtype)
    return x3, x2, x0, y


def train_epoch(model: CritModel, ds: Dataset, train_idx, cfg: TrainConfig) -> float:
    """One pass over ``train_idx``; returns the sample-weighted mean train loss.

    Shuffle order and dropout masks come from streams keyed by the epoch
    number, so a resumed run replays exactly what an uninterrupted one would.
    """
    epoch = model.epoch
    order = stream(cfg.seed, "shuffle", epoch).permutation(np.asarray(train_idx))
    drop_rng = stream(cfg.seed, "dropout", epoch)
    total, count = 0.0, 0
    for b, s in enumerate(range(0, len(order), cfg.batch_size)):
        sel = np.sort(order[s:s + cfg.batch_size])
        x3, x2, x0, y = _batch_inputs(model, ds, sel)
        pred = forward_batch(model, x3, x2, x0, train=True, rng=drop_rng)
        loss = ad.mse_loss(pred, ad.Tensor(y))
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(f"non-finite loss at epoch {epoch + 1}, batch {b}")
        loss.backward()
        adam_step(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        model.params.zero_grad()
        total += value * len(sel)
        count += len(sel)
    model.epoch += 1
    return total / count


def train(
    model: CritModel,
    ds: Dataset,
    split: SplitIndex,
    cfg: Optional[TrainConfig] = None,
    on_epoch: Optional[Callable[[int, float, float], None]] = None,
) -> TrainResult:
    """Train until ``max_epochs`` or until validation MSE stalls for ``patience`` epochs.

    The returned model holds the parameters of the epoch with the lowest
    validation MSE. Any improvement updates that snapshot; only improvements
    larger than ``min_delta`` reset the patience counter.
    """
    cfg = cfg or TrainConfig()
    if len(split.train) == 0 or len(split.val) == 0:
        raise ValueError("training needs non-empty train and validation partitions")
    if model.norm is None:
        model.norm = normalize_fit(ds, split.train)
    model.meta.update({"split": {"kind": split.kind, **split.params}, "train": cfg.to_dict()})

    limits = threadpool_limits(1) if cfg.deterministic else nullcontext()
    history: List[tuple] = []
    with limits:
        best_val, best_epoch, best_params = math.inf, 0, model.params.snapshot()
        ref, wait = math.inf, 0
        while model.epoch < cfg.max_epochs:
            tr = train_epoch(model, ds, split.train, cfg)
            val = mse(predict_indices(model, ds, split.val), ds.k_target[split.val])
            if not math.isfinite(val):
                raise NonFiniteLossError(f"non-finite validation loss at epoch {model.epoch}")
            history.append((model.epoch, tr, val))
            log.info("epoch %d train %.4e val %.4e", model.epoch, tr, val)
            if on_epoch:
                on_epoch(model.epoch, tr, val)
            if val < best_val:
                best_val, best_epoch, best_params = val, model.epoch, model.params.snapshot()
            if val < ref - cfg.min_delta:
                ref, wait = val, 0
            else:
                wait += 1
                if wait > cfg.patience:
                    break
        model.params.restore(best_params)
        model.meta["best_epoch"] = best_epoch
        model.meta["epochs_run"] = model.epoch
        reports = {
            p: evaluate(model, ds, split[p], p, history) for p in PARTITIONS if len(split[p])
        }
    return TrainResult(model, history, best_epoch, reports)


# -- report files -------------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def emit_report(report: EvalReport, out_dir, companions: Sequence[EvalReport] = (),
                plots: bool = True) -> Dict[str, Path]:
    """Write history.csv, predictions.csv, metrics.csv and SVG plots.

    ``predictions.csv`` holds the rows of ``report``; ``metrics.csv`` has one
    row per companion followed by ``report`` itself.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / f"{k}.csv" for k in ("history", "predictions", "metrics")}
    with open(paths["history"], "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for epoch, tr, val in report.history:
            w.writerow((int(epoch), _fmt(tr), _fmt(val)))
    with open(paths["predictions"], "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(PREDICTIONS_HEADER)
        for c, d, t, p in zip(report.cycle_id, report.day_index, report.k_target, report.k_pred):
            w.writerow((int(c), int(d), _fmt(t), _fmt(p)))
    with open(paths["metrics"], "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in (*companions, report):
            w.writerow((r.partition, _fmt(r.mse), _fmt(r.r2)))
    if plots:
        paths.update(_plots(report, out))
    return paths


def _plots(report: EvalReport, out: Path) -> Dict[str, Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "critforge"

    paths = {}
    # fixed metadata keeps svg bytes independent of the run date
    meta = {"Date": None, "Creator": "critforge"}
    fig, ax = plt.subplots(figsize=(6, 4))
    if report.history:
        e, tr, val = zip(*report.history)
        ax.semilogy(e, tr, label="training")
        ax.semilogy(e, val, label="validation")
        ax.legend()
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE")
    fig.tight_layout()
    paths["loss_plot"] = out / "loss_curves.svg"
    fig.savefig(paths["loss_plot"], format="svg", metadata=meta)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(7, 4))
    for c in np.unique(report.cycle_id):
        m = report.cycle_id == c
        order = np.argsort(report.day_index[m])
        d = report.day_index[m][order]
        ax.plot(d, report.k_target[m][order], ".", ms=2, label=f"cycle {c} target")
        ax.plot(d, report.k_pred[m][order], "-", lw=0.8, label=f"cycle {c} predicted")
    ax.set_xlabel("day")
    ax.set_ylabel("k (ARO)")
    ax.set_title(f"{report.partition}: MSE {report.mse:.3e}, R2 {report.r2:.3f}")
    ax.legend(fontsize=7)
    fig.tight_layout()
    paths["prediction_plot"] = out / "predictions.svg"
    fig.savefig(paths["prediction_plot"], format="svg", metadata=meta)
    plt.close(fig)
    return paths


def read_predictions(path) -> dict:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return {
        "cycle_id": np.array([int(r["cycle_id"]) for r in rows], dtype=np.int64),
        "day_index": np.array([int(r["day_index"]) for r in rows], dtype=np.int64),
        "k_target": np.array([float(r["k_target"]) for r in rows]),
        "k_pred": np.array([float(r["k_pred"]) for r in rows]),
    }
