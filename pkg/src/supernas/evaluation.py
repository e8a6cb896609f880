"""Accuracy of inherited and stand-alone candidates, and their rank agreement."""
from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import stats

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset, DatasetSplits
from .space import SearchSpace, SubnetEncoding
from .supernet import DenseNet, SupernetParams, init_dense, slice_forward
from .training import TrainConfig, train_dense

# |Pearson| reference values at full CIFAR-100 scale; metadata only, never reproduced here
REFERENCE_PEARSON = {
    ("base", 1): 0.96341,
    ("base", 2): 0.96732,
    ("base", 3): 0.96686,
    ("OE", 1): 0.96944,
    ("PReLU+OE", 1): 0.97321,
    ("PReLU+OE", 2): 0.97648,
    ("PReLU+OE", 3): 0.97696,
}


class ZeroVarianceError(ValueError):
    """Correlation is undefined because one of the vectors is constant."""


class PairingError(ValueError):
    def __init__(self, orphans: Sequence[str]):
        super().__init__("unpaired encodings: " + ", ".join(orphans))
        self.orphans = list(orphans)


@dataclass(frozen=True)
class AccuracyRecord:
    encoding: SubnetEncoding
    accuracy: float
    source: str  # supernet | standalone
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")
        if self.source not in ("supernet", "standalone"):
            raise ValueError(f"unknown source {self.source!r}")


# ---------------------------------------------------------------------------
# batch-norm recalibration and accuracy
# ---------------------------------------------------------------------------

def recalibrate_bn(params: SupernetParams, enc: SubnetEncoding, calib_batches: Iterable[np.ndarray]) -> dict:
    """Exact per-channel mean and (biased) variance at every BN on ``enc``'s path.

    Each calibration forward normalizes with its own batch statistics; the
    returned statistics pool all calibration samples. Neither the learned
    weights nor the shared running buffers are touched.
    """
    collector = ad.BNCollector()
    seen = 0
    with ad.no_grad():
        for x in calib_batches:
            slice_forward(params, enc, Tensor(x), mode="collect", collector=collector)
            seen += 1
    if seen == 0:
        raise ValueError("recalibration needs at least one calibration batch")
    return collector.stats()


def recalibrate_dense(net: DenseNet, calib_batches: Iterable[np.ndarray]) -> dict:
    collector = ad.BNCollector()
    seen = 0
    with ad.no_grad():
        for x in calib_batches:
            net.forward(Tensor(x), mode="collect", collector=collector)
            seen += 1
    if seen == 0:
        raise ValueError("recalibration needs at least one calibration batch")
    return collector.stats()


def calibration_batches(data: Dataset, n_batches: int, batch_size: int) -> list[np.ndarray]:
    """Up to ``n_batches`` normalized, unaugmented batches from the front of ``data``."""
    out = []
    for x, _ in data.batches(batch_size):
        if len(out) == n_batches:
            break
        if len(x) >= 2:
            out.append(x)
    return out


def predictions(forward, dataset: Dataset, batch_size: int = 256) -> np.ndarray:
    preds = []
    with ad.no_grad():
        for x, _ in dataset.batches(batch_size):
            preds.append(np.argmax(forward(Tensor(x)).data, axis=1))
    return np.concatenate(preds)


def eval_accuracy(params: SupernetParams, enc: SubnetEncoding, dataset: Dataset,
                  bn_stats: Optional[dict] = None, batch_size: int = 256) -> float:
    """Top-1 accuracy of ``enc`` with inherited weights, eval-mode BN."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = predictions(lambda x: slice_forward(params, enc, x, mode="eval", bn_stats=bn_stats), dataset, batch_size)
    return float(np.mean(pred == dataset.labels))


def eval_dense_accuracy(net: DenseNet, dataset: Dataset, bn_stats: Optional[dict] = None,
                        batch_size: int = 256) -> float:
    pred = predictions(lambda x: net.forward(x, mode="eval", bn_stats=bn_stats), dataset, batch_size)
    return float(np.mean(pred == dataset.labels))


def evaluate_supernet(params: SupernetParams, encodings: Sequence[SubnetEncoding], data: DatasetSplits,
                      recalibrate: bool = True, calib_batches: int = 20, calib_batch_size: int = 64,
                      seed: int = 0) -> list[AccuracyRecord]:
    batches = calibration_batches(data.calib, calib_batches, calib_batch_size) if recalibrate else None
    records = []
    for enc in encodings:
        bn = recalibrate_bn(params, enc, batches) if recalibrate else None
        records.append(AccuracyRecord(enc, eval_accuracy(params, enc, data.val, bn), "supernet", seed))
    return records


def train_standalone(enc: SubnetEncoding, data: DatasetSplits, space: SearchSpace, config: TrainConfig,
                     seed: int) -> AccuracyRecord:
    """Train ``enc`` from scratch at its nominal widths and report validation accuracy.

    ``space`` should be the un-enhanced space: the channel proxy is a
    supernet device and is stripped here regardless.
    """
    base = replace(space, channel_proxy=())
    net = init_dense(base, enc, seed)
    cfg = replace(config, seed=seed)
    train_dense(net, data.train, cfg)
    return AccuracyRecord(enc, eval_dense_accuracy(net, data.val), "standalone", seed)


# ---------------------------------------------------------------------------
# correlation
# ---------------------------------------------------------------------------

def pearson(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two 1-D vectors of equal length")
    if len(x) < 2:
        raise ValueError("pearson needs at least two points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ZeroVarianceError("correlation undefined: zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def spearman(xs, ys) -> float:
    """Pearson correlation of average ranks."""
    return pearson(stats.rankdata(xs, method="average"), stats.rankdata(ys, method="average"))


def kendall_tau_b(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ZeroVarianceError("Kendall tau undefined: constant vector")
    return float(stats.kendalltau(x, y, variant="b").statistic)


@dataclass
class RankReport:
    encodings: list[SubnetEncoding]
    standalone: list[float]
    supernet: list[float]
    pearson: float
    pearson_abs: float
    spearman: float
    kendall_tau: float
    n: int
    meta: dict = field(default_factory=dict)

    def scatter(self) -> list[tuple[float, float]]:
        """(stand-alone accuracy, supernet accuracy) per candidate."""
        return list(zip(self.standalone, self.supernet))

    def to_json(self) -> str:
        body = {
            "n": self.n,
            "pearson": self.pearson,
            "pearson_abs": self.pearson_abs,
            "spearman": self.spearman,
            "kendall_tau": self.kendall_tau,
            "meta": self.meta,
        }
        return json.dumps(body, sort_keys=True, indent=2) + "\n"

    def scatter_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["standalone_accuracy", "supernet_accuracy"])
        for a, b in self.scatter():
            w.writerow([repr(a), repr(b)])
        return buf.getvalue()

    def write(self, out_dir, name: str = "report") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.json").write_text(self.to_json())
        (out / f"{name}_scatter.csv").write_text(self.scatter_csv())


def _mean_by_encoding(records: Iterable[AccuracyRecord]) -> dict[str, float]:
    groups: dict[str, list[float]] = defaultdict(list)
    for r in records:
        groups[str(r.encoding)].append(r.accuracy)
    return {k: float(np.mean(v)) for k, v in groups.items()}


def rank_correlations(records: Iterable[AccuracyRecord], meta: Optional[dict] = None) -> RankReport:
    """Pair supernet and stand-alone records by encoding and correlate them.

    Repeated records for one encoding and source (several seeds) are averaged.
    """
    records = list(records)
    sup = _mean_by_encoding(r for r in records if r.source == "supernet")
    alone = _mean_by_encoding(r for r in records if r.source == "standalone")
    orphans = sorted(set(sup) ^ set(alone))
    if orphans:
        raise PairingError(orphans)
    keys = sorted(sup)
    if len(keys) < 2:
        raise ValueError("rank correlation needs at least two paired encodings")
    xs = [alone[k] for k in keys]
    ys = [sup[k] for k in keys]
    r = pearson(xs, ys)
    return RankReport(
        encodings=[SubnetEncoding.parse(k) for k in keys],
        standalone=xs,
        supernet=ys,
        pearson=r,
        pearson_abs=abs(r),
        spearman=spearman(xs, ys),
        kendall_tau=kendall_tau_b(xs, ys),
        n=len(keys),
        meta=dict(meta or {}),
    )


# ---------------------------------------------------------------------------
# accuracy tables
# ---------------------------------------------------------------------------

ACCURACY_HEADER = ["encoding", "source", "seed", "accuracy"]


def write_accuracy_table(records: Iterable[AccuracyRecord], path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ACCURACY_HEADER)
    for r in records:
        w.writerow([str(r.encoding), r.source, r.seed, repr(r.accuracy)])
    Path(path).write_text(buf.getvalue())


def read_accuracy_table(path) -> list[AccuracyRecord]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ACCURACY_HEADER:
            raise ValueError(f"{path}: expected header {ACCURACY_HEADER}, got {reader.fieldnames}")
        return [
            AccuracyRecord(SubnetEncoding.parse(row["encoding"]), float(row["accuracy"]), row["source"], int(row["seed"]))
            for row in reader
        ]
