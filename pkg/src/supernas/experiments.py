"""Orchestration of the toy-scale ablation: variants x stages x supernet seeds."""
from __future__ import annotations

import csv
import io
import logging
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .config import ExperimentConfig
from .data import DatasetSplits, load_cifar_binary, load_dataset, split_dataset, synth_dataset
from .evaluation import AccuracyRecord, evaluate_supernet, rank_correlations, train_standalone, write_accuracy_table
from .space import SearchSpace, SubnetEncoding
from .training import TrainerState, derive_seed, run_progressive_pipeline

log = logging.getLogger(__name__)

MODEL_SUFFIX = {"base": "", "OE": "_OE", "PReLU+OE": "_PRL_OE"}
ABLATION_HEADER = ["model", "supernet", "stage", "pearson_abs"]


def load_data(cfg: ExperimentConfig) -> DatasetSplits:
    ds = cfg.dataset
    if ds.kind == "synthetic":
        return synth_dataset(ds.seed, ds.n_per_class, ds.num_classes, tuple(ds.shape), ds.noise, ds.max_shift)
    if ds.kind == "cached":
        return load_dataset(ds.path)
    raw = load_cifar_binary(ds.path, ds.variant)
    return split_dataset(raw.images, raw.labels, raw.num_classes, ds.seed)


def dense_param_count(space: SearchSpace, widths: Sequence[int]) -> int:
    """Closed-form parameter count of the stand-alone network with these executed widths."""
    prelu = space.activation_kind == "prelu"
    per_bn = 3 if prelu else 2
    total = 0
    c_prev = space.input_shape[0]
    if space.stem_width is not None:
        total += space.stem_width * c_prev * 9 + per_bn * space.stem_width
        c_prev = space.stem_width
    for w in widths:
        total += w * c_prev * 9 + per_bn * w
        c_prev = w
    for blk in space.blocks():
        src = space.stem_width if blk.source is None else widths[blk.source]
        total += widths[blk.conv2] * src
    total += space.num_classes * widths[-1] + space.num_classes
    return total


def select_encodings(space: SearchSpace, n: int, seed: int, pool: int = 4000) -> list[SubnetEncoding]:
    """``n`` distinct candidates spread evenly over the range of model sizes.

    Draws a uniform pool, orders it by parameter count and takes evenly
    spaced quantiles, so ground truth covers small and large candidates alike.
    """
    rng = np.random.default_rng(derive_seed(seed, "encodings"))
    seen = {}
    for _ in range(pool):
        enc = SubnetEncoding(tuple(l.options[int(rng.integers(len(l.options)))] for l in space.layers))
        seen.setdefault(str(enc), enc)
    ranked = sorted(seen.values(), key=lambda e: (dense_param_count(space, e.choices), str(e)))
    if len(ranked) < n:
        raise ValueError(f"search space holds fewer than {n} distinct candidates")
    idx = np.unique(np.round(np.linspace(0, len(ranked) - 1, n)).astype(int))
    return [ranked[i] for i in idx]


def read_encodings(path) -> list[SubnetEncoding]:
    lines = Path(path).read_text().splitlines()
    return [SubnetEncoding.parse(l) for l in lines if l.strip() and not l.lstrip().startswith("#")]


def write_encodings(encodings: Sequence[SubnetEncoding], path) -> None:
    Path(path).write_text("".join(f"{e}\n" for e in encodings))


def resolve_encodings(cfg: ExperimentConfig) -> list[SubnetEncoding]:
    if cfg.eval.encodings:
        encs = read_encodings(cfg.eval.encodings)
    else:
        encs = select_encodings(cfg.base_space(), cfg.eval.num_encodings, cfg.seed)
    space = cfg.base_space()
    for e in encs:
        space.validate(e)
    return encs


def standalone_records(cfg: ExperimentConfig, data: DatasetSplits, encodings: Sequence[SubnetEncoding],
                       seeds: Optional[Sequence[int]] = None) -> list[AccuracyRecord]:
    space = cfg.base_space()
    tc = cfg.standalone.train_config()
    seeds = cfg.standalone.seeds if seeds is None else seeds
    out = []
    for enc in encodings:
        for s in seeds:
            out.append(train_standalone(enc, data, space, tc, derive_seed(s, "standalone", str(enc))))
            # the record keeps the user-facing seed, not the derived one
            out[-1] = AccuracyRecord(enc, out[-1].accuracy, "standalone", s)
    return out


def model_name(cfg: ExperimentConfig, variant: str) -> str:
    prefix = "ResNet20" if cfg.space.mode == "resnet20" else "ToyResNet"
    return f"{prefix}_SPN{MODEL_SUFFIX[variant]}"


def train_variant(cfg: ExperimentConfig, data: DatasetSplits, variant: str, seed: int,
                  metrics=None, on_stage_end=None) -> list[TrainerState]:
    space = cfg.supernet_space(variant)
    return run_progressive_pipeline(space, data.train, cfg.train_configs(seed),
                                    init_seed=derive_seed(seed, "init"), metrics=metrics,
                                    on_stage_end=on_stage_end)


@dataclass
class AblationResult:
    rows: list[dict]  # one per (variant, seed, stage)
    standalone: list[AccuracyRecord]
    supernet: dict  # (variant, seed, stage) -> records

    def median_table(self) -> list[dict]:
        keyed: dict = {}
        for r in self.rows:
            keyed.setdefault((r["model"], r["supernet"], r["stage"]), []).append(r["pearson_abs"])
        return [
            {"model": m, "supernet": v, "stage": s, "pearson_abs": statistics.median(vals)}
            for (m, v, s), vals in keyed.items()
        ]

    def median(self, variant: str, stage: int) -> float:
        vals = [r["pearson_abs"] for r in self.rows if r["supernet"] == variant and r["stage"] == stage]
        return statistics.median(vals)


def _table_csv(rows: list[dict], header: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(r[h]) if isinstance(r[h], float) else r[h] for h in header])
    return buf.getvalue()


def run_ablation(cfg: ExperimentConfig, out_dir=None, data: Optional[DatasetSplits] = None,
                 progress: Optional[Callable[[str], None]] = None) -> AblationResult:
    """Stand-alone ground truth once, then every variant and seed through all stages.

    When ``out_dir`` is given, writes stage checkpoints, accuracy tables, one
    report per run, ``ablation.csv`` (per seed) and ``ablation_median.csv``.
    """
    say = progress or (lambda msg: log.info(msg))
    out = Path(out_dir) if out_dir is not None else None
    data = data or load_data(cfg)
    encodings = resolve_encodings(cfg)
    t0 = time.time()
    alone = standalone_records(cfg, data, encodings)
    say(f"stand-alone: {len(alone)} runs in {time.time() - t0:.0f}s")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_encodings(encodings, out / "encodings.txt")
        write_accuracy_table(alone, out / "standalone.csv")

    rows, sup = [], {}
    for variant in cfg.ablation.variants:
        for seed in cfg.ablation.supernet_seeds:
            t0 = time.time()
            run_dir = out / f"{variant.replace('+', '_')}_seed{seed}" if out is not None else None

            def on_stage_end(state: TrainerState, run_dir=run_dir):
                if run_dir is not None:
                    save_checkpoint(state, run_dir / f"stage{state.params.stage}.ckpt")

            states = train_variant(cfg, data, variant, seed, on_stage_end=on_stage_end)
            for st in states:
                stage = st.params.stage
                recs = evaluate_supernet(st.params, encodings, data, cfg.eval.recalibrate,
                                         cfg.eval.calib_batches, cfg.eval.calib_batch_size, seed)
                sup[(variant, seed, stage)] = recs
                rep = rank_correlations(recs + alone, meta={"variant": variant, "seed": seed, "stage": stage})
                rows.append({
                    "model": model_name(cfg, variant), "supernet": variant, "stage": stage, "seed": seed,
                    "pearson_abs": rep.pearson_abs, "spearman": rep.spearman, "kendall_tau": rep.kendall_tau,
                })
                if run_dir is not None:
                    write_accuracy_table(recs, run_dir / f"supernet_stage{stage}.csv")
                    rep.write(run_dir, f"report_stage{stage}")
            say(f"{variant} seed {seed}: " + ", ".join(
                f"stage {r['stage']} |r|={r['pearson_abs']:.3f}" for r in rows[-len(states):]
            ) + f" ({time.time() - t0:.0f}s)")

    result = AblationResult(rows, alone, sup)
    if out is not None:
        (out / "ablation.csv").write_text(_table_csv(rows, ["model", "supernet", "stage", "seed", "pearson_abs",
                                                            "spearman", "kendall_tau"]))
        (out / "ablation_median.csv").write_text(_table_csv(result.median_table(), ABLATION_HEADER))
        (out / "config.yaml").write_text(cfg.dump())
    return result
