"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 missing prerequisite,
4 numeric failure (divergence, undefined correlation).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .autodiff import NumericError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, parse_config
from .evaluation import (
    ZeroVarianceError,
    evaluate_supernet,
    rank_correlations,
    read_accuracy_table,
    write_accuracy_table,
)
from .experiments import (
    ABLATION_HEADER,
    _table_csv,
    load_data,
    read_encodings,
    resolve_encodings,
    run_ablation,
    standalone_records,
)
from .space import SearchSpaceError
from .supernet import init_supernet, progressive_split
from .training import SupernetTrainer, TrainerState, derive_seed

log = logging.getLogger("supernas")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


class MissingPrerequisite(Exception):
    pass


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingPrerequisite(f"missing {what}: {path}")
    return path


def _config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config", "a configuration file is required")
    _need(Path(args.config), "configuration file")
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _out(args, cfg: ExperimentConfig | None = None) -> Path:
    out = Path(args.out) if args.out else Path(cfg.output_dir if cfg else ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _metrics_writer(path: Path):
    """One JSON record per line; the file is rewritten so reruns are byte-identical."""
    path.write_text("")

    def write(rec: dict) -> None:
        with open(path, "a") as f:
            f.write(json.dumps(rec, sort_keys=True) + "\n")

    return write


def _encodings(args, cfg):
    if args.encodings:
        encs = read_encodings(_need(Path(args.encodings), "encoding list"))
        space = cfg.base_space()
        for e in encs:
            space.validate(e)
        return encs
    return resolve_encodings(cfg)


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    stage = args.stage or 1
    if not 1 <= stage <= len(cfg.stages):
        raise ConfigError("--stage", f"stage {stage} not configured (config has {len(cfg.stages)} stages)")
    data = load_data(cfg)
    metrics = _metrics_writer(out / f"metrics_stage{stage}.jsonl")
    tcfg = cfg.train_configs()[stage - 1]
    if stage == 1 and not args.checkpoint:
        params = init_supernet(cfg.supernet_space(), derive_seed(cfg.seed, "init"))
        trainer = SupernetTrainer.fresh(params, data.train, tcfg, metrics)
    else:
        ckpt = Path(args.checkpoint) if args.checkpoint else out / f"stage{stage - 1}.ckpt"
        state = load_checkpoint(_need(ckpt, f"checkpoint for stage {stage}"))
        if state.params.stage == stage - 1 and state.phase == "done":
            state = TrainerState(progressive_split(state.params), tcfg, phase="train", history=state.history)
        elif state.params.stage != stage:
            raise MissingPrerequisite(f"{ckpt} holds a stage-{state.params.stage} supernet; "
                                      f"stage {stage} needs a finished stage-{stage - 1} checkpoint")
        elif state.phase == "split":
            state = TrainerState(state.params, tcfg, phase="train", history=state.history)
        trainer = SupernetTrainer(state, data.train, metrics)
    trainer.run()
    snap = trainer.snapshot()
    snap.history = snap.history + [{"stage": stage, "lr_init": snap.config.lr_init}]
    dest = out / f"stage{stage}.ckpt"
    save_checkpoint(snap, dest)
    print(f"wrote {dest}")
    return EXIT_OK


def cmd_split(args) -> int:
    if not args.checkpoint:
        raise MissingPrerequisite("split needs --checkpoint")
    state = load_checkpoint(_need(Path(args.checkpoint), "checkpoint"))
    if state.params.stage >= 3:
        raise ConfigError("--checkpoint", "a stage-3 supernet cannot be split further")
    new = TrainerState(progressive_split(state.params), state.config, phase="split", history=state.history)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    dest = out / f"stage{new.params.stage}_split.ckpt"
    save_checkpoint(new, dest)
    print(f"wrote {dest}")
    return EXIT_OK


def cmd_eval_rank(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    if not args.checkpoint:
        raise MissingPrerequisite("eval-rank needs --checkpoint")
    state = load_checkpoint(_need(Path(args.checkpoint), "checkpoint"))
    data = load_data(cfg)
    encs = _encodings(args, cfg)
    e = cfg.eval
    recs = evaluate_supernet(state.params, encs, data, e.recalibrate, e.calib_batches, e.calib_batch_size, cfg.seed)
    dest = out / f"supernet_stage{state.params.stage}.csv"
    write_accuracy_table(recs, dest)
    print(f"wrote {dest}")
    return EXIT_OK


def cmd_standalone(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    data = load_data(cfg)
    encs = _encodings(args, cfg)
    seeds = [args.seed] if args.seed is not None else None
    recs = standalone_records(cfg, data, encs, seeds)
    dest = out / "standalone.csv"
    write_accuracy_table(recs, dest)
    print(f"wrote {dest}")
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out or ".")
    alone = read_accuracy_table(_need(out / "standalone.csv", "stand-alone accuracy table"))
    stages = [args.stage] if args.stage else [s for s in (1, 2, 3) if (out / f"supernet_stage{s}.csv").exists()]
    if not stages:
        raise MissingPrerequisite(f"no supernet accuracy tables (supernet_stage<N>.csv) in {out}")
    for s in stages:
        sup = read_accuracy_table(_need(out / f"supernet_stage{s}.csv", f"stage-{s} supernet accuracy table"))
        rep = rank_correlations(sup + alone, meta={"stage": s})
        rep.write(out, f"report_stage{s}")
        print(f"stage {s}: |pearson|={rep.pearson_abs:.5f} spearman={rep.spearman:.5f} "
              f"kendall={rep.kendall_tau:.5f} n={rep.n}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    result = run_ablation(cfg, out, progress=print)
    print(_table_csv(result.median_table(), ABLATION_HEADER), end="")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "split": cmd_split,
    "eval-rank": cmd_eval_rank,
    "standalone": cmd_standalone,
    "report": cmd_report,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="supernas", description="Channel-search supernet training and ranking.")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "train": "train one progressive stage (stage 1 includes the warm-up)",
        "split": "duplicate a checkpoint's branch groups into the next stage",
        "eval-rank": "evaluate an encoding list with inherited weights",
        "standalone": "train encodings from scratch for ground truth",
        "report": "correlate supernet and stand-alone accuracy tables",
        "ablate": "run the variant x stage grid end to end",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", help="experiment YAML file")
        sp.add_argument("--stage", type=int)
        sp.add_argument("--checkpoint")
        sp.add_argument("--encodings", help="file with one hyphen-separated encoding per line")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, SearchSpaceError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingPrerequisite, FileNotFoundError, CheckpointError) as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ZeroVarianceError as exc:
        print(f"numeric failure: cannot compute Pearson correlation: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
