"""Command-line entry point: ``dotrain <command> [--config PATH] [--seed N] [--out DIR] [--set k=v ...]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import harness
from .config import ConfigError, ExperimentConfig, load_config
from .diagnostics import fidelity_difference, filter_normalized_direction, landscape_slice, sharpness
from .models import check_params, load_tensors, predict

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("dotrain")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key=value config file")
    common.add_argument("--seed", type=int, action="append", help="run seed (repeatable; overrides seeds)")
    common.add_argument("--out", type=Path, help="output directory (overrides out)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dotrain", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train-teacher", parents=[common], help="train the teacher with cross-entropy")
    d = sub.add_parser("distill", parents=[common], help="train a teacher, then distill a student")
    d.add_argument("--teacher", type=Path, help="reuse saved teacher.params instead of training one")
    d.add_argument("--name", help="run directory name (default: trainer kind)")
    sub.add_parser("toy", parents=[common], help="two-logit toy, vanilla vs DOT")
    s = sub.add_parser("sweep", parents=[common], help="ablation sweep over one axis")
    s.add_argument("--axis", required=True, choices=sorted(harness.AXES))
    s.add_argument("--values", required=True, help="comma separated values")
    s.add_argument("--workers", type=int, default=1)
    l = sub.add_parser("landscape", parents=[common], help="1-D loss slice and sharpness of saved parameters")
    l.add_argument("--params", type=Path, required=True)
    f = sub.add_parser("fidelity", parents=[common], help="logit-correlation difference of two saved networks")
    f.add_argument("--student", type=Path, required=True)
    f.add_argument("--teacher", type=Path, required=True)
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config, args.overrides)
    flat = {}
    if args.seed:
        flat["seeds"] = tuple(args.seed)
    if args.out is not None:
        flat["out"] = str(args.out)
    return cfg.replace(**flat).validate() if flat else cfg


def _load_network(cfg: ExperimentConfig, path: Path, which: str):
    train, test = harness.load_dataset(cfg)
    teacher_spec, student_spec = harness.network_specs(cfg, train)
    spec = teacher_spec if which == "teacher" else student_spec
    try:
        params = load_tensors(path)
    except ValueError as exc:
        raise OSError(f"{path}: unreadable tensor file: {exc}") from exc
    try:
        check_params(params, spec)
    except ValueError as exc:
        raise ConfigError(f"{path}: does not match the configured {which} network: {exc}") from exc
    return params, spec, train, test


def _train_teacher(cfg: ExperimentConfig) -> None:
    train, test = harness.load_dataset(cfg)
    for seed in cfg.seeds:
        run = harness.train_teacher(cfg, seed, train, test)
        d = harness.write_teacher(run, cfg, harness.seed_dir(cfg.out, "teacher", seed))
        final = run.records[-1]
        print(f"seed {seed}: train_acc={final.train_accuracy:.4f} test_acc={final.test_accuracy:.4f} -> {d}")


def _distill(cfg: ExperimentConfig, args) -> None:
    name = args.name or cfg.trainer.kind
    for seed in cfg.seeds:
        if args.teacher is None:
            run = harness.run_experiment(cfg, seed, name, cfg.out)
        else:
            params, spec, train, test = _load_network(cfg, args.teacher, "teacher")
            run = harness.distill_student(cfg, harness.TeacherRun(params, spec, []), seed, train, test)
            harness.write_student(run, cfg, harness.seed_dir(cfg.out, name, seed))
        s = run.summary
        print(f"seed {seed}: task={s['final_train_task_loss']:.6g} distill={s['final_train_distill_loss']:.6g} "
              f"test_acc={s['final_test_accuracy']:.4f}")


def _toy(cfg: ExperimentConfig) -> None:
    t = cfg.toy
    for seed in cfg.seeds:
        res = harness.toy_experiment(t.delta, t.steps, t.lr, t.momentum, t.temperature, t.teacher_prob, seed, t.alpha)
        path = harness.emit_csv(res.rows(), ["step", "vanilla_prob", "dot_prob"],
                                Path(cfg.out) / "toy" / f"seed_{seed}.csv")
        print(f"seed {seed}: vanilla={res.vanilla[-1]:.6f} dot={res.dot[-1]:.6f} -> {path}")


def _sweep(cfg: ExperimentConfig, args) -> None:
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--values: {exc}") from exc
    if not values:
        raise ConfigError("--values is empty")
    out = Path(cfg.out) / "sweep" / args.axis
    rows = harness.ablation_sweep(cfg, args.axis, values, out, workers=args.workers)
    failed = [r for r in rows if r["status"] != "ok"]
    print(f"{len(rows) - len(failed)}/{len(rows)} runs ok -> {out / 'summary.csv'}")


def _landscape(cfg: ExperimentConfig, args) -> None:
    params, spec, train, _ = _load_network(cfg, args.params, "student")
    diag = cfg.diagnostics
    out = Path(cfg.out)
    for seed in cfg.seeds:
        base = harness.derive_seed(seed, harness.LANDSCAPE)
        direction = filter_normalized_direction(params, [base, 0])
        sl = landscape_slice(params, spec, train, direction, diag.landscape_radii, [base, 0])
        rows = [{"radius": r, "loss": v} for r, v in zip(sl.radii, sl.loss_values)]
        path = harness.emit_csv(rows, ["radius", "loss"], out / "landscape" / f"seed_{seed}.csv")
        sharp = sharpness(params, spec, train, diag.sharpness_directions, diag.sharpness_radius, base + 1)
        print(f"seed {seed}: sharpness={sharp:.6g} -> {path}")


def _fidelity(cfg: ExperimentConfig, args) -> None:
    s_params, s_spec, _, test = _load_network(cfg, args.student, "student")
    t_params, t_spec, _, _ = _load_network(cfg, args.teacher, "teacher")
    matrix, mean_abs = fidelity_difference(predict(s_params, s_spec, test.inputs),
                                           predict(t_params, t_spec, test.inputs))
    path = harness.write_matrix_csv(matrix, Path(cfg.out) / "fidelity.csv")
    print(f"mean_abs={mean_abs:.6g} -> {path}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.command == "train-teacher":
            _train_teacher(cfg)
        elif args.command == "distill":
            _distill(cfg, args)
        elif args.command == "toy":
            _toy(cfg)
        elif args.command == "sweep":
            _sweep(cfg, args)
        elif args.command == "landscape":
            _landscape(cfg, args)
        elif args.command == "fidelity":
            _fidelity(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except harness.DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
