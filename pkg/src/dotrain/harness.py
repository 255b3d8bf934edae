"""Teacher pretraining, student distillation, the two-logit toy and ablation sweeps."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import data as datasets
from .config import ExperimentConfig, dumps_config
from .diagnostics import (
    RunRecord,
    fidelity_difference,
    filter_normalized_direction,
    landscape_slice,
    record_iteration,
    sharpness,
    task_loss,
)
from .losses import DistillConfig, KLOrder, cross_entropy, kd_divergence
from .models import NetworkSpec, accuracy, format_float, forward, init_network, predict, save_tensors
from .optim import DotState, DualGradient, SgdState, TrainerConfig, dot_step, lr_schedule, sgd_step
from .tensor import ParameterSet, Tape, backward

log = logging.getLogger(__name__)

# tags mixed into the run seed so each random stream is independent
TEACHER_INIT, TEACHER_ORDER, STUDENT_INIT, STUDENT_ORDER, LANDSCAPE, TOY_INIT = range(1, 7)

SUMMARY_COLUMNS = [
    "seed", "trainer", "alpha", "delta", "momentum",
    "final_train_task_loss", "final_train_distill_loss", "final_train_accuracy", "final_test_accuracy",
    "mean_cos_kd", "mean_cos_ce", "sharpness", "fidelity_mean_abs",
]


class DivergenceError(RuntimeError):
    def __init__(self, message: str, last_good: Optional[ParameterSet] = None):
        super().__init__(message)
        self.last_good = last_good


def derive_seed(seed: int, tag: int) -> int:
    """Independent 64-bit seed for one random stream of a run."""
    state = np.random.SeedSequence([int(seed), int(tag)]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 32 | int(state[1])


# ---------------------------------------------------------------------------
# persistence


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return format_float(float(value))
    return str(value)


def emit_csv(records: Iterable[Any], schema: Sequence[str], path) -> Path:
    """Write header plus one row per record (dataclass or mapping); floats at 17 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(schema)
        for rec in records:
            row = dataclasses.asdict(rec) if dataclasses.is_dataclass(rec) else dict(rec)
            missing = [c for c in schema if c not in row]
            if missing:
                raise ValueError(f"record lacks columns {missing}")
            writer.writerow([_cell(row[c]) for c in schema])
    return path


def read_csv(path) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="ascii") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# data and specs


def load_dataset(cfg: ExperimentConfig) -> Tuple[datasets.LabeledDataset, datasets.LabeledDataset]:
    d = cfg.dataset
    if d.kind == "spirals":
        full = datasets.gen_spirals(d.num_classes, d.points_per_class, d.noise, d.seed, d.turns)
    elif d.kind == "blobs":
        full = datasets.gen_gaussian_blobs(d.num_classes, d.points_per_class, d.center_spread, d.cluster_std, d.seed)
    else:
        full = datasets.load_csv(d.path)
    return datasets.split(full, d.train_fraction, d.seed)


def network_specs(cfg: ExperimentConfig, train: datasets.LabeledDataset) -> Tuple[NetworkSpec, NetworkSpec]:
    teacher = NetworkSpec(train.dim, cfg.teacher.hidden, train.num_classes)
    student = NetworkSpec(train.dim, cfg.student.hidden, train.num_classes)
    return teacher, student


def _finite(value: float, what: str, params: ParameterSet) -> float:
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite {what} ({value})", params)
    return value


# ---------------------------------------------------------------------------
# teacher


@dataclass
class TeacherRun:
    params: ParameterSet
    spec: NetworkSpec
    records: List[RunRecord]


def train_teacher(
    cfg: ExperimentConfig,
    seed: int,
    train: datasets.LabeledDataset,
    test: Optional[datasets.LabeledDataset] = None,
) -> TeacherRun:
    """Cross-entropy-only training of the teacher with the vanilla trainer."""
    spec, _ = network_specs(cfg, train)
    opt = dataclasses.replace(cfg.trainer.optimizer(), delta=0.0)
    params = init_network(spec, derive_seed(seed, TEACHER_INIT))
    state = SgdState.zeros_like(params)
    order_seed = derive_seed(seed, TEACHER_ORDER)
    records, step = [], 0
    for epoch in range(cfg.teacher.epochs):
        lr = lr_schedule(epoch, cfg.trainer.lr, cfg.trainer.milestones, cfg.trainer.lr_decay)
        for idx in datasets.batches(len(train), cfg.batch_size, order_seed, epoch):
            tape = Tape()
            loss = cross_entropy(forward(params, spec, train.inputs[idx], tape), train.labels[idx])
            _finite(loss.item(), "teacher task loss", params)
            params, state = sgd_step(params, backward(tape, loss), state, opt, lr=lr)
            step += 1
        logits = predict(params, spec, train.inputs)
        records.append(RunRecord(
            iteration=step,
            epoch=epoch,
            train_task_loss=_finite(cross_entropy(logits, train.labels).item(), "teacher task loss", params),
            train_distill_loss=None,
            train_accuracy=accuracy(logits, train.labels),
            test_accuracy=accuracy(predict(params, spec, test.inputs), test.labels) if test is not None else None,
            learning_rate=lr,
        ))
    return TeacherRun(params, spec, records)


# ---------------------------------------------------------------------------
# student


@dataclass
class StudentRun:
    params: ParameterSet
    spec: NetworkSpec
    state: Any
    iterations: List[RunRecord]
    epochs: List[RunRecord]
    summary: Dict[str, Any] = field(default_factory=dict)
    landscape: Any = None
    fidelity: Optional[np.ndarray] = None


def _scaled(grads: Mapping[str, np.ndarray], weight: float) -> Dict[str, np.ndarray]:
    return {name: weight * g for name, g in grads.items()}


def _zeros(params: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {name: np.zeros_like(v) for name, v in params.items()}


def dual_gradient(
    params: ParameterSet,
    spec: NetworkSpec,
    x: np.ndarray,
    y: np.ndarray,
    teacher_logits: np.ndarray,
    dcfg: DistillConfig,
) -> Tuple[DualGradient, float, float, np.ndarray]:
    """One forward pass and a separate backward pass per loss.

    Returns ``(grads, task_loss, distill_loss, student_logits)`` with the loss
    weights already folded into ``grads``.  A zero-weighted loss is evaluated
    but never differentiated.
    """
    tape = Tape()
    logits = forward(params, spec, x, tape)
    task = cross_entropy(logits, y)
    distill = kd_divergence(logits, teacher_logits, dcfg)
    a = dcfg.alpha
    g_ce = _scaled(backward(tape, task), a) if a > 0.0 else _zeros(params)
    g_kd = _scaled(backward(tape, distill), 1.0 - a) if a < 1.0 else _zeros(params)
    return DualGradient(g_ce, g_kd), task.item(), distill.item(), logits.data


def _optimizer_for(cfg: ExperimentConfig) -> TrainerConfig:
    return cfg.trainer.optimizer()


def distill_student(
    cfg: ExperimentConfig,
    teacher: TeacherRun,
    seed: int,
    train: datasets.LabeledDataset,
    test: datasets.LabeledDataset,
) -> StudentRun:
    """Train the student under ``cfg.trainer.kind`` against a frozen teacher.

    ``distill.alpha = 1`` gives the cross-entropy baseline; the distillation
    loss is then only measured.
    """
    _, spec = network_specs(cfg, train)
    opt = _optimizer_for(cfg)
    dcfg = cfg.distill
    diag = cfg.diagnostics
    use_dot = cfg.trainer.kind == "dot"

    params = init_network(spec, derive_seed(seed, STUDENT_INIT))
    state = DotState.zeros_like(params) if use_dot else SgdState.zeros_like(params)
    order_seed = derive_seed(seed, STUDENT_ORDER)
    teacher_train = predict(teacher.params, teacher.spec, train.inputs)

    iterations: List[RunRecord] = []
    epochs: List[RunRecord] = []
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg.trainer.lr, cfg.trainer.milestones, cfg.trainer.lr_decay)
        first = len(iterations)
        for idx in datasets.batches(len(train), cfg.batch_size, order_seed, epoch):
            x, y = train.inputs[idx], train.labels[idx]
            t_logits = predict(teacher.params, teacher.spec, x)
            grads, ce, kd, s_logits = dual_gradient(params, spec, x, y, t_logits, dcfg)
            _finite(ce, "task loss", params)
            _finite(kd, "distillation loss", params)
            last_good = params
            if use_dot:
                params, state = dot_step(params, grads, state, opt, lr=lr)
            else:
                params, state = sgd_step(params, grads.summed(params, params), state, opt, lr=lr)
            if not all(np.all(np.isfinite(v)) for v in params.values()):
                raise DivergenceError("parameters became non-finite", last_good)
            step += 1
            iterations.append(record_iteration(
                state,
                iteration=step,
                epoch=epoch,
                task_loss=ce,
                distill_loss=kd,
                train_accuracy=accuracy(s_logits, y),
                learning_rate=lr,
                cosines=diag.cosines,
            ))
        epochs.append(_epoch_record(
            params, spec, train, test, teacher, teacher_train, dcfg, step, epoch, lr, iterations[first:]
        ))

    run = StudentRun(params, spec, state, iterations, epochs)
    run.summary = _summarize(cfg, seed, run)
    if diag.landscape:
        direction_seed = [derive_seed(seed, LANDSCAPE), 0]
        direction = filter_normalized_direction(params, direction_seed)
        run.landscape = landscape_slice(params, spec, train, direction, diag.landscape_radii, direction_seed)
        run.summary["sharpness"] = sharpness(
            params, spec, train, diag.sharpness_directions, diag.sharpness_radius, derive_seed(seed, LANDSCAPE) + 1
        )
    if diag.fidelity:
        matrix, mean_abs = fidelity_difference(
            predict(params, spec, test.inputs), predict(teacher.params, teacher.spec, test.inputs)
        )
        run.fidelity = matrix
        run.summary["fidelity_mean_abs"] = mean_abs
    return run


def _epoch_record(params, spec, train, test, teacher, teacher_train, dcfg, step, epoch, lr, epoch_iters) -> RunRecord:
    logits = predict(params, spec, train.inputs)
    cos_kd = [r.cos_kd for r in epoch_iters if r.cos_kd is not None]
    cos_ce = [r.cos_ce for r in epoch_iters if r.cos_ce is not None]
    return RunRecord(
        iteration=step,
        epoch=epoch,
        train_task_loss=_finite(task_loss(params, spec, train), "task loss", params),
        train_distill_loss=_finite(kd_divergence(logits, teacher_train, dcfg).item(), "distillation loss", params),
        cos_kd=float(np.mean(cos_kd)) if cos_kd else None,
        cos_ce=float(np.mean(cos_ce)) if cos_ce else None,
        train_accuracy=accuracy(logits, train.labels),
        test_accuracy=accuracy(predict(params, spec, test.inputs), test.labels),
        learning_rate=lr,
    )


def _summarize(cfg: ExperimentConfig, seed: int, run: StudentRun) -> Dict[str, Any]:
    final = run.epochs[-1]
    cos_kd = [r.cos_kd for r in run.iterations if r.cos_kd is not None]
    cos_ce = [r.cos_ce for r in run.iterations if r.cos_ce is not None]
    return {
        "seed": seed,
        "trainer": cfg.trainer.kind,
        "alpha": cfg.distill.alpha,
        "delta": cfg.trainer.delta if cfg.trainer.kind == "dot" else 0.0,
        "momentum": cfg.trainer.momentum,
        "final_train_task_loss": final.train_task_loss,
        "final_train_distill_loss": final.train_distill_loss,
        "final_train_accuracy": final.train_accuracy,
        "final_test_accuracy": final.test_accuracy,
        "mean_cos_kd": float(np.mean(cos_kd)) if cos_kd else None,
        "mean_cos_ce": float(np.mean(cos_ce)) if cos_ce else None,
        "sharpness": None,
        "fidelity_mean_abs": None,
    }


# ---------------------------------------------------------------------------
# run directories


def seed_dir(root, name: str, seed: int) -> Path:
    return Path(root) / name / f"seed_{seed}"


def write_teacher(run: TeacherRun, cfg: ExperimentConfig, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.txt").write_text(dumps_config(cfg), encoding="ascii")
    save_tensors(run.params, directory / "teacher.params")
    emit_csv(run.records, RunRecord.columns(), directory / "epochs.csv")
    return directory


def write_student(run: StudentRun, cfg: ExperimentConfig, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.txt").write_text(dumps_config(cfg), encoding="ascii")
    save_tensors(run.params, directory / "student.params")
    save_tensors(run.state.tensors(), directory / "optimizer.state")
    emit_csv(run.iterations, RunRecord.columns(), directory / "iterations.csv")
    emit_csv(run.epochs, RunRecord.columns(), directory / "epochs.csv")
    if run.landscape is not None:
        rows = [{"radius": r, "loss": v} for r, v in zip(run.landscape.radii, run.landscape.loss_values)]
        emit_csv(rows, ["radius", "loss"], directory / "landscape.csv")
    if run.fidelity is not None:
        write_matrix_csv(run.fidelity, directory / "fidelity.csv")
    emit_csv([run.summary], SUMMARY_COLUMNS, directory / "summary.csv")
    return directory


def write_matrix_csv(matrix: np.ndarray, path) -> Path:
    c = matrix.shape[1]
    rows = [{"row": i, **{f"c{j}": matrix[i, j] for j in range(c)}} for i in range(matrix.shape[0])]
    return emit_csv(rows, ["row"] + [f"c{j}" for j in range(c)], path)


def run_experiment(cfg: ExperimentConfig, seed: int, name: Optional[str] = None, out=None) -> StudentRun:
    """Teacher then student for one seed; writes both run directories under ``out``."""
    train, test = load_dataset(cfg)
    teacher = train_teacher(cfg, seed, train, test)
    try:
        student = distill_student(cfg, teacher, seed, train, test)
    except DivergenceError as exc:
        if out is not None and exc.last_good is not None:
            d = seed_dir(out, name or cfg.trainer.kind, seed)
            d.mkdir(parents=True, exist_ok=True)
            save_tensors(exc.last_good, d / "last_good.params")
        raise
    if out is not None:
        write_teacher(teacher, cfg, seed_dir(out, "teacher", seed))
        write_student(student, cfg, seed_dir(out, name or cfg.trainer.kind, seed))
    return student


# ---------------------------------------------------------------------------
# two-logit toy


@dataclass
class ToyResult:
    vanilla: np.ndarray
    dot: np.ndarray

    def rows(self) -> List[Dict[str, Any]]:
        return [
            {"step": i + 1, "vanilla_prob": v, "dot_prob": d}
            for i, (v, d) in enumerate(zip(self.vanilla, self.dot))
        ]


def toy_gradients(logits: np.ndarray, teacher_logits: np.ndarray, dcfg: DistillConfig) -> DualGradient:
    """Closed-form weighted gradients for one row of logits, target class 1.

    d CE / dz = softmax(z) - onehot(1); d KL(q_T || p_T) / dz = (p_T - q_T) / T,
    times T^2 when scaling is on.  Only the teacher-first order is supported.
    """
    if dcfg.kl_order is not KLOrder.TEACHER_FIRST:
        raise ValueError("toy gradients are closed-form for kl_order=teacher_first only")
    z = np.asarray(logits, dtype=np.float64).reshape(1, -1)
    t = dcfg.temperature
    g_ce = _softmax_row(z)
    g_ce[0, 1] -= 1.0
    g_kd = (_softmax_row(z / t) - _softmax_row(np.reshape(teacher_logits, (1, -1)) / t)) / t
    if dcfg.t_square_scaling:
        g_kd = g_kd * t * t
    return DualGradient({"logits": dcfg.alpha * g_ce}, {"logits": (1.0 - dcfg.alpha) * g_kd})


def _softmax_row(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _class1_prob(z: np.ndarray) -> float:
    z = z.reshape(-1)
    return float(1.0 / (1.0 + np.exp(z[0] - z[1])))


def toy_experiment(
    delta: float = 0.075,
    steps: int = 2000,
    lr: float = 0.1,
    momentum: float = 0.9,
    temperature: float = 1.0,
    teacher_prob: float = 0.7,
    seed: int = 0,
    alpha: float = 0.5,
    init_logits: Optional[np.ndarray] = None,
) -> ToyResult:
    """A trainable pair of logits pulled by CE toward class 1 and by KL toward a fixed teacher.

    The same start point is optimized by vanilla momentum SGD and by DOT; the
    class-1 probability after every step is recorded for both.
    """
    if not 0.0 < teacher_prob < 1.0:
        raise ValueError(f"teacher_prob must lie in (0, 1), got {teacher_prob}")
    dcfg = DistillConfig(alpha=alpha, temperature=temperature)
    teacher_logits = np.log([1.0 - teacher_prob, teacher_prob])
    if init_logits is None:
        init_logits = np.random.default_rng(derive_seed(seed, TOY_INIT)).standard_normal(2)
    start = {"logits": np.asarray(init_logits, dtype=np.float64).reshape(1, 2)}
    sgd_cfg = TrainerConfig(learning_rate=lr, momentum=momentum, delta=0.0)
    dot_cfg = TrainerConfig(learning_rate=lr, momentum=momentum, delta=delta)

    p_sgd, s_sgd = dict(start), SgdState.zeros_like(start)
    p_dot, s_dot = dict(start), DotState.zeros_like(start)
    vanilla, dot = np.empty(steps), np.empty(steps)
    for i in range(steps):
        g = toy_gradients(p_sgd["logits"], teacher_logits, dcfg)
        p_sgd, s_sgd = sgd_step(p_sgd, g.summed(p_sgd, p_sgd), s_sgd, sgd_cfg)
        vanilla[i] = _class1_prob(p_sgd["logits"])
        g = toy_gradients(p_dot["logits"], teacher_logits, dcfg)
        p_dot, s_dot = dot_step(p_dot, g, s_dot, dot_cfg)
        dot[i] = _class1_prob(p_dot["logits"])
    return ToyResult(vanilla, dot)


# ---------------------------------------------------------------------------
# ablation sweeps

AXES = {
    "delta": "trainer.delta",
    "mu": "trainer.momentum",
    "alpha": "distill.alpha",
}

SWEEP_COLUMNS = ["axis", "value", "seed", "status"] + SUMMARY_COLUMNS[5:]


def _sweep_cell(job) -> Dict[str, Any]:
    cfg, axis, value, seed, teacher, out = job
    row = {"axis": axis, "value": value, "seed": seed, "status": "ok"}
    row.update({c: None for c in SUMMARY_COLUMNS[5:]})
    try:
        run_cfg = cfg.replace(**{AXES[axis].replace(".", "__"): value}).validate()
        train, test = load_dataset(run_cfg)
        run = distill_student(run_cfg, teacher, seed, train, test)
        if out is not None:
            write_student(run, run_cfg, Path(out) / f"{axis}={_cell(float(value))}" / f"seed_{seed}")
        row.update({c: run.summary[c] for c in SUMMARY_COLUMNS[5:]})
    except Exception as exc:  # isolate per-run failures; the sweep carries on
        log.warning("sweep run %s=%s seed=%s failed: %s", axis, value, seed, exc)
        row["status"] = f"error: {type(exc).__name__}: {exc}".replace("\n", " ")
    return row


def ablation_sweep(
    cfg: ExperimentConfig,
    axis: str,
    values: Sequence[float],
    out=None,
    workers: int = 1,
) -> List[Dict[str, Any]]:
    """One independent distillation run per (value, seed); teachers are trained once per seed."""
    if axis not in AXES:
        raise ValueError(f"axis must be one of {sorted(AXES)}, got {axis!r}")
    if axis == "delta":
        cfg = cfg.replace(trainer__kind="dot")
    train, test = load_dataset(cfg)
    teachers = {seed: train_teacher(cfg, seed, train, test) for seed in cfg.seeds}
    jobs = [(cfg, axis, float(v), seed, teachers[seed], out) for seed in cfg.seeds for v in values]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_cell, jobs))
    else:
        rows = [_sweep_cell(job) for job in jobs]
    if out is not None:
        emit_csv(rows, SWEEP_COLUMNS, Path(out) / "summary.csv")
    return rows
