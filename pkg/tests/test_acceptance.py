"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in the
terminal summary.  The 5-seed default-recipe runs are shared by criteria 5 to 9
through a session fixture (about two minutes on one core).
"""

import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from dotrain import harness
from dotrain.config import ExperimentConfig
from dotrain.data import batches, gen_spirals
from dotrain.losses import DistillConfig, KLOrder, combined_loss, cross_entropy, kd_divergence
from dotrain.models import NetworkSpec, forward, init_network
from dotrain.optim import DotState, DualGradient, SgdState, TrainerConfig, dot_step, sgd_step
from dotrain.tensor import Tape, backward, finite_difference_gradient, relative_error

SEEDS = range(5)
MAJORITY = 4


def report(label, ok, detail, started=None, budget=None, elapsed=None):
    """Print the verdict line, then assert it.  A stated runtime budget is part of the verdict."""
    if elapsed is None and started is not None:
        elapsed = time.perf_counter() - started
    timing = ""
    if elapsed is not None:
        timing = f" [{elapsed:.1f}s" + (f" / budget {budget}s]" if budget else "]")
        if budget is not None and elapsed >= budget:
            ok = False
    line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}{timing}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def count(flags):
    return sum(bool(f) for f in flags)


# ---------------------------------------------------------------------------
# shared default-recipe runs


@pytest.fixture(scope="session")
def recipe():
    """Per seed: teacher, CE-only, KD (vanilla), DOT(0.075), DOT(0) and DOT(-0.075)."""
    base = ExperimentConfig().validate()
    variants = {
        "ce": base.replace(trainer__kind="vanilla", distill__alpha=1.0),
        "kd": base.replace(trainer__kind="vanilla"),
        "dot": base,
        "dot0": base.replace(trainer__delta=0.0),
        "neg": base.replace(trainer__delta=-0.075),
    }
    train, test = harness.load_dataset(base)
    started = time.perf_counter()
    runs = {}
    for seed in SEEDS:
        teacher = harness.train_teacher(base, seed, train, test)
        runs[seed] = {"teacher": teacher}
        for name, cfg in variants.items():
            runs[seed][name] = harness.distill_student(cfg.validate(), teacher, seed, train, test)
    return runs, time.perf_counter() - started


def summaries(recipe, name, key):
    runs, _ = recipe
    return [runs[s][name].summary[key] for s in SEEDS]


# ---------------------------------------------------------------------------
# 1. gradient oracle


def test_c1_gradient_oracle():
    started = time.perf_counter()
    rng = np.random.default_rng(2024)
    losses = ["ce", "kd_teacher_first", "kd_student_first", "combined"]
    worst, combos = 0.0, 0
    for combo in range(24):
        depth = int(rng.integers(0, 3))
        spec = NetworkSpec(int(rng.integers(1, 4)), tuple(int(rng.integers(2, 6)) for _ in range(depth)),
                           int(rng.integers(2, 5)))
        batch = int(rng.integers(1, 6))
        params = init_network(spec, int(rng.integers(1 << 30)))
        for name in params:
            if name.endswith("bias"):
                params[name] = rng.normal(0.0, 0.3, params[name].shape)
        x = rng.standard_normal((batch, spec.input_dim))
        y = rng.integers(0, spec.num_classes, batch)
        teacher = rng.standard_normal((batch, spec.num_classes)) * 2
        kind = losses[combo % len(losses)]
        cfg = DistillConfig(
            alpha=float(rng.uniform(0.0, 1.0)),
            temperature=float(rng.uniform(0.5, 5.0)),
            kl_order=KLOrder.STUDENT_FIRST if kind == "kd_student_first" else KLOrder.TEACHER_FIRST,
        )

        def loss_node(p, tape=None):
            logits = forward(p, spec, x, tape)
            if kind == "ce":
                return cross_entropy(logits, y)
            if kind == "combined":
                return combined_loss(logits, y, teacher, cfg).total
            return kd_divergence(logits, teacher, cfg)

        tape = Tape()
        grads = backward(tape, loss_node(params, tape))
        fd = finite_difference_gradient(lambda p: loss_node(p).item(), params)
        worst = max(worst, max(relative_error(grads[n], fd[n]).max() for n in params))
        combos += 1
    report("C1 gradient oracle", combos >= 20 and worst < 1e-5,
           f"{combos} combos, max relative error {worst:.2e} (tol 1e-5)", started, 60)


# ---------------------------------------------------------------------------
# 2. delta = 0 equivalence


def test_c2_zero_delta_equivalence():
    started = time.perf_counter()
    data = gen_spirals(3, 100, 0.2, seed=7)
    spec = NetworkSpec(2, (16,), 3)
    teacher_spec = NetworkSpec(2, (32,), 3)
    teacher = init_network(teacher_spec, 1)
    start = init_network(spec, 2)
    cfg_dot = TrainerConfig(learning_rate=0.05, momentum=0.9, delta=0.0)
    cfg_sgd = TrainerConfig(learning_rate=0.05, momentum=0.9, delta=0.0)
    dcfg = DistillConfig()
    p_dot, s_dot = dict(start), DotState.zeros_like(start)
    p_sgd, s_sgd = dict(start), SgdState.zeros_like(start)
    steps = 0
    epoch = 0
    while steps < 500:
        for idx in batches(len(data), 32, seed=3, epoch=epoch):
            if steps == 500:
                break
            x, y = data.inputs[idx], data.labels[idx]
            t_logits = forward(teacher, teacher_spec, x).data
            g, *_ = harness.dual_gradient(p_dot, spec, x, y, t_logits, dcfg)
            p_dot, s_dot = dot_step(p_dot, g, s_dot, cfg_dot)
            g, *_ = harness.dual_gradient(p_sgd, spec, x, y, t_logits, dcfg)
            p_sgd, s_sgd = sgd_step(p_sgd, g.summed(p_sgd, p_sgd), s_sgd, cfg_sgd)
            steps += 1
        epoch += 1
    worst = max(relative_error(p_dot[n], p_sgd[n]).max() for n in start)
    report("C2 delta=0 equivalence", steps == 500 and worst < 1e-9,
           f"{steps} steps, max relative parameter difference {worst:.2e} (tol 1e-9)", started, 30)


# ---------------------------------------------------------------------------
# 3. buffer identity


def test_c3_buffer_identity():
    started = time.perf_counter()
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(1000):
        mu = float(rng.uniform(0.05, 0.95))
        bound = min(1.0 - mu, 1.0 + mu) - 1e-6
        delta = float(rng.uniform(-bound, bound))
        shape = tuple(int(s) for s in rng.integers(1, 5, size=int(rng.integers(1, 3))))
        scale = 10.0 ** rng.uniform(-2, 1)
        v_ce, v_kd = rng.standard_normal(shape) * scale, rng.standard_normal(shape) * scale
        g_ce, g_kd = rng.standard_normal(shape) * scale, rng.standard_normal(shape) * scale
        cfg = TrainerConfig(learning_rate=float(rng.uniform(0.001, 1.0)), momentum=mu, delta=delta)
        params = {"w": rng.standard_normal(shape)}
        _, dot_state = dot_step(params, DualGradient({"w": g_ce}, {"w": g_kd}),
                                DotState({"w": v_ce}, {"w": v_kd}, {"w": True}), cfg)
        _, sgd_state = sgd_step(params, {"w": g_ce + g_kd}, SgdState({"w": v_ce + v_kd}), cfg)
        routed = dot_state.ce_buffers["w"] + dot_state.kd_buffers["w"] - sgd_state.buffers["w"]
        worst = max(worst, float(np.max(np.abs(routed - delta * (v_kd - v_ce)))))
    report("C3 v_dot - v_sgd = delta (v_kd - v_ce)", worst < 1e-12,
           f"1000 triples, max elementwise error {worst:.2e} (tol 1e-12)", started, 10)


# ---------------------------------------------------------------------------
# 4. toy


def test_c4_toy():
    started = time.perf_counter()
    t = ExperimentConfig().toy
    van, dot = [], []
    for seed in range(10):
        res = harness.toy_experiment(t.delta, t.steps, t.lr, t.momentum, t.temperature, t.teacher_prob, seed, t.alpha)
        van.append(abs(res.vanilla[-1] - t.teacher_prob))
        dot.append(abs(res.dot[-1] - t.teacher_prob))
    report("C4 toy distance to teacher", np.mean(dot) < np.mean(van),
           f"mean |p-0.7| DOT {np.mean(dot):.4f} vs vanilla {np.mean(van):.4f} over 10 seeds", started, 10)


# ---------------------------------------------------------------------------
# 5-9. default spirals recipe


def test_c5_tradeoff(recipe):
    _, took = recipe
    ce_task, kd_task, dot_task = (summaries(recipe, n, "final_train_task_loss") for n in ("ce", "kd", "dot"))
    ce_kl, kd_kl, dot_kl = (summaries(recipe, n, "final_train_distill_loss") for n in ("ce", "kd", "dot"))
    a = count(k > c for k, c in zip(kd_task, ce_task))
    b = count(k < c for k, c in zip(kd_kl, ce_kl))
    c = count(d_t <= k_t and d_k <= k_k for d_t, k_t, d_k, k_k in zip(dot_task, kd_task, dot_kl, kd_kl))
    ok = min(a, b, c) >= MAJORITY
    lines = [
        f"(a) KD task > CE-only task {a}/5",
        f"(b) KD KL < CE-only KL {b}/5",
        f"(c) DOT task and KL <= KD {c}/5",
        "task CE/KD/DOT " + " ".join(f"{x:.4f}/{y:.4f}/{z:.4f}" for x, y, z in zip(ce_task, kd_task, dot_task)),
        "KL CE/KD/DOT " + " ".join(f"{x:.4f}/{y:.4f}/{z:.4f}" for x, y, z in zip(ce_kl, kd_kl, dot_kl)),
    ]
    report("C5 task/distillation trade-off", ok, "; ".join(lines), budget=300, elapsed=took)


def test_c6_cosine_shift(recipe):
    kd_dot, kd_zero = summaries(recipe, "dot", "mean_cos_kd"), summaries(recipe, "dot0", "mean_cos_kd")
    ce_dot, ce_zero = summaries(recipe, "dot", "mean_cos_ce"), summaries(recipe, "dot0", "mean_cos_ce")
    n = count(a > b and c < d for a, b, c, d in zip(kd_dot, kd_zero, ce_dot, ce_zero))
    detail = (
        f"{n}/5 seeds with both shifts; cos_kd up {count(a > b for a, b in zip(kd_dot, kd_zero))}/5, "
        f"cos_ce down {count(c < d for c, d in zip(ce_dot, ce_zero))}/5; "
        "cos_kd DOT/0 " + " ".join(f"{a:.4f}/{b:.4f}" for a, b in zip(kd_dot, kd_zero))
        + "; cos_ce DOT/0 " + " ".join(f"{a:.4f}/{b:.4f}" for a, b in zip(ce_dot, ce_zero))
    )
    report("C6 cosine-similarity shift", n >= MAJORITY, detail)


def test_c7_flatness(recipe):
    dot, ce = summaries(recipe, "dot", "sharpness"), summaries(recipe, "ce", "sharpness")
    n = count(d <= c for d, c in zip(dot, ce))
    report("C7 sharpness(DOT) <= sharpness(CE-only)", n >= MAJORITY,
           f"{n}/5 seeds; DOT/CE " + " ".join(f"{d:.3f}/{c:.3f}" for d, c in zip(dot, ce)))


def test_c8_fidelity(recipe):
    dot, kd = summaries(recipe, "dot", "fidelity_mean_abs"), summaries(recipe, "kd", "fidelity_mean_abs")
    n = count(d < k for d, k in zip(dot, kd))
    report("C8 fidelity(DOT) < fidelity(KD)", n >= MAJORITY,
           f"{n}/5 seeds; DOT/KD " + " ".join(f"{d:.4f}/{k:.4f}" for d, k in zip(dot, kd)))


def test_c9_negative_delta(recipe):
    neg, zero = summaries(recipe, "neg", "final_test_accuracy"), summaries(recipe, "dot0", "final_test_accuracy")
    n = count(a <= b for a, b in zip(neg, zero))
    report("C9 test acc(delta=-0.075) <= acc(delta=0)", n >= MAJORITY,
           f"{n}/5 seeds; neg/zero " + " ".join(f"{a:.4f}/{b:.4f}" for a, b in zip(neg, zero)))


def test_teacher_outperforms_student(recipe):
    runs, _ = recipe
    teacher = np.mean([runs[s]["teacher"].records[-1].train_accuracy for s in SEEDS])
    student = np.mean([runs[s]["ce"].summary["final_train_accuracy"] for s in SEEDS])
    assert teacher > student, (teacher, student)


# ---------------------------------------------------------------------------
# 10. determinism


def test_c10_determinism(tmp_path):
    started = time.perf_counter()
    cfg = ExperimentConfig().validate()
    t = cfg.toy
    for root in ("a", "b"):
        harness.run_experiment(cfg, 0, "dot", tmp_path / root)
        res = harness.toy_experiment(t.delta, t.steps, t.lr, t.momentum, t.temperature, t.teacher_prob, 0, t.alpha)
        harness.emit_csv(res.rows(), ["step", "vanilla_prob", "dot_prob"], tmp_path / root / "toy.csv")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.csv"))
    differing = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    report("C10 byte-identical reruns", bool(files) and not differing,
           f"{len(files)} CSV files compared, {len(differing)} differ {differing}", started)
