"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Quantitative thresholds for the desk-scale experiments are read from
``fixtures/thresholds.json``, produced by ``reference/derive_thresholds.py``
on reference seeds disjoint from the ones evaluated here.
"""
import functools
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np
import pytest

import conftest
from feccm.cascade import dumps_model, first_layer_outputs, predict_dataset
from feccm.classifiers import BINARY, MULTINOMIAL, RIDGE, grad_nll_wrt_input, neg_log_likelihood
from feccm.harness import (
    ExperimentConfig,
    SyntheticConfig,
    evaluate,
    generate_synthetic,
    half_and_half,
    run_experiment,
    train_base,
)
from feccm.optimize import check_gradient, lasso_fit, lasso_kkt_residual, lasso_null_beta, lasso_objective
from feccm.tasks import CATEGORICAL, REGRESSION, MultiTaskDataset, TaskSpec
from feccm.training import (
    EXACT,
    FeedbackConfig,
    choose_pi,
    feedback_gradient,
    feedback_objective,
    feedback_step,
    one_goal_pi,
    select_pi_target_specific,
    train_ccm,
    train_feccm,
    unified_pi,
)

from helpers import make_model, ridge_closed_form, ridge_instance, scalar_instance, scalar_objective_on_grid
from oracles import grid_minimum_vec, lasso_cd, lasso_value

HERE = os.path.dirname(os.path.abspath(__file__))
with open(os.path.join(HERE, "fixtures", "thresholds.json"), encoding="utf-8") as _fh:
    THRESHOLDS = json.load(_fh)

EVAL_SEEDS = range(10)


def criterion(number, title, limit_s):
    """Time the test, enforce its runtime limit and report one PASS/FAIL line."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            t0 = time.perf_counter()
            detail = ""
            try:
                detail = fn(*args, **kwargs) or ""
                elapsed = time.perf_counter() - t0
                assert elapsed < limit_s, f"took {elapsed:.1f} s, limit {limit_s} s"
            except BaseException as e:
                elapsed = time.perf_counter() - t0
                line = f"criterion {number} FAIL  {title} ({elapsed:.1f} s): {e}".splitlines()[0]
                conftest.ACCEPTANCE[number] = line
                print(line, file=sys.stderr)
                raise
            line = f"criterion {number} PASS  {title} ({elapsed:.1f} s / {limit_s} s){': ' + detail if detail else ''}"
            conftest.ACCEPTANCE[number] = line
            print(line)

        return run

    return wrap


# -- 1 ------------------------------------------------------------------------------------


def random_configs(n):
    rng = np.random.default_rng(2024)
    spaces = [(3, 2, "regression"), (2, 2), (4, "regression"), (3,), (2, 3, 4), ("regression", "regression", 2)]
    for k in range(n):
        yield SyntheticConfig(
            label_spaces=spaces[k % len(spaces)],
            feature_dim=int(rng.integers(2, 7)),
            latent_dim=int(rng.integers(1, 5)),
            rho=float(rng.uniform(0, 1)),
            train_per_task=int(rng.integers(30, 90)),
            test_per_task=30,
            coverage=("disjoint", "full", "mixed")[k % 3],
            seed=int(rng.integers(1 << 30)),
        )


@criterion(1, "iteration-0 equivalence with CCM", 30)
def test_criterion_1_iteration_zero_equivalence():
    for cfg in random_configs(10):
        train, test = generate_synthetic(cfg)
        ccm = train_ccm(train)
        fe, _ = train_feccm(train, config=FeedbackConfig(max_outer_iters=0))
        assert dumps_model(fe) == dumps_model(ccm)
        a, b = predict_dataset(fe, test), predict_dataset(ccm, test)
        for j in fe.task_ids:
            assert np.array_equal(a[j][0], b[j][0]) and np.array_equal(a[j][1], b[j][1])
    return "10 configurations byte-identical"


# -- 2 ------------------------------------------------------------------------------------


@criterion(2, "hard-EM monotonicity (exact mode)", 180)
def test_criterion_2_monotone_joint_objective():
    worst = -np.inf
    # the literal hard-EM alternation: the second layer is refit on the latents
    cfg = FeedbackConfig(feedback_mode=EXACT, second_layer_fit="latents")
    for seed in range(20):
        train, _ = generate_synthetic(SyntheticConfig(label_spaces=(3, 2, "regression"), train_per_task=300,
                                                      test_per_task=1, seed=seed))
        _, trace = train_feccm(train, config=replace(cfg, seed=seed))
        values = [v for _, v in trace.half_steps]
        assert len(values) >= 3 and np.all(np.isfinite(values))
        steps = np.diff(values)
        worst = max(worst, steps.max())
        assert steps.max() <= 1e-6, f"seed {seed}: objective rose by {steps.max():.3g}"
    return f"20 seeds, largest half-step change {worst:.3g}"


# -- 3 ------------------------------------------------------------------------------------


@criterion(3, "feedback optimum matches grid and closed-form oracles", 60)
def test_criterion_3_feedback_oracles():
    worst_grid = 0.0
    for seed in range(50):
        model, data = scalar_instance(seed, n=1)
        state = feedback_step(model, data, FeedbackConfig(feedback_mode=EXACT))
        s = data.samples[0]
        z = float(state.z[1][0, 0])
        f_star = feedback_objective(model, s, [np.array([z])])
        # grid centred on the descent's starting point, not on its answer
        zhat = float(first_layer_outputs(model, data.features)[1][0, 0])
        assert abs(z - zhat) < 20.0
        _, f_grid = grid_minimum_vec(lambda v: scalar_objective_on_grid(model, s, v), zhat - 25.0, zhat + 25.0)
        worst_grid = max(worst_grid, abs(f_star - f_grid))
        assert abs(f_star - f_grid) <= 1e-4, f"instance {seed}: {f_star} vs grid {f_grid}"
    worst_cf = 0.0
    for seed in range(20):
        model, data = ridge_instance(seed)
        state = feedback_step(model, data, FeedbackConfig(feedback_mode=EXACT))
        for r, s in enumerate(data.samples):
            got = np.array([state.z[i][r, 0] for i in model.task_ids])
            err = float(np.max(np.abs(got - ridge_closed_form(model, s))))
            worst_cf = max(worst_cf, err)
            assert err <= 1e-8
    return f"grid gap {worst_grid:.2g}, closed-form gap {worst_cf:.2g}"


# -- 4 ------------------------------------------------------------------------------------


def _random_params(rng, kind):
    from feccm.classifiers import ClassifierParams

    d = int(rng.integers(1, 6))
    k = int(rng.integers(2, 5)) if kind == MULTINOMIAL else 1
    p = ClassifierParams(kind, 2 * rng.standard_normal((k, d + 1)))
    x = 2 * rng.standard_normal(d)
    t = rng.standard_normal() if kind == RIDGE else int(rng.integers(k if kind == MULTINOMIAL else 2))
    return p, x, t


@criterion(4, "gradients match central differences", 30)
def test_criterion_4_gradients():
    rng = np.random.default_rng(44)
    worst = 0.0
    for kind in (MULTINOMIAL, BINARY, RIDGE):
        for _ in range(100):
            p, x, t = _random_params(rng, kind)
            err = check_gradient(lambda v: neg_log_likelihood(p, v, t), lambda v: grad_nll_wrt_input(p, v, t), x, 1e-5)
            worst = max(worst, err)
            assert err < 1e-5
    cascades = {
        MULTINOMIAL: ((TaskSpec(1, "a", CATEGORICAL, 3, n_classes=3), TaskSpec(2, "b", CATEGORICAL, 2, n_classes=4)),
                      {1: MULTINOMIAL, 2: MULTINOMIAL}),
        BINARY: ((TaskSpec(1, "a", CATEGORICAL, 3, n_classes=2), TaskSpec(2, "b", CATEGORICAL, 2, n_classes=2)),
                 {1: BINARY, 2: BINARY}),
        RIDGE: ((TaskSpec(1, "a", REGRESSION, 3), TaskSpec(2, "b", REGRESSION, 2)), {1: RIDGE, 2: RIDGE}),
        "mixed": ((TaskSpec(1, "a", CATEGORICAL, 3, n_classes=3), TaskSpec(2, "b", CATEGORICAL, 2, n_classes=2),
                   TaskSpec(3, "c", REGRESSION, 2)), {1: MULTINOMIAL, 2: BINARY, 3: RIDGE}),
    }
    from feccm.tasks import Sample

    for name, (specs, kinds) in cascades.items():
        for _ in range(100):
            model = make_model(rng, specs, kinds)
            labels = {}
            for s in specs:
                if rng.random() < 0.7:
                    labels[s.task_id] = float(rng.standard_normal()) if not s.is_categorical else int(
                        rng.integers(s.n_classes))
            sample = Sample(0, {s.task_id: rng.standard_normal(s.feature_dim) for s in specs}, labels)
            dim = sum(model.latent_dim(i) for i in model.task_ids)
            z = 2 * rng.standard_normal(dim)
            w = float(rng.uniform(0.2, 3))
            err = check_gradient(lambda v: feedback_objective(model, sample, v, EXACT, first_layer_weight=w),
                                 lambda v: feedback_gradient(model, sample, v, EXACT, first_layer_weight=w), z, 1e-5)
            worst = max(worst, err)
            assert err < 1e-5, f"{name}: {err}"
    return f"max relative error {worst:.2g}"


# -- 5 ------------------------------------------------------------------------------------


@criterion(5, "lasso optimality", 30)
def test_criterion_5_lasso():
    rng = np.random.default_rng(55)
    worst_obj = worst_kkt = 0.0
    for k in range(20):
        p = int(rng.integers(2, 51))
        n = int(rng.integers(p + 5, 200))
        X = rng.standard_normal((n, p)) * rng.uniform(0.5, 2, p)
        w = np.zeros(p)
        w[rng.choice(p, min(3, p), replace=False)] = rng.standard_normal(min(3, p)) * 2
        y = X @ w + rng.standard_normal() + 0.5 * rng.standard_normal(n)
        beta = float(rng.uniform(0.01, 0.5)) * lasso_null_beta(X, y)
        m = lasso_fit(X, y, beta)
        kkt = lasso_kkt_residual(X, y, m.alpha, beta)
        worst_kkt = max(worst_kkt, kkt)
        assert kkt <= 1e-5
        w_cd, b_cd = lasso_cd(X, y, beta)
        gap = abs(lasso_objective(X, y, m.alpha, beta) - lasso_value(X, y, w_cd, b_cd, beta))
        worst_obj = max(worst_obj, gap)
        assert gap <= 1e-6, f"instance {k}: objective gap {gap}"
        # beta = 0 is ordinary least squares
        m0 = lasso_fit(X, y, 0.0)
        ls = np.linalg.lstsq(np.hstack([X, np.ones((n, 1))]), y, rcond=None)[0]
        assert np.max(np.abs(m0.alpha[0] - ls)) <= 1e-6
        # at and beyond the null bound every non-bias coefficient is exactly zero
        b0 = lasso_null_beta(X, y)
        for f in (1.0, 1.5, 10.0):
            assert np.all(lasso_fit(X, y, f * b0).weights == 0.0)
    return f"worst objective gap {worst_obj:.2g}, worst KKT residual {worst_kkt:.2g}"


# -- 6 ------------------------------------------------------------------------------------


@criterion(6, "FE-CCM >= CCM >= base at rho=0.7", 600)
def test_criterion_6_ordering():
    ref = THRESHOLDS["coupled_margin"]
    setting = dict(ref["setting"], label_spaces=tuple(ref["setting"]["label_spaces"]))
    ordered = {}
    gains = []
    for seed in EVAL_SEEDS:
        train, test = generate_synthetic(SyntheticConfig(seed=seed, **setting))
        base = evaluate(train_base(train), test, n_boot=0)
        ccm = evaluate(train_ccm(train), test, n_boot=0)
        fe = evaluate(train_feccm(train, config=FeedbackConfig(seed=seed))[0], test, n_boot=0)
        for s in train.specs:
            j = s.task_id
            sign = -1.0 if s.metric == "rmse" else 1.0
            ok = sign * fe.value(j) >= sign * ccm.value(j) >= sign * base.value(j)
            ordered[j] = ordered.get(j, 0) + int(ok)
        gains.append(np.mean([fe.value(s.task_id) - base.value(s.task_id) for s in train.specs if s.is_categorical]))
    counts = [ordered[j] for j in sorted(ordered)]
    assert all(c >= 7 for c in counts), f"ordering held on {counts} of 10 seeds per task"
    margin = float(np.mean(gains))
    assert margin > ref["threshold"], f"accuracy gain {margin:.4f} <= derived threshold {ref['threshold']:.4f}"
    return f"ordering seeds per task {counts}, accuracy gain {margin:.4f} > {ref['threshold']:.4f}"


# -- 7 ------------------------------------------------------------------------------------


@criterion(7, "half-and-half labels close to full labels", 300)
def test_criterion_7_partial_labels():
    ref = THRESHOLDS["label_gap"]
    setting = dict(ref["setting"], label_spaces=tuple(ref["setting"]["label_spaces"]))
    gaps = []
    for seed in EVAL_SEEDS:
        train, test = generate_synthetic(SyntheticConfig(seed=seed, **setting))
        cfg = FeedbackConfig(seed=seed)
        full = evaluate(train_feccm(train, config=cfg)[0], test, n_boot=0)
        part = evaluate(train_feccm(half_and_half(train, seed), config=cfg)[0], test, n_boot=0)
        gaps.append([full.value(j) - part.value(j) for j in train.task_ids])
    mean_gap = np.mean(gaps, axis=0)
    allowed = np.asarray(ref["threshold"])
    assert np.all(mean_gap <= allowed), f"gap {mean_gap} exceeds derived {allowed}"
    return f"mean gap {np.round(mean_gap, 4).tolist()} <= {np.round(allowed, 4).tolist()}"


# -- 8 ------------------------------------------------------------------------------------


def _sized(sizes):
    rng = np.random.default_rng(0)
    n = sum(sizes)
    specs = tuple(TaskSpec(j, f"t{j}", REGRESSION, 1) for j in range(1, len(sizes) + 1))
    labels = {j: np.full(n, np.nan) for j in range(1, len(sizes) + 1)}
    start = 0
    for j, size in enumerate(sizes, start=1):
        labels[j][start : start + size] = 0.0
        start += size
    return MultiTaskDataset(specs, np.arange(n), {s.task_id: rng.standard_normal((n, 1)) for s in specs}, labels)


def _cv_scores(dataset, k, grid, cfg):
    """Independent hold-out scores: the same folds, one training per (grid point, fold)."""
    from feccm.tasks import concat, split

    data = dataset.sorted_by_id()
    parts = split(data, [1.0 / cfg.folds] * cfg.folds, cfg.seed)
    out = []
    for g in grid:
        vals = []
        for f in range(cfg.folds):
            fit = concat([parts[q] for q in range(cfg.folds) if q != f])
            model, _ = train_feccm(fit, config=replace(cfg, pi=tuple(g)))
            held = parts[f].subset(np.flatnonzero(parts[f].labeled_mask(k)))
            vals.append(evaluate(model, held, tasks={k}, n_boot=0).value(k))
        out.append(float(np.mean(vals)))
    return out


@criterion(8, "importance factor instantiations", 120)
def test_criterion_8_pi_contracts():
    assert unified_pi(_sized((100, 300))) == (0.75, 0.25)
    assert one_goal_pi(3, 2) == (0.0, 1.0, 0.0)
    assert one_goal_pi(4, 1) == (1.0, 0.0, 0.0, 0.0)

    train, _ = generate_synthetic(SyntheticConfig(label_spaces=(3, 2), train_per_task=60, feature_dim=4, seed=8))
    cfg = FeedbackConfig(max_outer_iters=2, folds=3, seed=8)
    u = unified_pi(train)
    grid = [(1.0, 0.0), u, (0.0, 1.0), (0.25, 0.75)]
    scores = _cv_scores(train, 1, grid, cfg)
    want = grid[int(np.argmax(scores))]
    got = select_pi_target_specific(train, 1, grid, 3, cfg)
    assert got == choose_pi(grid, scores, u) and (got == want or scores[grid.index(got)] == max(scores))

    # without feedback iterations the factors never enter training: every point ties
    flat = replace(cfg, max_outer_iters=0)
    assert select_pi_target_specific(train, 1, grid, 3, flat) == u
    assert select_pi_target_specific(train, 1, [(1.0, 0.0), (0.0, 1.0)], 3, flat) == (0.0, 1.0)
    assert choose_pi([(0.2, 0.8), (0.5, 0.5)], [0.9, 0.9], (0.5, 0.5)) == (0.5, 0.5)
    return f"grid scores {np.round(scores, 4).tolist()} -> {tuple(round(v, 4) for v in got)}"


# -- 9 ------------------------------------------------------------------------------------


@criterion(9, "determinism including maximal parallelism", 120)
def test_criterion_9_determinism(tmp_path):
    jobs = max(2, os.cpu_count() or 1)
    train, test = generate_synthetic(SyntheticConfig(train_per_task=120, test_per_task=60, seed=9))
    for mode in ("exact", "surrogate"):
        outs = []
        for n_jobs in (1, jobs, jobs):
            cfg = FeedbackConfig(max_outer_iters=3, feedback_mode=mode, seed=9, n_jobs=n_jobs)
            model, trace = train_feccm(train, config=cfg, holdout=test)
            rep = evaluate(model, test, n_boot=100, seed=9)
            outs.append((dumps_model(model), trace.to_csv(include_time=False), json.dumps(rep.to_dict())))
        assert outs[0] == outs[1] == outs[2], mode
    doc = {
        "methods": ["base", "all_features_direct", "ccm", "feccm_unified", "feccm_one_goal"],
        "seeds": [0, 1], "target_task": 2, "n_boot": 50,
        "generator": {"label_spaces": [3, 2], "train_per_task": 40, "test_per_task": 40, "feature_dim": 4},
    }
    dirs = []
    for k, n_jobs in enumerate((1, jobs)):
        cfg = ExperimentConfig.from_mapping(dict(doc, feedback={"max_outer_iters": 2, "n_jobs": n_jobs}))
        dirs.append(run_experiment(cfg, tmp_path / f"run{k}"))
    for root, _, files in os.walk(dirs[0]):
        for f in files:
            a = os.path.join(root, f)
            b = os.path.join(dirs[1], os.path.relpath(a, dirs[0]))
            with open(a, "rb") as fa, open(b, "rb") as fb:
                assert fa.read() == fb.read(), f
    return f"exact, surrogate and experiment outputs identical with n_jobs=1 and n_jobs={jobs}"
