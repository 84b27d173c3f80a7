import numpy as np
import pytest

from icl_newton.errors import AllDegenerate, SingularProbeDesign, StepOutOfRange
from icl_newton.similarity import (AlgorithmHandle, best_match_matrix, cosine, error_tensor, error_vector, fit_line,
                                   forgetting_curve, induce_weights, induced_weight_tensor, linear_handle,
                                   negated_handle, prefix_stack, sim_errors, sim_weights, solver_handle,
                                   span_residual, span_residuals)
from icl_newton.solvers import SolverConfig, newton_run, ols_fit, run_solver
from icl_newton.taskgen import CovSpec, GaussianStream, TaskTemplate, sample_batch, sample_task

OLS = solver_handle(SolverConfig("ols"))
NEWTON = solver_handle(SolverConfig("newton", 30))
GD = solver_handle(SolverConfig("gd", 40))
OGD = solver_handle(SolverConfig("ogd"))
ZERO = linear_handle("zero", np.zeros(5))


@pytest.fixture(scope="module")
def small_batch():
    return sample_batch(16, TaskTemplate(5, 10), 0)


def test_prefix_stack_layout(small_batch):
    xs, ys, lengths = prefix_stack(small_batch[:2])
    assert xs.shape == (20, 10, 5)
    assert list(lengths[:10]) == list(range(1, 11))
    assert np.all(xs[2, 3:] == 0) and np.array_equal(xs[2, :3], small_batch[0].xs[:3])


def test_error_vector_examples(small_batch):
    task = small_batch[0]
    ev = error_vector(OLS, 0, task).values
    assert ev.shape == (10,)
    assert np.max(np.abs(ev[5:])) <= 1e-8  # t >= d: interpolation
    assert np.allclose(error_vector(ZERO, 0, task).values, -task.ys[1:11])
    en = error_vector(NEWTON, 30, task).values
    assert np.max(np.abs(en - ev)) <= 1e-6


def test_error_vector_matches_direct_prediction(small_batch):
    task = small_batch[3]
    ev = error_vector(GD, 7, task).values
    for t in (1, 4, 10):
        w = run_solver(SolverConfig("gd", 40), task.xs[:t], task.ys[:t]).steps[7]
        assert ev[t - 1] == pytest.approx(w @ task.xs[t] - task.ys[t], abs=1e-12)


def test_step_out_of_range(small_batch):
    with pytest.raises(StepOutOfRange):
        error_vector(NEWTON, 31, small_batch[0])
    with pytest.raises(StepOutOfRange):
        sim_errors(NEWTON, -1, OLS, 0, small_batch)


def test_sim_errors_identities(small_batch):
    for step in (0, 3, 30):
        assert sim_errors(NEWTON, step, NEWTON, step, small_batch) == 1.0
    assert sim_errors(GD, 5, negated_handle(GD), 5, small_batch) == pytest.approx(-1.0, abs=1e-12)
    ab = sim_errors(NEWTON, 2, GD, 9, small_batch)
    ba = sim_errors(GD, 9, NEWTON, 2, small_batch)
    assert ab == pytest.approx(ba, abs=1e-15)


def test_sim_errors_all_degenerate():
    tasks = sample_batch(2, TaskTemplate(3, 4), 0)
    truth = np.stack([t.ys[1:5] for t in tasks])[None]
    oracle = AlgorithmHandle("oracle", 0, None, lambda _: truth)
    with pytest.raises(AllDegenerate):
        sim_errors(oracle, 0, OLS, 0, tasks)
    with pytest.raises(AllDegenerate):
        sim_errors(OLS, 0, OLS, 0, [])


def test_newton_vs_long_gd_similarity():
    tasks = sample_batch(8, TaskTemplate(20, 40), 0)
    long_gd = solver_handle(SolverConfig("gd", 10000))
    ea = error_tensor(NEWTON, tasks)[30]
    eb = error_tensor(long_gd, tasks)[10000]
    vals = [cosine(u, v) for u, v in zip(ea, eb)]
    assert np.mean(vals) >= 0.99


def test_induce_weights_examples(small_batch):
    task = small_batch[0]
    w = np.arange(1.0, 6.0)
    got = induce_weights(linear_handle("w", w), 0, task.xs[:3], task.ys[:3], 50, CovSpec.identity(),
                         GaussianStream(9))
    assert np.allclose(got.w_tilde, w, atol=1e-10)
    assert got.t == 3 and got.probe_count == 50
    zero = induce_weights(ZERO, 0, task.xs[:3], task.ys[:3], 50, CovSpec.identity(), GaussianStream(9))
    assert np.allclose(zero.w_tilde, 0)
    trace = newton_run(task.xs[:7], task.ys[:7], SolverConfig("newton", 30))
    for k in (0, 4, 30):
        nk = induce_weights(NEWTON, k, task.xs[:7], task.ys[:7], 50, CovSpec.identity(), GaussianStream(3))
        assert np.linalg.norm(nk.w_tilde - trace.steps[k]) <= 1e-8 * max(1.0, np.linalg.norm(trace.steps[k]))


def test_induce_weights_needs_enough_probes(small_batch):
    task = small_batch[0]
    with pytest.raises(SingularProbeDesign):
        induce_weights(OLS, 0, task.xs[:3], task.ys[:3], 4, CovSpec.identity(), GaussianStream(0))
    with pytest.raises(SingularProbeDesign):
        induce_weights(OLS, 0, task.xs[:3], task.ys[:3], 10, np.diag([1.0, 1.0, 1.0, 1.0, 0.0]),
                       GaussianStream(0))


@pytest.mark.parametrize("cfg", [SolverConfig("ols"), SolverConfig("gd", 6), SolverConfig("newton", 6)])
def test_induced_weight_tensor_recovers_linear_maps(small_batch, cfg):
    handle = solver_handle(cfg)
    w = induced_weight_tensor(handle, small_batch[:3])
    xs, ys, lengths = prefix_stack(small_batch[:3])
    from icl_newton.solvers import weight_iterates
    direct = np.stack(list(weight_iterates(cfg, xs, ys, lengths)))
    assert np.allclose(w.reshape(direct.shape), direct, atol=1e-8)


def test_sim_weights_examples(small_batch):
    assert sim_weights(GD, 4, GD, 4, small_batch[:4]) == pytest.approx(1.0, abs=1e-12)
    assert sim_weights(OLS, 0, NEWTON, 30, small_batch[:4]) >= 0.999
    with pytest.raises(AllDegenerate):
        sim_weights(OLS, 0, ZERO, 0, small_batch[:4])


def test_grid_values_bounded_and_tiebreak(small_batch):
    m = best_match_matrix(NEWTON, GD, small_batch)
    assert m.grid.shape == (31, 41)
    assert np.all(np.abs(m.grid) <= 1 + 1e-12)
    for i, row in enumerate(m.grid):
        assert m.best_match[i] == int(np.flatnonzero(row == row.max())[0])


def test_newton_vs_newton_identity(small_batch):
    m = best_match_matrix(NEWTON, NEWTON, small_batch)
    plateau = next(i for i in range(31) if np.allclose(m.grid[i, i:], 1.0, atol=1e-15))
    assert list(m.best_match[:plateau + 1]) == list(range(plateau + 1))


def test_newton_vs_gd_monotone_and_exponential():
    from icl_newton.experiments import pre_plateau, trend_fit
    tasks = sample_batch(16, TaskTemplate(5, 10), 1)
    m = best_match_matrix(NEWTON, solver_handle(SolverConfig("gd", 400)), tasks)
    best = m.best_match_steps()[pre_plateau(m.best_match_steps())]
    assert best.size >= 4
    assert np.all(np.diff(best) >= 0)
    fit = trend_fit(m)
    assert fit["slope_log"] > 0 and fit["r2_log"] >= 0.9


def test_weight_metric_and_l2(small_batch):
    mw = best_match_matrix(OLS, NEWTON, small_batch[:4], metric="weights")
    assert mw.grid.shape == (1, 31) and mw.grid[0, 30] >= 0.999
    ml2 = best_match_matrix(NEWTON, NEWTON, small_batch[:4], metric="l2")
    assert np.all(np.diag(ml2.grid) == 0)
    with pytest.raises(ValueError):
        best_match_matrix(OLS, OLS, small_batch, metric="nope")


def test_forgetting_examples():
    tasks = sample_batch(64, TaskTemplate(10, 20), 0)
    newton = forgetting_curve(solver_handle(SolverConfig("newton", 40)), 40, tasks)
    assert newton.shape == (20,) and np.all(newton <= 1e-10)
    ogd = forgetting_curve(OGD, 0, tasks)
    assert ogd[0] <= 1e-12
    assert ogd[10:20].mean() > ogd[0:5].mean()


def test_span_residual_examples(rng):
    xs = rng.normal(size=(3, 6))
    assert span_residual(xs[0], xs) <= 1e-12
    ortho = np.linalg.svd(xs)[2][-1]
    assert span_residual(ortho, xs) == pytest.approx(1.0, abs=1e-10)
    assert span_residual(np.zeros(6), xs) == 0.0


def test_newton_and_ols_weights_stay_in_span():
    task = sample_task(20, 40, seed=5)
    for t in (1, 5, 19, 20, 40):
        xs, ys = task.xs[:t], task.ys[:t]
        trace = newton_run(xs, ys, SolverConfig("newton", 30))
        assert max(span_residual(w, xs) for w in trace.steps) <= 1e-8
        assert span_residual(ols_fit(xs, ys), xs) <= 1e-8


def test_span_residuals_batched_matches_single(rng):
    xs = rng.normal(size=(4, 6, 8))
    xs[1, 3:] = 0.0
    w = rng.normal(size=(2, 4, 8))
    got = span_residuals(w, xs)
    for i in range(2):
        for b in range(4):
            live = xs[b][np.any(xs[b] != 0, axis=1)]
            assert got[i, b] == pytest.approx(span_residual(w[i, b], live), abs=1e-10)


def test_fit_line():
    a, b, r2 = fit_line([0, 1, 2, 3], [1, 3, 5, 7])
    assert (a, b, r2) == pytest.approx((1, 2, 1))
