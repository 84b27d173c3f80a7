# %% [markdown]
# # Three structural facts about Newton's iterates
#
# 1. M_k is a polynomial in S with only odd powers.
# 2. Every iterate lies in the span of the examples, even with fewer
#    examples than features.
# 3. A converged interpolating solver forgets nothing, while online gradient
#    descent favours recent examples.

# %%
import numpy as np

from icl_newton.similarity import forgetting_curve, solver_handle, span_residual
from icl_newton.solvers import SolverConfig, moment_expansion, newton_alpha, newton_matrices, newton_run
from icl_newton.taskgen import TaskTemplate, sample_batch, sample_task

# %%
for depth in range(3):
    exp = moment_expansion(1.0, depth)
    terms = " + ".join(f"({exp.integer_coefficient(p)}) a^{(p + 1) // 2} S^{p}" for p in exp.powers)
    print(f"M_{depth} = {terms}")

rng = np.random.default_rng(0)
x = rng.normal(size=(8, 5))
s = x.T @ x
a = newton_alpha(s)
for depth in (3, 6):
    ref = newton_matrices(s, a, depth)[depth]
    got = moment_expansion(a, depth).evaluate(s)
    print(f"depth {depth}: {len(list(moment_expansion(a, depth).powers))} odd powers, "
          f"relative mismatch {np.linalg.norm(got - ref) / np.linalg.norm(ref):.1e}")

# %%
task = sample_task(20, 40, seed=1)
for t in (3, 10, 19, 25, 40):
    trace = newton_run(task.xs[:t], task.ys[:t], SolverConfig("newton", 30))
    worst = max(span_residual(w, task.xs[:t]) for w in trace.steps)
    print(f"t = {t:2d}: largest distance of any iterate from span(x_1..x_t) = {worst:.1e}")

# %%
tasks = sample_batch(64, TaskTemplate(10, 20), 0)
ogd = forgetting_curve(solver_handle(SolverConfig("ogd")), 0, tasks)
newton = forgetting_curve(solver_handle(SolverConfig("newton", 40)), 40, tasks)
print("gap  OGD mse   Newton mse")
for gap in (0, 2, 5, 10, 15, 19):
    print(f"{gap:3d}  {ogd[gap]:.3e}  {newton[gap]:.1e}")
