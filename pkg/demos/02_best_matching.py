# %% [markdown]
# # Which steps of one algorithm look like which steps of another?
#
# For every step of Newton's method we find the gradient-descent step (and the
# BFGS step) whose prediction errors point in the most similar direction.
# Equal rates give a straight line; an exponential curve means one method is
# exponentially faster.

# %%
import sys
from pathlib import Path

import numpy as np

from icl_newton.experiments import pre_plateau, trend_fit
from icl_newton.report import render_heatmap
from icl_newton.similarity import best_match_matrix, solver_handle
from icl_newton.solvers import SolverConfig
from icl_newton.taskgen import TaskTemplate, sample_batch

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
tasks = sample_batch(64, TaskTemplate(20, 40), 0)
newton = solver_handle(SolverConfig("newton", 30))

# %%
gd = best_match_matrix(newton, solver_handle(SolverConfig("gd", 3000)), tasks)
best = gd.best_match_steps()
fit = trend_fit(gd)
print("Newton step -> best GD step:", best[:22].tolist())
print(f"log(GD step) vs Newton step: slope {fit['slope_log']:.3f}, R^2 {fit['r2_log']:.4f}")
print(f"each Newton step is worth about {np.exp(fit['slope_log']):.2f}x more GD steps")

# %% [markdown]
# The grid itself is large (31 x 3001), so the heatmap is drawn for a
# shorter GD horizon.

# %%
short = best_match_matrix(newton, solver_handle(SolverConfig("gd", 120)), tasks)
render_heatmap(short, out / "newton_vs_gd.svg")

# %%
bfgs = best_match_matrix(newton, solver_handle(SolverConfig("bfgs", 30)), tasks)
fit = trend_fit(bfgs, warmup=10)
print("Newton step -> best BFGS step:", bfgs.best_match_steps().tolist())
print(f"after the warm-up: linear slope {fit['slope_linear']:.3f}, R^2 {fit['r2_linear']:.3f}")
render_heatmap(bfgs, out / "newton_vs_bfgs.svg")

# %%
same = best_match_matrix(newton, newton, tasks)
print("Newton vs itself:", same.best_match_steps().tolist())
print("pre-plateau indices:", pre_plateau(same.best_match_steps()).tolist())
