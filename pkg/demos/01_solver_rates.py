# %% [markdown]
# # How fast do the regression solvers converge?
#
# Sixty-four noiseless tasks with d = 20 features and n = 40 examples.  Each
# solver is measured by its relative distance to the least-squares solution
# after every step.

# %%
import sys
from pathlib import Path

import numpy as np

from icl_newton.experiments import AlgoSpec, convergence_curves
from icl_newton.report import curves_svg, write_text
from icl_newton.solvers import SolverConfig
from icl_newton.taskgen import CovSpec, TaskTemplate, sample_batch

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
isotropic = sample_batch(64, TaskTemplate(20, 40), 0)
skewed = sample_batch(64, TaskTemplate(20, 40, CovSpec.ill_conditioned(100)), 0)

solvers = {
    "newton": SolverConfig("newton", 40),
    "gd": SolverConfig("gd", 500),
    "cg": SolverConfig("cg", 40),
    "bfgs": SolverConfig("bfgs", 40),
    "lbfgs(m=5)": SolverConfig("lbfgs", 40, memory=5),
}


def first_below(curve, tol):
    hits = np.flatnonzero(curve <= tol)
    return int(hits[0]) if hits.size else None


# %% [markdown]
# Steps to reach a relative error of 1e-4 and 1e-8, averaged over the batch.

# %%
for label, tasks in (("isotropic", isotropic), ("kappa=100", skewed)):
    curves = {}
    for name, cfg in solvers.items():
        mean = convergence_curves(AlgoSpec(name, cfg), tasks).mean(axis=1)
        curves[name] = (np.arange(mean.size), mean)
        print(f"{label:10s} {name:11s} 1e-4 at {first_below(mean, 1e-4)}, 1e-8 at {first_below(mean, 1e-8)}")
    write_text(out / f"rates_{label.replace('=', '')}.svg", curves_svg(curves, f"mean relative error ({label})"))

# %% [markdown]
# Newton's error roughly squares from one step to the next once it is small,
# while gradient descent shrinks by a constant factor.  The ratio
# e_{k+1} / e_k^2 stays bounded, which is the quadratic signature.

# %%
errs = convergence_curves(AlgoSpec("newton", solvers["newton"]), isotropic)
task = errs[:, 0]
for k in np.flatnonzero((task[:-1] > 1e-10) & (task[:-1] < 0.1)):
    print(f"step {k:2d}: e = {task[k]:.3e}, e_next / e^2 = {task[k + 1] / task[k] ** 2:.3f}")
