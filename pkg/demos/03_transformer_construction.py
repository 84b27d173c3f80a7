# %% [markdown]
# # A transformer that runs Newton's method
#
# The program below is written by hand, not trained.  With k iteration layers
# it has k + 8 layers of width 4d + 2, and its readout equals the prediction of
# k Newton-Schulz steps.

# %%
import numpy as np

from icl_newton.construct import PromptLayout, build_newton_program, encode_prompt
from icl_newton.solvers import SolverConfig, gram, newton_alpha, newton_matrices, newton_run
from icl_newton.taskgen import sample_task
from icl_newton.transformer import forward, run_program

d, n, k = 5, 12, 6
task = sample_task(d, n, seed=7)
xs, ys = task.prefix(n)
s, _ = gram(xs, ys)
alpha = newton_alpha(s)
program = build_newton_program(d, n, k, alpha)
print(f"{program.n_layers} layers, width {program.width}")
print("roles:", program.meta["roles"])

# %% [markdown]
# The prompt interleaves example columns and label columns, then the query.

# %%
prompt = encode_prompt(task, n)
layout = PromptLayout(d)
print("prompt shape:", prompt.shape)
print("label row:", np.round(prompt[layout.label, :6], 3))
print("position row:", prompt[layout.pos, :6])

# %% [markdown]
# After the set-up layers and each iteration layer, the x block of every
# example column holds M_l x_i.

# %%
_, states = forward(program, prompt, keep_states=True)
matrices = newton_matrices(s, alpha, k)
for step in range(k + 1):
    block = states[2 + step][:d, 0:2 * n:2]
    print(f"M_{step} x_i matches: max deviation {np.max(np.abs(block - matrices[step] @ xs.T)):.1e}")

# %%
reference = newton_run(xs, ys, SolverConfig("newton", k)).steps[k] @ task.xs[n]
print(f"transformer {run_program(program, prompt):.12f}")
print(f"Newton      {reference:.12f}")

# %% [markdown]
# Programs serialize to JSON so the weights can be inspected or diffed.

# %%
doc = program.to_json()
print(f"{len(doc)} characters of JSON")
