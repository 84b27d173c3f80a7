"""Comparing algorithms through their predictions.

An :class:`AlgorithmHandle` turns a batch of prefixes plus query points into
predictions at every step of the algorithm.  On top of that live the error
vectors, error and induced-weight cosine similarities, best-match grids,
forgetting curves and the row-space residual.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import AllDegenerate, SingularProbeDesign, StepOutOfRange
from .linalg import row_space_residual, sym_eig
from .solvers import SolverConfig, n_steps, weight_iterates
from .taskgen import CovSpec, GaussianStream, TaskInstance, covariance_sqrt, make_covariance

DEGENERATE_NORM = 1e-14

# (xs (B, L, d), ys (B, L), lengths (B,), queries (B, q, d)) -> (T+1, B, q)
BatchPredictor = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class AlgorithmHandle:
    """A named predictor with a step axis.

    ``steps`` lists the step labels (default ``0..max_step``).  Handles built
    from solvers answer arbitrary queries; imported traces only know the
    next-example predictions of their own task batch, supplied through
    ``query_table``.
    """

    id: str
    max_step: int
    batch_predict: BatchPredictor | None = None
    query_table: Callable[[Sequence[TaskInstance]], np.ndarray] | None = None
    steps: tuple[int, ...] | None = None

    @property
    def step_labels(self) -> tuple[int, ...]:
        return self.steps if self.steps is not None else tuple(range(self.max_step + 1))

    def row_of(self, step: int) -> int:
        labels = self.step_labels
        if step not in labels:
            raise StepOutOfRange(f"{self.id}: step {step} not in {labels[0]}..{labels[-1]}")
        return labels.index(step)

    def predictor(self, xs, ys, x_query, step: int) -> float:
        """A(x_query | prefix, step)."""
        if self.batch_predict is None:
            raise StepOutOfRange(f"{self.id} only supports its imported task batch")
        xs = np.asarray(xs, dtype=np.float64)
        preds = self.batch_predict(xs[None], np.asarray(ys, dtype=np.float64)[None], np.array([xs.shape[0]]),
                                   np.asarray(x_query, dtype=np.float64)[None, None, :])
        return float(preds[self.row_of(step), 0, 0])

    def next_example_predictions(self, tasks: Sequence[TaskInstance]) -> np.ndarray:
        """Predictions of x_{t+1} from the first t examples: (T+1, K, n)."""
        if self.query_table is not None:
            return self.query_table(tasks)
        xs, ys, lengths = prefix_stack(tasks)
        queries = np.stack([task.xs[1:task.n_examples + 1] for task in tasks]).reshape(-1, 1, xs.shape[-1])
        preds = self.batch_predict(xs, ys, lengths, queries)
        return preds[:, :, 0].reshape(preds.shape[0], len(tasks), -1)


def solver_handle(cfg: SolverConfig, name: str | None = None) -> AlgorithmHandle:
    def batch_predict(xs, ys, lengths, queries):
        out = [np.einsum("bqd,bd->bq", queries, w) for w in weight_iterates(cfg, xs, ys, lengths)]
        return np.stack(out)

    return AlgorithmHandle(name or cfg.label, n_steps(cfg), batch_predict)


def linear_handle(name: str, weight: np.ndarray) -> AlgorithmHandle:
    """Fixed linear predictor x ↦ wᵀx, mostly for tests."""
    w = np.asarray(weight, dtype=np.float64)

    def batch_predict(xs, ys, lengths, queries):
        return np.einsum("bqd,d->bq", queries, w)[None]

    return AlgorithmHandle(name, 0, batch_predict)


def negated_handle(handle: AlgorithmHandle, name: str | None = None) -> AlgorithmHandle:
    """Twin whose errors are the negation of ``handle``'s: predicts 2y − A(x)."""

    def table(tasks):
        preds = handle.next_example_predictions(tasks)
        ys = np.stack([task.ys[1:task.n_examples + 1] for task in tasks])
        return 2.0 * ys[None] - preds

    return AlgorithmHandle(name or f"-{handle.id}", handle.max_step, None, table, handle.steps)


def prefix_stack(tasks: Sequence[TaskInstance]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All prefixes t = 1..n of every task as a zero-padded stack."""
    xs, ys, lengths = [], [], []
    for task in tasks:
        n = task.n_examples
        for t in range(1, n + 1):
            x = np.zeros((n, task.dim))
            y = np.zeros(n)
            x[:t] = task.xs[:t]
            y[:t] = task.ys[:t]
            xs.append(x)
            ys.append(y)
            lengths.append(t)
    return np.stack(xs), np.stack(ys), np.array(lengths)


# ---------------------------------------------------------------------------
# error similarity


@dataclass(frozen=True)
class ErrorVector:
    values: np.ndarray


def error_tensor(algo: AlgorithmHandle, tasks: Sequence[TaskInstance]) -> np.ndarray:
    """E[p, k, t-1] = A(x_{t+1} | first t, step p) − y_{t+1}."""
    preds = algo.next_example_predictions(tasks)
    ys = np.stack([task.ys[1:task.n_examples + 1] for task in tasks])
    return preds - ys[None]


def error_vector(algo: AlgorithmHandle, step: int, task: TaskInstance) -> ErrorVector:
    row = algo.row_of(step)
    return ErrorVector(error_tensor(algo, [task])[row, 0])


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    uv = float(u @ v)
    return uv / float(np.sqrt(float(u @ u) * float(v @ v)))


def _cosine_grid(ea: np.ndarray, eb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean cosine over the task axis for every pair of rows, skipping
    degenerate (near-zero) vectors.  Inputs are (Ta, K, n) and (Tb, K, n)."""
    na = np.sqrt(np.einsum("pkn,pkn->pk", ea, ea))
    nb = np.sqrt(np.einsum("pkn,pkn->pk", eb, eb))
    va = na > DEGENERATE_NORM
    vb = nb > DEGENERATE_NORM
    ua = np.where(va[..., None], ea / np.where(va, na, 1.0)[..., None], 0.0)
    ub = np.where(vb[..., None], eb / np.where(vb, nb, 1.0)[..., None], 0.0)
    sums = np.einsum("pkn,qkn->pq", ua, ub)
    counts = va.astype(float) @ vb.astype(float).T
    with np.errstate(invalid="ignore", divide="ignore"):
        grid = sums / counts
    return grid, counts


def _pair_similarity(ea: np.ndarray, eb: np.ndarray) -> float:
    """Mean cosine between two (K, n) stacks, exact for identical inputs."""
    vals = []
    for u, v in zip(ea, eb):
        if np.linalg.norm(u) <= DEGENERATE_NORM or np.linalg.norm(v) <= DEGENERATE_NORM:
            continue
        vals.append(cosine(u, v))
    if not vals:
        raise AllDegenerate("every sequence has a degenerate error vector")
    return float(np.mean(vals))


def sim_errors(a: AlgorithmHandle, p_a: int, b: AlgorithmHandle, p_b: int, tasks: Sequence[TaskInstance]) -> float:
    if not tasks:
        raise AllDegenerate("empty batch")
    ea = error_tensor(a, tasks)[a.row_of(p_a)]
    eb = error_tensor(b, tasks)[b.row_of(p_b)]
    return _pair_similarity(ea, eb)


# ---------------------------------------------------------------------------
# induced weights


@dataclass(frozen=True)
class InducedWeight:
    t: int
    w_tilde: np.ndarray
    probe_count: int


def draw_probes(cov: CovSpec | np.ndarray, dim: int, count: int, rng: GaussianStream) -> np.ndarray:
    sigma = np.asarray(cov, dtype=np.float64) if isinstance(cov, np.ndarray) else make_covariance(cov, dim, rng)
    return rng.normal((count, dim)) @ covariance_sqrt(sigma)


def _probe_solver(probes: np.ndarray) -> np.ndarray:
    """(X̃ᵀX̃)⁻¹X̃ᵀ, refusing rank-deficient probe designs."""
    g = probes.T @ probes
    lam = sym_eig(g).eigenvalues
    if lam[-1] <= 1e-10 * lam[0]:
        raise SingularProbeDesign("probe design matrix is rank deficient")
    return np.linalg.solve(g, probes.T)


def induce_weights(algo: AlgorithmHandle, step: int, xs, ys, probes: int, cov: CovSpec | np.ndarray,
                   rng: GaussianStream) -> InducedWeight:
    xs = np.asarray(xs, dtype=np.float64)
    dim = xs.shape[1]
    if probes < dim:
        raise SingularProbeDesign(f"need at least {dim} probes, got {probes}")
    xp = draw_probes(cov, dim, probes, rng)
    solve = _probe_solver(xp)
    preds = algo.batch_predict(xs[None], np.asarray(ys, dtype=np.float64)[None], np.array([xs.shape[0]]), xp[None])
    return InducedWeight(xs.shape[0], solve @ preds[algo.row_of(step), 0], probes)


def induced_weight_tensor(algo: AlgorithmHandle, tasks: Sequence[TaskInstance], probes: int | None = None,
                          probe_seed: int = 1, chunk: int = 256) -> np.ndarray:
    """W̃[p, k, t-1, :] for every step, task and prefix length.

    Probes for task k are drawn from N(0, Σ_k) with a stream keyed by the
    task seed, so two algorithms evaluated on the same batch see identical
    probe sets.
    """
    dim = tasks[0].dim
    probes = probes or 10 * dim
    xs, ys, lengths = prefix_stack(tasks)
    per_task = []
    solvers = []
    for task in tasks:
        rng = GaussianStream(task.seed, probe_seed)
        xp = draw_probes(task.sigma_matrix, dim, probes, rng)
        solve = _probe_solver(xp)
        for _ in range(task.n_examples):
            per_task.append(xp)
            solvers.append(solve)
    queries = np.stack(per_task)
    solvers = np.stack(solvers)
    out = []
    for lo in range(0, xs.shape[0], chunk):
        sl = slice(lo, lo + chunk)
        preds = algo.batch_predict(xs[sl], ys[sl], lengths[sl], queries[sl])
        out.append(np.einsum("bdq,pbq->pbd", solvers[sl], preds))
    w = np.concatenate(out, axis=1)
    return w.reshape(w.shape[0], len(tasks), -1, dim)


def _weights_similarity(wa: np.ndarray, wb: np.ndarray) -> float:
    """Mean over tasks of the mean over prefixes of cos(w̃_a, w̃_b)."""
    per_task = []
    for task_a, task_b in zip(wa, wb):
        vals = []
        for u, v in zip(task_a, task_b):
            if np.linalg.norm(u) <= DEGENERATE_NORM or np.linalg.norm(v) <= DEGENERATE_NORM:
                continue
            vals.append(cosine(u, v))
        if vals:
            per_task.append(np.mean(vals))
    if not per_task:
        raise AllDegenerate("every prefix has a degenerate induced weight")
    return float(np.mean(per_task))


def sim_weights(a: AlgorithmHandle, p_a: int, b: AlgorithmHandle, p_b: int, tasks: Sequence[TaskInstance],
                probes: int | None = None) -> float:
    wa = induced_weight_tensor(a, tasks, probes)[a.row_of(p_a)]
    wb = induced_weight_tensor(b, tasks, probes)[b.row_of(p_b)]
    return _weights_similarity(wa, wb)


# ---------------------------------------------------------------------------
# best-matching steps


@dataclass(frozen=True)
class SimilarityMatrix:
    algo_a: str
    algo_b: str
    grid: np.ndarray
    best_match: np.ndarray
    metric: str
    steps_a: tuple[int, ...] = field(default=())
    steps_b: tuple[int, ...] = field(default=())

    def best_match_steps(self) -> np.ndarray:
        """Best-matching step label of B for every step label of A."""
        return np.asarray(self.steps_b)[self.best_match]

    def best_values(self) -> np.ndarray:
        return self.grid[np.arange(self.grid.shape[0]), self.best_match]


def _argmax_first(grid: np.ndarray) -> np.ndarray:
    filled = np.where(np.isnan(grid), -np.inf, grid)
    return np.argmax(filled, axis=1)


def best_match_matrix(a: AlgorithmHandle, b: AlgorithmHandle, tasks: Sequence[TaskInstance],
                      metric: str = "errors", probes: int | None = None) -> SimilarityMatrix:
    """Grid of similarities for every (p_a, p_b) and the row-wise argmax.

    ``metric`` is ``errors`` (cosine of error vectors), ``weights`` (cosine
    of induced weights, averaged over prefixes) or ``l2`` (negated mean
    Euclidean distance between error vectors).
    """
    if metric == "errors":
        grid, counts = _cosine_grid(error_tensor(a, tasks), error_tensor(b, tasks))
        if np.all(counts == 0):
            raise AllDegenerate("every sequence has a degenerate error vector")
    elif metric == "l2":
        ea, eb = error_tensor(a, tasks), error_tensor(b, tasks)
        grid = np.empty((ea.shape[0], eb.shape[0]))
        for i in range(ea.shape[0]):
            grid[i] = -np.mean(np.linalg.norm(eb - ea[i][None], axis=-1), axis=1)
    elif metric == "weights":
        wa = induced_weight_tensor(a, tasks, probes)
        wb = induced_weight_tensor(b, tasks, probes)
        k, n = wa.shape[1], wa.shape[2]
        ta = wa.reshape(wa.shape[0], k * n, -1)
        tb = wb.reshape(wb.shape[0], k * n, -1)
        # per-prefix cosines, then mean over prefixes and tasks
        na = np.linalg.norm(ta, axis=-1)
        nb = np.linalg.norm(tb, axis=-1)
        va, vb = na > DEGENERATE_NORM, nb > DEGENERATE_NORM
        ua = np.where(va[..., None], ta / np.where(va, na, 1.0)[..., None], 0.0).reshape(wa.shape)
        ub = np.where(vb[..., None], tb / np.where(vb, nb, 1.0)[..., None], 0.0).reshape(wb.shape)
        cos_sum = np.einsum("pktd,qktd->pqk", ua, ub)
        cnt = np.einsum("pkt,qkt->pqk", va.reshape(wa.shape[:3]).astype(float), vb.reshape(wb.shape[:3]).astype(float))
        with np.errstate(invalid="ignore", divide="ignore"):
            per_task = cos_sum / cnt
        grid = np.nanmean(np.where(cnt > 0, per_task, np.nan), axis=2)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return SimilarityMatrix(a.id, b.id, grid, _argmax_first(grid), metric, a.step_labels, b.step_labels)


# ---------------------------------------------------------------------------
# forgetting and span


def forgetting_curve(algo: AlgorithmHandle, step: int, tasks: Sequence[TaskInstance], n_fixed: int = 20) -> np.ndarray:
    """MSE of re-predicting x_{n−g} after all n examples, for g = 0..n−1."""
    if any(task.n_examples < n_fixed for task in tasks):
        raise ValueError(f"every task needs at least {n_fixed} examples")
    xs = np.stack([task.xs[:n_fixed] for task in tasks])
    ys = np.stack([task.ys[:n_fixed] for task in tasks])
    lengths = np.full(len(tasks), n_fixed)
    queries = xs[:, ::-1]  # gap g ↦ example index n−g (1-based)
    targets = ys[:, ::-1]
    preds = algo.batch_predict(xs, ys, lengths, queries)[algo.row_of(step)]
    return np.mean((preds - targets) ** 2, axis=0)


def span_residual(w, prefix_xs) -> float:
    """Relative distance of w from the row space of the prefix examples."""
    return row_space_residual(w, prefix_xs)


def span_residuals(weights: np.ndarray, xs: np.ndarray, rank_tol: float = 1e-10) -> np.ndarray:
    """Batched span residuals: weights (..., B, d) against row spaces of xs (B, L, d).

    Zero padding rows do not change the row space, so padded prefix stacks
    can be passed directly.
    """
    eig = sym_eig(np.swapaxes(xs, -1, -2) @ xs)
    lmax = np.max(np.abs(eig.eigenvalues), axis=-1, keepdims=True)
    keep = (eig.eigenvalues > rank_tol * lmax).astype(np.float64)
    basis = eig.eigenvectors * keep[:, None, :]
    w = np.asarray(weights, dtype=np.float64)
    coords = np.einsum("bdk,...bd->...bk", basis, w)
    resid = w - np.einsum("bdk,...bk->...bd", basis, coords)
    return np.linalg.norm(resid, axis=-1) / np.maximum(np.linalg.norm(w, axis=-1), 1e-30)


def fit_line(x, y) -> tuple[float, float, float]:
    """Least-squares line y ≈ a + b x; returns (a, b, R²)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    design = np.stack([np.ones_like(x), x], axis=1)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - float(resid @ resid) / float(tot) if tot > 0 else 1.0
    return float(coef[0]), float(coef[1]), r2
