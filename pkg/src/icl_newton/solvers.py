"""Least-squares solvers with full per-step traces.

All iterative methods minimize the normalized loss
``L(w) = (1/2t) * ||y - Xw||^2`` (plus ``(lam/2t) * ||w||^2`` under ridge),
so gradients are ``(1/t) * (S w - b)`` with ``S = XᵀX (+ lam I)`` and
``b = Xᵀy``.  The batched iterators work on stacks of ``(S, b)`` pairs and
are what the similarity code uses; the ``*_run`` functions wrap them for a
single prefix and return a :class:`SolverTrace`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator

import numpy as np

from .errors import Breakdown, DimensionMismatch, IndexOutOfRange, Overflow, ZeroExample
from .linalg import lstsq_min_norm, pinv_psd, spectral_norm

CONVERGED_REL_CHANGE = 1e-12
CG_RESIDUAL_TOL = 1e-14
CURVATURE_TOL = 1e-14
MOMENT_MAX_DEPTH = 20


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class AutoInvLmax:
    """η = t / λmax(S): unit step on the top curvature of the normalized loss."""


@dataclass(frozen=True)
class FixedEta:
    value: float


@dataclass(frozen=True)
class PaperBoundary:
    """α = 2 / ||S Sᵀ||₂ exactly."""


@dataclass(frozen=True)
class Safe:
    factor: float = 0.95

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ValueError("Safe factor must lie in (0, 1)")


@dataclass(frozen=True)
class FixedAlpha:
    value: float


ALGOS = ("ols", "gd", "ogd", "newton", "cg", "bfgs", "lbfgs", "ridge")


@dataclass(frozen=True)
class SolverConfig:
    algo: str = "newton"
    max_steps: int = 30
    eta_mode: AutoInvLmax | FixedEta = AutoInvLmax()
    alpha_mode: PaperBoundary | Safe | FixedAlpha = Safe()
    lam: float = 0.0
    memory: int = 5

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ValueError(f"unknown algorithm {self.algo!r}")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.memory < 1:
            raise ValueError("L-BFGS memory must be >= 1")
        if self.lam < 0.0:
            raise ValueError("ridge lambda must be >= 0")

    @property
    def label(self) -> str:
        if self.algo == "lbfgs":
            return f"lbfgs(m={self.memory})"
        if self.algo == "ridge" or (self.lam > 0 and self.algo in ("newton", "gd", "cg", "bfgs", "lbfgs")):
            return f"{self.algo}(lam={self.lam:g})"
        return self.algo


@dataclass(frozen=True, eq=False)
class SolverTrace:
    algo: str
    steps: np.ndarray
    objective: np.ndarray
    grad_norm: np.ndarray
    converged_at: int | None = None
    info: dict = field(default_factory=dict)

    @property
    def final(self) -> np.ndarray:
        return self.steps[-1]

    def __len__(self) -> int:
        return self.steps.shape[0]


# ---------------------------------------------------------------------------
# helpers


def _check_xy(xs, ys) -> tuple[np.ndarray, np.ndarray]:
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.ndim != 2 or ys.ndim != 1 or xs.shape[0] != ys.shape[0] or xs.shape[0] < 1:
        raise DimensionMismatch(f"xs {xs.shape} and ys {ys.shape} are incompatible")
    return xs, ys


def gram(xs, ys, lam: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """S = XᵀX + lam·I and b = Xᵀy, for one prefix or a padded stack."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    s = np.swapaxes(xs, -1, -2) @ xs
    b = np.einsum("...ti,...t->...i", xs, ys)
    if lam:
        s = s + lam * np.eye(s.shape[-1])
    return s, b


def _matvec(s: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.einsum("bij,bj->bi", s, w)


def newton_alpha(s, mode=Safe()) -> np.ndarray | float:
    """Initial scale α for M₀ = αS from ||S Sᵀ||₂ = λmax(S)²."""
    if isinstance(mode, FixedAlpha):
        if np.ndim(s) > 2:
            return np.full(np.shape(s)[:-2], mode.value)
        return mode.value
    top = spectral_norm(s)
    base = 2.0 / (top * top)
    if isinstance(mode, PaperBoundary):
        return base
    return mode.factor * base


def gd_eta(s, t, mode=AutoInvLmax()):
    if isinstance(mode, FixedEta):
        return np.full(np.shape(t), mode.value, dtype=np.float64) if np.ndim(t) else mode.value
    return np.asarray(t, dtype=np.float64) / spectral_norm(s)


# ---------------------------------------------------------------------------
# batched iterators: each yields the (B, d) iterate for k = 0..steps


def iterate_newton(s: np.ndarray, b: np.ndarray, alpha, steps: int, keep_matrices: list | None = None) -> Iterator[np.ndarray]:
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1, 1, 1)
    m = alpha * s
    for k in range(steps + 1):
        if keep_matrices is not None:
            keep_matrices.append(m.copy())
        yield _matvec(m, b)
        if k < steps:
            m = 2.0 * m - m @ s @ m


def iterate_gd(s: np.ndarray, b: np.ndarray, t, eta, steps: int) -> Iterator[np.ndarray]:
    rate = (np.asarray(eta, dtype=np.float64) / np.asarray(t, dtype=np.float64)).reshape(-1, 1)
    w = np.zeros_like(b)
    for k in range(steps + 1):
        yield w
        if k < steps:
            w = w - rate * (_matvec(s, w) - b)


def iterate_ogd(xs: np.ndarray, ys: np.ndarray, lengths) -> np.ndarray:
    """Single pass of online GD with η_k = 1/||x_k||²; returns (L+1, B, d) iterates.

    Entry k holds the weights after consuming k examples; sequences shorter
    than k keep their final weights.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    lengths = np.asarray(lengths)
    nb, nl, d = xs.shape
    w = np.zeros((nb, d))
    out = [w]
    for k in range(nl):
        live = k < lengths
        x = xs[:, k]
        sq = np.einsum("bi,bi->b", x, x)
        if np.any(live & (sq == 0.0)):
            raise ZeroExample(f"example {k + 1} has zero norm")
        err = ys[:, k] - np.einsum("bi,bi->b", x, w)
        step = np.where(live, err / np.where(live, sq, 1.0), 0.0)
        w = w + step[:, None] * x
        out.append(w)
    return np.stack(out)


def _cg_single(s: np.ndarray, b: np.ndarray, t: int, steps: int) -> np.ndarray:
    d = b.shape[0]
    w = np.zeros(d)
    ws = [w]
    dirs: list[np.ndarray] = []
    curv: list[float] = []
    scale = max(float(np.max(np.abs(s))) * d, np.finfo(float).tiny)
    bnorm = float(np.linalg.norm(b))
    done = bnorm == 0.0
    for _ in range(steps):
        r = b - s @ w
        if done or np.linalg.norm(r) <= CG_RESIDUAL_TOL * bnorm:
            done = True
            ws.append(w)
            continue
        g = r / t  # negative gradient of the normalized loss
        dw = g.copy()
        for p, c in zip(dirs, curv):
            dw -= (g @ (s @ p)) / c * p
        c = float(dw @ s @ dw)
        if c <= CURVATURE_TOL * scale * float(dw @ dw):
            raise Breakdown("conjugate direction has vanishing curvature before convergence")
        step = float(dw @ r) / c
        w = w + step * dw
        dirs.append(dw)
        curv.append(c)
        ws.append(w)
    return np.stack(ws)


def _bfgs_single(s: np.ndarray, b: np.ndarray, t: int, steps: int, keep: list | None = None) -> np.ndarray:
    """BFGS with exact line search; ``keep`` receives the final inverse-Hessian estimate of S/t."""
    d = b.shape[0]
    w = np.zeros(d)
    hinv = np.eye(d)
    ws = [w]
    bnorm = float(np.linalg.norm(b))
    grad = (s @ w - b) / t
    for _ in range(steps):
        p = -hinv @ grad
        curv = float(p @ s @ p)
        if curv <= 0.0 or np.linalg.norm(b - s @ w) <= CG_RESIDUAL_TOL * bnorm:
            ws.append(w)
            continue
        step = float(p @ (b - s @ w)) / curv
        w_new = w + step * p
        grad_new = (s @ w_new - b) / t
        sk = w_new - w
        yk = grad_new - grad
        ys_ = float(yk @ sk)
        if ys_ > CURVATURE_TOL * np.linalg.norm(yk) * np.linalg.norm(sk):
            hy = hinv @ yk
            hinv = hinv - np.outer(hy, hy) / float(yk @ hy) + np.outer(sk, sk) / ys_
        w, grad = w_new, grad_new
        ws.append(w)
    if keep is not None:
        keep.append(hinv)
    return np.stack(ws)


def _lbfgs_single(s: np.ndarray, b: np.ndarray, t: int, steps: int, memory: int) -> np.ndarray:
    d = b.shape[0]
    w = np.zeros(d)
    ws = [w]
    pairs: list[tuple[np.ndarray, np.ndarray, float]] = []
    bnorm = float(np.linalg.norm(b))
    grad = (s @ w - b) / t
    for _ in range(steps):
        q = grad.copy()
        coefs = []
        for sk, yk, rho in reversed(pairs):
            a = rho * float(sk @ q)
            coefs.append(a)
            q -= a * yk
        r = q  # B_init = I
        for (sk, yk, rho), a in zip(pairs, reversed(coefs)):
            beta = rho * float(yk @ r)
            r += (a - beta) * sk
        p = -r
        curv = float(p @ s @ p)
        if curv <= 0.0 or np.linalg.norm(b - s @ w) <= CG_RESIDUAL_TOL * bnorm:
            ws.append(w)
            continue
        step = float(p @ (b - s @ w)) / curv
        w_new = w + step * p
        grad_new = (s @ w_new - b) / t
        sk = w_new - w
        yk = grad_new - grad
        ys_ = float(yk @ sk)
        if ys_ > CURVATURE_TOL * np.linalg.norm(yk) * np.linalg.norm(sk):
            pairs.append((sk, yk, 1.0 / ys_))
            if len(pairs) > memory:
                pairs.pop(0)
        w, grad = w_new, grad_new
        ws.append(w)
    return np.stack(ws)


def iterate_per_instance(kind: str, s: np.ndarray, b: np.ndarray, t, steps: int, memory: int = 5) -> np.ndarray:
    """Run CG/BFGS/L-BFGS on every (S, b) pair; returns (steps+1, B, d)."""
    t = np.broadcast_to(np.asarray(t), (s.shape[0],))
    out = []
    for i in range(s.shape[0]):
        if kind == "cg":
            out.append(_cg_single(s[i], b[i], int(t[i]), steps))
        elif kind == "bfgs":
            out.append(_bfgs_single(s[i], b[i], int(t[i]), steps))
        elif kind == "lbfgs":
            out.append(_lbfgs_single(s[i], b[i], int(t[i]), steps, memory))
        else:
            raise ValueError(kind)
    return np.stack(out, axis=1)


def weight_iterates(cfg: SolverConfig, xs: np.ndarray, ys: np.ndarray, lengths, info: dict | None = None) -> Iterator[np.ndarray]:
    """Yield the (B, d) weight estimate of every prefix for k = 0..T.

    ``xs`` is (B, L, d) zero-padded, ``ys`` is (B, L) and ``lengths`` gives
    the number of live rows per entry.  OLS and ridge yield a single step.
    """
    lengths = np.asarray(lengths)
    if cfg.algo == "ogd":
        yield from iterate_ogd(xs, ys, lengths)[-1:]
        return
    s, b = gram(xs, ys, cfg.lam if cfg.algo != "ols" else 0.0)
    if cfg.algo in ("ols", "ridge"):
        yield np.einsum("bij,bj->bi", pinv_psd(s), b)
        return
    if cfg.algo == "newton":
        alpha = newton_alpha(s, cfg.alpha_mode)
        if info is not None:
            info["alpha"] = alpha
        yield from iterate_newton(s, b, alpha, cfg.max_steps)
        return
    if cfg.algo == "gd":
        eta = gd_eta(s, lengths, cfg.eta_mode)
        if info is not None:
            info["eta"] = eta
        yield from iterate_gd(s, b, lengths, eta, cfg.max_steps)
        return
    yield from iterate_per_instance(cfg.algo, s, b, np.maximum(lengths, 1), cfg.max_steps, cfg.memory)


def n_steps(cfg: SolverConfig) -> int:
    """Largest step index exposed by an algorithm's trace."""
    return 0 if cfg.algo in ("ols", "ridge", "ogd") else cfg.max_steps


# ---------------------------------------------------------------------------
# single-prefix traces


def _finish(algo: str, xs, ys, ws: np.ndarray, lam: float = 0.0, info: dict | None = None) -> SolverTrace:
    t = xs.shape[0]
    resid = ys[None, :] - ws @ xs.T
    objective = 0.5 / t * (np.sum(resid * resid, axis=1) + lam * np.sum(ws * ws, axis=1))
    s, b = gram(xs, ys, lam)
    grad = (ws @ s - b[None, :]) / t
    grad_norm = np.linalg.norm(grad, axis=1)
    converged = None
    for k in range(1, ws.shape[0]):
        change = np.linalg.norm(ws[k] - ws[k - 1])
        if change <= CONVERGED_REL_CHANGE * np.linalg.norm(ws[k]):
            converged = k
            break
    ws = ws.copy()
    ws.setflags(write=False)
    return SolverTrace(algo, ws, objective, grad_norm, converged, info or {})


def ols_fit(xs, ys) -> np.ndarray:
    xs, ys = _check_xy(xs, ys)
    return lstsq_min_norm(xs, ys)


def ols_run(xs, ys) -> SolverTrace:
    xs, ys = _check_xy(xs, ys)
    return _finish("ols", xs, ys, lstsq_min_norm(xs, ys)[None, :])


def ridge_fit(xs, ys, lam: float) -> np.ndarray:
    xs, ys = _check_xy(xs, ys)
    s, b = gram(xs, ys, lam)
    return pinv_psd(s) @ b


def _single(cfg: SolverConfig, xs, ys) -> SolverTrace:
    xs, ys = _check_xy(xs, ys)
    info: dict = {}
    it = weight_iterates(cfg, xs[None], ys[None], [xs.shape[0]], info)
    ws = np.stack([w[0] for w in it])
    info = {k: (float(np.asarray(v).ravel()[0]) if np.ndim(v) else v) for k, v in info.items()}
    lam = cfg.lam if cfg.algo != "ols" else 0.0
    return _finish(cfg.label, xs, ys, ws, lam, info)


def gd_run(xs, ys, cfg: SolverConfig = SolverConfig("gd", 200)) -> SolverTrace:
    return _single(_with_algo(cfg, "gd"), xs, ys)


def newton_run(xs, ys, cfg: SolverConfig = SolverConfig("newton", 30)) -> SolverTrace:
    return _single(_with_algo(cfg, "newton"), xs, ys)


def cg_run(xs, ys, cfg: SolverConfig = SolverConfig("cg", 30)) -> SolverTrace:
    return _single(_with_algo(cfg, "cg"), xs, ys)


def bfgs_run(xs, ys, cfg: SolverConfig = SolverConfig("bfgs", 30)) -> SolverTrace:
    return _single(_with_algo(cfg, "bfgs"), xs, ys)


def lbfgs_run(xs, ys, cfg: SolverConfig = SolverConfig("lbfgs", 30)) -> SolverTrace:
    return _single(_with_algo(cfg, "lbfgs"), xs, ys)


def ogd_run(xs, ys) -> SolverTrace:
    """One pass of online GD; step k holds the weights after example k."""
    xs, ys = _check_xy(xs, ys)
    ws = iterate_ogd(xs[None], ys[None], [xs.shape[0]])[:, 0]
    return _finish("ogd", xs, ys, ws)


def run_solver(cfg: SolverConfig, xs, ys) -> SolverTrace:
    if cfg.algo == "ols":
        return ols_run(xs, ys)
    if cfg.algo == "ogd":
        return ogd_run(xs, ys)
    return _single(cfg, xs, ys)


def _with_algo(cfg: SolverConfig, algo: str) -> SolverConfig:
    if cfg.algo == algo:
        return cfg
    return SolverConfig(algo, cfg.max_steps, cfg.eta_mode, cfg.alpha_mode, cfg.lam, cfg.memory)


def newton_matrices(s, alpha: float, k: int) -> list[np.ndarray]:
    """M_0..M_k of the Newton-Schulz recursion for a single S."""
    s = np.asarray(s, dtype=np.float64)
    kept: list[np.ndarray] = []
    for _ in iterate_newton(s[None], np.zeros((1, s.shape[0])), alpha, k, kept):
        pass
    return [m[0] for m in kept]


def predict(trace: SolverTrace, step: int, x_query) -> float:
    if not 0 <= step < len(trace):
        raise IndexOutOfRange(f"step {step} outside trace of length {len(trace)}")
    return float(trace.steps[step] @ np.asarray(x_query, dtype=np.float64))


def relative_errors(trace: SolverTrace, reference) -> np.ndarray:
    ref = np.asarray(reference, dtype=np.float64)
    return np.linalg.norm(trace.steps - ref, axis=1) / np.linalg.norm(ref)


# ---------------------------------------------------------------------------
# sum-of-moments form of M_k


def moment_recursion(k: int) -> dict[int, int]:
    """Integer coefficients c_s with M_k = Σ c_s α^((s+1)/2) S^s, built by
    iterating p ← 2p − p·x·p on polynomials in the scaled variable."""
    if k < 0:
        raise ValueError("depth must be >= 0")
    if k > 12:
        raise Overflow("explicit recursion is limited to depth 12; use moment_expansion")
    # p(x) = Σ c_s x^s over odd s; track in dense integer arrays
    p = [0, 1]
    for _ in range(k):
        sq = [0] * (2 * len(p) - 1)
        nz = [(i, c) for i, c in enumerate(p) if c]
        for i, ci in nz:
            for j, cj in nz:
                sq[i + j] += ci * cj
        new = [0] * (len(sq) + 1)
        for i, c in enumerate(p):
            new[i] += 2 * c
        for i, c in enumerate(sq):
            new[i + 1] -= c
        while new and new[-1] == 0:
            new.pop()
        p = new
    return {s: c for s, c in enumerate(p) if c}


@dataclass(frozen=True)
class MomentExpansion:
    """M_k = Σ_s β_s S^s over odd s ≤ 2^(k+1) − 1.

    Coefficients are exact: β_s = c_s · α^((s+1)/2) with integer c_s.
    """

    alpha: float
    depth: int

    @property
    def max_power(self) -> int:
        return 2 ** (self.depth + 1) - 1

    @property
    def powers(self) -> range:
        return range(1, self.max_power + 1, 2)

    def integer_coefficient(self, s: int) -> int:
        if s % 2 == 0 or not 1 <= s <= self.max_power:
            return 0
        j = (s - 1) // 2
        return (-1) ** j * math.comb(2 ** self.depth, j + 1)

    def exact_coefficient(self, s: int) -> Fraction:
        return self.integer_coefficient(s) * Fraction(self.alpha) ** ((s + 1) // 2)

    def coefficient(self, s: int) -> float:
        try:
            return float(self.exact_coefficient(s))
        except OverflowError as exc:
            raise Overflow(f"coefficient of S^{s} exceeds double range") from exc

    @property
    def coefficients(self) -> dict[int, float]:
        return {s: self.coefficient(s) for s in self.powers}

    def evaluate(self, s) -> np.ndarray:
        """Σ β_s S^s computed in exact rational arithmetic, then rounded.

        Exact evaluation avoids the catastrophic cancellation between the
        alternating binomial terms.
        """
        s = np.asarray(s, dtype=np.float64)
        n = s.shape[0]
        sf = [[Fraction(float(v)) for v in row] for row in s]
        power = sf
        acc = [[Fraction(0)] * n for _ in range(n)]
        s2 = _frac_matmul(sf, sf)
        for p in self.powers:
            c = self.exact_coefficient(p)
            for i in range(n):
                for j in range(n):
                    acc[i][j] += c * power[i][j]
            if p + 2 <= self.max_power:
                power = _frac_matmul(power, s2)
        return np.array([[float(v) for v in row] for row in acc])


def _frac_matmul(a, b):
    n, m, p = len(a), len(b), len(b[0])
    return [[sum((a[i][k] * b[k][j] for k in range(m)), Fraction(0)) for j in range(p)] for i in range(n)]


def moment_expansion(alpha: float, k: int) -> MomentExpansion:
    if k < 0:
        raise ValueError("depth must be >= 0")
    if k > MOMENT_MAX_DEPTH:
        raise Overflow(f"depth {k} exceeds the supported maximum {MOMENT_MAX_DEPTH}")
    return MomentExpansion(float(alpha), int(k))
