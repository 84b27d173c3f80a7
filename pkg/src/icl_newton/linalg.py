"""Dense symmetric linear algebra: Jacobi eigensolver, power iteration,
pseudo-inverse and minimum-norm least squares.

Every routine accepts a single matrix or a stack of matrices with the
matrix in the last two axes, so callers can process whole batches of
prefix Gram matrices in one call.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DimensionMismatch, NoConvergence, NonSquare, NotSymmetric, ZeroMatrix

RANK_TOL = 1e-10
SYM_TOL = 1e-12
MAX_SWEEPS = 100


@dataclass(frozen=True)
class EigDecomp:
    """Eigenvalues in descending order and orthonormal eigenvector columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues[..., None, :]) @ np.swapaxes(v, -1, -2)


def _as_matrix_stack(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise NonSquare(f"expected square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def _check_symmetric(a: np.ndarray) -> None:
    scale = np.max(np.abs(a), axis=(-1, -2), keepdims=True)
    asym = np.max(np.abs(a - np.swapaxes(a, -1, -2)), axis=(-1, -2), keepdims=True)
    if np.any(asym > SYM_TOL * np.maximum(scale, np.finfo(float).tiny)):
        raise NotSymmetric("matrix is not symmetric within tolerance")


@lru_cache(maxsize=None)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Tournament schedule: every index pair appears once per sweep and the
    pairs inside a round are disjoint, so a round is one block rotation."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p < n and q < n:
                ps.append(min(p, q))
                qs.append(max(p, q))
        if ps:
            rounds.append((np.array(ps), np.array(qs)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return tuple(rounds)


def _jacobi_angle(app, aqq, apq):
    """Cosine and sine of the rotation that zeroes the (p, q) entry."""
    active = apq != 0.0
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        theta = (aqq - app) / (2.0 * np.where(active, apq, 1.0))
        big = ~np.isfinite(theta) | (np.abs(theta) > 1e150)
        t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
        t = np.where(big, 0.5 / np.where(big & np.isfinite(theta), theta, np.inf), t)
    t = np.where(theta == 0.0, 1.0, t)
    t = np.where(active, t, 0.0)
    c = 1.0 / np.sqrt(t * t + 1.0)
    return c, t * c


def sym_eig(a, tol: float = 1e-14, max_sweeps: int = MAX_SWEEPS) -> EigDecomp:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix (or stack).

    Iterates sweeps until the off-diagonal Frobenius norm is at most
    ``tol`` times the Frobenius norm of the input.
    """
    a = _as_matrix_stack(a)
    _check_symmetric(a)
    n = a.shape[-1]
    batch = a.shape[:-2]
    w = 0.5 * (a + np.swapaxes(a, -1, -2))
    w = w.reshape((-1, n, n)).copy()
    v = np.broadcast_to(np.eye(n), w.shape).copy()
    with np.errstate(over="ignore"):
        norm = np.sqrt(np.sum(w * w, axis=(-1, -2)))
    off_mask = ~np.eye(n, dtype=bool)
    eye = np.eye(n)

    def unconverged(m, idx):
        with np.errstate(over="ignore"):
            off = np.sqrt(np.sum(np.where(off_mask, m * m, 0.0), axis=(-1, -2)))
        return idx[off > tol * norm[idx]]

    active = unconverged(w, np.arange(w.shape[0]))
    sweeps = 0
    while active.size:
        if sweeps >= max_sweeps:
            raise NoConvergence(f"Jacobi did not converge in {max_sweeps} sweeps")
        wa, va = w[active], v[active]
        rows = np.arange(active.size)[:, None]
        for p, q in _round_robin(n):
            c, s = _jacobi_angle(wa[:, p, p], wa[:, q, q], wa[:, p, q])
            rot = np.broadcast_to(eye, wa.shape).copy()
            rot[rows, p, p] = c
            rot[rows, q, q] = c
            rot[rows, p, q] = s
            rot[rows, q, p] = -s
            wa = np.swapaxes(rot, -1, -2) @ wa @ rot
            va = va @ rot
        w[active], v[active] = wa, va
        active = unconverged(wa, active)
        sweeps += 1

    vals = np.diagonal(w, axis1=-2, axis2=-1)
    order = np.argsort(-vals, axis=-1, kind="stable")
    vals = np.take_along_axis(vals, order, axis=-1)
    v = np.take_along_axis(v, order[:, None, :], axis=-1)
    return EigDecomp(vals.reshape(batch + (n,)), v.reshape(batch + (n, n)))


def spectral_norm(a, iters: int = 5000, tol: float = 1e-15) -> np.ndarray | float:
    """Largest singular value by power iteration on aᵀa.

    The primary start vector is the normalized all-ones vector.  A start
    orthogonal to the dominant eigenvector converges (stagnates) on a smaller
    eigenvalue without any visible symptom, so a second run from an
    index-weighted vector is always made and the larger estimate kept.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2:
        raise DimensionMismatch("spectral_norm expects a matrix")
    scalar = a.ndim == 2
    a = a.reshape((-1,) + a.shape[-2:])
    if np.any(np.max(np.abs(a), axis=(-1, -2)) == 0.0):
        raise ZeroMatrix("spectral norm of a zero matrix")
    gram = np.swapaxes(a, -1, -2) @ a
    n = gram.shape[-1]
    best = np.full(gram.shape[0], -np.inf)
    for start in (np.ones(n), np.arange(1, n + 1, dtype=np.float64)):
        best = np.maximum(best, _power_iteration(gram, start, iters, tol))
    if np.any(~np.isfinite(best)):
        raise NoConvergence("power iteration could not find a dominant direction")
    res = np.sqrt(np.maximum(best, 0.0))
    return float(res[0]) if scalar else res.reshape(a.shape[:-2])


def _power_iteration(gram: np.ndarray, start: np.ndarray, iters: int, tol: float) -> np.ndarray:
    """Rayleigh-quotient estimates per batch item; -inf where the iterate was annihilated.

    Only items that have not yet converged are iterated.
    """
    batch, n = gram.shape[0], gram.shape[-1]
    x = np.broadcast_to(start / np.linalg.norm(start), (batch, n)).copy()
    lam = np.zeros(batch)
    active = np.arange(batch)
    for _ in range(iters):
        if active.size == 0:
            break
        y = np.einsum("bij,bj->bi", gram[active], x[active])
        ny = np.linalg.norm(y, axis=-1)
        dead = ny == 0.0
        new = np.einsum("bi,bi->b", x[active], y)
        x[active] = np.where(dead[:, None], x[active], y / np.where(dead, 1.0, ny)[:, None])
        done = np.abs(new - lam[active]) <= tol * np.abs(new)
        lam[active] = np.where(dead, -np.inf, new)
        active = active[~(done | dead)]
    return lam


def pinv_psd(s, rank_tol: float = RANK_TOL) -> np.ndarray:
    """Moore-Penrose pseudo-inverse of a symmetric PSD matrix (or stack)."""
    eig = sym_eig(s)
    lam = eig.eigenvalues
    lmax = np.max(np.abs(lam), axis=-1, keepdims=True)
    keep = lam > rank_tol * lmax
    inv = np.where(keep, 1.0 / np.where(keep, lam, 1.0), 0.0)
    v = eig.eigenvectors
    return (v * inv[..., None, :]) @ np.swapaxes(v, -1, -2)


def lstsq_min_norm(x, y, rank_tol: float = RANK_TOL) -> np.ndarray:
    """Minimum-norm least-squares solution (XᵀX)†Xᵀy."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"x {x.shape} and y {y.shape} are incompatible")
    if x.shape[0] < 1 or x.shape[1] < 1:
        raise DimensionMismatch("need at least one row and one column")
    return pinv_psd(x.T @ x, rank_tol) @ (x.T @ y)


def condition_number(s, rank_tol: float = RANK_TOL) -> float:
    """λmax/λmin over eigenvalues above the rank threshold."""
    lam = sym_eig(s).eigenvalues
    lmax = float(np.max(np.abs(lam)))
    if lmax == 0.0:
        raise ZeroMatrix("condition number of a zero matrix")
    kept = lam[lam > rank_tol * lmax]
    return float(kept[0] / kept[-1])


def row_space_residual(w, xs, rank_tol: float = RANK_TOL) -> float:
    """‖w − P w‖ / max(‖w‖, 1e-30) with P the projector onto span of the rows of xs."""
    w = np.asarray(w, dtype=np.float64)
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    eig = sym_eig(xs.T @ xs)
    lmax = np.max(np.abs(eig.eigenvalues))
    if lmax == 0.0:
        basis = np.zeros((w.shape[0], 0))
    else:
        basis = eig.eigenvectors[:, eig.eigenvalues > rank_tol * lmax]
    resid = w - basis @ (basis.T @ w)
    return float(np.linalg.norm(resid) / max(np.linalg.norm(w), 1e-30))
