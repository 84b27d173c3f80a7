"""Random linear-regression tasks: weights, covariances, example sequences.

Randomness comes from numpy's Philox counter-based bit generator; Gaussian
variates are produced here with the Box-Muller transform so the stream is
fully determined by (seed, stream) on every platform.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpec
from .linalg import sym_eig

RNG_NAME = "philox4x64-boxmuller-v1"


class GaussianStream:
    """Standard normal draws via Box-Muller on Philox uniforms."""

    def __init__(self, seed: int, stream: int = 0):
        if seed < 0 or stream < 0:
            raise InvalidSpec("seed and stream must be non-negative")
        self.seed = int(seed)
        self.stream = int(stream)
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, self.stream])))

    def uniform(self, size: int) -> np.ndarray:
        return self._gen.random(size)

    def normal(self, shape) -> np.ndarray:
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        count = int(np.prod(shape, dtype=np.int64))
        pairs = (count + 1) // 2
        u = self._gen.random(2 * pairs)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        return z[:count].reshape(shape)


@dataclass(frozen=True)
class CovSpec:
    kind: str = "identity"  # identity | ill_conditioned | explicit
    kappa: float = 1.0
    high_fraction: float = 0.5
    matrix: tuple | None = None

    @staticmethod
    def identity() -> "CovSpec":
        return CovSpec("identity")

    @staticmethod
    def ill_conditioned(kappa: float, high_fraction: float = 0.5) -> "CovSpec":
        return CovSpec("ill_conditioned", float(kappa), float(high_fraction))

    @staticmethod
    def explicit(matrix) -> "CovSpec":
        m = np.asarray(matrix, dtype=np.float64)
        return CovSpec("explicit", matrix=tuple(map(tuple, m)))

    def validate(self, dim: int | None = None) -> None:
        if self.kind == "identity":
            return
        if self.kind == "ill_conditioned":
            if not self.kappa >= 1.0:
                raise InvalidSpec(f"kappa must be >= 1, got {self.kappa}")
            if not 0.0 < self.high_fraction < 1.0:
                raise InvalidSpec(f"high_fraction must lie in (0, 1), got {self.high_fraction}")
            return
        if self.kind == "explicit":
            if self.matrix is None:
                raise InvalidSpec("explicit covariance needs a matrix")
            m = np.asarray(self.matrix, dtype=np.float64)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise InvalidSpec("explicit covariance must be square")
            if dim is not None and m.shape[0] != dim:
                raise InvalidSpec(f"explicit covariance is {m.shape[0]}x{m.shape[0]}, dim is {dim}")
            if np.max(np.abs(m - m.T)) > 1e-12 * max(np.max(np.abs(m)), 1e-300):
                raise InvalidSpec("explicit covariance must be symmetric")
            lam = sym_eig(0.5 * (m + m.T)).eigenvalues
            if lam[-1] < -1e-10 * max(lam[0], 0.0):
                raise InvalidSpec("explicit covariance must be positive semidefinite")
            return
        raise InvalidSpec(f"unknown covariance kind {self.kind!r}")

    def to_dict(self) -> dict:
        if self.kind == "ill_conditioned":
            return {"kind": self.kind, "kappa": self.kappa, "high_fraction": self.high_fraction}
        if self.kind == "explicit":
            return {"kind": self.kind, "matrix": [list(r) for r in self.matrix]}
        return {"kind": self.kind}

    @staticmethod
    def from_dict(d: dict) -> "CovSpec":
        kind = d.get("kind", "identity")
        if kind == "identity":
            return CovSpec.identity()
        if kind == "ill_conditioned":
            return CovSpec.ill_conditioned(d.get("kappa", 100.0), d.get("high_fraction", 0.5))
        if kind == "explicit":
            return CovSpec.explicit(d["matrix"])
        raise InvalidSpec(f"unknown covariance kind {kind!r}")


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.0

    def __post_init__(self):
        if not self.sigma >= 0.0:
            raise InvalidSpec(f"noise sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True, eq=False)
class TaskInstance:
    """One regression sequence: n in-context rows plus one query row."""

    dim: int
    n_examples: int
    w_star: np.ndarray
    sigma_matrix: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 0
    cov_kind: str = "identity"

    def __post_init__(self):
        for name in ("w_star", "sigma_matrix", "xs", "ys"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def prefix(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        return self.xs[:t], self.ys[:t]

    def to_json(self) -> str:
        rec = {
            "seed": self.seed,
            "dim": self.dim,
            "n": self.n_examples,
            "sigma": self.noise.sigma,
            "cov_kind": self.cov_kind,
            "w_star": self.w_star.tolist(),
            "sigma_matrix": self.sigma_matrix.tolist(),
            "xs": self.xs.tolist(),
            "ys": self.ys.tolist(),
        }
        return json.dumps(rec, separators=(",", ":"))

    @staticmethod
    def from_json(line: str) -> "TaskInstance":
        rec = json.loads(line)
        return TaskInstance(
            dim=rec["dim"],
            n_examples=rec["n"],
            w_star=np.array(rec["w_star"]),
            sigma_matrix=np.array(rec["sigma_matrix"]),
            xs=np.array(rec["xs"]),
            ys=np.array(rec["ys"]),
            noise=NoiseSpec(rec["sigma"]),
            seed=rec["seed"],
            cov_kind=rec["cov_kind"],
        )

    def __eq__(self, other) -> bool:
        return isinstance(other, TaskInstance) and self.to_json() == other.to_json()

    __hash__ = None


def haar_orthogonal(dim: int, rng: GaussianStream) -> np.ndarray:
    g = rng.normal((dim, dim))
    q, r = np.linalg.qr(g)
    signs = np.where(np.diag(r) < 0.0, -1.0, 1.0)
    return q * signs


def make_covariance(spec: CovSpec, dim: int, rng: GaussianStream) -> np.ndarray:
    if dim < 1:
        raise InvalidSpec("dim must be >= 1")
    spec.validate(dim)
    if spec.kind == "identity":
        return np.eye(dim)
    if spec.kind == "explicit":
        return np.array(spec.matrix, dtype=np.float64)
    high = math.ceil(spec.high_fraction * dim)
    spectrum = np.ones(dim)
    spectrum[:high] = spec.kappa
    q = haar_orthogonal(dim, rng)
    sigma = (q * spectrum) @ q.T
    return 0.5 * (sigma + sigma.T)


def covariance_sqrt(sigma: np.ndarray) -> np.ndarray:
    eig = sym_eig(sigma)
    root = np.sqrt(np.clip(eig.eigenvalues, 0.0, None))
    return (eig.eigenvectors * root) @ eig.eigenvectors.T


def sample_task(dim: int, n: int, cov: CovSpec = CovSpec(), noise: NoiseSpec = NoiseSpec(), seed: int = 0) -> TaskInstance:
    """Draw w* ~ N(0, I), Σ from ``cov``, n+1 rows x ~ N(0, Σ) and labels."""
    if dim < 1 or n < 1:
        raise InvalidSpec(f"need dim >= 1 and n >= 1, got dim={dim}, n={n}")
    cov.validate(dim)
    rng = GaussianStream(seed)
    w_star = rng.normal(dim)
    sigma = make_covariance(cov, dim, rng)
    root = covariance_sqrt(sigma)
    xs = rng.normal((n + 1, dim)) @ root
    ys = xs @ w_star
    if noise.sigma > 0.0:
        ys = ys + noise.sigma * rng.normal(n + 1)
    return TaskInstance(dim, n, w_star, sigma, xs, ys, noise, seed, cov.kind)


@dataclass(frozen=True)
class TaskTemplate:
    dim: int = 20
    n: int = 40
    cov: CovSpec = CovSpec()
    noise: NoiseSpec = NoiseSpec()


def sample_batch(count: int, template: TaskTemplate, base_seed: int = 0) -> list[TaskInstance]:
    if count < 1:
        raise InvalidSpec("batch count must be >= 1")
    return [sample_task(template.dim, template.n, template.cov, template.noise, base_seed + i) for i in range(count)]


def write_jsonl(tasks, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for task in tasks:
            fh.write(task.to_json() + "\n")


def read_jsonl(path) -> list[TaskInstance]:
    with open(path, encoding="utf-8") as fh:
        return [TaskInstance.from_json(line) for line in fh if line.strip()]
