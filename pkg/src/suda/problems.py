"""Objective families, heterogeneous data generation, and gradient oracles.

Three problem kinds:

* ``logistic`` -- synthetic binary logistic regression with a smooth
  non-convex regularizer ``r(x) = sum_j x_j^2 / (1 + x_j^2)``.  Heterogeneity
  is injected by sampling each agent's labeling vector around a shared one.
* ``pl_toy`` -- the scalar family f_i(x) = x^2 + 3 sin^2(x) + a_i x cos(x)
  with sum_i a_i = 0, so the average cost x^2 + 3 sin^2(x) is non-convex but
  gradient dominated.
* ``quadratic`` -- test-only least squares with closed-form optimum.

Stochastic gradients add Gaussian noise to the exact gradient.  Noise draws
are keyed by (seed, agent, iteration) so any two solvers fed the same key
stream see identical realizations regardless of evaluation order.
"""

from __future__ import annotations

import abc
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .arrayfile import read_arrays, write_arrays
from .errors import InvalidParameterError, UnavailableError

PL_GRID = np.linspace(-5.0, 5.0, 4001)


class Problem(abc.ABC):
    """Common interface: per-agent costs f_i over R^d, i = 0..n-1."""

    kind: str
    n: int
    d: int

    @abc.abstractmethod
    def local_grad(self, i: int, x: np.ndarray) -> np.ndarray:
        """Exact gradient of f_i at x."""

    @abc.abstractmethod
    def local_value(self, i: int, x: np.ndarray) -> float:
        """Value of f_i at x."""

    @abc.abstractmethod
    def smoothness(self) -> float:
        """Estimated (or exact) smoothness constant of the f_i."""

    def grad_block(self, X: np.ndarray) -> np.ndarray:
        """Stacked exact gradients, row i = grad f_i(X[i]); override for speed."""
        if not np.all(np.isfinite(X)):
            raise InvalidParameterError("non-finite iterate passed to gradient")
        return np.stack([self.local_grad(i, X[i]) for i in range(self.n)])

    def grads_at(self, x: np.ndarray) -> np.ndarray:
        """All agents' exact gradients at a single point."""
        return self.grad_block(np.broadcast_to(x, (self.n, self.d)).copy())

    def global_value(self, x: np.ndarray) -> float:
        """f(x) = (1/n) sum_i f_i(x)."""
        return float(np.mean([self.local_value(i, x) for i in range(self.n)]))

    def global_values(self, P: np.ndarray) -> np.ndarray:
        """f evaluated at several points, shape (m, d) -> (m,)."""
        return np.array([self.global_value(p) for p in P])

    def global_grad(self, x: np.ndarray) -> np.ndarray:
        return self.grads_at(x).mean(axis=0)

    def heterogeneity_at(self, x: np.ndarray) -> float:
        """(1/n) sum_i ||grad f_i(x) - grad f(x)||^2."""
        g = self.grads_at(x)
        return float(np.sum((g - g.mean(axis=0)) ** 2) / self.n)

    def reference_optimum(self, cache_dir: str | Path | None = None) -> tuple[float, str]:
        """Optimal value with a provenance tag; see subclasses."""
        raise UnavailableError(f"no reference optimum for kind '{self.kind}'")


@dataclass
class QuadraticProblem(Problem):
    """f_i(x) = 0.5 ||x - b_i||^2; average minimized at mean(b_i)."""

    targets: np.ndarray  # (n, d)
    kind: str = "quadratic"

    def __post_init__(self):
        self.n, self.d = self.targets.shape

    def local_grad(self, i, x):
        return x - self.targets[i]

    def local_value(self, i, x):
        return 0.5 * float(np.sum((x - self.targets[i]) ** 2))

    def grad_block(self, X):
        if not np.all(np.isfinite(X)):
            raise InvalidParameterError("non-finite iterate passed to gradient")
        return X - self.targets

    def global_values(self, P):
        diff = P[:, None, :] - self.targets[None, :, :]
        return 0.5 * np.sum(diff**2, axis=2).mean(axis=1)

    def smoothness(self):
        return 1.0

    def pl_constant(self):
        return 1.0

    def reference_optimum(self, cache_dir=None):
        xbar = self.targets.mean(axis=0)
        return self.global_value(xbar), "closed-form"


def gen_quadratic(n: int, d: int, het_var: float, seed: int) -> QuadraticProblem:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 17)))
    center = rng.normal(size=d)
    targets = center + np.sqrt(het_var) * rng.normal(size=(n, d))
    return QuadraticProblem(targets=targets)


@dataclass
class LogisticProblem(Problem):
    """Binary logistic regression with the bounded non-convex regularizer."""

    features: np.ndarray  # (n, L, d)
    labels: np.ndarray  # (n, L) in {-1, +1}
    rho: float
    seed: int
    kind: str = "logistic"

    def __post_init__(self):
        self.n, self.l_samples, self.d = self.features.shape
        self._L = None

    def _reg_grad(self, x):
        return self.rho * 2.0 * x / (1.0 + x * x) ** 2

    def _reg_value(self, x):
        return self.rho * float(np.sum(x * x / (1.0 + x * x)))

    def local_grad(self, i, x):
        H, y = self.features[i], self.labels[i]
        s = expit(-y * (H @ x))  # 1 / (1 + exp(y h^T x))
        return -(H.T @ (y * s)) / self.l_samples + self._reg_grad(x)

    def local_value(self, i, x):
        H, y = self.features[i], self.labels[i]
        m = -y * (H @ x)
        # log(1 + exp(m)) computed stably
        return float(np.mean(np.logaddexp(0.0, m))) + self._reg_value(x)

    def grad_block(self, X):
        if not np.all(np.isfinite(X)):
            raise InvalidParameterError("non-finite iterate passed to gradient")
        out = np.empty_like(X)
        for i in range(self.n):
            H, y = self.features[i], self.labels[i]
            coef = y * expit(-y * (H @ X[i]))
            out[i] = H.T @ coef
        return -out / self.l_samples + self._reg_grad(X)

    def global_values(self, P):
        # Pairwise margins via one GEMM: (n*L, d) @ (d, m)
        flatH = self.features.reshape(-1, self.d)
        margins = (flatH @ P.T).reshape(self.n, self.l_samples, -1)
        m = -self.labels[:, :, None] * margins
        loss = np.logaddexp(0.0, m).mean(axis=1).mean(axis=0)  # (m,)
        reg = self.rho * np.sum(P * P / (1.0 + P * P), axis=1)
        return loss + reg

    def global_value(self, x):
        return float(self.global_values(x[None, :])[0])

    def smoothness(self):
        # Data term Hessian <= H^T H / (4 L); regularizer curvature <= 2 rho.
        if self._L is None:
            worst = max(np.linalg.norm(self.features[i], 2) ** 2 for i in range(self.n))
            self._L = worst / (4.0 * self.l_samples) + 2.0 * self.rho
        return self._L

    def cache_key(self) -> str:
        # content hash so caches never collide across datasets that happen to
        # share shape parameters and seed
        digest = hashlib.sha1()
        digest.update(self.features.tobytes())
        digest.update(self.labels.tobytes())
        digest.update(np.float64(self.rho).tobytes())
        return f"logistic_{digest.hexdigest()[:16]}"

    def reference_optimum(self, cache_dir=None, grad_tol=1e-8, max_iter=200_000):
        """Value at a stationary point of f from a centralized deterministic run."""
        if cache_dir is not None:
            path = Path(cache_dir) / f"fstar_{self.cache_key()}.bin"
            if path.exists():
                arrays, meta = read_arrays(path)
                return float(arrays["f_star"][0]), meta.get("tag", "centralized-gd") + ";cached"
        x = np.zeros(self.d)
        step = 1.0 / self.smoothness()
        for _ in range(max_iter):
            g = self.global_grad(x)
            gn = np.linalg.norm(g)
            if gn < grad_tol:
                break
            x = x - step * g
        else:
            raise UnavailableError(
                f"centralized run did not reach grad norm {grad_tol} in {max_iter} iterations"
            )
        f_star = self.global_value(x)
        tag = f"centralized-gd;grad_norm={gn:.2e}"
        if cache_dir is not None:
            write_arrays(path, {"f_star": np.array([f_star]), "x_star": x}, {"tag": tag})
        return f_star, tag


def gen_logistic(
    n: int,
    d: int = 20,
    l_samples: int = 2000,
    rho: float = 0.001,
    het_var: float = 0.0,
    seed: int = 0,
    cache_dir: str | Path | None = None,
) -> LogisticProblem:
    """Synthetic heterogeneous logistic data.

    A shared solution ``x*`` is drawn once; each agent labels its features
    with probability ``sigmoid(h^T (x* + v_i))`` where ``v_i ~ N(0, het_var I)``
    controls how far local solutions drift apart.
    """
    if d < 1 or l_samples < 1:
        raise InvalidParameterError("d and l_samples must be >= 1")
    if het_var < 0:
        raise InvalidParameterError("het_var must be >= 0")
    cache_path = None
    if cache_dir is not None:
        key = f"logistic_n{n}_d{d}_l{l_samples}_rho{rho}_h{het_var}_seed{seed}"
        cache_path = Path(cache_dir) / f"dataset_{key}.bin"
        if cache_path.exists():
            arrays, _ = read_arrays(cache_path)
            return LogisticProblem(
                features=arrays["features"].reshape(n, l_samples, d),
                labels=arrays["labels"].reshape(n, l_samples),
                rho=rho,
                seed=seed,
            )
    rng = np.random.default_rng(np.random.SeedSequence((seed, n, d, l_samples)))
    x_star = rng.normal(size=d)
    local_solutions = x_star + np.sqrt(het_var) * rng.normal(size=(n, d))
    features = rng.normal(size=(n, l_samples, d))
    probs = expit(np.matmul(features, local_solutions[:, :, None])[:, :, 0])
    labels = np.where(rng.random((n, l_samples)) < probs, 1.0, -1.0)
    problem = LogisticProblem(features=features, labels=labels, rho=rho, seed=seed)
    if cache_path is not None:
        write_arrays(
            cache_path,
            {"features": features.reshape(-1, d), "labels": labels},
            {"kind": "logistic", "n": n, "d": d, "l_samples": l_samples,
             "rho": rho, "het_var": het_var, "seed": seed},
        )
    return problem


@dataclass
class PLToyProblem(Problem):
    """Scalar gradient-dominated family f_i(x) = x^2 + 3 sin^2 x + a_i x cos x."""

    a: np.ndarray  # (n,), sums to zero
    kind: str = "pl_toy"

    def __post_init__(self):
        self.n = self.a.shape[0]
        self.d = 1

    def local_grad(self, i, x):
        x = float(x[0]) if np.ndim(x) else float(x)
        return np.array([2.0 * x + 3.0 * np.sin(2.0 * x)
                         + self.a[i] * (np.cos(x) - x * np.sin(x))])

    def local_value(self, i, x):
        x = float(x[0]) if np.ndim(x) else float(x)
        return x * x + 3.0 * np.sin(x) ** 2 + self.a[i] * x * np.cos(x)

    def grad_block(self, X):
        if not np.all(np.isfinite(X)):
            raise InvalidParameterError("non-finite iterate passed to gradient")
        x = X[:, 0]
        g = 2.0 * x + 3.0 * np.sin(2.0 * x) + self.a * (np.cos(x) - x * np.sin(x))
        return g[:, None]

    def global_values(self, P):
        # sum_i a_i = 0 kills the heterogeneous term in the average.
        x = P[:, 0]
        return x * x + 3.0 * np.sin(x) ** 2

    def global_value(self, x):
        return float(self.global_values(np.atleast_2d(x))[0])

    def smoothness(self):
        # Curvature of f_i is unbounded globally; estimate on the working box.
        x = PL_GRID
        base = 2.0 + 6.0 * np.cos(2.0 * x)
        worst = 0.0
        for ai in self.a:
            cur = np.max(np.abs(base + ai * (-2.0 * np.sin(x) - x * np.cos(x))))
            worst = max(worst, cur)
        return float(worst)

    def pl_constant(self) -> float:
        """Measured gradient-domination constant min ||f'||^2 / (2 f) on the box."""
        x = PL_GRID[np.abs(PL_GRID) > 1e-3]
        f = x * x + 3.0 * np.sin(x) ** 2
        g = 2.0 * x + 3.0 * np.sin(2.0 * x)
        return float(np.min(g * g / (2.0 * f)))

    def reference_optimum(self, cache_dir=None):
        return 0.0, "exact"


def gen_pl_toy(n: int, het_var: float) -> PLToyProblem:
    """Antisymmetric coefficients a_i = het_var * i paired so they sum to zero.

    Pairing puts -a_i at agent n-i for i < n/2; the leftover pair couples
    agent n/2 with agent n so the exact-zero-sum invariant survives.
    """
    if n % 2 != 0 or n < 2:
        raise InvalidParameterError(f"pairing needs even n >= 2, got {n}")
    a = np.zeros(n + 1)  # 1-based scratch
    for i in range(1, n // 2):
        a[i] = het_var * i
        a[n - i] = -het_var * i
    a[n // 2] = het_var * (n // 2)
    a[n] = -het_var * (n // 2)
    out = a[1:]
    assert abs(out.sum()) < 1e-12
    return PLToyProblem(a=out)


def make_problem(spec: dict, cache_dir: str | Path | None = None) -> Problem:
    """Instantiate a problem from its config dict (see RunConfig docs)."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    try:
        if kind == "logistic":
            return gen_logistic(cache_dir=cache_dir, **spec)
        if kind == "pl_toy":
            return gen_pl_toy(**spec)
        if kind == "quadratic":
            return gen_quadratic(**spec)
    except TypeError as exc:
        raise InvalidParameterError(f"bad problem spec for kind '{kind}': {exc}") from exc
    raise InvalidParameterError(f"unknown problem kind '{kind}'")


class GradOracle:
    """Stochastic gradient access: exact gradient plus keyed Gaussian noise.

    The draw for (agent i, iteration k) depends only on (seed, i, k), so two
    algorithm implementations stepping through the same iteration indices
    consume identical noise -- the basis of all pathwise equivalence tests.
    """

    def __init__(self, problem: Problem, noise_var: float, seed: int):
        if noise_var < 0:
            raise InvalidParameterError("noise_var must be >= 0")
        self.problem = problem
        self.noise_var = noise_var
        self.seed = seed

    def noise_block(self, k: int) -> np.ndarray:
        """Noise rows for all agents at iteration k; zeros when noise_var == 0."""
        n, d = self.problem.n, self.problem.d
        if self.noise_var == 0.0:
            return np.zeros((n, d))
        scale = np.sqrt(self.noise_var)
        out = np.empty((n, d))
        for i in range(n):
            rng = np.random.default_rng(np.random.SeedSequence((self.seed, i, k)))
            out[i] = scale * rng.normal(size=d)
        return out

    def stoch_grad_block(self, X: np.ndarray, k: int) -> np.ndarray:
        """Stacked stochastic gradients at each agent's own point."""
        return self.problem.grad_block(X) + self.noise_block(k)

    def stoch_grad(self, i: int, x: np.ndarray, k: int) -> np.ndarray:
        g = self.problem.local_grad(i, x)
        if self.noise_var == 0.0:
            return g
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, i, k)))
        return g + np.sqrt(self.noise_var) * rng.normal(size=g.shape)

    def stoch_grads_at(self, x: np.ndarray, k: int) -> np.ndarray:
        """All agents evaluate at the same point (parallel/centralized step)."""
        return self.problem.grads_at(x) + self.noise_block(k)
