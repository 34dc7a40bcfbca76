"""Network topologies and symmetric doubly stochastic combination matrices.

Graphs are undirected and connected.  Weights follow the Metropolis-Hastings
rule, which is symmetric and doubly stochastic on any connected graph.  The
spectrum of the resulting matrix is cached so solvers and diagnostics can
reuse it.

Topology spec strings understood by :func:`parse_topology`::

    ring:<n>            cycle on n nodes
    grid:<r>x<c>        r-by-c lattice, 4-neighbor, no wraparound
    er:<n>:<p>:<seed>   Erdos-Renyi draw, retried until connected
    complete:<n>        complete graph

An optional ``+lazy:<theta>`` suffix applies the lazy shift
``(1-theta) W + theta I`` to the built matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import networkx as nx
import numpy as np

from .errors import (
    InvalidParameterError,
    InvalidTopologyError,
    NotPrimitiveError,
    TopologyGenerationError,
)

# Tolerances for combination-matrix validation.
STOCHASTIC_TOL = 1e-12
SYMMETRY_TOL = 1e-12
UNIT_EIG_TOL = 1e-10
EIG_CLAMP_TOL = 1e-10

ER_MAX_ATTEMPTS = 100


@dataclass(frozen=True)
class Graph:
    """Undirected connected graph given by a boolean adjacency matrix."""

    n: int
    adjacency: np.ndarray
    label: str = ""

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=bool)
        if adj.shape != (self.n, self.n):
            raise InvalidTopologyError(f"adjacency must be {self.n}x{self.n}")
        if self.n < 2:
            raise InvalidTopologyError("graph needs at least 2 nodes")
        if not np.array_equal(adj, adj.T):
            raise InvalidTopologyError("adjacency must be symmetric")
        if adj.diagonal().any():
            raise InvalidTopologyError("no self-loops; self-weights come from the weight rule")
        if not _connected(adj):
            raise InvalidTopologyError(f"graph '{self.label or 'unnamed'}' is disconnected")
        object.__setattr__(self, "adjacency", adj)

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)


def _connected(adj: np.ndarray) -> bool:
    n = adj.shape[0]
    seen = np.zeros(n, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        i = stack.pop()
        for j in np.flatnonzero(adj[i]):
            if not seen[j]:
                seen[j] = True
                stack.append(int(j))
    return bool(seen.all())


def _from_networkx(g: nx.Graph, n: int, label: str) -> Graph:
    adj = np.zeros((n, n), dtype=bool)
    for u, v in g.edges():
        adj[u, v] = adj[v, u] = True
    return Graph(n=n, adjacency=adj, label=label)


def build_ring(n: int) -> Graph:
    """Cycle graph; every node has degree 2 (degree 2 collapses to the triangle at n=3)."""
    if n < 3:
        raise InvalidTopologyError(f"ring needs n >= 3, got {n}")
    return _from_networkx(nx.cycle_graph(n), n, f"ring:{n}")


def build_grid(rows: int, cols: int) -> Graph:
    """2D lattice with 4-neighbor adjacency and no wraparound."""
    if rows < 1 or cols < 1 or rows * cols < 4:
        raise InvalidTopologyError(f"grid needs rows*cols >= 4, got {rows}x{cols}")
    g = nx.grid_2d_graph(rows, cols)
    g = nx.relabel_nodes(g, {(r, c): r * cols + c for r, c in g.nodes()})
    return _from_networkx(g, rows * cols, f"grid:{rows}x{cols}")


def build_complete(n: int) -> Graph:
    if n < 2:
        raise InvalidTopologyError(f"complete graph needs n >= 2, got {n}")
    return _from_networkx(nx.complete_graph(n), n, f"complete:{n}")


def build_erdos_renyi(n: int, p: float, seed: int) -> Graph:
    """Erdos-Renyi draw with edge probability ``p``.

    Disconnected draws are retried with deterministic sub-seeds
    (seed + attempt index), up to ``ER_MAX_ATTEMPTS`` attempts.
    """
    if n < 2:
        raise InvalidTopologyError(f"er graph needs n >= 2, got {n}")
    if not (0.0 < p <= 1.0):
        raise InvalidParameterError(f"edge probability must be in (0, 1], got {p}")
    for attempt in range(ER_MAX_ATTEMPTS):
        rng = np.random.default_rng(np.random.SeedSequence((seed + attempt, n)))
        upper = rng.random((n, n)) < p
        adj = np.triu(upper, k=1)
        adj = adj | adj.T
        if _connected(adj):
            return Graph(n=n, adjacency=adj, label=f"er:{n}:{p}:{seed}")
    raise TopologyGenerationError(
        f"no connected Erdos-Renyi draw for n={n}, p={p} in {ER_MAX_ATTEMPTS} attempts"
    )


@dataclass(frozen=True)
class CombinationMatrix:
    """Symmetric doubly stochastic matrix with cached spectrum.

    ``eigenvalues`` are sorted descending, so ``eigenvalues[0] == 1`` and the
    matching ``eigenvectors`` column 0 is the normalized all-ones vector.
    ``mixing_rate`` is ``max_{i>=2} |lambda_i|``, the spectral radius of
    ``W - (1/n) 1 1^T``.
    """

    W: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    mixing_rate: float
    min_nonzero_eig: float | None
    psd: bool
    label: str = ""

    @classmethod
    def from_matrix(cls, W: np.ndarray, label: str = "") -> "CombinationMatrix":
        W = np.asarray(W, dtype=float)
        n = W.shape[0]
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise InvalidParameterError("combination matrix must be square")
        if np.max(np.abs(W - W.T)) > SYMMETRY_TOL:
            raise InvalidParameterError("combination matrix must be symmetric")
        ones = np.ones(n)
        if np.max(np.abs(W @ ones - ones)) > STOCHASTIC_TOL:
            raise InvalidParameterError("rows must sum to one")

        vals, vecs = np.linalg.eigh(W)
        order = np.argsort(-vals)
        vals = vals[order]
        vecs = vecs[:, order]

        n_unit = int(np.sum(np.abs(vals - 1.0) <= UNIT_EIG_TOL))
        if n_unit != 1:
            raise NotPrimitiveError(
                f"expected exactly one eigenvalue at 1, found {n_unit} ({label or 'matrix'})"
            )
        # Principal eigenvector of a primitive doubly stochastic matrix is
        # +-1/sqrt(n); pin the sign and the exact value.
        vecs[:, 0] = 1.0 / np.sqrt(n)
        vals[0] = 1.0

        rate = float(np.max(np.abs(vals[1:]))) if n > 1 else 0.0
        if rate >= 1.0 - STOCHASTIC_TOL:
            raise NotPrimitiveError(f"mixing rate {rate} is not strictly below one")

        psd = bool(vals[-1] >= -EIG_CLAMP_TOL)
        positive = vals[vals > EIG_CLAMP_TOL]
        min_nonzero = float(positive.min()) if (psd and positive.size) else None
        return cls(
            W=W,
            eigenvalues=vals,
            eigenvectors=vecs,
            mixing_rate=rate,
            min_nonzero_eig=min_nonzero,
            psd=psd,
            label=label,
        )

    @property
    def n(self) -> int:
        return self.W.shape[0]

    @property
    def spectral_gap(self) -> float:
        return 1.0 - self.mixing_rate

    def uhat(self) -> np.ndarray:
        """The n x (n-1) eigenvector block orthogonal to the consensus direction."""
        return self.eigenvectors[:, 1:]


def metropolis_weights(g: Graph) -> CombinationMatrix:
    """Metropolis-Hastings weights: w_ij = 1/(1+max(deg_i, deg_j)) on edges."""
    deg = g.degrees
    pair_max = np.maximum.outer(deg, deg)
    W = np.where(g.adjacency, 1.0 / (1.0 + pair_max), 0.0)
    np.fill_diagonal(W, 0.0)
    np.fill_diagonal(W, 1.0 - W.sum(axis=1))
    return CombinationMatrix.from_matrix(W, label=g.label)


def lazy_shift(cm: CombinationMatrix, theta: float) -> CombinationMatrix:
    """Return ``(1-theta) W + theta I``; eigenvalues map to ``(1-theta) l + theta``."""
    if not (0.0 < theta <= 1.0):
        raise InvalidParameterError(f"lazy shift theta must be in (0, 1], got {theta}")
    W = (1.0 - theta) * cm.W + theta * np.eye(cm.n)
    label = f"{cm.label}+lazy:{theta}" if cm.label else f"lazy:{theta}"
    return CombinationMatrix.from_matrix(W, label=label)


def mixing_rate(cm: CombinationMatrix) -> float:
    """Spectral radius of ``W - (1/n) 1 1^T``; raises if not strictly below one."""
    rate = cm.mixing_rate
    if rate >= 1.0 - STOCHASTIC_TOL:
        raise NotPrimitiveError(f"mixing rate {rate} is not strictly below one")
    return rate


def ensure_psd(cm: CombinationMatrix, theta: float = 0.5) -> tuple[CombinationMatrix, dict]:
    """Lazy-shift ``cm`` if it has negative eigenvalues.

    Returns the (possibly shifted) matrix plus a record of the pre/post
    mixing rates so reports can show both.
    """
    info = {
        "psd_shift_applied": False,
        "lambda_pre_shift": cm.mixing_rate,
        "lambda": cm.mixing_rate,
        "theta": None,
    }
    if cm.psd:
        return cm, info
    shifted = lazy_shift(cm, theta)
    info["psd_shift_applied"] = True
    info["theta"] = theta
    info["lambda"] = shifted.mixing_rate
    return shifted, info


def parse_topology(spec: str) -> CombinationMatrix:
    """Build a combination matrix from a topology spec string (see module doc)."""
    spec = spec.strip()
    base, *mods = spec.split("+")
    cm = _build_base(base)
    for mod in mods:
        parts = mod.split(":")
        if parts[0] != "lazy" or len(parts) != 2:
            raise InvalidParameterError(f"unknown topology modifier '{mod}'")
        cm = lazy_shift(cm, _parse_float(parts[1], mod))
    return cm


def _build_base(base: str) -> CombinationMatrix:
    parts = base.split(":")
    kind = parts[0]
    try:
        if kind == "ring" and len(parts) == 2:
            return metropolis_weights(build_ring(int(parts[1])))
        if kind == "complete" and len(parts) == 2:
            return metropolis_weights(build_complete(int(parts[1])))
        if kind == "grid" and len(parts) == 2:
            rows, cols = parts[1].split("x")
            return metropolis_weights(build_grid(int(rows), int(cols)))
        if kind == "er" and len(parts) == 4:
            return metropolis_weights(
                build_erdos_renyi(int(parts[1]), float(parts[2]), int(parts[3]))
            )
    except ValueError as exc:
        if isinstance(exc, (InvalidTopologyError, InvalidParameterError, NotPrimitiveError)):
            raise
        raise InvalidParameterError(f"malformed topology spec '{base}': {exc}") from exc
    raise InvalidParameterError(f"unknown topology spec '{base}'")


def _parse_float(text: str, ctx: str) -> float:
    try:
        return float(text)
    except ValueError as exc:
        raise InvalidParameterError(f"bad number in '{ctx}'") from exc
