"""Method matrices and the spectral factorization of their coupling blocks.

Every supported method picks a triple (A, B^2, C) of polynomials of the
combination matrix W.  Because the triple commutes with W, the consensus
dynamics split per non-principal eigenvalue ``l_i`` of W into 2x2 blocks

    G_i = [[la_i * lc_i - lb_i^2, -lb_i],
           [lb_i,                  1   ]],

where ``la_i, lb_i^2, lc_i`` are the scalar polynomial values at ``l_i``.
:func:`factorize_g` diagonalizes each block (Jordan form when the two
eigenvalues coincide) and aggregates the operator norms that drive step-size
rules and error monitors.  The diagonalizing blocks are kept as stacked 2x2
arrays; the Kronecker factor ``x I_d`` is never materialized.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import NotPsdError, RequiresPsdError, UnstableMethodError
from .topology import EIG_CLAMP_TOL, CombinationMatrix

REPEATED_EIG_TOL = 1e-9


class Method(str, Enum):
    ED_D2 = "ed_d2"
    EXTRA = "extra"
    ATC_GT = "atc_gt"
    NONATC_GT = "nonatc_gt"
    SEMI_ATC_GT_X = "semi_atc_gt_x"
    SEMI_ATC_GT_G = "semi_atc_gt_g"

    @property
    def needs_psd(self) -> bool:
        return self in (Method.ED_D2, Method.EXTRA)

    @property
    def is_gt(self) -> bool:
        return self in (
            Method.ATC_GT,
            Method.NONATC_GT,
            Method.SEMI_ATC_GT_X,
            Method.SEMI_ATC_GT_G,
        )


# Polynomial coefficients (low order first) of A, B^2, C in W.  The two
# semi-ATC variants share one triple; their explicit recursions differ only
# in where the gossip is applied, which the solvers handle.
_TRIPLE_COEFFS: dict[Method, tuple[tuple[float, ...], tuple[float, ...], tuple[float, ...]]] = {
    Method.ED_D2: ((0.0, 1.0), (1.0, -1.0), (1.0,)),
    Method.EXTRA: ((1.0,), (1.0, -1.0), (0.0, 1.0)),
    Method.ATC_GT: ((0.0, 0.0, 1.0), (1.0, -2.0, 1.0), (1.0,)),
    Method.NONATC_GT: ((1.0,), (1.0, -2.0, 1.0), (0.0, 0.0, 1.0)),
    Method.SEMI_ATC_GT_X: ((0.0, 1.0), (1.0, -2.0, 1.0), (0.0, 1.0)),
    Method.SEMI_ATC_GT_G: ((0.0, 1.0), (1.0, -2.0, 1.0), (0.0, 1.0)),
}


def scalar_triple(method: Method, lam: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Evaluate (la, lb, lc) at eigenvalues ``lam``; lb is the square root of the B^2 value."""
    ca, cb, cc = _TRIPLE_COEFFS[method]
    la = np.polynomial.polynomial.polyval(lam, ca)
    lb_sq = np.polynomial.polynomial.polyval(lam, cb)
    lc = np.polynomial.polynomial.polyval(lam, cc)
    lb = np.sqrt(np.clip(lb_sq, 0.0, None))
    return la, lb, lc


def _matrix_poly(W: np.ndarray, coeffs: tuple[float, ...]) -> np.ndarray:
    out = np.zeros_like(W)
    for c in reversed(coeffs):
        out = out @ W + c * np.eye(W.shape[0])
    return out


def psd_sqrt(M: np.ndarray) -> np.ndarray:
    """Symmetric square root of a symmetric PSD matrix.

    Eigenvalues in [-EIG_CLAMP_TOL, 0) are clamped to zero; anything lower
    raises :class:`NotPsdError`.
    """
    M = np.asarray(M, dtype=float)
    vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
    if vals.min() < -EIG_CLAMP_TOL:
        raise NotPsdError(f"matrix has eigenvalue {vals.min():.3e} below tolerance")
    vals = np.clip(vals, 0.0, None)
    S = (vecs * np.sqrt(vals)) @ vecs.T
    return 0.5 * (S + S.T)


@dataclass(frozen=True)
class MethodMatrices:
    """The (A, B^2, C) triple of a method on a fixed combination matrix."""

    method: Method
    A: np.ndarray
    Bsq: np.ndarray
    B: np.ndarray
    C: np.ndarray
    coeffs: dict[str, tuple[float, ...]]

    @property
    def n(self) -> int:
        return self.A.shape[0]


def method_matrices(method: Method, cm: CombinationMatrix) -> MethodMatrices:
    """Build the matrix triple for ``method`` on ``cm``.

    ED/D2 and EXTRA need ``W >= 0`` so that ``B = (I - W)^{1/2}`` exists and
    the coupling blocks are stable; callers may lazy-shift first.
    """
    method = Method(method)
    if method.needs_psd and not cm.psd:
        raise RequiresPsdError(
            f"{method.value} needs a PSD combination matrix "
            f"(min eigenvalue {cm.eigenvalues[-1]:.4f}); apply a lazy shift"
        )
    ca, cb, cc = _TRIPLE_COEFFS[method]
    W = cm.W
    A = _matrix_poly(W, ca)
    Bsq = _matrix_poly(W, cb)
    C = _matrix_poly(W, cc)
    B = psd_sqrt(Bsq) if not method.is_gt else np.eye(cm.n) - W
    return MethodMatrices(method=method, A=A, Bsq=Bsq, B=B, C=C,
                          coeffs={"a": ca, "b": cb, "c": cc})


@dataclass(frozen=True)
class GBlock:
    """One 2x2 coupling block together with the scalars that built it."""

    lam: float
    lam_a: float
    lam_b: float
    lam_c: float
    G: np.ndarray


def g_blocks(mm: MethodMatrices, cm: CombinationMatrix) -> list[GBlock]:
    """Coupling blocks for every non-principal eigenvalue of W (descending order)."""
    lam = cm.eigenvalues[1:]
    la, lb, lc = scalar_triple(mm.method, lam)
    blocks = []
    for li, ai, bi, ci in zip(lam, la, lb, lc):
        G = np.array([[ai * ci - bi * bi, -bi], [bi, 1.0]])
        blocks.append(GBlock(lam=float(li), lam_a=float(ai), lam_b=float(bi),
                             lam_c=float(ci), G=G))
    return blocks


@dataclass(frozen=True)
class BlockFactor:
    """Similarity factorization G = V Gamma V^{-1} of one coupling block."""

    eigvals: np.ndarray
    V: np.ndarray
    V_inv: np.ndarray
    Gamma: np.ndarray
    defective: bool


@dataclass(frozen=True)
class SpectralConstants:
    """Aggregated factorization of the full coupling operator.

    ``gamma``, ``v1``, ``v2`` are exact spectral norms of the block-diagonal
    Gamma, V and V^{-1} (max over blocks); the looser closed-form bounds from
    the analysis are available via :func:`paper_bound_gap`.
    """

    method: Method
    n: int
    mixing: float
    gamma: float
    lambda_a: float
    lambda_b_under: float
    v1: float
    v2: float
    lambda_under: float | None
    blocks: tuple[GBlock, ...]
    factors: tuple[BlockFactor, ...]
    lam_arr: np.ndarray
    lam_a_arr: np.ndarray
    lam_b_arr: np.ndarray
    lam_c_arr: np.ndarray
    V_stack: np.ndarray
    Vinv_stack: np.ndarray
    Gamma_stack: np.ndarray

    @property
    def upsilon(self) -> float:
        """The proofs' scaling constant sqrt(n) * v2."""
        return float(np.sqrt(self.n) * self.v2)

    def theorem1_beta(self, safety: float = 1.0) -> float:
        """beta = 1 + v1 v2 la / (1-gamma) + sqrt(v1 v2 la) / sqrt(lb_under (1-gamma))."""
        va = self.v1 * self.v2 * self.lambda_a
        return float(
            1.0
            + safety * va / (1.0 - self.gamma)
            + np.sqrt(va) / np.sqrt(self.lambda_b_under * (1.0 - self.gamma))
        )

    def dense(self, which: str) -> np.ndarray:
        """Assemble the 2(n-1) x 2(n-1) block-diagonal operator (tests only)."""
        stacks = {"G": np.stack([b.G for b in self.blocks]).astype(complex),
                  "V": self.V_stack, "Vinv": self.Vinv_stack, "Gamma": self.Gamma_stack}
        stack = stacks[which]
        m = len(self.blocks)
        out = np.zeros((2 * m, 2 * m), dtype=complex)
        for i in range(m):
            out[2 * i: 2 * i + 2, 2 * i: 2 * i + 2] = stack[i]
        return out


def _spectral_norm(M: np.ndarray) -> float:
    return float(np.linalg.svd(M, compute_uv=False)[0])


def _inv2(M: np.ndarray) -> np.ndarray:
    det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
    return np.array([[M[1, 1], -M[0, 1]], [-M[1, 0], M[0, 0]]], dtype=M.dtype) / det


def factorize_block(blk: GBlock, method: Method, mixing: float) -> BlockFactor:
    """Factorize one block; raises :class:`UnstableMethodError` if its radius >= 1."""
    a, b = blk.G[0, 0], blk.G[0, 1]
    d = blk.G[1, 1]
    tr = a + d
    det = a * d - b * blk.G[1, 0]
    disc = tr * tr - 4.0 * det
    # Structurally defective blocks must take the Jordan path even when
    # rounding leaves the discriminant a hair away from zero; the eigenvalue
    # gap is sqrt(disc), so the test lives on the discriminant scale.
    disc_floor = max(REPEATED_EIG_TOL**2, 1e-12 * max(1.0, tr * tr, 4.0 * abs(det)))
    repeated = abs(disc) <= disc_floor
    root = np.sqrt(complex(disc))
    g1 = (tr + root) / 2.0
    g2 = (tr - root) / 2.0
    if max(abs(g1), abs(g2)) >= 1.0:
        raise UnstableMethodError(
            f"coupling block for eigenvalue {blk.lam:.6f} has spectral radius "
            f"{max(abs(g1), abs(g2)):.6f} >= 1 ({method.value})",
            eigenvalue=blk.lam,
        )
    if not repeated:
        # Distinct eigenvalues: eigenvectors [b, g-a] scaled by 1/lam_b so the
        # first component is -1 (b = -lam_b, nonzero on a connected graph).
        V = np.array([[-1.0, -1.0], [(g1 - a) / blk.lam_b, (g2 - a) / blk.lam_b]],
                     dtype=complex)
        Gamma = np.diag([g1, g2]).astype(complex)
        return BlockFactor(eigvals=np.array([g1, g2]), V=V, V_inv=_inv2(V),
                           Gamma=Gamma, defective=False)

    # Repeated eigenvalue: Jordan form G = T J T^{-1}, then a diagonal
    # rescaling E = diag(1, eps) trades the off-diagonal 1 for eps < 1 - |g|.
    gam = tr / 2.0
    if method.is_gt:
        eps = (1.0 - abs(gam)) / 2.0
    else:
        eps = np.sqrt(mixing) if mixing > 0 else 0.5
    u = np.array([-1.0, (gam - a) / blk.lam_b], dtype=complex)
    shifted = blk.G.astype(complex) - gam * np.eye(2)
    # (G - gam I) is nilpotent for a defective 2x2 block, so the system is
    # rank one; truncate the pseudo-inverse accordingly or rounding noise in
    # the second singular direction blows up the generalized eigenvector.
    w = np.linalg.pinv(shifted, rcond=1e-6) @ u
    T = np.column_stack([u, w])
    V = T @ np.diag([1.0, eps])
    Gamma = np.array([[gam, eps], [0.0, gam]], dtype=complex)
    return BlockFactor(eigvals=np.array([gam, gam]), V=V, V_inv=_inv2(V),
                       Gamma=Gamma, defective=True)


def factorize_g(
    blocks: list[GBlock],
    method: Method,
    mixing: float,
    n: int | None = None,
    lambda_under: float | None = None,
) -> SpectralConstants:
    """Factorize all blocks and aggregate the constants of the transformed recursion."""
    factors = [factorize_block(blk, method, mixing) for blk in blocks]
    gamma = max(_spectral_norm(f.Gamma) for f in factors)
    v1 = max(_spectral_norm(f.V) for f in factors)
    v2 = max(_spectral_norm(f.V_inv) for f in factors)
    lam_b = np.array([b.lam_b for b in blocks])
    lam_a = np.array([b.lam_a for b in blocks])
    return SpectralConstants(
        method=method,
        n=n if n is not None else len(blocks) + 1,
        mixing=mixing,
        gamma=float(gamma),
        lambda_a=float(np.max(np.abs(lam_a))),
        lambda_b_under=float(np.min(lam_b)),
        v1=float(v1),
        v2=float(v2),
        lambda_under=lambda_under,
        blocks=tuple(blocks),
        factors=tuple(factors),
        lam_arr=np.array([b.lam for b in blocks]),
        lam_a_arr=lam_a,
        lam_b_arr=lam_b,
        lam_c_arr=np.array([b.lam_c for b in blocks]),
        V_stack=np.stack([f.V for f in factors]),
        Vinv_stack=np.stack([f.V_inv for f in factors]),
        Gamma_stack=np.stack([f.Gamma for f in factors]),
    )


def spectral_constants(mm: MethodMatrices, cm: CombinationMatrix) -> SpectralConstants:
    """Blocks plus factorization for ``mm`` on ``cm`` in one call."""
    return factorize_g(
        g_blocks(mm, cm),
        method=mm.method,
        mixing=cm.mixing_rate,
        n=cm.n,
        lambda_under=cm.min_nonzero_eig,
    )


def paper_bound_gap(sc: SpectralConstants) -> dict[str, tuple[float, float]]:
    """Closed-form bounds vs computed values, as {name: (computed, bound)}.

    Only defined for PSD matrices with a positive mixing rate: diffusion
    family -> gamma = sqrt(l), v1^2 <= 4, v2^2 <= 2/l_under; gradient
    tracking -> gamma <= (1+l)/2, v1^2 <= 3, v2^2 <= 9.
    """
    lam = sc.mixing
    out: dict[str, tuple[float, float]] = {}
    if sc.method in (Method.ED_D2, Method.EXTRA):
        if sc.lambda_under is None:
            raise NotPsdError("diffusion-family bounds need a PSD matrix")
        out["gamma"] = (sc.gamma, float(np.sqrt(lam)))
        out["v1_sq"] = (sc.v1**2, 4.0)
        out["v2_sq"] = (sc.v2**2, 2.0 / sc.lambda_under)
    else:
        out["gamma"] = (sc.gamma, (1.0 + lam) / 2.0)
        out["v1_sq"] = (sc.v1**2, 3.0)
        out["v2_sq"] = (sc.v2**2, 9.0)
    return out
