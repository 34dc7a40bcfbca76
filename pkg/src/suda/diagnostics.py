"""Trajectory metrics, transformed-error quantities, and inequality monitors.

Everything here is a pure observer: functions read solver states or recorded
trajectories and never mutate them.  The central object is the transformed
error

    e_hat = (1/upsilon) V^{-1} [ U^T x ; Lb^{-1} U^T s ],    s = B z + alpha A gbar,

with z = y - B x, computed per 2x2 block of the factorized coupling operator
and upsilon = sqrt(n) v2.  Its squared norm contracts along trajectories and
feeds the descent and consensus inequality monitors.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidParameterError, NotApplicableError, UnavailableError
from .problems import Problem
from .spectral import MethodMatrices, SpectralConstants
from .topology import CombinationMatrix

CSV_COLUMNS = (
    "k",
    "grad_norm_avg_sq",
    "avg_grad_norm_sq",
    "consensus_sq",
    "subopt_avg",
    "subopt_mean",
    "e_hat_sq",
    "descent_resid",
    "recursion_resid",
    "alpha",
)

EXTRA_COLUMNS = ("f_avg", "wall_time")


@dataclass
class RunRecord:
    """Per-iteration metric time series plus run metadata."""

    meta: dict
    columns: dict = field(default_factory=dict)
    _rows: list = field(default_factory=list)

    @classmethod
    def empty(cls, meta: dict) -> "RunRecord":
        return cls(meta=meta)

    def append(self, row: dict):
        self._rows.append(row)

    def finalize(self):
        names = CSV_COLUMNS + EXTRA_COLUMNS
        for name in names:
            self.columns[name] = np.array(
                [row.get(name, float("nan")) for row in self._rows], dtype=float
            )
        ks = self.columns["k"]
        if ks.size and not np.all(np.diff(ks) > 0):
            raise InvalidParameterError("recorded iteration indices must increase")
        self._rows = []

    def __len__(self) -> int:
        return len(self.columns.get("k", ()))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    def to_csv(self, path: str | Path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for j in range(len(self)):
                writer.writerow([_fmt(self.columns[c][j], c) for c in CSV_COLUMNS])

    @classmethod
    def from_csv(cls, path: str | Path, meta: dict | None = None) -> "RunRecord":
        data = np.genfromtxt(path, delimiter=",", names=True)
        rec = cls(meta=meta or {})
        data = np.atleast_1d(data)
        for name in data.dtype.names:
            rec.columns[name] = np.asarray(data[name], dtype=float)
        return rec


def _fmt(value: float, column: str) -> str:
    if column == "k":
        return str(int(value))
    if math.isnan(value):
        return "nan"
    return format(value, ".17g")


def plateau(values: np.ndarray, fraction: float = 0.1) -> float:
    """Mean of the trailing ``fraction`` of recorded points (at least one)."""
    values = np.asarray(values, dtype=float)
    tail = max(1, int(math.ceil(fraction * values.size)))
    return float(np.mean(values[-tail:]))


def average_records(records: list[RunRecord]) -> dict[str, np.ndarray]:
    """Seed-averaged columns; all records must share the recording grid."""
    base = records[0]["k"]
    for rec in records[1:]:
        if not np.array_equal(rec["k"], base):
            raise InvalidParameterError("records have mismatched recording grids")
    out = {"k": base.copy()}
    for name in CSV_COLUMNS:
        if name == "k":
            continue
        out[name] = np.mean([rec[name] for rec in records], axis=0)
    return out


# ---------------------------------------------------------------------------
# Transformed error
# ---------------------------------------------------------------------------

def _check_artifacts(mm: MethodMatrices, sc: SpectralConstants, cm: CombinationMatrix,
                     n_state: int):
    if mm.method is not sc.method:
        raise InvalidParameterError(
            f"spectral constants are for {sc.method.value}, matrices for {mm.method.value}")
    if sc.n != cm.n or mm.n != cm.n or n_state != cm.n:
        raise InvalidParameterError("state, matrices and spectral artifacts disagree on n")
    if abs(sc.mixing - cm.mixing_rate) > 1e-12:
        raise InvalidParameterError("spectral constants built for a different matrix")


def transformed_pair(X: np.ndarray, Y: np.ndarray, mm: MethodMatrices,
                     sc: SpectralConstants, cm: CombinationMatrix,
                     grads_at_avg: np.ndarray, alpha: float) -> np.ndarray:
    """The stacked per-block pair [U^T x ; Lb^{-1} U^T s], shape (n-1, 2, d)."""
    uhat = cm.uhat()
    z = Y - mm.B @ X
    s = mm.B @ z + alpha * (mm.A @ grads_at_avg)
    ux = uhat.T @ X
    us = (uhat.T @ s) / sc.lam_b_arr[:, None]
    return np.stack([ux, us], axis=1)


def transformed_error(X: np.ndarray, Y: np.ndarray, mm: MethodMatrices,
                      sc: SpectralConstants, cm: CombinationMatrix,
                      problem: Problem, alpha: float,
                      grads_at_avg: np.ndarray | None = None,
                      return_struct: bool = False):
    """Squared norm of the transformed consensus error at one state.

    ``grads_at_avg`` (every agent's exact gradient at the current average)
    can be passed in when the caller already computed it for other metrics.
    """
    _check_artifacts(mm, sc, cm, X.shape[0])
    if grads_at_avg is None:
        grads_at_avg = problem.grads_at(X.mean(axis=0))
    pair = transformed_pair(X, Y, mm, sc, cm, grads_at_avg, alpha)
    ehat = np.einsum("ijk,ikd->ijd", sc.Vinv_stack, pair.astype(complex)) / sc.upsilon
    e_sq = float(np.sum(np.abs(ehat) ** 2))
    if return_struct:
        return e_sq, ehat
    return e_sq


def reconstruction_identity_gap(pair: np.ndarray, ehat: np.ndarray,
                                sc: SpectralConstants) -> float:
    """Relative gap in  upsilon^2 ||V e_hat||^2 = ||U^T x||^2 + ||Lb^{-1} U^T s||^2."""
    ve = np.einsum("ijk,ikd->ijd", sc.V_stack, ehat)
    lhs = sc.upsilon**2 * float(np.sum(np.abs(ve) ** 2))
    rhs = float(np.sum(np.abs(pair) ** 2))
    return abs(lhs - rhs) / max(rhs, 1e-300)


def recursion_residual_from_parts(ehat_k: np.ndarray, ehat_k1: np.ndarray,
                                  exact_G: np.ndarray, noise: np.ndarray,
                                  gbar_k: np.ndarray, gbar_k1: np.ndarray,
                                  sc: SpectralConstants, cm: CombinationMatrix,
                                  alpha: float) -> float:
    """|| e_hat^{k+1} - (Gamma e_hat^k - alpha V^{-1} [..gradient terms..]) ||.

    The bracket stacks (1/upsilon) La U^T (grad f(x) - grad f(xbar) + w) on
    top of (1/upsilon) Lb^{-1} La U^T (grad f(xbar_k) - grad f(xbar_{k+1})).
    """
    uhat = cm.uhat()
    u1 = uhat.T @ (exact_G - gbar_k + noise)
    u2 = uhat.T @ (gbar_k - gbar_k1)
    top = sc.lam_a_arr[:, None] * u1
    bot = (sc.lam_a_arr / sc.lam_b_arr)[:, None] * u2
    bracket = np.stack([top, bot], axis=1).astype(complex) / sc.upsilon
    propagated = np.einsum("ijk,ikd->ijd", sc.Gamma_stack, ehat_k)
    propagated -= alpha * np.einsum("ijk,ikd->ijd", sc.Vinv_stack, bracket)
    return float(np.sqrt(np.sum(np.abs(ehat_k1 - propagated) ** 2)))


def consensus_recursion_residual(X0, Y0, X1, Y1, noise, mm: MethodMatrices,
                                 sc: SpectralConstants, cm: CombinationMatrix,
                                 problem: Problem, alpha: float) -> float:
    """Residual of the one-step transformed recursion between two states.

    ``noise`` is the realized per-agent gradient noise used in the step from
    state 0 to state 1; pass zeros for deterministic runs.
    """
    if noise is None:
        raise UnavailableError("recursion residual needs the realized noise vectors")
    gbar0 = problem.grads_at(X0.mean(axis=0))
    gbar1 = problem.grads_at(X1.mean(axis=0))
    _, ehat0 = transformed_error(X0, Y0, mm, sc, cm, problem, alpha,
                                 grads_at_avg=gbar0, return_struct=True)
    _, ehat1 = transformed_error(X1, Y1, mm, sc, cm, problem, alpha,
                                 grads_at_avg=gbar1, return_struct=True)
    exact_G = problem.grad_block(X0)
    return recursion_residual_from_parts(ehat0, ehat1, exact_G, noise,
                                         gbar0, gbar1, sc, cm, alpha)


# ---------------------------------------------------------------------------
# Inequality monitors
# ---------------------------------------------------------------------------

def _require_noise_free(record: RunRecord):
    if record.meta.get("noise_var", 0.0) > 0.0:
        raise NotApplicableError("monitor is pathwise only for noise-free runs")


def descent_residuals(record: RunRecord, L: float, sc: SpectralConstants) -> np.ndarray:
    """Residual of the descent inequality between consecutive recorded rows.

    Positive residual beyond slack means the inequality failed:
    f(xbar') <= f(xbar) - (a/2)||grad f(xbar)||^2 - (a/4)||avg grad||^2
               + (a L^2 v1^2 v2^2 / 2) ||e_hat||^2.
    """
    ks = record["k"]
    if ks.size >= 2 and not np.all(np.diff(ks) == 1):
        raise NotApplicableError("descent residuals need record_every == 1")
    f = record["f_avg"]
    a = record["alpha"]
    g1 = record["grad_norm_avg_sq"]
    g2 = record["avg_grad_norm_sq"]
    e = record["e_hat_sq"]
    rhs = f[:-1] - 0.5 * a[:-1] * g1[:-1] - 0.25 * a[:-1] * g2[:-1] \
        + 0.5 * a[:-1] * L**2 * sc.v1**2 * sc.v2**2 * e[:-1]
    out = np.full(ks.size, np.nan)
    out[:-1] = f[1:] - rhs
    return out


def attach_descent_residuals(record: RunRecord, L: float, sc: SpectralConstants):
    record.columns["descent_resid"] = descent_residuals(record, L, sc)


def descent_monitor(record: RunRecord, L: float, sc: SpectralConstants,
                    slack: float = 1e-9) -> list[tuple[int, float]]:
    """Iterations whose descent-inequality residual exceeds ``slack`` (noise-free runs)."""
    _require_noise_free(record)
    resid = descent_residuals(record, L, sc)
    ks = record["k"]
    return [(int(ks[j]), float(resid[j]))
            for j in range(len(resid) - 1) if resid[j] > slack]


def consensus_monitor(record: RunRecord, L: float, sc: SpectralConstants,
                      slack: float = 1e-9) -> list[tuple[int, float]]:
    """Violations of the consensus inequality along a noise-free trajectory.

    Checks  e^{k+1} <= (g + 2 a^2 L^2 v1^2 v2^2 la^2/(1-g)) e^k
                      + (2 a^4 L^2 la^2 / (lb^2 (1-g))) ||avg grad||^2.
    """
    _require_noise_free(record)
    ks = record["k"]
    if ks.size >= 2 and not np.all(np.diff(ks) == 1):
        raise NotApplicableError("consensus monitor needs record_every == 1")
    e = record["e_hat_sq"]
    g2 = record["avg_grad_norm_sq"]
    a = record["alpha"]
    gam = sc.gamma
    contr = gam + 2.0 * a[:-1] ** 2 * L**2 * sc.v1**2 * sc.v2**2 * sc.lambda_a**2 / (1 - gam)
    drive = 2.0 * a[:-1] ** 4 * L**2 * sc.lambda_a**2 / (sc.lambda_b_under**2 * (1 - gam))
    resid = e[1:] - (contr * e[:-1] + drive * g2[:-1])
    return [(int(ks[j]), float(resid[j])) for j in range(resid.size) if resid[j] > slack]


# ---------------------------------------------------------------------------
# Heterogeneity statistics and initial-error bound
# ---------------------------------------------------------------------------

def heterogeneity_stats(problem: Problem, x0: np.ndarray,
                        mm: MethodMatrices) -> tuple[float, float]:
    """(varsigma0^2, zeta0^2) at a consensual start.

    varsigma0^2 = (1/n) sum_i ||grad f_i(x0) - grad f(x0)||^2 and
    zeta0^2 = (1/n) ||A (grad block - average)||_F^2, which the mixing
    polynomial contracts: zeta0^2 <= lambda_a^2 varsigma0^2.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 2:
        if np.max(np.abs(x0 - x0[0])) > 1e-12:
            raise InvalidParameterError("heterogeneity stats need a consensual start")
        x0 = x0[0]
    G = problem.grads_at(x0)
    dev = G - G.mean(axis=0)
    varsigma_sq = float(np.sum(dev**2) / problem.n)
    zeta_sq = float(np.sum((mm.A @ dev) ** 2) / problem.n)
    return varsigma_sq, zeta_sq


def initial_error_bound(sc: SpectralConstants, alpha: float, zeta_sq: float) -> float:
    """Upper bound alpha^2 zeta0^2 / lambda_b_under^2 on ||e_hat^0||^2."""
    return alpha**2 * zeta_sq / sc.lambda_b_under**2


# ---------------------------------------------------------------------------
# Transient-time estimator
# ---------------------------------------------------------------------------

def transient_time(k_grid: np.ndarray, decentralized: np.ndarray,
                   centralized: np.ndarray, factor: float = 1.2) -> int | None:
    """First recorded k after which the decentralized curve stays within
    ``factor`` times the centralized one for the rest of the horizon."""
    dec = np.asarray(decentralized, dtype=float)
    cen = np.asarray(centralized, dtype=float)
    if dec.shape != cen.shape or dec.shape != np.shape(k_grid):
        raise InvalidParameterError("curves must share one recording grid")
    ok = dec <= factor * cen
    # suffix scan: position from which everything is fine
    good_from = None
    for j in range(ok.size - 1, -1, -1):
        if not ok[j]:
            break
        good_from = j
    if good_from is None:
        return None
    return int(np.asarray(k_grid)[good_from])


def transient_time_profile(k_grid, decentralized, centralized,
                           factors=(1.1, 1.2, 1.5, 2.0)) -> dict[float, int | None]:
    """Transient time at several gap factors, to expose threshold sensitivity."""
    return {f: transient_time(k_grid, decentralized, centralized, factor=f)
            for f in factors}
