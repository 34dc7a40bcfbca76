"""Solver engines and the instrumented run loop.

The primal-dual engine implements

    x^{k+1} = A (C x^k - alpha * grad_hat(x^k)) - B y^k
    y^{k+1} = y^k + B x^{k+1},          y^0 = 0,

which covers every supported method through its (A, B, C) triple.  The
explicit per-method recursions published for Exact-Diffusion/D2, EXTRA and
the gradient-tracking variants are implemented separately and must trace the
same iterates when fed the same noise stream; the tests lean on that.

States are (n, d) row blocks; every gossip is a plain matrix product with
the n x n combination matrix (the Kronecker lift is implicit).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diagnostics
from .errors import (
    ConfigError,
    InvalidParameterError,
    InvalidStateError,
    NumericOverflowError,
    UnavailableError,
)
from .problems import GradOracle, Problem, make_problem
from .spectral import Method, MethodMatrices, SpectralConstants, method_matrices, spectral_constants
from .topology import CombinationMatrix, ensure_psd, parse_topology

BASELINES = ("dsgd", "psgd")
DIVERGENCE_GUARD = 1e12

# Tracker-style methods whose initial tracker is gossiped once.
_GOSSIPED_TRACKER_INIT = {Method.ATC_GT, Method.SEMI_ATC_GT_G}


@dataclass(frozen=True)
class NetworkState:
    """Stacked agent iterates plus whatever the active recursion carries along."""

    x: np.ndarray
    y: np.ndarray | None = None
    g: np.ndarray | None = None
    x_prev: np.ndarray | None = None
    prev_grad: np.ndarray | None = None
    k: int = 0


def initial_state(x0: np.ndarray) -> NetworkState:
    x0 = np.asarray(x0, dtype=float)
    return NetworkState(x=x0.copy(), y=np.zeros_like(x0), k=0)


def consensual_start(n: int, d: int, seed: int) -> np.ndarray:
    """All agents share one N(0, I_d) draw keyed by the run seed."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 101)))
    return np.tile(rng.normal(size=d), (n, 1))


def _check_dims(state: NetworkState, n: int):
    if state.x.ndim != 2 or state.x.shape[0] != n:
        raise InvalidStateError(f"state block must be ({n}, d), got {state.x.shape}")


def suda_apply(state: NetworkState, mm: MethodMatrices, alpha: float,
               grad_hat: np.ndarray) -> NetworkState:
    """One primal-dual update given an already-evaluated stochastic gradient block."""
    _check_dims(state, mm.n)
    x_new = mm.A @ (mm.C @ state.x - alpha * grad_hat) - mm.B @ state.y
    y_new = state.y + mm.B @ x_new
    return NetworkState(x=x_new, y=y_new, k=state.k + 1)


def suda_step(state: NetworkState, mm: MethodMatrices, alpha: float,
              oracle: GradOracle) -> NetworkState:
    """One primal-dual update; calls the oracle once per agent at iteration k."""
    return suda_apply(state, mm, alpha, oracle.stoch_grad_block(state.x, state.k))


def explicit_step(method: Method, state: NetworkState, cm: CombinationMatrix,
                  alpha: float, oracle: GradOracle) -> NetworkState:
    """One step of the published per-method recursion, including its special start.

    The two-step forms (diffusion family) keep ``x_prev`` and the previous
    stochastic gradient; the tracking forms keep the tracker ``g``.  Noise
    keys follow the iterate being differentiated, so trajectories coincide
    pathwise with the primal-dual form under a shared oracle.
    """
    method = Method(method)
    _check_dims(state, cm.n)
    W = cm.W
    k = state.k

    if method in (Method.ED_D2, Method.EXTRA):
        gk = oracle.stoch_grad_block(state.x, k)
        if k == 0:
            if method is Method.ED_D2:
                x_new = W @ (state.x - alpha * gk)
            else:
                x_new = W @ state.x - alpha * gk
        else:
            if method is Method.ED_D2:
                x_new = W @ (2.0 * state.x - state.x_prev - alpha * (gk - state.prev_grad))
            else:
                x_new = W @ (2.0 * state.x - state.x_prev) - alpha * (gk - state.prev_grad)
        return NetworkState(x=x_new, x_prev=state.x, prev_grad=gk, k=k + 1)

    if method.is_gt:
        g, prev = state.g, state.prev_grad
        if k == 0:
            prev = oracle.stoch_grad_block(state.x, 0)
            g = W @ prev if method in _GOSSIPED_TRACKER_INIT else prev
        if method in (Method.ATC_GT, Method.SEMI_ATC_GT_X):
            x_new = W @ (state.x - alpha * g)
        else:
            x_new = W @ state.x - alpha * g
        raw = oracle.stoch_grad_block(x_new, k + 1)
        if method in (Method.ATC_GT, Method.SEMI_ATC_GT_G):
            g_new = W @ (g + raw - prev)
        else:
            g_new = W @ g + raw - prev
        return NetworkState(x=x_new, g=g_new, prev_grad=raw, k=k + 1)

    raise InvalidParameterError(f"no explicit recursion for {method}")


def dsgd_step(state: NetworkState, cm: CombinationMatrix, alpha: float,
              oracle: GradOracle) -> NetworkState:
    """Diffusion-form DSGD: local gradient step, then gossip."""
    _check_dims(state, cm.n)
    grad_hat = oracle.stoch_grad_block(state.x, state.k)
    return NetworkState(x=cm.W @ (state.x - alpha * grad_hat), k=state.k + 1)


def psgd_step(state: NetworkState, alpha: float, oracle: GradOracle) -> NetworkState:
    """Parallel SGD: all agents evaluate at the average, which everyone keeps."""
    xbar = state.x.mean(axis=0)
    grad_hat = oracle.stoch_grads_at(xbar, state.k)
    xbar_new = xbar - alpha * grad_hat.mean(axis=0)
    return NetworkState(x=np.tile(xbar_new, (state.x.shape[0], 1)), k=state.k + 1)


# ---------------------------------------------------------------------------
# Step-size schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StepSchedule:
    """How the step size evolves: constant, halving, or the analysis rules.

    ``theorem1``: alpha = 1 / (2 L beta + sigma sqrt(K/n)) with beta built
    from the spectral constants.  ``theorem2``: alpha = 2 ln(K^2) / (mu K),
    the rate-optimal choice under gradient domination; its feasibility bound
    is reported but not enforced.
    """

    kind: str
    alpha0: float | None = None
    period: int = 100

    KINDS = ("constant", "halving", "theorem1", "theorem2")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"unknown schedule kind '{self.kind}'")
        if self.kind in ("constant", "halving"):
            if self.alpha0 is None or self.alpha0 <= 0:
                raise ConfigError(f"schedule '{self.kind}' needs alpha0 > 0")
        if self.kind == "halving" and self.period < 1:
            raise ConfigError("halving period must be >= 1")

    @classmethod
    def from_spec(cls, spec) -> "StepSchedule":
        if isinstance(spec, StepSchedule):
            return spec
        if not isinstance(spec, dict):
            raise ConfigError(f"schedule spec must be a dict, got {type(spec).__name__}")
        known = {"kind", "alpha", "alpha0", "period"}
        unknown = set(spec) - known
        if unknown:
            raise ConfigError(f"unknown schedule keys {sorted(unknown)}")
        alpha0 = spec.get("alpha0", spec.get("alpha"))
        return cls(kind=spec.get("kind", "constant"), alpha0=alpha0,
                   period=spec.get("period", 100))

    def resolve(self, *, sc: SpectralConstants | None, problem: Problem,
                noise_var: float, iterations: int, n: int) -> "ResolvedSchedule":
        meta = {"kind": self.kind}
        if self.kind == "constant":
            a0 = self.alpha0
            fn = lambda k: a0
        elif self.kind == "halving":
            a0, period = self.alpha0, self.period
            fn = lambda k: a0 * 0.5 ** (k // period)
            meta["period"] = period
        elif self.kind == "theorem1":
            if sc is None:
                raise ConfigError("theorem1 schedule needs spectral constants")
            L = problem.smoothness()
            sigma = np.sqrt(noise_var)
            a0 = 1.0 / (2.0 * L * sc.theorem1_beta() + sigma * np.sqrt(max(iterations, 1) / n))
            fn = lambda k: a0
            meta.update(L=L, beta=sc.theorem1_beta(), sigma=sigma)
        else:  # theorem2
            if not hasattr(problem, "pl_constant"):
                raise ConfigError("theorem2 schedule needs a gradient-dominated problem")
            mu = problem.pl_constant()
            K = max(iterations, 2)
            a0 = 2.0 * np.log(float(K) ** 2) / (mu * K)
            fn = lambda k: a0
            meta.update(mu=mu)
            if sc is not None:
                L = problem.smoothness()
                va = sc.v1 * sc.v2 * sc.lambda_a
                bound = min(
                    (1.0 - sc.gamma) / (3.0 * L),
                    sc.lambda_b_under / (2.0 * L),
                    (1.0 - sc.gamma) / (np.sqrt(6.0) * L * va),
                    (mu * sc.lambda_b_under**2 * (1.0 - sc.gamma)
                     / (8.0 * L**4 * sc.v1**2 * sc.v2**2)) ** (1.0 / 3.0),
                )
                meta.update(feasibility_bound=float(bound), within_bound=bool(a0 <= bound))
        meta["alpha0"] = float(a0)
        return ResolvedSchedule(base_alpha=float(a0), fn=fn, meta=meta)


@dataclass(frozen=True)
class ResolvedSchedule:
    base_alpha: float
    fn: object
    meta: dict

    def alpha(self, k: int) -> float:
        return float(self.fn(k))


# ---------------------------------------------------------------------------
# Run configuration and loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """One (method, topology, schedule, seed) trajectory request."""

    method: str
    topology: str
    iterations: int
    schedule: dict | StepSchedule
    problem: dict | None = None
    noise_var: float = 0.0
    seed: int = 0
    record_every: int = 1
    theorem_mode: bool = True
    retain_noise: bool = False
    compute_reference: bool | str = "auto"
    psd_shift_theta: float = 0.5
    label: str = ""

    def __post_init__(self):
        if self.method not in BASELINES:
            Method(self.method)  # raises ValueError on unknown method
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.record_every < 1:
            raise ConfigError("record_every must be >= 1")
        if self.noise_var < 0:
            raise ConfigError("noise_var must be >= 0")


def _resolve_reference(cfg: RunConfig, problem: Problem, cache_dir) -> tuple[float, str]:
    want = cfg.compute_reference
    if want == "auto":
        want = problem.kind in ("pl_toy", "quadratic")
    if not want:
        return float("nan"), "skipped"
    try:
        return problem.reference_optimum(cache_dir=cache_dir)
    except UnavailableError:
        return float("nan"), "unavailable"


def run(cfg: RunConfig, problem: Problem | None = None,
        cache_dir: str | Path | None = None) -> "diagnostics.RunRecord":
    """Execute ``cfg`` and return the recorded trajectory.

    Deterministic given (cfg, problem data): topology, data, initialization
    and noise all derive from the seeds in the config.  Any non-finite
    iterate (or magnitude beyond the divergence guard) aborts with
    :class:`NumericOverflowError` carrying the iteration index.
    """
    if problem is None:
        if cfg.problem is None:
            raise ConfigError("run config has no problem spec and no problem was passed")
        problem = make_problem(cfg.problem, cache_dir=cache_dir)

    cm = parse_topology(cfg.topology)
    is_baseline = cfg.method in BASELINES
    mm = sc = None
    psd_info = {"psd_shift_applied": False, "lambda": cm.mixing_rate,
                "lambda_pre_shift": cm.mixing_rate, "theta": None}
    if not is_baseline:
        method = Method(cfg.method)
        if method.needs_psd:
            cm, psd_info = ensure_psd(cm, cfg.psd_shift_theta)
        mm = method_matrices(method, cm)
        sc = spectral_constants(mm, cm)

    oracle = GradOracle(problem, cfg.noise_var, cfg.seed)
    schedule = StepSchedule.from_spec(cfg.schedule).resolve(
        sc=sc, problem=problem, noise_var=cfg.noise_var,
        iterations=cfg.iterations, n=problem.n)
    f_star, f_star_tag = _resolve_reference(cfg, problem, cache_dir)

    if cfg.theorem_mode:
        x0 = consensual_start(problem.n, problem.d, cfg.seed)
    else:
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 102)))
        x0 = rng.normal(size=(problem.n, problem.d))
    state = initial_state(x0)

    rec = diagnostics.RunRecord.empty(meta={
        "method": cfg.method, "label": cfg.label or cfg.method, "seed": cfg.seed,
        "topology": cfg.topology, "n": problem.n, "d": problem.d,
        "problem_kind": problem.kind, "iterations": cfg.iterations,
        "record_every": cfg.record_every, "noise_var": cfg.noise_var,
        "schedule": schedule.meta, "f_star_tag": f_star_tag,
        "lambda": psd_info["lambda"], "psd_info": psd_info,
        "spectral": None if sc is None else {
            "gamma": sc.gamma, "v1": sc.v1, "v2": sc.v2,
            "lambda_a": sc.lambda_a, "lambda_b_under": sc.lambda_b_under,
            "lambda_under": sc.lambda_under},
    })

    track_recursion = (cfg.retain_noise and cfg.record_every == 1 and not is_baseline)
    # Objective values are only recorded when something consumes them: a known
    # reference optimum, or the noise-free descent monitor.  Skipping them
    # saves the dominant per-record cost on large logistic runs.
    track_values = bool(np.isfinite(f_star)) or (
        cfg.noise_var == 0.0 and cfg.record_every == 1 and not is_baseline)
    pending = None  # carries (ehat_k, exact_G, noise, gbar_stack) for the residual
    t0 = time.perf_counter()

    for k in range(cfg.iterations + 1):
        if not np.all(np.isfinite(state.x)) or np.max(np.abs(state.x)) > DIVERGENCE_GUARD:
            raise NumericOverflowError(f"iterates diverged at iteration {k}", iteration=k)
        alpha_k = schedule.alpha(k)
        recording = (k % cfg.record_every == 0) or k == cfg.iterations

        exact_G = noise = None
        if recording or not is_baseline or cfg.method == "dsgd":
            exact_G = problem.grad_block(state.x)
            noise = oracle.noise_block(k)

        ehat_struct = None
        if recording:
            xbar = state.x.mean(axis=0)
            gbar_stack = problem.grads_at(xbar)
            row = {
                "k": k,
                "grad_norm_avg_sq": float(np.sum(gbar_stack.mean(axis=0) ** 2)),
                "avg_grad_norm_sq": float(np.sum(exact_G.mean(axis=0) ** 2)),
                "consensus_sq": float(np.sum((state.x - xbar) ** 2)),
                "alpha": alpha_k,
                "wall_time": time.perf_counter() - t0,
            }
            if track_values:
                f_avg = float(problem.global_value(xbar))
                f_mean = float(np.mean(problem.global_values(state.x)))
                row["f_avg"] = f_avg
                row["subopt_avg"] = f_avg - f_star
                row["subopt_mean"] = f_mean - f_star
            if sc is not None:
                e_sq, ehat_struct = diagnostics.transformed_error(
                    state.x, state.y, mm, sc, cm, problem, alpha_k,
                    grads_at_avg=gbar_stack, return_struct=True)
                row["e_hat_sq"] = e_sq
            else:
                row["e_hat_sq"] = float("nan")
            row["recursion_resid"] = float("nan")
            if pending is not None:
                row["recursion_resid"] = diagnostics.recursion_residual_from_parts(
                    pending["ehat"], ehat_struct, pending["exact_G"], pending["noise"],
                    pending["gbar"], gbar_stack, sc, cm, pending["alpha"])
            rec.append(row)
            if track_recursion:
                pending = {"ehat": ehat_struct, "exact_G": exact_G, "noise": noise,
                           "gbar": gbar_stack, "alpha": alpha_k}

        if k == cfg.iterations:
            break
        if is_baseline:
            if cfg.method == "dsgd":
                state = NetworkState(x=cm.W @ (state.x - alpha_k * (exact_G + noise)),
                                     k=state.k + 1)
            else:
                state = psgd_step(state, alpha_k, oracle)
        else:
            state = suda_apply(state, mm, alpha_k, exact_G + noise)

    rec.meta["runtime_s"] = time.perf_counter() - t0
    rec.finalize()
    # Descent residuals are only defined pathwise for noise-free runs recorded
    # every iteration.
    if (cfg.noise_var == 0.0 and cfg.record_every == 1 and sc is not None
            and cfg.iterations > 0):
        diagnostics.attach_descent_residuals(rec, problem.smoothness(), sc)
    return rec
