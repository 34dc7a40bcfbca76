"""Config-driven experiment sweeps: load, execute, aggregate, compare.

A suite file is JSON: one shared problem (so every method sees the same
data), a seed list, defaults, and a list of runs.  Execution writes, under
the output directory::

    runs/<label>_seed<seed>.csv      per-run metric trajectories
    aggregates/<label>.csv           seed-averaged trajectories
    spectral/<label>.json            spectral report per (method, topology)
    figures/<metric>.png             seed-averaged curves
    summary.json                     plateau values and run metadata

Reruns with the same inputs produce byte-identical CSVs; summary.json holds
no wall-clock fields for the same reason.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diagnostics
from .diagnostics import RunRecord, average_records, plateau
from .errors import ConfigError, NumericOverflowError, UnstableMethodError
from .problems import make_problem
from .solvers import BASELINES, RunConfig, run
from .spectral import Method, method_matrices, spectral_constants
from .topology import ensure_psd, parse_topology

SUMMARY_VERSION = 1

_TOP_KEYS = {"name", "problem", "seeds", "defaults", "runs"}
_RUN_KEYS = {"label", "method", "topology", "iterations", "record_every",
             "noise_var", "schedule", "theorem_mode", "lambda_in"}
PLATEAU_METRICS = ("grad_norm_avg_sq", "avg_grad_norm_sq", "consensus_sq",
                   "subopt_avg", "subopt_mean")


@dataclass(frozen=True)
class ExperimentSuite:
    name: str
    problem: dict
    seeds: tuple[int, ...]
    runs: tuple[dict, ...]

    @property
    def labels(self) -> list[str]:
        return [r["label"] for r in self.runs]


def load_suite(path: str | Path) -> ExperimentSuite:
    """Parse and validate a suite file; unknown keys are rejected."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"suite file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return suite_from_dict(raw, origin=str(path))


def suite_from_dict(raw: dict, origin: str = "<dict>") -> ExperimentSuite:
    if not isinstance(raw, dict):
        raise ConfigError(f"{origin}: suite must be a JSON object")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"{origin}: unknown suite keys {sorted(unknown)}")
    for key in ("name", "problem", "seeds", "runs"):
        if key not in raw:
            raise ConfigError(f"{origin}: missing required key '{key}'")
    if not raw["runs"]:
        raise ConfigError(f"{origin}: suite has no runs")
    if not raw["seeds"]:
        raise ConfigError(f"{origin}: suite has no seeds")
    defaults = raw.get("defaults", {})
    bad = set(defaults) - (_RUN_KEYS - {"label"})
    if bad:
        raise ConfigError(f"{origin}: unknown default keys {sorted(bad)}")
    runs = []
    labels = set()
    for j, entry in enumerate(raw["runs"]):
        bad = set(entry) - _RUN_KEYS
        if bad:
            raise ConfigError(f"{origin}: run {j}: unknown keys {sorted(bad)}")
        merged = {**defaults, **entry}
        merged.setdefault("label", merged.get("method", f"run{j}"))
        for key in ("method", "topology", "iterations", "schedule"):
            if key not in merged:
                raise ConfigError(f"{origin}: run '{merged['label']}' missing '{key}'")
        if merged["label"] in labels:
            raise ConfigError(f"{origin}: duplicate run label '{merged['label']}'")
        labels.add(merged["label"])
        runs.append(merged)
    return ExperimentSuite(
        name=raw["name"],
        problem=dict(raw["problem"]),
        seeds=tuple(int(s) for s in raw["seeds"]),
        runs=tuple(runs),
    )


def _run_config(entry: dict, seed: int) -> RunConfig:
    return RunConfig(
        method=entry["method"],
        topology=entry["topology"],
        iterations=int(entry["iterations"]),
        schedule=entry["schedule"],
        noise_var=float(entry.get("noise_var", 0.0)),
        seed=seed,
        record_every=int(entry.get("record_every", 1)),
        theorem_mode=bool(entry.get("theorem_mode", True)),
        label=entry["label"],
    )


def spectral_report(topology: str, method: str, psd_shift: bool = True) -> dict:
    """Mixing and factorization constants for one (topology, method) pair."""
    cm = parse_topology(topology)
    report = {"topology": topology, "method": method, "n": cm.n,
              "lambda": cm.mixing_rate, "psd_shift_applied": False,
              "lambda_pre_shift": cm.mixing_rate}
    if method in BASELINES:
        return report
    m = Method(method)
    if m.needs_psd and psd_shift:
        cm, info = ensure_psd(cm)
        report.update({k: info[k] for k in ("psd_shift_applied", "lambda_pre_shift")})
        report["lambda"] = info["lambda"]
    sc = spectral_constants(method_matrices(m, cm), cm)
    report.update(gamma=sc.gamma, lambda_a=sc.lambda_a,
                  lambda_b_under=sc.lambda_b_under, v1=sc.v1, v2=sc.v2,
                  lambda_under=sc.lambda_under, upsilon=sc.upsilon)
    return report


def _execute_one(args) -> tuple[str, int, RunRecord | None, str | None]:
    entry, seed, problem, cache_dir = args
    cfg = _run_config(entry, seed)
    try:
        rec = run(cfg, problem=problem, cache_dir=cache_dir)
        return entry["label"], seed, rec, None
    except (NumericOverflowError, UnstableMethodError) as exc:
        return entry["label"], seed, None, f"{type(exc).__name__}: {exc}"


def execute_suite(suite: ExperimentSuite, out_dir: str | Path, jobs: int = 1,
                  figures: bool = True) -> tuple[dict, list[str]]:
    """Run every (config, seed) pair; returns (summary dict, failure messages).

    The suite's problem spec may omit ``n``; it is then taken from each run's
    topology, with one dataset per distinct size (same problem seed, so all
    methods on a given topology see identical data).
    """
    out = Path(out_dir)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    (out / "aggregates").mkdir(exist_ok=True)
    (out / "spectral").mkdir(exist_ok=True)
    cache_dir = out / "cache"

    sizes = {entry["label"]: parse_topology(entry["topology"]).n for entry in suite.runs}
    fixed_n = suite.problem.get("n")
    problems = {}
    for entry in suite.runs:
        n = sizes[entry["label"]]
        if fixed_n is not None and int(fixed_n) != n:
            raise ConfigError(
                f"run '{entry['label']}' topology has n={n} but the suite "
                f"problem pins n={fixed_n}")
        if n not in problems:
            problems[n] = make_problem({**suite.problem, "n": n}, cache_dir=cache_dir)

    tasks = [(entry, seed, problems[sizes[entry["label"]]], cache_dir)
             for entry in suite.runs for seed in suite.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_execute_one, tasks))
    else:
        results = [_execute_one(t) for t in tasks]

    by_label: dict[str, list[RunRecord]] = {}
    failures: list[str] = []
    for label, seed, rec, err in results:
        if err is not None:
            failures.append(f"{label} seed={seed}: {err}")
            continue
        rec.to_csv(out / "runs" / f"{label}_seed{seed}.csv")
        by_label.setdefault(label, []).append(rec)

    summary = {"version": SUMMARY_VERSION, "suite": suite.name,
               "seeds": list(suite.seeds), "problem": suite.problem, "runs": {}}
    aggregates: dict[str, dict[str, np.ndarray]] = {}
    for entry in suite.runs:
        label = entry["label"]
        recs = by_label.get(label, [])
        if not recs:
            continue
        agg = average_records(recs)
        aggregates[label] = agg
        _write_aggregate_csv(out / "aggregates" / f"{label}.csv", agg)
        report = spectral_report(entry["topology"], entry["method"])
        (out / "spectral" / f"{label}.json").write_text(
            json.dumps(report, indent=2, sort_keys=True))
        lam = report["lambda"]
        if "lambda_in" in entry:
            lo, hi = entry["lambda_in"]
            if not (lo <= lam <= hi):
                failures.append(
                    f"{label}: mixing rate {lam:.4f} outside requested [{lo}, {hi}]")
        summary["runs"][label] = {
            "method": entry["method"],
            "topology": entry["topology"],
            "lambda": lam,
            "lambda_pre_shift": report["lambda_pre_shift"],
            "psd_shift_applied": report["psd_shift_applied"],
            "iterations": int(entry["iterations"]),
            "seeds": [rec.meta["seed"] for rec in recs],
            "plateau": {m: plateau(agg[m]) for m in PLATEAU_METRICS
                        if not math.isnan(plateau(agg[m]))},
        }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))

    if figures and aggregates:
        from .figures import render_suite_figures
        render_suite_figures(aggregates, out / "figures", suite.name)
    return summary, failures


def _write_aggregate_csv(path: Path, agg: dict[str, np.ndarray]):
    cols = [c for c in diagnostics.CSV_COLUMNS]
    lines = [",".join(cols)]
    for j in range(agg["k"].size):
        cells = []
        for c in cols:
            v = agg[c][j]
            if c == "k":
                cells.append(str(int(v)))
            elif math.isnan(v):
                cells.append("nan")
            else:
                cells.append(format(v, ".17g"))
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Declarative comparisons over summaries
# ---------------------------------------------------------------------------

def load_summary(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"summary file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from exc


def _lookup(summaries: dict[str, dict], ref: str) -> dict:
    """Resolve 'label' or 'summary_name/label' into a run summary entry."""
    if "/" in ref:
        name, label = ref.split("/", 1)
        pools = [s for s in summaries.values() if s["suite"] == name]
    else:
        label = ref
        pools = list(summaries.values())
    for pool in pools:
        if label in pool["runs"]:
            return pool["runs"][label]
    raise ConfigError(f"no run '{ref}' in the provided summaries")


def compare(spec: dict, base_dir: str | Path = ".") -> dict:
    """Evaluate the assertions of a compare spec; returns a pass/fail report.

    Assertion kinds:

    * ``plateau_ratio_gt``: plateau(left) > factor * plateau(right)
    * ``plateau_le``:       plateau(left) <= factor * plateau(right)
    * ``lambda_in``:        run's mixing rate within [lo, hi]
    """
    base = Path(base_dir)
    paths = spec.get("summaries", [spec["summary"]] if "summary" in spec else [])
    if not paths:
        raise ConfigError("compare spec needs 'summary' or 'summaries'")
    summaries = {str(p): load_summary(base / p) for p in paths}
    results = []
    for item in spec.get("assertions", []):
        kind = item.get("kind")
        try:
            if kind in ("plateau_ratio_gt", "plateau_le"):
                metric = item["metric"]
                left = _lookup(summaries, item["left"])["plateau"]
                right = _lookup(summaries, item["right"])["plateau"]
                if metric not in left or metric not in right:
                    raise ConfigError(f"metric '{metric}' missing from summaries")
                factor = float(item.get("factor", 1.0))
                lv, rv = left[metric], right[metric]
                passed = lv > factor * rv if kind == "plateau_ratio_gt" else lv <= factor * rv
                detail = f"{lv:.6g} vs {factor} * {rv:.6g}"
            elif kind == "lambda_in":
                entry = _lookup(summaries, item["run"])
                lo, hi = float(item["lo"]), float(item["hi"])
                passed = lo <= entry["lambda"] <= hi
                detail = f"lambda={entry['lambda']:.6g} in [{lo}, {hi}]"
            else:
                raise ConfigError(f"unknown assertion kind '{kind}'")
            results.append({"assertion": item, "passed": bool(passed), "detail": detail})
        except ConfigError as exc:
            results.append({"assertion": item, "passed": False, "detail": str(exc)})
    return {"passed": all(r["passed"] for r in results), "assertions": results}
