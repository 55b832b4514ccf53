"""Config-driven experiment runner.

Configs are TOML files with sections [experiment], [problem], [schedule],
[thresholds], [output], plus optional kind-specific sections ([girsanov],
[quadrature], [moments], [zvonkin], [tail]).  ``run`` assembles the problem
from the coefficient catalogue, executes the requested experiment kind,
evaluates every configured threshold, and writes a JSON report and a CSV
table atomically (write to a temp name, then rename).

Reports are pure functions of (config, seed): chunking, stream derivation,
and reductions are all worker-count independent, so rerunning with a
different ``workers`` value reproduces the output files byte for byte.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from ._version import __version__
from .coefficients import (
    ProblemSpec,
    builtin_diffusion,
    builtin_drift,
    builtin_test_function,
)
from .errors import ConfigError
from .estimators import (
    RateFit,
    fit_rate,
    girsanov_moments,
    moment_scaling,
    node_moment_sup,
    quadrature_decay,
    strong_error_curve,
    tail_probability,
)
from .zvonkin1d import norm_decay_sweep, residual_decay_curve, solve_resolvent

OUT_ENV_VAR = "EMRATES_OUT"
REPORT_FORMAT_VERSION = 1

KINDS = ("convergence", "quadrature", "moments", "girsanov", "tail", "zvonkin", "all")
CSV_COLUMNS = ("experiment", "n", "estimate", "std_error", "replicas", "p", "seed")

# probability that a standard normal increment over one unit step exceeds 1
_TAIL_P0 = 0.3173105078629141


@dataclass
class ExperimentConfig:
    kind: str
    label: str
    problem: dict
    schedule: dict
    thresholds: dict
    output: dict
    extra: dict  # kind-specific sections, keyed by section name
    raw: dict
    path: str = ""

    def build_problem(self) -> ProblemSpec:
        p = self.problem
        d = int(p.get("d", 1))
        drift = builtin_drift(p.get("drift", "power"), p.get("drift_params", {}), d)
        diffusion = builtin_diffusion(
            p.get("diffusion", "identity"), p.get("diffusion_params", {}), d
        )
        x0 = p.get("x0", 0.0)
        x0 = [float(x0)] * d if isinstance(x0, (int, float)) else [float(v) for v in x0]
        return ProblemSpec(drift, diffusion, np.array(x0), float(p.get("T", 1.0)))


@dataclass
class ExperimentReport:
    kind: str
    label: str
    seed: int
    workers: int
    passed: bool
    verdicts: dict  # threshold name -> {"threshold": x, "value": y, "passed": bool}
    rows: list  # dicts with the CSV_COLUMNS keys
    tables: dict  # kind-specific detail, JSON-ready
    config_echo: dict
    wall_time_s: float = 0.0
    version: str = __version__
    format_version: int = REPORT_FORMAT_VERSION
    paths: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _jsonable(
            {
                "format_version": self.format_version,
                "version": self.version,
                "kind": self.kind,
                "label": self.label,
                "master_seed": self.seed,
                "workers": self.workers,
                "passed": self.passed,
                "verdicts": self.verdicts,
                "rows": self.rows,
                "tables": self.tables,
                "config": self.config_echo,
                "wall_time_s": self.wall_time_s,
            }
        )


def _jsonable(obj):
    """Recursively convert report values to JSON-safe builtins."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def load_config(path) -> ExperimentConfig:
    """Parse a TOML experiment config; raises ConfigError on bad structure."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    exp = raw.get("experiment", {})
    if not isinstance(exp, dict) or "kind" not in exp:
        raise ConfigError("config needs an [experiment] section with a 'kind' key")
    known = {"experiment", "problem", "schedule", "thresholds", "output"}
    extra = {k: v for k, v in raw.items() if k not in known}
    return ExperimentConfig(
        kind=str(exp["kind"]),
        label=str(exp.get("label", exp["kind"])),
        problem=dict(raw.get("problem", {})),
        schedule=dict(raw.get("schedule", {})),
        thresholds=dict(raw.get("thresholds", {})),
        output=dict(raw.get("output", {})),
        extra=extra,
        raw=raw,
        path=str(path),
    )


def _moment_threshold_keys(config: ExperimentConfig) -> set:
    keys = {"max_sup_ratio"}
    for p in config.extra.get("moments", {}).get("p_list", [2.0, 4.0]):
        keys |= {f"slope_min_p{p:g}", f"slope_max_p{p:g}"}
    return keys


def _recognized_thresholds(config: ExperimentConfig, kind: str) -> set:
    if kind == "convergence":
        return {"min_slope", "max_slope_stderr"}
    if kind == "quadrature":
        return {"min_slope"}
    if kind == "moments":
        return _moment_threshold_keys(config)
    if kind == "girsanov":
        return {"max_mean_dev_se", "max_second_moment_ratio"}
    if kind == "tail":
        return {"max_exceedances_at_max_n", "binomial_z"}
    if kind == "zvonkin":
        return {"min_residual_slope", "require_monotone_du", "max_boundary_shift_pct"}
    # kind == "all": sub-kind names prefix their own keys
    out = set()
    for sub in KINDS[:-1]:
        out |= {f"{sub}_{k}" for k in _recognized_thresholds(config, sub)}
    return out


def validate(config: ExperimentConfig) -> list:
    """Violation messages naming the offending keys; empty iff runnable."""
    msgs = []
    if config.kind not in KINDS:
        msgs.append(f"experiment.kind: unknown kind {config.kind!r}; known: {', '.join(KINDS)}")
        return msgs

    try:
        config.build_problem()
    except (KeyError, ValueError, TypeError) as exc:
        msgs.append(f"problem: {exc.args[0] if exc.args else exc}")

    sched = config.schedule
    n_list = sched.get("n_list", [])
    if not n_list or not all(isinstance(n, int) and n >= 1 for n in n_list):
        msgs.append("schedule.n_list: need a nonempty list of positive integers")
        n_list = []
    if len(set(n_list)) != len(n_list):
        msgs.append("schedule.n_list: duplicate entries")
    kinds = list(KINDS[:-1]) if config.kind == "all" else [config.kind]
    if "convergence" in kinds:
        fine_n = sched.get("fine_n", 0)
        for n in n_list:
            if fine_n % n != 0:
                msgs.append(f"schedule.fine_n: not a multiple of n={n}")
    if any(k in kinds for k in ("quadrature", "girsanov", "moments", "zvonkin")) and n_list:
        for n in n_list:
            if max(n_list) % n != 0:
                msgs.append(f"schedule.n_list: max(n_list) is not a multiple of n={n}")
    replicas = sched.get("replicas", 0)
    if not isinstance(replicas, int) or replicas < 2:
        msgs.append("schedule.replicas: need an integer >= 2")
    elif config.thresholds and replicas < 100:
        msgs.append("schedule.replicas: fewer than 100 replicas cannot back asserted thresholds")
    seed = sched.get("master_seed", 0)
    if not isinstance(seed, int) or not 0 <= seed < 2**64:
        msgs.append("schedule.master_seed: need an integer in [0, 2^64)")
    m_sub = sched.get("m_sub", 16)
    if not isinstance(m_sub, int) or m_sub < 2:
        msgs.append("schedule.m_sub: need an integer >= 2")

    recognized = _recognized_thresholds(config, config.kind)
    for name, value in config.thresholds.items():
        if name not in recognized:
            msgs.append(f"thresholds.{name}: not recognized for kind {config.kind!r}")
        elif not isinstance(value, (int, float)):
            msgs.append(f"thresholds.{name}: need a number, got {type(value).__name__}")
    if not config.thresholds:
        msgs.append("thresholds: empty; the report would assert nothing")

    if "quadrature" in kinds:
        q = config.extra.get("quadrature", {})
        try:
            builtin_test_function(
                q.get("f", "power"), q.get("f_params", {}),
                q.get("g", "one"), q.get("g_params", {}),
                int(config.problem.get("d", 1)),
            )
        except (KeyError, ValueError) as exc:
            msgs.append(f"quadrature: {exc.args[0] if exc.args else exc}")
    if "girsanov" in kinds:
        g = config.extra.get("girsanov", {})
        p_list = g.get("p_list", [1.0, 2.0])
        prefix = "girsanov_" if config.kind == "all" else ""
        if f"{prefix}max_mean_dev_se" in config.thresholds and 1.0 not in [float(p) for p in p_list]:
            msgs.append("girsanov.p_list: max_mean_dev_se needs moment order 1.0 in p_list")
        if f"{prefix}max_second_moment_ratio" in config.thresholds and 2.0 not in [
            float(p) for p in p_list
        ]:
            msgs.append("girsanov.p_list: max_second_moment_ratio needs moment order 2.0")
    if "tail" in kinds:
        prefix = "tail_" if config.kind == "all" else ""
        if f"{prefix}binomial_z" in config.thresholds and 1 not in n_list:
            msgs.append("schedule.n_list: binomial_z compares at n=1, which is missing")
    if "moments" in kinds and n_list:
        m = config.extra.get("moments", {})
        if "time_pairs" not in m and max(n_list) < 512:
            msgs.append(
                "moments.time_pairs: required when max(n_list) < 512 "
                "(default dyadic pairs cannot span two decades)"
            )
    if "zvonkin" in kinds:
        z = config.extra.get("zvonkin", {})
        lam_list = z.get("lambda_list", [1.0, 10.0, 100.0, 1000.0])
        if sorted(lam_list) != list(lam_list) or len(lam_list) < 4 or (
            min(lam_list) > 0 and max(lam_list) / min(lam_list) < 1000
        ):
            msgs.append("zvonkin.lambda_list: need >= 4 increasing values spanning 3 decades")
        if int(config.problem.get("d", 1)) != 1:
            msgs.append("problem.d: zvonkin experiments are one-dimensional")
    return msgs


# --- per-kind runners; each returns (rows, tables, verdicts) ---


def _verdict(value, threshold, passed) -> dict:
    return {"value": value, "threshold": threshold, "passed": bool(passed)}


def _curve_rows(name: str, curve, seed: int) -> list:
    return [
        {
            "experiment": name,
            "n": n,
            "estimate": r.estimate,
            "std_error": r.std_error,
            "replicas": r.replicas,
            "p": r.p,
            "seed": seed,
        }
        for n, r in curve.points
    ]


def _fit_or_exact(curve):
    """RateFit for a curve, or None when the scheme error carries no signal.

    Coupled levels of an exact scheme differ only in summation order, so
    their distance sits at rounding level (~1e-16) instead of exactly zero;
    anything below 1e-12 is reported as exact rather than fed to the
    regression.
    """
    if all(r.estimate < 1e-12 for _, r in curve.points):
        return None
    return fit_rate(curve)


def _fit_table(fit: RateFit | None) -> dict:
    if fit is None:
        return {"exact_scheme": True}
    return {
        "slope": fit.slope,
        "intercept": fit.intercept,
        "slope_stderr": fit.slope_stderr,
        "r_squared": fit.r_squared,
        "n_used": fit.n_used,
        "n_excluded": fit.n_excluded,
    }


def _slope_verdicts(fit: RateFit | None, thr: dict, prefix: str, stderr_key: bool) -> dict:
    verdicts = {}
    key = f"{prefix}min_slope"
    if key in thr:
        if fit is None:
            verdicts[key] = _verdict("exact", thr[key], True)
        else:
            verdicts[key] = _verdict(fit.slope, thr[key], fit.slope >= thr[key])
    key = f"{prefix}max_slope_stderr"
    if stderr_key and key in thr:
        if fit is None:
            verdicts[key] = _verdict("exact", thr[key], True)
        else:
            verdicts[key] = _verdict(fit.slope_stderr, thr[key], fit.slope_stderr <= thr[key])
    return verdicts


def _run_convergence(config, problem, seed, workers, prefix):
    s = config.schedule
    curve = strong_error_curve(
        problem, s["n_list"], s["fine_n"], float(s.get("p", 2.0)),
        s["replicas"], seed, workers,
    )
    fit = _fit_or_exact(curve)
    rows = _curve_rows("convergence", curve, seed)
    return rows, {"fit": _fit_table(fit)}, _slope_verdicts(fit, config.thresholds, prefix, True)


def _run_quadrature(config, problem, seed, workers, prefix):
    s = config.schedule
    q = config.extra.get("quadrature", {})
    tf = builtin_test_function(
        q.get("f", "power"), q.get("f_params", {}),
        q.get("g", "one"), q.get("g_params", {}), problem.d,
    )
    curve = quadrature_decay(
        problem, tf, s["n_list"], int(s.get("m_sub", 16)), float(s.get("p", 2.0)),
        s["replicas"], seed, driftless=bool(q.get("driftless", True)), workers=workers,
    )
    fit = _fit_or_exact(curve)
    rows = _curve_rows("quadrature", curve, seed)
    tables = {"fit": _fit_table(fit), "test_function": tf.label}
    return rows, tables, _slope_verdicts(fit, config.thresholds, prefix, False)


def _run_moments(config, problem, seed, workers, prefix):
    s = config.schedule
    m = config.extra.get("moments", {})
    p_list = [float(p) for p in m.get("p_list", [2.0, 4.0])]
    pairs = m.get("time_pairs")
    n_list = list(s["n_list"])
    n_top = max(n_list)
    rows, tables, verdicts = [], {"fits": {}}, {}
    thr = config.thresholds
    for p in p_list:
        ms = moment_scaling(problem, n_top, p, s["replicas"], seed, time_pairs=pairs, workers=workers)
        tables["fits"][f"p{p:g}"] = _fit_table(ms.fit)
        for res in ms.moments:
            rows.append(
                {
                    "experiment": f"moments_p{p:g}",
                    # the gap t - s mapped to an equivalent step count T/(t-s)
                    "n": round(problem.T / res.metadata["gap"]),
                    "estimate": res.estimate,
                    "std_error": res.std_error,
                    "replicas": res.replicas,
                    "p": p,
                    "seed": seed,
                }
            )
        lo_key, hi_key = f"{prefix}slope_min_p{p:g}", f"{prefix}slope_max_p{p:g}"
        if lo_key in thr:
            verdicts[lo_key] = _verdict(ms.fit.slope, thr[lo_key], ms.fit.slope >= thr[lo_key])
        if hi_key in thr:
            verdicts[hi_key] = _verdict(ms.fit.slope, thr[hi_key], ms.fit.slope <= thr[hi_key])
    sup_p = float(m.get("sup_p", 2.0))
    sups = [(n, node_moment_sup(problem, n, sup_p, s["replicas"], seed, workers)) for n in n_list]
    for n, res in sups:
        rows.append(
            {
                "experiment": "moments_sup",
                "n": n,
                "estimate": res.estimate,
                "std_error": res.std_error,
                "replicas": res.replicas,
                "p": sup_p,
                "seed": seed,
            }
        )
    estimates = [res.estimate for _, res in sups]
    ratio = max(estimates) / min(estimates) if min(estimates) > 0 else math.inf
    tables["sup_moment_ratio"] = ratio
    key = f"{prefix}max_sup_ratio"
    if key in thr:
        verdicts[key] = _verdict(ratio, thr[key], ratio < thr[key])
    return rows, tables, verdicts


def _run_girsanov(config, problem, seed, workers, prefix):
    s = config.schedule
    g = config.extra.get("girsanov", {})
    q = float(g.get("q", 1.0))
    p_list = [float(p) for p in g.get("p_list", [1.0, 2.0])]
    results = girsanov_moments(problem, q, p_list, s["n_list"], s["replicas"], seed, workers)
    rows = [
        {
            "experiment": "girsanov",
            "n": r.metadata["n"],
            "estimate": r.estimate,
            "std_error": r.std_error,
            "replicas": r.replicas,
            "p": r.p,
            "seed": seed,
        }
        for r in results
    ]
    tables = {
        "q": q,
        "overflow": any(r.metadata["overflow"] for r in results),
        "max_log_weight": max(r.metadata["max_log_weight"] for r in results),
    }
    thr = config.thresholds
    verdicts = {}
    key = f"{prefix}max_mean_dev_se"
    if key in thr:
        means = [r for r in results if r.p == 1.0]
        worst = max(
            (abs(r.estimate - 1.0) / r.std_error if r.std_error > 0 else math.inf)
            for r in means
        )
        verdicts[key] = _verdict(worst, thr[key], worst <= thr[key])
    key = f"{prefix}max_second_moment_ratio"
    if key in thr:
        seconds = [r.estimate for r in results if r.p == 2.0]
        ratio = max(seconds) / min(seconds) if min(seconds) > 0 else math.inf
        verdicts[key] = _verdict(ratio, thr[key], ratio < thr[key])
    return rows, tables, verdicts


def _run_tail(config, problem, seed, workers, prefix):
    s = config.schedule
    n_list = list(s["n_list"])
    results = [
        (n, tail_probability(problem.diffusion, n, s["replicas"], seed, T=problem.T,
                             x0=problem.x0, workers=workers))
        for n in n_list
    ]
    rows = [
        {
            "experiment": "tail",
            "n": n,
            "estimate": r.estimate,
            "std_error": r.std_error,
            "replicas": r.replicas,
            "p": r.p,
            "seed": seed,
        }
        for n, r in results
    ]
    tables = {"exceedances": {str(n): r.metadata["exceedances"] for n, r in results}}
    thr = config.thresholds
    verdicts = {}
    key = f"{prefix}max_exceedances_at_max_n"
    if key in thr:
        _, r_top = max(results, key=lambda item: item[0])
        count = r_top.metadata["exceedances"]
        verdicts[key] = _verdict(count, thr[key], count <= thr[key])
    key = f"{prefix}binomial_z"
    if key in thr:
        r1 = dict(results)[1]
        halfwidth = thr[key] * math.sqrt(_TAIL_P0 * (1 - _TAIL_P0) / r1.replicas)
        dev = abs(r1.estimate - _TAIL_P0)
        tables["n1_ci_halfwidth"] = halfwidth
        verdicts[key] = _verdict(dev, halfwidth, dev <= halfwidth)
    return rows, tables, verdicts


def _run_zvonkin(config, problem, seed, workers, prefix):
    s = config.schedule
    z = config.extra.get("zvonkin", {})
    lam_list = [float(v) for v in z.get("lambda_list", [1.0, 10.0, 100.0, 1000.0])]
    radius = float(z.get("radius", 8.0))
    h = float(z.get("h", 1e-3))
    sweep = norm_decay_sweep(problem.drift, problem.diffusion, lam_list, radius, h)
    lam_res = float(z.get("residual_lambda", 1.0))
    solution = solve_resolvent(problem.drift, problem.diffusion, lam_res, radius, h)
    curve = residual_decay_curve(
        problem, solution, s["n_list"], int(z.get("residual_m_sub", 4)),
        float(s.get("p", 2.0)), s["replicas"], seed, workers,
    )
    fit = _fit_or_exact(curve)
    rows = _curve_rows("zvonkin", curve, seed)
    tables = {
        "norm_sweep": [{"lam": l, "du_sup": d1, "d2u_sup": d2} for l, d1, d2 in sweep],
        "residual_lambda": lam_res,
        "solver_residual": solution.residual,
        "fit": _fit_table(fit),
    }
    thr = config.thresholds
    verdicts = {}
    key = f"{prefix}min_residual_slope"
    if key in thr:
        if fit is None:
            verdicts[key] = _verdict("exact", thr[key], True)
        else:
            verdicts[key] = _verdict(fit.slope, thr[key], fit.slope >= thr[key])
    key = f"{prefix}require_monotone_du"
    if key in thr:
        dus = [d1 for _, d1, _ in sweep]
        monotone = all(a > b for a, b in zip(dus, dus[1:]))
        verdicts[key] = _verdict(monotone, thr[key], monotone or not thr[key])
    key = f"{prefix}max_boundary_shift_pct"
    if key in thr:
        lam_top = lam_list[-1]
        base = solve_resolvent(problem.drift, problem.diffusion, lam_top, radius, h)
        wide = solve_resolvent(problem.drift, problem.diffusion, lam_top, 2 * radius, h)
        shift = 100.0 * abs(base.norms["du_sup"] - wide.norms["du_sup"]) / wide.norms["du_sup"]
        tables["boundary_shift_pct"] = shift
        verdicts[key] = _verdict(shift, thr[key], shift < thr[key])
    return rows, tables, verdicts


_RUNNERS = {
    "convergence": _run_convergence,
    "quadrature": _run_quadrature,
    "moments": _run_moments,
    "girsanov": _run_girsanov,
    "tail": _run_tail,
    "zvonkin": _run_zvonkin,
}


def _write_atomic(path: str, data: bytes) -> None:
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _csv_bytes(rows: list) -> bytes:
    lines = [",".join(CSV_COLUMNS)]
    for row in rows:
        cells = []
        for col in CSV_COLUMNS:
            v = row[col]
            if isinstance(v, str):
                cells.append(v)
            elif isinstance(v, (int, np.integer)):
                cells.append(str(int(v)))
            else:
                # repr of the exact double, so files are byte-reproducible
                cells.append(repr(float(v)))
        lines.append(",".join(cells))
    return ("\n".join(lines) + "\n").encode()


def run(
    config: ExperimentConfig,
    seed: int | None = None,
    workers: int = 1,
    out_dir: str | None = None,
) -> ExperimentReport:
    """Execute one config and write its artifacts.

    ``seed``/``out_dir`` override the config's master_seed and output
    directory; ``workers`` never changes the numbers, only the wall time.
    """
    violations = validate(config)
    if violations:
        raise ConfigError("; ".join(violations))
    problem = config.build_problem()
    seed = config.schedule.get("master_seed", 0) if seed is None else int(seed)

    start = time.monotonic()
    rows, tables, verdicts = [], {}, {}
    if config.kind == "all":
        for sub in KINDS[:-1]:
            sub_rows, sub_tables, sub_verdicts = _RUNNERS[sub](
                config, problem, seed, workers, prefix=f"{sub}_"
            )
            rows.extend(sub_rows)
            tables[sub] = sub_tables
            verdicts.update(sub_verdicts)
    else:
        rows, tables, verdicts = _RUNNERS[config.kind](
            config, problem, seed, workers, prefix=""
        )
    passed = all(v["passed"] for v in verdicts.values())
    report = ExperimentReport(
        kind=config.kind,
        label=config.label,
        seed=seed,
        workers=workers,
        passed=passed,
        verdicts=verdicts,
        rows=rows,
        tables=tables,
        config_echo=config.raw,
        wall_time_s=time.monotonic() - start,
    )

    out_dir = out_dir or config.output.get("directory") or os.environ.get(OUT_ENV_VAR, ".")
    formats = config.output.get("formats", ["json", "csv"])
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.join(out_dir, config.label.replace(" ", "_") or config.kind)
    if "csv" in formats:
        path = f"{stem}.csv"
        _write_atomic(path, _csv_bytes(rows))
        report.paths["csv"] = path
    if "json" in formats:
        path = f"{stem}.json"
        payload = json.dumps(report.to_dict(), indent=2, sort_keys=True).encode() + b"\n"
        _write_atomic(path, payload)
        report.paths["json"] = path
    return report


def run_path(path, seed=None, workers: int = 1, out_dir=None) -> ExperimentReport:
    return run(load_config(path), seed=seed, workers=workers, out_dir=out_dir)


__all__ = [
    "ExperimentConfig",
    "ExperimentReport",
    "load_config",
    "validate",
    "run",
    "run_path",
]
