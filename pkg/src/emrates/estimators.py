"""Monte Carlo estimators for scheme-error decay rates.

Every estimator draws replica i from the stream (seed, i), processes
replicas in fixed-size chunks, and reduces per-replica statistics in
replica order.  Chunk boundaries depend only on the problem size, never on
the worker count, so output bytes are reproducible for a pinned seed no
matter how the work is distributed.

L^p errors are reported with delta-method standard errors: for the sample
mean m of |D|^p, se(m^{1/p}) = m^{1/p-1} se(m) / p.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .brownian import TimeGrid, block_sum, derive_stream, sample_increment_batch
from .coefficients import DiffusionSpec, ProblemSpec, TestFunctionSpec
from .scheme import (
    _girsanov_sums,
    _matvec,
    _quadrature,
    _simulate_nodes,
    _simulate_terminal,
)

_CHUNK_TARGET = 1 << 23  # ~64 MB of doubles per chunk of increments


@dataclass
class MonteCarloResult:
    """One scalar estimate with its standard error.

    ``p`` is the moment order the estimate refers to (L^p norm order for
    error estimates, plain moment order where metadata says so).
    """

    estimate: float
    std_error: float
    replicas: int
    p: float
    metadata: dict = field(default_factory=dict)


@dataclass
class StrongErrorCurve:
    """Estimates of one decaying quantity over a grid of step counts."""

    label: str
    p: float
    seed: int
    points: list  # [(n, MonteCarloResult)]
    metadata: dict = field(default_factory=dict)

    def ns(self) -> list:
        return [n for n, _ in self.points]

    def estimates(self) -> list:
        return [r.estimate for _, r in self.points]

    def std_errors(self) -> list:
        return [r.std_error for _, r in self.points]


@dataclass
class RateFit:
    """Least-squares line through (log n, log estimate).

    ``slope`` is reported as a positive decay rate (the regression slope,
    negated) unless the producer documents otherwise.  Points whose
    estimates sit inside their own noise are excluded and listed.
    """

    slope: float
    intercept: float
    slope_stderr: float
    r_squared: float
    n_used: list
    n_excluded: list
    label: str = ""


@dataclass
class MomentScaling:
    """Increment-moment regression and the node-wise moment maximum."""

    n: int
    p: float
    pairs: list  # [(s, t)]
    moments: list  # MonteCarloResult per pair, plain moment E|X_t - X_s|^p
    fit: RateFit  # growth order vs the gap t - s (positive slope, ~ p/2)
    sup_moment: MonteCarloResult


def _chunk_ranges(replicas: int, elems_per_replica: int) -> list:
    """Fixed chunking by memory footprint; independent of worker count."""
    size = max(128, min(32768, _CHUNK_TARGET // max(elems_per_replica, 1)))
    return [(lo, min(lo + size, replicas)) for lo in range(0, replicas, size)]


def _run_tasks(worker, tasks, workers: int) -> list:
    if workers <= 1 or len(tasks) <= 1:
        return [worker(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(worker, tasks))


def _mean_se(samples: np.ndarray) -> tuple[float, float]:
    if samples.size < 2:
        raise ValueError("need at least 2 replicas for a standard error")
    return float(np.mean(samples)), float(np.std(samples, ddof=1) / math.sqrt(samples.size))


def _lp_result(powers: np.ndarray, p: float, metadata: dict) -> MonteCarloResult:
    """L^p estimate from per-replica |D|^p samples."""
    m, se_m = _mean_se(powers)
    n = int(powers.size)
    if m == 0.0:
        # every replica produced exactly zero; the p-th root is an exact zero
        return MonteCarloResult(0.0, 0.0, n, p, {**metadata, "exact_zero": True})
    est = m ** (1.0 / p)
    return MonteCarloResult(est, est / (p * m) * se_m, n, p, metadata)


def _validate_curve_args(n_list, p: float, replicas: int) -> list:
    ns = list(n_list)
    if not ns or sorted(set(ns)) != sorted(ns):
        raise ValueError(f"n_list must be nonempty without duplicates, got {n_list}")
    if any(n < 1 for n in ns):
        raise ValueError(f"step counts must be positive, got {n_list}")
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    if replicas < 2:
        raise ValueError(f"need at least 2 replicas, got {replicas}")
    return ns


# --- chunk workers (module level so they pickle for process pools) ---


def _strong_chunk(task):
    problem, ns, fine_n, p, seed, lo, hi = task
    grid = TimeGrid(fine_n, problem.T)
    inc = sample_increment_batch(seed, lo, hi - lo, grid, problem.d)
    x_fine = _simulate_terminal(problem.drift, problem.diffusion, problem.x0, inc, grid.dt)
    out = np.empty((hi - lo, len(ns)))
    for i, n in enumerate(ns):
        cinc = block_sum(inc, fine_n // n)
        x_coarse = _simulate_terminal(
            problem.drift, problem.diffusion, problem.x0, cinc, problem.T / n
        )
        out[:, i] = np.linalg.norm(x_fine - x_coarse, axis=-1) ** p
    return out


def _quad_chunk(task):
    problem, tf, ns, m_sub, p, driftless, seed, lo, hi = task
    nf_global = max(ns) * m_sub
    grid = TimeGrid(nf_global, problem.T)
    inc = sample_increment_batch(seed, lo, hi - lo, grid, problem.d)
    drift = None if driftless else problem.drift
    out = np.empty((hi - lo, len(ns)))
    for i, n in enumerate(ns):
        nf = n * m_sub
        einc = block_sum(inc, nf_global // nf)
        dt_f = problem.T / nf
        weights = np.full(nf, dt_f)
        acc = _quadrature(
            drift, problem.diffusion, problem.x0, einc, m_sub, dt_f, problem.T / n,
            tf.f, tf.g, weights,
        )
        out[:, i] = np.abs(acc) ** p
    return out


def _crude_chunk(task):
    problem, tf, n, m_sub, p, driftless, weights, seed, lo, hi = task
    nf = n * m_sub
    grid = TimeGrid(nf, problem.T)
    inc = sample_increment_batch(seed, lo, hi - lo, grid, problem.d)
    drift = None if driftless else problem.drift
    acc = _quadrature(
        drift, problem.diffusion, problem.x0, inc, m_sub, grid.dt, problem.T / n,
        tf.f, tf.g, weights,
    )
    return np.abs(acc) ** p


def _girsanov_chunk(task):
    problem, q, ns, seed, lo, hi = task
    n_max = max(ns)
    grid = TimeGrid(n_max, problem.T)
    inc = sample_increment_batch(seed, lo, hi - lo, grid, problem.d)
    out = np.empty((hi - lo, len(ns)))
    for i, n in enumerate(ns):
        cinc = block_sum(inc, n_max // n)
        _, s1, s2 = _girsanov_sums(
            problem.drift, problem.diffusion, problem.x0, cinc, problem.T / n
        )
        out[:, i] = q * s1 - 0.5 * q * q * s2
    return out


def _moment_chunk(task):
    problem, n, p, pair_idx, seed, lo, hi = task
    grid = TimeGrid(n, problem.T)
    inc = sample_increment_batch(seed, lo, hi - lo, grid, problem.d)
    nodes = _simulate_nodes(problem.drift, problem.diffusion, problem.x0, inc, grid.dt)
    gaps = np.empty((hi - lo, len(pair_idx)))
    for i, (ks, kt) in enumerate(pair_idx):
        gaps[:, i] = np.linalg.norm(nodes[:, kt] - nodes[:, ks], axis=-1) ** p
    node_pow = np.linalg.norm(nodes, axis=-1) ** p  # (B, n+1)
    return gaps, node_pow.sum(axis=0), (node_pow**2).sum(axis=0)


def _tail_chunk(task):
    diffusion, n, T, x0, k, elapsed, seed, lo, hi = task
    d = diffusion.d
    grid = TimeGrid(n, T)
    batch = hi - lo
    z = np.empty((batch, n, d))
    z_extra = np.empty((batch, d))
    for i in range(batch):
        gen = derive_stream(seed, lo + i).generator()
        z[i] = gen.standard_normal((n, d))
        z_extra[i] = gen.standard_normal(d)
    if elapsed == 0.0:
        return np.zeros(batch, dtype=bool)
    if k > 0:
        inc = z[:, :k] * math.sqrt(grid.dt)
        y = _simulate_terminal(None, diffusion, x0, inc, grid.dt)
    else:
        y = np.broadcast_to(x0, (batch, d)).copy()
    sig = np.asarray(diffusion(y))
    dy = _matvec(sig, z_extra * math.sqrt(elapsed))
    return np.linalg.norm(dy, axis=-1) > 1.0


# --- public estimators ---


def strong_error_curve(
    problem: ProblemSpec,
    n_list,
    fine_n: int,
    p: float,
    replicas: int,
    seed: int,
    workers: int = 1,
    label: str = "strong_error",
) -> StrongErrorCurve:
    """L^p distance at time T between coarse schemes and a fine reference.

    All step counts are coupled through one fine path per replica: each
    coarse scheme consumes exact block sums of the same increments.
    """
    ns = _validate_curve_args(n_list, p, replicas)
    for n in ns:
        if fine_n % n != 0:
            raise ValueError(f"fine_n={fine_n} is not a multiple of n={n}")
    tasks = [
        (problem, tuple(ns), fine_n, p, seed, lo, hi)
        for lo, hi in _chunk_ranges(replicas, fine_n * problem.d)
    ]
    powers = np.vstack(_run_tasks(_strong_chunk, tasks, workers))
    points = [
        (n, _lp_result(powers[:, i], p, {"n": n, "fine_n": fine_n, "T": problem.T}))
        for i, n in enumerate(ns)
    ]
    return StrongErrorCurve(label, p, seed, points, {"fine_n": fine_n, "replicas": replicas})


def strong_error(
    problem: ProblemSpec,
    coarse_n: int,
    fine_n: int,
    p: float,
    replicas: int,
    seed: int,
    workers: int = 1,
) -> MonteCarloResult:
    """Single-point strong error; see :func:`strong_error_curve`."""
    return strong_error_curve(problem, [coarse_n], fine_n, p, replicas, seed, workers).points[0][1]


def quadrature_decay(
    problem: ProblemSpec,
    test_fn: TestFunctionSpec,
    n_list,
    m_sub: int,
    p: float,
    replicas: int,
    seed: int,
    driftless: bool = False,
    workers: int = 1,
) -> StrongErrorCurve:
    """L^p size of the occupation-time functional at T as n grows.

    Each replica draws one path at max(n) * m_sub steps; every level reads
    coarsened copies of it.  ``driftless=True`` runs the scheme without its
    drift (the measure-change companion process).
    """
    ns = _validate_curve_args(n_list, p, replicas)
    if m_sub < 2:
        raise ValueError(f"m_sub must be >= 2 to see within-step gaps, got {m_sub}")
    if test_fn.d != problem.d:
        raise ValueError("test function dimension does not match the problem")
    for n in ns:
        if max(ns) % n != 0:
            raise ValueError(f"every n must divide max(n_list); {n} does not divide {max(ns)}")
    tasks = [
        (problem, test_fn, tuple(ns), m_sub, p, driftless, seed, lo, hi)
        for lo, hi in _chunk_ranges(replicas, max(ns) * m_sub * problem.d)
    ]
    powers = np.vstack(_run_tasks(_quad_chunk, tasks, workers))
    points = [
        (n, _lp_result(powers[:, i], p, {"n": n, "m_sub": m_sub, "driftless": driftless}))
        for i, n in enumerate(ns)
    ]
    return StrongErrorCurve(
        "quadrature", p, seed, points,
        {"m_sub": m_sub, "driftless": driftless, "f": test_fn.label, "replicas": replicas},
    )


def crude_quadrature_bound(
    problem: ProblemSpec,
    test_fn: TestFunctionSpec,
    n: int,
    s: float,
    t: float,
    p: float,
    replicas: int,
    seed: int,
    m_sub: int = 16,
    driftless: bool = False,
    workers: int = 1,
) -> MonteCarloResult:
    """L^p size of the functional over a window [s, t] at fixed n.

    The window-proportional bound predicts estimate <= C (t - s); the
    metadata carries the window so callers can form that ratio.
    """
    _validate_curve_args([n], p, replicas)
    if not 0.0 <= s < t <= problem.T:
        raise ValueError(f"window [{s}, {t}] must satisfy 0 <= s < t <= T={problem.T}")
    nf = n * m_sub
    nodes = TimeGrid(nf, problem.T).nodes()
    weights = np.clip(np.minimum(nodes[1:], t) - np.maximum(nodes[:-1], s), 0.0, None)
    tasks = [
        (problem, test_fn, n, m_sub, p, driftless, weights, seed, lo, hi)
        for lo, hi in _chunk_ranges(replicas, nf * problem.d)
    ]
    powers = np.concatenate(_run_tasks(_crude_chunk, tasks, workers))
    return _lp_result(
        powers, p, {"n": n, "m_sub": m_sub, "window": (s, t), "width": t - s}
    )


def girsanov_moments(
    problem: ProblemSpec,
    q: float,
    p_list,
    n_list,
    replicas: int,
    seed: int,
    workers: int = 1,
    log_cap: float = 700.0,
) -> list:
    """Table of E[Z_T(q, n)^p] estimates over p_list x n_list.

    Weights are accumulated in log space and exponentiated once per moment;
    a row is flagged (metadata ``overflow``) when p * max log-weight crosses
    ``log_cap``, i.e. when the plain mean would have overflowed.
    """
    ns = _validate_curve_args(n_list, 1.0, replicas)
    for n in ns:
        if max(ns) % n != 0:
            raise ValueError(f"every n must divide max(n_list); {n} does not divide {max(ns)}")
    tasks = [
        (problem, q, tuple(ns), seed, lo, hi)
        for lo, hi in _chunk_ranges(replicas, max(ns) * problem.d)
    ]
    log_weights = np.vstack(_run_tasks(_girsanov_chunk, tasks, workers))
    n_rep = log_weights.shape[0]
    rows = []
    for i, n in enumerate(ns):
        lw = log_weights[:, i]
        for p in p_list:
            logs = p * lw
            peak = float(np.max(logs))
            log_m1 = float(logsumexp(logs)) - math.log(n_rep)
            log_m2 = float(logsumexp(2.0 * logs)) - math.log(n_rep)
            m1 = math.exp(log_m1) if log_m1 < 709 else math.inf
            # var = m2 (1 - m1^2/m2), stable when m2 is representable
            ratio = math.exp(min(2.0 * log_m1 - log_m2, 0.0))
            var = math.exp(log_m2) * (1.0 - ratio) if log_m2 < 709 else math.inf
            se = math.sqrt(max(var, 0.0) / (n_rep - 1)) if math.isfinite(var) else math.inf
            rows.append(
                MonteCarloResult(
                    m1, se, n_rep, float(p),
                    {"n": n, "q": q, "moment": float(p), "max_log_weight": peak,
                     "overflow": peak > log_cap},
                )
            )
    return rows


def moment_scaling(
    problem: ProblemSpec,
    n: int,
    p: float,
    replicas: int,
    seed: int,
    time_pairs=None,
    workers: int = 1,
) -> MomentScaling:
    """Increment moments E|X^n_t - X^n_s|^p over node pairs, plus sup_t E|X^n_t|^p.

    Default pairs fix s = 0 and take t = 2^j T / n up to T/4, keeping the
    gaps in the diffusive regime; the pair set must span at least two
    decades for the growth fit to mean anything.
    """
    _validate_curve_args([n], p, replicas)
    grid = TimeGrid(n, problem.T)
    if time_pairs is None:
        js, j = [], 1
        while j <= n // 4:
            js.append(j)
            j *= 2
        pair_idx = [(0, j) for j in js]
    else:
        pair_idx = []
        for s, t in time_pairs:
            ks, kt = round(s / grid.dt), round(t / grid.dt)
            for name, val, k in (("s", s, ks), ("t", t, kt)):
                if abs(val - k * grid.dt) > 1e-9 * problem.T:
                    raise ValueError(f"{name}={val} is not a node of the n={n} grid")
            if not 0 <= ks < kt <= n:
                raise ValueError(f"pair ({s}, {t}) is not ordered inside [0, T]")
            pair_idx.append((ks, kt))
    if len(pair_idx) < 3:
        raise ValueError(f"need at least 3 time pairs for a growth fit, got {len(pair_idx)}")
    gaps = [(kt - ks) * grid.dt for ks, kt in pair_idx]
    if max(gaps) < 100 * min(gaps):
        raise ValueError(
            "time pairs must span at least two decades of gaps"
            + ("; the default dyadic pairs need n >= 512" if time_pairs is None else "")
        )

    tasks = [
        (problem, n, p, tuple(pair_idx), seed, lo, hi)
        for lo, hi in _chunk_ranges(replicas, n * problem.d)
    ]
    results = _run_tasks(_moment_chunk, tasks, workers)
    gap_powers = np.vstack([r[0] for r in results])
    node_sum = np.zeros(n + 1)
    node_sq = np.zeros(n + 1)
    for _, ns_, nq_ in results:  # chunk order: deterministic reduction
        node_sum += ns_
        node_sq += nq_

    n_rep = gap_powers.shape[0]
    moments = []
    for i, (ks, kt) in enumerate(pair_idx):
        mean, se = _mean_se(gap_powers[:, i])
        moments.append(
            MonteCarloResult(
                mean, se, n_rep, p,
                {"s": ks * grid.dt, "t": kt * grid.dt, "gap": gaps[i], "raw_moment": True},
            )
        )
    slope, intercept, slope_se, r2 = _ols_loglog(np.array(gaps), np.array([m.estimate for m in moments]))
    fit = RateFit(slope, intercept, slope_se, r2, [], [], label="moment_growth")

    node_mean = node_sum / n_rep
    k_star = int(np.argmax(node_mean))
    var = (node_sq[k_star] - n_rep * node_mean[k_star] ** 2) / (n_rep - 1)
    sup = MonteCarloResult(
        float(node_mean[k_star]),
        math.sqrt(max(var, 0.0) / n_rep),
        n_rep,
        p,
        {"node": k_star, "time": k_star * grid.dt, "raw_moment": True},
    )
    return MomentScaling(n, p, [(ks * grid.dt, kt * grid.dt) for ks, kt in pair_idx], moments, fit, sup)


def node_moment_sup(
    problem: ProblemSpec,
    n: int,
    p: float,
    replicas: int,
    seed: int,
    workers: int = 1,
) -> MonteCarloResult:
    """max over grid nodes of the raw moment E|X^n_t|^p, with its SE.

    Companion to :func:`moment_scaling` for step counts too coarse to host
    a two-decade pair regression.
    """
    _validate_curve_args([n], p, replicas)
    grid = TimeGrid(n, problem.T)
    tasks = [
        (problem, n, p, (), seed, lo, hi)
        for lo, hi in _chunk_ranges(replicas, n * problem.d)
    ]
    results = _run_tasks(_moment_chunk, tasks, workers)
    node_sum = np.zeros(n + 1)
    node_sq = np.zeros(n + 1)
    for _, ns_, nq_ in results:
        node_sum += ns_
        node_sq += nq_
    n_rep = sum(r[0].shape[0] for r in results)
    node_mean = node_sum / n_rep
    k_star = int(np.argmax(node_mean))
    var = (node_sq[k_star] - n_rep * node_mean[k_star] ** 2) / (n_rep - 1)
    return MonteCarloResult(
        float(node_mean[k_star]),
        math.sqrt(max(var, 0.0) / n_rep),
        n_rep,
        p,
        {"n": n, "node": k_star, "time": k_star * grid.dt, "raw_moment": True},
    )


def tail_probability(
    diffusion: DiffusionSpec,
    n: int,
    replicas: int,
    seed: int,
    r: float | None = None,
    T: float = 1.0,
    x0=None,
    workers: int = 1,
) -> MonteCarloResult:
    """Frequency of |Y_r - Y_{kappa(r)}| > 1 for the driftless scheme.

    Y runs to the freeze node kappa(r) on the n-step grid, then takes the
    partial increment to r.  When r is itself a node the gap is zero and
    the estimate is exactly 0.
    """
    if replicas < 2:
        raise ValueError(f"need at least 2 replicas, got {replicas}")
    grid = TimeGrid(n, T)
    r = T if r is None else float(r)
    if not 0.0 <= r <= T:
        raise ValueError(f"r={r} outside [0, {T}]")
    k = grid.kappa_index(r)
    elapsed = r - grid.node(k)
    x0 = np.zeros(diffusion.d) if x0 is None else np.atleast_1d(np.asarray(x0, dtype=float))
    tasks = [
        (diffusion, n, T, x0, k, elapsed, seed, lo, hi)
        for lo, hi in _chunk_ranges(replicas, n * diffusion.d)
    ]
    exceed = np.concatenate(_run_tasks(_tail_chunk, tasks, workers))
    count = int(np.sum(exceed))
    p_hat = count / replicas
    se = math.sqrt(p_hat * (1.0 - p_hat) / replicas)
    return MonteCarloResult(
        p_hat, se, replicas, 1.0,
        {"n": n, "r": r, "elapsed": elapsed, "exceedances": count},
    )


def _ols_loglog(x: np.ndarray, y: np.ndarray):
    lx, ly = np.log(x), np.log(y)
    xbar, ybar = lx.mean(), ly.mean()
    sxx = float(np.sum((lx - xbar) ** 2))
    if sxx == 0.0:
        raise ValueError("regression needs at least two distinct x values")
    slope = float(np.sum((lx - xbar) * (ly - ybar))) / sxx
    intercept = ybar - slope * xbar
    resid = ly - (intercept + slope * lx)
    rss = float(np.sum(resid**2))
    m = len(lx)
    slope_se = math.sqrt(rss / (m - 2) / sxx) if m > 2 else 0.0
    tss = float(np.sum((ly - ybar) ** 2))
    r2 = (1.0 - rss / tss) if tss > 0 else (1.0 if rss < 1e-24 else 0.0)
    return slope, float(intercept), slope_se, r2


def fit_rate(curve) -> RateFit:
    """Decay-rate fit for a curve of (n, estimate) points.

    Points with estimate <= 0 or estimate below 3x its own standard error
    carry no rate information and are excluded (listed in ``n_excluded``).
    The slope is the regression slope negated, so n^{-1/2} data fit to 0.5.
    """
    points = curve.points if isinstance(curve, StrongErrorCurve) else list(curve)
    used, excluded = [], []
    for n, res in points:
        if res.estimate <= 0 or res.estimate < 3.0 * res.std_error:
            excluded.append(n)
        else:
            used.append((n, res.estimate))
    if len(used) < 2:
        raise ValueError(
            f"only {len(used)} informative points after exclusion {excluded}; need >= 2"
        )
    ns = np.array([n for n, _ in used], dtype=float)
    es = np.array([e for _, e in used])
    slope, intercept, slope_se, r2 = _ols_loglog(ns, es)
    label = curve.label if isinstance(curve, StrongErrorCurve) else ""
    return RateFit(-slope, intercept, slope_se, r2, [int(n) for n in ns], excluded, label)
