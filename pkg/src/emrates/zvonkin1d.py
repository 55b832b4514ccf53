"""One-dimensional resolvent solves and the drift-removal identity check.

For lambda > 0 and the generator L = (1/2) a(x) d^2/dx^2 + b(x) d/dx, the
resolvent problem

    lambda u - L u = f   on (-R, R)

is solved with second-order finite differences on a piecewise-uniform mesh
(spacing h outside [-1, 1], h/2 inside, where irregular drifts keep their
kink).  With f = b, substituting the solution into Ito's formula removes
the drift from the dynamics:

    int_0^t b(X_s) ds = u(x0) - u(X_t) + lambda int_0^t u(X_s) ds
                        + int_0^t u'(X_s) sigma(X_s) dB_s,

which is checked pathwise on scheme paths via left-endpoint sums.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import LinAlgError, solve_banded

from .brownian import TimeGrid, block_sum, sample_increment_batch
from .coefficients import DiffusionSpec, DriftSpec, ProblemSpec
from .errors import DiscretizationError, EllipticityError, EvaluationError
from .estimators import StrongErrorCurve, _chunk_ranges, _lp_result, _run_tasks
from .scheme import EMPath


class _SpecField:
    """Scalar view of a d=1 DriftSpec: x (N,) -> b(x) (N,)."""

    def __init__(self, spec: DriftSpec):
        if spec.d != 1:
            raise ValueError("only one-dimensional drifts can be used here")
        self.spec = spec

    def __call__(self, x):
        return np.asarray(self.spec.evaluator(np.asarray(x, dtype=float)[..., None]))[..., 0]


class _DiffusionSquared:
    """a(x) = sigma(x)^2 for a d=1 DiffusionSpec."""

    def __init__(self, spec: DiffusionSpec):
        if spec.d != 1:
            raise ValueError("only one-dimensional diffusions can be used here")
        self.spec = spec

    def __call__(self, x):
        s = np.asarray(self.spec.evaluator(np.asarray(x, dtype=float)[..., None]))[..., 0, 0]
        return s * s


class _ConstField:
    def __init__(self, value: float):
        self.value = float(value)

    def __call__(self, x):
        return np.full(np.shape(x), self.value)


def _as_field(obj, what: str):
    if isinstance(obj, DriftSpec):
        return _SpecField(obj)
    if isinstance(obj, DiffusionSpec):
        return _DiffusionSquared(obj)
    if isinstance(obj, (int, float)):
        return _ConstField(obj)
    if callable(obj):
        return obj
    raise TypeError(f"{what} must be a coefficient spec, a callable, or a number")


def _mesh(radius: float, h: float) -> np.ndarray:
    if radius < 2:
        raise ValueError(f"radius must be >= 2, got {radius}")
    if not 0 < h <= 1e-2:
        raise ValueError(f"mesh width must lie in (0, 1e-2], got {h}")
    n_out = max(1, round((radius - 1.0) / h))
    n_in = max(2, round(4.0 / h))  # spacing h/2 on [-1, 1]
    left = np.linspace(-radius, -1.0, n_out + 1)
    mid = np.linspace(-1.0, 1.0, n_in + 1)
    right = np.linspace(1.0, radius, n_out + 1)
    return np.concatenate([left, mid[1:], right[1:]])


@dataclass
class ResolventSolution:
    """Mesh solution of lambda u - (1/2) a u'' - b u' = f with Dirichlet ends."""

    lam: float
    radius: float
    h: float
    x: np.ndarray
    u: np.ndarray
    du: np.ndarray
    d2u: np.ndarray
    boundary: tuple
    boundary_kind: str
    residual: float
    alpha_prime: float
    norms: dict = field(default_factory=dict)

    def _model(self):
        spline = self.__dict__.get("_spline")
        if spline is None:
            spline = CubicSpline(self.x, self.u)
            self.__dict__["_spline"] = spline
            self.__dict__["_dspline"] = spline.derivative()
        return spline, self.__dict__["_dspline"]

    def u_at(self, pts):
        return self._model()[0](pts)

    def du_at(self, pts):
        return self._model()[1](pts)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "u", "du", "d2u"])
            for row in zip(self.x, self.u, self.du, self.d2u):
                writer.writerow([repr(float(v)) for v in row])


def solve_resolvent(
    drift,
    a,
    lam: float,
    radius: float = 8.0,
    h: float = 1e-3,
    rhs=None,
    boundary="resolvent",
    alpha_prime: float = 0.25,
    tol_pde: float = 1e-6,
) -> ResolventSolution:
    """Solve lambda u - (1/2) a u'' - b u' = f on [-radius, radius].

    ``drift`` is the first-order coefficient b; ``rhs`` defaults to the same
    function (the drift-removal coupling).  ``a`` may be a DiffusionSpec
    (squared automatically), a callable, or a constant.  The default
    boundary pins u(+-R) to f(+-R)/lambda, the leading resolvent
    asymptotics; pass a pair (uL, uR) for explicit Dirichlet data.

    Raises DiscretizationError when the assembled stencil residual of the
    returned solution exceeds ``tol_pde``.
    """
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    b_fn = _as_field(drift, "drift")
    a_fn = _as_field(a, "a")
    f_fn = b_fn if rhs is None else _as_field(rhs, "rhs")

    x = _mesh(radius, h)
    m = len(x)
    a_vals = np.asarray(a_fn(x), dtype=float)
    b_vals = np.asarray(b_fn(x), dtype=float)
    f_vals = np.asarray(f_fn(x), dtype=float)
    for name, vals in (("a", a_vals), ("b", b_vals), ("rhs", f_vals)):
        if not np.all(np.isfinite(vals)):
            raise EvaluationError(f"{name} returned a non-finite value on the mesh")
    if np.min(a_vals) <= 0:
        raise EllipticityError(f"a must be uniformly positive; min a = {np.min(a_vals):.3e}")

    if boundary == "resolvent":
        bc = (f_vals[0] / lam, f_vals[-1] / lam)
        boundary_kind = "resolvent"
    else:
        bc = (float(boundary[0]), float(boundary[1]))
        boundary_kind = "dirichlet"

    hm = x[1:-1] - x[:-2]
    hp = x[2:] - x[1:-1]
    span = hm + hp
    ai, bi = a_vals[1:-1], b_vals[1:-1]
    sub = -ai / (hm * span) + bi * hp / (hm * span)
    diag = lam + ai / (hm * hp) - bi * (hp - hm) / (hm * hp)
    sup = -ai / (hp * span) - bi * hm / (hp * span)

    ab = np.zeros((3, m))
    ab[1, 0] = 1.0
    ab[1, -1] = 1.0
    ab[1, 1:-1] = diag
    ab[0, 2:] = sup
    ab[2, : m - 2] = sub
    rhs_vec = np.empty(m)
    rhs_vec[0], rhs_vec[-1] = bc
    rhs_vec[1:-1] = f_vals[1:-1]
    try:
        u = solve_banded((1, 1), ab, rhs_vec)
    except LinAlgError as exc:  # cannot happen for lam > 0 and elliptic a
        raise DiscretizationError(f"tridiagonal solve failed: {exc}") from exc

    du = np.empty(m)
    d2u = np.empty(m)
    du[1:-1] = (-hp / (hm * span)) * u[:-2] + ((hp - hm) / (hm * hp)) * u[1:-1] + (
        hm / (hp * span)
    ) * u[2:]
    d2u[1:-1] = (2.0 / (hm * span)) * u[:-2] - (2.0 / (hm * hp)) * u[1:-1] + (
        2.0 / (hp * span)
    ) * u[2:]
    # one-sided second-order first derivatives at the ends
    h1, h2 = x[1] - x[0], x[2] - x[1]
    du[0] = (-(2 * h1 + h2) / (h1 * (h1 + h2))) * u[0] + ((h1 + h2) / (h1 * h2)) * u[1] - (
        h1 / (h2 * (h1 + h2))
    ) * u[2]
    h1, h2 = x[-1] - x[-2], x[-2] - x[-3]
    du[-1] = ((2 * h1 + h2) / (h1 * (h1 + h2))) * u[-1] - ((h1 + h2) / (h1 * h2)) * u[-2] + (
        h1 / (h2 * (h1 + h2))
    ) * u[-3]
    d2u[0] = d2u[1]
    d2u[-1] = d2u[-2]

    residual = float(
        np.max(np.abs(lam * u[1:-1] - 0.5 * ai * d2u[1:-1] - bi * du[1:-1] - f_vals[1:-1]))
    )
    if residual > tol_pde:
        raise DiscretizationError(
            f"stencil residual {residual:.3e} exceeds tol_pde={tol_pde:.1e}"
        )

    norms = {
        "growth_sup": float(np.max(np.abs(u) / (1.0 + np.abs(x)))),
        "du_sup": float(np.max(np.abs(du))),
        "d2u_sup": float(np.max(np.abs(d2u))),
        "d2u_holder": _sampled_holder(x, d2u, alpha_prime),
    }
    return ResolventSolution(
        lam, radius, h, x, u, du, d2u, bc, boundary_kind, residual, alpha_prime, norms
    )


def _sampled_holder(x: np.ndarray, values: np.ndarray, alpha: float) -> float:
    """Max quotient |v(x_i) - v(x_j)| / |x_i - x_j|^alpha over strided pairs."""
    best = 0.0
    stride = 1
    while stride < len(x):
        gaps = x[stride:] - x[:-stride]
        ok = gaps <= 1.0
        if not np.any(ok):
            break
        quot = np.abs(values[stride:] - values[:-stride])[ok] / gaps[ok] ** alpha
        best = max(best, float(np.max(quot)))
        stride *= 2
    return best


def norm_decay_sweep(
    drift, a, lam_list, radius: float = 8.0, h: float = 1e-3, rhs=None
) -> list:
    """[(lambda, sup|u'|, sup|u''|)] for the drift-removal solves."""
    out = []
    for lam in lam_list:
        sol = solve_resolvent(drift, a, lam, radius, h, rhs=rhs)
        out.append((float(lam), sol.norms["du_sup"], sol.norms["d2u_sup"]))
    return out


def ito_tanaka_residual(
    solution: ResolventSolution, path: EMPath, drift, diffusion: DiffusionSpec
) -> float:
    """Pathwise defect of the drift-removal identity, left-endpoint sums.

    Returns NaN (flagged, not fatal) when the path leaves the safety box
    |x| <= radius - 1 where the mesh solution is trustworthy.  ``solution``
    must solve lambda u - (1/2) sigma^2 u'' - b u' = b for this drift and
    diffusion.
    """
    if path.d != 1 or diffusion.d != 1:
        raise ValueError("the identity check is one-dimensional")
    if path.driftless:
        raise ValueError("need a scheme path with its drift active")
    b_fn = _as_field(drift, "drift")
    states = path.values[:, 0]
    if np.max(np.abs(states)) > solution.radius - 1.0:
        return math.nan
    xs = states[:-1]
    dt = path.eval_grid.dt
    db = path.brownian.increments[:, 0]
    sig = np.asarray(diffusion(xs[:, None]))[:, 0, 0]
    u_vals = solution.u_at(xs)
    du_vals = solution.du_at(xs)
    lhs = float(np.sum(b_fn(xs))) * dt
    rhs = (
        float(solution.u_at(states[0]))
        - float(solution.u_at(states[-1]))
        + solution.lam * float(np.sum(u_vals)) * dt
        + float(np.sum(du_vals * sig * db))
    )
    return lhs - rhs


def _residual_chunk(task):
    problem, solution, ns, m_sub, seed, lo, hi = task
    nf_global = max(ns) * m_sub
    grid = TimeGrid(nf_global, problem.T)
    inc = sample_increment_batch(seed, lo, hi - lo, grid, 1)
    res = np.empty((hi - lo, len(ns)))
    exited = np.empty((hi - lo, len(ns)), dtype=bool)
    for i, n in enumerate(ns):
        nf = n * m_sub
        einc = block_sum(inc, nf_global // nf)[:, :, 0]
        r, e = _residual_walk(problem, solution, einc, m_sub, problem.T / nf, problem.T / n)
        res[:, i] = r
        exited[:, i] = e
    return res, exited


def _sigma_scalar(diffusion: DiffusionSpec, x: np.ndarray) -> np.ndarray:
    return np.asarray(diffusion.evaluator(x[:, None]))[:, 0, 0]


def _residual_walk(
    problem: ProblemSpec,
    solution: ResolventSolution,
    inc: np.ndarray,
    m_sub: int,
    dt_f: float,
    dt_c: float,
):
    """Batched identity defect along frozen-coefficient paths, d = 1.

    Mirrors the scheme's eval-node construction: coarse states advance on
    block-summed increments, inner nodes are affine fills.  Every integral
    is a left-endpoint sum on the eval grid.
    """
    batch, nf = inc.shape
    n_c = nf // m_sub
    lam = solution.lam
    b_fn = _SpecField(problem.drift)
    blocks = block_sum(inc[:, :, None], m_sub)[:, :, 0]
    x = np.full(batch, problem.x0[0])
    int_b = np.zeros(batch)
    int_u = np.zeros(batch)
    ito = np.zeros(batch)
    amax = np.abs(x)
    const_sig = problem.diffusion.is_constant
    sig_k = _sigma_scalar(problem.diffusion, x) if const_sig else None
    for k in range(n_c):
        bk = b_fn(x)
        sk = sig_k if const_sig else _sigma_scalar(problem.diffusion, x)
        w = np.zeros(batch)
        for j in range(m_sub):
            if j == 0:
                xr = x
            else:
                w = w + inc[:, k * m_sub + j - 1]
                xr = x + bk * (j * dt_f) + sk * w
                amax = np.maximum(amax, np.abs(xr))
            sig_r = sk if const_sig else _sigma_scalar(problem.diffusion, xr)
            int_b = int_b + b_fn(xr) * dt_f
            int_u = int_u + solution.u_at(xr) * dt_f
            ito = ito + solution.du_at(xr) * sig_r * inc[:, k * m_sub + j]
        x = x + bk * dt_c + sk * blocks[:, k]
        amax = np.maximum(amax, np.abs(x))
    u0 = float(solution.u_at(problem.x0[0]))
    res = int_b - (u0 - solution.u_at(x) + lam * int_u + ito)
    return res, amax > solution.radius - 1.0


def residual_decay_curve(
    problem: ProblemSpec,
    solution: ResolventSolution,
    n_list,
    m_sub: int = 4,
    p: float = 2.0,
    replicas: int = 1000,
    seed: int = 0,
    workers: int = 1,
) -> StrongErrorCurve:
    """L^p of the identity defect over coarse step counts, coupled by CRN.

    Replicas that leave the mesh safety box are discarded and counted in
    each point's metadata.
    """
    if problem.d != 1:
        raise ValueError("the identity check is one-dimensional")
    ns = sorted(set(int(n) for n in n_list))
    if len(ns) != len(list(n_list)):
        raise ValueError(f"n_list must not contain duplicates, got {n_list}")
    for n in ns:
        if max(ns) % n != 0:
            raise ValueError(f"every n must divide max(n_list); {n} does not divide {max(ns)}")
    tasks = [
        (problem, solution, tuple(ns), m_sub, seed, lo, hi)
        for lo, hi in _chunk_ranges(replicas, max(ns) * m_sub)
    ]
    results = _run_tasks(_residual_chunk, tasks, workers)
    res = np.vstack([r for r, _ in results])
    exited = np.vstack([e for _, e in results])
    points = []
    for i, n in enumerate(ns):
        keep = ~exited[:, i]
        if int(keep.sum()) < 2:
            raise ValueError(f"all replicas exited the mesh box at n={n}")
        result = _lp_result(
            np.abs(res[keep, i]) ** p, p,
            {"n": n, "m_sub": m_sub, "exits": int((~keep).sum()), "lam": solution.lam},
        )
        points.append((n, result))
    return StrongErrorCurve(
        "ito_tanaka_residual", p, seed, points,
        {"m_sub": m_sub, "lam": solution.lam, "replicas": replicas},
    )
