"""Euler-Maruyama paths with frozen coefficients, change-of-measure weights,
and occupation-time functionals.

The scheme holds coefficients at the last coarse node: on [t_k, t_{k+1})

    X_r = X_{t_k} + b(X_{t_k}) (r - t_k) + sigma(X_{t_k}) (B_r - B_{t_k}),

evaluated on a finer grid that subdivides each coarse step into ``m_sub``
pieces.  Coarse-node values are computed first, by the plain recursion on
exactly-coarsened increments, so they do not depend on ``m_sub`` at all.

Batch kernels (leading axis = replica) carry all Monte Carlo work; the
public per-path operations wrap them with batch size one.  Every reduction
over steps runs left to right, so a replica's output is a pure function of
its increments.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .brownian import BrownianPath, RngStream, TimeGrid, block_sum, sample_path
from .coefficients import DiffusionSpec, DriftSpec, ProblemSpec, TestFunctionSpec
from .errors import EllipticityError, EvaluationError, SimulationError


def _matvec(mats: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    """(..., d, d) times (..., d), accumulated column by column."""
    out = mats[..., :, 0] * vecs[..., 0:1]
    for j in range(1, vecs.shape[-1]):
        out = out + mats[..., :, j] * vecs[..., j : j + 1]
    return out


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = a[..., 0] * b[..., 0]
    for j in range(1, a.shape[-1]):
        out = out + a[..., j] * b[..., j]
    return out


def _solve_sigma(mats: np.ndarray, vecs: np.ndarray, lam: float) -> np.ndarray:
    """z = sigma^{-1} v by direct formula for d <= 3.

    Uniform ellipticity guarantees |det sigma| >= lam^{-d/2}; anything far
    below that is treated as a violation rather than inverted blindly.
    """
    d = vecs.shape[-1]
    if d == 1:
        det = mats[..., 0, 0]
    elif d == 2:
        det = mats[..., 0, 0] * mats[..., 1, 1] - mats[..., 0, 1] * mats[..., 1, 0]
    else:
        det = (
            mats[..., 0, 0] * (mats[..., 1, 1] * mats[..., 2, 2] - mats[..., 1, 2] * mats[..., 2, 1])
            - mats[..., 0, 1] * (mats[..., 1, 0] * mats[..., 2, 2] - mats[..., 1, 2] * mats[..., 2, 0])
            + mats[..., 0, 2] * (mats[..., 1, 0] * mats[..., 2, 1] - mats[..., 1, 1] * mats[..., 2, 0])
        )
    floor = 0.1 * lam ** (-d / 2.0)
    if np.min(np.abs(det)) < floor:
        raise EllipticityError(
            f"|det sigma| dropped to {float(np.min(np.abs(det))):.3e}, "
            f"below the lambda-implied floor {floor:.3e}"
        )
    if d == 1:
        return vecs / det[..., None]
    if d == 2:
        z0 = (mats[..., 1, 1] * vecs[..., 0] - mats[..., 0, 1] * vecs[..., 1]) / det
        z1 = (-mats[..., 1, 0] * vecs[..., 0] + mats[..., 0, 0] * vecs[..., 1]) / det
        return np.stack([z0, z1], axis=-1)
    # adjugate rows for d = 3
    m = mats
    c00 = m[..., 1, 1] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 1]
    c01 = m[..., 0, 2] * m[..., 2, 1] - m[..., 0, 1] * m[..., 2, 2]
    c02 = m[..., 0, 1] * m[..., 1, 2] - m[..., 0, 2] * m[..., 1, 1]
    c10 = m[..., 1, 2] * m[..., 2, 0] - m[..., 1, 0] * m[..., 2, 2]
    c11 = m[..., 0, 0] * m[..., 2, 2] - m[..., 0, 2] * m[..., 2, 0]
    c12 = m[..., 0, 2] * m[..., 1, 0] - m[..., 0, 0] * m[..., 1, 2]
    c20 = m[..., 1, 0] * m[..., 2, 1] - m[..., 1, 1] * m[..., 2, 0]
    c21 = m[..., 0, 1] * m[..., 2, 0] - m[..., 0, 0] * m[..., 2, 1]
    c22 = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
    z0 = (c00 * vecs[..., 0] + c01 * vecs[..., 1] + c02 * vecs[..., 2]) / det
    z1 = (c10 * vecs[..., 0] + c11 * vecs[..., 1] + c12 * vecs[..., 2]) / det
    z2 = (c20 * vecs[..., 0] + c21 * vecs[..., 1] + c22 * vecs[..., 2]) / det
    return np.stack([z0, z1, z2], axis=-1)


def _batch_x0(x0: np.ndarray, batch: int) -> np.ndarray:
    return np.broadcast_to(x0, (batch, x0.shape[-1])).copy()


def _hoist_sigma(diffusion: DiffusionSpec, x0: np.ndarray):
    """Constant diffusions are evaluated once, at x0."""
    if not diffusion.is_constant:
        return None
    sig = np.asarray(diffusion(x0[None]))[0]
    if not np.all(np.isfinite(sig)):
        raise EvaluationError("sigma returned a non-finite value at x0")
    return sig


def _check_coeff(values: np.ndarray, step: int, state: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        bad = int(np.argwhere(~np.isfinite(values).reshape(values.shape[0], -1).all(axis=1))[0, 0])
        raise SimulationError(
            f"{what} non-finite at step {step}, state {state[bad]}", step=step, state=state[bad]
        )


def _simulate_terminal(
    drift: DriftSpec | None, diffusion: DiffusionSpec, x0: np.ndarray, inc: np.ndarray, dt: float
) -> np.ndarray:
    """Terminal values of the scheme on the increments' own grid, shape (B, d)."""
    batch, n, d = inc.shape
    x = _batch_x0(x0, batch)
    sig_const = _hoist_sigma(diffusion, x0)
    for k in range(n):
        sk = sig_const if sig_const is not None else diffusion(x)
        if sig_const is None:
            _check_coeff(sk, k, x, "sigma")
        if drift is not None:
            bk = drift(x)
            _check_coeff(bk, k, x, "drift")
            x = x + bk * dt + _matvec(sk, inc[:, k])
        else:
            x = x + _matvec(sk, inc[:, k])
    _check_coeff(x, n, x, "state")
    return x


def _simulate_nodes(
    drift: DriftSpec | None, diffusion: DiffusionSpec, x0: np.ndarray, inc: np.ndarray, dt: float
) -> np.ndarray:
    """All node values of the scheme, shape (B, n+1, d)."""
    batch, n, d = inc.shape
    values = np.empty((batch, n + 1, d))
    x = _batch_x0(x0, batch)
    values[:, 0] = x
    sig_const = _hoist_sigma(diffusion, x0)
    for k in range(n):
        sk = sig_const if sig_const is not None else diffusion(x)
        if sig_const is None:
            _check_coeff(sk, k, x, "sigma")
        if drift is not None:
            bk = drift(x)
            _check_coeff(bk, k, x, "drift")
            x = x + bk * dt + _matvec(sk, inc[:, k])
        else:
            x = x + _matvec(sk, inc[:, k])
        values[:, k + 1] = x
    _check_coeff(x, n, x, "state")
    return values


def _simulate_eval_nodes(
    drift: DriftSpec | None,
    diffusion: DiffusionSpec,
    x0: np.ndarray,
    inc: np.ndarray,
    m_sub: int,
    dt_f: float,
    dt_c: float,
) -> np.ndarray:
    """Scheme values on the eval grid with coefficients frozen per coarse step.

    Coarse-node values come first, from the recursion on block-summed
    increments, so they are bitwise independent of m_sub; eval nodes inside
    a step are filled in with the frozen-coefficient interpolation driven by
    running partial sums of the fine increments.
    """
    batch, nf, d = inc.shape
    if nf % m_sub != 0:
        raise ValueError(f"m_sub={m_sub} does not divide eval step count {nf}")
    n_c = nf // m_sub
    blocks = block_sum(inc, m_sub)
    values = np.empty((batch, nf + 1, d))
    x = _batch_x0(x0, batch)
    values[:, 0] = x
    sig_const = _hoist_sigma(diffusion, x0)
    for k in range(n_c):
        sk = sig_const if sig_const is not None else diffusion(x)
        if sig_const is None:
            _check_coeff(sk, k, x, "sigma")
        bk = None
        if drift is not None:
            bk = drift(x)
            _check_coeff(bk, k, x, "drift")
        if m_sub > 1:
            w = np.zeros((batch, d))
            for j in range(1, m_sub):
                w = w + inc[:, k * m_sub + j - 1]
                if bk is not None:
                    values[:, k * m_sub + j] = x + bk * (j * dt_f) + _matvec(sk, w)
                else:
                    values[:, k * m_sub + j] = x + _matvec(sk, w)
        if bk is not None:
            x = x + bk * dt_c + _matvec(sk, blocks[:, k])
        else:
            x = x + _matvec(sk, blocks[:, k])
        values[:, (k + 1) * m_sub] = x
    _check_coeff(x, n_c, x, "state")
    return values


def _girsanov_sums(
    drift: DriftSpec, diffusion: DiffusionSpec, x0: np.ndarray, inc: np.ndarray, dt: float
):
    """Driftless recursion with the two exponent sums accumulated on the fly.

    Returns (terminal, S1, S2) where S1 = sum_k <z_k, dB_k> and
    S2 = sum_k |z_k|^2 dt for z_k = sigma(Y_k)^{-1} b(Y_k).
    """
    batch, n, d = inc.shape
    lam = diffusion.ellipticity_lam
    y = _batch_x0(x0, batch)
    s1 = np.zeros(batch)
    s2 = np.zeros(batch)
    sig_const = _hoist_sigma(diffusion, x0)
    for k in range(n):
        sk = sig_const if sig_const is not None else diffusion(y)
        if sig_const is None:
            _check_coeff(sk, k, y, "sigma")
        bk = drift(y)
        _check_coeff(bk, k, y, "drift")
        z = _solve_sigma(sk, bk, lam)
        s1 = s1 + _dot(z, inc[:, k])
        s2 = s2 + _dot(z, z) * dt
        y = y + _matvec(sk, inc[:, k])
    _check_coeff(y, n, y, "state")
    return y, s1, s2


def _quadrature(
    drift: DriftSpec | None,
    diffusion: DiffusionSpec,
    x0: np.ndarray,
    inc: np.ndarray,
    m_sub: int,
    dt_f: float,
    dt_c: float,
    f: Callable,
    g: Callable,
    weights: np.ndarray,
) -> np.ndarray:
    """Left-endpoint sum of (f(X_r) - f(X_freeze)) g(X_r) over eval cells.

    ``weights[j]`` is the length assigned to eval cell j (dt on a full cell,
    less where a window [s, t] clips it, 0 outside).  Terms at coarse nodes
    vanish identically and are skipped.
    """
    batch, nf, d = inc.shape
    if nf % m_sub != 0:
        raise ValueError(f"m_sub={m_sub} does not divide eval step count {nf}")
    if weights.shape != (nf,):
        raise ValueError(f"weights must have shape ({nf},), got {weights.shape}")
    n_c = nf // m_sub
    blocks = block_sum(inc, m_sub)
    x = _batch_x0(x0, batch)
    acc = np.zeros(batch)
    sig_const = _hoist_sigma(diffusion, x0)
    for k in range(n_c):
        sk = sig_const if sig_const is not None else diffusion(x)
        if sig_const is None:
            _check_coeff(sk, k, x, "sigma")
        bk = None
        if drift is not None:
            bk = drift(x)
            _check_coeff(bk, k, x, "drift")
        lo = k * m_sub
        if m_sub > 1 and np.any(weights[lo + 1 : lo + m_sub] > 0):
            f_frozen = np.asarray(f(x), dtype=float)
            _check_coeff(f_frozen[:, None], k, x, "f")
            w = np.zeros((batch, d))
            for j in range(1, m_sub):
                w = w + inc[:, lo + j - 1]
                wj = weights[lo + j]
                if wj == 0.0:
                    continue
                if bk is not None:
                    xr = x + bk * (j * dt_f) + _matvec(sk, w)
                else:
                    xr = x + _matvec(sk, w)
                acc = acc + (np.asarray(f(xr)) - f_frozen) * np.asarray(g(xr)) * wj
            if not np.all(np.isfinite(acc)):
                raise EvaluationError(f"f or g produced a non-finite value in coarse step {k}")
        if bk is not None:
            x = x + bk * dt_c + _matvec(sk, blocks[:, k])
        else:
            x = x + _matvec(sk, blocks[:, k])
    return acc


@dataclass
class EMPath:
    """One realized scheme path on its eval grid.

    ``values[j]`` is the state at eval node j; every m_sub-th node is a
    coarse node.  The driving Brownian path is kept so weights and
    functionals can be formed later without re-simulation.
    """

    coarse_grid: TimeGrid
    eval_grid: TimeGrid
    values: np.ndarray  # (eval_n + 1, d)
    driftless: bool
    brownian: BrownianPath

    @property
    def m_sub(self) -> int:
        return self.eval_grid.n // self.coarse_grid.n

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def coarse_values(self) -> np.ndarray:
        return self.values[:: self.m_sub]

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]


def em_path(
    problem: ProblemSpec, fine_path: BrownianPath, coarse_n: int, driftless: bool = False
) -> EMPath:
    """Run the scheme with coarse_n freeze steps along ``fine_path``.

    The path's grid is the eval grid; coarse_n must divide its step count.
    With ``driftless=True`` the drift is dropped entirely (the Y^n scheme
    used for measure changes).
    """
    nf = fine_path.grid.n
    if coarse_n < 1 or nf % coarse_n != 0:
        raise ValueError(f"coarse_n={coarse_n} must divide the eval step count {nf}")
    if fine_path.d != problem.d:
        raise ValueError(f"path dimension {fine_path.d} != problem dimension {problem.d}")
    values = _simulate_eval_nodes(
        None if driftless else problem.drift,
        problem.diffusion,
        problem.x0,
        fine_path.increments[None],
        nf // coarse_n,
        fine_path.grid.dt,
        problem.T / coarse_n,
    )[0]
    return EMPath(
        TimeGrid(coarse_n, problem.T), fine_path.grid, values, driftless, fine_path
    )


def em_terminal_pair(
    problem: ProblemSpec, coarse_n: int, fine_n: int, rng: RngStream
) -> tuple[np.ndarray, np.ndarray]:
    """Terminal values (X^coarse_T, X^fine_T) driven by one Brownian path.

    The coarse scheme sees the exact block sums of the fine increments, so
    coarse_n == fine_n returns a bitwise-identical pair.
    """
    if fine_n % coarse_n != 0:
        raise ValueError(f"coarse_n={coarse_n} must divide fine_n={fine_n}")
    path = sample_path(rng, TimeGrid(fine_n, problem.T), problem.d)
    coarse_inc = block_sum(path.increments, fine_n // coarse_n)
    x_coarse = _simulate_terminal(
        problem.drift, problem.diffusion, problem.x0, coarse_inc[None], problem.T / coarse_n
    )[0]
    x_fine = _simulate_terminal(
        problem.drift, problem.diffusion, problem.x0, path.increments[None], path.grid.dt
    )[0]
    return x_coarse, x_fine


@dataclass
class GirsanovWeight:
    """Exponential weight Z(q) = exp(q S1 - q^2 S2 / 2) for one path.

    S1 and S2 are q-free, so weights at different q for the same path are
    exact functions of this pair.
    """

    q: float
    s1: float
    s2: float

    @property
    def log_weight(self) -> float:
        return self.q * self.s1 - 0.5 * self.q * self.q * self.s2

    @property
    def weight(self) -> float:
        return float(np.exp(self.log_weight))


def girsanov_weight(
    path: EMPath, drift: DriftSpec, diffusion: DiffusionSpec, q: float
) -> GirsanovWeight:
    """Change-of-measure weight reintroducing ``drift`` along a driftless path.

    Sums run over the coarse grid, where the integrands are constant, so
    both integrals in the exponent are exact for the scheme.
    """
    if not path.driftless:
        raise ValueError("girsanov_weight needs a driftless path")
    if drift.d != path.d or diffusion.d != path.d:
        raise ValueError("coefficient dimensions do not match the path")
    y = path.coarse_values[:-1]
    b = np.asarray(drift(y), dtype=float)
    sig = np.asarray(diffusion(y), dtype=float)
    if not (np.all(np.isfinite(b)) and np.all(np.isfinite(sig))):
        raise EvaluationError("coefficients non-finite along the path")
    z = _solve_sigma(sig, b, diffusion.ellipticity_lam)
    db = block_sum(path.brownian.increments, path.m_sub)
    s1 = float(np.sum(z * db))
    s2 = float(np.sum(z * z)) * path.coarse_grid.dt
    return GirsanovWeight(q, s1, s2)


def quadrature_functional(path: EMPath, test_fn: TestFunctionSpec, t: float | None = None) -> float:
    """int_0^t (f(X_r) - f(X_{kappa(r)})) g(X_r) dr on the eval grid.

    Left-endpoint sum over eval cells; the final cell is clipped when t is
    not an eval node.
    """
    if test_fn.d != path.d:
        raise ValueError(f"test function dimension {test_fn.d} != path dimension {path.d}")
    T = path.eval_grid.T
    t = T if t is None else float(t)
    if not 0.0 <= t <= T:
        raise ValueError(f"t={t} outside [0, {T}]")
    nodes = path.eval_grid.nodes()
    widths = np.clip(np.minimum(nodes[1:], t) - nodes[:-1], 0.0, None)
    states = path.values[:-1]
    f_all = np.asarray(test_fn.f(states), dtype=float)
    g_all = np.asarray(test_fn.g(states), dtype=float)
    if not (np.all(np.isfinite(f_all)) and np.all(np.isfinite(g_all))):
        raise EvaluationError("f or g returned a non-finite value along the path")
    freeze = (np.arange(len(states)) // path.m_sub) * path.m_sub
    return float(np.sum((f_all - f_all[freeze]) * g_all * widths))
