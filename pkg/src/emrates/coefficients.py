"""Drift/diffusion coefficient specs, a small catalogue, and regularity checks.

Drifts here are uniformly locally Hölder rather than Lipschitz: the declared
``seminorm_bound`` bounds sup |b(x)-b(y)| / |x-y|^alpha over pairs with
0 < |x-y| <= 1, which together with sub-linear growth gives the linear bound
|b(x)| <= |b(0)| + seminorm_bound * (1 + |x|).  Validators estimate these
quantities numerically; estimates are lower bounds (max over sampled pairs)
and must stay below the declared values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import partial
from typing import Callable

import numpy as np

from .brownian import RngStream, derive_stream
from .errors import EllipticityError, EvaluationError

_MAX_DIM = 3


def _check_dim(d: int) -> None:
    if not 1 <= d <= _MAX_DIM:
        raise ValueError(f"dimension must be 1..{_MAX_DIM}, got d={d}")


@dataclass
class DriftSpec:
    """A drift b: R^d -> R^d with declared Hölder regularity and growth.

    The evaluator is vectorized: it maps arrays of shape (..., d) to arrays
    of the same shape.  Declared metadata is trusted at construction; use
    :func:`estimate_holder_seminorm` / :func:`check_sublinear_growth` to
    audit it.
    """

    d: int
    evaluator: Callable[[np.ndarray], np.ndarray]
    holder_alpha: float
    seminorm_bound: float
    sublinear: bool
    label: str = "custom"

    def __post_init__(self):
        _check_dim(self.d)
        if not 0 < self.holder_alpha <= 1:
            raise ValueError(f"holder_alpha must lie in (0, 1], got {self.holder_alpha}")
        if self.seminorm_bound < 0:
            raise ValueError("seminorm_bound must be nonnegative")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.evaluator(np.asarray(x, dtype=float))

    def at_zero(self) -> np.ndarray:
        return self(np.zeros(self.d))


@dataclass
class DiffusionSpec:
    """A diffusion sigma: R^d -> R^{d x d} with a declared ellipticity box.

    ``ellipticity_lam`` is the lambda >= 1 with lambda^{-1}|xi|^2 <=
    <sigma sigma^T xi, xi> <= lambda |xi|^2 claimed for all x.  ``is_constant``
    lets schemes hoist the single matrix out of their step loops.
    """

    d: int
    evaluator: Callable[[np.ndarray], np.ndarray]
    ellipticity_lam: float
    is_constant: bool
    smoothness: str = "bounded"
    label: str = "custom"

    def __post_init__(self):
        _check_dim(self.d)
        if not self.ellipticity_lam >= 1:
            raise ValueError(f"ellipticity_lam must be >= 1, got {self.ellipticity_lam}")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.evaluator(np.asarray(x, dtype=float))


@dataclass
class ProblemSpec:
    """Problem data for dX = b(X)dt + sigma(X)dB on [0, T] from X_0 = x0."""

    drift: DriftSpec
    diffusion: DiffusionSpec
    x0: np.ndarray
    T: float = 1.0

    def __post_init__(self):
        if self.drift.d != self.diffusion.d:
            raise ValueError(
                f"drift dimension {self.drift.d} != diffusion dimension {self.diffusion.d}"
            )
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if x0.shape != (self.d,):
            raise ValueError(f"x0 must have shape ({self.d},), got {x0.shape}")
        self.x0 = x0
        if not (np.isfinite(self.T) and self.T > 0):
            raise ValueError(f"horizon must be finite and positive, got T={self.T}")

    @property
    def d(self) -> int:
        return self.drift.d


@dataclass
class TestFunctionSpec:
    """Pair (f, g) for occupation-time functionals.

    f is scalar and locally ``f_alpha``-Hölder; g is scalar, bounded by
    ``g_sup`` and Lipschitz with constant ``g_lip``.  Both map (..., d)
    arrays to (...) arrays.
    """

    d: int
    f: Callable[[np.ndarray], np.ndarray]
    f_alpha: float
    g: Callable[[np.ndarray], np.ndarray]
    g_sup: float
    g_lip: float
    label: str = "custom"

    def __post_init__(self):
        _check_dim(self.d)
        if not 0 < self.f_alpha <= 1:
            raise ValueError(f"f_alpha must lie in (0, 1], got {self.f_alpha}")

    def validate(self, rng: RngStream | None = None, radius: float = 10.0, samples: int = 2000):
        """Spot-check the declared bounds for g on random pairs; raise on violation."""
        gen = (rng or derive_stream(0, 0)).generator()
        x = gen.uniform(-radius, radius, (samples, self.d))
        y = x + gen.standard_normal((samples, self.d))
        gx, gy = np.asarray(self.g(x), dtype=float), np.asarray(self.g(y), dtype=float)
        if not (np.all(np.isfinite(gx)) and np.all(np.isfinite(gy))):
            raise EvaluationError(f"g ({self.label}) returned a non-finite value")
        worst_sup = float(np.max(np.abs(gx)))
        if worst_sup > self.g_sup * (1 + 1e-12):
            raise ValueError(f"|g| reached {worst_sup}, declared sup {self.g_sup}")
        gaps = np.linalg.norm(x - y, axis=-1)
        ok = gaps > 1e-12
        worst_lip = float(np.max(np.abs(gx - gy)[ok] / gaps[ok]))
        if worst_lip > self.g_lip * (1 + 1e-12):
            raise ValueError(f"g quotient reached {worst_lip}, declared Lipschitz {self.g_lip}")


# --- catalogue profiles (module-level so specs pickle cleanly) ---


def _radial(x: np.ndarray) -> np.ndarray:
    return np.linalg.norm(x, axis=-1)


def _promote(profile: np.ndarray, x: np.ndarray) -> np.ndarray:
    # scalar radial profile applied to every coordinate: b = f(|x|) * (1,..,1)
    return profile[..., None] * np.ones_like(x)


def _zero_drift(x):
    return np.zeros_like(x)


def _power_drift(x, alpha):
    return _promote(_radial(x) ** alpha, x)


def _power_sum_drift(x, alpha, beta):
    r = _radial(x)
    return _promote(r**alpha + r**beta, x)


def _power_log_drift(x, alpha):
    r = _radial(x)
    return _promote(r**alpha * np.log(2.0 + r), x)


def _lipschitz_sublinear_drift(x, scale):
    r = _radial(x)
    return scale * x / (1.0 + np.sqrt(r))[..., None]


def _power_field(x, alpha):
    return _radial(x) ** alpha


def _power_log_field(x, alpha):
    r = _radial(x)
    return r**alpha * np.log(2.0 + r)


def _constant_field(x, value):
    return np.full(x.shape[:-1], float(value))


def _cos_field(x):
    return np.cos(x[..., 0])


def _gauss_field(x):
    return np.exp(-np.sum(x * x, axis=-1))


def _constant_diffusion(x, matrix):
    return np.broadcast_to(matrix, x.shape[:-1] + matrix.shape)


def _sin_diffusion(x, amplitude):
    out = np.zeros(x.shape[:-1] + (1, 1))
    out[..., 0, 0] = 1.0 + amplitude * np.sin(x[..., 0])
    return out


def _check_exponent(name: str, value: float) -> None:
    if not 0 < value < 1:
        raise ValueError(f"{name} must lie in (0, 1), got {value}")


_DRIFT_KEYS = ("zero", "power", "power_sum", "power_log", "lipschitz_sublinear")
_DIFFUSION_KEYS = ("identity", "constant", "sin_1d")
_FIELD_KEYS = ("power", "power_log", "constant", "one", "cos", "gauss")


def builtin_drift(name: str, params: dict | None = None, d: int = 1) -> DriftSpec:
    """Catalogue drift by key.

    Keys: zero; power (alpha); power_sum (alpha, beta); power_log (alpha);
    lipschitz_sublinear (scale).  Scalar profiles act on |x| and are applied
    to every coordinate, so declared seminorm bounds carry a sqrt(d) factor.
    """
    _check_dim(d)
    params = dict(params or {})
    root_d = math.sqrt(d)
    if name == "zero":
        spec = DriftSpec(d, _zero_drift, 1.0, 0.0, True, "zero")
    elif name == "power":
        alpha = float(params.pop("alpha", 0.5))
        _check_exponent("alpha", alpha)
        # | |x|^a - |y|^a | <= |x-y|^a, sharp at the origin
        spec = DriftSpec(d, partial(_power_drift, alpha=alpha), alpha, root_d, True, f"power({alpha})")
    elif name == "power_sum":
        alpha = float(params.pop("alpha", 0.7))
        beta = float(params.pop("beta", 0.3))
        _check_exponent("alpha", alpha)
        _check_exponent("beta", beta)
        spec = DriftSpec(
            d,
            partial(_power_sum_drift, alpha=alpha, beta=beta),
            min(alpha, beta),
            2.0 * root_d,
            True,
            f"power_sum({alpha},{beta})",
        )
    elif name == "power_log":
        alpha = float(params.pop("alpha", 0.5))
        _check_exponent("alpha", alpha)
        bound = root_d * (math.log(3.0) + 2.0 ** (alpha - 1.0))
        spec = DriftSpec(
            d, partial(_power_log_drift, alpha=alpha), alpha, bound, True, f"power_log({alpha})"
        )
    elif name == "lipschitz_sublinear":
        scale = float(params.pop("scale", 1.0))
        if scale <= 0:
            raise ValueError(f"scale must be positive, got {scale}")
        spec = DriftSpec(
            d,
            partial(_lipschitz_sublinear_drift, scale=scale),
            1.0,
            scale,
            True,
            f"lipschitz_sublinear({scale})",
        )
    else:
        raise KeyError(f"unknown drift {name!r}; known keys: {', '.join(_DRIFT_KEYS)}")
    if params:
        raise ValueError(f"unused drift parameters for {name!r}: {sorted(params)}")
    return spec


def builtin_diffusion(name: str, params: dict | None = None, d: int = 1) -> DiffusionSpec:
    """Catalogue diffusion by key: identity; constant (scale); sin_1d (amplitude)."""
    _check_dim(d)
    params = dict(params or {})
    if name == "identity":
        spec = DiffusionSpec(d, partial(_constant_diffusion, matrix=np.eye(d)), 1.0, True, "constant", "identity")
    elif name == "constant":
        scale = float(params.pop("scale", 1.0))
        if scale <= 0:
            raise ValueError(f"scale must be positive, got {scale}")
        lam = max(scale**2, scale**-2)
        spec = DiffusionSpec(
            d, partial(_constant_diffusion, matrix=scale * np.eye(d)), lam, True, "constant", f"constant({scale})"
        )
    elif name == "sin_1d":
        if d != 1:
            raise ValueError("sin_1d diffusion is one-dimensional")
        amplitude = float(params.pop("amplitude", 0.5))
        if not 0 < amplitude < 1:
            raise ValueError(f"amplitude must lie in (0, 1), got {amplitude}")
        lam = max((1.0 + amplitude) ** 2, (1.0 - amplitude) ** -2)
        spec = DiffusionSpec(
            d, partial(_sin_diffusion, amplitude=amplitude), lam, False, "smooth_bounded", f"sin_1d({amplitude})"
        )
    else:
        raise KeyError(f"unknown diffusion {name!r}; known keys: {', '.join(_DIFFUSION_KEYS)}")
    if params:
        raise ValueError(f"unused diffusion parameters for {name!r}: {sorted(params)}")
    return spec


def builtin_scalar_field(name: str, params: dict | None = None, d: int = 1):
    """Scalar field by key, returning (callable, metadata).

    Metadata carries ``alpha`` when the field is locally Hölder and
    ``sup``/``lip`` when it is bounded Lipschitz (usable as a g-factor).
    """
    _check_dim(d)
    params = dict(params or {})
    if name == "power":
        alpha = float(params.pop("alpha", 0.5))
        _check_exponent("alpha", alpha)
        fn, meta = partial(_power_field, alpha=alpha), {"alpha": alpha}
    elif name == "power_log":
        alpha = float(params.pop("alpha", 0.5))
        _check_exponent("alpha", alpha)
        fn, meta = partial(_power_log_field, alpha=alpha), {"alpha": alpha}
    elif name in ("constant", "one"):
        value = 1.0 if name == "one" else float(params.pop("value", 1.0))
        fn = partial(_constant_field, value=value)
        meta = {"alpha": 1.0, "sup": abs(value), "lip": 0.0}
    elif name == "cos":
        fn, meta = _cos_field, {"alpha": 1.0, "sup": 1.0, "lip": 1.0}
    elif name == "gauss":
        fn, meta = _gauss_field, {"alpha": 1.0, "sup": 1.0, "lip": math.sqrt(2.0 / math.e)}
    else:
        raise KeyError(f"unknown field {name!r}; known keys: {', '.join(_FIELD_KEYS)}")
    if params:
        raise ValueError(f"unused field parameters for {name!r}: {sorted(params)}")
    return fn, meta


def builtin_test_function(
    f_name: str,
    f_params: dict | None = None,
    g_name: str = "one",
    g_params: dict | None = None,
    d: int = 1,
) -> TestFunctionSpec:
    """Assemble a TestFunctionSpec from two catalogue fields."""
    f, f_meta = builtin_scalar_field(f_name, f_params, d)
    g, g_meta = builtin_scalar_field(g_name, g_params, d)
    if "sup" not in g_meta:
        raise ValueError(f"field {g_name!r} is unbounded and cannot serve as g")
    return TestFunctionSpec(
        d, f, f_meta["alpha"], g, g_meta["sup"], g_meta["lip"], f"{f_name}*{g_name}"
    )


# --- numerical audits of declared regularity ---


def _finite_or_raise(values, what: str) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise EvaluationError(f"{what} returned a non-finite value")
    return values


def _eval_field(fn: Callable, points: np.ndarray, what: str = "f") -> np.ndarray:
    """Evaluate a scalar or vector field on (N, d) points, shape-checked."""
    out = _finite_or_raise(fn(points), what)
    if out.shape not in (points.shape, points.shape[:-1]):
        raise ValueError(f"{what} returned shape {out.shape} for input {points.shape}")
    return out


def _gaps(fx: np.ndarray, fy: np.ndarray) -> np.ndarray:
    # |f(x)-f(y)|: Euclidean for vector fields, absolute for scalar ones
    diff = fx - fy
    return np.linalg.norm(diff, axis=-1) if diff.ndim == 2 else np.abs(diff)


def estimate_holder_seminorm(
    f: Callable,
    alpha: float,
    d: int = 1,
    radius: float = 4.0,
    min_scale: float = 1e-3,
    rng: RngStream | None = None,
    random_pairs: int = 10_000,
) -> float:
    """Lower bound for sup |f(x)-f(y)| / |x-y|^alpha over 0 < |x-y| <= 1.

    Scans a deterministic lattice of centers in [-radius, radius]^d with
    axis-aligned offsets at dyadic scales 1, 1/2, ..., min_scale, then adds
    ``random_pairs`` random pairs with log-uniform separations.  The result
    only grows as more pairs are sampled.
    """
    _check_dim(d)
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    per_axis = {1: 257, 2: 33, 3: 17}[d]
    axes = [np.linspace(-radius, radius, per_axis)] * d
    centers = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)

    scales = []
    s = 1.0
    while s > min_scale:
        scales.append(s)
        s /= 2.0
    scales.append(min_scale)

    best = 0.0
    fc = _eval_field(f, centers)
    for s in scales:
        for axis in range(d):
            for sign in (1.0, -1.0):
                shifted = centers.copy()
                shifted[:, axis] += sign * s
                best = max(best, float(np.max(_gaps(_eval_field(f, shifted), fc))) / s**alpha)

    if random_pairs > 0:
        gen = (rng or derive_stream(0, 0)).generator()
        x = gen.uniform(-radius, radius, (random_pairs, d))
        direction = gen.standard_normal((random_pairs, d))
        direction /= np.maximum(np.linalg.norm(direction, axis=-1, keepdims=True), 1e-300)
        seps = np.exp(gen.uniform(np.log(min_scale), 0.0, random_pairs))
        y = x + seps[:, None] * direction
        quotients = _gaps(_eval_field(f, x), _eval_field(f, y)) / seps**alpha
        best = max(best, float(np.max(quotients)))
    return best


def check_sublinear_growth(
    f: Callable,
    d: int = 1,
    radii: tuple = (1.0, 10.0, 100.0, 1000.0),
    samples_per_shell: int = 64,
    rng: RngStream | None = None,
) -> list[tuple[float, float]]:
    """Growth ratios [(R, max_{|x|=R} |f(x)| / R)] over spheres of given radii.

    For a sub-linear f the ratios must eventually decrease toward zero; the
    caller asserts that.  Shell points are the 2d axis poles plus random
    directions.
    """
    _check_dim(d)
    gen = (rng or derive_stream(0, 0)).generator()
    out = []
    for radius in radii:
        if radius <= 0:
            raise ValueError(f"radii must be positive, got {radius}")
        poles = np.concatenate([np.eye(d), -np.eye(d)], axis=0)
        dirs = gen.standard_normal((samples_per_shell, d))
        dirs /= np.maximum(np.linalg.norm(dirs, axis=-1, keepdims=True), 1e-300)
        points = np.concatenate([poles, dirs], axis=0) * radius
        values = _eval_field(f, points)
        mags = np.linalg.norm(values, axis=-1) if values.ndim == 2 else np.abs(values)
        out.append((float(radius), float(np.max(mags)) / radius))
    return out


def check_ellipticity(
    diffusion: DiffusionSpec,
    box: float = 10.0,
    n_grid: int = 4096,
    n_random: int = 1024,
    rng: RngStream | None = None,
) -> tuple[float, float]:
    """Extreme eigenvalues of a = sigma sigma^T over sampled states.

    Returns (lam_min, lam_max); eigenvalues are exact Rayleigh-quotient
    extremes at each sampled x.  Raises EllipticityError when a is
    numerically singular somewhere.  The caller asserts the declared box
    lam_min >= 1/lam and lam_max <= lam.
    """
    d = diffusion.d
    per_axis = {1: n_grid, 2: max(2, int(math.isqrt(n_grid))), 3: max(2, round(n_grid ** (1 / 3)))}[d]
    axes = [np.linspace(-box, box, per_axis)] * d
    points = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    if n_random > 0:
        gen = (rng or derive_stream(0, 0)).generator()
        points = np.concatenate([points, gen.uniform(-box, box, (n_random, d))], axis=0)

    sig = _finite_or_raise(diffusion(points), "sigma")
    a = sig @ np.swapaxes(sig, -1, -2)
    eigs = np.linalg.eigvalsh(a)
    lam_min, lam_max = float(np.min(eigs)), float(np.max(eigs))
    if lam_min < 1e-12:
        raise EllipticityError(
            f"sigma sigma^T is numerically singular (smallest eigenvalue {lam_min:.3e})"
        )
    return lam_min, lam_max
