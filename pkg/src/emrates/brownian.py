"""Uniform time grids, splittable RNG streams, and coupled Brownian increments.

All randomness in the package flows through :class:`RngStream`, a
counter-based generator keyed by ``(master_seed, stream_id)``.  Replica ``i``
of any Monte Carlo loop uses stream ``i``, so results never depend on
execution order or worker count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < t_1 < ... < t_n = T with t_k = kT/n."""

    n: int
    T: float

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"grid needs at least one step, got n={self.n}")
        if not (np.isfinite(self.T) and self.T > 0):
            raise ValueError(f"horizon must be finite and positive, got T={self.T}")

    @property
    def dt(self) -> float:
        return self.T / self.n

    def nodes(self) -> np.ndarray:
        return np.arange(self.n + 1) * (self.T / self.n)

    def node(self, k: int) -> float:
        return k * (self.T / self.n)

    def kappa_index(self, t: float) -> int:
        """Index k of the last node t_k <= t, capped at n-1.

        The cap makes the freeze interval [t_{n-1}, T] closed on the right,
        so kappa(T) = t_{n-1} (the terminal node is never its own anchor).
        """
        if not 0.0 <= t <= self.T:
            raise ValueError(f"t={t} outside [0, {self.T}]")
        k = int(np.searchsorted(self.nodes(), t, side="right")) - 1
        return min(k, self.n - 1)

    def kappa(self, t: float) -> float:
        return self.node(self.kappa_index(t))

    def coarsen(self, m: int) -> "TimeGrid":
        if self.n % m != 0:
            raise ValueError(f"m={m} does not divide n={self.n}")
        return TimeGrid(self.n // m, self.T)


@dataclass(frozen=True)
class RngStream:
    """Counter-based stream keyed injectively by (master_seed, stream_id).

    Two streams with different ids are statistically independent, and a
    stream is fully determined by its key: re-instantiating reproduces the
    same draws bit for bit on any platform.
    """

    master_seed: int
    stream_id: int

    def __post_init__(self):
        for name, v in (("master_seed", self.master_seed), ("stream_id", self.stream_id)):
            if not 0 <= v <= _MASK64:
                raise ValueError(f"{name} must fit in 64 bits, got {v}")

    def generator(self) -> np.random.Generator:
        key = (self.master_seed & _MASK64) | ((self.stream_id & _MASK64) << 64)
        return np.random.Generator(np.random.Philox(key=key))


def derive_stream(master_seed: int, stream_id: int) -> RngStream:
    """Child stream for replica ``stream_id`` under ``master_seed``."""
    return RngStream(master_seed, stream_id)


@dataclass(frozen=True)
class BrownianPath:
    """Increments of a d-dimensional Brownian motion on a uniform grid.

    ``values[k]`` caches the partial sum B_{t_k} (values[0] = 0).  Coarsened
    copies subsample this array, so every refinement level sees literally
    the same node values.
    """

    grid: TimeGrid
    increments: np.ndarray  # (n, d)
    values: np.ndarray = field(default=None)  # (n+1, d)

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim != 2 or inc.shape[0] != self.grid.n:
            raise ValueError(f"increments must have shape (n, d), got {inc.shape}")
        object.__setattr__(self, "increments", inc)
        if self.values is None:
            vals = np.vstack([np.zeros((1, inc.shape[1])), np.cumsum(inc, axis=0)])
            object.__setattr__(self, "values", vals)
        elif self.values.shape != (self.grid.n + 1, inc.shape[1]):
            raise ValueError(
                f"values must have shape (n+1, d) = {(self.grid.n + 1, inc.shape[1])}, "
                f"got {self.values.shape}"
            )

    @property
    def d(self) -> int:
        return self.increments.shape[1]


def sample_path(rng: RngStream, grid: TimeGrid, d: int) -> BrownianPath:
    """Draw one Brownian path: n*d iid normals scaled by sqrt(dt)."""
    if not 1 <= d <= 3:
        raise ValueError(f"dimension must be 1..3, got {d}")
    z = rng.generator().standard_normal((grid.n, d))
    return BrownianPath(grid, z * np.sqrt(grid.dt))


def sample_increment_batch(
    master_seed: int, first_replica: int, count: int, grid: TimeGrid, d: int
) -> np.ndarray:
    """Increments for replicas first..first+count-1, shape (count, n, d).

    Row i is bitwise identical to
    ``sample_path(derive_stream(master_seed, first_replica + i), grid, d)``.
    """
    out = np.empty((count, grid.n, d))
    scale = np.sqrt(grid.dt)
    for i in range(count):
        gen = derive_stream(master_seed, first_replica + i).generator()
        out[i] = gen.standard_normal((grid.n, d))
    out *= scale
    return out


def block_sum(increments: np.ndarray, m: int) -> np.ndarray:
    """Sum consecutive groups of m along axis -2 with a fixed order.

    Power-of-two factors reduce by aligned pairwise halving, so dyadic
    coarsenings compose exactly: block_sum(block_sum(x, 2), 2) is bitwise
    equal to block_sum(x, 4).  Any odd residual factor is summed left to
    right.
    """
    if m < 1:
        raise ValueError(f"factor must be >= 1, got m={m}")
    if increments.shape[-2] % m != 0:
        raise ValueError(f"m={m} does not divide step count {increments.shape[-2]}")
    out = increments
    while m % 2 == 0:
        out = out[..., 0::2, :] + out[..., 1::2, :]
        m //= 2
    if m > 1:
        shape = out.shape[:-2] + (out.shape[-2] // m, m, out.shape[-1])
        grouped = out.reshape(shape)
        acc = grouped[..., 0, :].copy()
        for j in range(1, m):
            acc = acc + grouped[..., j, :]
        out = acc
    return out if out is not increments else increments.copy()


def coarsen(path: BrownianPath, m: int) -> BrownianPath:
    """Same Brownian motion on the grid with n/m steps.

    Coarse increment j is the exact sum of fine increments jm..jm+m-1;
    node values are subsampled, so B_{t} at shared nodes is bitwise
    identical across levels.
    """
    coarse_grid = path.grid.coarsen(m)
    return BrownianPath(coarse_grid, block_sum(path.increments, m), path.values[::m])
