import math

import numpy as np
import pytest

from emrates import (
    DiffusionSpec,
    DriftSpec,
    ProblemSpec,
    SimulationError,
    builtin_diffusion,
    builtin_drift,
    builtin_test_function,
    em_path,
    em_terminal_pair,
    girsanov_weight,
    quadrature_functional,
)
from emrates.brownian import TimeGrid, coarsen, derive_stream, sample_path


def _linear(x):
    return x.copy()


def _explode(x):
    out = np.full_like(x, np.inf)
    out[np.abs(x) < 1e-12] = 0.0
    return out


def _zero_matrix(x):
    return np.zeros(x.shape[:-1] + (x.shape[-1], x.shape[-1]))


LINEAR_DRIFT = DriftSpec(1, _linear, 1.0, 1.0, False, "linear")
SILENT_DIFFUSION = DiffusionSpec(1, _zero_matrix, 1.0, True, "constant", "silent")


def _benchmark(x0=1.0, diffusion="identity"):
    return ProblemSpec(
        builtin_drift("power", {"alpha": 0.5}),
        builtin_diffusion(diffusion, {"amplitude": 0.5} if diffusion == "sin_1d" else None),
        np.array([x0]),
        1.0,
    )


class TestEulerPath:
    def test_pure_brownian_is_reproduced_bitwise(self):
        # b = 0, sigma = I, x0 = 0: the scheme IS the driving path
        problem = ProblemSpec(
            builtin_drift("zero"), builtin_diffusion("identity"), np.array([0.0]), 1.0
        )
        fine = sample_path(derive_stream(3, 0), TimeGrid(32, 1.0), 1)
        path = em_path(problem, fine, coarse_n=32)
        np.testing.assert_array_equal(path.values, fine.values)

    def test_pure_brownian_with_inner_nodes(self):
        problem = ProblemSpec(
            builtin_drift("zero"), builtin_diffusion("identity"), np.array([0.0]), 1.0
        )
        fine = sample_path(derive_stream(3, 1), TimeGrid(32, 1.0), 1)
        path = em_path(problem, fine, coarse_n=8)
        # inner fills regroup the same increments; only association differs
        np.testing.assert_allclose(path.values, fine.values, atol=1e-13, rtol=0.0)

    def test_deterministic_exponential_growth(self):
        # sigma = 0, b(x) = x: Euler compounding, x_n = (1 + dt)^n x0
        problem = ProblemSpec(LINEAR_DRIFT, SILENT_DIFFUSION, np.array([1.0]), 1.0)
        x_coarse, x_fine = em_terminal_pair(problem, 10, 1000, derive_stream(4, 0))
        expected_c, expected_f = 1.0, 1.0
        for _ in range(10):
            expected_c = expected_c + expected_c * 0.1
        for _ in range(1000):
            expected_f = expected_f + expected_f * 0.001
        assert x_coarse[0] == expected_c
        assert x_fine[0] == expected_f
        assert expected_c == pytest.approx(2.5937424601, rel=1e-12)
        assert abs(x_fine[0] - x_coarse[0]) == pytest.approx(0.1231814, abs=1e-6)

    def test_equal_grids_couple_to_zero(self):
        problem = _benchmark(diffusion="sin_1d")
        x_coarse, x_fine = em_terminal_pair(problem, 64, 64, derive_stream(4, 1))
        np.testing.assert_array_equal(x_coarse, x_fine)

    def test_coarse_nodes_ignore_m_sub(self):
        # the coarse recursion consumes block sums only, so refining the
        # eval grid cannot move the coarse states
        problem = _benchmark(diffusion="sin_1d")
        fine = sample_path(derive_stream(8, 2), TimeGrid(64, 1.0), 1)
        rich = em_path(problem, fine, coarse_n=16)
        plain = em_path(problem, coarsen(fine, 4), coarse_n=16)
        assert rich.m_sub == 4 and plain.m_sub == 1
        np.testing.assert_array_equal(rich.coarse_values, plain.values)

    def test_divisibility_enforced(self):
        fine = sample_path(derive_stream(0, 0), TimeGrid(10, 1.0), 1)
        with pytest.raises(ValueError):
            em_path(_benchmark(), fine, coarse_n=4)

    def test_dimension_mismatch(self):
        fine = sample_path(derive_stream(0, 0), TimeGrid(8, 1.0), 2)
        with pytest.raises(ValueError):
            em_path(_benchmark(), fine, coarse_n=4)

    def test_exploding_drift_reports_step_and_state(self):
        bad = DriftSpec(1, _explode, 1.0, 1.0, False, "explode")
        problem = ProblemSpec(bad, builtin_diffusion("identity"), np.array([1.0]), 1.0)
        fine = sample_path(derive_stream(0, 1), TimeGrid(8, 1.0), 1)
        with pytest.raises(SimulationError) as err:
            em_path(problem, fine, coarse_n=8)
        assert err.value.step == 0
        assert err.value.state is not None

    def test_path_accessors(self):
        problem = _benchmark()
        fine = sample_path(derive_stream(1, 0), TimeGrid(12, 1.0), 1)
        path = em_path(problem, fine, coarse_n=4)
        assert path.m_sub == 3 and path.d == 1
        assert path.coarse_values.shape == (5, 1)
        np.testing.assert_array_equal(path.terminal, path.values[-1])
        np.testing.assert_array_equal(path.values[0], problem.x0)


class TestGirsanovWeight:
    def _driftless_path(self, stream_id=0, n=16, m_sub=1):
        problem = _benchmark()
        fine = sample_path(derive_stream(40, stream_id), TimeGrid(n * m_sub, 1.0), 1)
        return problem, em_path(problem, fine, coarse_n=n, driftless=True)

    def test_zero_drift_weight_is_one(self):
        problem, path = self._driftless_path()
        w = girsanov_weight(path, builtin_drift("zero"), problem.diffusion, q=1.0)
        assert w.s1 == 0.0 and w.s2 == 0.0 and w.weight == 1.0

    def test_q_zero_weight_is_one(self):
        problem, path = self._driftless_path(1)
        w = girsanov_weight(path, problem.drift, problem.diffusion, q=0.0)
        assert w.weight == 1.0

    def test_sums_are_q_free(self):
        problem, path = self._driftless_path(2)
        weights = {
            q: girsanov_weight(path, problem.drift, problem.diffusion, q)
            for q in (-1.0, 0.5, 1.0, 2.0)
        }
        s1 = weights[1.0].s1
        s2 = weights[1.0].s2
        for q, w in weights.items():
            assert (w.s1, w.s2) == (s1, s2)
            assert w.log_weight == q * s1 - 0.5 * q * q * s2

    def test_needs_a_driftless_path(self):
        problem = _benchmark()
        fine = sample_path(derive_stream(40, 3), TimeGrid(16, 1.0), 1)
        path = em_path(problem, fine, coarse_n=16)
        with pytest.raises(ValueError):
            girsanov_weight(path, problem.drift, problem.diffusion, 1.0)

    def test_mean_one_within_noise(self):
        problem = _benchmark()
        grid = TimeGrid(16, 1.0)
        ws = []
        for i in range(2000):
            path = em_path(problem, sample_path(derive_stream(41, i), grid, 1), 16, driftless=True)
            ws.append(girsanov_weight(path, problem.drift, problem.diffusion, 1.0).weight)
        ws = np.array(ws)
        se = ws.std(ddof=1) / math.sqrt(len(ws))
        assert abs(ws.mean() - 1.0) <= 4 * se

    def test_reweighted_driftless_mean_matches_drifted_mean(self):
        # E[phi(X_T)] = E[phi(Y_T) Z(1)] on the same grid, same noise bank
        problem = _benchmark()
        grid = TimeGrid(8, 1.0)
        lhs, rhs = [], []
        for i in range(3000):
            fine = sample_path(derive_stream(42, i), grid, 1)
            x = em_path(problem, fine, 8)
            y = em_path(problem, fine, 8, driftless=True)
            z = girsanov_weight(y, problem.drift, problem.diffusion, 1.0).weight
            lhs.append(math.cos(x.terminal[0]))
            rhs.append(math.cos(y.terminal[0]) * z)
        lhs, rhs = np.array(lhs), np.array(rhs)
        gap_se = math.hypot(lhs.std(ddof=1), rhs.std(ddof=1)) / math.sqrt(len(lhs))
        assert abs(lhs.mean() - rhs.mean()) <= 4 * gap_se


class TestQuadratureFunctional:
    def test_constant_f_gives_exact_zero(self):
        problem = _benchmark()
        fine = sample_path(derive_stream(50, 0), TimeGrid(64, 1.0), 1)
        path = em_path(problem, fine, coarse_n=16)
        tf = builtin_test_function("constant", {"value": 3.0}, "cos", None)
        assert quadrature_functional(path, tf) == 0.0

    def test_m_sub_one_sees_no_gap(self):
        problem = _benchmark()
        fine = sample_path(derive_stream(50, 1), TimeGrid(16, 1.0), 1)
        path = em_path(problem, fine, coarse_n=16)
        tf = builtin_test_function("power", {"alpha": 0.5}, "one", None)
        assert quadrature_functional(path, tf) == 0.0

    def test_matches_a_direct_resummation(self):
        # deterministic path (sigma = 0) lets the sum be re-derived exactly
        problem = ProblemSpec(LINEAR_DRIFT, SILENT_DIFFUSION, np.array([0.5]), 1.0)
        fine = sample_path(derive_stream(50, 2), TimeGrid(32, 1.0), 1)
        path = em_path(problem, fine, coarse_n=8)
        tf = builtin_test_function("power", {"alpha": 0.5}, "cos", None)
        states = path.values[:-1, 0]
        dt = path.eval_grid.dt
        total = 0.0
        for j, x in enumerate(states):
            frozen = states[(j // path.m_sub) * path.m_sub]
            total += (abs(x) ** 0.5 - abs(frozen) ** 0.5) * math.cos(x) * dt
        assert quadrature_functional(path, tf) == pytest.approx(total, rel=1e-12)

    def test_linear_in_g(self):
        problem = _benchmark()
        fine = sample_path(derive_stream(50, 3), TimeGrid(64, 1.0), 1)
        path = em_path(problem, fine, coarse_n=16)
        one = builtin_test_function("power", {"alpha": 0.5}, "constant", {"value": 1.0})
        two = builtin_test_function("power", {"alpha": 0.5}, "constant", {"value": 2.0})
        assert quadrature_functional(path, two) == 2.0 * quadrature_functional(path, one)

    def test_time_clipping(self):
        problem = _benchmark()
        fine = sample_path(derive_stream(50, 4), TimeGrid(8, 1.0), 1)
        path = em_path(problem, fine, coarse_n=4)
        tf = builtin_test_function("power", {"alpha": 0.5}, "one", None)
        assert quadrature_functional(path, tf, t=0.0) == 0.0
        full = quadrature_functional(path, tf)
        assert quadrature_functional(path, tf, t=1.0) == full
        partial = quadrature_functional(path, tf, t=0.3)
        states = path.values[:-1, 0]
        nodes = path.eval_grid.nodes()
        total = 0.0
        for j, x in enumerate(states):
            frozen = states[(j // path.m_sub) * path.m_sub]
            width = max(0.0, min(nodes[j + 1], 0.3) - nodes[j])
            total += (abs(x) ** 0.5 - abs(frozen) ** 0.5) * width
        assert partial == pytest.approx(total, rel=1e-12)

    def test_t_domain(self):
        problem = _benchmark()
        fine = sample_path(derive_stream(50, 5), TimeGrid(8, 1.0), 1)
        path = em_path(problem, fine, coarse_n=4)
        tf = builtin_test_function("power", {"alpha": 0.5}, "one", None)
        with pytest.raises(ValueError):
            quadrature_functional(path, tf, t=1.5)
