import csv
import math

import numpy as np
import pytest

from emrates import (
    DiscretizationError,
    DriftSpec,
    EllipticityError,
    ProblemSpec,
    TimeGrid,
    builtin_diffusion,
    builtin_drift,
    derive_stream,
    em_path,
    fit_rate,
    sample_path,
)
from emrates.zvonkin1d import (
    ito_tanaka_residual,
    norm_decay_sweep,
    residual_decay_curve,
    solve_resolvent,
)

POWER = builtin_drift("power", {"alpha": 0.5})
IDENT = builtin_diffusion("identity")


def _zero(x):
    return 0.0 * x


def _const_problem(c=1.5, x0=0.5):
    def b(x):
        return np.full_like(x, c)

    drift = DriftSpec(1, b, 1.0, abs(c), False, "const")
    return ProblemSpec(drift, IDENT, np.array([x0]), 1.0)


class TestSolveResolvent:
    def test_constant_rhs_gives_f_over_lambda(self):
        # u = c / lam kills both derivative terms
        sol = solve_resolvent(lambda x: np.full_like(x, 3.0), 1.0, 2.0)
        assert np.max(np.abs(sol.u - 1.5)) < 1e-9
        assert sol.norms["du_sup"] < 1e-8

    def test_lambda_scaling_for_constant_rhs(self):
        lo = solve_resolvent(lambda x: np.full_like(x, 3.0), 1.0, 2.0)
        hi = solve_resolvent(lambda x: np.full_like(x, 3.0), 1.0, 20.0)
        assert np.max(np.abs(hi.u - lo.u / 10.0)) < 1e-8

    def test_sin_oracle_at_large_lambda(self):
        # lam u - u''/2 = sin has u = sin / (lam + 1/2); at lam = 1000 the
        # resolvent boundary guess is wrong by O(1/lam^2) and decays fast
        lam = 1000.0
        sol = solve_resolvent(_zero, 1.0, lam, rhs=np.sin)
        exact = np.sin(sol.x) / (lam + 0.5)
        inner = np.abs(sol.x) <= sol.radius - 1.0
        assert np.max(np.abs(sol.u - exact)[inner]) < 1e-6

    def test_second_order_in_h(self):
        lam, R = 1000.0, 8.0
        bc = (math.sin(-R) / (lam + 0.5), math.sin(R) / (lam + 0.5))
        errs = []
        for h in (4e-3, 2e-3):
            sol = solve_resolvent(_zero, 1.0, lam, h=h, rhs=np.sin, boundary=bc)
            errs.append(np.max(np.abs(sol.u - np.sin(sol.x) / (lam + 0.5))))
        assert errs[0] / errs[1] > 3.5

    def test_linear_in_rhs(self):
        sa = solve_resolvent(POWER, IDENT, 5.0, rhs=np.sin)
        sb = solve_resolvent(POWER, IDENT, 5.0, rhs=np.cos)
        sab = solve_resolvent(POWER, IDENT, 5.0, rhs=lambda x: np.sin(x) + np.cos(x))
        assert np.max(np.abs(sa.u + sb.u - sab.u)) < 1e-9

    def test_doubling_rhs_doubles_u_exactly(self):
        # scaling by a power of two survives the banded solve bit for bit
        sa = solve_resolvent(POWER, IDENT, 5.0, rhs=np.sin)
        s2 = solve_resolvent(POWER, IDENT, 5.0, rhs=lambda x: 2.0 * np.sin(x))
        assert np.array_equal(s2.u, 2.0 * sa.u)

    def test_boundary_kinds(self):
        sol = solve_resolvent(POWER, IDENT, 5.0)
        assert sol.boundary_kind == "resolvent"
        pinned = solve_resolvent(POWER, IDENT, 5.0, boundary=(0.0, 0.0))
        assert pinned.boundary_kind == "dirichlet"
        # partial pivoting leaves the pinned rows with solver-level noise
        assert abs(pinned.u[0]) < 1e-9 and abs(pinned.u[-1]) < 1e-9

    def test_domain_validation(self):
        with pytest.raises(ValueError):
            solve_resolvent(POWER, IDENT, 0.0)
        with pytest.raises(ValueError):
            solve_resolvent(POWER, IDENT, 1.0, radius=1.5)
        with pytest.raises(ValueError):
            solve_resolvent(POWER, IDENT, 1.0, h=0.05)
        with pytest.raises(EllipticityError):
            solve_resolvent(POWER, 0.0, 1.0)

    def test_residual_gate(self):
        sol = solve_resolvent(POWER, IDENT, 5.0, rhs=np.sin)
        assert sol.residual > 0.0
        with pytest.raises(DiscretizationError):
            solve_resolvent(POWER, IDENT, 5.0, rhs=np.sin, tol_pde=sol.residual / 2)

    def test_accessors_and_csv(self, tmp_path):
        sol = solve_resolvent(POWER, IDENT, 5.0)
        pts = np.array([-2.3, 0.0, 1.7])
        on_mesh = np.interp(pts, sol.x, sol.u)
        assert np.max(np.abs(sol.u_at(pts) - on_mesh)) < 1e-5
        assert float(sol.u_at(sol.x[10])) == pytest.approx(sol.u[10], rel=1e-12)
        out = tmp_path / "u.csv"
        sol.write_csv(out)
        with open(out, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["x", "u", "du", "d2u"]
        assert len(rows) == len(sol.x) + 1
        assert float(rows[1][0]) == sol.x[0]


class TestNormDecay:
    def test_sweep_decreases_in_lambda(self):
        sweep = norm_decay_sweep(POWER, IDENT, [1.0, 10.0, 100.0, 1000.0])
        du = [row[1] for row in sweep]
        d2u = [row[2] for row in sweep]
        assert du == sorted(du, reverse=True)
        assert d2u == sorted(d2u, reverse=True)
        assert du[0] == pytest.approx(3.101682, rel=1e-3)

    def test_radius_insensitive_once_lambda_screens(self):
        for lam in (10.0, 100.0):
            near = solve_resolvent(POWER, IDENT, lam, radius=8.0)
            far = solve_resolvent(POWER, IDENT, lam, radius=16.0)
            shift = abs(far.norms["du_sup"] - near.norms["du_sup"]) / near.norms["du_sup"]
            assert shift < 1e-2


class TestItoTanaka:
    def test_constant_drift_identity_is_exact(self):
        prob = _const_problem()
        sol = solve_resolvent(prob.drift, prob.diffusion, 2.0)
        fine = sample_path(derive_stream(21, 0), TimeGrid(64 * 256, 1.0), 1)
        path = em_path(prob, fine, 64)
        res = ito_tanaka_residual(sol, path, prob.drift, prob.diffusion)
        assert abs(res) < 1e-10

    def test_zero_drift_is_exactly_zero(self):
        prob = ProblemSpec(builtin_drift("zero"), IDENT, np.array([0.0]), 1.0)
        sol = solve_resolvent(prob.drift, prob.diffusion, 1.0, rhs=_zero)
        fine = sample_path(derive_stream(21, 0), TimeGrid(64 * 4, 1.0), 1)
        path = em_path(prob, fine, 64)
        assert ito_tanaka_residual(sol, path, prob.drift, prob.diffusion) == 0.0

    def test_exit_yields_nan(self):
        prob = _const_problem(c=40.0)
        sol = solve_resolvent(prob.drift, prob.diffusion, 2.0)
        fine = sample_path(derive_stream(21, 0), TimeGrid(64 * 4, 1.0), 1)
        path = em_path(prob, fine, 64)
        assert math.isnan(ito_tanaka_residual(sol, path, prob.drift, prob.diffusion))

    def test_rejects_driftless_paths(self):
        prob = _const_problem()
        sol = solve_resolvent(prob.drift, prob.diffusion, 2.0)
        fine = sample_path(derive_stream(21, 0), TimeGrid(64, 1.0), 1)
        path = em_path(prob, fine, 64, driftless=True)
        with pytest.raises(ValueError):
            ito_tanaka_residual(sol, path, prob.drift, prob.diffusion)

    def test_rejects_higher_dimensions(self):
        drift = builtin_drift("power", {"alpha": 0.5}, d=2)
        diffusion = builtin_diffusion("identity", d=2)
        prob = ProblemSpec(drift, diffusion, np.array([0.0, 0.0]), 1.0)
        sol = solve_resolvent(POWER, IDENT, 2.0)
        fine = sample_path(derive_stream(21, 0), TimeGrid(64, 1.0), 2)
        path = em_path(prob, fine, 64)
        with pytest.raises(ValueError):
            ito_tanaka_residual(sol, path, drift, diffusion)


@pytest.fixture(scope="module")
def setup():
    prob = ProblemSpec(POWER, IDENT, np.array([1.0]), 1.0)
    sol = solve_resolvent(prob.drift, prob.diffusion, 1.0)
    return prob, sol


class TestResidualDecay:

    def test_half_rate_decay(self, setup):
        prob, sol = setup
        curve = residual_decay_curve(prob, sol, [16, 64, 256], m_sub=4, replicas=400, seed=17)
        ests = curve.estimates()
        assert ests[0] > ests[1] > ests[2]
        fit = fit_rate(curve.points)
        assert fit.slope > 0.4
        for _, r in curve.points:
            assert r.metadata["exits"] == 0
            assert r.metadata["lam"] == 1.0

    def test_validation(self, setup):
        prob, sol = setup
        with pytest.raises(ValueError):
            residual_decay_curve(prob, sol, [16, 16], replicas=10, seed=0)
        with pytest.raises(ValueError):
            residual_decay_curve(prob, sol, [12, 64], replicas=10, seed=0)
        drift2 = builtin_drift("power", {"alpha": 0.5}, d=2)
        prob2 = ProblemSpec(
            drift2, builtin_diffusion("identity", d=2), np.array([0.0, 0.0]), 1.0
        )
        with pytest.raises(ValueError):
            residual_decay_curve(prob2, sol, [16, 64], replicas=10, seed=0)
