import numpy as np
import pytest

from trackmpc.models import (
    Polytope,
    PeriodicReference,
    ReferencePoint,
    cstr_steady_grid,
    cstr_steady_state,
    fd_jacobians,
    make_ball_plate,
    make_cstr,
    make_double_integrator,
    make_lti,
    step,
)


def central_diff_jacobians(fun, x, u, n_out):
    """Independent central-difference oracle (step 1e-6 * (1 + |coord|))."""
    Jx = np.empty((n_out, x.size))
    Ju = np.empty((n_out, u.size))
    for i in range(x.size):
        d = 1e-6 * (1.0 + abs(x[i]))
        xp = x.copy(); xp[i] += d
        xm = x.copy(); xm[i] -= d
        Jx[:, i] = (fun(xp, u) - fun(xm, u)) / (2 * d)
    for i in range(u.size):
        d = 1e-6 * (1.0 + abs(u[i]))
        up = u.copy(); up[i] += d
        um = u.copy(); um[i] -= d
        Ju[:, i] = (fun(x, up) - fun(x, um)) / (2 * d)
    return Jx, Ju


class TestCstr:
    def test_dimensions_and_weights(self):
        model, poly, w = make_cstr()
        assert (model.n, model.m, model.p) == (2, 1, 1)
        assert model.sampling_h == 0.1
        np.testing.assert_allclose(w.Q, np.eye(2))
        np.testing.assert_allclose(w.R, [[0.01]])
        np.testing.assert_allclose(w.S, [[1e3]])

    def test_constraint_box_snapshot(self):
        _, poly, _ = make_cstr()
        lo, hi = poly.coordinate_bounds()
        np.testing.assert_allclose(lo, [0.0, 0.0, 0.0], atol=1e-9)
        np.testing.assert_allclose(hi, [1.0, 1.0, 2.0], atol=1e-9)

    def test_output_is_temperature(self):
        model, _, _ = make_cstr()
        y = model.h(np.array([0.5, 0.6]), np.array([0.3]))
        np.testing.assert_allclose(y, [0.6])

    def test_step_fixed_point(self):
        model, _, _ = make_cstr()
        xs, us = cstr_steady_state(0.6519)
        np.testing.assert_allclose(step(model, xs, us), xs, atol=1e-9)

    def test_step_frozen_value(self):
        # Expected value from a direct scripted Euler-update evaluation.
        model, _, _ = make_cstr()
        xn = step(model, np.array([0.9492, 0.43]), np.array([0.5]))
        np.testing.assert_allclose(xn, [0.949200169884036, 0.4297941901159641], rtol=0, atol=1e-15)

    def test_jacobian_matches_finite_differences(self):
        model, _, _ = make_cstr()
        x = np.array([0.9492, 0.43])
        u = np.array([0.5])
        A, B = model.jac_f(x, u)
        Axd, Bxd = central_diff_jacobians(model.f, x, u, 2)
        np.testing.assert_allclose(A, Axd, rtol=1e-5, atol=1e-8)
        np.testing.assert_allclose(B, Bxd, rtol=1e-5, atol=1e-8)

    def test_steady_manifold_consistency(self):
        model, poly, _ = make_cstr()
        grid = cstr_steady_grid(0.43, 0.86, 25)
        for row in grid:
            np.testing.assert_allclose(model.f(row[:2], row[2:]), row[:2], atol=1e-12)
            assert poly.contains(row)


class TestBallPlate:
    def test_dimensions(self):
        model, poly, w = make_ball_plate()
        assert (model.n, model.m, model.p) == (8, 2, 2)
        assert w.Q.shape == (8, 8)
        np.testing.assert_allclose(w.R, 0.1 * np.eye(2))
        np.testing.assert_allclose(w.S, np.eye(2))

    def test_constraint_box_snapshot(self):
        _, poly, _ = make_ball_plate()
        lo, hi = poly.coordinate_bounds()
        lim = [0.06, 0.06, 0.2, 0.2, np.pi / 3, np.pi / 3, 1.0, 1.0, 2.0, 2.0]
        np.testing.assert_allclose(hi, lim, atol=1e-9)
        np.testing.assert_allclose(lo, [-v for v in lim], atol=1e-9)

    def test_output_projection(self):
        model, _, _ = make_ball_plate()
        x = np.zeros(8)
        x[0], x[1] = 0.01, -0.02
        np.testing.assert_allclose(model.h(x, np.zeros(2)), [0.01, -0.02])

    def test_origin_equilibrium(self):
        model, _, _ = make_ball_plate()
        np.testing.assert_allclose(step(model, np.zeros(8), np.zeros(2)), np.zeros(8), atol=0)

    def test_gravity_acceleration_frozen_value(self):
        # (5/7) * 9.81 * sin(pi/6) evaluated independently.
        model, _, _ = make_ball_plate()
        x = np.zeros(8)
        x[4] = np.pi / 6
        xn = step(model, x, np.zeros(2))
        np.testing.assert_allclose(xn[2], 0.1 * 3.5035714285714286, rtol=1e-14)

    def test_jacobians_match_finite_differences_sampled(self):
        model, poly, _ = make_ball_plate()
        lo, hi = poly.coordinate_bounds()
        rng = np.random.default_rng(7)
        for _ in range(100):
            z = lo + (hi - lo) * rng.uniform(size=10)
            x, u = z[:8], z[8:]
            A, B = model.jac_f(x, u)
            Ad, Bd = central_diff_jacobians(model.f, x, u, 8)
            np.testing.assert_allclose(A, Ad, rtol=1e-5, atol=1e-7)
            np.testing.assert_allclose(B, Bd, rtol=1e-5, atol=1e-7)
            C, D = model.jac_h(x, u)
            Cd, Dd = central_diff_jacobians(model.h, x, u, 2)
            np.testing.assert_allclose(C, Cd, rtol=1e-5, atol=1e-7)
            np.testing.assert_allclose(D, Dd, rtol=1e-5, atol=1e-7)


class TestCstrJacobianSweep:
    def test_jacobians_match_finite_differences_sampled(self):
        model, poly, _ = make_cstr()
        lo, hi = poly.coordinate_bounds()
        rng = np.random.default_rng(11)
        for _ in range(100):
            z = lo + (hi - lo) * rng.uniform(size=3)
            z[1] = max(z[1], 0.05)  # keep exp(-M/x2) well away from the singularity
            x, u = z[:2], z[2:]
            A, B = model.jac_f(x, u)
            Ad, Bd = central_diff_jacobians(model.f, x, u, 2)
            np.testing.assert_allclose(A, Ad, rtol=1e-5, atol=1e-8)
            np.testing.assert_allclose(B, Bd, rtol=1e-5, atol=1e-8)


class TestLti:
    def test_double_integrator_step(self):
        model, _ = make_double_integrator()
        np.testing.assert_allclose(step(model, np.array([1.0, 0.0]), np.array([0.0])), [1.0, 0.0])

    def test_linearity(self):
        model, _ = make_double_integrator()
        np.testing.assert_allclose(model.f(np.zeros(2), np.zeros(1)), np.zeros(2))
        A, B = model.jac_f(np.array([3.0, -1.0]), np.array([0.7]))
        np.testing.assert_allclose(A, [[1.0, 0.1], [0.0, 1.0]])
        np.testing.assert_allclose(B, [[0.0], [0.1]])

    def test_reachable_one_periodic_references(self):
        # f(x, u) = x for the double integrator forces v = 0 and u = 0.
        model, _ = make_double_integrator()
        A, B = model.jac_f(np.zeros(2), np.zeros(1))
        M = np.hstack([np.eye(2) - A, -B])
        null = np.linalg.svd(M)[2][np.isclose(np.linalg.svd(M)[1], 0, atol=1e-12).sum() - 1:]
        for pos in (-2.0, 0.0, 1.5):
            z = np.array([pos, 0.0, 0.0])
            np.testing.assert_allclose(model.f(z[:2], z[2:]), z[:2], atol=1e-14)
        # nonzero velocity is not a fixed point
        assert not np.allclose(model.f(np.array([0.0, 0.5]), np.zeros(1)), [0.0, 0.5])

    def test_dimension_mismatch_raises(self):
        Z = Polytope.from_bounds([-1, -1, -1], [1, 1, 1])
        with pytest.raises(ValueError):
            make_lti(np.eye(2), np.ones((2, 1)), np.ones((1, 3)), np.zeros((1, 1)), Z)


class TestPolytope:
    def test_boundedness(self):
        _, poly_c, _ = make_cstr()
        _, poly_b, _ = make_ball_plate()
        assert poly_c.is_bounded()
        assert poly_b.is_bounded()

    def test_unbounded_detected(self):
        # half-space only
        P = Polytope(np.array([[1.0, 0.0]]), np.array([1.0]))
        assert not P.is_bounded()

    def test_margins(self):
        P = Polytope.from_bounds([0.0], [1.0])
        np.testing.assert_allclose(P.margins([0.25]), [0.75, 0.25])


class TestPeriodicReference:
    def test_cyclic_consistency(self):
        model, _, _ = make_cstr()
        xs, us = cstr_steady_state(0.6)
        ref = PeriodicReference((ReferencePoint(xs, us),))
        ref.check_consistent(model)

    def test_inconsistent_rejected(self):
        model, _, _ = make_cstr()
        ref = PeriodicReference((ReferencePoint([0.5, 0.5], [0.1]),))
        with pytest.raises(ValueError):
            ref.check_consistent(model)

    def test_shift_and_indexing(self):
        pts = tuple(ReferencePoint([float(i), 0.0], [0.0]) for i in range(4))
        ref = PeriodicReference(pts)
        assert ref.point(5).x_r[0] == 1.0
        assert ref.shifted(1).point(0).x_r[0] == 1.0
        assert ref.T == 4


def test_fd_fallback_matches_analytic():
    model, _, _ = make_cstr()
    jac = fd_jacobians(model.f, 2)
    x, u = np.array([0.4, 0.5]), np.array([1.0])
    A, B = model.jac_f(x, u)
    Ad, Bd = jac(x, u)
    np.testing.assert_allclose(A, Ad, rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(B, Bd, rtol=1e-6, atol=1e-9)
