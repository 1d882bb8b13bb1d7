import numpy as np
import pytest

from trackmpc.models import (
    PeriodicReference,
    ReferencePoint,
    Weights,
    cstr_steady_grid,
    cstr_steady_state,
    make_ball_plate,
    make_cstr,
    make_double_integrator,
)
from trackmpc.nlp import SolverConfig, solve
from trackmpc.terminal import (
    GridSpec,
    TerminalIngredients,
    ThetaMap,
    build_certificate,
    compute_alpha2,
    L_PK,
)
from trackmpc.transcription import (
    PlannerLink,
    ProblemSpec,
    build_decoupled_planner,
    build_decoupled_tracker,
    build_joint,
    build_joint_online_alpha,
    build_ref_planner,
    build_tracking,
    check_convexity_samples,
    derivative_check,
    lift_joint_point,
    max_feasible_alpha,
)


@pytest.fixture(scope="module")
def di():
    model, Z = make_double_integrator()
    w = Weights(Q=np.eye(2), R=np.array([[0.1]]), S=np.array([[1.0]]))
    return model, Z, w


@pytest.fixture(scope="module")
def di_tec_spec(di):
    model, Z, w = di
    return ProblemSpec(variant="tracking", N=2, T=1, weights=w,
                       terminal=TerminalIngredients(kind="tec"))


@pytest.fixture(scope="module")
def cstr_cert():
    model, Z, w = make_cstr()
    pts = cstr_steady_grid(0.43, 0.86, 60)
    val = cstr_steady_grid(0.43, 0.86, 240)
    spec = GridSpec(kind="steady", points=pts, val_points=val)
    return build_certificate(model, Z, w, spec), model, Z, w


@pytest.fixture(scope="module")
def bp_cert():
    model, Z, w = make_ball_plate()
    spec = GridSpec(kind="box", count=60, seed=3, mode="constant",
                    seed_corner_coords=(4, 5, 6, 7))
    return build_certificate(model, Z, w, spec), model, Z, w


def origin_ref(T=1):
    return PeriodicReference(tuple(ReferencePoint([0.0, 0.0], [0.0]) for _ in range(T)))


class TestLayoutAndIndexing:
    def test_slices_partition_vars(self, cstr_cert):
        cert, model, Z, w = cstr_cert
        spec = ProblemSpec(variant="joint_online_alpha", N=3, T=1, weights=w,
                           terminal=cert.ingredients)
        guess = cstr_steady_grid(0.6, 0.6, 1)
        prob = build_joint_online_alpha(spec, model, Z, np.array([0.3, 0.6]),
                                        [[0.6]], guess)
        covered = np.zeros(prob.num_vars, dtype=int)
        for s in prob.var_layout.values():
            covered[s] += 1
        assert np.all(covered == 1)

    def test_wrap_constraints_for_long_horizon(self, di, cstr_cert):
        # N > T: stage references reuse the same decision variables exactly
        model, Z, w = di
        spec = ProblemSpec(variant="joint", N=4, T=2, weights=w,
                           terminal=TerminalIngredients(kind="tec"))
        guess = np.zeros((2, 3))
        prob = build_joint(spec, model, Z, np.array([0.5, 0.0]),
                           [[0.1], [0.2]], guess)
        # reference block has exactly T * (n + m) variables, so r_{l+T} == r_l
        rs = prob.var_layout["ref_states"]
        assert rs.stop - rs.start == 2 * 2
        z = prob.warm_start.copy()
        rng = np.random.default_rng(0)
        z += 0.01 * rng.normal(size=z.size)
        # objective depends on r_0 via stages k = 0 and k = 2 (wrap)
        g = prob.objective_grad(z)
        assert np.any(np.abs(g[rs.start:rs.start + 2]) > 0)

    def test_decoupled_tracker_input_count_ball_plate(self, bp_cert):
        cert, model, Z, w = bp_cert
        spec = ProblemSpec(variant="decoupled_tracker", N=1, T=16, weights=w,
                           terminal=cert.ingredients)
        ref = PeriodicReference(tuple(ReferencePoint(np.zeros(8), np.zeros(2))
                                      for _ in range(16)))
        prob = build_decoupled_tracker(spec, model, Z, np.zeros(8), ref, 0.01)
        s = prob.var_layout["inputs"]
        assert s.stop - s.start == 2  # N * m decision inputs

    def test_planner_condensed_count_documented(self, bp_cert):
        # full layout T(n+m)+1; the condensed equivalent n + mT + 1 is what
        # analysis reports for comparison
        cert, model, Z, w = bp_cert
        spec = ProblemSpec(variant="decoupled_planner", N=1, T=16, weights=w,
                           terminal=cert.ingredients)
        link = PlannerLink(alpha_tr=0.01, r_anchor=np.zeros(10),
                           rho_M=cert.ingredients.rho ** 2, terminal_index=1)
        prob = build_decoupled_planner(spec, model, Z, np.zeros((16, 2)), link,
                                       np.zeros((16, 10)))
        assert prob.num_vars == 16 * 10 + 1
        n, m, T = model.n, model.m, 16
        assert n + m * T + 1 == 41


class TestDerivativeChecks:
    def test_tracking_tec(self, di, di_tec_spec):
        model, Z, w = di
        prob = build_tracking(di_tec_spec, model, Z, np.array([0.4, 0.0]), origin_ref())
        assert derivative_check(prob) < 1e-5

    def test_tracking_quadratic_cstr(self, cstr_cert):
        cert, model, Z, w = cstr_cert
        spec = ProblemSpec(variant="tracking", N=3, T=1, weights=w,
                           terminal=cert.ingredients, alpha_fixed=0.01)
        xs, us = cstr_steady_state(0.6)
        ref = PeriodicReference((ReferencePoint(xs, us),))
        prob = build_tracking(spec, model, Z, xs + np.array([0.01, -0.01]), ref)
        assert derivative_check(prob) < 1e-5

    def test_ref_planner_cstr(self, cstr_cert):
        cert, model, Z, w = cstr_cert
        spec = ProblemSpec(variant="ref_planner", N=1, T=1, weights=w,
                           terminal=cert.ingredients)
        prob = build_ref_planner(spec, model, Z, [[0.65]], cstr_steady_grid(0.6, 0.6, 1))
        assert derivative_check(prob) < 1e-5

    def test_ref_planner_tightened(self, cstr_cert):
        cert, model, Z, w = cstr_cert
        spec = ProblemSpec(variant="ref_planner", N=1, T=1, weights=w,
                           terminal=cert.ingredients)
        prob = build_ref_planner(spec, model, Z, [[0.65]], cstr_steady_grid(0.6, 0.6, 1),
                                 tighten_alpha_min=True)
        assert derivative_check(prob) < 1e-5

    def test_joint_cstr(self, cstr_cert):
        cert, model, Z, w = cstr_cert
        spec = ProblemSpec(variant="joint", N=2, T=1, weights=w,
                           terminal=cert.ingredients, alpha_fixed=0.013,
                           zr_bounds={1: (0.43, 0.86)})
        xs, us = cstr_steady_state(0.5)
        prob = build_joint(spec, model, Z, xs, [[0.65]], cstr_steady_grid(0.5, 0.5, 1))
        assert derivative_check(prob) < 1e-5

    def test_joint_online_alpha_cstr_exact(self, cstr_cert):
        cert, model, Z, w = cstr_cert
        spec = ProblemSpec(variant="joint_online_alpha", N=2, T=1, weights=w,
                           terminal=cert.ingredients, tightening_mode="exact_lpk")
        xs, us = cstr_steady_state(0.5)
        prob = build_joint_online_alpha(spec, model, Z, xs, [[0.65]],
                                        cstr_steady_grid(0.5, 0.5, 1))
        assert derivative_check(prob) < 1e-5

    def test_joint_online_alpha_lmax_and_contraction(self, cstr_cert):
        cert, model, Z, w = cstr_cert
        xs, us = cstr_steady_state(0.55)
        for mode in ("linear_lmax", "contraction_relaxed"):
            spec = ProblemSpec(variant="joint_online_alpha", N=1, T=1, weights=w,
                               terminal=cert.ingredients, tightening_mode=mode)
            prob = build_joint_online_alpha(spec, model, Z, xs, [[0.6]],
                                            cstr_steady_grid(0.55, 0.55, 1))
            assert derivative_check(prob) < 1e-5

    def test_decoupled_planner_ball_plate(self, bp_cert):
        cert, model, Z, w = bp_cert
        spec = ProblemSpec(variant="decoupled_planner", N=1, T=4, weights=w,
                           terminal=cert.ingredients)
        link = PlannerLink(alpha_tr=0.02, r_anchor=0.01 * np.ones(10),
                           rho_M=cert.ingredients.rho ** 2, terminal_index=1)
        prob = build_decoupled_planner(spec, model, Z, np.zeros((4, 2)), link,
                                       np.zeros((4, 10)))
        assert derivative_check(prob) < 1e-5

    def test_decoupled_tracker_quadratic(self, bp_cert):
        cert, model, Z, w = bp_cert
        spec = ProblemSpec(variant="decoupled_tracker", N=2, T=4, weights=w,
                           terminal=cert.ingredients)
        ref = PeriodicReference(tuple(ReferencePoint(np.zeros(8), np.zeros(2))
                                      for _ in range(4)))
        prob = build_decoupled_tracker(spec, model, Z, 0.005 * np.ones(8), ref, 0.05)
        assert derivative_check(prob) < 1e-5


class TestTrivialOptima:
    def test_tracking_zero_error_on_reference(self, di, di_tec_spec):
        model, Z, w = di
        prob = build_tracking(di_tec_spec, model, Z, np.zeros(2), origin_ref())
        res = solve(prob)
        assert res.status == "Optimal"
        assert res.objective_value <= 1e-12
        np.testing.assert_allclose(res.x_opt[prob.var_layout["inputs"]], 0.0, atol=1e-9)

    def test_tracking_matches_kkt_oracle(self, di, di_tec_spec):
        # LTI + TEC: equality-constrained QP solvable by a hand-built KKT system
        model, Z, w = di
        x_t = np.array([0.3, -0.1])
        prob = build_tracking(di_tec_spec, model, Z, x_t, origin_ref())
        res = solve(prob)
        assert res.status == "Optimal"
        # oracle: variables (x1, x2, u0, u1); minimize stage costs subject to
        # dynamics and terminal equality x2 = 0
        A, B = model.jac_f(np.zeros(2), np.zeros(1))
        H = np.zeros((6, 6))
        H[0:2, 0:2] = 2 * np.eye(2)
        H[2:4, 2:4] = 2 * np.eye(2) * 0  # terminal state not in stage cost
        H[4, 4] = 2 * 0.1
        H[5, 5] = 2 * 0.1
        g = np.zeros(6)
        C = np.zeros((6, 6))
        d = np.zeros(6)
        C[0:2, 0:2] = np.eye(2)
        C[0:2, 4:5] = -B
        d[0:2] = A @ x_t
        C[2:4, 0:2] = -A
        C[2:4, 2:4] = np.eye(2)
        C[2:4, 5:6] = -B
        C[4:6, 2:4] = np.eye(2)
        K = np.block([[H + 1e-14 * np.eye(6), C.T], [C, np.zeros((6, 6))]])
        sol = np.linalg.solve(K, np.concatenate([-g, d]))
        z_oracle = sol[:6]
        np.testing.assert_allclose(res.x_opt[prob.var_layout["states"]],
                                   z_oracle[0:4], atol=1e-8)
        np.testing.assert_allclose(res.x_opt[prob.var_layout["inputs"]],
                                   z_oracle[4:6], atol=1e-8)

    def test_cstr_short_horizon_feasible_inside_terminal_set(self, cstr_cert):
        cert, model, Z, w = cstr_cert
        ti = cert.ingredients
        xs, us = cstr_steady_state(0.6)
        ref = PeriodicReference((ReferencePoint(xs, us),))
        spec = ProblemSpec(variant="tracking", N=1, T=1, weights=w,
                           terminal=ti, alpha_fixed=0.013)
        x_t = xs + np.array([0.005, -0.005])
        from trackmpc.terminal import terminal_cost
        assert terminal_cost(ti, x_t, np.concatenate([xs, us])) <= 0.013
        prob = build_tracking(spec, model, Z, x_t, ref)
        res = solve(prob)
        assert res.status == "Optimal"

    def test_planner_zero_for_reachable_target(self, cstr_cert):
        cert, model, Z, w = cstr_cert
        spec = ProblemSpec(variant="ref_planner", N=1, T=1, weights=w,
                           terminal=cert.ingredients, zr_bounds={1: (0.43, 0.86)})
        xs, us = cstr_steady_state(0.6519)
        y_reach = model.h(xs, us)
        prob = build_ref_planner(spec, model, Z, [y_reach], cstr_steady_grid(0.6, 0.6, 1))
        res = solve(prob)
        assert res.status == "Optimal"
        assert res.objective_value <= 1e-10

    def test_planner_T1_matches_qp_oracle(self, di):
        # LTI steady states have v = 0, u = 0; closest steady state to the
        # target position under S-weighted distance is the clamped target.
        model, Z, w = di
        spec = ProblemSpec(variant="ref_planner", N=1, T=1, weights=w,
                           terminal=TerminalIngredients(kind="tec"), zr_margin=1e-3)
        prob = build_ref_planner(spec, model, Z, [[0.7]], np.zeros((1, 3)))
        res = solve(prob)
        assert res.status == "Optimal"
        np.testing.assert_allclose(res.x_opt[prob.var_layout["ref_states"]],
                                   [0.7, 0.0], atol=1e-8)

    def test_cstr_planner_hits_target_setpoint(self, cstr_cert):
        cert, model, Z, w = cstr_cert
        spec = ProblemSpec(variant="ref_planner", N=1, T=1, weights=w,
                           terminal=cert.ingredients, zr_bounds={1: (0.43, 0.86)})
        prob = build_ref_planner(spec, model, Z, [[0.6519]], cstr_steady_grid(0.6, 0.6, 1))
        res = solve(prob)
        assert res.status == "Optimal"
        xs, us = cstr_steady_state(0.6519)
        np.testing.assert_allclose(res.x_opt[prob.var_layout["ref_states"]], xs, atol=1e-6)

    def test_joint_zero_when_on_reachable_orbit(self, cstr_cert):
        cert, model, Z, w = cstr_cert
        xs, us = cstr_steady_state(0.6519)
        spec = ProblemSpec(variant="joint", N=2, T=1, weights=w,
                           terminal=cert.ingredients, alpha_fixed=0.013,
                           zr_bounds={1: (0.43, 0.86)})
        prob = build_joint(spec, model, Z, xs, [[0.6519]],
                           np.concatenate([xs, us])[None, :])
        res = solve(prob)
        assert res.status == "Optimal"
        assert res.objective_value <= 1e-10


class TestOnlineAlpha:
    def test_fixed_alpha_point_feasible_in_online_problem(self, cstr_cert):
        cert, model, Z, w = cstr_cert
        ti = cert.ingredients
        xs, us = cstr_steady_state(0.6)
        spec_j = ProblemSpec(variant="joint", N=1, T=1, weights=w, terminal=ti,
                             alpha_fixed=0.013, zr_bounds={1: (0.43, 0.86)})
        guess = np.concatenate([xs, us])[None, :]
        joint = build_joint(spec_j, model, Z, xs, [[0.6]], guess)
        res = solve(joint)
        assert res.status == "Optimal"
        spec_a = ProblemSpec(variant="joint_online_alpha", N=1, T=1, weights=w,
                             terminal=ti, tightening_mode="exact_lpk")
        online = build_joint_online_alpha(spec_a, model, Z, xs, [[0.6]], guess)
        z = lift_joint_point(res.x_opt, joint, online, np.sqrt(0.013))
        viol_eq = np.max(np.abs(online.eq_fun(z)))
        viol_in = np.max(online.ineq_fun(z))
        assert viol_eq < 1e-7
        assert viol_in < 1e-7

    def test_lmax_dominates_exact(self, cstr_cert):
        cert, model, Z, w = cstr_cert
        ti = cert.ingredients
        pts = cstr_steady_grid(0.45, 0.84, 25)
        for r in pts:
            assert np.all(L_PK(ti, r, Z) <= ti.L_max + 1e-12)

    def test_lmax_feasible_implies_exact_feasible(self, cstr_cert):
        cert, model, Z, w = cstr_cert
        ti = cert.ingredients
        xs, us = cstr_steady_state(0.55)
        guess = np.concatenate([xs, us])[None, :]
        z_target = [[0.6]]
        probs = {}
        for mode in ("linear_lmax", "exact_lpk"):
            spec = ProblemSpec(variant="joint_online_alpha", N=1, T=1, weights=w,
                               terminal=ti, tightening_mode=mode)
            probs[mode] = build_joint_online_alpha(spec, model, Z, xs, z_target, guess)
        res = solve(probs["linear_lmax"])
        assert res.status == "Optimal"
        # the very same point satisfies the exact-tightening constraints
        assert np.max(probs["exact_lpk"].ineq_fun(res.x_opt)) <= 1e-9

    def test_online_alpha_admits_reference_outside_band(self, cstr_cert):
        # a steady state outside the banded region but inside Z is feasible
        # under online sizing with a small set size
        cert, model, Z, w = cstr_cert
        ti = cert.ingredients
        xs, us = cstr_steady_state(0.9)
        r = np.concatenate([xs, us])
        a_s = max_feasible_alpha(
            ProblemSpec(variant="joint_online_alpha", N=1, T=1, weights=w, terminal=ti),
            Z, r[None, :])
        assert a_s > np.sqrt(ti.alpha_min)
        lpk = L_PK(ti, r, Z)
        assert np.all(Z.L @ r + lpk * a_s <= Z.l + 1e-9)


class TestDecoupledPlanner:
    def test_candidate_from_shifted_reference_feasible(self, bp_cert):
        cert, model, Z, w = bp_cert
        ti = cert.ingredients
        T = 6
        ref = np.zeros((T, 10))  # stationary orbit at the origin
        alpha_tr = 0.25 * ti.alpha1
        M = 2
        rho_M = ti.rho ** M
        link = PlannerLink(alpha_tr=alpha_tr, r_anchor=ref[(1 + M) % T],
                           rho_M=rho_M, terminal_index=1)
        spec = ProblemSpec(variant="decoupled_planner", N=1, T=T, weights=w,
                           terminal=ti)
        prob = build_decoupled_planner(spec, model, Z, np.zeros((T, 2)), link, ref)
        a_cand = max(rho_M * np.sqrt(alpha_tr) + 0.5 * (1 - rho_M) * np.sqrt(ti.alpha_min),
                     np.sqrt(ti.alpha_min))
        z = prob.warm_start.copy()
        z[prob.var_layout["alpha"].start] = a_cand
        assert np.max(np.abs(prob.eq_fun(z))) < 1e-12
        assert np.max(prob.ineq_fun(z)) <= 1e-9

    def test_zero_Lp_drops_distance_term(self, bp_cert):
        cert, model, Z, w = bp_cert
        ti = cert.ingredients
        assert ti.L_p == 0.0
        link = PlannerLink(alpha_tr=0.01, r_anchor=np.zeros(10),
                           rho_M=ti.rho, terminal_index=1)
        spec = ProblemSpec(variant="decoupled_planner", N=1, T=2, weights=w,
                           terminal=ti)
        prob = build_decoupled_planner(spec, model, Z, np.zeros((2, 2)), link,
                                       np.zeros((2, 10)))
        z = prob.warm_start.copy()
        g0 = prob.ineq_fun(z)[-1]
        # moving the reference does not change the coupling row through the
        # distance term when L_p = 0 (only through the terminal cost)
        z2 = z.copy()
        rs = prob.var_layout["ref_states"]
        z2[rs.start + 8:rs.start + 16] += 0.0  # different orbit point untouched
        assert abs(prob.ineq_fun(z2)[-1] - g0) < 1e-12


class TestConvexitySamples:
    def test_lti_zero_failures(self, di):
        model, Z, w = di

        def sampler(rng):
            pos = rng.uniform(-2.0, 2.0)
            return np.array([[pos, 0.0, 0.0]])

        rep = check_convexity_samples(model, lambda r: bool(np.all(np.abs(r[:, 0]) <= 2.0)),
                                      T=1, num_samples=50, ref_sampler=sampler)
        assert rep.failure_rate == 0.0

    def test_cstr_steady_manifold_convex_in_output(self):
        model, Z, w = make_cstr()

        def sampler(rng):
            x2 = rng.uniform(0.45, 0.84)
            xs, us = cstr_steady_state(x2)
            return np.concatenate([xs, us])[None, :]

        def member(r):
            return bool(0.43 <= r[0, 1] <= 0.86 and Z.contains(r[0]))

        rep = check_convexity_samples(model, member, T=1, num_samples=60,
                                      ref_sampler=sampler)
        assert rep.failure_rate == 0.0

    def test_annulus_negative_control(self, di):
        model, Z, w = di

        def sampler(rng):
            side = 1.0 if rng.uniform() < 0.5 else -1.0
            pos = side * rng.uniform(0.5, 1.0)
            return np.array([[pos, 0.0, 0.0]])

        def member(r):
            return bool(0.5 <= abs(r[0, 0]) <= 1.0)

        rep = check_convexity_samples(model, member, T=1, num_samples=80,
                                      ref_sampler=sampler, seed=5)
        assert rep.failure_rate > 0.0


class TestSpecValidation:
    def test_bad_horizon_rejected(self, di):
        model, Z, w = di
        with pytest.raises(ValueError):
            ProblemSpec(variant="tracking", N=0, T=1, weights=w)

    def test_bad_mode_rejected(self, di):
        model, Z, w = di
        with pytest.raises(ValueError):
            ProblemSpec(variant="joint", N=1, T=1, weights=w, tightening_mode="nope")

    def test_online_alpha_requires_quadratic(self, di):
        model, Z, w = di
        spec = ProblemSpec(variant="joint_online_alpha", N=1, T=1, weights=w,
                           terminal=TerminalIngredients(kind="tec"))
        with pytest.raises(ValueError):
            build_joint_online_alpha(spec, model, Z, np.zeros(2), [[0.0]], np.zeros((1, 3)))
