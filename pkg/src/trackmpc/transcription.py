"""Direct multiple-shooting transcriptions of the tracking optimal control
problems: reference tracking, periodic reference planning, joint tracking
with an artificial periodic reference, the online terminal-set-size variant
and the partially decoupled tracker/planner pair.

States are kept as decision variables with dynamics as equality constraints.
The layout is always [states x_1..x_N | inputs u_0..u_{N-1} | reference
states | reference inputs | set-size variable], with empty blocks omitted.
Period wrap-around for horizons longer than the period is realized by index
reuse (r_{k+T} and r_k are literally the same variables), which enforces the
wrap exactly. Objective gradients are exact, including the dependence of the
parameterized terminal cost on the reference; the Gauss-Newton Hessian
freezes the terminal weight, keeping it positive semidefinite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .models import Model, PeriodicReference, Polytope, Weights
from .terminal import (
    TerminalIngredients,
    dX_dr,
    dY_dr,
    evaluate_Kf,
    evaluate_Pf,
    evaluate_X_clamped,
)

SQRT_GUARD = 1e-14


@dataclass
class NlpProblem:
    num_vars: int
    objective: Callable
    objective_grad: Callable
    objective_gn_hess: Callable
    eq_fun: Callable
    eq_jac: Callable
    ineq_fun: Callable
    ineq_jac: Callable
    var_layout: dict
    warm_start: np.ndarray
    meta: dict = field(default_factory=dict)


@dataclass
class ProblemSpec:
    variant: str
    N: int = 1
    T: int = 1
    weights: Optional[Weights] = None
    terminal: Optional[TerminalIngredients] = None
    tightening_mode: str = "exact_lpk"   # exact_lpk | linear_lmax | contraction_relaxed
    alpha_fixed: Optional[float] = None  # terminal level for fixed-size variants
    zr_margin: float = 1e-3
    zr_bounds: dict = field(default_factory=dict)   # coord -> (lo, hi) on references

    def __post_init__(self):
        if self.variant in ("tracking", "joint", "joint_online_alpha",
                            "decoupled_tracker") and self.N < 1:
            raise ValueError("tracking variants need N >= 1")
        if self.T < 1:
            raise ValueError("period must be at least 1")
        if self.tightening_mode not in ("exact_lpk", "linear_lmax", "contraction_relaxed"):
            raise ValueError(f"unknown tightening mode {self.tightening_mode!r}")


def _pf_with_grad(ti, r):
    """P(r), K(r) and the per-coordinate derivative dP/dr_c (clamped X)."""
    X, clamped = evaluate_X_clamped(ti, r)
    P = np.linalg.inv(X)
    P = 0.5 * (P + P.T)
    K = ti.Y_basis[0] @ P if (ti.theta is None or not ti.theta.size) else None
    if K is None:
        Y = ti.Y_basis[0].copy()
        th = ti.theta.values(r)
        for j in range(ti.theta.size):
            Y = Y + th[j] * ti.Y_basis[j + 1]
        K = Y @ P
    dXs = dX_dr(ti, r)
    dPs = [None if dx is None else -P @ dx @ P for dx in dXs]
    return P, K, dPs, clamped


class _Layout:
    def __init__(self, model: Model, N: int, T: int, with_states: bool,
                 with_refs: bool, with_alpha: bool):
        n, m = model.n, model.m
        self.n, self.m = n, m
        self.N, self.T = N, T
        pos = 0
        if with_states:
            self.states = slice(pos, pos + N * n)
            pos += N * n
            self.inputs = slice(pos, pos + N * m)
            pos += N * m
        else:
            self.states = slice(pos, pos)
            self.inputs = slice(pos, pos)
        if with_refs:
            self.ref_states = slice(pos, pos + T * n)
            pos += T * n
            self.ref_inputs = slice(pos, pos + T * m)
            pos += T * m
        else:
            self.ref_states = slice(pos, pos)
            self.ref_inputs = slice(pos, pos)
        if with_alpha:
            self.alpha = slice(pos, pos + 1)
            pos += 1
        else:
            self.alpha = slice(pos, pos)
        self.num_vars = pos

    def x(self, z, k):
        """Predicted state k; k = 0 is handled by the caller (initial state)."""
        n = self.n
        base = self.states.start + (k - 1) * n
        return z[base:base + n]

    def u(self, z, k):
        m = self.m
        base = self.inputs.start + k * m
        return z[base:base + m]

    def xr(self, z, j):
        n = self.n
        base = self.ref_states.start + (j % self.T) * n
        return z[base:base + n]

    def ur(self, z, j):
        m = self.m
        base = self.ref_inputs.start + (j % self.T) * m
        return z[base:base + m]

    def ref(self, z, j):
        return np.concatenate([self.xr(z, j), self.ur(z, j)])

    def x_idx(self, k):
        return self.states.start + (k - 1) * self.n

    def u_idx(self, k):
        return self.inputs.start + k * self.m

    def xr_idx(self, j):
        return self.ref_states.start + (j % self.T) * self.n

    def ur_idx(self, j):
        return self.ref_inputs.start + (j % self.T) * self.m

    def as_dict(self):
        return {"states": self.states, "inputs": self.inputs,
                "ref_states": self.ref_states, "ref_inputs": self.ref_inputs,
                "alpha": self.alpha}


class _Transcription:
    """Shared assembly of objectives and constraints; cached per iterate."""

    def __init__(self, model: Model, Z: Polytope, spec: ProblemSpec, lay: _Layout,
                 x_t=None, fixed_ref: Optional[PeriodicReference] = None,
                 y_target=None, alpha_tr=None, planner_link=None,
                 ref_row_mode="none", alpha_cost_mode="none"):
        self.model = model
        self.Z = Z
        self.spec = spec
        self.lay = lay
        self.x_t = None if x_t is None else np.asarray(x_t, dtype=float)
        self.fixed_ref = fixed_ref
        self.y_target = None if y_target is None else np.atleast_2d(np.asarray(y_target, dtype=float))
        self.alpha_tr = alpha_tr
        self.link = planner_link
        self.ref_row_mode = ref_row_mode
        self.alpha_cost_mode = alpha_cost_mode
        w = spec.weights
        self.sqQ = np.linalg.cholesky(w.Q).T
        self.sqR = np.linalg.cholesky(w.R).T
        self.sqS = np.linalg.cholesky(w.S).T
        self._cache_key = None
        self._cache = None
        self._zr_rows = self._build_zr_rows()

    # -- reference constraint rows -------------------------------------
    def _build_zr_rows(self):
        """Rows (a, b) meaning a . r <= b for one reference point."""
        if self.ref_row_mode == "none":
            return None
        L, l = self.Z.L, self.Z.l
        rows_a = [L]
        rows_b = [l - self.spec.zr_margin]
        dim = L.shape[1]
        for coord, (lo, hi) in sorted(self.spec.zr_bounds.items()):
            e = np.zeros(dim)
            e[int(coord)] = 1.0
            if hi is not None:
                rows_a.append(e[None, :])
                rows_b.append(np.array([hi]))
            if lo is not None:
                rows_a.append(-e[None, :])
                rows_b.append(np.array([-lo]))
        return np.vstack(rows_a), np.concatenate(rows_b)

    # -- per-iterate evaluation cache ------------------------------------
    def _ev(self, z):
        key = z.tobytes()
        if key == self._cache_key:
            return self._cache
        self._cache_key = key
        self._cache = {}
        return self._cache

    def _terminal_ref_index(self):
        return self.lay.N  # cyclic indexing handles N >= T

    def _terminal_pair(self, z):
        lay = self.lay
        xN = lay.x(z, lay.N) if lay.N >= 1 else self.x_t
        if self.fixed_ref is not None:
            p = self.fixed_ref.point(self._terminal_ref_index())
            return xN, np.concatenate([p.x_r, p.u_r]), False
        return xN, lay.ref(z, self._terminal_ref_index()), True

    # -- objective -------------------------------------------------------
    def _stage_ref(self, z, k):
        if self.fixed_ref is not None:
            p = self.fixed_ref.point(k)
            return p.x_r, p.u_r, False
        return self.lay.xr(z, k), self.lay.ur(z, k), True

    def objective_parts(self, z):
        c = self._ev(z)
        if "obj" in c:
            return c["obj"]
        lay, spec = self.lay, self.spec
        n, m = lay.n, lay.m
        val = 0.0
        grad = np.zeros(lay.num_vars)
        hess = np.zeros((lay.num_vars, lay.num_vars))
        # tracking stage cost
        for k in range(lay.N):
            xk = self.x_t if k == 0 else lay.x(z, k)
            uk = lay.u(z, k)
            xr, ur, ref_dec = self._stage_ref(z, k)
            ex = self.sqQ @ (xk - xr)
            eu = self.sqR @ (uk - ur)
            val += float(ex @ ex + eu @ eu)
            gx = 2.0 * self.sqQ.T @ ex
            gu = 2.0 * self.sqR.T @ eu
            QQ = 2.0 * self.sqQ.T @ self.sqQ
            RR = 2.0 * self.sqR.T @ self.sqR
            if k >= 1:
                ix = lay.x_idx(k)
                grad[ix:ix + n] += gx
                hess[ix:ix + n, ix:ix + n] += QQ
            iu = lay.u_idx(k)
            grad[iu:iu + m] += gu
            hess[iu:iu + m, iu:iu + m] += RR
            if ref_dec:
                jx = lay.xr_idx(k)
                ju = lay.ur_idx(k)
                grad[jx:jx + n] -= gx
                grad[ju:ju + m] -= gu
                hess[jx:jx + n, jx:jx + n] += QQ
                hess[ju:ju + m, ju:ju + m] += RR
                if k >= 1:
                    ix = lay.x_idx(k)
                    hess[ix:ix + n, jx:jx + n] -= QQ
                    hess[jx:jx + n, ix:ix + n] -= QQ
                hess[iu:iu + m, ju:ju + m] -= RR
                hess[ju:ju + m, iu:iu + m] -= RR
        # target-tracking cost over the reference
        if self.y_target is not None:
            for j in range(lay.T):
                xr = lay.xr(z, j)
                ur = lay.ur(z, j)
                res = self.sqS @ (np.asarray(self.model.h(xr, ur)) - self.y_target[j])
                C, D = self.model.jac_h(xr, ur)
                val += float(res @ res)
                gx = 2.0 * (self.sqS @ C).T @ res
                gu = 2.0 * (self.sqS @ D).T @ res
                jx = lay.xr_idx(j)
                ju = lay.ur_idx(j)
                grad[jx:jx + lay.n] += gx
                grad[ju:ju + lay.m] += gu
                JC = self.sqS @ C
                JD = self.sqS @ D
                hess[jx:jx + n, jx:jx + n] += 2.0 * JC.T @ JC
                hess[ju:ju + m, ju:ju + m] += 2.0 * JD.T @ JD
                hess[jx:jx + n, ju:ju + m] += 2.0 * JC.T @ JD
                hess[ju:ju + m, jx:jx + n] += 2.0 * JD.T @ JC
        # terminal cost (quadratic kind only; zero under terminal equality)
        ti = spec.terminal
        if ti is not None and not ti.is_tec and lay.N >= 1:
            xN, r, ref_dec = self._terminal_pair(z)
            P, K, dPs, _ = _pf_with_grad(ti, r)
            e = xN - r[:n]
            Pe = P @ e
            val += float(e @ Pe)
            ix = lay.x_idx(lay.N)
            grad[ix:ix + n] += 2.0 * Pe
            hess[ix:ix + n, ix:ix + n] += 2.0 * P
            if ref_dec:
                q = self._terminal_ref_index()
                jx = lay.xr_idx(q)
                ju = lay.ur_idx(q)
                grad[jx:jx + n] -= 2.0 * Pe
                for cidx in range(n):
                    grad[jx + cidx] += float(e @ dPs[cidx] @ e)
                for cidx in range(m):
                    grad[ju + cidx] += float(e @ dPs[n + cidx] @ e)
                hess[jx:jx + n, jx:jx + n] += 2.0 * P
                hess[ix:ix + n, jx:jx + n] -= 2.0 * P
                hess[jx:jx + n, ix:ix + n] -= 2.0 * P
        c["obj"] = (val, grad, hess)
        return c["obj"]

    # -- equality constraints ---------------------------------------------
    def eq_parts(self, z):
        c = self._ev(z)
        if "eq" in c:
            return c["eq"]
        lay = self.lay
        n, m = lay.n, lay.m
        rows = []
        vals = []
        nv = lay.num_vars
        for k in range(lay.N):
            xk = self.x_t if k == 0 else lay.x(z, k)
            uk = lay.u(z, k)
            xk1 = lay.x(z, k + 1)
            A, B = self.model.jac_f(xk, uk)
            vals.append(xk1 - np.asarray(self.model.f(xk, uk)))
            J = np.zeros((n, nv))
            J[:, lay.x_idx(k + 1):lay.x_idx(k + 1) + n] = np.eye(n)
            if k >= 1:
                J[:, lay.x_idx(k):lay.x_idx(k) + n] = -A
            J[:, lay.u_idx(k):lay.u_idx(k) + m] = -B
            rows.append(J)
        if lay.ref_states.stop > lay.ref_states.start:
            for j in range(lay.T):
                xr = lay.xr(z, j)
                ur = lay.ur(z, j)
                A, B = self.model.jac_f(xr, ur)
                vals.append(lay.xr(z, j + 1) - np.asarray(self.model.f(xr, ur)))
                J = np.zeros((n, nv))
                J[:, lay.xr_idx(j + 1):lay.xr_idx(j + 1) + n] += np.eye(n)
                J[:, lay.xr_idx(j):lay.xr_idx(j) + n] += -A
                J[:, lay.ur_idx(j):lay.ur_idx(j) + m] += -B
                rows.append(J)
        ti = self.spec.terminal
        if ti is not None and ti.is_tec and lay.N >= 1:
            xN, r, ref_dec = self._terminal_pair(z)
            vals.append(xN - r[:n])
            J = np.zeros((n, nv))
            J[:, lay.x_idx(lay.N):lay.x_idx(lay.N) + n] = np.eye(n)
            if ref_dec:
                q = self._terminal_ref_index()
                J[:, lay.xr_idx(q):lay.xr_idx(q) + n] += -np.eye(n)
            rows.append(J)
        if vals:
            c["eq"] = (np.concatenate(vals), np.vstack(rows))
        else:
            c["eq"] = (np.zeros(0), np.zeros((0, nv)))
        return c["eq"]

    # -- inequality constraints --------------------------------------------
    def _alpha_value(self, z):
        return float(z[self.lay.alpha.start]) if self.lay.alpha.stop > self.lay.alpha.start else None

    def ineq_parts(self, z):
        c = self._ev(z)
        if "ineq" in c:
            return c["ineq"]
        lay, spec, ti = self.lay, self.spec, self.spec.terminal
        n, m = lay.n, lay.m
        nv = lay.num_vars
        L, l = self.Z.L, self.Z.l
        nz = self.Z.num_rows
        vals = []
        rows = []
        # stage constraints (x_k, u_k) in Z for k = 0..N-1
        for k in range(lay.N):
            xk = self.x_t if k == 0 else lay.x(z, k)
            uk = lay.u(z, k)
            vals.append(L[:, :n] @ xk + L[:, n:] @ uk - l)
            J = np.zeros((nz, nv))
            if k >= 1:
                J[:, lay.x_idx(k):lay.x_idx(k) + n] = L[:, :n]
            J[:, lay.u_idx(k):lay.u_idx(k) + m] = L[:, n:]
            rows.append(J)
        # terminal set constraint
        if ti is not None and not ti.is_tec and lay.N >= 1:
            xN, r, ref_dec = self._terminal_pair(z)
            P, K, dPs, _ = _pf_with_grad(ti, r)
            e = xN - r[:n]
            Pe = P @ e
            V = float(e @ Pe)
            a = self._alpha_value(z)
            J = np.zeros((1, nv))
            J[0, lay.x_idx(lay.N):lay.x_idx(lay.N) + n] = 2.0 * Pe
            if ref_dec:
                q = self._terminal_ref_index()
                jx, ju = lay.xr_idx(q), lay.ur_idx(q)
                J[0, jx:jx + n] += -2.0 * Pe
                for cidx in range(n):
                    J[0, jx + cidx] += float(e @ dPs[cidx] @ e)
                for cidx in range(m):
                    J[0, ju + cidx] += float(e @ dPs[n + cidx] @ e)
            if self.alpha_cost_mode == "fixed":
                vals.append(np.array([V - spec.alpha_fixed]))
            elif self.alpha_cost_mode == "tr":
                vals.append(np.array([V - self.alpha_tr]))
            elif self.alpha_cost_mode == "var":
                a_s = a
                vals.append(np.array([V - a_s ** 2]))
                J[0, lay.alpha.start] = -2.0 * a_s
            elif self.alpha_cost_mode == "var_offset":
                a_s = a
                root = a_s + np.sqrt(ti.alpha_min)
                vals.append(np.array([V - root ** 2]))
                J[0, lay.alpha.start] = -2.0 * root
            else:
                raise RuntimeError("terminal set requested without a size mode")
            rows.append(J)
        # reference rows
        if self.ref_row_mode == "zr":
            La, lb = self._zr_rows
            for j in range(lay.T):
                r = lay.ref(z, j)
                vals.append(La @ r - lb)
                J = np.zeros((La.shape[0], nv))
                J[:, lay.xr_idx(j):lay.xr_idx(j) + n] = La[:, :n]
                J[:, lay.ur_idx(j):lay.ur_idx(j) + m] = La[:, n:]
                rows.append(J)
        elif self.ref_row_mode in ("tight_var", "tight_const"):
            a = self._alpha_value(z)
            scale = a if self.ref_row_mode == "tight_var" else np.sqrt(ti.alpha_min)
            # the minimum-size tightened set coincides for the relaxed mode
            row_form = spec.tightening_mode
            if self.ref_row_mode == "tight_const" and row_form == "contraction_relaxed":
                row_form = "linear_lmax"
            for j in range(lay.T):
                r = lay.ref(z, j)
                if row_form == "exact_lpk":
                    _, Jr, lpk = self._lpk_rows(r)
                    vals.append(L @ r + lpk * scale - l)
                    J = np.zeros((nz, nv))
                    J[:, lay.xr_idx(j):lay.xr_idx(j) + n] = L[:, :n] + scale * Jr[:, :n]
                    J[:, lay.ur_idx(j):lay.ur_idx(j) + m] = L[:, n:] + scale * Jr[:, n:]
                    if self.ref_row_mode == "tight_var":
                        J[:, lay.alpha.start] = lpk
                    rows.append(J)
                elif row_form == "linear_lmax":
                    vals.append(L @ r + ti.L_max * scale - l)
                    J = np.zeros((nz, nv))
                    J[:, lay.xr_idx(j):lay.xr_idx(j) + n] = L[:, :n]
                    J[:, lay.ur_idx(j):lay.ur_idx(j) + m] = L[:, n:]
                    if self.ref_row_mode == "tight_var":
                        J[:, lay.alpha.start] = ti.L_max
                    rows.append(J)
                else:  # contraction_relaxed: L r + Lmax (rho^mod(j+T-N) a + sqrt(amin)) <= l
                    rho_j = ti.rho ** ((j + lay.T - lay.N) % lay.T)
                    vals.append(L @ r + ti.L_max * (rho_j * a + np.sqrt(ti.alpha_min)) - l)
                    J = np.zeros((nz, nv))
                    J[:, lay.xr_idx(j):lay.xr_idx(j) + n] = L[:, :n]
                    J[:, lay.ur_idx(j):lay.ur_idx(j) + m] = L[:, n:]
                    J[:, lay.alpha.start] = ti.L_max * rho_j
                    rows.append(J)
        # set-size bounds
        if lay.alpha.stop > lay.alpha.start:
            a = self._alpha_value(z)
            if spec.tightening_mode == "contraction_relaxed" and self.ref_row_mode == "tight_var":
                lo_b, hi_b = 0.0, np.sqrt(ti.alpha1) - np.sqrt(ti.alpha_min)
            else:
                lo_b, hi_b = np.sqrt(ti.alpha_min), np.sqrt(ti.alpha1)
            vals.append(np.array([lo_b - a, a - hi_b]))
            J = np.zeros((2, nv))
            J[0, lay.alpha.start] = -1.0
            J[1, lay.alpha.start] = 1.0
            rows.append(J)
        # planner coupling constraint
        if self.link is not None:
            a = self._alpha_value(z)
            q = self._terminal_ref_index() if lay.N >= 1 else self.link.terminal_index
            rN = lay.ref(z, q)
            anchor = self.link.r_anchor
            P, K, dPs, _ = _pf_with_grad(ti, rN)
            e = anchor[:n] - rN[:n]
            Pe = P @ e
            V = float(e @ Pe)
            sqrtV = np.sqrt(V + SQRT_GUARD)
            d = anchor - rN
            normd = np.sqrt(float(d @ d) + SQRT_GUARD)
            base = self.link.rho_M * np.sqrt(self.link.alpha_tr)
            vals.append(np.array([base * (1.0 + ti.L_p * normd) + sqrtV - a]))
            J = np.zeros((1, nv))
            jx, ju = lay.xr_idx(q), lay.ur_idx(q)
            # d sqrtV / d rN
            gV = np.zeros(n + m)
            gV[:n] = -2.0 * Pe
            for cidx in range(n + m):
                gV[cidx] += float(e @ dPs[cidx] @ e)
            J[0, jx:jx + n] += gV[:n] / (2.0 * sqrtV)
            J[0, ju:ju + m] += gV[n:] / (2.0 * sqrtV)
            # d norm / d rN
            J[0, jx:jx + n] += base * ti.L_p * (-d[:n] / normd)
            J[0, ju:ju + m] += base * ti.L_p * (-d[n:] / normd)
            J[0, lay.alpha.start] = -1.0
            rows.append(J)
        if vals:
            c["ineq"] = (np.concatenate(vals), np.vstack(rows))
        else:
            c["ineq"] = (np.zeros(0), np.zeros((0, nv)))
        return c["ineq"]

    def _lpk_rows(self, r):
        """L_PK values and their Jacobian w.r.t. the reference vector."""
        ti = self.spec.terminal
        n, m = self.lay.n, self.lay.m
        L = self.Z.L
        P, K, dPs, _ = _pf_with_grad(ti, r)
        X = np.linalg.inv(P)
        X = 0.5 * (X + X.T)
        dXs = dX_dr(ti, r)
        dYs = dY_dr(ti, r)
        Vv = L[:, :n].T + K.T @ L[:, n:].T            # columns v_i
        lpk2 = np.einsum("ij,ik,kj->j", Vv, X, Vv) + SQRT_GUARD
        lpk = np.sqrt(lpk2)
        nz = L.shape[0]
        Jr = np.zeros((nz, n + m))
        XV = X @ Vv
        for cidx in range(n + m):
            dK = (dYs[cidx] - K @ dXs[cidx]) @ P
            dV = dK.T @ L[:, n:].T
            term = (np.einsum("ij,ik,kj->j", Vv, dXs[cidx], Vv)
                    + 2.0 * np.einsum("ij,ij->j", dV, XV))
            Jr[:, cidx] = term / (2.0 * lpk)
        return Vv, Jr, lpk

    # -- public callbacks ---------------------------------------------------
    def make_problem(self, warm_start, meta=None) -> NlpProblem:
        lay = self.lay
        return NlpProblem(
            num_vars=lay.num_vars,
            objective=lambda z: self.objective_parts(z)[0],
            objective_grad=lambda z: self.objective_parts(z)[1],
            objective_gn_hess=lambda z: self.objective_parts(z)[2],
            eq_fun=lambda z: self.eq_parts(z)[0],
            eq_jac=lambda z: self.eq_parts(z)[1],
            ineq_fun=lambda z: self.ineq_parts(z)[0],
            ineq_jac=lambda z: self.ineq_parts(z)[1],
            var_layout=lay.as_dict(),
            warm_start=np.asarray(warm_start, dtype=float),
            meta=meta or {},
        )


@dataclass
class PlannerLink:
    """Coupling data handed from the tracker to the decoupled planner."""

    alpha_tr: float            # terminal set size at the planning time
    r_anchor: np.ndarray       # previous reference at index N + M (cyclic)
    rho_M: float               # contraction factor rho^M
    terminal_index: int        # index of r_N in the new reference (cyclic)


def _rollout_warm(model, x_t, inputs):
    xs = []
    x = np.asarray(x_t, dtype=float)
    for u in inputs:
        x = np.asarray(model.f(x, u), dtype=float)
        xs.append(x)
    return np.concatenate(xs) if xs else np.zeros(0)


def max_feasible_alpha(spec: ProblemSpec, Z: Polytope, ref_mat: np.ndarray,
                       mode: Optional[str] = None) -> float:
    """Largest set-size root variable satisfying the tightening rows at the
    given reference, clipped to the admissible bounds."""
    ti = spec.terminal
    mode = spec.tightening_mode if mode is None else mode
    from .terminal import L_PK
    hi = np.sqrt(ti.alpha1)
    lo = np.sqrt(ti.alpha_min)
    best = hi
    for r in np.atleast_2d(ref_mat):
        marg = Z.l - Z.L @ r
        coef = ti.L_max if mode != "exact_lpk" else L_PK(ti, r, Z)
        if mode == "contraction_relaxed":
            marg = marg - coef * np.sqrt(ti.alpha_min)
        for i in range(Z.num_rows):
            if coef[i] > 1e-12:
                best = min(best, marg[i] / coef[i])
    if mode == "contraction_relaxed":
        return float(np.clip(best, 0.0, np.sqrt(ti.alpha1) - np.sqrt(ti.alpha_min)))
    return float(np.clip(best, lo, hi))


def build_tracking(spec: ProblemSpec, model: Model, Z: Polytope, x_t,
                   ref_window: PeriodicReference, warm_start=None,
                   alpha_tr: Optional[float] = None) -> NlpProblem:
    """Reference tracking MPC over a fixed (periodic) reference window."""
    lay = _Layout(model, spec.N, ref_window.T, with_states=True,
                  with_refs=False, with_alpha=False)
    mode = "tr" if alpha_tr is not None else "fixed"
    if spec.terminal is not None and spec.terminal.is_tec:
        mode = "none"
    elif mode == "fixed" and spec.alpha_fixed is None:
        raise ValueError("quadratic terminal set needs alpha_fixed or alpha_tr")
    tr = _Transcription(model, Z, spec, lay, x_t=x_t, fixed_ref=ref_window,
                        alpha_cost_mode=mode,
                        alpha_tr=alpha_tr)
    if warm_start is None:
        us = [ref_window.point(k).u_r for k in range(spec.N)]
        warm_start = np.concatenate([_rollout_warm(model, x_t, us), np.concatenate(us)])
    return tr.make_problem(warm_start, meta={"variant": "tracking"})


def build_decoupled_tracker(spec: ProblemSpec, model: Model, Z: Polytope, x_t,
                            ref_window: PeriodicReference, alpha_tr: float,
                            warm_start=None) -> NlpProblem:
    if alpha_tr < 0:
        raise ValueError("terminal set size must be nonnegative")
    return build_tracking(spec, model, Z, x_t, ref_window,
                          warm_start=warm_start, alpha_tr=alpha_tr)


def build_ref_planner(spec: ProblemSpec, model: Model, Z: Polytope, y_target,
                      ref_guess: np.ndarray, tighten_alpha_min: bool = False) -> NlpProblem:
    """Periodic reference planning: min distance of the output to the target."""
    y_target = np.atleast_2d(np.asarray(y_target, dtype=float))
    T = y_target.shape[0]
    lay = _Layout(model, 0, T, with_states=False, with_refs=True, with_alpha=False)
    tr = _Transcription(model, Z, spec, lay, y_target=y_target,
                        ref_row_mode="tight_const" if tighten_alpha_min else "zr")
    guess = np.atleast_2d(ref_guess)
    warm = np.concatenate([guess[:, :model.n].ravel(), guess[:, model.n:].ravel()])
    return tr.make_problem(warm, meta={"variant": "ref_planner"})


def build_joint(spec: ProblemSpec, model: Model, Z: Polytope, x_t, y_target,
                ref_guess: np.ndarray, warm_start=None) -> NlpProblem:
    """Joint tracking + artificial periodic reference with fixed terminal size."""
    y_target = np.atleast_2d(np.asarray(y_target, dtype=float))
    T = y_target.shape[0]
    lay = _Layout(model, spec.N, T, with_states=True, with_refs=True, with_alpha=False)
    mode = "none" if (spec.terminal is not None and spec.terminal.is_tec) else "fixed"
    tr = _Transcription(model, Z, spec, lay, x_t=x_t, y_target=y_target,
                        ref_row_mode="zr", alpha_cost_mode=mode)
    if warm_start is None:
        guess = np.atleast_2d(ref_guess)
        us = [guess[k % T, model.n:] for k in range(spec.N)]
        warm_start = np.concatenate([
            _rollout_warm(model, x_t, us), np.concatenate(us) if us else np.zeros(0),
            guess[:, :model.n].ravel(), guess[:, model.n:].ravel()])
    return tr.make_problem(warm_start, meta={"variant": "joint"})


def build_joint_online_alpha(spec: ProblemSpec, model: Model, Z: Polytope, x_t,
                             y_target, ref_guess: np.ndarray,
                             warm_start=None) -> NlpProblem:
    """Joint problem with the terminal set size as a decision variable."""
    ti = spec.terminal
    if ti is None or ti.is_tec:
        raise ValueError("online set size needs quadratic terminal ingredients")
    if spec.tightening_mode == "contraction_relaxed" and ti.rho is None:
        raise ValueError("contraction-relaxed tightening needs a certified rate")
    y_target = np.atleast_2d(np.asarray(y_target, dtype=float))
    T = y_target.shape[0]
    lay = _Layout(model, spec.N, T, with_states=True, with_refs=True, with_alpha=True)
    mode = "var_offset" if spec.tightening_mode == "contraction_relaxed" else "var"
    tr = _Transcription(model, Z, spec, lay, x_t=x_t, y_target=y_target,
                        ref_row_mode="tight_var", alpha_cost_mode=mode)
    if warm_start is None:
        guess = np.atleast_2d(ref_guess)
        us = [guess[k % T, model.n:] for k in range(spec.N)]
        a0 = max_feasible_alpha(spec, Z, guess)
        warm_start = np.concatenate([
            _rollout_warm(model, x_t, us), np.concatenate(us) if us else np.zeros(0),
            guess[:, :model.n].ravel(), guess[:, model.n:].ravel(), [a0]])
    return tr.make_problem(warm_start, meta={"variant": "joint_online_alpha"})


def build_decoupled_planner(spec: ProblemSpec, model: Model, Z: Polytope,
                            y_target_shifted, link: PlannerLink,
                            ref_guess: np.ndarray, warm_start=None) -> NlpProblem:
    """Reference planning coupled to the tracker via terminal-cost continuity."""
    ti = spec.terminal
    if ti is None or ti.is_tec:
        raise ValueError("decoupled planning needs quadratic terminal ingredients")
    if ti.rho is None:
        raise ValueError("decoupled planning needs a certified contraction rate")
    y_target_shifted = np.atleast_2d(np.asarray(y_target_shifted, dtype=float))
    T = y_target_shifted.shape[0]
    lay = _Layout(model, 0, T, with_states=False, with_refs=True, with_alpha=True)
    tr = _Transcription(model, Z, spec, lay, y_target=y_target_shifted,
                        ref_row_mode="tight_var", planner_link=link,
                        alpha_cost_mode="none")
    if warm_start is None:
        guess = np.atleast_2d(ref_guess)
        a0 = max(link.rho_M * np.sqrt(link.alpha_tr)
                 + 0.5 * (1.0 - link.rho_M) * np.sqrt(ti.alpha_min),
                 np.sqrt(ti.alpha_min))
        warm_start = np.concatenate([
            guess[:, :model.n].ravel(), guess[:, model.n:].ravel(), [a0]])
    return tr.make_problem(warm_start, meta={"variant": "decoupled_planner"})


def lift_joint_point(z_joint: np.ndarray, joint: NlpProblem, online: NlpProblem,
                     alpha_sqrt: float) -> np.ndarray:
    """Embed a feasible joint-problem point into the online-size problem."""
    z = np.zeros(online.num_vars)
    for name in ("states", "inputs", "ref_states", "ref_inputs"):
        s_from = joint.var_layout[name]
        s_to = online.var_layout[name]
        z[s_to] = z_joint[s_from]
    z[online.var_layout["alpha"].start] = alpha_sqrt
    return z


def derivative_check(problem: NlpProblem, z=None, n_points: int = 10,
                     seed: int = 0, step: float = 1e-6):
    """Worst relative error of gradients/Jacobians vs central differences."""
    rng = np.random.default_rng(seed)
    z0 = problem.warm_start if z is None else np.asarray(z, dtype=float)
    pts = [z0] + [z0 + 0.01 * rng.normal(size=z0.size) for _ in range(n_points)]
    worst = 0.0
    for zp in pts:
        g = np.asarray(problem.objective_grad(zp))
        Je = np.asarray(problem.eq_jac(zp))
        Ji = np.asarray(problem.ineq_jac(zp))
        ne = Je.shape[0]
        ni = Ji.shape[0]
        for i in range(zp.size):
            d = step * (1.0 + abs(zp[i]))
            zp1 = zp.copy(); zp1[i] += d
            zp2 = zp.copy(); zp2[i] -= d
            fd_g = (problem.objective(zp1) - problem.objective(zp2)) / (2 * d)
            scale = max(1.0, abs(g[i]), abs(fd_g))
            worst = max(worst, abs(g[i] - fd_g) / scale)
            if ne:
                fd = (np.asarray(problem.eq_fun(zp1)) - np.asarray(problem.eq_fun(zp2))) / (2 * d)
                sc = np.maximum(1.0, np.maximum(np.abs(Je[:, i]), np.abs(fd)))
                worst = max(worst, float(np.max(np.abs(Je[:, i] - fd) / sc)))
            if ni:
                fd = (np.asarray(problem.ineq_fun(zp1)) - np.asarray(problem.ineq_fun(zp2))) / (2 * d)
                sc = np.maximum(1.0, np.maximum(np.abs(Ji[:, i]), np.abs(fd)))
                worst = max(worst, float(np.max(np.abs(Ji[:, i] - fd) / sc)))
    return worst


@dataclass
class ConvexityReport:
    num_samples: int
    newton_failures: int
    membership_failures: int

    @property
    def failure_rate(self) -> float:
        return (self.newton_failures + self.membership_failures) / max(self.num_samples, 1)


def check_convexity_samples(model: Model, zr_contains, T: int, num_samples: int,
                            ref_sampler, seed: int = 0, tol: float = 1e-9) -> ConvexityReport:
    """Sampled check that output convex combinations of feasible periodic
    references can be realized as feasible periodic references.

    ``ref_sampler(rng)`` must return a (T, n+m) feasible reference matrix;
    ``zr_contains(r_mat)`` decides membership in the reference constraint
    set. Reconstruction solves the square system (cyclic dynamics + output
    match) with a damped Newton iteration; divergence counts as failure.
    """
    if model.p != model.m:
        raise ValueError("output reconstruction needs as many outputs as inputs")
    rng = np.random.default_rng(seed)
    n, m, p = model.n, model.m, model.p
    newton_fail = 0
    member_fail = 0
    for _ in range(num_samples):
        r1 = ref_sampler(rng)
        r2 = ref_sampler(rng)
        beta = rng.uniform()
        y1 = np.array([model.h(r1[j, :n], r1[j, n:]) for j in range(T)])
        y2 = np.array([model.h(r2[j, :n], r2[j, n:]) for j in range(T)])
        y = beta * y1 + (1 - beta) * y2
        r = beta * r1 + (1 - beta) * r2   # initial guess
        ok = False
        for _ in range(50):
            F = np.zeros(T * (n + p))
            J = np.zeros((T * (n + p), T * (n + m)))
            for j in range(T):
                xj = r[j, :n]
                uj = r[j, n:]
                A, B = model.jac_f(xj, uj)
                C, D = model.jac_h(xj, uj)
                F[j * n:(j + 1) * n] = r[(j + 1) % T, :n] - np.asarray(model.f(xj, uj))
                F[T * n + j * p:T * n + (j + 1) * p] = np.asarray(model.h(xj, uj)) - y[j]
                jn = ((j + 1) % T) * n
                J[j * n:(j + 1) * n, jn:jn + n] += np.eye(n)
                J[j * n:(j + 1) * n, j * n:(j + 1) * n] += -A
                J[j * n:(j + 1) * n, T * n + j * m:T * n + (j + 1) * m] = -B
                J[T * n + j * p:T * n + (j + 1) * p, j * n:(j + 1) * n] = C
                J[T * n + j * p:T * n + (j + 1) * p, T * n + j * m:T * n + (j + 1) * m] = D
            if np.max(np.abs(F)) < tol:
                ok = True
                break
            try:
                dz = np.linalg.solve(J, -F)
            except np.linalg.LinAlgError:
                break
            if not np.all(np.isfinite(dz)) or np.max(np.abs(dz)) > 1e3:
                break
            r = r + np.concatenate([dz[:T * n].reshape(T, n),
                                    dz[T * n:].reshape(T, m)], axis=1)
        if not ok:
            newton_fail += 1
            continue
        if not zr_contains(r):
            member_fail += 1
    return ConvexityReport(num_samples=num_samples, newton_failures=newton_fail,
                           membership_failures=member_fail)
