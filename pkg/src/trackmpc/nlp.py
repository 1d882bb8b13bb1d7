"""Gauss-Newton SQP over a dense dual active-set QP subsolver.

The QP solver follows the dual active-set strategy: starting from the
equality-constrained optimum it adds violated inequalities one at a time,
dropping blocking constraints via ratio tests. With a positive definite
Hessian every add/drop strictly increases the dual objective, so the method
terminates; ties are broken by lowest constraint index. Everything is
deterministic: no randomized pivoting, no timing dependence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class SolverConfig:
    kkt_tol: float = 1e-8
    max_sqp_iters: int = 100
    merit_penalty: float = 1.0          # initial l1 penalty weight
    ls_backtrack: float = 0.5
    hessian_reg: float = 1e-8
    max_qp_pivots: int = 500
    restore_tol: float = 1e-6           # residual allowed after elastic phase-1

    def __post_init__(self):
        if self.kkt_tol <= 0 or self.hessian_reg <= 0:
            raise ValueError("tolerances must be positive")
        if not 0.0 < self.ls_backtrack < 1.0:
            raise ValueError("ls_backtrack must lie in (0, 1)")


@dataclass
class QpSolution:
    status: str                          # "optimal" | "infeasible" | "failed"
    x: Optional[np.ndarray] = None
    lam_eq: Optional[np.ndarray] = None
    lam_in: Optional[np.ndarray] = None
    active_set: tuple = ()
    pivots: int = 0


@dataclass
class SolveResult:
    status: str                          # Optimal | MaxIter | Infeasible | NumericalFailure
    x_opt: Optional[np.ndarray] = None
    objective_value: float = np.nan
    kkt_residual: float = np.nan
    active_set: tuple = ()
    iterations: int = 0
    lam_eq: Optional[np.ndarray] = None
    lam_in: Optional[np.ndarray] = None
    merit_history: list = field(default_factory=list)


class _KktCache:
    """Dense KKT solves for the current working set, refactored on change."""

    def __init__(self, H, A_eq):
        self.H = H
        self.A_eq = A_eq if A_eq is not None and A_eq.size else np.zeros((0, H.shape[0]))

    def solve(self, rows, rhs_top, rhs_bot):
        """Solve [H C'; C 0] [z; nu] = [rhs_top; rhs_bot] with C = [A_eq; rows]."""
        n = self.H.shape[0]
        C = np.vstack([self.A_eq] + ([rows] if rows is not None and len(rows) else []))
        nc = C.shape[0]
        K = np.zeros((n + nc, n + nc))
        K[:n, :n] = self.H
        K[:n, n:] = C.T
        K[n:, :n] = C
        rhs = np.concatenate([rhs_top, rhs_bot])
        sol = np.linalg.solve(K, rhs)
        return sol[:n], sol[n:n + self.A_eq.shape[0]], sol[n + self.A_eq.shape[0]:]


def solve_qp(H, g, A_eq=None, b_eq=None, A_in=None, b_in=None,
             warm_active_set=(), tol=1e-10, max_pivots=500) -> QpSolution:
    """Minimize 0.5 x'Hx + g'x s.t. A_eq x = b_eq, A_in x <= b_in.

    H must be symmetric positive definite (callers regularize). Returns the
    primal-dual solution with complementarity at tolerance and the final
    active set for warm starting. Infeasible problems are flagged, never
    silently relaxed.
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float).ravel()
    n = g.size
    A_eq = np.zeros((0, n)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, dtype=float))
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float).ravel()
    A_in = np.zeros((0, n)) if A_in is None else np.atleast_2d(np.asarray(A_in, dtype=float))
    b_in = np.zeros(0) if b_in is None else np.asarray(b_in, dtype=float).ravel()
    ni = A_in.shape[0]

    kkt = _KktCache(H, A_eq)
    try:
        x, mu, _ = kkt.solve(None, -g, b_eq)
    except np.linalg.LinAlgError:
        return QpSolution(status="failed")

    active: list = []
    lam: list = []
    pivots = 0
    scale = 1.0 + np.abs(b_in).max(initial=0.0) + np.abs(b_eq).max(initial=0.0)

    warm_queue = [i for i in warm_active_set if 0 <= i < ni]

    while True:
        viol = A_in @ x - b_in if ni else np.zeros(0)
        for i in active:
            viol[i] = -np.inf  # members are satisfied by construction
        # prefer the most violated warm-set constraint while any is violated
        p = -1
        best = tol * scale
        for i in warm_queue:
            if i not in active and viol[i] > best:
                p = i
                best = viol[i]
        if p < 0 and ni and viol.size:
            j = int(np.argmax(viol))
            if viol[j] > tol * scale:
                p = j
        if p < 0:
            lam_in = np.zeros(ni)
            for idx, li in zip(active, lam):
                lam_in[idx] = li
            return QpSolution(status="optimal", x=x, lam_eq=mu, lam_in=lam_in,
                              active_set=tuple(sorted(active)), pivots=pivots)

        a_p = A_in[p]
        # inner loop: add constraint p, dropping blockers as needed; t_acc
        # accumulates the multiplier of the incoming constraint.
        t_acc = 0.0
        while True:
            pivots += 1
            if pivots > max_pivots:
                return QpSolution(status="failed", pivots=pivots)
            rows = A_in[active] if active else None
            try:
                z, dmu, r = kkt.solve(rows, a_p, np.zeros(A_eq.shape[0] + len(active)))
            except np.linalg.LinAlgError:
                return QpSolution(status="failed", pivots=pivots)
            a_p_z = float(a_p @ z)
            curr_viol = float(a_p @ x - b_in[p])
            # dual blocking step: active multipliers decrease along r
            t_dual = np.inf
            drop = -1
            for k, idx in enumerate(active):
                if r[k] > 1e-13:
                    t = lam[k] / r[k]
                    if t < t_dual - 1e-15 or (abs(t - t_dual) <= 1e-15 and (drop < 0 or idx < active[drop])):
                        t_dual = t
                        drop = k
            if a_p_z <= 1e-13:
                # constraint normal lies in the span of the working set
                if not np.isfinite(t_dual):
                    return QpSolution(status="infeasible", pivots=pivots)
                # dual-only step: x fixed, multipliers shift toward a_p
                mu = mu - t_dual * dmu
                lam = [li - t_dual * r[k] for k, li in enumerate(lam)]
                t_acc += t_dual
                del lam[drop]
                active.pop(drop)
                continue
            t_full = curr_viol / a_p_z
            if t_full <= t_dual:
                x = x - t_full * z
                mu = mu - t_full * dmu
                lam = [li - t_full * r[k] for k, li in enumerate(lam)]
                active.append(p)
                lam.append(t_acc + t_full)
                break
            x = x - t_dual * z
            mu = mu - t_dual * dmu
            lam = [li - t_dual * r[k] for k, li in enumerate(lam)]
            t_acc += t_dual
            del lam[drop]
            active.pop(drop)


def _regularized(H, floor):
    """Symmetrize and add the smallest Levenberg shift making H factorizable."""
    Hs = 0.5 * (H + H.T)
    scale = max(1.0, float(np.abs(Hs).max()))
    shift = 0.0
    for _ in range(60):
        try:
            np.linalg.cholesky(Hs + shift * np.eye(Hs.shape[0]))
            return Hs + shift * np.eye(Hs.shape[0])
        except np.linalg.LinAlgError:
            shift = floor * scale if shift == 0.0 else shift * 10.0
    raise np.linalg.LinAlgError("could not regularize Hessian")


def _elastic_restoration(H, g, A_eq, c_eq, A_in, c_in, penalty, reg):
    """Phase-1 elastic QP: slacks absorb equality/inequality violations."""
    n = H.shape[0]
    ne = A_eq.shape[0] if A_eq is not None else 0
    ni = A_in.shape[0] if A_in is not None else 0
    ns = 2 * ne + ni
    if ns == 0:
        return None
    Hb = np.zeros((n + ns, n + ns))
    Hb[:n, :n] = H
    Hb[n:, n:] = reg * np.eye(ns)
    gb = np.concatenate([g, penalty * np.ones(ns)])
    # equalities: J d + c = s_plus - s_minus
    Aeq_b = np.zeros((ne, n + ns))
    if ne:
        Aeq_b[:, :n] = A_eq
        Aeq_b[:, n:n + ne] = -np.eye(ne)
        Aeq_b[:, n + ne:n + 2 * ne] = np.eye(ne)
    beq_b = -c_eq if ne else np.zeros(0)
    # inequalities: J d + c <= s ; s >= 0
    rows = []
    rhs = []
    if ni:
        Ain_rows = np.zeros((ni, n + ns))
        Ain_rows[:, :n] = A_in
        Ain_rows[:, n + 2 * ne:] = -np.eye(ni)
        rows.append(Ain_rows)
        rhs.append(-c_in)
    s_nonneg = np.zeros((ns, n + ns))
    s_nonneg[:, n:] = -np.eye(ns)
    rows.append(s_nonneg)
    rhs.append(np.zeros(ns))
    A_in_b = np.vstack(rows)
    b_in_b = np.concatenate(rhs)
    sol = solve_qp(Hb, gb, Aeq_b if ne else None, beq_b if ne else None,
                   A_in_b, b_in_b, max_pivots=2000)
    if sol.status != "optimal":
        return None
    return sol.x[:n]


def _constraint_violation(c_eq, c_in):
    v = 0.0
    if c_eq.size:
        v += float(np.abs(c_eq).sum())
    if c_in.size:
        v += float(np.clip(c_in, 0.0, None).sum())
    return v


def _kkt_residual(grad, c_eq, c_in, J_eq, J_in, mu, lam):
    stat = grad.copy()
    if J_eq is not None and J_eq.size:
        stat += J_eq.T @ mu
    if J_in is not None and J_in.size:
        stat += J_in.T @ lam
    res = float(np.abs(stat).max(initial=0.0))
    if c_eq.size:
        res = max(res, float(np.abs(c_eq).max()))
    if c_in.size:
        res = max(res, float(np.clip(c_in, 0.0, None).max()))
        res = max(res, float(np.abs(lam * c_in).max(initial=0.0)))
        if lam.size:
            res = max(res, float(np.clip(-lam, 0.0, None).max()))
    return res


def solve(problem, config: SolverConfig = None, warm=None) -> SolveResult:
    """Gauss-Newton SQP with l1-merit line search.

    ``problem`` is an NlpProblem-like object exposing ``num_vars``,
    ``objective/objective_grad/objective_gn_hess``, ``eq_fun/eq_jac``,
    ``ineq_fun/ineq_jac`` and ``warm_start``. ``warm`` optionally carries
    (x0, lam_in, active_set) from a previous solve of a structurally
    identical problem.
    """
    cfg = config or SolverConfig()
    x = np.array(problem.warm_start if warm is None else warm[0], dtype=float)
    warm_active = () if warm is None else tuple(warm[2])
    sigma = cfg.merit_penalty
    mu = np.zeros(0)
    lam = np.zeros(0)
    merit_history = []

    for it in range(cfg.max_sqp_iters + 1):
        fval = float(problem.objective(x))
        grad = np.asarray(problem.objective_grad(x), dtype=float)
        c_eq = np.asarray(problem.eq_fun(x), dtype=float)
        c_in = np.asarray(problem.ineq_fun(x), dtype=float)
        if not (np.isfinite(fval) and np.all(np.isfinite(grad))
                and np.all(np.isfinite(c_eq)) and np.all(np.isfinite(c_in))):
            return SolveResult(status="NumericalFailure", x_opt=x, iterations=it,
                               merit_history=merit_history)
        J_eq = np.asarray(problem.eq_jac(x), dtype=float) if c_eq.size else np.zeros((0, x.size))
        J_in = np.asarray(problem.ineq_jac(x), dtype=float) if c_in.size else np.zeros((0, x.size))

        if mu.size != c_eq.size:
            mu = np.zeros(c_eq.size)
        if lam.size != c_in.size:
            lam = np.zeros(c_in.size)
        kres = _kkt_residual(grad, c_eq, c_in, J_eq, J_in, mu, lam)
        if kres <= cfg.kkt_tol:
            return SolveResult(status="Optimal", x_opt=x, objective_value=fval,
                               kkt_residual=kres, active_set=warm_active,
                               iterations=it, lam_eq=mu, lam_in=lam,
                               merit_history=merit_history)
        if it == cfg.max_sqp_iters:
            return SolveResult(status="MaxIter", x_opt=x, objective_value=fval,
                               kkt_residual=kres, active_set=warm_active,
                               iterations=it, lam_eq=mu, lam_in=lam,
                               merit_history=merit_history)

        H = _regularized(np.asarray(problem.objective_gn_hess(x), dtype=float), cfg.hessian_reg)
        qp = solve_qp(H, grad, J_eq if c_eq.size else None, -c_eq if c_eq.size else None,
                      J_in if c_in.size else None, -c_in if c_in.size else None,
                      warm_active_set=warm_active, max_pivots=cfg.max_qp_pivots)
        if qp.status == "infeasible":
            d = _elastic_restoration(H, grad, J_eq if c_eq.size else None, c_eq,
                                     J_in if c_in.size else None, c_in,
                                     penalty=1e4 * (1.0 + sigma), reg=cfg.hessian_reg)
            if d is None:
                return SolveResult(status="Infeasible", x_opt=x, objective_value=fval,
                                   kkt_residual=kres, iterations=it,
                                   merit_history=merit_history)
            qp = QpSolution(status="optimal", x=d, lam_eq=np.zeros(c_eq.size),
                            lam_in=np.zeros(c_in.size), active_set=warm_active)
            ce_try = np.asarray(problem.eq_fun(x + d), dtype=float)
            ci_try = np.asarray(problem.ineq_fun(x + d), dtype=float)
            if _constraint_violation(ce_try, ci_try) > max(cfg.restore_tol,
                                                           0.5 * _constraint_violation(c_eq, c_in)):
                return SolveResult(status="Infeasible", x_opt=x, objective_value=fval,
                                   kkt_residual=kres, iterations=it,
                                   merit_history=merit_history)
        elif qp.status != "optimal":
            return SolveResult(status="NumericalFailure", x_opt=x, iterations=it,
                               merit_history=merit_history)

        d = qp.x
        mu_new = qp.lam_eq if qp.lam_eq is not None and qp.lam_eq.size == c_eq.size else np.zeros(c_eq.size)
        lam_new = qp.lam_in if qp.lam_in is not None and qp.lam_in.size == c_in.size else np.zeros(c_in.size)
        warm_active = qp.active_set

        mult_max = max(np.abs(mu_new).max(initial=0.0), np.abs(lam_new).max(initial=0.0))
        sigma = max(sigma, 2.0 * mult_max)

        viol0 = _constraint_violation(c_eq, c_in)
        merit0 = fval + sigma * viol0
        ddir = float(grad @ d) - sigma * viol0
        alpha = 1.0
        accepted = False
        for _ in range(40):
            x_try = x + alpha * d
            f_try = float(problem.objective(x_try))
            ce_try = np.asarray(problem.eq_fun(x_try), dtype=float)
            ci_try = np.asarray(problem.ineq_fun(x_try), dtype=float)
            merit_try = f_try + sigma * _constraint_violation(ce_try, ci_try)
            if np.isfinite(merit_try) and merit_try <= merit0 + 1e-4 * alpha * min(ddir, 0.0) + 1e-14 * (1 + abs(merit0)):
                accepted = True
                break
            alpha *= cfg.ls_backtrack
        if not accepted or alpha * float(np.abs(d).max(initial=0.0)) < 1e-16:
            # no progress possible along this direction
            return SolveResult(status="MaxIter", x_opt=x, objective_value=fval,
                               kkt_residual=kres, active_set=warm_active,
                               iterations=it + 1, lam_eq=mu_new, lam_in=lam_new,
                               merit_history=merit_history)
        merit_history.append((merit0, merit_try, sigma))
        x = x_try
        mu = mu_new
        lam = lam_new

    return SolveResult(status="MaxIter", x_opt=x, iterations=cfg.max_sqp_iters,
                       merit_history=merit_history)
