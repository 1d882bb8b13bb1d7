"""Terminal ingredients: quadratic terminal cost, ellipsoidal set, tightening.

Two flavours are supported.  The terminal-equality-constraint (TEC) variant
carries no data beyond a controllability check.  The quadratic variant holds
a parameterized cost V_f(x, r) = |x - x_r|^2_{P_f(r)} with P_f(r) = X(r)^-1,
K_f(r) = Y(r) P_f(r), where X, Y are affine in polynomial features of the
reference point.  Synthesis is Riccati-seeded: discrete Riccati solutions on
a reference grid are fitted by least squares; if the fitted family fails the
a-posteriori matrix-inequality validation, a cutting-plane polish (linear
eigenvector cuts on the convex LMI feasibility set, solved with the package's
own dense QP) repairs a constant candidate.  No external SDP solver is used.

All certified quantities (decrease inequality, set sizes, contraction rate,
continuity constant) are re-verified by sampling; certificates record the
validation outcome and a content hash.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .models import Model, Polytope, ReferencePoint
from .nlp import solve_qp


class SynthesisError(RuntimeError):
    """Raised when no candidate passes matrix-inequality validation."""


class SynthesisRegionError(RuntimeError):
    """Raised when an evaluation leaves the validated region (X(r) not SPD)."""


# ---------------------------------------------------------------------------
# Parameter features and ingredient evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ThetaMap:
    """Scaled polynomial features theta_j(r) = ((r_c - mid_c)/half_c)^p.

    ``feats`` is a tuple of (coordinate, power) pairs. Features are
    continuously differentiable, which the terminal-cost continuity constant
    relies on.
    """

    feats: tuple
    mid: np.ndarray
    half: np.ndarray

    def values(self, r: np.ndarray) -> np.ndarray:
        s = (r - self.mid) / self.half
        return np.array([s[c] ** p for c, p in self.feats])

    def grad(self, r: np.ndarray) -> np.ndarray:
        """(num_feats, dim r) Jacobian of the feature vector."""
        s = (r - self.mid) / self.half
        G = np.zeros((len(self.feats), r.size))
        for j, (c, p) in enumerate(self.feats):
            G[j, c] = p * s[c] ** (p - 1) / self.half[c] if p >= 1 else 0.0
        return G

    @property
    def size(self) -> int:
        return len(self.feats)

    @staticmethod
    def constant(dim: int) -> "ThetaMap":
        return ThetaMap(feats=(), mid=np.zeros(dim), half=np.ones(dim))

    @staticmethod
    def from_grid(points: np.ndarray, degree: int) -> "ThetaMap":
        """Features of every coordinate that varies over the grid."""
        lo = points.min(axis=0)
        hi = points.max(axis=0)
        varying = np.where(hi - lo > 1e-9)[0]
        mid = 0.5 * (lo + hi)
        half = np.maximum(0.5 * (hi - lo), 1e-12)
        feats = tuple((int(c), p) for c in varying for p in range(1, degree + 1))
        return ThetaMap(feats=feats, mid=mid, half=half)


@dataclass
class TerminalIngredients:
    kind: str                                  # "tec" | "quadratic"
    X_basis: list = field(default_factory=list)   # [X0, X1, ...]
    Y_basis: list = field(default_factory=list)
    theta: Optional[ThetaMap] = None
    alpha1: float = 0.0
    alpha_min: float = 1e-8
    rho: Optional[float] = None
    c_u: float = 1.0
    L_p: float = 0.0
    eps_tilde: float = 1e-6
    L_max: Optional[np.ndarray] = None
    Q: Optional[np.ndarray] = None
    R: Optional[np.ndarray] = None
    x_floor: float = 1e-10

    @property
    def is_tec(self) -> bool:
        return self.kind == "tec"


def _as_ref_vector(r) -> np.ndarray:
    if isinstance(r, ReferencePoint):
        return r.z
    return np.asarray(r, dtype=float).ravel()


def evaluate_X(ti: TerminalIngredients, r) -> np.ndarray:
    rv = _as_ref_vector(r)
    X = ti.X_basis[0].copy()
    if ti.theta is not None and ti.theta.size:
        th = ti.theta.values(rv)
        for j in range(ti.theta.size):
            X = X + th[j] * ti.X_basis[j + 1]
    return 0.5 * (X + X.T)


def evaluate_Y(ti: TerminalIngredients, r) -> np.ndarray:
    rv = _as_ref_vector(r)
    Y = ti.Y_basis[0].copy()
    if ti.theta is not None and ti.theta.size:
        th = ti.theta.values(rv)
        for j in range(ti.theta.size):
            Y = Y + th[j] * ti.Y_basis[j + 1]
    return Y


def evaluate_Pf(ti: TerminalIngredients, r) -> np.ndarray:
    X = evaluate_X(ti, r)
    try:
        c, low = sla.cho_factor(X)
    except np.linalg.LinAlgError:
        raise SynthesisRegionError("X(r) is not positive definite at this reference")
    if np.min(np.diag(c)) ** 2 < ti.x_floor:
        raise SynthesisRegionError("X(r) eigenvalue below the SPD floor")
    P = sla.cho_solve((c, low), np.eye(X.shape[0]))
    return 0.5 * (P + P.T)


def evaluate_Kf(ti: TerminalIngredients, r) -> np.ndarray:
    return evaluate_Y(ti, r) @ evaluate_Pf(ti, r)


def evaluate_X_clamped(ti: TerminalIngredients, r, floor: float = 1e-8):
    """X(r) with an eigenvalue floor; for solver callbacks that may probe
    references outside the validated region during intermediate iterations.

    Returns (X, clamped flag). Converged solutions are re-checked with the
    strict evaluation.
    """
    X = evaluate_X(ti, r)
    w = np.linalg.eigvalsh(X)
    if w[0] >= floor:
        return X, False
    return X + (floor - w[0]) * np.eye(X.shape[0]), True


def terminal_control(ti: TerminalIngredients, x, r) -> np.ndarray:
    rv = _as_ref_vector(r)
    n = x.size
    if ti.is_tec:
        return rv[n:].copy()
    K = evaluate_Kf(ti, rv)
    return rv[n:] + K @ (np.asarray(x) - rv[:n])


def terminal_cost(ti: TerminalIngredients, x, r) -> float:
    if ti.is_tec:
        return 0.0
    rv = _as_ref_vector(r)
    e = np.asarray(x) - rv[: np.asarray(x).size]
    return float(e @ evaluate_Pf(ti, rv) @ e)


def dX_dr(ti: TerminalIngredients, r) -> list:
    """List over reference coordinates c of dX/dr_c (n x n each)."""
    rv = _as_ref_vector(r)
    n = ti.X_basis[0].shape[0]
    out = [np.zeros((n, n)) for _ in range(rv.size)]
    if ti.theta is None or not ti.theta.size:
        return out
    G = ti.theta.grad(rv)
    for j in range(ti.theta.size):
        for c in np.nonzero(G[j])[0]:
            out[c] = out[c] + G[j, c] * ti.X_basis[j + 1]
    return out


def dY_dr(ti: TerminalIngredients, r) -> list:
    rv = _as_ref_vector(r)
    m, n = ti.Y_basis[0].shape
    out = [np.zeros((m, n)) for _ in range(rv.size)]
    if ti.theta is None or not ti.theta.size:
        return out
    G = ti.theta.grad(rv)
    for j in range(ti.theta.size):
        for c in np.nonzero(G[j])[0]:
            out[c] = out[c] + G[j, c] * ti.Y_basis[j + 1]
    return out


# ---------------------------------------------------------------------------
# Reference grids
# ---------------------------------------------------------------------------

@dataclass
class ReferenceGrid:
    """Sampled reference points with successor references for pair checks.

    ``points`` is (g, n+m); ``successors[i]`` is a (k_i, n+m) array of
    admissible next references r+ with x_r+ = f(x_r, u_r).
    """

    points: np.ndarray
    successors: list

    @property
    def size(self) -> int:
        return self.points.shape[0]


def steady_grid(points: np.ndarray) -> ReferenceGrid:
    """Grid of fixed points: each point is its own successor."""
    return ReferenceGrid(points=np.atleast_2d(points),
                         successors=[p[None, :] for p in np.atleast_2d(points)])


def box_grid(model: Model, Z: Polytope, count: int, seed: int,
             succ_per_point: int = 2) -> ReferenceGrid:
    """Rejection-sampled references over Z with within-Z successors."""
    lo, hi = Z.coordinate_bounds()
    rng = np.random.default_rng(seed)
    n = model.n
    pts = []
    succs = []
    guard = 0
    while len(pts) < count and guard < 100 * count:
        guard += 1
        r = lo + (hi - lo) * rng.uniform(size=lo.size)
        if not Z.contains(r):
            continue
        with np.errstate(all="ignore"):
            xp = np.asarray(model.f(r[:n], r[n:]), dtype=float)
        if not np.all(np.isfinite(xp)):
            continue
        if np.any(xp < lo[:n]) or np.any(xp > hi[:n]):
            continue
        ss = []
        for _ in range(succ_per_point):
            up = lo[n:] + (hi[n:] - lo[n:]) * rng.uniform(size=model.m)
            cand = np.concatenate([xp, up])
            if Z.contains(cand):
                ss.append(cand)
        if not ss:
            ss.append(np.concatenate([xp, r[n:]]))
        pts.append(r)
        succs.append(np.array(ss))
    if len(pts) < count:
        raise SynthesisError("could not sample enough reference pairs inside Z")
    return ReferenceGrid(points=np.array(pts), successors=succs)


def corner_points(Z: Polytope, coords, base=None) -> np.ndarray:
    """All sign combinations of the given coordinates at their box bounds."""
    lo, hi = Z.coordinate_bounds()
    base = np.zeros(lo.size) if base is None else np.asarray(base, dtype=float)
    out = [base.copy()]
    import itertools

    for signs in itertools.product((0, 1), repeat=len(coords)):
        p = base.copy()
        for c, s in zip(coords, signs):
            p[c] = lo[c] if s == 0 else hi[c]
        out.append(p)
    return np.array(out)


@dataclass
class GridSpec:
    """How to grid the reference region for synthesis and validation."""

    kind: str                       # "steady" | "box"
    points: Optional[np.ndarray] = None      # synthesis points for kind="steady"
    val_points: Optional[np.ndarray] = None  # finer exact grid for validation
    count: int = 100
    validation_factor: int = 4
    seed: int = 0
    mode: str = "parameterized"     # "parameterized" | "constant"
    degree_schedule: tuple = (1, 2, 3)
    eta_schedule: tuple = (1.0, 1.5, 2.0, 3.0, 5.0, 8.0)
    const_margin: float = 0.5       # decrease-margin demanded in constant synthesis
    seed_corner_coords: tuple = ()  # state coords whose corners seed constant synthesis
    eps_tilde: Optional[float] = None
    alpha_cap: Optional[float] = None

    def synthesis_grid(self, model: Model, Z: Polytope) -> ReferenceGrid:
        if self.kind == "steady":
            return steady_grid(self.points)
        return box_grid(model, Z, self.count, self.seed)

    def validation_points(self, model: Model, Z: Polytope) -> ReferenceGrid:
        if self.kind == "steady":
            if self.val_points is None:
                raise ValueError("steady grids need an explicit finer validation grid")
            return steady_grid(self.val_points)
        return box_grid(model, Z, self.validation_factor * self.count, self.seed + 1)


# ---------------------------------------------------------------------------
# Validation of the decrease matrix inequality
# ---------------------------------------------------------------------------

@dataclass
class ValidationReport:
    grid_size: int
    worst_decrease_margin: float
    worst_constraint_margin: float
    rho_certified: Optional[float]
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.worst_decrease_margin >= 0.0 and not self.failures

    def payload(self) -> dict:
        return {
            "grid_size": self.grid_size,
            "worst_decrease_margin": self.worst_decrease_margin,
            "worst_constraint_margin": self.worst_constraint_margin,
            "rho_certified": self.rho_certified,
            "num_failures": len(self.failures),
        }


def validate_decrease(model: Model, ti: TerminalIngredients, grid: ReferenceGrid,
                      Q=None, R=None) -> ValidationReport:
    """Check the decrease matrix inequality on all grid pairs.

    Margin at a pair (r, r+) is the smallest eigenvalue of
    P(r) - Ak' P(r+) Ak - Q - K'RK - eps_tilde I.
    """
    Q = ti.Q if Q is None else Q
    R = ti.R if R is None else R
    n = model.n
    worst = np.inf
    worst_pd = np.inf
    failures = []
    for i in range(grid.size):
        r = grid.points[i]
        try:
            X = evaluate_X(ti, r)
            pd = float(np.linalg.eigvalsh(X).min())
            worst_pd = min(worst_pd, pd)
            if pd < ti.x_floor:
                failures.append((i, "X not SPD", pd))
                continue
            P = evaluate_Pf(ti, r)
            K = evaluate_Kf(ti, r)
        except SynthesisRegionError as exc:
            failures.append((i, str(exc), np.nan))
            continue
        A, B = model.jac_f(r[:n], r[n:])
        Ak = A + B @ K
        base = P - Q - K.T @ R @ K - ti.eps_tilde * np.eye(n)
        for rp in grid.successors[i]:
            try:
                Pp = evaluate_Pf(ti, rp)
            except SynthesisRegionError as exc:
                failures.append((i, str(exc), np.nan))
                continue
            E = base - Ak.T @ Pp @ Ak
            margin = float(np.linalg.eigvalsh(0.5 * (E + E.T)).min())
            if margin < worst:
                worst = margin
            if margin < 0:
                failures.append((i, "decrease violated", margin))
    return ValidationReport(grid_size=grid.size, worst_decrease_margin=worst,
                            worst_constraint_margin=worst_pd, rho_certified=None,
                            failures=failures)


# ---------------------------------------------------------------------------
# Riccati helpers
# ---------------------------------------------------------------------------

def solve_dare(A, B, Q, R):
    """Discrete algebraic Riccati solve with jitter escalation.

    scipy's QZ-based solver can fail on integrator chains; small diagonal
    jitter on Q resolves this in practice.
    """
    for jit in (0.0, 1e-9, 1e-6, 1e-4):
        try:
            P = sla.solve_discrete_are(A, B, Q + jit * np.eye(Q.shape[0]), R)
            return 0.5 * (P + P.T)
        except (np.linalg.LinAlgError, ValueError):
            continue
    raise SynthesisError("discrete Riccati equation failed to solve")


def lqr_gain(A, B, P, R):
    return -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------

def _fit_basis(points, targets, theta: ThetaMap):
    """Least-squares fit targets_i ~ C0 + sum_j theta_j(r_i) C_j."""
    g = points.shape[0]
    F = np.hstack([np.ones((g, 1)), np.array([theta.values(r) for r in points])]) \
        if theta.size else np.ones((g, 1))
    flat = np.array([t.ravel() for t in targets])
    coef, *_ = np.linalg.lstsq(F, flat, rcond=None)
    shape = targets[0].shape
    return [coef[k].reshape(shape) for k in range(coef.shape[0])]


def _scaling(Z: Polytope, n: int):
    lo, hi = Z.coordinate_bounds()
    half = np.maximum(0.5 * (hi - lo), 1e-9)
    return np.diag(half[:n]), np.diag(half[n:])


def _synth_parameterized(model, Z, Q, R, spec, grid, val_grid, eps_tilde):
    n = model.n
    last_report = None
    for eta in spec.eta_schedule:
        Qs = eta * Q + 2.0 * eps_tilde * np.eye(n)
        Ps, Ks = [], []
        try:
            for r in grid.points:
                A, B = model.jac_f(r[:n], r[n:])
                P = solve_dare(A, B, Qs, R)
                Ps.append(P)
                Ks.append(lqr_gain(A, B, P, R))
        except SynthesisError:
            continue
        Xs = [np.linalg.inv(P) for P in Ps]
        for degree in spec.degree_schedule:
            theta = ThetaMap.from_grid(grid.points, degree)
            Xb = _fit_basis(grid.points, Xs, theta)
            ti = TerminalIngredients(kind="quadratic", X_basis=Xb, Y_basis=[],
                                     theta=theta, eps_tilde=eps_tilde, Q=Q, R=R)
            # fit Y to reproduce the per-point gains under the fitted X
            Ys = []
            ok = True
            for i, r in enumerate(grid.points):
                try:
                    Xf = evaluate_X(ti, r)
                    if np.linalg.eigvalsh(Xf).min() < ti.x_floor:
                        ok = False
                        break
                    Ys.append(Ks[i] @ Xf)
                except SynthesisRegionError:
                    ok = False
                    break
            if not ok:
                continue
            ti.Y_basis = _fit_basis(grid.points, Ys, theta)
            report = validate_decrease(model, ti, val_grid, Q, R)
            last_report = report
            if report.passed:
                return ti, report
    raise SynthesisError(
        "parameterized synthesis failed validation; worst margin "
        f"{last_report.worst_decrease_margin if last_report else np.nan:.3e}")


class _LmiWorkspace:
    """Cutting-plane feasibility for a constant (X, Y) pair, box-scaled."""

    def __init__(self, model, Z, Q, R, eps_tilde, margin_decrease):
        self.model = model
        n, m = model.n, model.m
        self.n, self.m = n, m
        self.Dx, self.Du = _scaling(Z, n)
        self.Dxi = np.linalg.inv(self.Dx)
        self.Qs = self.Dx @ (Q + (2 * eps_tilde + margin_decrease) * np.eye(n)) @ self.Dx
        self.Rs = self.Du @ R @ self.Du
        self.Qh = sla.sqrtm(self.Qs).real
        self.Rh = sla.sqrtm(self.Rs).real
        self.NM = 3 * n + m
        self.iu = np.triu_indices(n)
        self.nX = len(self.iu[0])
        self.nxi = self.nX + m * n

    def scaled_AB(self, p):
        A, B = self.model.jac_f(p[:self.n], p[self.n:])
        return self.Dxi @ A @ self.Dx, self.Dxi @ B @ self.Du

    def unpack(self, xi):
        n = self.n
        X = np.zeros((n, n))
        X[self.iu] = xi[:self.nX]
        X = X + X.T - np.diag(np.diag(X))
        return X, xi[self.nX:].reshape(self.m, n)

    def pack(self, X, Y):
        return np.concatenate([X[self.iu], Y.ravel()])

    def lmi(self, X, Y, At, Bt):
        n, m = self.n, self.m
        AXBY = At @ X + Bt @ Y
        M = np.zeros((self.NM, self.NM))
        M[:n, :n] = X
        M[:n, n:2 * n] = AXBY.T
        M[:n, 2 * n:3 * n] = X @ self.Qh
        M[:n, 3 * n:] = Y.T @ self.Rh
        M[n:2 * n, :n] = AXBY
        M[n:2 * n, n:2 * n] = X
        M[2 * n:3 * n, :n] = self.Qh @ X
        M[2 * n:3 * n, 2 * n:3 * n] = np.eye(n)
        M[3 * n:, :n] = self.Rh @ Y
        M[3 * n:, 3 * n:] = np.eye(m)
        return M

    def cut(self, v, At, Bt):
        """Linear cut v' M(X, Y) v = g' xi + const."""
        n = self.n
        v1, v2, v3, v4 = v[:n], v[n:2 * n], v[2 * n:3 * n], v[3 * n:]
        GX = (np.outer(v1, v1) + np.outer(v2, v2)
              + At.T @ np.outer(v2, v1) + np.outer(v1, v2) @ At
              + self.Qh @ np.outer(v3, v1) + np.outer(v1, v3) @ self.Qh)
        GX = 0.5 * (GX + GX.T)
        GY = 2 * np.outer(Bt.T @ v2, v1) + 2 * np.outer(self.Rh @ v4, v1)
        GXp = 2 * GX - np.diag(np.diag(GX))
        return np.concatenate([GXp[self.iu], GY.ravel()]), float(v3 @ v3 + v4 @ v4)

    def feasibility(self, ABs, xi0, margin=1e-7, iters=1500):
        xi = xi0.copy()
        cuts_g, cuts_c = [], []
        for _ in range(iters):
            X, Y = self.unpack(xi)
            worst = np.inf
            for At, Bt in ABs:
                wv, V = np.linalg.eigh(self.lmi(X, Y, At, Bt))
                worst = min(worst, wv[0])
                for j in range(self.NM):
                    if wv[j] > margin + 3e-4:
                        break
                    g, c = self.cut(V[:, j], At, Bt)
                    cuts_g.append(g)
                    cuts_c.append(c)
            if worst >= margin - 1e-10:
                return xi, True
            sol = solve_qp(np.eye(self.nxi), -xi,
                           A_in=-np.array(cuts_g), b_in=np.array(cuts_c) - margin,
                           max_pivots=8000)
            if sol.status != "optimal":
                margin *= 0.25
                if margin < 1e-12:
                    return xi, False
                continue
            xi = sol.x
            if len(cuts_g) > 2500:
                keep = sorted(sol.active_set)
                cuts_g = [cuts_g[i] for i in keep]
                cuts_c = [cuts_c[i] for i in keep]
        return xi, False


def _synth_constant(model, Z, Q, R, spec, grid, val_grid, eps_tilde):
    n = model.n
    ws = _LmiWorkspace(model, Z, Q, R, eps_tilde, spec.const_margin)
    lo, hi = Z.coordinate_bounds()
    center = 0.5 * (lo + hi)
    seeds = [center]
    if spec.seed_corner_coords:
        seeds = list(corner_points(Z, spec.seed_corner_coords, base=center))
    ABs = [ws.scaled_AB(p) for p in seeds]
    At0, Bt0 = ws.scaled_AB(center)
    P0 = solve_dare(At0, Bt0, ws.Qs, ws.Rs)
    X0 = np.linalg.inv(P0)
    xi = ws.pack(X0, lqr_gain(At0, Bt0, P0, ws.Rs) @ X0)

    def to_ingredients(xi_val):
        X, Y = ws.unpack(xi_val)
        Pt = np.linalg.inv(X)
        P = ws.Dxi @ Pt @ ws.Dxi
        K = ws.Du @ (Y @ Pt) @ ws.Dxi
        P = 0.5 * (P + P.T)
        Xc = np.linalg.inv(P)
        return TerminalIngredients(kind="quadratic", X_basis=[0.5 * (Xc + Xc.T)],
                                   Y_basis=[K @ Xc], theta=ThetaMap.constant(n + model.m),
                                   eps_tilde=eps_tilde, Q=Q, R=R)

    report = None
    xi_cold = xi.copy()
    for outer in range(12):
        xi_try, ok = ws.feasibility(ABs, xi)
        if not ok:
            # warm starts stuck on a cut boundary can stall; retry cold once
            xi_try, ok = ws.feasibility(ABs, xi_cold)
        if not ok:
            raise SynthesisError("constant-candidate cutting planes did not converge")
        xi = xi_try
        ti = to_ingredients(xi)
        report = validate_decrease(model, ti, val_grid, Q, R)
        if report.passed:
            return ti, report
        # refine with the worst violating pairs (up to three per round)
        ranked = sorted((f for f in report.failures if np.isfinite(f[2])), key=lambda f: f[2])
        seen = set()
        for f in ranked:
            if f[0] in seen:
                continue
            seen.add(f[0])
            ABs.append(ws.scaled_AB(val_grid.points[f[0]]))
            if len(seen) >= 3:
                break
    raise SynthesisError(
        f"constant synthesis failed validation; worst margin {report.worst_decrease_margin:.3e}")


def synthesize_quadratic(model: Model, Z: Polytope, Q, R, grid_spec: GridSpec,
                         validation_grid: Optional[ReferenceGrid] = None):
    """Build quadratic terminal ingredients passing a-posteriori validation.

    Returns (TerminalIngredients, ValidationReport). The ingredients carry
    only the cost family; set sizes and constants are computed separately
    (see ``build_certificate``).
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    eps_tilde = grid_spec.eps_tilde
    if eps_tilde is None:
        eps_tilde = 1e-6 * float(np.linalg.eigvalsh(Q).min())
    grid = grid_spec.synthesis_grid(model, Z)
    val_grid = validation_grid if validation_grid is not None \
        else grid_spec.validation_points(model, Z)
    if grid_spec.mode == "constant":
        return _synth_constant(model, Z, Q, R, grid_spec, grid, val_grid, eps_tilde)
    return _synth_parameterized(model, Z, Q, R, grid_spec, grid, val_grid, eps_tilde)


# ---------------------------------------------------------------------------
# Set sizes, tightening, constants
# ---------------------------------------------------------------------------

def compute_alpha1(model: Model, ti: TerminalIngredients, grid: ReferenceGrid,
                   alpha_cap: Optional[float] = None, samples: int = 10000,
                   rel_tol: float = 1e-3, seed: int = 0) -> float:
    """Largest sampled-certified terminal-set level for the cost decrease.

    Bisects on alpha; for each candidate, samples states in the sublevel set
    (half on the boundary) across grid pairs and requires the nonlinear
    decrease V_f(x+, r+) <= V_f(x, r) - l(x, k_f(x, r), r).
    """
    n = model.n
    Q, R = ti.Q, ti.R
    pre = []
    for i in range(grid.size):
        r = grid.points[i]
        P = evaluate_Pf(ti, r)
        K = evaluate_Kf(ti, r)
        pre.append((r, P, K, np.linalg.cholesky(evaluate_X(ti, r)), grid.successors[i]))
    if alpha_cap is None:
        lam_min = min(float(np.linalg.eigvalsh(Pm).min()) for _, Pm, _, _, _ in pre)
        # cap so the ellipsoid radius stays within the coarse scale of the data
        alpha_cap = lam_min * (float(np.max(np.abs(grid.points))) + 1.0) ** 2

    def decrease_ok(alpha: float) -> bool:
        rng = np.random.default_rng(seed)
        idx = rng.integers(0, len(pre), samples)
        W = rng.normal(size=(samples, n))
        W /= np.linalg.norm(W, axis=1, keepdims=True)
        s = np.where(rng.uniform(size=samples) < 0.5, 1.0,
                     np.sqrt(rng.uniform(size=samples)))
        for k in range(samples):
            r, P, K, L, succ = pre[idx[k]]
            x = r[:n] + np.sqrt(alpha) * s[k] * (L @ W[k])
            u = r[n:] + K @ (x - r[:n])
            with np.errstate(all="ignore"):
                xp = np.asarray(model.f(x, u), dtype=float)
            if not np.all(np.isfinite(xp)):
                return False
            V0 = (x - r[:n]) @ P @ (x - r[:n])
            ell = (x - r[:n]) @ Q @ (x - r[:n]) + (u - r[n:]) @ R @ (u - r[n:])
            rp = succ[k % len(succ)]
            try:
                Pp = evaluate_Pf(ti, rp)
            except SynthesisRegionError:
                return False
            if (xp - rp[:n]) @ Pp @ (xp - rp[:n]) > V0 - ell + 1e-12:
                return False
        return True

    if decrease_ok(alpha_cap):
        return float(alpha_cap)
    lo_a, hi_a = 0.0, alpha_cap
    while hi_a - lo_a > rel_tol * hi_a:
        mid = 0.5 * (lo_a + hi_a)
        if decrease_ok(mid):
            lo_a = mid
        else:
            hi_a = mid
    if lo_a <= 0.0:
        raise SynthesisRegionError("no positive terminal-set level passed the decrease check")
    return float(lo_a)


def L_PK(ti: TerminalIngredients, r, Z: Polytope) -> np.ndarray:
    """Support values of the terminal ellipsoid under each constraint row."""
    rv = _as_ref_vector(r)
    n = ti.X_basis[0].shape[0]
    X = evaluate_X(ti, rv)
    try:
        np.linalg.cholesky(X)
    except np.linalg.LinAlgError:
        raise SynthesisRegionError("X(r) not SPD in tightening evaluation")
    K = evaluate_Kf(ti, rv)
    V = Z.L[:, :n].T + K.T @ Z.L[:, n:].T      # v_i columns
    return np.sqrt(np.maximum(np.einsum("ij,ik,kj->j", V, X, V), 0.0))


def compute_L_max(ti: TerminalIngredients, Z: Polytope, points=None,
                  count: int = 4000, seed: int = 0) -> np.ndarray:
    """Row-wise maximum of L_PK over the validated reference region.

    For parameterized ingredients the maximum is taken over the supplied
    grid points (the fit is only certified there); constant ingredients are
    evaluated over box samples of Z.
    """
    if points is None:
        lo, hi = Z.coordinate_bounds()
        rng = np.random.default_rng(seed)
        points = lo + (hi - lo) * rng.uniform(size=(count, lo.size))
    mx = None
    for r in np.atleast_2d(points):
        vals = L_PK(ti, r, Z)
        mx = vals if mx is None else np.maximum(mx, vals)
    return mx


def compute_alpha2(ti: TerminalIngredients, Z: Polytope, Zr_points) -> float:
    """Largest level keeping the terminal set inside Z over the given points."""
    Zr_points = np.atleast_2d(Zr_points)
    if Zr_points.size == 0:
        raise ValueError("Zr_points must be non-empty")
    alpha2 = np.inf
    for r in Zr_points:
        lpk = L_PK(ti, r, Z)
        marg = Z.l - Z.L @ r
        for i in range(Z.num_rows):
            if lpk[i] > 1e-12:
                alpha2 = min(alpha2, (max(marg[i], 0.0) / lpk[i]) ** 2)
            elif marg[i] < 0:
                alpha2 = 0.0
    return float(alpha2)


def estimate_rho(model: Model, ti: TerminalIngredients, grid: ReferenceGrid,
                 safety: float = 1.02) -> float:
    """Sampled contraction rate of the terminal cost.

    The raw rate is the worst generalized eigenvalue over grid pairs; it is
    inflated by the safety factor to over-approximate sampling risk but
    clamped to stay strictly below 1 (halfway between the raw rate and 1).
    Only a raw rate at or above 1 makes contraction unavailable.
    """
    n = model.n
    rho2 = 0.0
    for i in range(grid.size):
        r = grid.points[i]
        P = evaluate_Pf(ti, r)
        K = evaluate_Kf(ti, r)
        A, B = model.jac_f(r[:n], r[n:])
        Ak = A + B @ K
        for rp in grid.successors[i]:
            Pp = evaluate_Pf(ti, rp)
            rho2 = max(rho2, float(sla.eigh(Ak.T @ Pp @ Ak, P, eigvals_only=True).max()))
    raw = float(np.sqrt(max(rho2, 0.0)))
    if raw >= 1.0:
        raise SynthesisRegionError("no certifiable contraction rate below 1")
    return min(safety * raw, 0.5 * (1.0 + raw))


def estimate_Lp(ti: TerminalIngredients, grid: ReferenceGrid,
                safety: float = 1.5, max_pairs: int = 20000, seed: int = 0) -> float:
    """Continuity constant: P(r~) - P(r) <= L_p |r - r~| P(r) on sampled pairs."""
    if ti.theta is None or not ti.theta.size:
        return 0.0
    pts = grid.points
    g = pts.shape[0]
    rng = np.random.default_rng(seed)
    if g * g <= max_pairs:
        pairs = [(i, j) for i in range(g) for j in range(g) if i != j]
    else:
        pairs = [(int(a), int(b)) for a, b in zip(rng.integers(0, g, max_pairs),
                                                  rng.integers(0, g, max_pairs)) if a != b]
    Ps = [evaluate_Pf(ti, r) for r in pts]
    worst = 0.0
    for i, j in pairs:
        d = float(np.linalg.norm(pts[i] - pts[j]))
        if d < 1e-12:
            continue
        lam = float(sla.eigh(Ps[j] - Ps[i], Ps[i], eigvals_only=True).max())
        worst = max(worst, lam / d)
    return safety * worst


def c_u_bound(ti: TerminalIngredients, Q, grid: ReferenceGrid) -> float:
    """sup over the grid of the generalized eigenvalue lambda_max(P_f(r), Q)."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    worst = 0.0
    for r in grid.points:
        P = evaluate_Pf(ti, r)
        worst = max(worst, float(sla.eigh(P, Q, eigvals_only=True).max()))
    return max(worst, 1.0)


def tec_controllability(model: Model, ref_points: np.ndarray, N0: Optional[int] = None):
    """Rank margins of the time-varying controllability map along references.

    Returns the smallest singular-value ratio over the sampled reference
    points; a value near zero indicates the terminal-equality variant lacks
    its local controllability premise.
    """
    n, m = model.n, model.m
    N0 = n if N0 is None else N0
    ref_points = np.atleast_2d(ref_points)
    worst = np.inf
    for r in ref_points:
        x = r[:n].copy()
        As, Bs = [], []
        for _ in range(N0):
            A, B = model.jac_f(x, r[n:])
            As.append(A)
            Bs.append(B)
            x = np.asarray(model.f(x, r[n:]), dtype=float)
        blocks = []
        for k in range(N0):
            M = Bs[k]
            for j in range(k + 1, N0):
                M = As[j] @ M
            blocks.append(M)
        C = np.hstack(blocks)
        sv = np.linalg.svd(C, compute_uv=False)
        worst = min(worst, sv[min(n, len(sv)) - 1] / sv[0])
    return float(worst)


# ---------------------------------------------------------------------------
# Certificates
# ---------------------------------------------------------------------------

class CertificateError(RuntimeError):
    """Raised on checksum or schema mismatches when loading certificates."""


@dataclass
class Certificate:
    """Bundle of validated terminal ingredients plus provenance metadata."""

    ingredients: TerminalIngredients
    report: ValidationReport
    model_name: str
    model_hash: str
    grid_meta: dict

    def payload(self) -> dict:
        ti = self.ingredients
        body = {
            "schema_version": 1,
            "model_name": self.model_name,
            "model_hash": self.model_hash,
            "kind": ti.kind,
            "grid_meta": self.grid_meta,
            "validation": self.report.payload(),
        }
        if ti.kind == "quadratic":
            body.update({
                "X_basis": [M.tolist() for M in ti.X_basis],
                "Y_basis": [M.tolist() for M in ti.Y_basis],
                "theta": {
                    "feats": [[int(c), int(p)] for c, p in ti.theta.feats],
                    "mid": ti.theta.mid.tolist(),
                    "half": ti.theta.half.tolist(),
                },
                "alpha1": ti.alpha1,
                "alpha_min": ti.alpha_min,
                "rho": ti.rho,
                "c_u": ti.c_u,
                "L_p": ti.L_p,
                "eps_tilde": ti.eps_tilde,
                "L_max": None if ti.L_max is None else ti.L_max.tolist(),
                "Q": ti.Q.tolist(),
                "R": ti.R.tolist(),
                "x_floor": ti.x_floor,
            })
        return body


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_certificate(cert: Certificate, path):
    body = cert.payload()
    digest = hashlib.sha256(_canonical_json(body).encode()).hexdigest()
    with open(path, "w") as fh:
        json.dump({"body": body, "checksum": digest}, fh, indent=1, sort_keys=True)


def load_certificate(path) -> Certificate:
    try:
        with open(path) as fh:
            blob = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CertificateError(f"certificate file is not valid JSON: {exc}") from exc
    if not isinstance(blob, dict) or set(blob) != {"body", "checksum"}:
        raise CertificateError("malformed certificate file")
    body = blob["body"]
    digest = hashlib.sha256(_canonical_json(body).encode()).hexdigest()
    if digest != blob["checksum"]:
        raise CertificateError("certificate checksum mismatch")
    if body.get("schema_version") != 1:
        raise CertificateError("unsupported certificate schema version")
    if body["kind"] == "tec":
        ti = TerminalIngredients(kind="tec")
    else:
        th = body["theta"]
        theta = ThetaMap(feats=tuple((c, p) for c, p in th["feats"]),
                         mid=np.array(th["mid"]), half=np.array(th["half"]))
        ti = TerminalIngredients(
            kind="quadratic",
            X_basis=[np.array(M) for M in body["X_basis"]],
            Y_basis=[np.array(M) for M in body["Y_basis"]],
            theta=theta,
            alpha1=body["alpha1"], alpha_min=body["alpha_min"], rho=body["rho"],
            c_u=body["c_u"], L_p=body["L_p"], eps_tilde=body["eps_tilde"],
            L_max=None if body["L_max"] is None else np.array(body["L_max"]),
            Q=np.array(body["Q"]), R=np.array(body["R"]), x_floor=body["x_floor"],
        )
    report = ValidationReport(
        grid_size=body["validation"]["grid_size"],
        worst_decrease_margin=body["validation"]["worst_decrease_margin"],
        worst_constraint_margin=body["validation"]["worst_constraint_margin"],
        rho_certified=body["validation"]["rho_certified"],
    )
    return Certificate(ingredients=ti, report=report, model_name=body["model_name"],
                       model_hash=body["model_hash"], grid_meta=body["grid_meta"])


def build_certificate(model: Model, Z: Polytope, weights, grid_spec: GridSpec,
                      alpha_min: float = 1e-8, model_hash: str = "",
                      want_rho: bool = True) -> Certificate:
    """Full synthesis pipeline: cost family, set level, tightening constants."""
    ti, report = synthesize_quadratic(model, Z, weights.Q, weights.R, grid_spec)
    grid = grid_spec.synthesis_grid(model, Z)
    ti.alpha1 = compute_alpha1(model, ti, grid, alpha_cap=grid_spec.alpha_cap,
                               seed=grid_spec.seed)
    ti.alpha_min = alpha_min
    ti.c_u = c_u_bound(ti, weights.Q, grid)
    ti.L_p = estimate_Lp(ti, grid)
    if grid_spec.kind == "steady":
        ti.L_max = compute_L_max(ti, Z, points=grid.points)
    else:
        ti.L_max = compute_L_max(ti, Z, seed=grid_spec.seed)
    if want_rho:
        try:
            ti.rho = estimate_rho(model, ti, grid)
        except SynthesisRegionError:
            ti.rho = None
    report.rho_certified = ti.rho
    meta = {"kind": grid_spec.kind, "count": int(grid.size),
            "validation_factor": grid_spec.validation_factor,
            "mode": grid_spec.mode, "seed": grid_spec.seed}
    return Certificate(ingredients=ti, report=report, model_name=model.name,
                       model_hash=model_hash, grid_meta=meta)
