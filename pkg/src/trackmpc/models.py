"""Discrete-time plant models, polytopic constraints and reference trajectories.

All dynamics are discrete-time maps x+ = f(x, u); the benchmark systems are
explicit-Euler discretizations of their ODEs with a fixed sampling time.
Jacobians are analytic closed forms for the built-in systems; user models can
fall back to central finite differences via :func:`fd_jacobians`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linprog


class NumericalDomainError(RuntimeError):
    """Raised when a model map returns non-finite values."""


@dataclass(frozen=True)
class Model:
    """Discrete-time nonlinear system with output map and Jacobians.

    Instances are immutable and safe to share across threads; all maps are
    pure functions of their arguments.

    Attributes:
        n, m, p: state, input and output dimensions.
        f: (x, u) -> next state, shape (n,).
        h: (x, u) -> output, shape (p,).
        jac_f: (x, u) -> (A, B) with shapes (n, n), (n, m).
        jac_h: (x, u) -> (C, D) with shapes (p, n), (p, m).
        sampling_h: sampling time in seconds (metadata only).
        name: short identifier used in configs and certificates.
        vectorized: whether f/h accept leading batch dimensions.
    """

    n: int
    m: int
    p: int
    f: Callable
    h: Callable
    jac_f: Callable
    jac_h: Callable
    sampling_h: float = 0.1
    name: str = "model"
    vectorized: bool = False


@dataclass(frozen=True)
class Polytope:
    """Constraint set Z = { z : L z <= l } on stacked (x, u) vectors."""

    L: np.ndarray
    l: np.ndarray

    def __post_init__(self):
        L = np.atleast_2d(np.asarray(self.L, dtype=float))
        l = np.asarray(self.l, dtype=float).ravel()
        if L.shape[0] != l.shape[0]:
            raise ValueError("row count of L must match length of l")
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "l", l)

    @property
    def dim(self) -> int:
        return self.L.shape[1]

    @property
    def num_rows(self) -> int:
        return self.L.shape[0]

    def contains(self, z, tol=1e-9):
        z = np.asarray(z, dtype=float)
        return bool(np.all(self.L @ z <= self.l + tol))

    def margins(self, z):
        """Row-wise slack l - L z (negative entries are violations)."""
        return self.l - self.L @ np.asarray(z, dtype=float)

    def is_bounded(self) -> bool:
        """Check boundedness by verifying finite LP min/max per coordinate."""
        for i in range(self.dim):
            c = np.zeros(self.dim)
            for sgn in (1.0, -1.0):
                c[i] = sgn
                res = linprog(c, A_ub=self.L, b_ub=self.l, bounds=[(None, None)] * self.dim,
                              method="highs")
                if not res.success:
                    return False
            c[i] = 0.0
        return True

    def coordinate_bounds(self):
        """Per-coordinate [lo, hi] obtained from LPs; requires boundedness."""
        lo = np.empty(self.dim)
        hi = np.empty(self.dim)
        for i in range(self.dim):
            c = np.zeros(self.dim)
            c[i] = 1.0
            res = linprog(c, A_ub=self.L, b_ub=self.l, bounds=[(None, None)] * self.dim, method="highs")
            if not res.success:
                raise ValueError("polytope is unbounded or infeasible")
            lo[i] = res.fun
            c[i] = -1.0
            res = linprog(c, A_ub=self.L, b_ub=self.l, bounds=[(None, None)] * self.dim, method="highs")
            if not res.success:
                raise ValueError("polytope is unbounded or infeasible")
            hi[i] = -res.fun
        return lo, hi

    @staticmethod
    def from_bounds(lo: Sequence[float], hi: Sequence[float]) -> "Polytope":
        """Box lo <= z <= hi as polytope rows (z_i <= hi_i, -z_i <= -lo_i)."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        d = lo.size
        L = np.vstack([np.eye(d), -np.eye(d)])
        l = np.concatenate([hi, -lo])
        return Polytope(L, l)


@dataclass(frozen=True)
class Weights:
    """Stage, input and output tracking weights (all symmetric PD)."""

    Q: np.ndarray
    R: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        for nm in ("Q", "R", "S"):
            M = np.atleast_2d(np.asarray(getattr(self, nm), dtype=float))
            if M.shape[0] != M.shape[1] or np.linalg.eigvalsh(0.5 * (M + M.T)).min() <= 0:
                raise ValueError(f"{nm} must be symmetric positive definite")
            object.__setattr__(self, nm, 0.5 * (M + M.T))


@dataclass(frozen=True)
class ReferencePoint:
    """A reference pair r = (x_r, u_r)."""

    x_r: np.ndarray
    u_r: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x_r", np.asarray(self.x_r, dtype=float).ravel())
        object.__setattr__(self, "u_r", np.asarray(self.u_r, dtype=float).ravel())

    @property
    def z(self) -> np.ndarray:
        """Stacked (x_r, u_r) vector."""
        return np.concatenate([self.x_r, self.u_r])


@dataclass(frozen=True)
class PeriodicReference:
    """A T-periodic sequence of reference points with cyclic indexing."""

    points: tuple

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(self.points))
        if len(self.points) < 1:
            raise ValueError("period must be at least 1")

    @property
    def T(self) -> int:
        return len(self.points)

    def point(self, k: int) -> ReferencePoint:
        return self.points[k % self.T]

    def as_matrix(self) -> np.ndarray:
        """(T, n+m) array of stacked reference vectors."""
        return np.array([p.z for p in self.points])

    def shifted(self, steps: int) -> "PeriodicReference":
        s = steps % self.T
        return PeriodicReference(self.points[s:] + self.points[:s])

    def dynamic_residual(self, model: Model) -> float:
        """Worst cyclic consistency error max_k |x_r(k+1) - f(x_r(k), u_r(k))|."""
        worst = 0.0
        for k in range(self.T):
            pk = self.points[k]
            nxt = self.points[(k + 1) % self.T]
            worst = max(worst, float(np.max(np.abs(nxt.x_r - model.f(pk.x_r, pk.u_r)))))
        return worst

    def check_consistent(self, model: Model, feas_tol: float = 1e-8):
        res = self.dynamic_residual(model)
        if res > feas_tol:
            raise ValueError(f"reference violates cyclic dynamics by {res:.3e}")

    @staticmethod
    def from_matrix(Zr: np.ndarray, n: int) -> "PeriodicReference":
        Zr = np.atleast_2d(np.asarray(Zr, dtype=float))
        return PeriodicReference(tuple(ReferencePoint(row[:n], row[n:]) for row in Zr))


def step(model: Model, x, u):
    """One step of the dynamics; raises on non-finite results."""
    xn = np.asarray(model.f(np.asarray(x, dtype=float), np.asarray(u, dtype=float)), dtype=float)
    if not np.all(np.isfinite(xn)):
        raise NumericalDomainError("dynamics returned non-finite values")
    return xn


def fd_jacobians(fun, n_out):
    """Central-difference Jacobian factory for user-supplied maps.

    Returns a callable (x, u) -> (Jx, Ju) using step 1e-6 * (1 + |coord|).
    """

    def jac(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        Jx = np.empty((n_out, x.size))
        Ju = np.empty((n_out, u.size))
        for i in range(x.size):
            d = 1e-6 * (1.0 + abs(x[i]))
            xp = x.copy(); xp[i] += d
            xm = x.copy(); xm[i] -= d
            Jx[:, i] = (np.asarray(fun(xp, u)) - np.asarray(fun(xm, u))) / (2 * d)
        for i in range(u.size):
            d = 1e-6 * (1.0 + abs(u[i]))
            up = u.copy(); up[i] += d
            um = u.copy(); um[i] -= d
            Ju[:, i] = (np.asarray(fun(x, up)) - np.asarray(fun(x, um))) / (2 * d)
        return Jx, Ju

    return jac


# ---------------------------------------------------------------------------
# CSTR benchmark (exothermic reactor, Euler discretization, h = 0.1 s)
# ---------------------------------------------------------------------------

CSTR_PARAMS = dict(theta_f=20.0, k=300.0, M=5.0, x_f=0.3947, x_c=0.3816, alpha_f=0.117, h=0.1)


def _cstr_rhs(x, u, p=CSTR_PARAMS):
    E = np.exp(-p["M"] / x[..., 1])
    react = p["k"] * x[..., 0] * E
    d1 = (1.0 - x[..., 0]) / p["theta_f"] - react
    d2 = (p["x_f"] - x[..., 1]) / p["theta_f"] + react - p["alpha_f"] * u[..., 0] * (x[..., 1] - p["x_c"])
    return np.stack([d1, d2], axis=-1)


def make_cstr():
    """CSTR model: states (concentration, temperature), input coolant flow.

    Returns (Model, Polytope, Weights) with Z = [0,1]^2 x [0,2], Q = I,
    R = 0.01, S = 1e3 and output y = x2.
    """
    p = CSTR_PARAMS
    h_s = p["h"]

    def f(x, u):
        return x + h_s * _cstr_rhs(x, u)

    def h_out(x, u):
        return np.asarray(x[..., 1:2])

    def jac_f(x, u):
        E = np.exp(-p["M"] / x[1])
        dE = E * p["M"] / x[1] ** 2
        Jx = np.array([
            [-1.0 / p["theta_f"] - p["k"] * E, -p["k"] * x[0] * dE],
            [p["k"] * E, -1.0 / p["theta_f"] + p["k"] * x[0] * dE - p["alpha_f"] * u[0]],
        ])
        Ju = np.array([[0.0], [-p["alpha_f"] * (x[1] - p["x_c"])]])
        return np.eye(2) + h_s * Jx, h_s * Ju

    def jac_h(x, u):
        return np.array([[0.0, 1.0]]), np.array([[0.0]])

    model = Model(n=2, m=1, p=1, f=f, h=h_out, jac_f=jac_f, jac_h=jac_h,
                  sampling_h=h_s, name="cstr", vectorized=True)
    poly = Polytope.from_bounds([0.0, 0.0, 0.0], [1.0, 1.0, 2.0])
    weights = Weights(Q=np.eye(2), R=np.array([[0.01]]), S=np.array([[1e3]]))
    return model, poly, weights


def cstr_steady_state(x2: float):
    """Steady state (x, u) of the CSTR with temperature x2 > x_c.

    Solves the continuous-time balance equations in closed form; Euler fixed
    points coincide with zeros of the continuous right-hand side.
    """
    p = CSTR_PARAMS
    if x2 <= p["x_c"]:
        raise ValueError("steady-state manifold requires x2 > x_c")
    E = np.exp(-p["M"] / x2)
    x1 = 1.0 / (1.0 + p["theta_f"] * p["k"] * E)
    u = ((p["x_f"] - x2) / p["theta_f"] + p["k"] * x1 * E) / (p["alpha_f"] * (x2 - p["x_c"]))
    return np.array([x1, x2]), np.array([u])


def cstr_steady_grid(x2_lo: float, x2_hi: float, count: int) -> np.ndarray:
    """(count, 3) grid of stacked steady states sampled uniformly in x2."""
    rows = []
    for x2 in np.linspace(x2_lo, x2_hi, count):
        x, u = cstr_steady_state(x2)
        rows.append(np.concatenate([x, u]))
    return np.array(rows)


# ---------------------------------------------------------------------------
# Ball-and-plate benchmark (Euler discretization, h = 0.1 s)
# ---------------------------------------------------------------------------

# Gravitational acceleration is not part of the published parameter set; we
# adopt the standard 9.81 m/s^2.
BALL_PLATE_GRAVITY = 9.81


def make_ball_plate():
    """Ball-and-plate model: ball position/velocity plus plate angles/rates.

    State [z1, z2, dz1, dz2, b1, b2, db1, db2], input are the angular
    accelerations, output the ball position. Returns (Model, Polytope,
    Weights) with Q = I_8, R = 0.1 I_2, S = I_2.
    """
    g = BALL_PLATE_GRAVITY
    h_s = 0.1
    c = 5.0 / 7.0

    def f(x, u):
        z1, z2 = x[..., 0], x[..., 1]
        dz1, dz2 = x[..., 2], x[..., 3]
        b1, b2 = x[..., 4], x[..., 5]
        db1, db2 = x[..., 6], x[..., 7]
        a1 = c * (z1 * db1 ** 2 + db1 * z2 * db2 + g * np.sin(b1))
        a2 = c * (z2 * db2 ** 2 + db2 * z1 * db1 + g * np.sin(b2))
        d = np.stack([dz1, dz2, a1, a2, db1, db2, u[..., 0], u[..., 1]], axis=-1)
        return x + h_s * d

    def h_out(x, u):
        return np.asarray(x[..., 0:2])

    def jac_f(x, u):
        z1, z2, dz1, dz2, b1, b2, db1, db2 = x
        A = np.eye(8)
        A[0, 2] += h_s
        A[1, 3] += h_s
        A[2, 0] += h_s * c * db1 ** 2
        A[2, 1] += h_s * c * db1 * db2
        A[2, 4] += h_s * c * g * np.cos(b1)
        A[2, 6] += h_s * c * (2 * z1 * db1 + z2 * db2)
        A[2, 7] += h_s * c * db1 * z2
        A[3, 0] += h_s * c * db2 * db1
        A[3, 1] += h_s * c * db2 ** 2
        A[3, 5] += h_s * c * g * np.cos(b2)
        A[3, 6] += h_s * c * db2 * z1
        A[3, 7] += h_s * c * (2 * z2 * db2 + z1 * db1)
        A[4, 6] += h_s
        A[5, 7] += h_s
        B = np.zeros((8, 2))
        B[6, 0] = h_s
        B[7, 1] = h_s
        return A, B

    def jac_h(x, u):
        C = np.zeros((2, 8))
        C[0, 0] = 1.0
        C[1, 1] = 1.0
        return C, np.zeros((2, 2))

    model = Model(n=8, m=2, p=2, f=f, h=h_out, jac_f=jac_f, jac_h=jac_h,
                  sampling_h=h_s, name="ball_plate", vectorized=True)
    lim = np.array([0.06, 0.06, 0.2, 0.2, np.pi / 3, np.pi / 3, 1.0, 1.0, 2.0, 2.0])
    poly = Polytope.from_bounds(-lim, lim)
    weights = Weights(Q=np.eye(8), R=0.1 * np.eye(2), S=np.eye(2))
    return model, poly, weights


# ---------------------------------------------------------------------------
# Linear time-invariant test system
# ---------------------------------------------------------------------------

def make_lti(A, B, C, D, Z: Polytope, sampling_h: float = 0.1, name: str = "lti"):
    """Linear model x+ = A x + B u, y = C x + D u with exact Jacobians."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    D = np.atleast_2d(np.asarray(D, dtype=float))
    n, m = B.shape
    p = C.shape[0]
    if A.shape != (n, n) or C.shape != (p, n) or D.shape != (p, m):
        raise ValueError("inconsistent LTI matrix dimensions")
    if Z.dim != n + m:
        raise ValueError("polytope dimension must equal n + m")

    def f(x, u):
        return x @ A.T + u @ B.T if x.ndim > 1 else A @ x + B @ u

    def h_out(x, u):
        return x @ C.T + u @ D.T if x.ndim > 1 else C @ x + D @ u

    def jac_f(x, u):
        return A, B

    def jac_h(x, u):
        return C, D

    model = Model(n=n, m=m, p=p, f=f, h=h_out, jac_f=jac_f, jac_h=jac_h,
                  sampling_h=sampling_h, name=name, vectorized=True)
    return model, Z


def make_double_integrator(pos_lim=5.0, vel_lim=2.0, u_lim=1.0, h_s=0.1):
    """Double integrator with position output; common LTI test fixture."""
    A = np.array([[1.0, h_s], [0.0, 1.0]])
    B = np.array([[0.0], [h_s]])
    C = np.array([[1.0, 0.0]])
    D = np.array([[0.0]])
    Z = Polytope.from_bounds([-pos_lim, -vel_lim, -u_lim], [pos_lim, vel_lim, u_lim])
    return make_lti(A, B, C, D, Z)


MODEL_FACTORIES = {"cstr": make_cstr, "ball_plate": make_ball_plate}


def model_fingerprint(model: Model, poly: Polytope) -> str:
    """Stable hash of the model identity used to pair runs with certificates."""
    import hashlib

    items = [model.name, str(model.n), str(model.m), str(model.p),
             repr(model.sampling_h), np.array2string(poly.L, precision=17),
             np.array2string(poly.l, precision=17)]
    return hashlib.sha256("|".join(items).encode()).hexdigest()[:16]
