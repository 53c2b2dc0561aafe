"""One-step densities on a single atom.

Given one atom with children probabilities ``q``, mean-zero increments
``w`` and moment targets ``y`` (log-domain), build weights ``z`` with

* ``0 < z <= 1 + eps`` and ``sum(q z) = 1``,
* ``sum(q z w) = 0`` (the weighted increment is again mean-zero),
* ``sum(q z y) < infinity`` with the heavy children damped by ``1/y``.

In one dimension the weights come from a closed-form ratio of the
positive and negative parts of the damped increment. In higher dimensions
they come from the gradient of a convex field built from the barrier
``f(a) = a (1 + eps/pi (arctan a - pi/2))`` minimized over the unit ball.
A grid-based minimizer (:func:`minimize_field_net`) is provided as an
independent oracle for the gradient path.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import BoundaryMinimizer, InvalidProblem, MaxIterations, NoFeasibleK

LN2 = math.log(2.0)
TOL_MART = 1e-10
TOL_Z = 1e-10
RANK_TOL = 1e-10
K_MIN_EXP = 0
K_MAX_EXP = 1023
BOUNDARY_SLACK = 1e-9


def _logsumexp(x):
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return -math.inf
    m = float(np.max(x))
    if m == -math.inf:
        return -math.inf
    return m + math.log(float(np.sum(np.exp(x - m))))


@dataclass(frozen=True, eq=False)
class OneStepProblem:
    """One atom of the filtration and its children.

    Attributes
    ----------
    atom : str
        Id of the conditioning atom.
    q : (m,) array
        Conditional child probabilities.
    w : (m, d) array
        Increment values at the children.
    log_y : (m,) array
        ``log E[Y | child]``; ``-inf`` encodes a zero target.
    children : tuple of str
        Child ids, for diagnostics only.
    """

    atom: str
    q: np.ndarray
    w: np.ndarray
    log_y: np.ndarray
    children: tuple = ()

    @classmethod
    def make(cls, q, w, log_y=None, atom="atom", children=()):
        q = np.asarray(q, dtype=float)
        w = np.asarray(w, dtype=float)
        if w.ndim == 1:
            w = w[:, None]
        log_y = np.zeros(len(q)) if log_y is None else np.asarray(log_y, dtype=float)
        return cls(atom, q, w, log_y, tuple(children))

    @property
    def dimension(self) -> int:
        return self.w.shape[1]

    @cached_property
    def scale(self) -> float:
        return float(np.max(np.linalg.norm(self.w, axis=1))) if len(self.q) else 0.0

    def drift(self) -> np.ndarray:
        return self.q @ self.w

    def validate(self, tol: float = TOL_MART) -> "OneStepProblem":
        m = len(self.q)
        if m == 0 or self.w.shape[0] != m or self.log_y.shape != (m,):
            raise InvalidProblem(f"{self.atom}: inconsistent shapes")
        if np.any(self.q <= 0) or abs(math.fsum(self.q) - 1.0) > 1e-12:
            raise InvalidProblem(f"{self.atom}: child probabilities invalid")
        if not np.all(np.isfinite(self.w)):
            raise InvalidProblem(f"{self.atom}: non-finite increments")
        if np.any(np.isnan(self.log_y)) or np.any(self.log_y == math.inf):
            raise InvalidProblem(f"{self.atom}: moment target not finite")
        drift = float(np.linalg.norm(self.drift()))
        if drift > tol * (1.0 + self.scale):
            raise InvalidProblem(
                f"{self.atom}: increment has conditional mean {drift:.3e}"
            )
        return self


# -- barrier ------------------------------------------------------------------

def barrier(eps_f: float, a):
    """``(f(a), f'(a), f''(a))`` for the convex barrier with parameter ``eps_f``.

    ``f'`` increases from ``1 - eps_f`` to ``1``; ``f'' = 2 eps_f / (pi (1+a^2)^2)``.
    """
    if not 0.0 < eps_f < 1.0:
        raise ValueError(f"barrier parameter must lie in (0, 1), got {eps_f}")
    a = np.asarray(a, dtype=float)
    c = eps_f / math.pi
    # pi/2 - arctan(a), accurate for large positive a
    cot = np.arctan2(1.0, a)
    f = a * (1.0 - c * cot)
    one = 1.0 + a * a
    f1 = 1.0 - c * (cot - a / one)
    f1 = np.clip(f1, 1.0 - eps_f, 1.0)
    f2 = 2.0 * c / (one * one)
    return f, f1, f2


# -- predictable range --------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RangeProjection:
    """Orthogonal projection ``R`` onto the complement of ``span{w_j}``."""

    matrix: np.ndarray
    span_rank: int

    @property
    def rank(self) -> int:
        return self.matrix.shape[0] - self.span_rank


def predictable_range(problem: OneStepProblem, rank_tol: float = RANK_TOL) -> RangeProjection:
    """Largest projection annihilating every increment.

    The span of the increments is read off an SVD; singular values below
    ``rank_tol * sigma_max`` count as zero.
    """
    d = problem.dimension
    w = problem.w
    if w.size == 0 or not np.any(w):
        return RangeProjection(np.eye(d), 0)
    _, s, vt = np.linalg.svd(w, full_matrices=False)
    r = int(np.sum(s > rank_tol * s[0]))
    basis = vt[:r]
    R = np.eye(d) - basis.T @ basis
    R = 0.5 * (R + R.T)
    return RangeProjection(R, r)


# -- convex field -------------------------------------------------------------

def _Rmat(R, d):
    if R is None:
        return np.zeros((d, d))
    return R.matrix if isinstance(R, RangeProjection) else np.asarray(R, dtype=float)


def field_value(problem: OneStepProblem, R, eps_f: float, alpha, u):
    """``h(u) = sum_j q_j f(alpha_j w_j . u) + |R u|^2 / 2``; ``u`` may be a stack of points."""
    Rm = _Rmat(R, problem.dimension)
    u = np.asarray(u, dtype=float)
    A = np.asarray(alpha, dtype=float)[:, None] * problem.w
    a = u @ A.T
    f, _, _ = barrier(eps_f, a)
    Ru = u @ Rm.T
    return f @ problem.q + 0.5 * np.sum(Ru * Ru, axis=-1)


def field_gradient(problem: OneStepProblem, R, eps_f: float, alpha, u):
    """``sum_j q_j alpha_j f'(alpha_j w_j . u) w_j + R u``."""
    Rm = _Rmat(R, problem.dimension)
    u = np.asarray(u, dtype=float)
    A = np.asarray(alpha, dtype=float)[:, None] * problem.w
    _, f1, _ = barrier(eps_f, u @ A.T)
    return (f1 * problem.q) @ A + u @ Rm.T


def gradient_bound(problem: OneStepProblem, R, alpha) -> float:
    """Upper bound on ``|grad h|`` over the unit ball (``|f'| < 1``, ``|R| <= 1``)."""
    Rm = _Rmat(R, problem.dimension)
    alpha = np.asarray(alpha, dtype=float)
    lw = float(np.sum(problem.q * alpha * np.linalg.norm(problem.w, axis=1)))
    return lw + (1.0 if np.any(np.abs(Rm) > 1e-12) else 0.0)


@dataclass
class FieldMinimum:
    u: np.ndarray
    value: float
    residual: float          # |grad h(u) + mu u|
    on_boundary: bool
    mu: float
    iterations: int


class _Field:
    """Value, gradient and Hessian of ``h + mu |u|^2 / 2`` for one problem."""

    def __init__(self, problem, Rm, eps_f, alpha):
        self.q = problem.q
        self.A = np.asarray(alpha, dtype=float)[:, None] * problem.w
        self.R = Rm
        self.eps_f = eps_f
        self.d = problem.dimension

    def value(self, u, mu=0.0):
        f, _, _ = barrier(self.eps_f, self.A @ u)
        Ru = self.R @ u
        return float(self.q @ f + 0.5 * Ru @ Ru + 0.5 * mu * u @ u)

    def all(self, u, mu=0.0):
        f, f1, f2 = barrier(self.eps_f, self.A @ u)
        Ru = self.R @ u
        h = float(self.q @ f + 0.5 * Ru @ Ru + 0.5 * mu * u @ u)
        g = (self.q * f1) @ self.A + Ru + mu * u
        H = (self.A.T * (self.q * f2)) @ self.A + self.R + mu * np.eye(self.d)
        return h, g, H


def _newton(field, u, mu, tol, max_iter, escape=None, min_iter=0):
    """Damped Newton; returns ``(u, |g|, converged, iterations)``."""
    h, g, H = field.all(u, mu)
    gn = float(np.linalg.norm(g))
    for it in range(max_iter):
        if gn <= tol and (it >= min_iter or gn == 0.0):
            return u, gn, True, it
        try:
            s = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            s = np.linalg.lstsq(H, -g, rcond=None)[0]
        slope = float(g @ s)
        if slope >= 0:
            s, slope = -g, -gn * gn
        t = 1.0
        while True:
            un = u + t * s
            hn, gnew, Hn = field.all(un, mu)
            gnn = float(np.linalg.norm(gnew))
            if hn <= h + 1e-4 * t * slope:
                break
            # below rounding resolution of h, accept any gradient decrease
            if gnn < gn and hn <= h + 1e-13 * (1.0 + abs(h)):
                break
            t *= 0.5
            if t < 1e-14:
                return u, gn, gn <= tol, it
        u, h, g, H, gn = un, hn, gnew, Hn, gnn
        if escape is not None and float(np.linalg.norm(u)) > escape:
            return u, gn, False, it + 1
    return u, gn, gn <= tol, max_iter


def minimize_field(problem: OneStepProblem, R, eps_f: float, alpha,
                   tol_grad: float | None = None, max_iter: int = 200) -> FieldMinimum:
    """Minimize the convex field over the closed unit ball.

    Interior minimizers are found by damped Newton from the origin and
    certified by ``|grad h(U)| <= tol_grad``. Otherwise the minimizer sits
    on the sphere; it is located as ``argmin h + mu |u|^2 / 2`` with the
    multiplier ``mu`` bisected until ``|U| = 1``.

    Raises
    ------
    MaxIterations
        When neither phase converges.
    """
    d = problem.dimension
    Rm = _Rmat(R, d)
    if tol_grad is None:
        tol_grad = 1e-11 * (1.0 + problem.scale)
    field = _Field(problem, Rm, eps_f, alpha)
    u0 = np.zeros(d)
    u, gn, ok, its = _newton(field, u0, 0.0, tol_grad, max_iter, escape=2.0)
    total = its
    if ok and float(np.linalg.norm(u)) < 1.0:
        return FieldMinimum(u, field.value(u), gn, False, 0.0, total)

    mu_hi = 1.0 + problem.scale
    u_hi = u0
    for _ in range(200):
        u_hi, gh, ok, its = _newton(field, u_hi, mu_hi, tol_grad, max_iter)
        total += its
        if not ok:
            raise MaxIterations(f"{problem.atom}: inner Newton failed", problem.atom)
        if np.linalg.norm(u_hi) <= 1.0:
            break
        mu_hi *= 4.0
    mu_lo = 0.0
    u_cur = u_hi
    for _ in range(200):
        nrm = float(np.linalg.norm(u_hi))
        if 1.0 - 1e-13 <= nrm <= 1.0 or mu_hi - mu_lo <= 1e-15 * mu_hi:
            break
        if mu_hi < 1e-13 * (1.0 + problem.scale):
            break
        mid = 0.25 * mu_hi if mu_lo == 0.0 else math.sqrt(mu_lo * mu_hi)
        u_cur, gm, ok, its = _newton(field, u_hi, mid, tol_grad, max_iter, min_iter=1)
        total += its
        if not ok:
            raise MaxIterations(f"{problem.atom}: inner Newton failed", problem.atom)
        if np.linalg.norm(u_cur) > 1.0:
            mu_lo = mid
        else:
            mu_hi, u_hi = mid, u_cur
    U = u_hi
    nrm = float(np.linalg.norm(U))
    if nrm < 1.0 - BOUNDARY_SLACK:
        # interior after all: polish without the multiplier
        Up, gn, ok, its = _newton(field, U, 0.0, tol_grad, max_iter, escape=2.0)
        total += its
        if ok and np.linalg.norm(Up) < 1.0:
            return FieldMinimum(Up, field.value(Up), gn, False, 0.0, total)
        if not ok and np.linalg.norm(Up) <= 1.0:
            raise MaxIterations(f"{problem.atom}: Newton failed to converge", problem.atom)
        # the unconstrained minimum lies outside: U is the constrained one
    g = field_gradient(problem, Rm, eps_f, alpha, U)
    res = float(np.linalg.norm(g + mu_hi * U))
    return FieldMinimum(U, field.value(U), res, True, mu_hi, total)


# -- net oracle ---------------------------------------------------------------

@dataclass
class NetMinimum:
    u: np.ndarray
    value: float
    lipschitz: float         # sup |grad h| bound over the ball
    global_upper: float
    global_lower: float
    path: list
    fallbacks: int


def _project_ball(x):
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(1.0, n)


def _lattice(center, radius, spacing, d, bound):
    """Integer-indexed lattice points ``spacing * k`` within ``radius`` (sup-norm) of ``center``.

    Returns ``(indices, points)`` sorted lexicographically by index and
    restricted to ``|point| <= bound``.
    """
    lo = np.floor((center - radius) / spacing).astype(int)
    hi = np.ceil((center + radius) / spacing).astype(int)
    axes = [np.arange(lo[i], hi[i] + 1) for i in range(d)]
    idx = np.array(np.meshgrid(*axes, indexing="ij")).reshape(d, -1).T
    pts = idx * spacing
    keep = np.linalg.norm(pts, axis=1) <= bound
    return idx[keep], pts[keep]


def _global_minimum(hfun, gfun, d, resolution, max_cells=2_000_000):
    """Branch and bound over the unit ball with the convexity lower bound.

    Cubes are split until their circumradius is below ``resolution``; a
    cube is dropped once ``h(x) - |grad h(x)| rho`` (``x`` its centre
    projected into the ball, ``rho`` the reach of the cube from ``x``)
    exceeds the best value seen, so every global minimizer lies in one of
    the returned cells. Returns ``(best, lower, best_u, cell_x, cell_rho)``.
    """
    sq = math.sqrt(d)
    centers = np.zeros((1, d))
    r = 1.0
    best_u = np.zeros(d)
    best = float(hfun(best_u[None])[0])
    offsets = np.array(list(itertools.product((-0.5, 0.5), repeat=d)))
    x, rho, lb = best_u[None], np.array([sq]), np.array([-math.inf])
    for _ in range(64):
        nc = np.linalg.norm(centers, axis=1)
        meet = nc - 1.0 <= r * sq
        centers, nc = centers[meet], nc[meet]
        x = _project_ball(centers)
        hx = hfun(x)
        gx = np.linalg.norm(gfun(x), axis=1)
        rho = (nc - np.linalg.norm(x, axis=1)) + r * sq
        i = int(np.argmin(hx))
        if hx[i] < best:
            best, best_u = float(hx[i]), x[i].copy()
        lb = hx - gx * rho
        keep = lb <= best + 1e-14 * (1.0 + abs(best))
        centers, x, rho, lb = centers[keep], x[keep], rho[keep], lb[keep]
        if r * sq <= resolution or len(centers) * len(offsets) > max_cells:
            break
        centers = (centers[:, None, :] + r * offsets[None]).reshape(-1, d)
        r *= 0.5
    return best, float(min(np.min(lb), best)), best_u, x, rho


def minimize_field_net(problem: OneStepProblem, R, eps_f: float, alpha,
                       n_max: int = 8) -> NetMinimum:
    """Measurable-selection minimizer built from nested ``2^-n`` nets.

    Level ``n`` scans a lattice net of the ball (covering radius ``2^-n``,
    projected into the ball, lexicographic order) and keeps the first point
    ``v`` within ``2^-(n-1) + 2^-n`` of the previous level's point whose
    ball ``B(v, 2^-n)`` may hold a global minimizer. The test uses the
    cells left by a branch-and-bound pass at resolution ``2^-n_max / 4``:
    a ball qualifies when it meets a cell whose lower bound does not
    exceed the best value found. Since the cell set is the same at every
    level, a qualifying point is always within reach of the previous one.
    Only meant for ``d <= 3``.
    """
    d = problem.dimension
    if d > 3:
        raise ValueError("net minimizer is limited to d <= 3")
    Rm = _Rmat(R, d)
    L = gradient_bound(problem, Rm, alpha)

    def hfun(x):
        return field_value(problem, Rm, eps_f, alpha, x)

    def gfun(x):
        return field_gradient(problem, Rm, eps_f, alpha, x)

    g_upper, g_lower, _, cell_x, cell_rho = _global_minimum(
        hfun, gfun, d, 2.0 ** (-n_max) / 4.0)
    sq = math.sqrt(d)
    path = []
    fallbacks = 0
    prev = None
    for n in range(1, n_max + 1):
        r = 2.0 ** (-n)
        if prev is None:
            centre, reach, box = np.zeros(d), math.inf, 1.0 + r
        else:
            reach = 2.0 * r + r   # 2^-(n-1) + 2^-n
            centre, box = prev, reach + r
        _, cand = _lattice(centre, box, 2.0 * r / sq, d, 1.0 + r)
        cand = _project_ball(cand)
        if prev is not None:
            cand = cand[np.linalg.norm(cand - prev, axis=1) <= reach * (1 + 1e-12)]
        hit = np.zeros(len(cand), dtype=bool)
        for lo in range(0, len(cell_x), 4096):
            cx, cr = cell_x[lo:lo + 4096], cell_rho[lo:lo + 4096]
            dist = np.linalg.norm(cand[:, None, :] - cx[None], axis=2)
            hit |= np.any(dist <= r + cr[None] + 1e-12, axis=1)
        ok = np.flatnonzero(hit)
        if ok.size:
            pick = int(ok[0])
        else:
            fallbacks += 1
            dist = np.min(np.linalg.norm(cand[:, None, :] - cell_x[None], axis=2), axis=1)
            pick = int(np.argmin(dist))
        prev = cand[pick]
        path.append(prev.copy())
    u = prev
    return NetMinimum(u, float(hfun(u[None])[0]), L, g_upper, g_lower, path, fallbacks)


# -- weights ------------------------------------------------------------------

def stage_barrier_parameter(eps: float) -> float:
    """Barrier parameter giving weights in ``(1/(1+eps/2), 1)``."""
    return 1.0 - 1.0 / (1.0 + 0.5 * eps)


def damping_log_weights(log_y, log_k: float) -> np.ndarray:
    """``log alpha``: 0 where ``y <= k``, ``-log y`` where ``y > k``."""
    log_y = np.asarray(log_y, dtype=float)
    return np.where(log_y > log_k, -log_y, 0.0)


def damping_weights(problem: OneStepProblem, k: float) -> np.ndarray:
    """``alpha_j = 1{y_j <= k} + 1{y_j > k} / y_j`` (evaluated in log space)."""
    if not k > 0:
        raise ValueError("k must be positive")
    return np.exp(damping_log_weights(problem.log_y, math.log(k)))


def ratio_weights(problem: OneStepProblem, eps_f: float, log_alpha):
    """Closed-form one-dimensional weights.

    ``C = E[alpha w^+] / E[alpha w^-]`` (``0/0 := 1``) and
    ``V = (1 - eps_f) ∨ (1{w >= 0} (1 ∧ 1/C) + 1{w < 0} (1 ∧ C))``.

    Returns ``(V, exact, log_C)``; ``exact`` is true when
    ``1 - eps_f <= C <= 1/(1 - eps_f)``, in which case ``E[V alpha w] = 0``.
    """
    if problem.dimension != 1:
        raise ValueError("ratio construction needs d = 1")
    W = problem.w[:, 0]
    lp = np.log(problem.q) + np.asarray(log_alpha, dtype=float)
    pos, neg = W > 0, W < 0
    log_num = _logsumexp(lp[pos] + np.log(W[pos]))
    log_den = _logsumexp(lp[neg] + np.log(-W[neg]))
    if log_num == -math.inf and log_den == -math.inf:
        log_c = 0.0
    elif log_den == -math.inf:
        log_c = math.inf
    elif log_num == -math.inf:
        log_c = -math.inf
    else:
        log_c = log_num - log_den
    floor = math.log1p(-eps_f)
    exact = floor <= log_c <= -floor
    up = math.exp(min(0.0, -log_c))
    down = math.exp(min(0.0, log_c))
    V = np.where(W >= 0, up, down)
    V = np.maximum(1.0 - eps_f, V)
    return V, exact, log_c


def barrier_weights(problem: OneStepProblem, eps_f: float, log_alpha, R=None,
                    tol_grad: float | None = None):
    """Weights ``V_j = f'(alpha_j w_j . U)`` from the field minimizer ``U``.

    Returns ``(V, U, residual)`` with ``residual = |sum q V alpha w|``.

    Raises
    ------
    BoundaryMinimizer
        When ``U`` lies on the unit sphere.
    """
    if R is None:
        R = predictable_range(problem)
    alpha = np.exp(np.asarray(log_alpha, dtype=float))
    mn = minimize_field(problem, R, eps_f, alpha, tol_grad)
    if mn.on_boundary:
        raise BoundaryMinimizer(f"{problem.atom}: minimizer on the unit sphere", problem.atom)
    _, V, _ = barrier(eps_f, (alpha[:, None] * problem.w) @ mn.u)
    residual = float(np.linalg.norm((problem.q * V * alpha) @ problem.w))
    return V, mn.u, residual


@dataclass
class OneStepDensity:
    z: np.ndarray
    k_exp: int
    log_alpha: np.ndarray
    V: np.ndarray
    residual: float            # |sum q z w|
    log_mean_va: float         # log sum q V alpha
    damped_mass: float
    method: str                # "ratio" or "barrier"
    exact: bool
    U: np.ndarray | None = None
    tried: int = 0

    @property
    def damped(self) -> bool:
        return bool(np.any(self.log_alpha < 0))

    def summary(self) -> dict:
        return {
            "k_exp": self.k_exp,
            "method": self.method,
            "damped_children": int(np.sum(self.log_alpha < 0)),
            "damped_mass": self.damped_mass,
            "residual": self.residual,
            "z_min": float(np.min(self.z)),
            "z_max": float(np.max(self.z)),
        }


def _candidate_exponents(log_y, q, eps, k_min, k_max):
    """Grid exponents where the damping pattern can change, ascending.

    For integer ``e``, ``y > 2^e`` iff ``ceil(log2 y) > e``, so every
    distinct cut in ``(k_min, k_max]`` gives a distinct pattern.
    """
    finite = np.isfinite(log_y)
    cuts = np.full(log_y.shape, -np.inf)
    cuts[finite] = np.ceil(log_y[finite] / LN2)
    inner = cuts[(cuts > k_min) & (cuts <= k_max)]
    exps = np.concatenate(([k_min], np.unique(inner))).astype(np.int64)
    out = []
    for e in exps.tolist():
        damp = cuts > e
        if q[damp].sum() < eps:
            out.append((e, damp))
    return out


def one_step_density(problem: OneStepProblem, eps: float, *,
                     k_min_exp: int = K_MIN_EXP, k_max_exp: int = K_MAX_EXP,
                     tol_z: float = TOL_Z, tol_grad: float | None = None,
                     R=None) -> OneStepDensity:
    """Density on one atom with values in ``(0, 1 + eps]``.

    Scans ``k = 2^e`` for ``e = k_min_exp .. k_max_exp`` and keeps the
    smallest ``k`` for which

    * the damped children (``y > k``) carry conditional mass below ``eps``,
    * the weights ``V alpha`` zero the increment mean (exactly in d = 1,
      within ``tol_z (1 + max|w|)`` for an interior minimizer in d > 1),
    * ``sum q V alpha > 1/(1 + eps)``.

    Then ``z = V alpha / sum(q V alpha)``. Only exponents at which the
    damping pattern changes are evaluated.

    Raises
    ------
    NoFeasibleK
        Grid exhausted without a feasible ``k``.
    BoundaryMinimizer
        The minimizer stays on the sphere at the largest ``k``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    eps_f = stage_barrier_parameter(eps)
    d = problem.dimension
    q = problem.q
    scale = problem.scale
    res_tol = tol_z * (1.0 + scale)
    if d > 1 and R is None:
        R = predictable_range(problem)
    cands = _candidate_exponents(problem.log_y, q, eps, k_min_exp, k_max_exp)
    target = -math.log1p(eps)
    boundary_last = False
    for tried, (e, damp) in enumerate(cands, 1):
        log_alpha = np.where(damp, -problem.log_y, 0.0)
        U = None
        boundary_last = False
        if d == 1:
            V, exact, _ = ratio_weights(problem, eps_f, log_alpha)
            if not exact:
                continue
        else:
            try:
                V, U, _ = barrier_weights(problem, eps_f, log_alpha, R, tol_grad)
            except BoundaryMinimizer:
                boundary_last = True
                continue
            exact = False
        top = float(np.max(log_alpha))
        va = V * np.exp(log_alpha - top)
        s = float(q @ va)
        log_mean = top + math.log(s)
        if not log_mean > target:
            continue
        z = va / s
        z = z / float(q @ z)
        residual = float(np.linalg.norm((q * z) @ problem.w))
        if d > 1 and residual > res_tol:
            continue
        return OneStepDensity(
            z=z, k_exp=e, log_alpha=log_alpha, V=V, residual=residual,
            log_mean_va=log_mean, damped_mass=math.fsum(q[damp]),
            method="ratio" if d == 1 else "barrier", exact=exact, U=U, tried=tried,
        )
    if boundary_last:
        raise BoundaryMinimizer(
            f"{problem.atom}: minimizer on the sphere at the largest k", problem.atom
        )
    raise NoFeasibleK(
        f"{problem.atom}: no feasible k in 2^{k_min_exp}..2^{k_max_exp}", problem.atom
    )
