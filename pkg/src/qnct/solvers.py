"""Variational objective, handcrafted regularizers, and classical solvers.

The quasi-Newton reconstructor keeps a dense inverse-Hessian approximation
refined by the rank-two secant update

    H' = (I - rho s z^T) H (I - rho z s^T) + rho s s^T,   rho = 1 / (z^T s),

which satisfies H'z = s exactly and preserves symmetry. Updates with
non-positive curvature are skipped (logged, never raised) so H stays
positive definite.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .errors import DivergenceError, MemoryGuardError, ShapeError

log = logging.getLogger("qnct.solvers")

DENSE_HESSIAN_LIMIT = 128 * 128


# ---------------------------------------------------------------------------
# objective specification
# ---------------------------------------------------------------------------

REG_NONE = "none"
REG_TIKHONOV = "tikhonov"
REG_SMOOTHED_TV = "smoothed_tv"


@dataclass(frozen=True)
class Regularizer:
    kind: str = REG_NONE
    mu: float = 0.0
    delta: float = 1e-3

    def __post_init__(self):
        if self.kind not in (REG_NONE, REG_TIKHONOV, REG_SMOOTHED_TV):
            raise ShapeError(f"unknown regularizer {self.kind!r}")
        if self.mu < 0:
            raise ShapeError("regularizer weight mu must be >= 0")
        if self.kind == REG_SMOOTHED_TV and self.delta <= 0:
            raise ShapeError("smoothed TV needs delta > 0")

    def value(self, x: np.ndarray) -> float:
        if self.kind == REG_NONE or self.mu == 0.0:
            return 0.0
        if self.kind == REG_TIKHONOV:
            return 0.5 * self.mu * float(np.sum(x * x))
        dx, dy = _forward_diff(x)
        return self.mu * float(np.sum(np.sqrt(dx * dx + dy * dy
                                              + self.delta * self.delta)))

    def grad(self, x: np.ndarray) -> np.ndarray:
        if self.kind == REG_NONE or self.mu == 0.0:
            return np.zeros_like(x)
        if self.kind == REG_TIKHONOV:
            return self.mu * x
        dx, dy = _forward_diff(x)
        w = np.sqrt(dx * dx + dy * dy + self.delta * self.delta)
        return self.mu * _forward_diff_adjoint(dx / w, dy / w)


def _forward_diff(x):
    dx = np.zeros_like(x)
    dy = np.zeros_like(x)
    dx[:, :-1] = x[:, 1:] - x[:, :-1]
    dy[:-1, :] = x[1:, :] - x[:-1, :]
    return dx, dy


def _forward_diff_adjoint(u, v):
    out = np.zeros_like(u)
    out[:, :-1] -= u[:, :-1]
    out[:, 1:] += u[:, :-1]
    out[:-1, :] -= v[:-1, :]
    out[1:, :] += v[:-1, :]
    return out


class TomoOperator:
    """forward/adjoint pair of the scan geometry for a fixed image size."""

    def __init__(self, geometry: geo.Geometry, h: int, w: int):
        self.geometry = geometry
        self.h, self.w = h, w

    def forward(self, x: np.ndarray) -> np.ndarray:
        img = geo.Image(x, self.geometry.pixel_mm(self.w))
        return geo.forward_project(img, self.geometry).values

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        sino = geo.Sinogram(y)
        return geo.back_project(sino, self.geometry, self.h, self.w).values


class IdentityOperator:
    """Stub operator for tests: A = I on a fixed shape."""

    def forward(self, x):
        return x

    def adjoint(self, y):
        return y


@dataclass
class ObjectiveSpec:
    """J(x) = lam/2 ||A x - y||^2 + R(x) with a pluggable linear operator."""

    op: object
    y: np.ndarray
    lam: float = 1.0
    regularizer: Regularizer = field(default_factory=Regularizer)

    def __post_init__(self):
        if self.lam < 0:
            raise ShapeError("data weight lam must be >= 0")
        self.y = np.asarray(self.y)

    @classmethod
    def for_geometry(cls, geometry: geo.Geometry, sino: geo.Sinogram,
                     h: int, w: int, lam: float = 1.0,
                     regularizer: Regularizer | None = None):
        return cls(TomoOperator(geometry, h, w), sino.values, lam,
                   regularizer or Regularizer())

    def value(self, x: np.ndarray) -> float:
        r = self.op.forward(x) - self.y
        if r.shape != self.y.shape:
            raise ShapeError(
                f"objective: operator output {r.shape} vs data {self.y.shape}"
            )
        data = 0.5 * self.lam * float(np.sum(r.astype(np.float64) ** 2))
        return data + self.regularizer.value(x)

    def grad(self, x: np.ndarray) -> np.ndarray:
        r = self.op.forward(x) - self.y
        if r.shape != self.y.shape:
            raise ShapeError(
                f"gradient: operator output {r.shape} vs data {self.y.shape}"
            )
        return self.lam * self.op.adjoint(r) + self.regularizer.grad(x)


def objective(x: np.ndarray, spec: ObjectiveSpec) -> float:
    return spec.value(np.asarray(x))


def gradient(x: np.ndarray, spec: ObjectiveSpec) -> np.ndarray:
    return spec.grad(np.asarray(x))


# ---------------------------------------------------------------------------
# traces
# ---------------------------------------------------------------------------

TRACE_COLUMNS = ("iteration", "J", "grad_norm", "step", "secant_residual", "si")


def _trace_row(iteration, J, grad_norm, step=np.nan, secant=np.nan, si=np.nan):
    return {
        "iteration": int(iteration),
        "J": float(J),
        "grad_norm": float(grad_norm),
        "step": float(step),
        "secant_residual": float(secant),
        "si": float(si),
    }


# ---------------------------------------------------------------------------
# gradient descent
# ---------------------------------------------------------------------------

def gradient_descent(spec, x0: np.ndarray, step: float, iters: int):
    """Fixed-step descent x <- x - step * grad J(x); returns (x, trace)."""
    if step < 0 or iters < 1:
        raise ShapeError("gradient_descent needs step >= 0 and iters >= 1")
    x = np.array(x0, dtype=np.float64, copy=True)
    j0 = spec.value(x)
    trace = [_trace_row(0, j0, np.linalg.norm(spec.grad(x)))]
    limit = 10.0 * j0 + 1e-12
    for t in range(1, iters + 1):
        g = spec.grad(x)
        x = x - step * g
        j = spec.value(x)
        trace.append(_trace_row(t, j, np.linalg.norm(spec.grad(x)), step))
        if j > limit:
            raise DivergenceError(
                f"gradient_descent diverged at iteration {t}: "
                f"J={j:.3e} > 10 * J0={j0:.3e}", trace=trace,
            )
    return x.astype(np.asarray(x0).dtype), trace


# ---------------------------------------------------------------------------
# BFGS machinery
# ---------------------------------------------------------------------------

def bfgs_update(H: np.ndarray, s: np.ndarray, z: np.ndarray):
    """One inverse-Hessian secant update; returns (H', accepted).

    Skips (returning H unchanged) when the curvature z.s falls below
    1e-10 |s||z|, the standard positive-definiteness safeguard.
    """
    H = np.asarray(H, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if H.shape != (s.size, s.size) or s.size != z.size:
        raise ShapeError(
            f"bfgs_update: H {H.shape}, s {s.shape}, z {z.shape}"
        )
    curvature = float(z @ s)
    eps = 1e-10 * float(np.linalg.norm(s)) * float(np.linalg.norm(z))
    if curvature <= eps:
        log.info("bfgs_update skipped: curvature %.3e <= %.3e", curvature, eps)
        return H, False
    rho = 1.0 / curvature
    Hz = H @ z
    zHz = float(z @ Hz)
    # expanded form of (I - rho s z^T) H (I - rho z s^T) + rho s s^T
    Hp = H - rho * (np.outer(s, Hz) + np.outer(Hz, s)) \
        + (rho * rho * zHz + rho) * np.outer(s, s)
    return 0.5 * (Hp + Hp.T), True


def symmetry_index(M: np.ndarray) -> float:
    """Mean absolute asymmetry over off-diagonal pairs; 0 iff symmetric."""
    M = np.asarray(M)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ShapeError(f"symmetry_index: matrix must be square, got {M.shape}")
    n = M.shape[0]
    if n < 2:
        return 0.0
    return float(np.sum(np.abs(M - M.T)) / (n * (n - 1)))


@dataclass
class BfgsState:
    """Dense inverse-Hessian approximation plus the last update vectors."""

    H: np.ndarray
    s: np.ndarray | None = None
    z: np.ndarray | None = None
    rho: float | None = None
    skips: int = 0

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    @classmethod
    def identity(cls, dim: int):
        return cls(np.eye(dim, dtype=np.float64))


# ---------------------------------------------------------------------------
# line searches
# ---------------------------------------------------------------------------

def _phi(spec, x, d):
    def value(a):
        return spec.value(x + a * d)

    def slope(a):
        return float(spec.grad(x + a * d).reshape(-1) @ d.reshape(-1))

    return value, slope


def fixed_step(spec, x, d, j0, g0d):
    return 1.0


def armijo(spec, x, d, j0, g0d, c1=1e-4, shrink=0.5, max_iter=40):
    value, _ = _phi(spec, x, d)
    a = 1.0
    for _ in range(max_iter):
        if value(a) <= j0 + c1 * a * g0d:
            return a
        a *= shrink
    return a


def strong_wolfe(spec, x, d, j0, g0d, c1=1e-4, c2=0.9, max_iter=25):
    """Bracket and zoom until both strong Wolfe conditions hold."""
    value, slope = _phi(spec, x, d)
    a_prev, j_prev = 0.0, j0
    a = 1.0
    a_max = 64.0
    for i in range(max_iter):
        j = value(a)
        if j > j0 + c1 * a * g0d or (i > 0 and j >= j_prev):
            return _zoom(value, slope, a_prev, a, j0, g0d, c1, c2)
        sl = slope(a)
        if abs(sl) <= -c2 * g0d:
            return a
        if sl >= 0:
            return _zoom(value, slope, a, a_prev, j0, g0d, c1, c2)
        a_prev, j_prev = a, j
        a = min(2.0 * a, a_max)
    return a


def _zoom(value, slope, lo, hi, j0, g0d, c1, c2, max_iter=40):
    j_lo = value(lo)
    sl_lo = slope(lo)
    for _ in range(max_iter):
        # safeguarded quadratic interpolation through (lo, j_lo, sl_lo) and
        # (hi, j_hi); exact for quadratic objectives, bisection otherwise
        span = hi - lo
        j_hi = value(hi)
        denom = j_hi - j_lo - sl_lo * span
        a = lo - 0.5 * sl_lo * span * span / denom if denom != 0 else None
        if a is None or not np.isfinite(a) or \
                not (min(lo, hi) + 1e-3 * abs(span) < a
                     < max(lo, hi) - 1e-3 * abs(span)):
            a = lo + 0.5 * span
        j = value(a)
        if j > j0 + c1 * a * g0d or j >= j_lo:
            hi = a
        else:
            sl = slope(a)
            if abs(sl) <= -c2 * g0d:
                return a
            if sl * (hi - lo) >= 0:
                hi = lo
            lo, j_lo, sl_lo = a, j, sl
        if abs(hi - lo) < 1e-14:
            break
    return 0.5 * (lo + hi)


def exact_quadratic(spec, x, d, j0, g0d):
    """Exact minimizer along d for quadratic J: slope is linear in alpha."""
    _, slope = _phi(spec, x, d)
    s1 = slope(1.0)
    denom = s1 - g0d
    if denom <= 0:
        return 1.0
    return -g0d / denom

LINE_SEARCHES = {
    "fixed": fixed_step,
    "armijo": armijo,
    "strong-wolfe": strong_wolfe,
    "exact-quadratic": exact_quadratic,
}


# ---------------------------------------------------------------------------
# classical quasi-Newton reconstruction
# ---------------------------------------------------------------------------

def qn_reconstruct(spec, x0: np.ndarray, iters: int,
                   line_search="strong-wolfe", gtol: float = 0.0):
    """Dense-H BFGS minimization of the objective; returns (x, trace, state).

    The search direction is -H grad J with H refined by bfgs_update after
    every step. Refuses problems above 128x128 unknowns, whose dense H
    would not fit; use the latent unrolled reconstructor for those.
    """
    x0 = np.asarray(x0)
    if x0.size > DENSE_HESSIAN_LIMIT:
        raise MemoryGuardError(
            f"dense inverse Hessian for {x0.size} unknowns exceeds the "
            f"{DENSE_HESSIAN_LIMIT} limit; use the latent unrolled "
            "reconstructor (qnct.unroll) instead"
        )
    search = LINE_SEARCHES[line_search] if isinstance(line_search, str) \
        else line_search
    shape = x0.shape
    x = np.array(x0, dtype=np.float64).reshape(-1)
    state = BfgsState.identity(x.size)

    def value(v):
        return spec.value(v.reshape(shape))

    def grad(v):
        return spec.grad(v.reshape(shape)).reshape(-1)

    flat_spec = _FlatObjective(value, grad)
    j = value(x)
    g = grad(x)
    j0 = j
    limit = 10.0 * j0 + 1e-12
    trace = [_trace_row(0, j, np.linalg.norm(g), si=symmetry_index(state.H))]
    for t in range(1, iters + 1):
        d = -(state.H @ g)
        g0d = float(g @ d)
        if g0d >= 0:
            # H lost descent property (should not happen with skips); reset
            log.warning("direction not a descent direction; resetting H")
            state = BfgsState.identity(x.size)
            d = -g
            g0d = float(g @ d)
        alpha = search(flat_spec, x, d, j, g0d)
        s = alpha * d
        x_new = x + s
        g_new = grad(x_new)
        z = g_new - g
        H_new, accepted = bfgs_update(state.H, s, z)
        if accepted:
            state = BfgsState(H_new, s, z, 1.0 / float(z @ s), state.skips)
            secant = float(np.linalg.norm(H_new @ z - s)
                           / max(np.linalg.norm(s), 1e-300))
        else:
            state = BfgsState(state.H, s, z, None, state.skips + 1)
            secant = np.nan
        x, g = x_new, g_new
        j = value(x)
        trace.append(_trace_row(t, j, np.linalg.norm(g), alpha, secant,
                                symmetry_index(state.H)))
        if j > limit:
            raise DivergenceError(
                f"qn_reconstruct diverged at iteration {t}: J={j:.3e}",
                trace=trace,
            )
        if gtol > 0 and np.linalg.norm(g) < gtol:
            break
    return x.reshape(shape).astype(x0.dtype), trace, state


class _FlatObjective:
    def __init__(self, value, grad):
        self.value = value
        self.grad = grad
