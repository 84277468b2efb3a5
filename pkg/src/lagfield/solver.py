"""Newton-based forward propagation of discrete field theories.

Two propagation schemes are offered. ``stencil_sweep`` solves the DEL at
one vertex at a time for the single unknown ``u^{i+1}_j``; ``timeslice``
solves all DEL equations of a time slice at once for ``U^{i+1}``, using
the block matrix ``Lambda = d^2 L / dU^i dU^{i+1}`` as Newton Jacobian.
"""

from dataclasses import dataclass, field
from functools import partial

import jax
import jax.numpy as jnp
import jax.scipy.linalg as jsl
import numpy as np

from .density import del_single
from .errors import (ConditioningError, InputError, MisuseError, NonConvergenceError,
                     PropagationError, ShapeError)
from .lattice import Field, StencilKind

_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class NewtonConfig:
    """Stopping rule: ``|F|_inf <= tol * max(1, |J|_inf)``.

    The DEL residuals carry a ``1/dt^2`` scale, so the tolerance is taken
    relative to the Jacobian norm; ``tol`` then bounds the step size.
    """

    tol: float = 1e-12
    max_iter: int = 50
    guess: str = "linear_extrapolation"

    def __post_init__(self):
        if not self.tol > 0 or self.max_iter < 1:
            raise MisuseError("need tol > 0 and max_iter >= 1")
        if self.guess not in ("linear_extrapolation", "previous_step"):
            raise MisuseError(f"unknown guess {self.guess!r}")


@dataclass
class ConvergenceReport:
    residuals: list
    iterates: list
    converged: bool = False
    rho_star: float = float("nan")
    theta_est: float = None
    time_index: int = None

    @property
    def iterations(self):
        return len(self.iterates) - 1

    @property
    def solution(self):
        return self.iterates[-1]

    @property
    def errors(self):
        """Distances ``|x_n - x*|_inf`` of the iterates to the final one."""
        x = self.iterates[-1]
        return [float(np.max(np.abs(np.asarray(y) - x))) for y in self.iterates]

    def to_rows(self):
        return [(n, r) for n, r in enumerate(self.residuals)]


def _sigma_min_dense(jac):
    if jac.size == 0:
        return 0.0
    return float(np.linalg.svd(jac, compute_uv=False)[-1])


def newton(F, J, x0, config=NewtonConfig()):
    """Plain Newton iteration on ``F(x) = 0`` with dense Jacobian ``J``.

    Returns ``(x, report)``. Raises :class:`ConditioningError` when the
    Jacobian is numerically singular and :class:`NonConvergenceError`
    after ``config.max_iter`` steps.
    """
    x = np.array(x0, dtype=float).ravel()
    residuals, iterates = [], [x.copy()]
    for k in range(config.max_iter + 1):
        f = np.asarray(F(x), dtype=float).ravel()
        jac = np.asarray(J(x), dtype=float).reshape(f.size, x.size)
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(jac))):
            raise NonConvergenceError("non-finite residual or Jacobian", residuals)
        rn = float(np.max(np.abs(f))) if f.size else 0.0
        residuals.append(rn)
        smin = _sigma_min_dense(jac)
        jnorm = float(np.max(np.sum(np.abs(jac), axis=1))) if jac.size else 0.0
        if smin <= 1e-13 * max(1.0, jnorm):
            raise ConditioningError(f"Newton Jacobian singular (sigma_min={smin:.3e})", smin)
        if rn <= config.tol * max(1.0, jnorm):
            rep = ConvergenceReport(residuals, iterates, True, 1.0 / smin)
            return x, rep
        if k == config.max_iter:
            break
        dx = np.linalg.solve(jac, -f)
        x = x + dx
        iterates.append(x.copy())
        # round-off floor: the update no longer changes x
        if np.max(np.abs(dx)) <= 16 * _EPS * max(1.0, float(np.max(np.abs(x)))):
            f = np.asarray(F(x), dtype=float).ravel()
            residuals.append(float(np.max(np.abs(f))))
            return x, ConvergenceReport(residuals, iterates, True, 1.0 / smin)
    raise NonConvergenceError(f"Newton did not converge in {config.max_iter} iterations", residuals)


# ---------------------------------------------------------------- stencils

@partial(jax.jit, static_argnums=(0, 1))
def _stencil_parts(fn, kind, theta, t, y):
    def res(v):
        return del_single(fn, kind, theta, t.at[1].set(v))
    return res(y), jax.jacfwd(res)(y)


def _full_tuple(model, known):
    k = np.asarray(known, dtype=float)
    if k.ndim == 1:
        k = k[:, None]
    if k.shape[1] != model.d:
        raise ShapeError(f"stencil values must have {model.d} components")
    if k.shape[0] == 6:
        k = np.concatenate([k[:1], np.zeros((1, model.d)), k[1:]])
    if k.shape[0] != 7:
        raise ShapeError("a 7-point stencil needs six known values (or a full tuple)")
    return k


def _lipschitz_estimate(jac_at, xs, x_star, rng):
    """Largest quotient |J(y) - J(x*)|_2 / |y - x*|_2 over the iterates and a few probes."""
    j_star = jac_at(x_star)
    probes = [np.asarray(y) for y in xs]
    scale = max(max((np.linalg.norm(y - x_star) for y in probes), default=0.0), 1e-3)
    probes += [x_star + scale * rng.standard_normal(x_star.shape) for _ in range(3)]
    best = 0.0
    for y in probes:
        dist = np.linalg.norm(y - x_star)
        if dist > 1e-12:
            best = max(best, np.linalg.norm(jac_at(y) - j_star, 2) / dist)
    return float(best)


def solve_stencil(model, known, config=NewtonConfig(), guess=None, estimate_theta=True):
    """Solve the 7-point DEL for ``u^{i+1}_j`` given the other six values.

    ``known`` lists the six known points in tuple order with the unknown
    left out, or a full 7-point tuple whose slot 1 is ignored. Returns
    ``(u_next, report)``.
    """
    if model.p != 3:
        raise MisuseError("stencil solves need a 3-point density")
    t = jnp.asarray(_full_tuple(model, known))
    if guess is None:
        guess = 2 * t[0] - t[3] if config.guess == "linear_extrapolation" else t[0]
    kind = StencilKind.PTS3_7STENCIL

    def parts(y):
        return _stencil_parts(model.fn, kind, model.theta, t, jnp.asarray(y))

    x, rep = newton(lambda y: parts(y)[0], lambda y: parts(y)[1], np.asarray(guess), config)
    if estimate_theta:
        rng = np.random.default_rng(0)
        rep.theta_est = _lipschitz_estimate(lambda y: np.asarray(parts(y)[1]),
                                            rep.iterates[:-1], x, rng)
    return x, rep


# ---------------------------------------------------------------- slices

def _cells(U, W, p, periodic):
    """Cells of the strip between slices U (below) and W (above)."""
    if periodic:
        U1, W1 = jnp.roll(U, -1, axis=0), jnp.roll(W, -1, axis=0)
    else:
        U, W, U1, W1 = U[:-1], W[:-1], U[1:], W[1:]
    if p == 3:
        return jnp.stack([U, W, U1], axis=1)
    return jnp.stack([U, W, U1, W1], axis=1)


def slice_lagrangian(fn, p, theta, U, W, periodic=True):
    """``L^dt_dx(U, W)``: the density summed over the strip of cells between two slices."""
    cells = _cells(U, W, p, periodic)
    return jnp.sum(jax.vmap(lambda c: fn(theta, c))(cells))


# (slot of U, slot of W, column offset of the U point, column offset of the W point)
_LAMBDA_PAIRS = {
    3: ((0, 1, 0, 0), (2, 1, 1, 0)),
    4: ((0, 1, 0, 0), (0, 3, 0, 1), (2, 1, 1, 0), (2, 3, 1, 1)),
}


def lambda_dense(fn, p, theta, U, W, periodic=True):
    """Traceable dense ``Lambda`` over the unknown columns, shape (n*d, n*d)."""
    cells = _cells(U, W, p, periodic)
    H = jax.vmap(lambda c: jax.hessian(fn, argnums=1)(theta, c))(cells)
    ncell, d = cells.shape[0], cells.shape[2]
    ncol = U.shape[0]
    j = np.arange(ncell)
    L = jnp.zeros((ncol, ncol, d, d), dtype=H.dtype)
    for a, b, da, db in _LAMBDA_PAIRS[p]:
        rows, cols = j + da, j + db
        if periodic:
            rows, cols = rows % ncol, cols % ncol
        L = L.at[rows, cols].add(H[:, a, :, b, :])
    if not periodic:
        L = L[1:-1, 1:-1]
    n = L.shape[0]
    return jnp.transpose(L, (0, 2, 1, 3)).reshape(n * d, n * d)


@dataclass
class LambdaMatrix:
    """Block matrix with diagonal ``A``, super-diagonal ``B`` and sub-diagonal ``C``.

    For periodic grids ``C[0]`` sits in the top-right corner and ``B[-1]``
    in the bottom-left one.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    layout: str
    dense: np.ndarray = field(repr=False, default=None)

    @property
    def d(self):
        return self.A.shape[1]


def assemble_lambda(model, U, W, grid):
    U = jnp.asarray(U, dtype=float).reshape(grid.columns, model.d)
    W = jnp.asarray(W, dtype=float).reshape(grid.columns, model.d)
    dense = np.asarray(_lambda_jit(model.fn, model.p, grid.periodic, model.theta, U, W))
    d = model.d
    n = dense.shape[0] // d
    blk = dense.reshape(n, d, n, d).transpose(0, 2, 1, 3)
    idx = np.arange(n)
    A = blk[idx, idx]
    B = blk[idx, (idx + 1) % n]
    C = blk[idx, (idx - 1) % n]
    if not grid.periodic:
        B[-1] = 0.0
        C[0] = 0.0
    return LambdaMatrix(A, B, C, "cyclic" if grid.periodic else "tridiagonal", dense)


@partial(jax.jit, static_argnums=(0, 1, 2))
def _lambda_jit(fn, p, periodic, theta, U, W):
    return lambda_dense(fn, p, theta, U, W, periodic)


def _start_vector(n):
    # fixed pseudo-random start; an all-ones start is orthogonal to many
    # singular vectors of circulant matrices
    v = np.random.default_rng(20240611).standard_normal(n)
    return v / np.linalg.norm(v)


def _ritz_lowest(M, vs, fallback):
    """Lowest Rayleigh-Ritz value of ``M`` on span(vs); ``fallback`` if the span is degenerate."""
    V = jnp.stack(vs, axis=1)
    n, k = V.shape
    if k > n:
        V, k = V[:, -n:], n
    _, R0 = jnp.linalg.qr(jax.lax.stop_gradient(V))
    r = jnp.abs(jnp.diagonal(R0))
    ok = jnp.min(r) > 1e-6 * jnp.max(r)
    Q, _ = jnp.linalg.qr(jnp.where(ok, V, jnp.eye(n, k)))
    lam = jnp.linalg.eigvalsh(Q.T @ M @ Q)[0]
    return jnp.where(ok, lam, fallback)


def smallest_singular_value(L, iters=3, v0=None, window=4):
    """Estimate ``sigma_min(L)`` by inverse iteration on ``M = L^T L``.

    ``M`` is Cholesky-factorized once and each iteration solves
    ``w = M \\ v``. The squared estimate is the smaller of ``1/(v.w)`` and
    the lowest Rayleigh-Ritz value of ``M`` on the last ``window`` iterates,
    minimized over the iterations; every candidate bounds ``sigma_min^2``
    from above, so the estimate decreases with ``iters`` towards the true
    value. Returns 0 if the factorization fails (numerically singular
    ``L``). Traceable and differentiable through the unrolled iterations.
    """
    L = jnp.asarray(L, dtype=float)
    n = L.shape[1]
    M = L.T @ L
    c0 = jnp.linalg.cholesky(jax.lax.stop_gradient(M))
    diag = jnp.diagonal(c0)
    ok = jnp.all(jnp.isfinite(c0)) & (jnp.min(diag) > 1e-150 * jnp.maximum(1.0, jnp.max(diag)))
    Msafe = jnp.where(ok, M, jnp.eye(n))
    cf = jsl.cho_factor(Msafe, lower=True)
    v = jnp.asarray(_start_vector(n) if v0 is None else v0, dtype=float)
    v = v / jnp.linalg.norm(v)
    vs = [v]
    best = jnp.inf
    for _ in range(int(iters)):
        w = jsl.cho_solve(cf, v)
        plain = 1.0 / jnp.dot(v, w)
        v = w / jnp.linalg.norm(w)
        vs = (vs + [v])[-window:]
        best = jnp.minimum(best, jnp.minimum(plain, _ritz_lowest(Msafe, vs, plain)))
    if int(iters) < 1:
        best = jnp.dot(v, Msafe @ v)
    return jnp.where(ok, jnp.sqrt(jnp.abs(best)), 0.0)


def sigma_min_small(block):
    """Closed-form smallest singular value of a 1x1 or 2x2 block (traceable)."""
    A = jnp.atleast_2d(block)
    if A.shape == (1, 1):
        return jnp.abs(A[0, 0])
    if A.shape != (2, 2):
        return jnp.linalg.svd(A, compute_uv=False)[-1]
    T = jnp.sum(A * A)
    D = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
    disc = jnp.maximum(T * T - 4 * D * D, 1e-300)
    return jnp.sqrt(2 * D * D / (T + jnp.sqrt(disc)))


def _window_index(kind, ncol, periodic):
    offs = np.array(kind.offsets)
    cols = np.arange(ncol) if periodic else np.arange(1, ncol - 1)
    ti = np.broadcast_to(1 + offs[:, 0], (cols.size, offs.shape[0]))
    tj = cols[:, None] + offs[None, :, 1]
    if periodic:
        tj = tj % ncol
    return ti, tj


def window_tuples(kind, Uprev, U, W, periodic=True):
    """Stencil tuples centred on every unknown column of the middle slice."""
    win = jnp.stack([Uprev, U, W])
    ti, tj = _window_index(kind, U.shape[0], periodic)
    return win[ti, tj]


@partial(jax.jit, static_argnums=(0, 1, 2))
def _slice_residual(fn, kind, periodic, theta, Uprev, U, W):
    t = window_tuples(kind, Uprev, U, W, periodic)
    return jax.vmap(lambda s: del_single(fn, kind, theta, s))(t)


def slice_residual(model, Uprev, U, W, grid):
    """DEL residuals at all unknown vertices of slice ``U``, shape (n, d)."""
    return _slice_residual(model.fn, model.kind, grid.periodic, model.theta,
                           *(jnp.asarray(S, dtype=float).reshape(grid.columns, model.d)
                             for S in (Uprev, U, W)))


def _unknown_cols(grid):
    return np.arange(grid.columns) if grid.periodic else np.arange(1, grid.columns - 1)


def timestep_solve(model, U_prev, U_curr, grid, config=NewtonConfig(), W_boundary=None, guess=None):
    """Solve the slice DEL for ``U^{i+1}``; returns ``(U_next, report)``.

    ``W_boundary`` gives the two Dirichlet boundary values of the new slice
    (defaults to those of ``U_curr``).
    """
    d = model.d
    U_prev = np.asarray(U_prev, dtype=float).reshape(grid.columns, d)
    U_curr = np.asarray(U_curr, dtype=float).reshape(grid.columns, d)
    if guess is None:
        guess = 2 * U_curr - U_prev if config.guess == "linear_extrapolation" else U_curr
    W = np.array(guess, dtype=float).reshape(grid.columns, d)
    if not grid.periodic:
        bnd = U_curr[[0, -1]] if W_boundary is None else np.asarray(W_boundary).reshape(2, d)
        W[[0, -1]] = bnd
    cols = _unknown_cols(grid)

    def fill(x):
        Wx = W.copy()
        Wx[cols] = x.reshape(cols.size, d)
        return Wx

    def F(x):
        return np.asarray(slice_residual(model, U_prev, U_curr, fill(x), grid)).ravel()

    def J(x):
        return np.asarray(_lambda_jit(model.fn, model.p, grid.periodic, model.theta,
                                      jnp.asarray(U_curr), jnp.asarray(fill(x))))

    x, rep = newton(F, J, W[cols].ravel(), config)
    return fill(x), rep


def _velocity_part(fn, p, periodic, theta, U0, V0, dt):
    """Gradient in the velocity of ``L(U - dt/2 V, U + dt/2 V)``."""
    def Lv(V):
        return slice_lagrangian(fn, p, theta, U0 - 0.5 * dt * V, U0 + 0.5 * dt * V, periodic)
    return jax.grad(Lv)(V0)


@partial(jax.jit, static_argnums=(0, 1, 2))
def _init_residual(fn, p, periodic, theta, U0, V0, W, dt):
    lhs = _velocity_part(fn, p, periodic, theta, U0, V0, dt)
    rhs = jax.grad(lambda U: slice_lagrangian(fn, p, theta, U, W, periodic))(U0)
    return lhs + dt * rhs


def initialize_first_step(model, U0, V0, grid, config=NewtonConfig(), W_boundary=None):
    """First slice ``U^1`` from positions ``U0`` and velocities ``V0``.

    ``U^1`` solves ``grad_V L(U0 - dt/2 V0, U0 + dt/2 V0) = -dt grad_U L(U0, U1)``,
    the discrete momentum matching condition. Densities declared linear in
    velocities do not need ``V0`` (pass ``None``).
    """
    d = model.d
    U0 = np.asarray(U0, dtype=float).reshape(grid.columns, d)
    if V0 is None:
        if not model.linear_in_velocity:
            raise InputError("initial velocities are required for this density")
        V0 = np.zeros_like(U0)
    V0 = np.asarray(V0, dtype=float).reshape(grid.columns, d)
    dt = grid.dt
    W = U0 + dt * V0
    if not grid.periodic:
        W[[0, -1]] = U0[[0, -1]] if W_boundary is None else np.asarray(W_boundary).reshape(2, d)
    cols = _unknown_cols(grid)

    def fill(x):
        Wx = W.copy()
        Wx[cols] = x.reshape(cols.size, d)
        return Wx

    def F(x):
        r = _init_residual(model.fn, model.p, grid.periodic, model.theta,
                           jnp.asarray(U0), jnp.asarray(V0), jnp.asarray(fill(x)), dt)
        return np.asarray(r)[cols].ravel()

    def J(x):
        return dt * np.asarray(_lambda_jit(model.fn, model.p, grid.periodic, model.theta,
                                           jnp.asarray(U0), jnp.asarray(fill(x))))

    x, rep = newton(F, J, W[cols].ravel(), config)
    return fill(x), rep


def _sweep_step(model, U_prev, U_curr, grid, config, W_boundary=None, max_sweeps=200):
    """One time step by vertex-wise solves, repeated sweeps until the slice DEL holds."""
    d = model.d
    W = 2 * U_curr - U_prev if config.guess == "linear_extrapolation" else U_curr.copy()
    if not grid.periodic:
        W[[0, -1]] = U_curr[[0, -1]] if W_boundary is None else np.asarray(W_boundary).reshape(2, d)
    kind = StencilKind.PTS3_7STENCIL
    ti, tj = _window_index(kind, grid.columns, grid.periodic)
    cols = _unknown_cols(grid)
    scale = None
    history = []
    for _ in range(max_sweeps):
        for n, j in enumerate(cols):
            win = np.stack([U_prev, U_curr, W])
            t = win[ti[n], tj[n]]
            W[j], rep = solve_stencil(model, t, config, guess=W[j], estimate_theta=False)
        r = np.asarray(slice_residual(model, U_prev, U_curr, W, grid))
        if scale is None:
            lam = _lambda_jit(model.fn, model.p, grid.periodic, model.theta,
                              jnp.asarray(U_curr), jnp.asarray(W))
            scale = max(1.0, float(np.max(np.sum(np.abs(np.asarray(lam)), axis=1))))
        history.append(float(np.max(np.abs(r))))
        if history[-1] <= config.tol * scale:
            return W, ConvergenceReport(history, [W.copy()], True, rep.rho_star)
    raise NonConvergenceError("stencil sweeps did not converge", history)


def propagate(model, U0, U1=None, V0=None, grid=None, steps=None, config=NewtonConfig(),
              mode="timeslice", boundary=None, reports=None):
    """Propagate initial data forward and return the full :class:`Field`.

    Give either the second slice ``U1`` or velocities ``V0`` (or neither
    for densities linear in velocities). ``steps`` defaults to ``grid.n_t``.
    ``boundary`` (shape (steps+1, 2, d)) fixes Dirichlet columns. Per-step
    reports are appended to ``reports`` when a list is passed.
    """
    if grid is None:
        raise MisuseError("a grid is required")
    if mode not in ("timeslice", "stencil_sweep", "stencil"):
        raise MisuseError(f"unknown mode {mode!r}")
    if mode != "timeslice" and model.p != 3:
        raise MisuseError("stencil sweeps need a 3-point density")
    steps = grid.n_t if steps is None else int(steps)
    d = model.d
    U0 = np.asarray(U0, dtype=float).reshape(grid.columns, d)
    bnd = None if boundary is None else np.asarray(boundary, dtype=float).reshape(-1, 2, d)
    out = [U0]
    if U1 is None:
        try:
            U1, rep = initialize_first_step(model, U0, V0, grid, config,
                                            None if bnd is None else bnd[1])
        except (ConditioningError, NonConvergenceError) as exc:
            raise PropagationError(f"first step failed: {exc}", 1, cause=exc) from exc
        if reports is not None:
            rep.time_index = 1
            reports.append(rep)
    out.append(np.asarray(U1, dtype=float).reshape(grid.columns, d))
    for i in range(1, steps):
        wb = None if bnd is None else bnd[i + 1]
        try:
            if mode == "timeslice":
                W, rep = timestep_solve(model, out[-2], out[-1], grid, config, wb)
            else:
                W, rep = _sweep_step(model, out[-2], out[-1], grid, config, wb)
        except (ConditioningError, NonConvergenceError) as exc:
            raise PropagationError(f"step to time index {i + 1} failed: {exc}", i + 1,
                                   cause=exc) from exc
        if reports is not None:
            rep.time_index = i + 1
            reports.append(rep)
        out.append(W)
    return Field(grid.with_steps(max(steps, 1)), np.stack(out[:max(steps, 1) + 1]))


@dataclass
class RateCheck:
    status: str          # "pass", "fail" or "inconclusive"
    constant: float      # fitted C in e_{n+1} <= C e_n^2
    order: float = float("nan")
    bound: float = None

    @property
    def passed(self):
        return self.status == "pass"

    def __bool__(self):
        return self.passed


def verify_quadratic_rate(report, floor=None, slack=10.0):
    """Check ``e_{n+1} <= C e_n^2`` on the errors of a Newton run.

    With at least two informative steps (errors above the round-off floor)
    the order is fitted from ``log e_{n+1}`` against ``log e_n`` and must be
    at least 1.5. With fewer, the check needs the report's Jacobian
    Lipschitz estimate ``theta_est`` and tests the quadratic bound
    ``e_{n+1} <= slack * rho* * theta * e_n^2`` directly; without it the
    result is inconclusive.
    """
    if isinstance(report, ConvergenceReport):
        errs = np.array(report.errors)
        rho, theta = report.rho_star, report.theta_est
        xs = np.max(np.abs(report.solution))
    else:
        errs = np.abs(np.asarray(report, dtype=float))
        rho, theta, xs = float("nan"), None, 0.0
    if floor is None:
        floor = 1e3 * _EPS * max(1.0, float(xs))
    pairs = [(errs[n], errs[n + 1]) for n in range(len(errs) - 1) if errs[n] > floor]
    ratios = [b / a**2 for a, b in pairs if b > floor]
    C = float(max(ratios)) if ratios else 0.0
    live = [(a, b) for a, b in pairs if b > floor]
    if len(live) >= 2:
        la = np.log([a for a, _ in live])
        lb = np.log([b for _, b in live])
        order = float(np.polyfit(la, lb, 1)[0])
        return RateCheck("pass" if order >= 1.5 else "fail", C, order)
    if theta is None or not np.isfinite(rho) or not pairs:
        return RateCheck("inconclusive", C)
    bound = slack * rho * theta
    ok = all(b <= bound * a**2 + floor for a, b in pairs)
    return RateCheck("pass" if ok else "fail", C, bound=bound)
