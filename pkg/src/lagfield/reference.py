"""Ground-truth discrete field theories and training-data generation.

The discrete wave equation uses the 3-point density

    L_d(a, b, c) = 1/2 ((b - a)/dt)^2 - 1/2 ((c - a)/dx)^2 - V(a)

on the cell (u^i_j, u^{i+1}_j, u^i_{j+1}). The discrete Schrödinger
equation uses a 4-point density that evaluates the real Lagrangian
``hbar (J^-1 u).u_t - |u_x|^2 - V(|u|^2)`` at the cell centre, with the
field stored as two real components (real and imaginary part).
"""

from dataclasses import dataclass
from functools import lru_cache

import jax
import jax.numpy as jnp
import numpy as np

from .density import DensityModel
from .errors import DegenerateMeshError, MisuseError, NoRealSolutionError, SizingError
from .lattice import Field
from .solver import NewtonConfig, propagate


def quadratic_potential(u):
    return 0.5 * u * u


def linear_potential(r):
    return r


@dataclass(frozen=True)
class WaveParams:
    dt: float = 0.025
    dx: float = 0.05
    potential: object = quadratic_potential

    def __post_init__(self):
        if not (self.dt > 0 and self.dx > 0):
            raise SizingError("dt and dx must be positive")

    def density(self):
        return wave_density(self)


@dataclass(frozen=True)
class SchrodingerParams:
    """``potential`` is V(r) with r = |Psi|^2; ``beta`` scales the default V(r) = r."""

    dt: float = 0.01
    dx: float = 0.125
    hbar: float = 1.0
    beta: float = 1.0
    potential: object = None

    def __post_init__(self):
        if not (self.dt > 0 and self.dx > 0 and self.hbar > 0):
            raise SizingError("dt, dx and hbar must be positive")

    @property
    def V(self):
        if self.potential is not None:
            return self.potential
        return _scaled_linear(self.beta)

    def density(self):
        return schrodinger_density(self)


@lru_cache(maxsize=None)
def _scaled_linear(beta):
    def V(r):
        return beta * r
    return V


# ------------------------------------------------------------------- wave

@lru_cache(maxsize=None)
def _wave_fn(dt, dx, V):
    def fn(theta, x):
        a, b, c = x[0, 0], x[1, 0], x[2, 0]
        return 0.5 * ((b - a) / dt) ** 2 - 0.5 * ((c - a) / dx) ** 2 - V(a)
    return fn


def wave_density(params=WaveParams()):
    return DensityModel(_wave_fn(float(params.dt), float(params.dx), params.potential),
                        3, 1, np.zeros(0), "analytic_wave",
                        info={"dt": params.dt, "dx": params.dx,
                              "default_potential": params.potential is quadratic_potential})


@lru_cache(maxsize=None)
def _dV(V):
    return jax.jit(jax.vmap(jax.grad(V)))


def wave_del_update(u_prev, u, u_right, u_left, params=WaveParams()):
    """Explicit 5-point update for ``u^{i+1}_j`` (works elementwise on arrays)."""
    u_prev, u, u_right, u_left = (np.asarray(a, dtype=float) for a in (u_prev, u, u_right, u_left))
    dV = np.asarray(_dV(params.potential)(jnp.ravel(jnp.asarray(u)))).reshape(u.shape)
    r2 = (params.dt / params.dx) ** 2
    return 2 * u - u_prev + r2 * (u_left - 2 * u + u_right) - params.dt**2 * dV


def wave_explicit_propagate(U0, U1, steps, params=WaveParams()):
    """Periodic explicit propagation by the 5-point update (oracle for the solvers)."""
    rows = [np.asarray(U0, dtype=float).ravel(), np.asarray(U1, dtype=float).ravel()]
    for _ in range(steps - 1):
        u, up = rows[-1], rows[-2]
        rows.append(wave_del_update(up, u, np.roll(u, -1), np.roll(u, 1), params))
    return np.stack(rows)


def _bisect(g, lo, hi, tol=1e-14):
    glo = g(lo)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        gm = g(mid)
        if (gm > 0) == (glo > 0):
            lo, glo = mid, gm
        else:
            hi = mid
        if hi - lo <= tol:
            break
    return 0.5 * (lo + hi)


def wave_dispersion_rhs(m, b, params):
    kappa = 2 * np.pi * m / b
    dt, dx = params.dt, params.dx
    return 1 - dt**2 / 2 + (dt / dx) ** 2 * (np.cos(kappa * dx) - 1)


def wave_tw_speed(m, b=1.0, params=WaveParams()):
    """Smallest positive speed of the travelling wave with ``m`` periods per ``b``.

    Solves ``cos(k c dt) = 1 - dt^2/2 + (dt/dx)^2 (cos(k dx) - 1)``,
    ``k = 2 pi m / b``, for the phase ``k c dt`` in (0, pi] by bisection.
    Only valid for the quadratic potential.
    """
    if m == 0 or b <= 0:
        raise MisuseError("need m != 0 and b > 0")
    if params.potential is not quadratic_potential:
        raise MisuseError("the dispersion relation holds for V(u) = u^2/2 only")
    rhs = wave_dispersion_rhs(m, b, params)
    if not -1.0 <= rhs <= 1.0:
        raise NoRealSolutionError(f"no real wave speed: right-hand side {rhs} outside [-1, 1]")
    phase = _bisect(lambda s: np.cos(s) - rhs, 0.0, np.pi)
    kappa = 2 * np.pi * abs(m) / b
    return phase / (kappa * params.dt)


def wave_speed_continuum(m, b=1.0):
    """Speed of the corresponding wave of u_tt = u_xx - u."""
    return np.sqrt(1 + b**2 / (4 * np.pi**2 * m**2))


def wave_tw_field(grid, m, b=1.0, c=None, alpha=(1.0, 0.0), params=None):
    """Sinusoidal travelling wave ``a1 sin(k(x - c t)) + a2 cos(k(x - c t))`` on the grid."""
    if c is None:
        c = wave_tw_speed(m, b, params or WaveParams(grid.dt, grid.dx))
    kappa = 2 * np.pi * m / b
    xi = grid.x()[None, :] - c * grid.t()[:, None]
    return Field(grid, alpha[0] * np.sin(kappa * xi) + alpha[1] * np.cos(kappa * xi))


# ------------------------------------------------------------- Schrödinger

@lru_cache(maxsize=None)
def _schrodinger_fn(dt, dx, hbar, V):
    def fn(theta, x):
        # corners (i,j), (i+1,j), (i,j+1), (i+1,j+1)
        m = 0.25 * (x[0] + x[1] + x[2] + x[3])
        ut = (x[1] + x[3] - x[0] - x[2]) / (2 * dt)
        ux = (x[2] + x[3] - x[0] - x[1]) / (2 * dx)
        jinv_m = jnp.stack([m[1], -m[0]])
        return hbar * jnp.dot(jinv_m, ut) - jnp.dot(ux, ux) - V(jnp.dot(m, m))
    return fn


def schrodinger_density(params=SchrodingerParams()):
    return DensityModel(_schrodinger_fn(float(params.dt), float(params.dx), float(params.hbar), params.V),
                        4, 2, np.zeros(0), "analytic_schrodinger", linear_in_velocity=True,
                        info={"dt": params.dt, "dx": params.dx, "hbar": params.hbar, "beta": params.beta,
                              "default_potential": params.potential is None})


def _J(v):
    # multiplication by i on (real, imag) pairs
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def schrodinger_del_residual(tuples, params=SchrodingerParams()):
    """``i hbar D_t Psi + D_x^2 Psi - 1/4 sum V'(|m|^2) m`` on 9-point tuples.

    ``tuples`` has shape (..., 9, 2) in the 9-point order. ``D_x^2`` weights
    the three time levels 1, 2, 1 (divided by 4 dx^2). The generic DEL of
    :func:`schrodinger_density` equals twice this residual.
    """
    t = np.asarray(tuples, dtype=float)
    dt, dx, hbar = params.dt, params.dx, params.hbar
    Dt = ((t[..., 7, :] - t[..., 8, :]) + 2 * (t[..., 1, :] - t[..., 4, :])
          + (t[..., 3, :] - t[..., 5, :])) / (8 * dt)
    Dxx = ((t[..., 8, :] - 2 * t[..., 4, :] + t[..., 5, :])
           + 2 * (t[..., 6, :] - 2 * t[..., 0, :] + t[..., 2, :])
           + (t[..., 7, :] - 2 * t[..., 1, :] + t[..., 3, :])) / (4 * dx**2)
    dV = _dV(params.V)
    pot = 0.0
    for cell in ((0, 1, 2, 3), (4, 0, 5, 2), (6, 7, 0, 1), (8, 6, 4, 0)):
        m = 0.25 * sum(t[..., k, :] for k in cell)
        r = np.sum(m * m, axis=-1)
        pot = pot + np.asarray(dV(jnp.ravel(jnp.asarray(r)))).reshape(r.shape)[..., None] * m
    return hbar * _J(Dt) + Dxx - 0.25 * pot


def schrodinger_tw_speed(m, b=1.0, params=SchrodingerParams(), s=0):
    """Speed of the plane wave ``exp(i k (x - c t))`` for the potential V(r) = beta r."""
    if m == 0 or b <= 0:
        raise MisuseError("need m != 0 and b > 0")
    if params.potential is not None:
        raise MisuseError("the closed-form speed assumes V(r) = beta r")
    kappa = 2 * np.pi * m / b
    dt, dx, hbar, beta = params.dt, params.dx, params.hbar, params.beta
    half = kappa * dx / 2
    if np.isclose(np.cos(half), 0.0, atol=1e-12):
        raise DegenerateMeshError("k dx = pi: the dispersion relation has a pole")
    arg = (2 / hbar) * (dt / dx**2) * np.tan(half) ** 2 + beta * dt / (2 * hbar)
    return 2 / (kappa * dt) * (np.arctan(arg) + s * np.pi)


def schrodinger_speed_continuum(m, b=1.0, hbar=1.0, beta=1.0):
    """Continuum plane-wave speed for V(r) = beta r."""
    return 2 * np.pi * m / (hbar * b) + b * beta / (2 * np.pi * m * hbar)


def spurious_speed(m, m_tilde, dt, b=1.0):
    """Speeds of waves that flip sign every time step and have no continuum limit."""
    return b * (2 * m_tilde + 1) / (2 * m * dt)


def schrodinger_tw_field(grid, m, b=1.0, c=None, alpha=1.0, params=None):
    """Plane wave ``alpha exp(i k (x - c t))`` as a two-component field."""
    if c is None:
        c = schrodinger_tw_speed(m, b, params or SchrodingerParams(grid.dt, grid.dx))
    kappa = 2 * np.pi * m / b
    ph = kappa * (grid.x()[None, :] - c * grid.t()[:, None])
    return Field(grid, np.stack([alpha * np.cos(ph), alpha * np.sin(ph)], axis=-1))


# ------------------------------------------------------------ Fourier data

def rdft(x):
    """Forward real DFT ``X_k = sum_j x_j exp(-2 pi i j k / M)``, k = 0..M//2 (direct sum)."""
    x = np.asarray(x, dtype=float)
    M = x.shape[-1]
    k = np.arange(M // 2 + 1)
    E = np.exp(-2j * np.pi * np.outer(k, np.arange(M)) / M)
    return x @ E.T


def irdft(X, M):
    """Inverse of :func:`rdft` (normalized by 1/M, as ``numpy.fft.irfft``).

    Imaginary parts of the constant and (for even M) Nyquist terms are
    ignored.
    """
    X = np.asarray(X, dtype=complex)
    j = np.arange(M)
    out = np.real(X[..., 0]) * np.ones(M)
    top = (M - 1) // 2
    for k in range(1, top + 1):
        out = out + 2 * np.real(X[..., k, None] * np.exp(2j * np.pi * k * j / M))
    if M % 2 == 0:
        out = out + np.real(X[..., M // 2, None]) * np.cos(np.pi * j)
    return out / M


def fourier_amplitudes(M, eta):
    """Coefficients ``gamma_j = M exp(-2 j^4) eta_j`` for j = 0..M//2."""
    j = np.arange(M // 2 + 1)
    return M * np.exp(-2.0 * j**4) * np.asarray(eta, dtype=float)


def random_initial_data(rng, M, velocity=False):
    """Smooth random periodic slice of length M (and standard normal velocities)."""
    if M < 2:
        raise SizingError("need M >= 2")
    rng = np.random.default_rng(rng)
    eta = rng.standard_normal(M // 2 + 1)
    u = irdft(fourier_amplitudes(M, eta), M)
    if velocity:
        return u, rng.standard_normal(M)
    return u


def generate_trajectories(theory, K, grid, seed, config=NewtonConfig(), mode="timeslice"):
    """``K`` solutions of a reference theory from seeded random initial data.

    ``theory`` is a :class:`WaveParams`, a :class:`SchrodingerParams` or an
    analytic density. Wave data need positions and velocities; the
    Schrödinger density is linear in velocities and uses positions only
    (independent real and imaginary parts).
    """
    model = theory.density() if hasattr(theory, "density") else theory
    seqs = np.random.SeedSequence(seed).spawn(K)
    fields = []
    for k, ss in enumerate(seqs):
        rng = np.random.default_rng(ss)
        if model.linear_in_velocity:
            U0 = np.stack([random_initial_data(rng, grid.columns) for _ in range(model.d)], axis=-1)
            V0 = None
        else:
            parts = [random_initial_data(rng, grid.columns, velocity=True) for _ in range(model.d)]
            U0 = np.stack([p[0] for p in parts], axis=-1)
            V0 = np.stack([p[1] for p in parts], axis=-1)
        try:
            fields.append(propagate(model, U0, V0=V0, grid=grid, config=config, mode=mode))
        except Exception as exc:
            if hasattr(exc, "trajectory"):
                exc.trajectory = k
            raise
    return fields
