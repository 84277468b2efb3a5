"""Travelling-wave search in discrete field theories.

A wave profile ``f`` of period ``b`` is stored by its Fourier coefficients
``h_0 .. h_K`` (``h_0`` real, the negative modes implied by conjugate
symmetry), one set per field component. The lattice is filled with
``u^i_j = f(j dx - c i dt)`` and the DEL residuals of that field are driven
to zero, jointly in the speed ``c`` and the coefficients.
"""

from dataclasses import dataclass, replace
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

from .errors import MisuseError, TrainingError
from .lattice import StencilKind
from .density import del_batch
from .training import data_terms


@dataclass(frozen=True)
class WaveProfile:
    """``f(xi) = h_0 + 2 sum_{m>=1} Re(h_m exp(2 pi i m xi / b))`` per component.

    ``coeffs`` is complex with shape (d, K+1).
    """

    b: float
    c: float
    coeffs: np.ndarray

    def __post_init__(self):
        h = np.atleast_2d(np.asarray(self.coeffs, dtype=complex))
        h = h.copy()
        h[:, 0] = h[:, 0].real
        h.setflags(write=False)
        object.__setattr__(self, "coeffs", h)
        if not self.b > 0:
            raise MisuseError("period must be positive")

    @property
    def d(self):
        return self.coeffs.shape[0]

    @property
    def n_coeffs(self):
        return self.coeffs.shape[1]

    def scaled(self, factor):
        return replace(self, coeffs=self.coeffs * factor)


def zero_profile(b, M, d=1, c=0.0):
    return WaveProfile(b, c, np.zeros((d, M // 2 + 1), dtype=complex))


def sine_profile(b, M, m, c, amplitude=1.0, phase="sin"):
    """Single-mode profile ``amplitude * sin`` (or ``cos``) ``(2 pi m xi / b)``."""
    h = np.zeros((1, M // 2 + 1), dtype=complex)
    h[0, m] = -0.5j * amplitude if phase == "sin" else 0.5 * amplitude
    return WaveProfile(b, c, h)


def plane_wave_profile(b, M, m, c, amplitude=1.0):
    """``amplitude * exp(2 pi i m xi / b)`` as (real, imaginary) components."""
    h = np.zeros((2, M // 2 + 1), dtype=complex)
    h[0, m] = 0.5 * amplitude
    h[1, m] = -0.5j * amplitude
    return WaveProfile(b, c, h)


def _series(b, hr, hi, xi):
    """Evaluate the real series for coefficient parts (d, K) at points ``xi``."""
    m = jnp.arange(hr.shape[1])
    ph = 2 * jnp.pi * m[None, :] * xi[..., None] / b
    w = jnp.where(m == 0, 1.0, 2.0)
    # Re((a + ib) e^{i ph}) = a cos ph - b sin ph
    val = jnp.einsum("...k,dk->...d", w * jnp.cos(ph), hr) - jnp.einsum("...k,dk->...d", w * jnp.sin(ph), hi)
    return val


def profile_eval(profile, xi):
    """Profile values at ``xi``; shape ``xi.shape + (d,)``."""
    h = profile.coeffs
    return np.asarray(_series(profile.b, jnp.asarray(h.real), jnp.asarray(h.imag),
                              jnp.asarray(xi, dtype=float)))


def profile_norm2(profile, dx):
    """Discrete norm ``dx * sum_m |h_m|^2`` over the stored coefficients."""
    return float(dx * np.sum(np.abs(profile.coeffs) ** 2))


def fill_lattice(b, c, hr, hi, n_t, n_x, dt, dx):
    """Lattice field ``u^i_j = f(j dx - c i dt)`` of shape (n_t+1, n_x, d)."""
    xi = jnp.arange(n_x)[None, :] * dx - c * jnp.arange(n_t + 1)[:, None] * dt
    return _series(b, hr, hi, xi)


def profile_field(profile, grid):
    h = profile.coeffs
    return np.asarray(fill_lattice(profile.b, profile.c, jnp.asarray(h.real), jnp.asarray(h.imag),
                                   grid.n_t, grid.columns, grid.dt, grid.dx))


def _lattice_tuples(kind, U):
    offs = np.array(kind.offsets)
    lo, hi = -offs[:, 0].min(), offs[:, 0].max()
    n_t1, n_x = U.shape[0], U.shape[1]
    ii, jj = np.meshgrid(np.arange(lo, n_t1 - hi), np.arange(n_x), indexing="ij")
    ti = ii.ravel()[:, None] + offs[None, :, 0]
    tj = (jj.ravel()[:, None] + offs[None, :, 1]) % n_x
    return U[ti, tj]


def _wave_terms(fn, kind, theta, b, c, hr, hi, n_t, n_x, dt, dx):
    U = fill_lattice(b, c, hr, hi, n_t, n_x, dt, dx)
    return data_terms(fn, kind, theta, _lattice_tuples(kind, U))


def _check(model, profile, grid):
    if model.p not in (3, 4):
        raise MisuseError("travelling waves are searched for 3- or 4-point densities")
    if profile.d != model.d:
        raise MisuseError(f"profile has {profile.d} components, model expects {model.d}")
    if not grid.periodic:
        raise MisuseError("travelling waves need a periodic grid")


def loss_wave(model, profile, grid):
    """Sum of squared DEL residuals over the lattice filled with the profile."""
    _check(model, profile, grid)
    h = profile.coeffs
    return float(jnp.sum(_wave_terms(model.fn, model.kind, model.theta, profile.b, profile.c,
                                     jnp.asarray(h.real), jnp.asarray(h.imag),
                                     grid.n_t, grid.n_x, grid.dt, grid.dx)))


def verify_tw(model, profile, grid):
    """Largest DEL residual norm over the filled lattice."""
    _check(model, profile, grid)
    h = profile.coeffs
    t = _wave_terms(model.fn, model.kind, model.theta, profile.b, profile.c,
                    jnp.asarray(h.real), jnp.asarray(h.imag), grid.n_t, grid.n_x, grid.dt, grid.dx)
    return float(jnp.sqrt(jnp.max(t)))


def loss_unit(profile, dx):
    """``|dx * sum |h_m|^2 - 1|``: keeps the search away from the zero profile."""
    return abs(profile_norm2(profile, dx) - 1.0)


def unit_profile(profile, dx):
    """The profile rescaled to unit discrete norm."""
    n2 = profile_norm2(profile, dx)
    if n2 == 0:
        raise MisuseError("cannot normalize the zero profile")
    return profile.scaled(1.0 / np.sqrt(n2))


def perturb_profile(profile, sigma, rng):
    """Add i.i.d. normal noise to ``c`` and to the real and imaginary coefficient parts."""
    rng = np.random.default_rng(rng)
    h = profile.coeffs
    noise = rng.normal(0, sigma, h.shape) + 1j * rng.normal(0, sigma, h.shape)
    noise[:, 0] = noise[:, 0].real
    return WaveProfile(profile.b, profile.c + rng.normal(0, sigma), h + noise)


@dataclass(frozen=True)
class TWSearchConfig:
    steps: int = 5000
    lr_c: float = 0.01
    lr_coeffs: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    unit_weight: float = 1.0
    normalize: bool = True
    smooth: bool = True


def _pack(profile):
    h = profile.coeffs
    return jnp.concatenate([jnp.array([profile.c]), jnp.asarray(h.real).ravel(), jnp.asarray(h.imag).ravel()])


def _unpack(z, d, K):
    c = z[0]
    hr = z[1:1 + d * K].reshape(d, K)
    hi = z[1 + d * K:].reshape(d, K)
    return c, hr, hi.at[:, 0].set(0.0)


@partial(jax.jit, static_argnums=(0, 1, 2, 3, 4, 5, 6, 7, 8))
def _search(fn, kind, d, K, grid_key, b, cfg, objective, steps, theta, z0):
    n_t, n_x, dt, dx = grid_key
    lr = jnp.concatenate([jnp.array([cfg.lr_c]), jnp.full(2 * d * K, cfg.lr_coeffs)])

    def total(z):
        c, hr, hi = _unpack(z, d, K)
        n2 = dx * (jnp.sum(hr * hr) + jnp.sum(hi * hi))
        if cfg.normalize:
            s = 1.0 / jnp.sqrt(n2)
            hr, hi = hr * s, hi * s
        lw = objective(fn, kind, theta, b, c, hr, hi, n_t, n_x, dt, dx)
        lu = jnp.abs(n2 - 1.0)
        return lw + cfg.unit_weight * lu, (lw, lu)

    vg = jax.value_and_grad(total, has_aux=True)

    def body(carry, k):
        z, m, v = carry
        (loss, aux), g = vg(z)
        t = k + 1
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        step = lr * (m / (1 - cfg.beta1**t)) / (jnp.sqrt(v / (1 - cfg.beta2**t)) + cfg.eps)
        return (z - step, m, v), (loss, aux[0], aux[1])

    zeros = jnp.zeros_like(z0)
    (z, _, _), hist = jax.lax.scan(body, (z0, zeros, zeros), jnp.arange(steps))
    (lf, (lw, lu)) = total(z)[0], total(z)[1]
    return z, hist, lf, lw, lu


def _lattice_objective(fn, kind, theta, b, c, hr, hi, n_t, n_x, dt, dx):
    return jnp.sum(_wave_terms(fn, kind, theta, b, c, hr, hi, n_t, n_x, dt, dx))


# Spatial residual modes k are weighted by (1 + lambda_k / lambda_1)^-3 with
# lambda_k the discrete Laplacian symbol. The lattice DEL grows like k^2 and
# would otherwise let the noise modes of a perturbed start steer the speed.
_SMOOTH_POWER = 3


def _smoothed_objective(fn, kind, theta, b, c, hr, hi, n_t, n_x, dt, dx):
    # zero exactly where the plain residual is
    U = fill_lattice(b, c, hr, hi, n_t, n_x, dt, dx)
    r = del_batch(fn, kind, theta, _lattice_tuples(kind, U)).reshape(-1, n_x, U.shape[-1])
    k = jnp.arange(n_x)
    lam = jnp.sin(jnp.pi * k / n_x) ** 2
    w = 1.0 / (1.0 + lam / jnp.sin(jnp.pi / n_x) ** 2) ** _SMOOTH_POWER
    rh = jnp.fft.fft(r, axis=1)
    return jnp.sum(w[None, :, None] * jnp.abs(rh) ** 2) / n_x


def _run_search(model, initial, grid, config, objective):
    d, K = initial.d, initial.n_coeffs
    z, hist, lf, lw, lu = _search(model.fn, model.kind, d, K,
                                  (grid.n_t, grid.n_x, float(grid.dt), float(grid.dx)),
                                  float(initial.b), config, objective, int(config.steps),
                                  jnp.asarray(model.theta, dtype=float), _pack(initial))
    hist = np.asarray(hist[0])
    if not np.all(np.isfinite(hist)) or not np.isfinite(float(lf)):
        bad = int(np.argmax(~np.isfinite(hist)))
        raise TrainingError(f"travelling-wave search produced a non-finite loss at step {bad}",
                            None, bad, initial)
    c, hr, hi = _unpack(z, d, K)
    prof = WaveProfile(initial.b, float(c), np.asarray(hr) + 1j * np.asarray(hi))
    if config.normalize:
        prof = unit_profile(prof, grid.dx)
    return prof, hist, float(lw), float(lu)


def locate_tw(model, initial, grid, config=TWSearchConfig()):
    """Minimize ``loss_wave + loss_unit`` over (c, coefficients) with Adam.

    With ``config.normalize`` (the default) the wave loss is evaluated on
    the profile rescaled to unit norm, so the normalization holds exactly
    and ``loss_unit`` only keeps the raw coefficients from drifting. The
    DEL residuals carry a ``1/dt^2`` scale; evaluated on the raw profile
    the wave loss dwarfs the unit penalty and the search tends to the zero
    profile. With ``config.smooth`` the search minimizes the residual in a
    weaker norm that damps high spatial modes; it has the same zeros, and
    the reported ``loss_wave`` is always the plain sum.

    Returns ``(profile, info)``; ``info`` holds the final losses, the
    largest DEL residual of the filled lattice and the loss history.
    """
    _check(model, initial, grid)
    objective = _smoothed_objective if config.smooth else _lattice_objective
    prof, hist, lw, lu = _run_search(model, initial, grid, config, objective)
    lw = loss_wave(model, prof, grid)
    return prof, {"loss_wave": lw, "loss_unit": loss_unit(prof, grid.dx), "max_residual": verify_tw(model, prof, grid),
                  "history": hist}


# ----------------------------------------------------------- restricted action

def _cell_shifts(p, c, dt, dx):
    # (time, space) corners of one cell mapped to profile arguments xi + r dx - s c dt
    corners = ((0, 0), (1, 0), (0, 1)) if p == 3 else ((0, 0), (1, 0), (0, 1), (1, 1))
    return jnp.array([r * dx - s * c * dt for s, r in corners])


def restricted_action_value(fn, p, theta, b, c, hr, hi, n_x, dt, dx):
    xi = jnp.arange(n_x) * dx
    pts = xi[:, None] + _cell_shifts(p, c, dt, dx)[None, :]
    vals = _series(b, hr, hi, pts)
    return dx * jnp.sum(jax.vmap(lambda x: fn(theta, x))(vals))


def restricted_action(model, profile, grid):
    """Periodic trapezoid rule (nodes ``k dx``) for the action of the density on
    the wave cell ``(f(xi), f(xi - c dt), f(xi + dx)[, f(xi + dx - c dt)])``."""
    _check(model, profile, grid)
    h = profile.coeffs
    return float(restricted_action_value(model.fn, model.p, model.theta, profile.b, profile.c,
                                         jnp.asarray(h.real), jnp.asarray(h.imag),
                                         grid.n_x, grid.dt, grid.dx))


def restricted_action_gradient(model, profile, grid):
    """Gradient of :func:`restricted_action` in the real and imaginary coefficient parts."""
    _check(model, profile, grid)
    h = profile.coeffs
    g = jax.grad(restricted_action_value, argnums=(5, 6))(
        model.fn, model.p, model.theta, profile.b, profile.c,
        jnp.asarray(h.real), jnp.asarray(h.imag), grid.n_x, grid.dt, grid.dx)
    return np.asarray(g[0]), np.asarray(g[1]).copy()
