import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lagfield import DIRICHLET, Grid2D
from lagfield.errors import MisuseError
from lagfield.reference import (SchrodingerParams, schrodinger_density, schrodinger_tw_speed,
                                wave_density, wave_tw_field, wave_tw_speed)
from lagfield.tw import (TWSearchConfig, WaveProfile, _lattice_objective, _smoothed_objective,
                         locate_tw, loss_unit, loss_wave, perturb_profile, plane_wave_profile,
                         profile_eval, profile_field, profile_norm2, restricted_action_gradient,
                         sine_profile, unit_profile, verify_tw, zero_profile)

G = Grid2D(20, 20, 0.025, 0.05)
GS = Grid2D(12, 8, 0.01, 0.125)


def test_profile_series_convention():
    p = sine_profile(1.0, 20, 2, 0.0, amplitude=1.5)
    xi = np.linspace(0, 1, 17)
    np.testing.assert_allclose(profile_eval(p, xi)[:, 0], 1.5 * np.sin(4 * np.pi * xi), atol=1e-14)
    q = WaveProfile(1.0, 0.0, np.array([[0.3 + 2j, 0.25 - 0.5j]]))
    assert q.coeffs[0, 0] == 0.3
    np.testing.assert_allclose(profile_eval(q, xi)[:, 0],
                               0.3 + 0.5 * np.cos(2 * np.pi * xi) + np.sin(2 * np.pi * xi), atol=1e-14)


def test_profile_norm_and_rescaling():
    p = sine_profile(1.0, 20, 1, 1.0, amplitude=2.0)
    assert profile_norm2(p, 0.05) == pytest.approx(0.05)
    u = unit_profile(p, 0.05)
    assert profile_norm2(u, 0.05) == pytest.approx(1.0)
    assert loss_unit(u, 0.05) < 1e-14
    with pytest.raises(MisuseError):
        unit_profile(zero_profile(1.0, 20), 0.05)


@pytest.mark.parametrize("m", [1, 2])
def test_filled_lattice_is_the_reference_wave(m):
    c = wave_tw_speed(m)
    p = sine_profile(1.0, 20, m, c)
    np.testing.assert_allclose(profile_field(p, G)[..., 0], wave_tw_field(G, m).values[..., 0], atol=1e-13)
    assert verify_tw(wave_density(), p, G) < 1e-10
    assert loss_wave(wave_density(), p.scaled(7.0), G) < 1e-18


def test_wrong_speed_is_not_a_wave():
    p = sine_profile(1.0, 20, 1, wave_tw_speed(1) + 0.01)
    assert verify_tw(wave_density(), p, G) > 1e-3


def test_schrodinger_plane_wave_has_zero_loss():
    p = plane_wave_profile(1.0, 8, 1, schrodinger_tw_speed(1))
    assert verify_tw(schrodinger_density(), p, GS) < 1e-10


def test_bad_inputs():
    p = sine_profile(1.0, 20, 1, 1.0)
    with pytest.raises(MisuseError):
        loss_wave(wave_density(), p, Grid2D(20, 20, 0.025, 0.05, DIRICHLET))
    with pytest.raises(MisuseError):
        loss_wave(schrodinger_density(), p, GS)


def test_perturbation_is_seeded():
    p = sine_profile(1.0, 20, 1, 1.0)
    a, b = perturb_profile(p, 0.5, 3), perturb_profile(p, 0.5, 3)
    assert a == a and a.c == b.c and np.array_equal(a.coeffs, b.coeffs)
    assert a.coeffs[0, 0].imag == 0


def _objective_parts(model, p, grid, objective):
    h = p.coeffs

    def f(c, hr, hi):
        return objective(model.fn, model.kind, model.theta, p.b, c, hr, hi, grid.n_t, grid.n_x, grid.dt, grid.dx)

    return f, (jnp.asarray(p.c), jnp.asarray(h.real), jnp.asarray(h.imag))


@pytest.mark.parametrize("objective", [_lattice_objective, _smoothed_objective])
def test_search_objective_gradient_matches_finite_differences(objective):
    p = perturb_profile(unit_profile(sine_profile(1.0, 20, 1, wave_tw_speed(1)), 0.05), 0.05, 0)
    f, args = _objective_parts(wave_density(), p, G, objective)
    g = jax.grad(f, argnums=(0, 1, 2))(*args)
    # the objective is of size 1e7, so small steps lose digits; it is quadratic in the coefficients
    eps = 1e-5
    fd_c = (f(args[0] + eps, *args[1:]) - f(args[0] - eps, *args[1:])) / (2 * eps)
    assert float(fd_c) == pytest.approx(float(g[0]), rel=1e-5)
    eps = 1e-3
    for part in (1, 2):
        for k in (1, 3, 7):
            e = jnp.zeros_like(args[part]).at[0, k].set(eps)
            lo, hi = list(args), list(args)
            lo[part], hi[part] = args[part] - e, args[part] + e
            fd = (f(*hi) - f(*lo)) / (2 * eps)
            assert float(fd) == pytest.approx(float(g[part][0, k]), rel=1e-5, abs=1e-6)


def test_smoothed_objective_vanishes_with_the_plain_one():
    p = sine_profile(1.0, 20, 2, wave_tw_speed(2))
    f, args = _objective_parts(wave_density(), p, G, _smoothed_objective)
    assert float(f(*args)) < 1e-18
    f, args = _objective_parts(wave_density(), p.scaled(3.0), G, _smoothed_objective)
    assert float(f(args[0] + 0.05, *args[1:])) > 1e-4


@pytest.mark.parametrize("m", [1, 2])
def test_exact_wave_is_critical_for_the_restricted_action(m):
    p = sine_profile(1.0, 20, m, wave_tw_speed(m))
    gr, gi = restricted_action_gradient(wave_density(), p, G)
    assert max(np.abs(gr).max(), np.abs(gi).max()) < 1e-9
    gr, gi = restricted_action_gradient(wave_density(), WaveProfile(1.0, p.c + 0.2, p.coeffs), G)
    assert max(np.abs(gr).max(), np.abs(gi).max()) > 1e-3


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_restricted_gradient_is_scale_covariant(seed):
    rng = np.random.default_rng(seed)
    h = rng.standard_normal((1, 11)) + 1j * rng.standard_normal((1, 11))
    p = WaveProfile(1.0, rng.uniform(0.5, 1.5), h)
    a = restricted_action_gradient(wave_density(), p, G)
    b = restricted_action_gradient(wave_density(), p.scaled(2.0), G)
    # quadratic density: the gradient is linear in the coefficients
    np.testing.assert_allclose(b[0], 2 * a[0], rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize("seed", [0, 1])
def test_locate_wave_from_a_perturbed_start(seed):
    c = wave_tw_speed(1)
    start = perturb_profile(unit_profile(sine_profile(1.0, 20, 1, c), 0.05), 0.5, seed)
    prof, info = locate_tw(wave_density(), start, G)
    assert abs(prof.c - c) < 1e-3
    assert profile_norm2(prof, 0.05) == pytest.approx(1.0)
    assert info["loss_wave"] < 0.1 and len(info["history"]) == TWSearchConfig().steps


def test_plain_objective_without_normalization_runs():
    c = wave_tw_speed(1)
    start = unit_profile(sine_profile(1.0, 20, 1, c), 0.05)
    prof, info = locate_tw(wave_density(), start, G, TWSearchConfig(steps=50, normalize=False, smooth=False))
    assert abs(prof.c - c) < 1e-2 and np.isfinite(info["loss_wave"])
