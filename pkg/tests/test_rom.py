import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lagfield import Grid2D
from lagfield.density import LATENT_MLP, WAVE_MLP, function_density, mlp_density
from lagfield.errors import MisuseError, PropagationError, ShapeError, SizingError
from lagfield.reference import WaveParams, generate_trajectories
from lagfield.rom import (PCAMap, fit_pca, latent_dataset, latent_del_residual, latent_wave_loss,
                          locate_tw_latent, project_fields, propagate_latent, reconstruction_error,
                          rom_predict, snapshot_matrix, train_latent)
from lagfield.training import AdamConfig
from lagfield.tw import TWSearchConfig, sine_profile

G = Grid2D(20, 20, 0.025, 0.05)


def _free_particle(dt=0.025):
    return function_density(lambda x: 0.5 * np.sum((x[1] - x[0]) ** 2) / dt**2, 2, 2)


@pytest.fixture(scope="module")
def fields():
    return generate_trajectories(WaveParams(), 3, G, seed=5)


def test_snapshot_matrix_layout(fields):
    S = snapshot_matrix(fields)
    assert S.shape == (20, 3 * 21)
    np.testing.assert_array_equal(S[:, 21 + 4], fields[1].values[4, :, 0])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), r=st.integers(1, 8))
def test_projection_identities(seed, r):
    S = np.random.default_rng(seed).standard_normal((12, 30))
    pca = fit_pca(S, r)
    A = pca.basis
    np.testing.assert_allclose(A.T @ A, np.eye(r), atol=1e-12)
    q = np.random.default_rng(seed + 1).standard_normal((5, r))
    np.testing.assert_allclose(pca.project(pca.lift(q)), q, atol=1e-12)
    P = A @ A.T
    np.testing.assert_allclose(P @ P, P, atol=1e-12)


def test_reconstruction_error_decreases_with_rank(fields):
    S = snapshot_matrix(fields)
    errs = [reconstruction_error(fit_pca(S, r), S) for r in range(1, 21)]
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-12


def test_projection_error_matches_discarded_energy():
    rng = np.random.default_rng(2)
    S = rng.standard_normal((10, 40))
    U, s, Vt = np.linalg.svd(S, full_matrices=False)
    pca = fit_pca(S, 3)
    np.testing.assert_allclose(pca.singular_values, s[:3])
    # Frobenius residual of the rank-3 projection is the tail of the spectrum
    R = S - pca.basis @ (pca.basis.T @ S)
    assert np.linalg.norm(R) == pytest.approx(np.sqrt(np.sum(s[3:] ** 2)), rel=1e-12)


def test_reconstruction_error_oracle_and_zero_columns():
    A = np.eye(3)[:, :1]
    S = np.array([[1.0, 3.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 0.0]])
    err, skipped = reconstruction_error(PCAMap(A), S, return_skipped=True)
    assert skipped == 1
    assert err == pytest.approx(0.5 * (0.0 + 4.0 / 5.0))


def test_low_rank_snapshots_warn_and_pad():
    S = np.outer(np.arange(1.0, 7.0), np.ones(4))
    with pytest.warns(UserWarning):
        pca = fit_pca(S, 3)
    np.testing.assert_allclose(pca.basis.T @ pca.basis, np.eye(3), atol=1e-12)
    with pytest.raises(SizingError):
        fit_pca(S, 7)


def test_shape_checks():
    pca = PCAMap(np.eye(4)[:, :2])
    with pytest.raises(ShapeError):
        pca.project(np.zeros(5))
    with pytest.raises(ShapeError):
        pca.lift(np.zeros(3))
    with pytest.raises(ShapeError):
        PCAMap(np.zeros((2, 3)))
    np.testing.assert_array_equal(pca.project(np.ones((4, 1))), [1.0, 1.0])


def test_free_particle_latent_dynamics():
    m = _free_particle()
    q = np.array([[0.0, 1.0], [0.5, 0.5], [1.0, 0.0]])
    assert np.max(np.abs(latent_del_residual(m, q))) < 1e-12
    out = propagate_latent(m, [0.0, 1.0], [0.1, 0.8], 10)
    np.testing.assert_allclose(out, np.array([[0.1 * i, 1.0 - 0.2 * i] for i in range(11)]), atol=1e-12)
    with pytest.raises(MisuseError):
        latent_del_residual(mlp_density(WAVE_MLP, 3, 1), q)


def test_latent_propagation_failure_is_reported():
    flat = function_density(lambda x: 0.0 * x[0, 0], 2, 2)
    with pytest.raises(PropagationError) as info:
        propagate_latent(flat, [0.0, 0.0], [1.0, 1.0], 4)
    assert info.value.time_index == 2


def test_rom_lift_is_exact_in_the_span(fields):
    pca = fit_pca(snapshot_matrix(fields), 2)
    U0, U1 = pca.lift([1.0, 0.0]), pca.lift([1.1, -0.1])
    out = rom_predict(_free_particle(), pca, U0, U1, 5)
    np.testing.assert_allclose(pca.project(out), [[1 + 0.1 * i, -0.1 * i] for i in range(6)], atol=1e-12)


def test_latent_training_runs_and_descends(fields):
    pca = fit_pca(snapshot_matrix(fields), 2)
    ds = latent_dataset(pca, fields)
    assert len(ds) == 3 * 19 and len(project_fields(pca, fields)) == 3
    run = train_latent(mlp_density(LATENT_MLP, 2, 2, seed=0), ds, adam_config=AdamConfig(epochs=20))
    assert run.l_data[-1] < run.initial[0]


def test_latent_wave_loss_and_search():
    m = _free_particle()
    pca = PCAMap(np.eye(20)[:, :2])
    p = sine_profile(1.0, 20, 1, 1.0)
    assert latent_wave_loss(m, pca, p, G) > 0
    prof, info = locate_tw_latent(m, pca, p, G, TWSearchConfig(steps=200))
    assert info["loss_wave"] <= latent_wave_loss(m, pca, p.scaled(1 / np.sqrt(0.0125)), G) + 1e-12
    with pytest.raises(MisuseError):
        locate_tw_latent(m, PCAMap(np.eye(10)[:, :2]), p, G)
