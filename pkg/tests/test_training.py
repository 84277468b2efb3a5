import jax
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lagfield import Grid2D, StencilKind
from lagfield.density import LATENT_MLP, WAVE_MLP, constant_density, mlp_density
from lagfield.errors import MisuseError, ShapeError, SizingError
from lagfield.reference import WaveParams, generate_trajectories, wave_density
from lagfield.training import (AdamConfig, AdamState, Dataset, LossConfig, adam_step, full_losses,
                               loss_data, loss_reg_slice, loss_reg_stencil, train)

G = Grid2D(20, 20, 0.025, 0.05)
K7 = StencilKind.PTS3_7STENCIL


@pytest.fixture(scope="module")
def fields():
    return generate_trajectories(WaveParams(), 2, G, seed=0)


@pytest.fixture(scope="module")
def data(fields):
    return Dataset.from_fields(fields, K7)


def test_dataset_counts(fields):
    ds = Dataset.from_fields(fields, K7)
    assert len(ds) == 2 * 19 * 20
    assert ds.pairs.shape == (2 * 20, 2, 20, 1)
    coarse = Dataset.from_fields(fields, K7, stride=2)
    assert len(coarse) == 2 * 17 * 20
    with pytest.raises(SizingError):
        Dataset.from_fields([], K7)


def test_blocks_partition_the_tuples(data):
    seen = np.concatenate([b[0] for b in data.blocks])
    assert np.array_equal(np.sort(seen), np.arange(len(data)))
    for sel, pr in data.blocks:
        assert len(set(data.provenance[sel, 1])) == 1
        assert len(pr) == 2


def test_true_density_has_zero_data_loss(data):
    assert float(loss_data(wave_density(), data)) < 1e-18


def test_regularizer_values_for_the_wave_density(data):
    m = wave_density()
    expected = 1.0 / 1600**2
    assert float(loss_reg_stencil(m, data.tuples[:50])) == pytest.approx(expected, rel=1e-10)
    assert float(loss_reg_stencil(m, data.tuples[:50], method="inverse_iteration")) == pytest.approx(expected, rel=1e-8)
    assert float(loss_reg_slice(m, data.pairs[:4], G, tamed=False)) == pytest.approx(expected, rel=1e-8)
    assert float(loss_reg_slice(m, data.pairs[:4], G, tamed=True)) == 0.0
    assert expected == pytest.approx(3.90625e-7)


def test_singular_densities_hit_the_floor(data):
    m = constant_density(0.0)
    assert float(loss_reg_stencil(m, data.tuples[:5])) == pytest.approx(1e16)
    assert float(loss_reg_slice(m, data.pairs[:2], G, tamed=True)) == 1.0


def test_batch_shape_checks(data):
    with pytest.raises(MisuseError):
        loss_data(wave_density(), np.zeros((3, 9, 1)))
    with pytest.raises(MisuseError):
        LossConfig(reg_kind="l2")
    with pytest.raises(MisuseError):
        AdamConfig(batching="slices")


def test_loss_gradient_matches_finite_differences(data):
    m = mlp_density(WAVE_MLP, 3, 1, seed=1)
    batch = data.tuples[:30]

    def total(th):
        mm = m.with_params(th)
        return loss_data(mm, batch) + loss_reg_stencil(mm, batch)

    g = np.asarray(jax.grad(total)(m.theta))
    rng = np.random.default_rng(0)
    for k in rng.choice(m.theta.size, 12, replace=False):
        e = np.zeros_like(g)
        e[k] = 1e-6
        fd = (float(total(m.theta + e)) - float(total(m.theta - e))) / 2e-6
        assert fd == pytest.approx(g[k], rel=1e-5, abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), steps=st.integers(1, 5))
def test_adam_matches_a_plain_implementation(seed, steps):
    rng = np.random.default_rng(seed)
    th = rng.standard_normal(6)
    cfg = AdamConfig(lr=0.01)
    state = AdamState.zeros(6)
    ref, m, v = th.copy(), np.zeros(6), np.zeros(6)
    for t in range(1, steps + 1):
        g = rng.standard_normal(6)
        th, state = adam_step(th, g, state, cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(th, ref, rtol=1e-12, atol=1e-14)
    assert state.t == steps


def test_adam_shape_check():
    with pytest.raises(ShapeError):
        adam_step(np.zeros(3), np.zeros(4), AdamState.zeros(3))


def test_training_is_deterministic_and_descends(data):
    m = mlp_density(WAVE_MLP, 3, 1, seed=0)
    cfg = AdamConfig(lr=1e-3, batch_size=20, epochs=4)
    lc = LossConfig(weight=1e-8)
    a = train(m, data, lc, cfg, seed=3)
    b = train(m, data, lc, cfg, seed=3)
    assert np.array_equal(a.model.theta, b.model.theta)
    assert a.l_data[-1] < a.initial[0]
    c = train(m, data, lc, cfg, seed=4)
    assert not np.array_equal(a.model.theta, c.model.theta)


def test_resumed_training_equals_one_run(data):
    m = mlp_density(WAVE_MLP, 3, 1, seed=0)
    lc = LossConfig(weight=1e-8)
    whole = train(m, data, lc, AdamConfig(batch_size=40, epochs=2), seed=1)
    half = train(m, data, lc, AdamConfig(batch_size=40, epochs=1), seed=1)
    rest = train(half.model, data, lc, AdamConfig(batch_size=40, epochs=1), seed=1,
                 state=half.state, history=half.history)
    np.testing.assert_allclose(rest.model.theta, whole.model.theta, rtol=0, atol=1e-13)
    assert [h[0] for h in rest.history] == [1, 2]


def test_block_batching_with_slice_regularizer(data):
    m = mlp_density(WAVE_MLP, 3, 1, seed=0)
    lc = LossConfig(reg_kind="slice_tamed", weight=1.0)
    run = train(m, data, lc, AdamConfig(batching="blocks", blocks_per_batch=4, epochs=2), seed=0)
    assert len(run.history) == 2 and np.all(np.isfinite(run.l_data))
    ld, lr = full_losses(run.model, data, lc)
    assert (ld, lr) == (run.history[-1][1], run.history[-1][2])


def test_latent_dataset():
    q = [np.cumsum(np.ones((6, 2)), axis=0), np.zeros((5, 2))]
    ds = Dataset.from_latent(q)
    assert ds.kind == StencilKind.PTS2_3STENCIL
    assert ds.tuples.shape == (4 + 3, 3, 2)
    m = mlp_density(LATENT_MLP, 2, 2, seed=0)
    assert np.isfinite(float(loss_data(m, ds)))
