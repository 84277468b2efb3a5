"""Reduced-order baseline: PCA of spatial slices plus a latent 2-point Lagrangian.

Slices ``u^i`` are projected to ``q^i = A^T u^i`` with an orthonormal basis
``A`` of leading left singular vectors; a discrete Lagrangian
``L(q^i, q^{i+1})`` is learned on the latent chains and propagated with
the 1-D discrete Euler-Lagrange equations.
"""

import warnings
from dataclasses import dataclass
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

from .density import del_batch, del_single
from .errors import (ConditioningError, MisuseError, NonConvergenceError, PropagationError,
                     ShapeError, SizingError)
from .solver import NewtonConfig, newton
from .training import AdamConfig, Dataset, LossConfig, train
from .tw import (TWSearchConfig, WaveProfile, _pack, _search, _unpack, fill_lattice, loss_unit,
                 unit_profile)

LATENT_LOSS = LossConfig(reg_kind="stencil_inverse", weight=1e-8, sv_iters=3,
                         reg_reduce="sum", sv_method="inverse_iteration")


@dataclass(frozen=True)
class PCAMap:
    """Orthonormal basis ``A`` (M, r): ``pr(u) = A^T u`` and ``R(q) = A q``."""

    basis: np.ndarray
    singular_values: np.ndarray = None

    def __post_init__(self):
        A = np.asarray(self.basis, dtype=float)
        if A.ndim != 2 or A.shape[1] > A.shape[0]:
            raise ShapeError(f"basis of shape {A.shape} is not (M, r) with r <= M")
        A = A.copy()
        A.setflags(write=False)
        object.__setattr__(self, "basis", A)

    @property
    def M(self):
        return self.basis.shape[0]

    @property
    def r(self):
        return self.basis.shape[1]

    def project(self, u):
        """``A^T u`` for slices in the last axis (or of shape (..., M, 1))."""
        u = np.asarray(u, dtype=float)
        if u.ndim >= 2 and u.shape[-1] == 1 and u.shape[-2] == self.M:
            u = u[..., 0]
        if u.shape[-1] != self.M:
            raise ShapeError(f"slices have {u.shape[-1]} points, basis expects {self.M}")
        return u @ self.basis

    def lift(self, q):
        q = np.asarray(q, dtype=float)
        if q.shape[-1] != self.r:
            raise ShapeError(f"latent vectors have {q.shape[-1]} entries, basis has {self.r}")
        return q @ self.basis.T


def snapshot_matrix(fields):
    """Columns are the spatial slices of scalar fields: shape (M, total slices)."""
    cols = []
    for f in fields:
        v = np.asarray(getattr(f, "values", f), dtype=float)
        if v.ndim == 3:
            if v.shape[2] != 1:
                raise ShapeError("PCA snapshots need scalar fields")
            v = v[..., 0]
        cols.append(v.T)
    return np.concatenate(cols, axis=1)


def fit_pca(snapshots, r):
    """Leading ``r`` left singular vectors of the (uncentred) snapshot matrix.

    When the snapshots have rank below ``r`` a warning is issued and the
    basis is completed from the remaining singular vectors.
    """
    S = np.asarray(snapshots, dtype=float)
    if S.ndim != 2:
        raise ShapeError("snapshots must be a matrix (M, n)")
    M = S.shape[0]
    if not 1 <= r <= M:
        raise SizingError(f"need 1 <= r <= {M}")
    U, s, _ = np.linalg.svd(S, full_matrices=True)
    s = np.concatenate([s, np.zeros(M - s.size)])
    tol = (s[0] if s.size and s[0] > 0 else 1.0) * max(S.shape) * np.finfo(float).eps
    rank = int(np.sum(s > tol))
    if rank < r:
        warnings.warn(f"snapshot rank {rank} is below {r}; basis padded with null-space vectors")
    return PCAMap(U[:, :r], s[:r])


def reconstruction_error(pca, snapshots, return_skipped=False):
    """Mean over nonzero columns of ``|u - R(pr(u))|_2 / |u|_2``."""
    S = np.asarray(snapshots, dtype=float)
    A = pca.basis
    rec = A @ (A.T @ S)
    nrm = np.linalg.norm(S, axis=0)
    keep = nrm > 0
    skipped = int(np.sum(~keep))
    err = float(np.mean(np.linalg.norm(S - rec, axis=0)[keep] / nrm[keep])) if keep.any() else 0.0
    return (err, skipped) if return_skipped else err


def project_fields(pca, fields):
    return [pca.project(snapshot_matrix([f]).T) for f in fields]


# ---------------------------------------------------------------- latent dynamics

def _check_latent(model):
    if model.p != 2:
        raise MisuseError("latent dynamics need a 2-point density")


def latent_del_residual(model, triples):
    """``d/dq^i (L(q^{i-1}, q^i) + L(q^i, q^{i+1}))`` for triples (n, 3, r) or one (3, r)."""
    _check_latent(model)
    t = jnp.asarray(triples, dtype=float)
    if t.ndim == 2:
        return np.asarray(del_single(model.fn, model.kind, model.theta, t))
    return np.asarray(del_batch(model.fn, model.kind, model.theta, t))


def latent_dataset(pca, fields):
    return Dataset.from_latent(project_fields(pca, fields))


def train_latent(model, dataset, loss_config=LATENT_LOSS, adam_config=AdamConfig(), seed=0, **kw):
    """Train a latent density; defaults: summed losses, regularizer weight 1e-8,
    3 inverse vector iterations."""
    _check_latent(model)
    return train(model, dataset, loss_config, adam_config, seed, **kw)


@partial(jax.jit, static_argnums=(0, 1))
def _latent_parts(fn, kind, theta, q0, q1, y):
    def res(v):
        return del_single(fn, kind, theta, jnp.stack([q0, q1, v]))
    return res(y), jax.jacfwd(res)(y)


def propagate_latent(model, q0, q1, steps, config=NewtonConfig()):
    """Latent trajectory (steps+1, r) from two states by Newton on the 1-D DEL."""
    _check_latent(model)
    q = [np.asarray(q0, dtype=float).ravel(), np.asarray(q1, dtype=float).ravel()]
    if q[0].size != model.d or q[1].size != model.d:
        raise ShapeError(f"latent states must have {model.d} entries")
    kind = model.kind
    theta = jnp.asarray(model.theta)
    for i in range(1, steps):
        a, b = jnp.asarray(q[-2]), jnp.asarray(q[-1])
        guess = 2 * q[-1] - q[-2] if config.guess == "linear_extrapolation" else q[-1]

        def parts(y):
            return _latent_parts(model.fn, kind, theta, a, b, jnp.asarray(y))

        try:
            x, _ = newton(lambda y: parts(y)[0], lambda y: parts(y)[1], guess, config)
        except (ConditioningError, NonConvergenceError) as exc:
            raise PropagationError(f"latent step to index {i + 1} failed: {exc}", i + 1,
                                   np.array(q), exc) from exc
        q.append(x)
    return np.array(q[:steps + 1])


def rom_predict(model, pca, U0, U1, steps, config=NewtonConfig()):
    """Project two slices, propagate in latent space and lift back: (steps+1, M)."""
    q = propagate_latent(model, pca.project(U0), pca.project(U1), steps, config)
    return pca.lift(q)


# ---------------------------------------------------------------- latent TW search

def _latent_wave_objective(fn, kind, theta_pair, b, c, hr, hi, n_t, n_x, dt, dx):
    theta, A = theta_pair
    U = fill_lattice(b, c, hr, hi, n_t, n_x, dt, dx)[..., 0]
    q = U @ A
    tr = jnp.stack([q[:-2], q[1:-1], q[2:]], axis=1)
    r = del_batch(fn, kind, theta, tr)
    return jnp.sum(r * r)


def latent_wave_loss(model, pca, profile, grid):
    """Squared latent DEL residuals of the projected travelling-wave lattice."""
    _check_latent(model)
    h = profile.coeffs
    return float(_latent_wave_objective(model.fn, model.kind, (jnp.asarray(model.theta), jnp.asarray(pca.basis)),
                                        profile.b, profile.c, jnp.asarray(h.real), jnp.asarray(h.imag),
                                        grid.n_t, grid.columns, grid.dt, grid.dx))


def locate_tw_latent(model, pca, initial, grid, config=TWSearchConfig()):
    """Travelling-wave search driving the latent DEL of the projected lattice to zero.

    Returns ``(profile, info)`` with the final latent residual loss.
    """
    _check_latent(model)
    if initial.d != 1 or pca.M != grid.columns:
        raise MisuseError("latent search needs a scalar profile on the basis' mesh")
    d, K = initial.d, initial.n_coeffs
    theta = (jnp.asarray(model.theta, dtype=float), jnp.asarray(pca.basis))
    z, hist, lf, lw, lu = _search(model.fn, model.kind, d, K,
                                  (grid.n_t, grid.columns, float(grid.dt), float(grid.dx)),
                                  float(initial.b), config, _latent_wave_objective,
                                  int(config.steps), theta, _pack(initial))
    c, hr, hi = _unpack(z, d, K)
    prof = WaveProfile(initial.b, float(c), np.asarray(hr) + 1j * np.asarray(hi))
    if config.normalize:
        prof = unit_profile(prof, grid.dx)
    return prof, {"loss_wave": latent_wave_loss(model, pca, prof, grid), "loss_unit": loss_unit(prof, grid.dx),
                  "history": np.asarray(hist[0])}


__all__ = ["LATENT_LOSS", "PCAMap", "snapshot_matrix", "fit_pca", "reconstruction_error",
           "project_fields", "latent_del_residual", "latent_dataset", "train_latent",
           "propagate_latent", "rom_predict", "latent_wave_loss", "locate_tw_latent"]
