"""Losses, batching and Adam training for neural discrete Lagrangians."""

import time
from dataclasses import dataclass, field, replace
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

from .density import _CELLS, del_single
from .errors import MisuseError, ShapeError, SizingError, TrainingError
from .lattice import Field, StencilKind, extract_stencil_array, latent_triples
from .solver import lambda_dense, sigma_min_small, smallest_singular_value

REG_KINDS = ("stencil_inverse", "slice_inverse", "slice_tamed", "none")


@dataclass(frozen=True)
class LossConfig:
    """``loss = l_data + weight * l_reg``.

    ``reg_reduce`` is ``"mean"`` (normalize by the number of summands) or
    ``"sum"``. ``sv_method`` selects closed-form singular values for small
    stencil blocks or inverse iteration with ``sv_iters`` steps.
    """

    reg_kind: str = "stencil_inverse"
    weight: float = 1.0
    sv_iters: int = 3
    taming: float = 10.0
    floor: float = 1e-8
    reg_reduce: str = "mean"
    sv_method: str = "closed_form"

    def __post_init__(self):
        if self.reg_kind not in REG_KINDS:
            raise MisuseError(f"unknown regularizer {self.reg_kind!r}")
        if self.weight < 0 or self.sv_iters < 1:
            raise MisuseError("need weight >= 0 and sv_iters >= 1")
        if self.reg_reduce not in ("mean", "sum") or self.sv_method not in ("closed_form", "inverse_iteration"):
            raise MisuseError("bad reduction or singular value method")


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 10
    epochs: int = 100
    batching: str = "tuples"
    blocks_per_batch: int = 2

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise MisuseError("Adam betas must lie in (0, 1)")
        if self.batching not in ("tuples", "blocks"):
            raise MisuseError(f"unknown batching {self.batching!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise MisuseError("need batch_size >= 1 and epochs >= 0")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def _adam(theta, g, m, v, t, cfg):
    t = t + 1
    m = cfg.beta1 * m + (1 - cfg.beta1) * g
    v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
    mhat = m / (1 - cfg.beta1**t)
    vhat = v / (1 - cfg.beta2**t)
    return theta - cfg.lr * mhat / (jnp.sqrt(vhat) + cfg.eps), m, v, t


def adam_step(theta, grad, state, config=AdamConfig()):
    """One bias-corrected Adam update; returns ``(theta', state')``."""
    theta, grad = np.asarray(theta, dtype=float), np.asarray(grad, dtype=float)
    if theta.shape != grad.shape or state.m.shape != theta.shape:
        raise ShapeError("parameter, gradient and moment shapes differ")
    th, m, v, t = _adam(theta, grad, state.m, state.v, state.t, config)
    return np.asarray(th), AdamState(np.asarray(m), np.asarray(v), int(t))


# ------------------------------------------------------------------ data

@dataclass
class Dataset:
    """Stencil tuples, consecutive slice pairs and their provenance.

    ``tuple_pair`` maps every tuple to the pair (U^i, U^{i+s}) at its centre
    time; ``blocks`` lists, per (trajectory, time), the tuples centred at
    that time and the pairs touching it.
    """

    tuples: np.ndarray
    kind: StencilKind
    provenance: np.ndarray
    pairs: np.ndarray = None
    tuple_pair: np.ndarray = None
    blocks: list = field(default_factory=list)
    periodic: bool = True
    stride: int = 1

    def __post_init__(self):
        if len(self.tuples) == 0:
            raise SizingError("empty dataset")

    def __len__(self):
        return len(self.tuples)

    @classmethod
    def from_fields(cls, fields, kind, stride=1):
        kind = StencilKind(kind)
        fields = list(fields)
        if not fields:
            raise SizingError("no trajectories given")
        grid = fields[0].grid
        from .lattice import stencil_centres
        ii, jj = stencil_centres(grid, kind, stride)
        tuples, prov = [], []
        for k, f in enumerate(fields):
            if f.grid != grid:
                raise ShapeError("all trajectories must share one grid")
            tuples.append(extract_stencil_array(f, kind, stride))
            prov.append(np.stack([np.full(ii.size, k), ii, jj], axis=1))
        tuples = np.concatenate(tuples)
        prov = np.concatenate(prov)
        pairs, key = [], {}
        s = stride
        nsub = s if grid.periodic and grid.n_x % s == 0 else 1
        for k, f in enumerate(fields):
            for i in range(grid.n_t - s + 1):
                for j0 in range(nsub):
                    key[(k, i, j0)] = len(pairs)
                    pairs.append(np.stack([f.values[i, j0::s], f.values[i + s, j0::s]]))
        pairs = np.stack(pairs) if pairs else None
        tuple_pair = np.array([key.get((k, i, j % nsub), 0) for k, i, j in prov])
        blocks = []
        for k in range(len(fields)):
            for i in np.unique(ii):
                sel = np.nonzero((prov[:, 0] == k) & (prov[:, 1] == i))[0]
                pr = sorted({key[(k, t, j0)] for t in (i - s, i) for j0 in range(nsub)
                             if (k, t, j0) in key})
                blocks.append((sel, np.array(pr, dtype=int)))
        return cls(tuples, kind, prov, pairs, tuple_pair, blocks, grid.periodic, stride)

    @classmethod
    def from_latent(cls, trajectories):
        """Latent triples from trajectories of shape (n, r) each."""
        tuples, prov = [], []
        for k, q in enumerate(trajectories):
            tr = latent_triples(q)
            tuples.append(tr[..., :])
            prov.append(np.stack([np.full(len(tr), k), np.arange(1, len(tr) + 1),
                                  np.zeros(len(tr), dtype=int)], axis=1))
        t = np.concatenate(tuples)
        return cls(t, StencilKind.PTS2_3STENCIL, np.concatenate(prov))


# ---------------------------------------------------------------- losses

def _as_tuples(model, batch):
    if isinstance(batch, Dataset):
        batch = batch.tuples
    if isinstance(batch, (list, tuple)) and batch and hasattr(batch[0], "values"):
        kinds = {StencilKind(b.kind) for b in batch}
        if kinds != {model.kind}:
            raise MisuseError(f"stencil kinds {kinds} do not match the model ({model.kind.value})")
        batch = np.stack([b.values for b in batch])
    t = jnp.asarray(batch, dtype=float)
    if t.ndim == 2 and model.d == 1 and t.shape[-1] == model.kind.size:
        t = t[..., None]
    if t.ndim != 3 or t.shape[1] != model.kind.size or t.shape[2] != model.d:
        raise MisuseError(f"batch of shape {tuple(t.shape)} does not match a {model.kind.value}"
                          f" model with d={model.d}")
    return t


def data_terms(fn, kind, theta, tuples):
    r = jax.vmap(lambda t: del_single(fn, kind, theta, t))(tuples)
    return jnp.sum(r * r, axis=-1)


def _reg_cell(kind):
    # first cell holding the centre vertex in slot 0, paired with slot 1
    for idx, slot in _CELLS[kind]:
        if slot == 0:
            return np.array(idx)
    raise MisuseError(kind)


def stencil_sigmas(fn, kind, theta, tuples, method="closed_form", iters=3):
    idx = _reg_cell(kind)

    def one(t):
        H = jax.hessian(fn, argnums=1)(theta, t[idx])[0, :, 1, :]
        if method == "closed_form":
            return sigma_min_small(H)
        return smallest_singular_value(H, iters)

    return jax.vmap(one)(tuples)


def slice_sigmas(fn, p, theta, pairs, periodic, iters):
    return jax.vmap(lambda pr: smallest_singular_value(
        lambda_dense(fn, p, theta, pr[0], pr[1], periodic), iters))(pairs)


def reg_summands(sig, kind, floor, taming):
    if kind == "slice_tamed":
        return jax.nn.relu(1.0 - taming * sig * sig)
    s = jnp.maximum(sig, floor)
    return 1.0 / (s * s)


def loss_data(model, batch):
    """Sum over the batch of squared DEL residual norms."""
    return jnp.sum(data_terms(model.fn, model.kind, model.theta, _as_tuples(model, batch)))


def loss_reg_stencil(model, batch, floor=1e-8, method="closed_form", iters=3, reduce="mean"):
    """Mean (or sum) of ``|(d^2 L_d / du^i_j du^{i+1}_j)^-1|^2`` over the batch.

    Singular values below ``floor`` are raised to it so the loss stays
    finite; an exactly singular block contributes ``floor**-2``.
    """
    if model.p == 4:
        raise MisuseError("the stencil regularizer is defined for 3-point (and latent 2-point) densities")
    sig = stencil_sigmas(model.fn, model.kind, model.theta, _as_tuples(model, batch), method, iters)
    terms = reg_summands(sig, "stencil_inverse", floor, 0.0)
    return jnp.mean(terms) if reduce == "mean" else jnp.sum(terms)


def loss_reg_slice(model, pairs, grid, tamed=True, iters=3, taming=10.0, floor=1e-8):
    """Mean over slice pairs of ``relu(1 - taming sigma_min^2)`` (tamed) or ``sigma_min^-2``.

    ``pairs`` has shape (n, 2, columns, d); ``grid`` may also be a bool
    giving periodicity. A failed Cholesky factorization gives
    ``sigma_min = 0``: summand 1 when tamed, ``floor**-2`` otherwise.
    """
    periodic = grid if isinstance(grid, bool) else grid.periodic
    pr = jnp.asarray(pairs, dtype=float)
    if pr.ndim == 3:
        pr = pr[..., None]
    if model.p not in (3, 4):
        raise MisuseError("slice regularizers need a 3- or 4-point density")
    sig = slice_sigmas(model.fn, model.p, model.theta, pr, periodic, iters)
    return jnp.mean(reg_summands(sig, "slice_tamed" if tamed else "slice_inverse", floor, taming))


# -------------------------------------------------------------- training

def _batch_loss(fn, kind, p, periodic, lc, theta, tuples, tmask, pairs, pmask):
    l_data = jnp.sum(tmask * data_terms(fn, kind, theta, tuples))
    if lc.reg_kind == "none":
        return l_data, (l_data, 0.0)
    if lc.reg_kind == "stencil_inverse":
        sig = stencil_sigmas(fn, kind, theta, tuples, lc.sv_method, lc.sv_iters)
        mask = tmask
    else:
        sig = slice_sigmas(fn, p, theta, pairs, periodic, lc.sv_iters)
        mask = pmask
    terms = mask * reg_summands(sig, lc.reg_kind, lc.floor, lc.taming)
    l_reg = jnp.sum(terms)
    if lc.reg_reduce == "mean":
        l_reg = l_reg / jnp.maximum(jnp.sum(mask), 1.0)
    return l_data + lc.weight * l_reg, (l_data, l_reg)


@partial(jax.jit, static_argnums=(0, 1, 2, 3, 4, 5))
def _epoch(fn, kind, p, periodic, lc, ac, theta, m, v, t, tuples_all, pairs_all, tidx, tmask, pidx, pmask):
    grad_fn = jax.value_and_grad(
        lambda th, a, b, c, d: _batch_loss(fn, kind, p, periodic, lc, th, a, b, c, d), has_aux=True)

    def body(carry, xs):
        th, m_, v_, t_ = carry
        ti, tm, pi, pm = xs
        (loss, _), g = grad_fn(th, tuples_all[ti], tm, pairs_all[pi], pm)
        th2, m2, v2, t2 = _adam(th, g, m_, v_, t_, ac)
        bad = ~(jnp.isfinite(loss) & jnp.all(jnp.isfinite(g)))
        return (th2, m2, v2, t2), bad

    (theta, m, v, t), bad = jax.lax.scan(body, (theta, m, v, t), (tidx, tmask, pidx, pmask))
    return theta, m, v, t, bad


@partial(jax.jit, static_argnums=(0, 1, 2, 3, 4))
def _full_losses(fn, kind, p, periodic, lc, theta, tuples, pairs):
    l_data = jnp.sum(data_terms(fn, kind, theta, tuples))
    if lc.reg_kind == "none":
        return l_data, 0.0
    if lc.reg_kind == "stencil_inverse":
        sig = stencil_sigmas(fn, kind, theta, tuples, lc.sv_method, lc.sv_iters)
    else:
        sig = slice_sigmas(fn, p, theta, pairs, periodic, lc.sv_iters)
    terms = reg_summands(sig, lc.reg_kind, lc.floor, lc.taming)
    return l_data, (jnp.mean(terms) if lc.reg_reduce == "mean" else jnp.sum(terms))


def full_losses(model, dataset, loss_config=LossConfig()):
    """``(l_data, l_reg)`` over the whole dataset: the data term summed,
    the regularizer reduced as configured."""
    pairs = dataset.pairs if dataset.pairs is not None else np.zeros((1, 2, 1, model.d))
    ld, lr = _full_losses(model.fn, model.kind, model.p, dataset.periodic, loss_config,
                          jnp.asarray(model.theta, dtype=float), jnp.asarray(dataset.tuples),
                          jnp.asarray(pairs))
    return float(ld), float(lr)


@dataclass
class TrainRun:
    model: object
    state: AdamState
    history: list
    seed: int
    loss_config: LossConfig
    adam_config: AdamConfig
    initial: tuple = (float("nan"), float("nan"))

    @property
    def l_data(self):
        return np.array([h[1] for h in self.history])

    @property
    def l_reg(self):
        return np.array([h[2] for h in self.history])


def _epoch_indices(dataset, ac, lc, rng):
    if ac.batching == "tuples":
        order = rng.permutation(len(dataset))
        B = ac.batch_size
        nb = -(-order.size // B)
        tidx = np.zeros(nb * B, dtype=int)
        tidx[:order.size] = order
        tmask = np.zeros(nb * B)
        tmask[:order.size] = 1.0
        tidx, tmask = tidx.reshape(nb, B), tmask.reshape(nb, B)
        if dataset.tuple_pair is not None and lc.reg_kind.startswith("slice"):
            pidx = dataset.tuple_pair[tidx]
        else:
            pidx = np.zeros_like(tidx)
        return tidx, tmask, pidx, tmask.copy()
    blocks = dataset.blocks
    if not blocks:
        raise MisuseError("dataset has no blocks for block batching")
    order = rng.permutation(len(blocks))
    nbk = ac.blocks_per_batch
    groups = [order[k:k + nbk] for k in range(0, order.size, nbk)]
    wt = max(len(blocks[b][0]) for b in order) * nbk
    wp = max(max(len(blocks[b][1]) for b in order) * nbk, 1)
    tidx = np.zeros((len(groups), wt), dtype=int)
    tmask = np.zeros((len(groups), wt))
    pidx = np.zeros((len(groups), wp), dtype=int)
    pmask = np.zeros((len(groups), wp))
    for g, grp in enumerate(groups):
        ts = np.concatenate([blocks[b][0] for b in grp])
        ps = np.concatenate([blocks[b][1] for b in grp])
        tidx[g, :ts.size], tmask[g, :ts.size] = ts, 1.0
        pidx[g, :ps.size], pmask[g, :ps.size] = ps, 1.0
    return tidx, tmask, pidx, pmask


def train(model, dataset, loss_config=LossConfig(), adam_config=AdamConfig(), seed=0,
          state=None, callback=None, history=None):
    """Adam training over seeded shuffles of the dataset.

    Each epoch takes one Adam step per batch on ``l_data + w l_reg`` and
    then records ``(epoch, l_data, l_reg, wall time)`` on the full dataset;
    the losses before training are kept in ``TrainRun.initial``. Passing
    ``state`` and ``history`` of an earlier run continues it. Raises
    :class:`TrainingError` (carrying the epoch, the batch and the last
    finite model) if a loss or gradient becomes non-finite.
    """
    if dataset.kind != model.kind:
        raise MisuseError(f"dataset kind {dataset.kind.value} does not match the model")
    lc, ac = loss_config, adam_config
    theta = jnp.asarray(model.theta, dtype=float)
    n = theta.size
    state = AdamState.zeros(n) if state is None else state
    m, v, t = jnp.asarray(state.m), jnp.asarray(state.v), state.t
    tuples_all = jnp.asarray(dataset.tuples)
    pairs_all = jnp.asarray(dataset.pairs if dataset.pairs is not None else np.zeros((1, 2, 1, model.d)))
    history = [] if history is None else list(history)
    t0 = time.perf_counter()
    initial = full_losses(model, dataset, lc)
    first = history[-1][0] + 1 if history else 1
    for e in range(first, first + ac.epochs):
        rng = np.random.default_rng([seed, e])
        tidx, tmask, pidx, pmask = _epoch_indices(dataset, ac, lc, rng)
        prev = (theta, m, v, t)
        theta, m, v, t, bad = _epoch(model.fn, model.kind, model.p, dataset.periodic, lc, ac,
                                     theta, m, v, t, tuples_all, pairs_all,
                                     jnp.asarray(tidx), jnp.asarray(tmask),
                                     jnp.asarray(pidx), jnp.asarray(pmask))
        bad = np.asarray(bad)
        if bad.any():
            b = int(np.argmax(bad))
            raise TrainingError(f"non-finite loss or gradient in epoch {e}, batch {b}", e, b,
                                model.with_params(np.asarray(prev[0])))
        cur = model.with_params(np.asarray(theta))
        ld, lr = full_losses(cur, dataset, lc)
        if not (np.isfinite(ld) and np.isfinite(lr)):
            raise TrainingError(f"non-finite full-dataset loss after epoch {e}", e, None,
                                model.with_params(np.asarray(prev[0])))
        history.append((e, ld, lr, time.perf_counter() - t0))
        if callback is not None:
            callback(e, ld, lr)
    final = model.with_params(np.asarray(theta))
    return TrainRun(final, AdamState(np.asarray(m), np.asarray(v), int(t)), history, seed, lc, ac,
                    initial)
