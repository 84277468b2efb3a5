"""Parametric discrete Lagrangian densities and their derivatives.

A density is a scalar function ``fn(theta, x)`` of a flat parameter vector
``theta`` and the field values ``x`` of shape ``(p, d)`` on one lattice cell.
Everything here is written in jax so that parameter gradients of
quantities built from input derivatives (DEL residuals, Hessian blocks,
singular values) come out exactly.

All public evaluation functions return jax arrays and are safe to call
inside :func:`parameter_gradient`.
"""

from dataclasses import dataclass, field, replace
from functools import lru_cache, partial

import jax
import jax.numpy as jnp
import numpy as np

from .errors import CapabilityError, MisuseError, ShapeError
from .lattice import StencilKind

ACTIVATIONS = {"tanh": jnp.tanh, "softplus": jax.nn.softplus}
BACKENDS = ("mlp", "analytic_wave", "analytic_schrodinger", "gauge_modified", "analytic")

_KIND_BY_ARITY = {
    2: StencilKind.PTS2_3STENCIL,
    3: StencilKind.PTS3_7STENCIL,
    4: StencilKind.PTS4_9STENCIL,
}

# For each stencil kind: the cells touching the centre vertex, as
# (tuple indices fed to the density, slot of the centre vertex in that cell).
_CELLS = {
    StencilKind.PTS3_7STENCIL: (((0, 1, 2), 0), ((3, 0, 4), 1), ((5, 6, 0), 2)),
    StencilKind.PTS4_9STENCIL: (
        ((0, 1, 2, 3), 0), ((4, 0, 5, 2), 1), ((6, 7, 0, 1), 2), ((8, 6, 4, 0), 3),
    ),
    StencilKind.PTS2_3STENCIL: (((0, 1), 1), ((1, 2), 0)),
}


@dataclass(frozen=True)
class MLPSpec:
    """Fully connected network ``p*d -> hidden... -> 1`` with a linear last layer.

    ``biases`` holds one flag per layer. Parameters are laid out layer by
    layer, each as the row-major weight matrix followed by the bias.
    """

    widths: tuple
    activation: str = "tanh"
    biases: tuple = None

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) < 2 or widths[-1] != 1 or min(widths) < 1:
            raise ShapeError(f"widths must run from the input size down to 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise MisuseError(f"unknown activation {self.activation!r}")
        biases = (True,) * (len(widths) - 1) if self.biases is None else tuple(bool(b) for b in self.biases)
        if len(biases) != len(widths) - 1:
            raise ShapeError("need one bias flag per layer")
        object.__setattr__(self, "biases", biases)

    @property
    def layer_shapes(self):
        return [(o, i, b) for i, o, b in zip(self.widths[:-1], self.widths[1:], self.biases)]

    @property
    def n_params(self):
        return sum(o * i + (o if b else 0) for o, i, b in self.layer_shapes)

    @property
    def input_dim(self):
        return self.widths[0]

    def to_dict(self):
        return {"widths": list(self.widths), "activation": self.activation,
                "biases": list(self.biases)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["widths"]), d["activation"], tuple(d["biases"]))


# Shapes used in the experiments. The wave net drops its output bias so the
# count comes to 160.
WAVE_MLP = MLPSpec((3, 10, 10, 1), "tanh", (True, True, False))
SCHRODINGER_MLP = MLPSpec((8, 12, 12, 1), "softplus", (True, True, True))
LATENT_MLP = MLPSpec((4, 10, 10, 1), "softplus", (True, True, True))


def init_params(spec, seed):
    """Glorot-uniform weights and zero biases from a seeded generator."""
    rng = np.random.default_rng(seed)
    chunks = []
    for o, i, b in spec.layer_shapes:
        a = np.sqrt(6.0 / (i + o))
        chunks.append(rng.uniform(-a, a, size=o * i))
        if b:
            chunks.append(np.zeros(o))
    return np.concatenate(chunks)


@lru_cache(maxsize=None)
def mlp_function(spec):
    """The network as ``fn(theta, x)``; cached so jit sees one function per spec."""
    act = ACTIVATIONS[spec.activation]
    shapes = spec.layer_shapes

    def fn(theta, x):
        h = jnp.reshape(x, (-1,))
        k = 0
        for n, (o, i, b) in enumerate(shapes):
            w = jnp.reshape(theta[k:k + o * i], (o, i))
            k += o * i
            h = w @ h
            if b:
                h = h + theta[k:k + o]
                k += o
            if n < len(shapes) - 1:
                h = act(h)
        return h[0]

    return fn


@dataclass(frozen=True, eq=False)
class DensityModel:
    """A discrete Lagrangian density on ``p`` points with ``d`` components each.

    Models are immutable; :meth:`with_params` returns a copy with new
    parameters (which may be jax tracers while differentiating).
    """

    fn: object
    p: int
    d: int
    theta: object = None
    backend: str = "mlp"
    spec: MLPSpec = None
    linear_in_velocity: bool = False
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.p not in _KIND_BY_ARITY:
            raise MisuseError(f"arity must be 2, 3 or 4, got {self.p}")
        if self.backend not in BACKENDS:
            raise MisuseError(f"unknown backend {self.backend!r}")
        theta = self.theta
        if theta is None:
            theta = np.zeros(0)
        elif isinstance(theta, (list, tuple, np.ndarray)):
            theta = np.asarray(theta, dtype=float)
        object.__setattr__(self, "theta", theta)
        if self.spec is not None:
            if self.spec.input_dim != self.p * self.d:
                raise ShapeError(f"network input {self.spec.input_dim} != p*d = {self.p * self.d}")
            if jnp.shape(theta) != (self.spec.n_params,):
                raise ShapeError(f"expected {self.spec.n_params} parameters, got {jnp.shape(theta)}")

    @property
    def kind(self):
        return _KIND_BY_ARITY[self.p]

    @property
    def n_params(self):
        return int(np.prod(jnp.shape(self.theta)))

    def with_params(self, theta):
        return replace(self, theta=theta)

    def __repr__(self):
        return f"DensityModel(backend={self.backend}, p={self.p}, d={self.d}, params={self.n_params})"


def mlp_density(spec, p, d, seed=0, theta=None):
    """Neural density with parameters from ``init_params(spec, seed)`` unless given."""
    if theta is None:
        theta = init_params(spec, seed)
    return DensityModel(mlp_function(spec), p, d, theta, "mlp", spec)


def constant_density(value, p=3, d=1):
    """``L_d`` identically equal to ``value``; every derivative vanishes."""
    return function_density(_constant_fn(float(value)), p, d)


@lru_cache(maxsize=None)
def _constant_fn(value):
    def f(x):
        return value + 0.0 * jnp.sum(x)
    return f


def function_density(f, p, d, linear_in_velocity=False, backend="analytic"):
    """Wrap a parameter-free ``f(x)`` (x of shape (p, d)) as a density."""
    return DensityModel(_lift(f), p, d, np.zeros(0), backend,
                        linear_in_velocity=linear_in_velocity)


@lru_cache(maxsize=None)
def _lift(f):
    def fn(theta, x):
        return f(x)
    return fn


def _as_points(model, inputs):
    x = jnp.asarray(inputs, dtype=float)
    if x.size != model.p * model.d:
        raise ShapeError(f"expected {model.p * model.d} inputs, got {x.size}")
    return jnp.reshape(x, (model.p, model.d))


@partial(jax.jit, static_argnums=0)
def _value(fn, theta, x):
    return fn(theta, x)


@partial(jax.jit, static_argnums=0)
def _grad(fn, theta, x):
    return jax.grad(fn, argnums=1)(theta, x)


@partial(jax.jit, static_argnums=0)
def _hessian(fn, theta, x):
    return jax.hessian(fn, argnums=1)(theta, x)


def eval(model, inputs):  # noqa: A001  (mirrors the operation name)
    """Value of ``L_d`` at ``inputs`` (length p*d or shape (p, d))."""
    return _value(model.fn, model.theta, _as_points(model, inputs))


def input_grad(model, inputs):
    """Gradient of ``L_d`` with respect to all p*d inputs, flattened point-major."""
    return jnp.reshape(_grad(model.fn, model.theta, _as_points(model, inputs)), (-1,))


def input_hessian(model, inputs):
    """Full input Hessian as an array of shape (p, d, p, d)."""
    return _hessian(model.fn, model.theta, _as_points(model, inputs))


def mixed_hessian_block(model, inputs, a, b):
    """The d x d block of second derivatives with respect to points ``a`` and ``b``."""
    for idx in (a, b):
        if not 0 <= int(idx) < model.p:
            raise MisuseError(f"point index {idx} out of range for p={model.p}")
    return input_hessian(model, inputs)[a, :, b, :]


def cell_hessian_blocks(fn, theta, x, a, b):
    """Traceable block ``d^2 fn / dx[a] dx[b]`` (used inside losses)."""
    return jax.hessian(fn, argnums=1)(theta, x)[a, :, b, :]


def del_single(fn, kind, theta, t):
    """DEL residual at the centre of one stencil tuple ``t`` of shape (size, d)."""
    g = jax.grad(fn, argnums=1)
    out = 0.0
    for idx, slot in _CELLS[kind]:
        out = out + g(theta, t[np.array(idx)])[slot]
    return out


@partial(jax.jit, static_argnums=(0, 1))
def del_batch(fn, kind, theta, tuples):
    return jax.vmap(lambda t: del_single(fn, kind, theta, t))(tuples)


def del_residual(model, tuples):
    """DEL residuals for stencil tuples of shape (n, size, d), or one tuple (size, d).

    The stencil layout is the one matching the model's arity (7, 9 or 3
    points, see :class:`~lagfield.lattice.StencilKind`).
    """
    kind = model.kind
    t = jnp.asarray(tuples, dtype=float)
    single = t.ndim == 2
    if single:
        t = t[None]
    if t.ndim != 3 or t.shape[1] != kind.size or t.shape[2] != model.d:
        raise ShapeError(f"{kind.value} tuples for d={model.d} must have shape (n, {kind.size}, {model.d}),"
                         f" got {tuple(jnp.shape(tuples))}")
    r = del_batch(model.fn, kind, model.theta, t)
    return r[0] if single else r


_TRACE_ERRORS = (
    jax.errors.ConcretizationTypeError,
    jax.errors.TracerArrayConversionError,
    jax.errors.TracerBoolConversionError,
    jax.errors.TracerIntegerConversionError,
)


def parameter_gradient(functional, model, theta=None):
    """Gradient with respect to the parameters of ``functional(model)``.

    ``functional`` maps a model to a scalar and may use any of the
    derivative queries above, DEL residuals, the slice matrices and the
    inverse-iteration singular values. Compositions that leave jax (for
    example through numpy conversions or data-dependent Python control
    flow) raise :class:`CapabilityError`.
    """
    theta0 = jnp.asarray(model.theta if theta is None else theta, dtype=float)

    def f(th):
        out = jnp.asarray(functional(model.with_params(th)))
        if out.shape != ():
            raise MisuseError(f"functional must return a scalar, got shape {out.shape}")
        return out

    try:
        return np.asarray(jax.grad(f)(theta0))
    except _TRACE_ERRORS as exc:
        raise CapabilityError(f"functional uses an operation that cannot be differentiated: {exc}") from exc


def gauge_modify(base, chi1=None, chi2=None, chi3=None):
    """Add the discrete divergence
    ``chi1(a) - chi1(b) + chi2(a) - chi2(c) + chi3(b) - chi3(c)`` to a 3-point density.

    Each ``chi`` maps one point (shape (d,)) to a scalar; vector outputs are
    summed. ``None`` stands for zero.
    """
    if base.p != 3:
        raise MisuseError(f"gauge modification needs a 3-point density, got p={base.p}")
    fn = _gauge_fn(base.fn, chi1, chi2, chi3)
    info = dict(base.info, gauge_of=base.backend)
    return replace(base, fn=fn, backend="gauge_modified", info=info)


@lru_cache(maxsize=None)
def _gauge_fn(base_fn, chi1, chi2, chi3):
    def c(chi, v):
        return 0.0 if chi is None else jnp.sum(chi(v))

    def fn(theta, x):
        a, b, cc = x[0], x[1], x[2]
        return (base_fn(theta, x) + c(chi1, a) - c(chi1, b) + c(chi2, a) - c(chi2, cc)
                + c(chi3, b) - c(chi3, cc))

    return fn
