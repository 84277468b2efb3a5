"""Plain-text persistence: fields, checkpoints, loss histories, profiles, bases.

Every file starts with a ``# format <name> <version>`` line. Floats are
written with 17 significant digits so that reading back is exact.
"""

import json

import numpy as np

from .density import MLPSpec, mlp_density
from .errors import FormatError
from .lattice import Field, Grid2D

FIELD_FORMAT = "lagfield-field 1"
CHECKPOINT_FORMAT = "lagfield-checkpoint 1"
LOSS_FORMAT = "lagfield-losses 1"
PROFILE_FORMAT = "lagfield-profile 1"
BASIS_FORMAT = "lagfield-basis 1"
CONVERGENCE_FORMAT = "lagfield-convergence 1"

_FMT = "%.17g"


def _header(fh, fmt):
    line = fh.readline().strip()
    if line != f"# format {fmt}":
        raise FormatError(f"expected '# format {fmt}', found {line!r}")


def _rows(fh):
    rows = [ln for ln in fh if ln.strip() and not ln.startswith("#")]
    if not rows:
        return np.zeros((0, 0))
    return np.atleast_2d(np.loadtxt(rows, delimiter=",", ndmin=2))


def write_field(path, field):
    """One row per time index; columns j-major with components interleaved."""
    g = field.grid
    with open(path, "w") as fh:
        fh.write(f"# format {FIELD_FORMAT}\n")
        fh.write(f"# grid {g.n_t} {g.n_x} {g.dt!r} {g.dx!r} {g.spatial_bc} {field.d}\n")
        np.savetxt(fh, field.values.reshape(g.n_t + 1, -1), fmt=_FMT, delimiter=",")


def read_field(path):
    with open(path) as fh:
        _header(fh, FIELD_FORMAT)
        parts = fh.readline().split()
        if len(parts) != 8 or parts[:2] != ["#", "grid"]:
            raise FormatError("missing '# grid nt nx dt dx bc d' line")
        try:
            n_t, n_x, dt, dx, bc, d = int(parts[2]), int(parts[3]), float(parts[4]), float(parts[5]), parts[6], int(parts[7])
        except ValueError as exc:
            raise FormatError(f"bad grid line: {exc}") from exc
        grid = Grid2D(n_t, n_x, dt, dx, bc)
        vals = _rows(fh)
    if vals.shape != (n_t + 1, grid.columns * d):
        raise FormatError(f"field body of shape {vals.shape} does not match the grid line")
    return Field(grid, vals.reshape(n_t + 1, grid.columns, d))


def write_slices(path, U0, U1=None):
    """Initial data: one or two rows of slice values (d = 1) for ``simulate``."""
    rows = [np.ravel(U0)] + ([] if U1 is None else [np.ravel(U1)])
    with open(path, "w") as fh:
        fh.write("# format lagfield-slices 1\n")
        np.savetxt(fh, np.array(rows), fmt=_FMT, delimiter=",")


def read_slices(path):
    with open(path) as fh:
        _header(fh, "lagfield-slices 1")
        return _rows(fh)


def checkpoint_dict(model, extra=None):
    if model.spec is not None:
        out = {"backend": "mlp", "spec": model.spec.to_dict(),
               "theta": [float(t) for t in np.asarray(model.theta)]}
    elif model.backend in ("analytic_wave", "analytic_schrodinger") and model.info.get("default_potential"):
        out = {"backend": model.backend,
               **{k: v for k, v in model.info.items() if k != "default_potential"}}
    else:
        raise FormatError(f"density backend {model.backend} has no checkpoint form")
    out.update(p=model.p, d=model.d)
    if extra:
        out.update(extra)
    return out


def write_checkpoint(path, model, extra=None):
    """JSON with the network spec and parameters (or the analytic density's parameters)."""
    body = {"format": CHECKPOINT_FORMAT, **checkpoint_dict(model, extra)}
    with open(path, "w") as fh:
        json.dump(body, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_checkpoint(path):
    with open(path) as fh:
        try:
            body = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"checkpoint is not JSON: {exc}") from exc
    return model_from_dict(body)


def model_from_dict(body):
    if body.get("format", CHECKPOINT_FORMAT) != CHECKPOINT_FORMAT:
        raise FormatError(f"unknown checkpoint format {body.get('format')!r}")
    backend = body.get("backend")
    if backend == "mlp":
        spec = MLPSpec.from_dict(body["spec"])
        return mlp_density(spec, int(body["p"]), int(body["d"]), theta=np.array(body["theta"], dtype=float))
    from . import reference
    if backend == "analytic_wave":
        return reference.WaveParams(float(body["dt"]), float(body["dx"])).density()
    if backend == "analytic_schrodinger":
        return reference.SchrodingerParams(float(body["dt"]), float(body["dx"]),
                                           float(body.get("hbar", 1.0)), float(body.get("beta", 1.0))).density()
    raise FormatError(f"unknown density backend {backend!r}")


def write_losses(path, history):
    with open(path, "w") as fh:
        fh.write(f"# format {LOSS_FORMAT}\n# epoch,l_data,l_reg,wall_seconds\n")
        for e, ld, lr, wall in history:
            fh.write(f"{int(e)},{ld:.17g},{lr:.17g},{wall:.6f}\n")


def read_losses(path):
    with open(path) as fh:
        _header(fh, LOSS_FORMAT)
        return _rows(fh)


def write_profile(path, profile):
    """Speed and period on a header line, then ``component,m,re,im`` rows."""
    with open(path, "w") as fh:
        fh.write(f"# format {PROFILE_FORMAT}\n# b {profile.b!r} c {profile.c!r}\n")
        for k in range(profile.d):
            for m, h in enumerate(profile.coeffs[k]):
                fh.write(f"{k},{m},{h.real:.17g},{h.imag:.17g}\n")


def read_profile(path):
    from .tw import WaveProfile
    with open(path) as fh:
        _header(fh, PROFILE_FORMAT)
        parts = fh.readline().split()
        if len(parts) != 5 or parts[1] != "b" or parts[3] != "c":
            raise FormatError("missing '# b ... c ...' line")
        b, c = float(parts[2]), float(parts[4])
        rows = _rows(fh)
    d, K = int(rows[:, 0].max()) + 1, int(rows[:, 1].max()) + 1
    h = np.zeros((d, K), dtype=complex)
    h[rows[:, 0].astype(int), rows[:, 1].astype(int)] = rows[:, 2] + 1j * rows[:, 3]
    return WaveProfile(b, c, h)


def write_basis(path, pca):
    with open(path, "w") as fh:
        fh.write(f"# format {BASIS_FORMAT}\n# rows {pca.M} cols {pca.r}\n")
        np.savetxt(fh, pca.basis, fmt=_FMT, delimiter=",")


def read_basis(path):
    from .rom import PCAMap
    with open(path) as fh:
        _header(fh, BASIS_FORMAT)
        fh.readline()
        return PCAMap(_rows(fh))


def write_convergence(path, reports):
    """``time_index,iteration,residual`` rows of per-step Newton reports."""
    with open(path, "w") as fh:
        fh.write(f"# format {CONVERGENCE_FORMAT}\n# time_index,iteration,residual\n")
        for rep in reports:
            for n, r in rep.to_rows():
                fh.write(f"{rep.time_index},{n},{r:.17g}\n")


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialize {type(x).__name__}")
