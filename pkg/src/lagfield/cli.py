"""Command-line experiment driver.

Each command reads a JSON config (``--config``), writes into ``--out`` and
echoes the config there. Failures print ``{"error": <category>, ...}`` on
stderr and exit with status 2.
"""

import argparse
import hashlib
import json
import os
import sys
from dataclasses import fields as dc_fields

import numpy as np

from . import io
from .density import LATENT_MLP, SCHRODINGER_MLP, WAVE_MLP, MLPSpec, mlp_density
from .errors import InputError, LagfieldError
from .lattice import Field, Grid2D, StencilKind, stencil_count
from .reference import (SchrodingerParams, WaveParams, generate_trajectories, wave_tw_field,
                        wave_tw_speed)
from .solver import NewtonConfig, propagate
from .training import AdamConfig, Dataset, LossConfig, train

DEFAULTS = {
    "wave": {"grid": {"n_t": 20, "n_x": 20, "dt": 0.025, "dx": 0.05, "bc": "periodic"},
             "loss": {"reg_kind": "stencil_inverse", "weight": 1.0}},
    "schrodinger": {"grid": {"n_t": 12, "n_x": 8, "dt": 0.01, "dx": 0.125, "bc": "periodic"},
                    "loss": {"reg_kind": "slice_tamed", "weight": 1.0},
                    "adam": {"batching": "blocks"}},
}


def sub_seed(master, label):
    """Independent stream seed derived from the master seed by labelled hashing."""
    h = hashlib.sha256(f"{int(master)}/{label}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def load_config(path):
    if path is None:
        return {}, "{}"
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read config: {exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"config is not JSON: {exc}") from exc
    return cfg, text


def _setting(cfg, key):
    theory = cfg.get("theory", "wave")
    if theory not in DEFAULTS:
        raise InputError(f"unknown theory {theory!r}")
    out = dict(DEFAULTS[theory].get(key, {}))
    out.update(cfg.get(key, {}))
    return out


def _grid(cfg):
    g = _setting(cfg, "grid")
    return Grid2D(int(g["n_t"]), int(g["n_x"]), float(g["dt"]), float(g["dx"]), g.get("bc", "periodic"))


def _theory(cfg, grid):
    if cfg.get("theory", "wave") == "wave":
        return WaveParams(grid.dt, grid.dx)
    s = _setting(cfg, "schrodinger")
    return SchrodingerParams(grid.dt, grid.dx, float(s.get("hbar", 1.0)), float(s.get("beta", 1.0)))


def _dataclass_from(cls, d):
    names = {f.name for f in dc_fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise InputError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


def _prepare_out(args, text):
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        fh.write(text)


def _fields_in(data_dir):
    with open(os.path.join(data_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    return [io.read_field(os.path.join(data_dir, f)) for f in manifest["files"]], manifest


# ---------------------------------------------------------------- commands

def cmd_gen_data(args):
    cfg, text = load_config(args.config)
    _prepare_out(args, text)
    grid = _grid(cfg)
    K = int(cfg.get("K", 10))
    theory = _theory(cfg, grid)
    fields = generate_trajectories(theory, K, grid, sub_seed(args.seed, "data"))
    files = []
    for k, f in enumerate(fields):
        name = f"trajectory_{k:03d}.csv"
        io.write_field(os.path.join(args.out, name), f)
        files.append(name)
    kind = StencilKind.PTS3_7STENCIL if cfg.get("theory", "wave") == "wave" else StencilKind.PTS4_9STENCIL
    stride = int(args.stride or cfg.get("stride", 1))
    manifest = {"format": "lagfield-manifest 1", "K": K, "files": files, "kind": kind.value,
                "stride": stride, "tuples": K * stencil_count(grid, kind, stride),
                "seed": args.seed}
    io.write_json(os.path.join(args.out, "manifest.json"), manifest)
    return manifest


def cmd_train(args):
    cfg, text = load_config(args.config)
    if args.data is None:
        raise InputError("train needs --data (a gen-data output directory)")
    fields, manifest = _fields_in(args.data)
    _prepare_out(args, text)
    kind = StencilKind(manifest["kind"])
    stride = int(args.stride or manifest.get("stride", 1))
    ds = Dataset.from_fields(fields, kind, stride)
    default_spec = WAVE_MLP if kind is StencilKind.PTS3_7STENCIL else SCHRODINGER_MLP
    spec = MLPSpec.from_dict(cfg["mlp"]) if "mlp" in cfg else default_spec
    model = mlp_density(spec, kind.arity, fields[0].d, seed=sub_seed(args.seed, "init"))
    lc = _dataclass_from(LossConfig, _setting(cfg, "loss"))
    ac = _dataclass_from(AdamConfig, _setting(cfg, "adam"))
    run = train(model, ds, lc, ac, seed=sub_seed(args.seed, "shuffle"))
    io.write_checkpoint(os.path.join(args.out, "checkpoint.json"), run.model)
    io.write_losses(os.path.join(args.out, "losses.csv"), run.history)
    report = {"initial": list(run.initial), "final": list(run.history[-1][1:3]),
              "epochs": len(run.history), "tuples": len(ds)}
    io.write_json(os.path.join(args.out, "train_report.json"), report)
    return report


def _initial_slices(args):
    try:
        return io.read_field(args.init), None
    except LagfieldError:
        rows = io.read_slices(args.init)
        return None, rows


def cmd_simulate(args):
    cfg, text = load_config(args.config)
    if args.checkpoint is None or args.init is None:
        raise InputError("simulate needs --checkpoint and --init")
    model = io.read_checkpoint(args.checkpoint)
    _prepare_out(args, text)
    grid = _grid(cfg)
    field, rows = _initial_slices(args)
    if field is not None:
        grid = field.grid
        U0, U1 = field.values[0], field.values[1] if field.grid.n_t >= 1 else None
    else:
        U0 = rows[0].reshape(grid.columns, model.d)
        U1 = rows[1].reshape(grid.columns, model.d) if len(rows) > 1 else None
    steps = grid.n_t if args.steps is None else int(args.steps)
    if steps == 0:
        out = Field(grid.with_steps(1), np.stack([U0, U0 if U1 is None else U1]))
        io.write_field(os.path.join(args.out, "field.csv"), out)
        return {"steps": 0}
    reports = []
    mode = "stencil" if args.mode == "stencil" else "timeslice"
    out = propagate(model, U0, U1=U1, grid=grid.with_steps(max(steps, 1)), steps=steps,
                    config=NewtonConfig(), mode=mode, reports=reports)
    io.write_field(os.path.join(args.out, "field.csv"), out)
    io.write_convergence(os.path.join(args.out, "convergence.csv"), reports)
    return {"steps": steps, "mode": mode}


def field_error(pred, ref):
    """Sup-norm error; two-component fields are compared by complex modulus."""
    a, b = np.asarray(pred, dtype=float), np.asarray(ref, dtype=float)
    if a.shape != b.shape:
        raise InputError(f"field shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    if diff.ndim == 3 and diff.shape[-1] == 2:
        return float(np.max(np.hypot(diff[..., 0], diff[..., 1])))
    return float(np.max(np.abs(diff)))


def cmd_eval(args):
    if args.predicted is None or args.reference is None:
        raise InputError("eval needs --predicted and --reference")
    pred, ref = io.read_field(args.predicted), io.read_field(args.reference)
    n = min(pred.values.shape[0], ref.values.shape[0])
    report = {"linf": field_error(pred.values[:n], ref.values[:n]), "time_levels": n}
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        io.write_json(os.path.join(args.out, "metrics.json"), report)
    return report


def cmd_find_tw(args):
    from .tw import TWSearchConfig, locate_tw, perturb_profile, sine_profile, unit_profile
    cfg, text = load_config(args.config)
    if args.checkpoint is None:
        raise InputError("find-tw needs --checkpoint")
    model = io.read_checkpoint(args.checkpoint)
    _prepare_out(args, text)
    grid = _grid(cfg)
    if args.profile:
        init = io.read_profile(args.profile)
    else:
        init = unit_profile(sine_profile(grid.length, grid.n_x, args.m,
                                         wave_tw_speed(args.m, grid.length, WaveParams(grid.dt, grid.dx))),
                            grid.dx)
    if args.sigma > 0:
        init = perturb_profile(init, args.sigma, sub_seed(args.seed, "noise"))
    tw_cfg = _dataclass_from(TWSearchConfig, cfg.get("tw", {}))
    prof, info = locate_tw(model, init, grid, tw_cfg)
    io.write_profile(os.path.join(args.out, "profile.csv"), prof)
    report = {"c": prof.c, "initial_c": init.c, "loss_wave": info["loss_wave"],
              "loss_unit": info["loss_unit"], "max_residual": info["max_residual"]}
    io.write_json(os.path.join(args.out, "tw_report.json"), report)
    return report


def cmd_rom(args):
    from .rom import (fit_pca, latent_dataset, reconstruction_error, rom_predict, snapshot_matrix,
                      train_latent)
    cfg, text = load_config(args.config)
    if args.data is None:
        raise InputError("rom needs --data (a gen-data output directory)")
    fields, _ = _fields_in(args.data)
    _prepare_out(args, text)
    grid = fields[0].grid
    rc = cfg.get("rom", {})
    S = snapshot_matrix(fields)
    pca = fit_pca(S, int(rc.get("r", 2)))
    io.write_basis(os.path.join(args.out, "basis.csv"), pca)
    model = mlp_density(MLPSpec.from_dict(rc["mlp"]) if "mlp" in rc else LATENT_MLP, 2, pca.r,
                        seed=sub_seed(args.seed, "init"))
    run = train_latent(model, latent_dataset(pca, fields),
                       adam_config=AdamConfig(epochs=int(rc.get("epochs", 2000))),
                       seed=sub_seed(args.seed, "shuffle"))
    io.write_checkpoint(os.path.join(args.out, "latent_checkpoint.json"), run.model)
    io.write_losses(os.path.join(args.out, "latent_losses.csv"), run.history)
    report = {"reconstruction_error": reconstruction_error(pca, S),
              "latent_l_data": [run.initial[0], run.history[-1][1]]}
    truth = WaveParams(grid.dt, grid.dx).density()
    x = grid.x()
    sine = np.sin(4 * np.pi * x / grid.length)
    tasks = {"sin": (sine, sine, propagate(truth, sine, U1=sine, grid=grid).values[..., 0]),
             "tw": None}
    tw = wave_tw_field(grid, 1).values[..., 0]
    tasks["tw"] = (tw[0], tw[1], tw)
    stencil = io.read_checkpoint(args.checkpoint) if args.checkpoint else None
    for name, (U0, U1, ref) in tasks.items():
        report[f"rom_{name}"] = _task_error(lambda: rom_predict(run.model, pca, U0, U1, grid.n_t), ref)
        if stencil is not None:
            report[f"stencil_{name}"] = _task_error(
                lambda: propagate(stencil, U0, U1=U1, grid=grid).values[..., 0], ref)
    io.write_json(os.path.join(args.out, "rom_report.json"), report)
    return report


def _task_error(predict, ref):
    try:
        return field_error(predict(), ref)
    except LagfieldError as exc:
        return {"error": exc.category}


# ---------------------------------------------------------------- entry point

def build_parser():
    p = argparse.ArgumentParser(prog="lagfield", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int, default=0, help="master seed")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--stride", type=int, default=None, help="coarsening stride")
        return sp

    common(sub.add_parser("gen-data", help="generate reference trajectories"))
    sp = common(sub.add_parser("train", help="train a neural density"))
    sp.add_argument("--data", help="gen-data output directory")
    sp = common(sub.add_parser("simulate", help="propagate initial data"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--init", help="field CSV or slices file")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--mode", choices=("stencil", "timeslice"), default="timeslice")
    sp = sub.add_parser("eval", help="compare a predicted field with a reference")
    sp.add_argument("--predicted")
    sp.add_argument("--reference")
    sp.add_argument("--out")
    sp = common(sub.add_parser("find-tw", help="search for a travelling wave"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--profile", help="initial profile file (default: dispersion relation)")
    sp.add_argument("--m", type=int, default=1, help="mode of the dispersion initialization")
    sp.add_argument("--sigma", type=float, default=0.0, help="initial noise level")
    sp = common(sub.add_parser("rom", help="PCA + latent Lagrangian baseline"))
    sp.add_argument("--data", help="gen-data output directory")
    sp.add_argument("--checkpoint", help="stencil model checkpoint for the comparison")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "simulate": cmd_simulate,
            "eval": cmd_eval, "find-tw": cmd_find_tw, "rom": cmd_rom}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        result = COMMANDS[args.command](args)
    except LagfieldError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}), file=sys.stderr)
        return 2
    except (OSError, KeyError, ValueError) as exc:
        print(json.dumps({"error": "input", "message": str(exc)}), file=sys.stderr)
        return 2
    print(json.dumps(result, sort_keys=True, default=io._jsonable))
    return 0
