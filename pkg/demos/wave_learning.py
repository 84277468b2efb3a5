"""Learn a discrete Lagrangian density for the 1+1 wave equation from a handful of
trajectories, then use it as a time stepper and as a travelling-wave model.

    python demos/wave_learning.py [--trajectories 10] [--epochs 500]
"""

import argparse

import numpy as np

from lagfield import (AdamConfig, Dataset, LossConfig, WAVE_MLP, WaveParams, generate_trajectories,
                      locate_tw, mlp_density, propagate, train, wave_density, wave_tw_speed)
from lagfield.lattice import Grid2D, StencilKind
from lagfield.tw import perturb_profile, sine_profile, unit_profile


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--trajectories", type=int, default=10)
    ap.add_argument("--epochs", type=int, default=500)
    args = ap.parse_args()

    grid = Grid2D(20, 20, 0.025, 0.05)
    fields = generate_trajectories(WaveParams(), args.trajectories, grid, seed=1)
    data = Dataset.from_fields(fields, StencilKind.PTS3_7STENCIL)
    print(f"{len(data)} seven-point tuples from {args.trajectories} trajectories")

    def progress(epoch, ld, lr):
        if epoch % 100 == 0:
            print(f"  epoch {epoch:4d}  l_data {ld:.3e}")

    run = train(mlp_density(WAVE_MLP, 3, 1, seed=0), data, LossConfig(), AdamConfig(epochs=args.epochs),
                seed=0, callback=progress)
    print(f"l_data {run.initial[0]:.3g} -> {run.l_data[-1]:.3g}")

    # an unseen trajectory from the same distribution
    ref = generate_trajectories(WaveParams(), 1, grid, seed=1000)[0].values
    out = propagate(run.model, ref[0], U1=ref[1], grid=grid).values
    print(f"unseen trajectory, max error over the horizon: {np.max(np.abs(out - ref)):.4f}")

    # travelling waves: the analytic density first, then the learned one
    c1 = wave_tw_speed(1)
    start = perturb_profile(unit_profile(sine_profile(1.0, 20, 1, c1), grid.dx), 0.5, 0)
    for name, model in (("analytic", wave_density()), ("learned", run.model)):
        profile, info = locate_tw(model, start, grid)
        print(f"{name:>8} density: c = {profile.c:.5f} (lattice dispersion {c1:.5f}), "
              f"l_wave {info['loss_wave']:.2e}")


if __name__ == "__main__":
    main()
