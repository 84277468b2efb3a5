"""Compare the stencil density with a reduced-order model: PCA onto two modes
followed by a latent Lagrangian.

    python demos/rom_baseline.py [--trajectories 80]
"""

import argparse

import numpy as np

from lagfield import (AdamConfig, Dataset, LossConfig, WAVE_MLP, WaveParams, fit_pca,
                      generate_trajectories, mlp_density, propagate, rom_predict, train, train_latent,
                      wave_density)
from lagfield.density import LATENT_MLP
from lagfield.errors import LagfieldError
from lagfield.lattice import Grid2D, StencilKind
from lagfield.reference import wave_tw_field
from lagfield.rom import latent_dataset, reconstruction_error, snapshot_matrix


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--trajectories", type=int, default=80)
    args = ap.parse_args()

    grid = Grid2D(20, 20, 0.025, 0.05)
    fields = generate_trajectories(WaveParams(), args.trajectories, grid, seed=1)
    S = snapshot_matrix(fields)
    for r in (1, 2, 3, 5):
        print(f"rank {r}: reconstruction error {reconstruction_error(fit_pca(S, r), S):.4f}")

    pca = fit_pca(S, 2)
    latent = train_latent(mlp_density(LATENT_MLP, 2, 2, seed=0), latent_dataset(pca, fields),
                          adam_config=AdamConfig(epochs=500), seed=0)
    stencil = train(mlp_density(WAVE_MLP, 3, 1, seed=0),
                    Dataset.from_fields(fields, StencilKind.PTS3_7STENCIL),
                    LossConfig(), AdamConfig(epochs=750), seed=0)

    sine = np.sin(4 * np.pi * grid.x())
    tw = wave_tw_field(grid, 1).values[..., 0]
    tasks = {"sin(4 pi x), at rest": (sine, sine, propagate(wave_density(), sine, U1=sine, grid=grid).values[..., 0]),
             "travelling wave": (tw[0], tw[1], tw)}
    for name, (U0, U1, ref) in tasks.items():
        rom = np.max(np.abs(rom_predict(latent.model, pca, U0, U1, grid.n_t) - ref))
        try:
            st = f"{np.max(np.abs(propagate(stencil.model, U0, U1=U1, grid=grid).values[..., 0] - ref)):.3f}"
        except LagfieldError as exc:
            st = f"no solution at step {exc.time_index}"
        print(f"{name}: ROM error {rom:.3f}, stencil model {st}")


if __name__ == "__main__":
    main()
