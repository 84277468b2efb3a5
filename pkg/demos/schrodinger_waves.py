"""Schrodinger lattice: position-only initial data is enough to propagate, and the
travelling-wave search recovers the plane-wave speed. Also shows the spurious
branch of the lattice dispersion relation.

    python demos/schrodinger_waves.py
"""

import numpy as np

from lagfield import (SchrodingerParams, generate_trajectories, locate_tw, propagate,
                      schrodinger_density)
from lagfield.lattice import Grid2D, StencilKind, extract_stencil_array
from lagfield.density import del_residual
from lagfield.reference import schrodinger_tw_field, schrodinger_tw_speed, spurious_speed
from lagfield.tw import perturb_profile, plane_wave_profile, unit_profile

grid = Grid2D(12, 8, 0.01, 0.125)
model = schrodinger_density()

ref = generate_trajectories(SchrodingerParams(), 1, grid, seed=3)[0]
out = propagate(model, ref.values[0], grid=grid)
print(f"propagation from the first slice only: max error {np.max(np.abs(out.values - ref.values)):.1e}")

c = schrodinger_tw_speed(1)
start = perturb_profile(unit_profile(plane_wave_profile(1.0, grid.n_x, 1, c), grid.dx), 0.5, 0)
profile, info = locate_tw(model, start, grid)
print(f"travelling-wave search: c = {profile.c:.9f}, dispersion relation {c:.9f}")

cs = spurious_speed(1, 0, grid.dt)
tup = extract_stencil_array(schrodinger_tw_field(grid, 1, c=cs), StencilKind.PTS4_9STENCIL)
print(f"spurious wave c = {cs:g}: max DEL residual {np.max(np.abs(del_residual(model, tup))):.1e}")
