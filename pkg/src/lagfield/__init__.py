"""Learning discrete Lagrangian field theories from lattice data."""

import jax

jax.config.update("jax_enable_x64", True)

from .errors import *  # noqa: E402,F401,F403
from .lattice import (  # noqa: E402,F401
    DIRICHLET, PERIODIC, Field, Grid2D, StencilKind, StencilTuple,
    extract_stencil_array, extract_stencils, stencil_count,
)
from .density import (  # noqa: E402,F401
    LATENT_MLP, SCHRODINGER_MLP, WAVE_MLP, DensityModel, MLPSpec, del_residual, mlp_density,
)
from .reference import (  # noqa: E402,F401
    SchrodingerParams, WaveParams, generate_trajectories, schrodinger_density, wave_density,
    wave_tw_speed,
)
from .solver import NewtonConfig, propagate, verify_quadratic_rate  # noqa: E402,F401
from .training import AdamConfig, Dataset, LossConfig, train  # noqa: E402,F401
from .tw import TWSearchConfig, WaveProfile, locate_tw  # noqa: E402,F401
from .rom import PCAMap, fit_pca, rom_predict, train_latent  # noqa: E402,F401
from . import io  # noqa: E402,F401

__version__ = "0.1.0"
