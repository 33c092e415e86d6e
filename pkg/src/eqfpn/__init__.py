"""Fixed-point networks trained to predict equilibria of contextual games."""

from .constraints import (AffineOrthant, AffineSet, Box, IntersectionList, MinkowskiSum, Orthant, Simplex,
                          SimplexProduct, WholeSpace, project_affine, project_simplex, projection_jvp)
from .data import (EquilibriumDataset, generate_dataset, load_tntp_game, parse_tntp_net, parse_tntp_trips,
                   read_dataset, write_dataset)
from .games import MatrixGame, MatrixGameSpec, RoadNetwork, TrafficGame, braess_network
from .kernels import BACKEND
from .metrics import TrafixParams, rel_mse, simulate_play, trafix
from .model import AdamState, OperatorModel, jfb_gradient, load_model, predict, save_model, train
from .solvers import SolverConfig, make_splitting, solve_fixed_point

__version__ = "0.1.0"
