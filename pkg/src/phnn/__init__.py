"""Port-Hamiltonian neural networks for non-autonomous dynamics.

Modules:

``autodiff``    reverse-mode automatic differentiation with second-order support
``systems``     analytic benchmark systems
``integrate``   fixed-step RK4 (plain and recorded on a graph)
``datagen``     initial-condition sampling, datasets and their file format
``models``      baseline NN, HNN, TDHNN and pHNN
``train``       losses, Adam training loop and the (lambda_F, lambda_N) grid search
``evaluation``  rollouts, error metrics, recovered force/damping, Poincare sections
``cli``         the ``phnn`` command line pipeline
"""
from .models import Model, ModelParams, init_params, load_checkpoint, save_checkpoint
from .systems import make_system
from .train import TrainConfig, grid_search, train

__version__ = "0.1.0"

__all__ = [
    "Model",
    "ModelParams",
    "TrainConfig",
    "grid_search",
    "init_params",
    "load_checkpoint",
    "make_system",
    "save_checkpoint",
    "train",
]
