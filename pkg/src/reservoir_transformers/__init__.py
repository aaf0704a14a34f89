"""Transformers with frozen random layers, trained in numpy.

Submodules: :mod:`.autodiff` (reverse-mode tensors), :mod:`.layers`,
:mod:`.stack` (patterns, models, census), :mod:`.trainer`, :mod:`.aucc`,
:mod:`.tasks` and :mod:`.cli`.
"""

from .aucc import AuccReport, ConvergenceCurve, aggregate_seeds, compute_aucc, normalize
from .autodiff import Tensor, backward, no_grad, parameter, tensor
from .errors import ConfigError, ContractError, NumericError, ReservoirError, ShapeError
from .stack import ModelSpec, StackPattern, build_model, param_census, place_reservoirs
from .trainer import BackskipState, LayerDropConfig, Optimizer, backskip_step, evaluate, train_step

__version__ = "0.1.0"
