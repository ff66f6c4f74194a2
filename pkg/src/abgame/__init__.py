"""Simulator for the model-extraction attack/defense game."""

from .errors import ABGameError
from .numeric import make_rng, project_simplex, neumann_inverse_apply
from .models import Model, init_model, linear_model, ridge_closed_form
from .batch import LabeledBatch
from .defense import (
    Bdpl,
    BoundaryBand,
    BoundaryFlip,
    DefenseOracle,
    Identity,
    SinePerturb,
    Substitute,
    Temperature,
    UniformFlip,
    bdpl_flip_prob,
    construct_fB,
)
from .attack import LowerLevelProblem, extract, fit_lower, init_queries
from .metrics import ABPoint, LossKind, ab_curve, adversary_utility, server_utility

__version__ = "0.1.0"
