"""Neuron-wise parallel subspace correction for shallow ReLU networks."""

from .forms import H1, L2, BilinearForm, DiscreteProblem, assemble_system, energy, energy_gradient
from .model import BoxDomain, NetworkParams, evaluate
from .quadrature import QuadratureRule, halton_rule, trapezoid_rule

__all__ = [
    "H1", "L2", "BilinearForm", "DiscreteProblem", "assemble_system", "energy", "energy_gradient",
    "BoxDomain", "NetworkParams", "evaluate", "QuadratureRule", "halton_rule", "trapezoid_rule",
]
__version__ = "0.1.0"
