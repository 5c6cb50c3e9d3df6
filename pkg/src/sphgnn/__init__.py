"""SPH fluid datasets and learned graph-network surrogates.

Pipeline: generate weakly compressible SPH trajectories (decaying vortex and
reverse Poiseuille scenarios), train acceleration-predicting graph networks
(a dense-net baseline and an O(3)-equivariant steerable model with history
attribute embeddings) at 10x temporal coarsening, and evaluate autoregressive
rollouts with position MSE, kinetic energy and Sinkhorn divergence.
"""

__version__ = "0.1.0"

from .backend import backend_name
from .box import DomainSpec
from .neighbors import EdgeList, build_edges
from .sph import ParticleState, ScenarioConfig, Trajectory, generate_trajectory

__all__ = [
    "DomainSpec",
    "EdgeList",
    "ParticleState",
    "ScenarioConfig",
    "Trajectory",
    "backend_name",
    "build_edges",
    "generate_trajectory",
    "__version__",
]
