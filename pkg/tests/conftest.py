import numpy as np
import pytest

from sphgnn import sph
from sphgnn.box import DomainSpec
from sphgnn.graphs import assemble_sample


def make_random_sample(
    rng, n=32, history=5, box=(1.0, 1.0, 1.0), radius=0.3, step_scale=0.01, force_scale=1e-3
):
    """Random-walk window -> GraphSample; physics-free model input."""
    domain = DomainSpec(box)
    window = np.empty((history + 1, n, 3))
    window[0] = rng.random((n, 3)) * domain.array
    for k in range(1, history + 1):
        window[k] = (window[k - 1] + step_scale * rng.standard_normal((n, 3))) % domain.array
    force = force_scale * rng.standard_normal((n, 3))
    target = step_scale * 0.1 * rng.standard_normal((n, 3))
    return assemble_sample(window, domain, radius, force=force, target=target)


@pytest.fixture(scope="session")
def tgv_traj_small():
    """512-particle decaying-vortex trajectory, 30 frames; shared across tests."""
    cfg = sph.tgv_config(dx=0.125, frames=30, relax_steps=200)
    return sph.generate_trajectory(cfg, seed=7)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
