"""Non-equivariant graph-network simulator baseline.

Encoder-processor-decoder with residual message passing. All building
blocks are plain dense nets (one hidden layer, SiLU) with layer norm on the
latents; positions enter only through relative edge displacements, so the
model is translation-invariant by construction.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .graphs import GraphSample
from .normalization import NormalizationStats
from .params import ParamStore


@dataclass(frozen=True)
class GNSConfig:
    history: int = 5
    latent: int = 128
    layers: int = 10


def _register_mlp(store: ParamStore, prefix: str, n_in: int, n_hidden: int, n_out: int, rng):
    store.add(prefix + ".w0", rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, n_hidden)))
    store.add(prefix + ".b0", np.zeros(n_hidden))
    store.add(prefix + ".w1", rng.normal(0.0, 1.0 / np.sqrt(n_hidden), (n_hidden, n_out)))
    store.add(prefix + ".b1", np.zeros(n_out))


def _register_ln(store: ParamStore, prefix: str, width: int):
    store.add(prefix + ".ln_g", np.ones(width))
    store.add(prefix + ".ln_b", np.zeros(width))


def _mlp(store: ParamStore, prefix: str, x):
    h = ad.silu(ad.add(ad.matmul(x, store[prefix + ".w0"]), store[prefix + ".b0"]))
    return ad.add(ad.matmul(h, store[prefix + ".w1"]), store[prefix + ".b1"])


def _mlp_ln(store: ParamStore, prefix: str, x):
    y = _mlp(store, prefix, x)
    return ad.layer_norm(y, store[prefix + ".ln_g"], store[prefix + ".ln_b"])


class GNS:
    """Maps a graph sample to per-node accelerations in normalized units."""

    kind = "gns"

    def __init__(self, config: GNSConfig):
        self.config = config
        c = config
        self.node_in = 3 * c.history + 3
        self.edge_in = 4

    def init_params(self, rng: np.random.Generator, dtype=np.float64) -> ParamStore:
        c = self.config
        store = ParamStore(dtype)
        _register_mlp(store, "encoder.node", self.node_in, c.latent, c.latent, rng)
        _register_ln(store, "encoder.node", c.latent)
        _register_mlp(store, "encoder.edge", self.edge_in, c.latent, c.latent, rng)
        _register_ln(store, "encoder.edge", c.latent)
        for k in range(c.layers):
            _register_mlp(store, f"layer{k}.edge", 3 * c.latent, c.latent, c.latent, rng)
            _register_ln(store, f"layer{k}.edge", c.latent)
            _register_mlp(store, f"layer{k}.node", 2 * c.latent, c.latent, c.latent, rng)
            _register_ln(store, f"layer{k}.node", c.latent)
        _register_mlp(store, "decoder", c.latent, c.latent, 3, rng)
        return store

    def node_features(self, sample: GraphSample, stats: NormalizationStats) -> np.ndarray:
        v = stats.normalize_velocity(sample.vel_history)
        f = stats.normalize_accel(sample.force)
        return np.concatenate([v.reshape(sample.n_nodes, -1), f], axis=-1)

    def edge_features(self, sample: GraphSample) -> np.ndarray:
        return np.concatenate(
            [sample.disp / sample.radius, sample.dist[:, None] / sample.radius], axis=-1
        )

    def forward(self, params: ParamStore, sample: GraphSample, stats: NormalizationStats):
        """Normalized per-node accelerations, (N, 3). Var under an active tape."""
        dtype = params.dtype
        h = _mlp_ln(params, "encoder.node", self.node_features(sample, stats).astype(dtype))
        e = _mlp_ln(params, "encoder.edge", self.edge_features(sample).astype(dtype))
        for k in range(self.config.layers):
            h_s = ad.gather(h, sample.senders, sample.send_plan)
            h_r = ad.gather(h, sample.receivers, sample.recv_plan)
            m = _mlp_ln(params, f"layer{k}.edge", ad.concat([e, h_s, h_r], axis=-1))
            e = ad.add(e, m)
            agg = ad.segment_sum(e, sample.recv_plan)
            n = _mlp_ln(params, f"layer{k}.node", ad.concat([h, agg], axis=-1))
            h = ad.add(h, n)
        return _mlp(params, "decoder", h)
