"""O(3)-equivariant message-passing simulator with steerable features.

Every layer is a steerable MLP: parametrized Clebsch-Gordan products
conditioned on node/edge attributes, interleaved with gated nonlinearities.
The message function sees (receiver, sender, squared distance) conditioned
on the edge attribute; the update function sees (node, aggregated message)
conditioned on the node attribute, with a residual connection.

Node attributes compress the velocity history: per history step the
attribute is the direction embedding of that velocity plus the sum of edge
attributes over the neighborhood; the history is then combined by one of
three embeddings (plain average, learned weighted average, or a gated CG
product of the stacked history with the most recent attribute). The learned
embeddings use shifted initialization N(1/#W, 1/sqrt(fan_in)) so they start
out close to the plain average.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import SegmentPlan
from .graphs import GraphSample
from .normalization import NormalizationStats
from .params import ParamStore
from .steerable import (
    ATTR_LAYOUT,
    PARITY_PATHS,
    CGWeights,
    IrrepsLayout,
    SteerableTensor,
    cg_fan_in,
    cg_product,
    direct_sum,
    from_blocks,
    gated_output_layout,
    sh_embed,
    steerable_mlp,
    valid_paths,
)

HAE_MODES = ("avg", "lin", "tensor")


@dataclass(frozen=True)
class SEGNNConfig:
    history: int = 5
    hidden: int = 64  # channel count; split evenly into scalar and vector channels
    layers: int = 10
    hae: str = "avg"
    force_in_attributes: bool = False

    def __post_init__(self):
        if self.hae not in HAE_MODES:
            raise ValueError(f"hae mode must be one of {HAE_MODES}")
        if self.hidden < 2 or self.hidden % 2:
            raise ValueError("hidden must be an even channel count >= 2")


@dataclass
class Attributes:
    """Steerable conditioning attributes: per-edge and per-node."""

    edge: SteerableTensor
    node: SteerableTensor


def _path_name(path) -> str:
    return "p" + "".join(str(l) for l in path)


def _register_cg(store, prefix, lin, lattr, lout, rng, shifted=False):
    """One weight array per valid parity path; LeCun-style fan-in scaling,
    optionally mean-shifted toward the averaging embedding."""
    for path in valid_paths(lin, lattr, lout, PARITY_PATHS):
        shape = (lin.mult(path[0]), lattr.mult(path[1]), lout.mult(path[2]))
        fan = cg_fan_in(lin, lattr, PARITY_PATHS, path[2])
        if shifted:
            size = int(np.prod(shape))
            w = rng.normal(1.0 / size, 1.0 / np.sqrt(shape[0] * shape[1]), shape)
        else:
            w = rng.normal(0.0, 1.0 / np.sqrt(fan), shape)
        store.add(f"{prefix}.{_path_name(path)}", w)


def _cg_weights(store, prefix, lin, lattr, lout) -> CGWeights:
    weights = {
        path: store[f"{prefix}.{_path_name(path)}"]
        for path in valid_paths(lin, lattr, lout, PARITY_PATHS)
    }
    return CGWeights(lin, lattr, lout, weights)


class SEGNN:
    """Maps a graph sample to per-node accelerations (one vector channel)."""

    kind = "segnn"

    def __init__(self, config: SEGNNConfig):
        self.config = config
        c = config
        m = c.hidden // 2
        n_vec_in = c.history if c.force_in_attributes else c.history + 1
        self.feat_in = IrrepsLayout.of(c.history, n_vec_in)
        self.hidden = IrrepsLayout.of(m, m)
        self.pregate = gated_output_layout(m, m)
        self.msg_in = IrrepsLayout.of(2 * m + 1, 2 * m)
        self.upd_in = IrrepsLayout.of(2 * m, 2 * m)
        self.out_layout = IrrepsLayout.of(0, 1)
        self.node_attr_layout = (
            IrrepsLayout.of(2, 2) if c.force_in_attributes else ATTR_LAYOUT
        )
        self.hae_stack = IrrepsLayout.of(c.history, c.history)
        self.hae_pregate = gated_output_layout(1, 1)

    def init_params(self, rng: np.random.Generator, dtype=np.float64) -> ParamStore:
        c = self.config
        store = ParamStore(dtype)
        if c.hae == "lin":
            for h in range(c.history):
                store.add(
                    f"hae.w{h}",
                    rng.normal(1.0 / c.history, 1.0 / np.sqrt(c.history)),
                )
        elif c.hae == "tensor":
            _register_cg(
                store, "hae.cg", self.hae_stack, ATTR_LAYOUT, self.hae_pregate, rng,
                shifted=True,
            )
        na = self.node_attr_layout
        _register_cg(store, "encoder.cg", self.feat_in, na, self.pregate, rng)
        for k in range(c.layers):
            _register_cg(store, f"layer{k}.message.cg0", self.msg_in, ATTR_LAYOUT, self.pregate, rng)
            _register_cg(store, f"layer{k}.message.cg1", self.hidden, ATTR_LAYOUT, self.pregate, rng)
            _register_cg(store, f"layer{k}.update.cg0", self.upd_in, na, self.pregate, rng)
            _register_cg(store, f"layer{k}.update.cg1", self.hidden, na, self.hidden, rng)
        # attr-conditioned so scalar channels also reach the output
        _register_cg(store, "decoder.cg", self.hidden, na, self.out_layout, rng)
        return store

    # -- attributes ---------------------------------------------------------

    def attributes(self, params: ParamStore | None, sample: GraphSample) -> Attributes:
        return hae_attributes(
            sample,
            self.config.hae,
            params,
            force_in_attributes=self.config.force_in_attributes,
            dtype=params.dtype if params is not None else np.float64,
        )

    # -- forward ------------------------------------------------------------

    def node_feature_tensor(
        self, sample: GraphSample, stats: NormalizationStats, dtype
    ) -> SteerableTensor:
        vel = stats.normalize_velocity(sample.vel_history).astype(dtype)
        mags = np.linalg.norm(vel, axis=-1)  # invariant scalar channels
        vecs = [vel]
        if not self.config.force_in_attributes:
            vecs.append(stats.normalize_accel(sample.force).astype(dtype)[:, None, :])
        vectors = np.concatenate(vecs, axis=1)
        coeffs = np.concatenate(
            [mags, vectors.reshape(sample.n_nodes, -1)], axis=-1
        )
        return SteerableTensor(self.feat_in, coeffs)

    def forward(self, params: ParamStore, sample: GraphSample, stats: NormalizationStats):
        """Normalized per-node accelerations, (N, 3). Var under an active tape."""
        c = self.config
        dtype = params.dtype
        attrs = self.attributes(params, sample)
        f = self.node_feature_tensor(sample, stats, dtype)

        na = self.node_attr_layout
        f = steerable_mlp(
            f, attrs.node, [_cg_weights(params, "encoder.cg", self.feat_in, na, self.pregate)],
            gate_last=True,
        )
        d2 = ((sample.dist / sample.radius) ** 2)[:, None].astype(dtype)
        for k in range(c.layers):
            coeffs = f.coefficients
            f_s = SteerableTensor(self.hidden, ad.gather(coeffs, sample.senders, sample.send_plan))
            f_r = SteerableTensor(self.hidden, ad.gather(coeffs, sample.receivers, sample.recv_plan))
            d2_t = SteerableTensor(IrrepsLayout.of(1, 0), d2)
            msg_in = direct_sum(f_r, f_s, d2_t)
            msg = steerable_mlp(
                msg_in,
                attrs.edge,
                [
                    _cg_weights(params, f"layer{k}.message.cg0", self.msg_in, ATTR_LAYOUT, self.pregate),
                    _cg_weights(params, f"layer{k}.message.cg1", self.hidden, ATTR_LAYOUT, self.pregate),
                ],
                gate_last=True,
            )
            agg = SteerableTensor(self.hidden, ad.segment_sum(msg.coefficients, sample.recv_plan))
            upd = steerable_mlp(
                direct_sum(f, agg),
                attrs.node,
                [
                    _cg_weights(params, f"layer{k}.update.cg0", self.upd_in, na, self.pregate),
                    _cg_weights(params, f"layer{k}.update.cg1", self.hidden, na, self.hidden),
                ],
            )
            f = SteerableTensor(self.hidden, ad.add(f.coefficients, upd.coefficients))

        dec = _cg_weights(params, "decoder.cg", self.hidden, na, self.out_layout)
        out = cg_product(f, attrs.node, dec)
        return out.coefficients


# ---------------------------------------------------------------------------
# historical attribute embedding


def hae_attributes(
    sample: GraphSample,
    mode: str,
    params: ParamStore | None = None,
    force_in_attributes: bool = False,
    dtype=np.float64,
    degree_normalize: bool = True,
) -> Attributes:
    """Steerable edge and node attributes from geometry and velocity history.

    Edge attribute: direction embedding of the edge displacement. Per
    history step h, the node attribute is ``sh_embed(v_h) + sum of edge
    attributes over incoming edges``; the H per-step attributes are combined
    according to ``mode``:

    * ``avg``    -- arithmetic mean over the history,
    * ``lin``    -- learned weighted sum (H scalar weights),
    * ``tensor`` -- gated CG product of the stacked history (direct sum of
      the H per-step attributes) with the most recent one.

    ``degree_normalize`` divides each per-step attribute by (1 + degree).
    The raw neighbor sum scales with connectivity (~20 here) and, since the
    attribute multiplies the features in every CG product, would blow
    activations up geometrically with depth. Scaling by an invariant does
    not affect equivariance.
    """
    if mode not in HAE_MODES:
        raise ValueError(f"unknown HAE mode {mode!r}")
    n, h_len = sample.n_nodes, sample.history
    edge_coeffs = sh_embed(sample.disp).coefficients.astype(dtype)
    neigh = np.zeros((n, 4), dtype=dtype)
    if sample.n_edges:
        neigh = ad._segment_sum_raw(edge_coeffs, sample.recv_plan)
    scale = np.ones((n, 1), dtype=dtype)
    if degree_normalize:
        degree = np.bincount(sample.receivers, minlength=n).astype(dtype)
        scale = 1.0 / (1.0 + degree)[:, None]

    per_step = [
        (sh_embed(sample.vel_history[:, h]).coefficients.astype(dtype) + neigh) * scale
        for h in range(h_len)
    ]

    if mode == "avg":
        node_coeffs = np.mean(per_step, axis=0)
        node = SteerableTensor(ATTR_LAYOUT, node_coeffs)
    elif mode == "lin":
        if params is None:
            raise ValueError("lin mode needs parameters")
        acc = ad.mul(params["hae.w0"], per_step[0])
        for h in range(1, h_len):
            acc = ad.add(acc, ad.mul(params[f"hae.w{h}"], per_step[h]))
        node = SteerableTensor(ATTR_LAYOUT, acc)
    else:  # tensor
        if params is None:
            raise ValueError("tensor mode needs parameters")
        scalars = np.concatenate([a[:, :1] for a in per_step], axis=-1)
        vectors = np.concatenate(
            [a[:, 1:].reshape(n, 1, 3) for a in per_step], axis=1
        )
        stack = from_blocks(scalars, vectors)
        latest = SteerableTensor(ATTR_LAYOUT, per_step[-1])
        w = _cg_weights(
            params, "hae.cg", stack.layout, ATTR_LAYOUT, gated_output_layout(1, 1)
        )
        node = steerable_mlp(stack, latest, [w], gate_last=True)

    if force_in_attributes:
        force_attr = SteerableTensor(
            ATTR_LAYOUT, sh_embed(sample.force).coefficients.astype(dtype)
        )
        node = direct_sum(node, force_attr)

    return Attributes(
        edge=SteerableTensor(ATTR_LAYOUT, edge_coeffs),
        node=node,
    )
