import re

import numpy as np
import pytest

from sphgnn import autodiff as ad
from sphgnn.gns import GNS, GNSConfig
from sphgnn.graphs import assemble_sample, permute_sample, rotate_sample
from sphgnn.normalization import COMPONENT, MAGNITUDE, NormalizationStats
from sphgnn.segnn import SEGNN, SEGNNConfig, hae_attributes
from sphgnn.steerable import random_rotation, transform
from sphgnn.box import DomainSpec

from conftest import make_random_sample

STATS_M = NormalizationStats(MAGNITUDE, vel_scale=0.01, acc_scale=0.002)
STATS_C = NormalizationStats(
    COMPONENT,
    vel_mean=np.array([1e-4, -2e-4, 0.0]),
    vel_std=np.array([0.01, 0.012, 0.009]),
    acc_mean=np.zeros(3),
    acc_std=np.array([0.002, 0.0021, 0.0019]),
)


def small_segnn(mode="avg", layers=2, hidden=16, force_in_attributes=False):
    cfg = SEGNNConfig(
        history=5, hidden=hidden, layers=layers, hae=mode,
        force_in_attributes=force_in_attributes,
    )
    model = SEGNN(cfg)
    params = model.init_params(np.random.default_rng(99))
    return model, params


def small_gns(layers=2, latent=16):
    model = GNS(GNSConfig(history=5, latent=latent, layers=layers))
    return model, model.init_params(np.random.default_rng(98))


class TestParameterCounts:
    def test_gns_paper_scale(self):
        model = GNS(GNSConfig(history=5, latent=128, layers=10))
        n = model.init_params(np.random.default_rng(0)).n_params
        assert abs(n - 1.2e6) / 1.2e6 < 0.10, n

    def test_segnn_paper_scale(self):
        model = SEGNN(SEGNNConfig(history=5, hidden=64, layers=10))
        n = model.init_params(np.random.default_rng(0)).n_params
        assert abs(n - 3.6e5) / 3.6e5 < 0.15, n


class TestGNS:
    def test_permutation_equivariance_exact(self, rng):
        sample = make_random_sample(rng)
        model, params = small_gns()
        out = model.forward(params, sample, STATS_C)
        perm = rng.permutation(sample.n_nodes)
        out_p = model.forward(params, permute_sample(sample, perm), STATS_C)
        np.testing.assert_array_equal(out_p, out[perm])

    def test_translation_invariance(self, rng):
        domain = DomainSpec((1.0, 1.0, 1.0))
        base = rng.random((30, 3))
        window = np.empty((6, 30, 3))
        window[0] = base
        for k in range(1, 6):
            window[k] = (window[k - 1] + 0.01 * rng.standard_normal((30, 3))) % 1.0
        model, params = small_gns()
        s0 = assemble_sample(window, domain, 0.3)
        out0 = model.forward(params, s0, STATS_C)
        shift = rng.random(3)
        s1 = assemble_sample((window + shift) % 1.0, domain, 0.3)
        out1 = model.forward(params, s1, STATS_C)
        assert np.abs(out1 - out0).max() < 1e-12

    def test_not_rotation_equivariant(self, rng):
        # per-component normalization breaks equivariance; make sure the
        # baseline does not accidentally pass the symmetry test
        sample = make_random_sample(rng)
        model, params = small_gns()
        rot = random_rotation(rng)
        out_rot = model.forward(params, rotate_sample(sample, rot), STATS_C)
        out_ref = model.forward(params, sample, STATS_C) @ rot.T
        assert np.abs(out_rot - out_ref).max() > 1e-3

    def test_finite_with_empty_graph(self, rng):
        sample = make_random_sample(rng, n=4, radius=0.01)  # no edges
        assert sample.n_edges == 0
        model, params = small_gns()
        out = model.forward(params, sample, STATS_C)
        assert np.all(np.isfinite(out))

    def test_gradient_flow(self, rng):
        sample = make_random_sample(rng, n=24)
        model, params = small_gns()
        with ad.Tape() as tape:
            out = model.forward(params, sample, STATS_C)
            loss = ad.mse(out, rng.standard_normal((sample.n_nodes, 3)))
        grads = params.gradients(tape, loss)
        dead = [k for k, g in grads.items() if np.all(g == 0.0)]
        assert not dead, dead


class TestSEGNN:
    @pytest.mark.parametrize("mode", ["avg", "lin", "tensor"])
    def test_o3_equivariance(self, rng, mode):
        sample = make_random_sample(rng)
        model, params = small_segnn(mode, layers=3)
        out = ad.value(model.forward(params, sample, STATS_M))
        for _ in range(10):
            rot = random_rotation(rng, reflect=bool(rng.integers(2)))
            out_rot = ad.value(model.forward(params, rotate_sample(sample, rot), STATS_M))
            rel = np.abs(out_rot - out @ rot.T).max() / np.abs(out).max()
            assert rel < 1e-10

    def test_equivariance_with_force_in_attributes(self, rng):
        sample = make_random_sample(rng)
        model, params = small_segnn("tensor", force_in_attributes=True)
        out = ad.value(model.forward(params, sample, STATS_M))
        rot = random_rotation(rng, reflect=True)
        out_rot = ad.value(model.forward(params, rotate_sample(sample, rot), STATS_M))
        assert np.abs(out_rot - out @ rot.T).max() / np.abs(out).max() < 1e-10

    def test_permutation_equivariance_exact(self, rng):
        sample = make_random_sample(rng)
        model, params = small_segnn("tensor")
        out = ad.value(model.forward(params, sample, STATS_M))
        perm = rng.permutation(sample.n_nodes)
        out_p = ad.value(model.forward(params, permute_sample(sample, perm), STATS_M))
        np.testing.assert_array_equal(out_p, out[perm])

    def test_translation_invariance(self, rng):
        domain = DomainSpec((1.0, 1.0, 1.0))
        window = np.empty((6, 30, 3))
        window[0] = rng.random((30, 3))
        for k in range(1, 6):
            window[k] = (window[k - 1] + 0.01 * rng.standard_normal((30, 3))) % 1.0
        model, params = small_segnn("avg")
        out0 = ad.value(model.forward(params, assemble_sample(window, domain, 0.3), STATS_M))
        shift = rng.random(3)
        out1 = ad.value(
            model.forward(params, assemble_sample((window + shift) % 1.0, domain, 0.3), STATS_M)
        )
        assert np.abs(out1 - out0).max() < 1e-12

    def test_finite_with_empty_graph(self, rng):
        sample = make_random_sample(rng, n=4, radius=0.01)
        model, params = small_segnn("tensor")
        out = ad.value(model.forward(params, sample, STATS_M))
        assert np.all(np.isfinite(out))

    @pytest.mark.parametrize("mode", ["avg", "lin", "tensor"])
    def test_gradient_flow(self, rng, mode):
        sample = make_random_sample(rng, n=24)
        model, params = small_segnn(mode)
        with ad.Tape() as tape:
            out = model.forward(params, sample, STATS_M)
            loss = ad.mse(out, rng.standard_normal((sample.n_nodes, 3)))
        grads = params.gradients(tape, loss)
        dead = [k for k, g in grads.items() if np.all(g == 0.0)]
        assert not dead, dead


class TestHAE:
    def test_identical_history_avg_is_single_step(self, rng):
        sample = make_random_sample(rng, step_scale=0.0)  # zero velocities
        v = 0.01 * rng.standard_normal((sample.n_nodes, 3))
        sample.vel_history[:] = v[:, None, :]  # identical across history
        attrs = hae_attributes(sample, "avg")
        per_step = hae_attributes(sample, "lin", _selector_params(sample.history, 0))
        np.testing.assert_allclose(
            attrs.node.data, ad.value(per_step.node.coefficients), atol=1e-14
        )

    def test_lin_selector_weights(self, rng):
        sample = make_random_sample(rng)
        params = _selector_params(sample.history, sample.history - 1)
        attrs = hae_attributes(sample, "lin", params)
        # selector on the last step: equals the per-step attribute at H
        ref = hae_attributes(
            _single_step_sample(sample, sample.history - 1), "avg"
        )
        np.testing.assert_allclose(ad.value(attrs.node.coefficients), ref.node.data, atol=1e-14)

    def test_lin_uniform_equals_avg(self, rng):
        sample = make_random_sample(rng)
        model_l, params_l = small_segnn("lin")
        model_a, params_a = small_segnn("avg")
        arrays = params_l.arrays()
        for h in range(5):
            arrays[f"hae.w{h}"] = np.array(1.0 / 5.0)
        params_l.load(arrays)
        params_a.load({k: v for k, v in arrays.items() if not k.startswith("hae.")})
        out_l = ad.value(model_l.forward(params_l, sample, STATS_M))
        out_a = ad.value(model_a.forward(params_a, sample, STATS_M))
        assert np.abs(out_l - out_a).max() < 1e-12

    def test_attribute_equivariance(self, rng):
        sample = make_random_sample(rng)
        _, params = small_segnn("tensor")
        attrs = hae_attributes(sample, "tensor", params)
        for reflect in (False, True):
            rot = random_rotation(rng, reflect)
            rotated = hae_attributes(rotate_sample(sample, rot), "tensor", params)
            lhs = ad.value(rotated.node.coefficients)
            rhs = ad.value(transform(attrs.node, rot).coefficients)
            assert np.abs(lhs - rhs).max() < 1e-12

    def test_empty_neighborhood_allowed(self, rng):
        sample = make_random_sample(rng, n=3, radius=0.01)
        attrs = hae_attributes(sample, "avg")
        assert np.all(np.isfinite(attrs.node.data))

    def test_lin_checkpoint_has_h_scalars(self):
        _, params = small_segnn("lin")
        w_names = [n for n in params.names() if re.fullmatch(r"hae\.w\d+", n)]
        assert len(w_names) == 5
        assert all(params[n].data.shape == () for n in w_names)

    def test_shifted_init_statistics(self):
        # weight mean must match 1/#W within 3 standard errors over >= 1e4 draws
        h = 5
        draws = []
        for seed in range(2000):
            params_fresh = SEGNN(
                SEGNNConfig(history=h, hidden=16, layers=1, hae="lin")
            ).init_params(np.random.default_rng(seed))
            draws.extend(float(params_fresh[f"hae.w{k}"].data) for k in range(h))
        draws = np.asarray(draws)
        n = draws.size
        assert n >= 10_000
        se = (1.0 / np.sqrt(h)) / np.sqrt(n)
        assert abs(draws.mean() - 1.0 / h) < 3.0 * se
        # spread matches 1/sqrt(fan_in) within 5%
        assert abs(draws.std() - 1.0 / np.sqrt(h)) < 0.05 / np.sqrt(h)

    def test_shifted_init_tensor_mode(self):
        means = []
        sizes = None
        for seed in range(400):
            model = SEGNN(SEGNNConfig(history=5, hidden=16, layers=1, hae="tensor"))
            params = model.init_params(np.random.default_rng(seed))
            hae_w = {n: params[n].data for n in params.names() if n.startswith("hae.cg.")}
            sizes = {n: w.size for n, w in hae_w.items()}
            means.append({n: w.mean() for n, w in hae_w.items()})
        for name, size in sizes.items():
            vals = np.array([m[name] for m in means])
            # each array is shifted toward 1/size
            grand = vals.mean()
            se = vals.std() / np.sqrt(len(vals))
            assert abs(grand - 1.0 / size) < 4.0 * se + 1e-3


def _selector_params(history, pick):
    from sphgnn.params import ParamStore

    store = ParamStore()
    for h in range(history):
        store.add(f"hae.w{h}", np.array(1.0 if h == pick else 0.0))
    return store


def _single_step_sample(sample, h):
    from dataclasses import replace

    vel = np.repeat(sample.vel_history[:, h : h + 1], sample.history, axis=1)
    return replace(sample, vel_history=vel)
