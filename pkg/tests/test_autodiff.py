import numpy as np
import pytest

from sphgnn import autodiff as ad
from sphgnn.optim import AdamState, adam_step, exp_decay_lr, grad_check
from sphgnn.params import ParamStore


def tape_grad(build, *params):
    with ad.Tape() as tape:
        loss = build()
    grads = tape.backward(loss)
    return [grads.get(id(p)) for p in params]


class TestPrimitives:
    def test_square_gradient(self):
        x = ad.param(3.0)
        (g,) = tape_grad(lambda: ad.mul(x, x), x)
        np.testing.assert_allclose(g, 6.0)

    @pytest.mark.parametrize(
        "op,args",
        [
            (ad.add, 2), (ad.sub, 2), (ad.mul, 2), (ad.div, 2),
            (ad.matmul, 2), (ad.silu, 1), (ad.sigmoid, 1),
        ],
    )
    def test_fd_agreement(self, op, args, rng):
        shapes = {"matmul": [(3, 4), (4, 2)]}.get(op.__name__, [(3, 4)] * args)
        xs = [ad.param(rng.standard_normal(s) + 2.0) for s in shapes]

        def loss_of():
            return ad.mean(ad.mul(op(*xs), op(*xs)))

        grads = tape_grad(loss_of, *xs)
        h = 1e-6
        for x, g in zip(xs, grads):
            flat = x.data.reshape(-1)
            i = 1
            orig = flat[i]
            flat[i] = orig + h
            lp = float(ad.value(loss_of()))
            flat[i] = orig - h
            lm = float(ad.value(loss_of()))
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            np.testing.assert_allclose(g.reshape(-1)[i], fd, rtol=1e-6)

    def test_einsum_fd(self, rng):
        W = ad.param(rng.standard_normal((4, 2, 3)))
        f = rng.standard_normal((6, 4))
        a = rng.standard_normal((6, 2))

        def loss_of():
            out = ad.einsum("uvw,bu,bv->bw", W, f, a)
            return ad.mean(ad.mul(out, out))

        (g,) = tape_grad(loss_of, W)
        h = 1e-6
        idx = (2, 1, 2)
        orig = W.data[idx]
        W.data[idx] = orig + h
        lp = float(ad.value(loss_of()))
        W.data[idx] = orig - h
        lm = float(ad.value(loss_of()))
        W.data[idx] = orig
        np.testing.assert_allclose(g[idx], (lp - lm) / (2 * h), rtol=1e-6)

    def test_segment_ops(self, rng):
        x = ad.param(rng.standard_normal((5, 2)))
        idx = np.array([0, 3, 3, 1, 0, 4])
        plan = ad.SegmentPlan(idx, 5)

        def loss_of():
            rows = ad.gather(x, idx, plan)
            summed = ad.segment_sum(rows, plan)
            return ad.mean(ad.mul(summed, summed))

        (g,) = tape_grad(loss_of, x)
        h = 1e-6
        flat = x.data.reshape(-1)
        for i in (0, 3, 9):
            orig = flat[i]
            flat[i] = orig + h
            lp = float(ad.value(loss_of()))
            flat[i] = orig - h
            lm = float(ad.value(loss_of()))
            flat[i] = orig
            np.testing.assert_allclose(g.reshape(-1)[i], (lp - lm) / (2 * h), rtol=1e-6)

    def test_layer_norm_fd(self, rng):
        x = ad.param(rng.standard_normal((4, 6)))
        gm = ad.param(np.ones(6))
        bt = ad.param(np.zeros(6))

        def loss_of():
            return ad.mean(ad.power(ad.layer_norm(x, gm, bt), 2.0))

        gx, gg, gb = tape_grad(loss_of, x, gm, bt)
        h = 1e-6
        flat = x.data.reshape(-1)
        orig = flat[5]
        flat[5] = orig + h
        lp = float(ad.value(loss_of()))
        flat[5] = orig - h
        lm = float(ad.value(loss_of()))
        flat[5] = orig
        np.testing.assert_allclose(gx.reshape(-1)[5], (lp - lm) / (2 * h), atol=1e-8)
        assert gb is not None and gg is not None


class TestTape:
    def test_unused_parameter_gets_exact_zero(self, rng):
        store = ParamStore()
        a = store.add("used", rng.standard_normal(3))
        store.add("unused", rng.standard_normal(3))
        with ad.Tape() as tape:
            loss = ad.mean(ad.mul(a, a))
        grads = store.gradients(tape, loss)
        assert np.all(grads["unused"] == 0.0)
        assert np.any(grads["used"] != 0.0)

    def test_backward_linearity(self, rng):
        x = ad.param(rng.standard_normal(5))
        y = rng.standard_normal(5)
        alpha = 0.37

        def l1():
            return ad.mean(ad.mul(x, x))

        def l2():
            return ad.mean(ad.mul(x, y))

        (g1,) = tape_grad(l1, x)
        (g2,) = tape_grad(l2, x)
        (g12,) = tape_grad(lambda: ad.add(ad.mul(l1(), alpha), l2()), x)
        np.testing.assert_allclose(g12, alpha * g1 + g2, atol=1e-12)

    def test_no_grad_blocks_recording(self, rng):
        x = ad.param(rng.standard_normal(4))
        with ad.Tape() as tape:
            with ad.no_grad():
                frozen = ad.mul(x, x)  # plain ndarray
            assert isinstance(frozen, np.ndarray)
            loss = ad.mean(ad.mul(x, frozen))
        grads = tape.backward(loss)
        # gradient sees `frozen` as a constant: d/dx mean(x * c) = c / n
        np.testing.assert_allclose(grads[id(x)], ad.value(frozen) / 4.0)

    def test_non_scalar_loss_rejected(self, rng):
        x = ad.param(rng.standard_normal(4))
        with ad.Tape() as tape:
            y = ad.mul(x, x)
        with pytest.raises(ValueError):
            tape.backward(y)


class TestAdam:
    def _store(self, rng):
        store = ParamStore()
        store.add("w", rng.standard_normal((3, 2)))
        store.add("b", rng.standard_normal(2))
        return store

    def test_zero_gradient_keeps_params(self, rng):
        store = self._store(rng)
        state = AdamState.init(store)
        grads = {k: np.zeros_like(v.data) for k, v in store.items()}
        before = store.arrays()
        new_p, _ = adam_step(store.arrays(), grads, state, lr=1e-2)
        for k in before:
            np.testing.assert_array_equal(new_p[k], before[k])

    def test_constant_gradient_step_approaches_lr(self, rng):
        store = self._store(rng)
        state = AdamState.init(store)
        params = store.arrays()
        grads = {k: np.full_like(v, 0.5) for k, v in params.items()}
        lr = 1e-3
        for _ in range(300):
            prev = {k: v.copy() for k, v in params.items()}
            params, state = adam_step(params, grads, state, lr)
        step_mag = np.abs(params["w"] - prev["w"])
        np.testing.assert_allclose(step_mag, lr, rtol=1e-3)
        assert np.all(params["w"] < prev["w"])  # moves against the gradient

    def test_determinism(self, rng):
        def run():
            r = np.random.default_rng(0)
            store = ParamStore()
            store.add("w", r.standard_normal((4, 4)))
            state = AdamState.init(store)
            params = store.arrays()
            for k in range(20):
                g = {"w": np.sin(params["w"] + k)}
                params, state = adam_step(params, g, state, exp_decay_lr(k, 20, 1e-3, 1e-5))
            return params["w"]

        np.testing.assert_array_equal(run(), run())


class TestGradCheckHarness:
    def _loss_fn(self, data):
        def fn(params):
            h = ad.silu(ad.add(ad.matmul(data, params["mlp.w"]), params["mlp.b"]))
            return ad.mean(ad.mul(h, h))

        return fn

    def test_passes_on_correct_rules(self, rng):
        store = ParamStore()
        store.add("mlp.w", rng.standard_normal((3, 4)) / 2)
        store.add("mlp.b", rng.standard_normal(4) / 2)
        report = grad_check(self._loss_fn(rng.standard_normal((6, 3))), store)
        assert report.passed, report.summary()

    def test_detects_corrupted_backward(self, rng, monkeypatch):
        store = ParamStore()
        store.add("mlp.w", rng.standard_normal((3, 4)) / 2)
        store.add("mlp.b", rng.standard_normal(4) / 2)

        real_silu = ad.silu

        def broken_silu(x):
            xv = ad.value(x)
            s = 1.0 / (1.0 + np.exp(-xv))
            out = xv * s
            if not isinstance(x, ad.Var) or ad.active_tape() is None:
                return out
            # wrong derivative on purpose: drops the x * s' term
            return ad.Var(out, parents=(x,), vjp=lambda g: (g * s,))

        monkeypatch.setattr(ad, "silu", broken_silu)
        report = grad_check(self._loss_fn(rng.standard_normal((6, 3))), store)
        monkeypatch.setattr(ad, "silu", real_silu)
        assert not report.passed
        assert report.max_rel_err > 1e-3
