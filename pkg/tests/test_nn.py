import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ancl_lab import nn
from ancl_lab.oracle import fd_gradcheck


def manual_forward(arch, w, x):
    """Independent forward pass: explicit loops over unpacked layers."""
    trunk, heads = nn.unpack(arch, w)
    a = np.asarray(x, dtype=float)
    for W, b in trunk:
        a = np.maximum(W @ a + b, 0.0)
    return [W @ a + b for W, b in heads]


class TestArchSpec:
    def test_param_count_hand_case(self):
        arch = nn.ArchSpec(2, (3,), (2,), "single")
        assert arch.param_count == 2 * 3 + 3 + 3 * 2 + 2 == 17

    def test_param_count_matches_gradient_length(self, tiny_multi_arch):
        w = nn.init_weights(tiny_multi_arch, 0)
        tr = nn.forward(tiny_multi_arch, w, np.array([0.3, -0.8]), head=1)
        g = nn.backward_ce(tiny_multi_arch, w, tr, 0)
        assert g.shape == (tiny_multi_arch.param_count,) == w.shape

    def test_validation(self):
        with pytest.raises(ValueError):
            nn.ArchSpec(0, (3,), (2,))
        with pytest.raises(ValueError):
            nn.ArchSpec(2, (3,), ())
        with pytest.raises(ValueError):
            nn.ArchSpec(2, (3,), (2, 2), "single")
        with pytest.raises(ValueError):
            nn.ArchSpec(2, (3,), (2,), "double")


class TestInitWeights:
    def test_deterministic(self, tiny_multi_arch):
        a = nn.init_weights(tiny_multi_arch, 7)
        b = nn.init_weights(tiny_multi_arch, 7)
        assert np.array_equal(a, b)

    def test_seeds_differ(self, tiny_multi_arch):
        assert not np.array_equal(nn.init_weights(tiny_multi_arch, 1),
                                  nn.init_weights(tiny_multi_arch, 2))

    def test_fan_in_bounds(self, tiny_multi_arch):
        w = nn.init_weights(tiny_multi_arch, 3)
        trunk, _ = nn.unpack(tiny_multi_arch, w)
        W0, b0 = trunk[0]
        bound = 1 / np.sqrt(tiny_multi_arch.input_dim)
        assert np.abs(W0).max() <= bound and np.abs(b0).max() <= bound


class TestForward:
    def test_zero_weights_zero_logits(self, tiny_multi_arch):
        w = np.zeros(tiny_multi_arch.param_count)
        tr = nn.forward(tiny_multi_arch, w, np.array([1.0, 2.0]), head=0)
        assert np.array_equal(tr.logits, np.zeros(2))

    def test_relu_semantics_identity_layer(self):
        # one 2-wide hidden layer wired as the identity: pre-acts equal x
        arch = nn.ArchSpec(2, (2,), (2,), "single")
        w = np.zeros(arch.param_count)
        trunk, heads = nn.unpack(arch, w)
        trunk[0][0][:] = np.eye(2)
        x = np.array([1.0, -1.0])
        tr = nn.forward(arch, w, x, head=0)
        assert np.array_equal(tr.pre[0], x)
        assert np.array_equal(tr.post[0], [1.0, 0.0])

    def test_matches_independent_reimplementation(self, tiny_multi_arch, rng):
        w = nn.init_weights(tiny_multi_arch, 5)
        x = rng.normal(size=2)
        tr = nn.forward(tiny_multi_arch, w, x)
        expect = manual_forward(tiny_multi_arch, w, x)
        for got, want in zip(tr.head_logits, expect):
            np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_pure_function(self, tiny_multi_arch, rng):
        w = nn.init_weights(tiny_multi_arch, 5)
        x = rng.normal(size=2)
        a = nn.forward(tiny_multi_arch, w, x, head=1)
        b = nn.forward(tiny_multi_arch, w, x, head=1)
        assert np.array_equal(a.logits, b.logits)
        assert np.array_equal(a.features, b.features)

    def test_head_selection(self, tiny_multi_arch, rng):
        w = nn.init_weights(tiny_multi_arch, 5)
        x = rng.normal(size=2)
        all_tr = nn.forward(tiny_multi_arch, w, x, head=nn.ALL_HEADS)
        assert all_tr.logits.shape == (4,)
        one = nn.forward(tiny_multi_arch, w, x, head=1)
        np.testing.assert_array_equal(one.logits, all_tr.head_logits[1])

    def test_errors(self, tiny_multi_arch):
        w = nn.init_weights(tiny_multi_arch, 0)
        with pytest.raises(ValueError):
            nn.forward(tiny_multi_arch, w, np.zeros(3))
        with pytest.raises(ValueError):
            nn.forward(tiny_multi_arch, w, np.zeros(2), head=5)


class TestBackwardCE:
    def test_finite_difference(self, tiny_multi_arch, rng):
        w = nn.init_weights(tiny_multi_arch, 11)
        x = rng.normal(size=2)

        def loss_fn(wv):
            tr = nn.forward(tiny_multi_arch, wv, x, head=1)
            p = nn.softmax_temp(tr.logits, 1.0)
            return -np.log(p[1]), nn.backward_ce(tiny_multi_arch, wv, tr, 1)

        assert fd_gradcheck(loss_fn, w) < 1e-4

    def test_gradient_vanishes_at_confident_optimum(self):
        # single linear layer; push the true logit up until CE saturates
        arch = nn.ArchSpec(2, (), (2,), "single")
        x = np.array([1.0, 0.0])
        norms = []
        for scale in (2.0, 8.0, 20.0):
            w = np.zeros(arch.param_count)
            _, heads = nn.unpack(arch, w)
            heads[0][0][0, 0] = scale
            tr = nn.forward(arch, w, x, head=0)
            norms.append(np.linalg.norm(nn.backward_ce(arch, w, tr, 0)))
        assert norms[0] > norms[1] > norms[2]
        assert norms[2] < 1e-7

    def test_sum_linearity(self, tiny_multi_arch, rng):
        w = nn.init_weights(tiny_multi_arch, 2)
        x = rng.normal(size=2)
        tr = nn.forward(tiny_multi_arch, w, x, head=0)
        g = nn.backward_ce(tiny_multi_arch, w, tr, 1)
        np.testing.assert_allclose(g + g, 2 * g, rtol=0, atol=0)

    def test_label_out_of_range(self, tiny_multi_arch, rng):
        w = nn.init_weights(tiny_multi_arch, 2)
        tr = nn.forward(tiny_multi_arch, w, rng.normal(size=2), head=0)
        with pytest.raises(ValueError):
            nn.backward_ce(tiny_multi_arch, w, tr, 2)

    def test_batch_matches_per_sample_mean(self, tiny_multi_arch, rng):
        w = nn.init_weights(tiny_multi_arch, 9)
        X = rng.normal(size=(5, 2))
        y = rng.integers(0, 2, size=5)
        _, g_batch = nn.ce_loss_grad_batch(tiny_multi_arch, w, X, y, head=0)
        per = [nn.backward_ce(tiny_multi_arch, w,
                              nn.forward(tiny_multi_arch, w, x, head=0), int(l))
               for x, l in zip(X, y)]
        np.testing.assert_allclose(g_batch, np.mean(per, axis=0), atol=1e-12)


class TestSoftmaxTemp:
    def test_symmetric_logits(self):
        np.testing.assert_allclose(nn.softmax_temp(np.zeros(2), 1.0), [0.5, 0.5])

    def test_hand_value(self):
        out = nn.softmax_temp(np.array([np.log(2.0), 0.0]), 1.0)
        np.testing.assert_allclose(out, [2 / 3, 1 / 3], rtol=1e-12)

    def test_large_tau_approaches_uniform(self, rng):
        logits = rng.normal(scale=3.0, size=6)
        devs = [np.abs(nn.softmax_temp(logits, tau) - 1 / 6).max()
                for tau in (1e2, 1e4, 1e8)]
        assert devs[0] > devs[1] > devs[2]
        assert devs[-1] < 1e-7

    def test_invalid_tau(self):
        with pytest.raises(ValueError):
            nn.softmax_temp(np.zeros(2), 0.0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8),
           st.floats(0.1, 20.0))
    def test_sums_to_one_and_permutation_equivariant(self, logits, tau):
        arr = np.array(logits)
        out = nn.softmax_temp(arr, tau)
        assert abs(out.sum() - 1.0) < 1e-12
        perm = np.random.default_rng(0).permutation(len(arr))
        np.testing.assert_allclose(nn.softmax_temp(arr[perm], tau), out[perm],
                                   atol=1e-15)


class TestCenterNormalize:
    def test_already_centered(self):
        out = nn.center_normalize(np.array([1.0, -1.0]))
        np.testing.assert_allclose(out, [1 / np.sqrt(2), -1 / np.sqrt(2)])

    def test_constant_input_degenerates(self):
        with pytest.warns(nn.DegenerateFeatureWarning):
            out = nn.center_normalize(np.array([5.0, 5.0]))
        assert np.array_equal(out, [0.0, 0.0])

    def test_hand_case(self):
        out = nn.center_normalize(np.array([3.0, 1.0, 2.0]))
        np.testing.assert_allclose(out, np.array([1.0, -1.0, 0.0]) / np.sqrt(2))

    def test_properties(self, rng):
        v = rng.normal(size=9)
        out = nn.center_normalize(v)
        assert abs(out.mean()) < 1e-12
        assert abs(np.linalg.norm(out) - 1.0) < 1e-12

    def test_vjp_matches_finite_differences(self, rng):
        v = rng.normal(size=6)
        g = rng.normal(size=6)

        def scalar(x):
            return float(nn.center_normalize(x) @ g)

        analytic = nn.center_normalize_vjp(v, g)
        eps = 1e-6
        numeric = np.array([
            (scalar(v + eps * e) - scalar(v - eps * e)) / (2 * eps)
            for e in np.eye(6)
        ])
        np.testing.assert_allclose(analytic, numeric, atol=1e-8)


class TestSgdStep:
    def test_plain_step(self):
        w, state = nn.sgd_step(np.array([1.0]), np.array([2.0]),
                               nn.OptimState(np.zeros(1), lr=0.1, momentum=0.0))
        np.testing.assert_allclose(w, [0.8])

    def test_zero_grad_zero_velocity_fixed_point(self):
        w0 = np.array([1.0, -2.0])
        w, state = nn.sgd_step(w0, np.zeros(2),
                               nn.OptimState(np.zeros(2), lr=0.5, momentum=0.9))
        assert np.array_equal(w, w0)
        assert np.array_equal(state.velocity, np.zeros(2))

    def test_momentum_matches_hand_recurrence(self):
        lr, m, g = 0.1, 0.9, np.array([1.0])
        w, state = np.array([0.0]), nn.OptimState(np.zeros(1), lr=lr, momentum=m)
        for _ in range(2):
            w, state = nn.sgd_step(w, g, state)
        # v1 = g, w1 = -lr g ; v2 = m g + g, w2 = w1 - lr (m + 1) g
        np.testing.assert_allclose(w, [-lr - lr * (m + 1)])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            nn.sgd_step(np.zeros(2), np.zeros(3),
                        nn.OptimState(np.zeros(2), lr=0.1))
