import numpy as np
import pytest

from ancl_lab import importance, nn
from ancl_lab.tasks import TaskDataset


def make_batch(rng, arch, n=5, task_id=1):
    lo = task_id * 2
    X = rng.normal(size=(n, arch.input_dim))
    y = rng.integers(lo, lo + 2, size=n)
    return TaskDataset(X, y, (lo, lo + 1), task_id=task_id)


def brute_force_fisher(arch, w, ds):
    """Per-sample loop oracle: square each cross-entropy gradient."""
    acc = np.zeros(arch.param_count)
    for x, label in zip(ds.inputs, ds.labels):
        tr = nn.forward(arch, w, x, head=ds.task_id)
        g = nn.backward_ce(arch, w, tr, int(label - ds.class_range[0]))
        acc += g * g
    return acc / len(ds)


def brute_force_mas(arch, w, ds, eps=1e-6):
    """Finite-difference oracle for mean |grad ||logits||^2|."""
    acc = np.zeros(arch.param_count)
    for x in ds.inputs:
        def out_norm(wv):
            return float(np.sum(nn.forward(arch, wv, x, head=ds.task_id)
                                .logits ** 2))
        g = np.empty(arch.param_count)
        probe = w.copy()
        for i in range(len(w)):
            probe[i] = w[i] + eps
            up = out_norm(probe)
            probe[i] = w[i] - eps
            down = out_norm(probe)
            probe[i] = w[i]
            g[i] = (up - down) / (2 * eps)
        acc += np.abs(g)
    return acc / len(ds)


class TestFisherDiag:
    def test_near_zero_at_confident_optimum(self):
        # saturated correct logits make every per-sample gradient vanish
        arch = nn.ArchSpec(2, (), (2,), "single")
        w = np.zeros(arch.param_count)
        _, heads = nn.unpack(arch, w)
        heads[0][0][:] = [[40.0, 0.0], [0.0, 40.0]]
        ds = TaskDataset(np.eye(2), [0, 1], (0, 1), task_id=0)
        imp = importance.fisher_diag(arch, w, ds)
        assert np.abs(imp.values).max() < 1e-20

    def test_single_sample_is_squared_gradient(self, tiny_multi_arch):
        w = nn.init_weights(tiny_multi_arch, 0)
        ds = TaskDataset(np.ones((1, 2)), [2], (2, 3), task_id=1)
        tr = nn.forward(tiny_multi_arch, w, np.ones(2), head=1)
        g = nn.backward_ce(tiny_multi_arch, w, tr, 0)
        imp = importance.fisher_diag(tiny_multi_arch, w, ds)
        np.testing.assert_allclose(imp.values, g * g, atol=1e-14)

    def test_matches_brute_force(self, tiny_multi_arch, rng):
        w = nn.init_weights(tiny_multi_arch, 4)
        ds = make_batch(rng, tiny_multi_arch)
        imp = importance.fisher_diag(tiny_multi_arch, w, ds)
        np.testing.assert_allclose(imp.values,
                                   brute_force_fisher(tiny_multi_arch, w, ds),
                                   rtol=1e-10)

    def test_duplication_invariance(self, tiny_multi_arch, rng):
        w = nn.init_weights(tiny_multi_arch, 4)
        ds = make_batch(rng, tiny_multi_arch)
        doubled = TaskDataset(np.concatenate([ds.inputs, ds.inputs]),
                              np.concatenate([ds.labels, ds.labels]),
                              ds.class_range, task_id=ds.task_id)
        a = importance.fisher_diag(tiny_multi_arch, w, ds).values
        b = importance.fisher_diag(tiny_multi_arch, w, doubled).values
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_shuffle_invariance(self, tiny_multi_arch, rng):
        w = nn.init_weights(tiny_multi_arch, 4)
        ds = make_batch(rng, tiny_multi_arch, n=8)
        perm = rng.permutation(8)
        a = importance.fisher_diag(tiny_multi_arch, w, ds).values
        b = importance.fisher_diag(tiny_multi_arch, w, ds.subset(perm)).values
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_nonneg_and_finite(self, tiny_multi_arch, rng):
        w = nn.init_weights(tiny_multi_arch, 4)
        imp = importance.fisher_diag(tiny_multi_arch, w,
                                     make_batch(rng, tiny_multi_arch))
        assert (imp.values >= 0).all() and np.isfinite(imp.values).all()
        assert imp.source == importance.FISHER

    def test_empty_dataset(self, tiny_multi_arch):
        ds = TaskDataset(np.zeros((0, 2)), np.zeros(0, dtype=int), (0, 1))
        with pytest.raises(ValueError):
            importance.fisher_diag(tiny_multi_arch, nn.init_weights(
                tiny_multi_arch, 0), ds)


class TestMasImportance:
    def test_zero_logits_zero_map(self, tiny_multi_arch, rng):
        w = np.zeros(tiny_multi_arch.param_count)
        ds = make_batch(rng, tiny_multi_arch)
        imp = importance.mas_importance(tiny_multi_arch, w, ds)
        assert np.all(imp.values == 0.0)

    def test_single_sample_finite_difference(self, tiny_multi_arch, rng):
        w = nn.init_weights(tiny_multi_arch, 6)
        ds = make_batch(rng, tiny_multi_arch, n=1)
        imp = importance.mas_importance(tiny_multi_arch, w, ds)
        np.testing.assert_allclose(imp.values,
                                   brute_force_mas(tiny_multi_arch, w, ds),
                                   atol=1e-6)

    def test_duplication_invariance(self, tiny_multi_arch, rng):
        w = nn.init_weights(tiny_multi_arch, 6)
        ds = make_batch(rng, tiny_multi_arch)
        doubled = TaskDataset(np.concatenate([ds.inputs, ds.inputs]),
                              np.concatenate([ds.labels, ds.labels]),
                              ds.class_range, task_id=ds.task_id)
        np.testing.assert_allclose(
            importance.mas_importance(tiny_multi_arch, w, ds).values,
            importance.mas_importance(tiny_multi_arch, w, doubled).values,
            rtol=1e-12)

    def test_source_tag(self, tiny_multi_arch, rng):
        w = nn.init_weights(tiny_multi_arch, 6)
        imp = importance.mas_importance(tiny_multi_arch, w,
                                        make_batch(rng, tiny_multi_arch))
        assert imp.source == importance.MAS


class TestAccumulate:
    def test_mean_of_equal_maps(self):
        a = importance.ImportanceMap(np.array([1.0, 2.0]), "fisher")
        out = importance.accumulate(a, a, t=2)
        np.testing.assert_array_equal(out.values, a.values)
        assert out.tasks_covered == 2

    def test_hand_cases(self):
        prev = importance.ImportanceMap(np.array([0.0]), "fisher")
        new = importance.ImportanceMap(np.array([2.0]), "fisher")
        np.testing.assert_allclose(importance.accumulate(prev, new, 2).values,
                                   [1.0])
        prev3 = importance.ImportanceMap(np.array([3.0]), "fisher")
        new3 = importance.ImportanceMap(np.array([0.0]), "fisher")
        np.testing.assert_allclose(importance.accumulate(prev3, new3, 3).values,
                                   [2.0])

    def test_source_mismatch(self):
        a = importance.ImportanceMap(np.array([1.0]), "fisher")
        b = importance.ImportanceMap(np.array([1.0]), "mas")
        with pytest.raises(ValueError):
            importance.accumulate(a, b, 2)

    def test_needs_second_task(self):
        a = importance.ImportanceMap(np.array([1.0]), "fisher")
        with pytest.raises(ValueError):
            importance.accumulate(a, a, 1)

    def test_negative_values_rejected(self):
        with pytest.raises(ValueError):
            importance.ImportanceMap(np.array([-0.1]), "fisher")
