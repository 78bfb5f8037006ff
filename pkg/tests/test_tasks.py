import numpy as np
import pytest

from ancl_lab import nn, tasks, trainer
from ancl_lab.losses import LossSpec, Method, Mode


def make_seq(seed=0, T=3, C=2, n=50, d=4, spread=0.25):
    return tasks.make_blob_sequence(T, C, n, d, spread=spread, seed=seed)


class TestBlobSequence:
    def test_deterministic(self):
        a, b = make_seq(seed=3), make_seq(seed=3)
        for ta, tb in zip(a.tasks, b.tasks):
            assert np.array_equal(ta.train.inputs, tb.train.inputs)
            assert np.array_equal(ta.test.labels, tb.test.labels)

    def test_class_ranges_partition(self):
        seq = make_seq(T=4, C=3)
        covered = []
        for t, triple in enumerate(seq.tasks):
            lo, hi = triple.train.class_range
            covered.extend(range(lo, hi + 1))
            assert triple.train.task_id == t
        assert covered == list(range(4 * 3))

    def test_split_sizes(self):
        seq = make_seq(n=100, C=2)
        tr = seq.tasks[0]
        assert len(tr.train) == 140 and len(tr.val) == 20 and len(tr.test) == 40

    def test_zero_spread_linearly_separable(self):
        seq = make_seq(seed=5, spread=1e-9, T=2)
        arch = nn.ArchSpec(4, (8,), (2, 2), "multi")
        cfg = trainer.TrainConfig(loss=LossSpec(Method.EWC, Mode.FINETUNE),
                                  seed=0, max_epochs=60)
        w, _ = trainer.train_plain(arch, nn.init_weights(arch, 0),
                                   seq.tasks[0].train, seq.tasks[0].val, cfg)
        assert tasks.evaluate(arch, w, seq.tasks[0].test) == 1.0

    def test_default_spread_joint_accuracy(self):
        # desk-scale regression: joint training stays >= 0.9 on 3 seeds
        accs = []
        for seed in range(3):
            seq = tasks.make_blob_sequence(5, 2, 100, 8, spread=0.25, seed=seed)
            arch = nn.ArchSpec(8, (64, 32), (2,) * 5, "multi")
            cfg = trainer.TrainConfig(loss=LossSpec(Method.EWC, Mode.FINETUNE),
                                      seed=seed, max_epochs=60)
            w = trainer.train_joint(arch, seq, cfg)
            accs.append(np.mean([tasks.evaluate(arch, w, tr.test)
                                 for tr in seq.tasks]))
        assert np.mean(accs) >= 0.9

    def test_bad_counts(self):
        with pytest.raises(ValueError):
            tasks.make_blob_sequence(0, 2, 10, 4)


class TestEvaluate:
    def test_tie_break_all_zero_weights(self):
        seq = make_seq()
        arch = nn.ArchSpec(4, (8,), (2, 2, 2), "multi")
        w = np.zeros(arch.param_count)
        ds = seq.tasks[0].test
        # every logit ties -> argmax picks local class 0
        want = np.mean(ds.labels == ds.class_range[0])
        assert tasks.evaluate(arch, w, ds) == pytest.approx(want)

    def test_perfect_memorizer_upper_bound(self):
        seq = make_seq(spread=1e-9, T=2)
        arch = nn.ArchSpec(4, (16,), (2, 2), "multi")
        cfg = trainer.TrainConfig(loss=LossSpec(Method.EWC, Mode.FINETUNE),
                                  seed=0, max_epochs=60)
        w, _ = trainer.train_plain(arch, nn.init_weights(arch, 0),
                                   seq.tasks[1].train, seq.tasks[1].val, cfg)
        assert tasks.evaluate(arch, w, seq.tasks[1].train) == 1.0

    def test_matches_per_sample_recount(self, rng):
        seq = make_seq(T=2, C=4)
        arch = nn.ArchSpec(4, (6,), (4, 4), "multi")
        w = nn.init_weights(arch, 8)
        ds = seq.tasks[1].test
        correct = 0
        for x, label in zip(ds.inputs, ds.labels):
            logits = nn.forward(arch, w, x, head=1).logits
            correct += int(np.argmax(logits) == label - ds.class_range[0])
        assert tasks.evaluate(arch, w, ds) == pytest.approx(correct / len(ds))

    def test_order_invariance(self, rng):
        seq = make_seq(T=2)
        arch = nn.ArchSpec(4, (6,), (2, 2), "multi")
        w = nn.init_weights(arch, 8)
        ds = seq.tasks[0].test
        perm = rng.permutation(len(ds))
        assert tasks.evaluate(arch, w, ds) == tasks.evaluate(arch, w,
                                                             ds.subset(perm))

    def test_empty_dataset(self):
        arch = nn.ArchSpec(4, (6,), (2, 2), "multi")
        ds = tasks.TaskDataset(np.zeros((0, 4)), np.zeros(0, dtype=int), (0, 1))
        with pytest.raises(ValueError):
            tasks.evaluate(arch, nn.init_weights(arch, 0), ds)


class TestMetrics:
    def test_aac_constant(self):
        A = np.full((3, 3), 0.5)
        assert tasks.aac(A) == pytest.approx(0.5)

    def test_aac_hand_case(self):
        A = tasks.empty_accuracy_matrix(2)
        A[1] = [1.0, 0.0]
        assert tasks.aac(A) == pytest.approx(0.5)

    def test_aac_incomplete(self):
        with pytest.raises(ValueError):
            tasks.aac(tasks.empty_accuracy_matrix(2))

    def test_aiac(self):
        assert tasks.aiac([0.9, 0.6, 0.3]) == pytest.approx(0.6)
        with pytest.raises(ValueError):
            tasks.aiac([])

    def test_joint_beats_finetuning(self):
        # forgetting exists: 3 seeds on an interfering 2-D regime
        arch = nn.ArchSpec(2, (16, 8), (2,) * 3, "multi")
        joint, ft = [], []
        for seed in range(3):
            seq = tasks.make_blob_sequence(3, 2, 60, 2, spread=0.5, seed=seed)
            cfg = trainer.TrainConfig(loss=LossSpec(Method.EWC, Mode.FINETUNE),
                                      seed=seed, max_epochs=60)
            wj = trainer.train_joint(arch, seq, cfg)
            joint.append(np.mean([tasks.evaluate(arch, wj, tr.test)
                                  for tr in seq.tasks]))
            ft.append(trainer.run_sequence(arch, seq, cfg).aac)
        assert np.mean(joint) >= np.mean(ft)


class TestCsvRoundTrip:
    def test_dataset_round_trip(self, tmp_path, rng):
        ds = tasks.TaskDataset(rng.normal(size=(7, 3)),
                               rng.integers(2, 4, size=7), (2, 3),
                               task_id=1, split="val")
        path = tmp_path / "ds.csv"
        tasks.save_csv(ds, str(path))
        back = tasks.load_csv(str(path), task_id=1, split="val",
                              class_range=(2, 3))
        assert np.array_equal(back.inputs, ds.inputs)
        assert np.array_equal(back.labels, ds.labels)

    def test_sequence_round_trip(self, tmp_path):
        seq = make_seq(T=2)
        tasks.save_sequence_csv(seq, str(tmp_path))
        back = tasks.load_sequence_csv(str(tmp_path), 2, 2)
        for a, b in zip(seq.tasks, back.tasks):
            for split in ("train", "val", "test"):
                assert np.array_equal(a.get(split).inputs, b.get(split).inputs)
                assert np.array_equal(a.get(split).labels, b.get(split).labels)

    def test_header_validation(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ValueError):
            tasks.load_csv(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            tasks.load_sequence_csv(str(tmp_path), 2, 2)
