import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import pair_count_auroc

from capsosr.protocol import (
    MetricsReport,
    SplitSpec,
    auroc,
    closed_set_accuracy,
    dump_splits,
    load_splits,
    macro_f1,
    make_splits,
    openness,
    save_splits,
    synth_mnist_noise,
    synth_noise_dataset,
)


class TestOpenness:
    @pytest.mark.parametrize(
        "K,M,expect", [(6, 10, 0.2254), (4, 14, 0.4654), (4, 54, 0.7278), (20, 200, 0.6837)]
    )
    def test_reference_values(self, K, M, expect):
        # reference percentages are truncated, not rounded, to two decimals
        value = openness(K, M)
        assert math.floor(value * 1e4) / 1e4 == expect
        assert abs(value - expect) < 1e-4

    def test_monotone(self):
        assert openness(3, 10) > openness(4, 10)
        assert openness(4, 20) > openness(4, 10)
        assert openness(10, 10) == 0.0

    @pytest.mark.parametrize("K,M", [(0, 10), (11, 10)])
    def test_invalid(self, K, M):
        with pytest.raises(ValueError):
            openness(K, M)


class TestSplits:
    def test_partition(self):
        for s in make_splits("mnist", 5, 6, seed=3):
            assert len(s.known) == 6 and len(s.unknown) == 4
            assert sorted(s.known + s.unknown) == list(range(10))
            assert s.openness == pytest.approx(openness(6, 10))

    def test_seeded_bytes(self, tmp_path):
        a = save_splits(make_splits("mnist", seed=7), tmp_path / "a.json").read_bytes()
        b = save_splits(make_splits("mnist", seed=7), tmp_path / "b.json").read_bytes()
        assert a == b
        assert dump_splits(make_splits("mnist", seed=8)) != a.decode()

    def test_roundtrip(self, tmp_path):
        splits = make_splits("cifar10", 3, 6, seed=1)
        assert load_splits(save_splits(splits, tmp_path / "s.json")) == splits

    def test_schema(self):
        doc = json.loads(dump_splits(make_splits("mnist", 2)))
        assert set(doc) == {"dataset", "seed", "splits"}
        assert set(doc["splits"][0]) == {"known", "unknown"}

    def test_invalid(self):
        with pytest.raises(ValueError):
            make_splits("mnist", n_known=10)
        with pytest.raises(ValueError):
            make_splits("unknown-set")
        with pytest.raises(ValueError):
            SplitSpec("mnist", 0, [1, 2], [2, 3])

    def test_explicit_classes(self):
        s = make_splits("custom", 1, 2, classes=[5, 7, 9])[0]
        assert sorted(s.known + s.unknown) == [5, 7, 9]


class TestSynthesis:
    def test_noise_statistics(self):
        x = synth_noise_dataset(10_000, seed=0)
        assert x.shape == (10_000, 1, 28, 28) and x.dtype == np.float32
        assert abs(x.mean() - 0.5) < 0.01
        assert x.min() >= 0 and x.max() <= 1

    def test_noise_seeded(self):
        assert synth_noise_dataset(5, seed=1).tobytes() == synth_noise_dataset(5, seed=1).tobytes()
        assert synth_noise_dataset(5, seed=1).tobytes() != synth_noise_dataset(5, seed=2).tobytes()

    def test_noise_invalid(self):
        with pytest.raises(ValueError):
            synth_noise_dataset(0)

    def test_mnist_noise(self):
        rng = np.random.default_rng(0)
        digits = rng.random((4, 1, 6, 6)).astype(np.float32)
        noise = synth_noise_dataset(4, (1, 6, 6), seed=0)
        np.testing.assert_array_equal(synth_mnist_noise(digits, np.zeros_like(digits)), digits)
        np.testing.assert_array_equal(synth_mnist_noise(np.zeros_like(noise), noise), noise)
        out = synth_mnist_noise(digits, noise)
        assert out.min() >= 0 and out.max() <= 1
        with pytest.raises(ValueError):
            synth_mnist_noise(digits, noise[:2])


class TestAUROC:
    def test_perfect(self):
        assert auroc([0.9, 0.8], [0.1, 0.2]) == 1.0

    def test_all_ties(self):
        assert auroc([0.3, 0.5, 0.5], [0.5, 0.3, 0.5]) == 0.5

    def test_hand_case(self):
        assert auroc([0.9, 0.3], [0.5, 0.1]) == 0.75

    def test_empty(self):
        with pytest.raises(ValueError):
            auroc([], [1.0])

    def test_pair_count_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a = rng.integers(0, 6, rng.integers(1, 30)).astype(float)
            b = rng.integers(0, 6, rng.integers(1, 30)).astype(float)
            assert abs(auroc(a, b) - pair_count_auroc(a, b)) <= 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=20), st.lists(st.floats(-100, 100), min_size=1, max_size=20))
    def test_symmetry_and_monotone_invariance(self, a, b):
        assert auroc(a, b) + auroc(b, a) == pytest.approx(1.0, abs=1e-12)
        assert auroc(2 * np.array(a), 2 * np.array(b)) == pytest.approx(auroc(a, b), abs=1e-12)


class TestMacroF1:
    def test_identity(self):
        y = np.array([0, 1, 2, 2])
        assert macro_f1(y, y, 3)[0] == 1.0

    def test_hand_example(self):
        macro, per, _ = macro_f1([0, 0, 1, 1, 2, 2], [0, 1, 1, 1, 2, 0], 3)
        np.testing.assert_allclose(per, [0.5, 0.8, 2 / 3])
        assert round(macro, 4) == 0.6556

    def test_degenerate(self):
        macro, per, deg = macro_f1([0, 1], [0, 1], 3)
        assert deg.tolist() == [False, False, True]
        assert per[2] == 0.0 and macro == pytest.approx(2 / 3)

    def test_zero_support_but_predicted_not_degenerate(self):
        _, per, deg = macro_f1([0, 1], [0, 2], 3)
        assert not deg[2] and per[2] == 0.0

    def test_invariances(self):
        rng = np.random.default_rng(1)
        t, p = rng.integers(0, 4, 60), rng.integers(0, 4, 60)
        macro, per, _ = macro_f1(t, p, 4)
        order = rng.permutation(60)
        assert macro_f1(t[order], p[order], 4)[0] == pytest.approx(macro)
        relabel = np.array([2, 0, 3, 1])
        m2, per2, _ = macro_f1(relabel[t], relabel[p], 4)
        assert m2 == pytest.approx(macro)
        np.testing.assert_allclose(per2[relabel], per)

    def test_invalid(self):
        with pytest.raises(ValueError):
            macro_f1([0, 3], [0, 1], 3)
        with pytest.raises(ValueError):
            macro_f1([0], [0, 1], 3)


class TestMisc:
    def test_accuracy(self):
        assert closed_set_accuracy([0, 1, 2, 2], [0, 1, 1, 2]) == 0.75
        with pytest.raises(ValueError):
            closed_set_accuracy([], [])

    def test_report_json(self):
        rep = MetricsReport(1.0, 0.5, 0.9, [0.5, 0.5], 3, 2)
        assert json.loads(rep.to_json())["auroc"] == 1.0
