"""Tests for the robustness metrics, pinned by brute-force enumeration."""

import itertools
import math

import numpy as np
import pytest

from cib import metrics as R
from cib.metrics import QuestionGroup, consensus_score, flips
from cib.model import ToyModel, train_model
from cib.objective import CIBConfig
from cib.task import TaskConfig, generate_dataset


def group(flags, group_id=0):
    records = [{"is_original": i == 0, "correct": bool(f)} for i, f in enumerate(flags)]
    return QuestionGroup(group_id=group_id, records=records)


def cs_enumeration(flags, m):
    """Brute-force: enumerate all size-m subsets, count the all-correct ones."""
    subsets = list(itertools.combinations(flags, m))
    return sum(all(s) for s in subsets) / len(subsets)


class TestConsensusScore:
    def test_hand_example(self):
        g = group([1, 1, 0, 1])
        assert consensus_score([g], 2) == pytest.approx(0.5)
        assert consensus_score([g], 1) == pytest.approx(0.75)
        assert consensus_score([g], 3) == pytest.approx(0.25)
        assert consensus_score([g], 4) == pytest.approx(0.0)

    def test_all_correct_is_one(self):
        g = group([1, 1, 1, 1, 1])
        for m in range(1, 6):
            assert consensus_score([g], m) == 1.0

    def test_matches_enumeration_on_random_groups(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            size = int(rng.integers(1, 9))
            flags = rng.integers(0, 2, size=size).tolist()
            g = group(flags)
            m = int(rng.integers(1, size + 1))
            assert consensus_score([g], m) == pytest.approx(
                cs_enumeration(flags, m), abs=1e-12)

    def test_mean_over_groups(self):
        gs = [group([1, 1], 0), group([1, 0], 1)]
        assert consensus_score(gs, 1) == pytest.approx((1.0 + 0.5) / 2)

    def test_nonincreasing_in_m(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            size = int(rng.integers(2, 9))
            gs = [group(rng.integers(0, 2, size=size).tolist(), g) for g in range(3)]
            values = [consensus_score(gs, m) for m in range(1, size + 1)]
            assert all(a >= b - 1e-12 for a, b in zip(values, values[1:]))

    def test_rejects_m_exceeding_group_size(self):
        with pytest.raises(ValueError):
            consensus_score([group([1, 0])], 3)

    def test_group_requires_single_original(self):
        with pytest.raises(ValueError):
            QuestionGroup(group_id=0, records=[{"is_original": False, "correct": True}])

    def test_counting_path_beyond_enumeration_size(self):
        # Large groups exercise the closed form where enumeration is
        # impractical; spot-check against the hypergeometric identity.
        g = group([1] * 20 + [0] * 10)
        m = 5
        expected = math.comb(20, 5) / math.comb(30, 5)
        assert consensus_score([g], m) == pytest.approx(expected, abs=1e-12)


class TestFlips:
    def test_iv_direct_count(self):
        assert flips(["a", "b", "c"], ["a", "d", "c"], "IV") == pytest.approx(1 / 3)
        assert flips(["a", "b"], ["a", "b"], "IV") == 0.0

    def test_iv_invariant_under_relabeling(self):
        rng = np.random.default_rng(2)
        orig = rng.integers(0, 5, size=40)
        edit = rng.integers(0, 5, size=40)
        base = flips(orig.tolist(), edit.tolist(), "IV")
        relabel = {i: (i * 7 + 3) % 11 for i in range(5)}
        assert flips([relabel[o] for o in orig], [relabel[e] for e in edit],
                     "IV") == pytest.approx(base)

    def test_cv_one_less_rule(self):
        # First pair obeys edited == original - 1, the second does not.
        assert flips([3, 2], [2, 2], "CV") == pytest.approx(0.5)
        assert flips([3, 2, 1], [2, 1, 0], "CV") == 0.0

    def test_cv_rejects_non_integer(self):
        with pytest.raises(ValueError):
            flips([1.5], [0.5], "CV")

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            flips([1, 2], [1], "IV")

    def test_matches_direct_counting_on_random_lists(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            n = int(rng.integers(1, 30))
            orig = rng.integers(0, 6, size=n)
            edit = rng.integers(0, 6, size=n)
            manual = sum(int(o != e) for o, e in zip(orig, edit)) / n
            assert flips(orig.tolist(), edit.tolist(), "IV") == pytest.approx(manual)
            manual_cv = sum(int(int(e) != int(o) - 1) for o, e in zip(orig, edit)) / n
            assert flips(orig.tolist(), edit.tolist(), "CV") == pytest.approx(manual_cv)


@pytest.fixture(scope="module")
def trained():
    cfg = TaskConfig(n_train=256, n_eval=64)
    ds = generate_dataset(cfg, seed=1)
    model = ToyModel(cfg, np.random.default_rng(np.random.SeedSequence(1, spawn_key=(7,))))
    train_model(model, ds, CIBConfig(beta=0.0, seed=1, epochs=2))
    return cfg, ds, model


class TestPerformanceGap:
    def test_identical_splits_have_zero_gap(self, trained):
        _, ds, model = trained
        report = R.performance_gap(model, ds["clean"], ds["clean"])
        assert report.empirical_gap == 0.0
        assert report.acc_clean == report.acc_perturbed

    def test_gap_symmetric_in_split_order(self, trained):
        _, ds, model = trained
        a = R.performance_gap(model, ds["clean"], ds["counterexample"])
        b_acc = R.performance_gap(model, ds["counterexample"], ds["clean"])
        assert a.empirical_gap == pytest.approx(b_acc.empirical_gap)

    def test_unpaired_splits_rejected(self, trained):
        _, ds, model = trained
        with pytest.raises(ValueError):
            R.performance_gap(model, ds["clean"], ds["count_clean"])
        with pytest.raises(ValueError):
            R.performance_gap(model, ds["clean"], ds["clean"][:-1])

    def test_mi_terms_recorded_for_both_splits(self, trained):
        _, ds, model = trained
        report = R.performance_gap(model, ds["clean"], ds["counterexample"])
        assert set(report.mi_terms) == {"clean", "perturbed"}
        for side in report.mi_terms.values():
            assert math.isfinite(side["i_xv_tv"]) and math.isfinite(side["d_skl"])


class TestEvaluateRobustness:
    def test_full_report(self, trained):
        _, ds, model = trained
        report = R.evaluate_robustness(model, ds)
        assert set(report.cs) == {1, 2, 3, 4}
        values = [report.cs[m] for m in (1, 2, 3, 4)]
        assert all(a >= b - 1e-12 for a, b in zip(values, values[1:]))
        assert 0.0 <= report.flips_iv <= 1.0
        assert 0.0 <= report.flips_cv <= 1.0
        assert report.empirical_gap == pytest.approx(
            abs(report.acc_clean - report.acc_perturbed))

    def test_report_serializes(self, trained):
        _, ds, model = trained
        d = R.evaluate_robustness(model, ds).to_dict()
        assert set(d["cs"]) == {"1", "2", "3", "4"}
        assert "clean" in d["mi_terms"] and "perturbed" in d["mi_terms"]
