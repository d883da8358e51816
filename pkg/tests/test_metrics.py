import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vctrial.metrics import (HIST_BIN_WIDTH, CohortStats, ParticipantStats, RangeLabel,
                             SummaryRow, classify, classify_many, cohort_report, cv,
                             evaluate_targets, gmi, gmi_from_mgdl, mean_mgdl, merge,
                             merge_cohorts, time_fractions)

FIELDS = ("n_samples", "mean", "m2", "min_cgm", "max_cgm", "basal_insulin_total",
          "bolus_insulin_total", "minutes_counted")


def stats_of(ys, pid=0, titration=0.0):
    s = ParticipantStats(pid, titration)
    for i, y in enumerate(ys):
        s.update(y, titration + 5.0 * i, 0.01, 0.0)
    return s


def assert_close(a, b, rel=1e-10):
    for name in FIELDS:
        x, y = getattr(a, name), getattr(b, name)
        assert x == pytest.approx(y, rel=rel, abs=1e-9), name
    np.testing.assert_array_equal(a.range_counts, b.range_counts)
    np.testing.assert_array_equal(a.histogram, b.histogram)


def row(**kw):
    base = dict(id=0, model="hovorka", mean_mgdl=108.0, gmi=5.9, cv=10.0, tbr2=0.0, tbr1=0.0,
                tir=1.0, tar1=0.0, tar2=0.0, tdd_basal=10.0, tdd_bolus=10.0, min_cgm=5.0)
    base.update(kw)
    return SummaryRow(**base)


class TestClassify:
    @pytest.mark.parametrize("y,label", [
        (0.0, RangeLabel.L2_HYPO), (2.999, RangeLabel.L2_HYPO), (3.0, RangeLabel.L1_HYPO),
        (3.8999, RangeLabel.L1_HYPO), (3.9, RangeLabel.NORMO), (10.0, RangeLabel.NORMO),
        (10.0001, RangeLabel.L1_HYPER), (13.9, RangeLabel.L1_HYPER),
        (13.9001, RangeLabel.L2_HYPER), (40.0, RangeLabel.L2_HYPER)])
    def test_boundaries(self, y, label):
        assert classify(y) is label
        assert classify_many(np.array([y]))[0] == label


class TestUpdate:
    def test_first_sample(self):
        s = stats_of([6.0])
        assert (s.mean, s.m2, s.n_samples) == (6.0, 0.0, 1)

    def test_hand_arithmetic(self):
        s = stats_of([4.0, 6.0, 8.0])
        assert s.mean == 6.0
        assert s.sd == pytest.approx(2.0, rel=1e-15)

    def test_invariants(self):
        s = stats_of(np.random.default_rng(1).uniform(0, 35, 500))
        assert s.range_counts.sum() == s.n_samples == s.histogram.sum()
        assert s.m2 >= 0

    def test_titration_exclusion(self):
        s = ParticipantStats(0, titration_duration=100.0)
        s.update(2.0, 95.0, 1.0, 1.0)
        assert s.n_samples == 0 and s.basal_insulin_total == 0.0 and s.titration_excluded
        s.update(6.0, 100.0, 1.0, 2.0)
        assert s.n_samples == 1 and s.min_cgm == 6.0
        assert (s.basal_insulin_total, s.bolus_insulin_total) == (1.0, 2.0)

    def test_streaming_matches_update_many(self):
        rng = np.random.default_rng(2)
        y = rng.uniform(2, 20, 1000)
        t = 5.0 * np.arange(1000) - 500.0
        a = ParticipantStats(0, 0.0)
        for yi, ti in zip(y, t):
            a.update(yi, ti, 0.01, 0.0)
        b = ParticipantStats(0, 0.0)
        for lo in range(0, 1000, 137):
            sl = slice(lo, lo + 137)
            b.update_many(y[sl], t[sl], np.full(y[sl].size, 0.01), np.zeros(y[sl].size))
        assert_close(a, b)
        assert a.titration_excluded and b.titration_excluded

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0.0, 40.0), min_size=2, max_size=300))
    def test_streaming_vs_batch(self, ys):
        s = stats_of(ys)
        y = np.array(ys)
        assert s.mean == pytest.approx(y.mean(), rel=1e-10, abs=1e-12)
        assert s.sd == pytest.approx(y.std(ddof=1), rel=1e-9, abs=1e-9)
        assert tuple(s.range_counts) == tuple(np.bincount(classify_many(y), minlength=5))

    def test_histogram_mean(self):
        y = np.random.default_rng(3).uniform(2, 25, 5000)
        s = stats_of(y)
        centres = (np.arange(s.histogram.size) + 0.5) * HIST_BIN_WIDTH
        assert abs((s.histogram * centres).sum() / s.n_samples - s.mean) <= 0.05


class TestMerge:
    def test_identity(self):
        a = stats_of([5.0, 7.0, 12.0])
        assert_close(merge(a, ParticipantStats(0, 0.0)), a)
        assert_close(merge(ParticipantStats(0, 0.0), a), a)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0.0, 40.0), min_size=1, max_size=200), st.data())
    def test_split(self, ys, data):
        k = data.draw(st.integers(0, len(ys)))
        whole = stats_of(ys)
        a = stats_of(ys[:k])
        b = ParticipantStats(0, 0.0)
        for i, y in enumerate(ys[k:]):
            b.update(y, 5.0 * (k + i), 0.01, 0.0)
        assert_close(merge(a, b), whole, rel=1e-9)

    def test_commutative_and_associative(self):
        rng = np.random.default_rng(4)
        a, b, c = (stats_of(rng.uniform(2, 20, n)) for n in (10, 55, 300))
        assert_close(merge(a, b), merge(b, a), rel=1e-14)
        assert_close(merge(merge(a, b), c), merge(a, merge(b, c)))


class TestDerived:
    def test_constant_cv(self):
        assert cv(stats_of([7.0] * 10)) == 0.0

    def test_zero_mean_cv(self):
        with pytest.raises(ZeroDivisionError):
            cv(stats_of([0.0, 0.0]))

    def test_gmi(self):
        assert gmi_from_mgdl(154.0) == pytest.approx(6.99368, abs=1e-9)
        assert gmi(stats_of([6.0])) == pytest.approx(3.31 + 0.02392 * 108.096)

    def test_mgdl(self):
        assert mean_mgdl(stats_of([6.0])) == pytest.approx(108.096, rel=1e-12)

    def test_fractions(self):
        assert time_fractions(stats_of([6.0] * 5)) == (0, 0, 1, 0, 0)
        ys = [2.0, 3.5] + [6.0] * 6 + [12.0, 15.0]
        assert time_fractions(stats_of(ys)) == pytest.approx((0.1, 0.1, 0.6, 0.1, 0.1))
        s = stats_of(np.random.default_rng(5).uniform(0, 20, 997))
        assert abs(sum(time_fractions(s)) - 1.0) < 1e-12

    def test_summary_row_empty(self):
        r = SummaryRow.from_stats(ParticipantStats(3), "uvapadova")
        assert r.id == 3 and math.isnan(r.mean_mgdl)

    def test_tdd(self):
        s = ParticipantStats(0, 0.0)
        for i in range(288):
            s.update(6.0, 5.0 * i, 0.05, 0.1 if i % 96 == 0 else 0.0)
        r = SummaryRow.from_stats(s, "hovorka")
        assert r.tdd_basal == pytest.approx(14.4)
        assert r.tdd_bolus == pytest.approx(0.3)


class TestTargets:
    def test_perfect(self):
        r = SummaryRow.from_stats(stats_of([6.0] * 100), "hovorka")
        assert all(evaluate_targets(r).values())

    @pytest.mark.parametrize("field,value,key,met", [
        ("mean_mgdl", 154.0, "mean_glucose", False),
        ("gmi", 7.0, "gmi", False),
        ("cv", 36.0, "cv", True),
        ("cv", 36.0001, "cv", False),
        ("tar2", 0.05, "tar2", False),
        ("tir", 0.70, "tir", False),
        ("tir", 0.7001, "tir", True),
        ("tbr2", 0.01, "tbr2", False),
    ])
    def test_boundaries(self, field, value, key, met):
        res = evaluate_targets(row(**{field: value}))
        assert res[key] is met
        assert res["all_targets"] is (met and all(v for k, v in res.items()
                                                  if k not in (key, "all_targets")))

    def test_combined_bands(self):
        assert not evaluate_targets(row(tar1=0.2, tar2=0.05, tir=0.75))["tar12"]
        assert evaluate_targets(row(tbr1=0.02, tbr2=0.0099))["tbr12"]
        assert not evaluate_targets(row(tbr1=0.03, tbr2=0.01))["tbr12"]


class TestCohort:
    def test_single(self):
        s = stats_of([2.0, 6.0, 6.0, 12.0])
        rep = cohort_report(CohortStats.from_participants([s], "hovorka"))
        assert tuple(rep["mean_time_in_ranges"].values()) == pytest.approx(time_fractions(s))

    def test_worst_case(self):
        a = stats_of([2.5, 6.0], pid=0)
        b = stats_of([3.5, 6.0], pid=1)
        c = CohortStats.from_participants([b, a], "hovorka")
        assert c.worst_case_participant_id == 0
        assert cohort_report(c)["worst_case"]["id"] == 0

    def test_cdf(self):
        rng = np.random.default_rng(6)
        c = CohortStats.from_participants(
            [stats_of(rng.uniform(1, 35, 200), pid=i) for i in range(5)], "hovorka")
        cdf = np.array(cohort_report(c)["cgm_distribution"]["cdf"])
        assert np.all(np.diff(cdf) >= 0) and cdf[-1] == pytest.approx(1.0)

    def test_attainment_bounds(self):
        rng = np.random.default_rng(7)
        c = CohortStats.from_participants(
            [stats_of(rng.normal(m, 2, 300), pid=i) for i, m in enumerate((5, 7, 9, 11))],
            "uvapadova")
        assert all(0.0 <= v <= 1.0 for v in c.attainment().values())

    def test_merge_cohorts(self):
        rng = np.random.default_rng(8)
        parts = [stats_of(rng.uniform(3, 15, 100), pid=i) for i in range(6)]
        whole = CohortStats.from_participants(parts, "hovorka")
        m = merge_cohorts(CohortStats.from_participants(parts[3:], "hovorka"),
                          CohortStats.from_participants(parts[:3], "hovorka"))
        assert m.rows == whole.rows
        assert_close(m.pooled, whole.pooled)

    def test_box(self):
        c = CohortStats.from_participants(
            [stats_of([6.0] * 9 + [2.0] * k, pid=k) for k in range(5)], "hovorka")
        box = cohort_report(c)["boxplots"]["tbr2"]
        assert box["q1"] <= box["median"] <= box["q3"]
        assert box["whisker_low"] >= box["min"]

    def test_empty(self):
        rep = cohort_report(CohortStats("hovorka"))
        assert rep["n_participants"] == 0 and rep["worst_case"] is None
