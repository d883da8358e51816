"""Streaming glycaemic statistics, cohort aggregation and target evaluation.

Nothing here stores a trajectory: each participant is summarised by a
:class:`ParticipantStats` accumulator (Welford moments, range counts, a fixed
histogram and insulin totals) that can be merged associatively.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, fields
from typing import Iterable, Optional

import numpy as np

from vctrial.units import MGDL_PER_MMOLL, MINUTES_PER_DAY

HIST_BIN_WIDTH = 0.1  # mmol/L
HIST_MAX = 30.0
N_HIST_BINS = int(round(HIST_MAX / HIST_BIN_WIDTH))  # plus one overflow bin
TDD_BIN_WIDTH = 2.0  # U/day
DEFAULT_TITRATION = 4 * 7 * 1440.0


class RangeLabel(enum.IntEnum):
    L2_HYPO = 0  # [0, 3)
    L1_HYPO = 1  # [3, 3.9)
    NORMO = 2  # [3.9, 10]
    L1_HYPER = 3  # (10, 13.9]
    L2_HYPER = 4  # (13.9, inf)


def classify(y: float) -> RangeLabel:
    if y < 3.0:
        return RangeLabel.L2_HYPO
    if y < 3.9:
        return RangeLabel.L1_HYPO
    if y <= 10.0:
        return RangeLabel.NORMO
    if y <= 13.9:
        return RangeLabel.L1_HYPER
    return RangeLabel.L2_HYPER


def classify_many(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    return ((y >= 3.0).astype(np.int64) + (y >= 3.9) + (y > 10.0) + (y > 13.9))


def _hist_bins(y: np.ndarray) -> np.ndarray:
    return np.minimum(np.floor(np.asarray(y) / HIST_BIN_WIDTH), N_HIST_BINS).astype(np.int64)


@dataclass
class ParticipantStats:
    participant_id: int = -1
    titration_duration: float = DEFAULT_TITRATION
    n_samples: int = 0
    mean: float = 0.0
    m2: float = 0.0
    min_cgm: float = math.inf
    max_cgm: float = -math.inf
    range_counts: np.ndarray = field(default_factory=lambda: np.zeros(5, dtype=np.int64))
    histogram: np.ndarray = field(
        default_factory=lambda: np.zeros(N_HIST_BINS + 1, dtype=np.int64))
    basal_insulin_total: float = 0.0
    bolus_insulin_total: float = 0.0
    minutes_counted: float = 0.0
    titration_excluded: bool = False

    def update(self, y: float, t: float, basal_units: float = 0.0, bolus_units: float = 0.0,
               period: float = 5.0) -> "ParticipantStats":
        """Add one CGM sample (mmol/L) taken at ``t`` and the insulin delivered over it.

        Samples and doses before the end of titration are dropped.
        """
        if t < self.titration_duration:
            self.titration_excluded = True
            return self
        y = float(y)
        self.n_samples += 1
        delta = y - self.mean
        self.mean += delta / self.n_samples
        self.m2 += delta * (y - self.mean)
        if y < self.min_cgm:
            self.min_cgm = y
        if y > self.max_cgm:
            self.max_cgm = y
        self.range_counts[classify(y)] += 1
        self.histogram[min(int(math.floor(y / HIST_BIN_WIDTH)), N_HIST_BINS)] += 1
        self.basal_insulin_total += basal_units
        self.bolus_insulin_total += bolus_units
        self.minutes_counted += period
        return self

    def update_many(self, y, t, basal_units=None, bolus_units=None,
                    period: float = 5.0) -> "ParticipantStats":
        """Vectorised :meth:`update` for a block of consecutive samples."""
        y = np.asarray(y, dtype=float)
        t = np.asarray(t, dtype=float)
        keep = t >= self.titration_duration
        if not keep.all():
            self.titration_excluded = True
        y = y[keep]
        if y.size == 0:
            return self
        block = ParticipantStats(self.participant_id, self.titration_duration)
        block.n_samples = int(y.size)
        block.mean = float(y.mean())
        block.m2 = float(np.sum((y - block.mean) ** 2))
        block.min_cgm = float(y.min())
        block.max_cgm = float(y.max())
        block.range_counts = np.bincount(classify_many(y), minlength=5).astype(np.int64)
        block.histogram = np.bincount(_hist_bins(y), minlength=N_HIST_BINS + 1).astype(np.int64)
        if basal_units is not None:
            block.basal_insulin_total = float(np.sum(np.asarray(basal_units)[keep]))
        if bolus_units is not None:
            block.bolus_insulin_total = float(np.sum(np.asarray(bolus_units)[keep]))
        block.minutes_counted = period * y.size
        merged = merge(self, block)
        for f in fields(self):
            setattr(self, f.name, getattr(merged, f.name))
        return self

    @property
    def days_counted(self) -> float:
        return self.minutes_counted / MINUTES_PER_DAY

    @property
    def variance(self) -> float:
        """Sample (n - 1) variance."""
        return self.m2 / (self.n_samples - 1) if self.n_samples > 1 else 0.0

    @property
    def sd(self) -> float:
        return math.sqrt(max(self.variance, 0.0))

    def copy(self) -> "ParticipantStats":
        return merge(self, ParticipantStats(self.participant_id, self.titration_duration))


def merge(a: ParticipantStats, b: ParticipantStats) -> ParticipantStats:
    """Associative, commutative combination (Chan et al. pairwise update for the moments)."""
    out = ParticipantStats(
        participant_id=a.participant_id if a.participant_id == b.participant_id else -1,
        titration_duration=a.titration_duration)
    n = a.n_samples + b.n_samples
    if a.n_samples == 0:
        out.mean, out.m2 = b.mean, b.m2
    elif b.n_samples == 0:
        out.mean, out.m2 = a.mean, a.m2
    else:
        delta = b.mean - a.mean
        out.mean = (a.n_samples * a.mean + b.n_samples * b.mean) / n
        out.m2 = a.m2 + b.m2 + delta * delta * a.n_samples * b.n_samples / n
    out.n_samples = n
    out.min_cgm = min(a.min_cgm, b.min_cgm)
    out.max_cgm = max(a.max_cgm, b.max_cgm)
    out.range_counts = a.range_counts + b.range_counts
    out.histogram = a.histogram + b.histogram
    out.basal_insulin_total = a.basal_insulin_total + b.basal_insulin_total
    out.bolus_insulin_total = a.bolus_insulin_total + b.bolus_insulin_total
    out.minutes_counted = a.minutes_counted + b.minutes_counted
    out.titration_excluded = a.titration_excluded or b.titration_excluded
    return out


def mean_mgdl(stats: ParticipantStats) -> float:
    return stats.mean * MGDL_PER_MMOLL


def cv(stats: ParticipantStats) -> float:
    """Coefficient of variation in percent (sample SD)."""
    if stats.n_samples == 0 or stats.mean == 0:
        raise ZeroDivisionError("CV undefined for zero mean")
    return 100.0 * stats.sd / stats.mean


def gmi_from_mgdl(mean_glucose_mgdl: float) -> float:
    return 3.31 + 0.02392 * mean_glucose_mgdl


def gmi(stats: ParticipantStats) -> float:
    """Glucose management indicator in percent."""
    return gmi_from_mgdl(mean_mgdl(stats))


def time_fractions(stats: ParticipantStats) -> tuple:
    """``(TBR2, TBR1, TIR, TAR1, TAR2)`` as fractions of the counted samples."""
    if stats.n_samples == 0:
        return (0.0,) * 5
    return tuple(float(c) / stats.n_samples for c in stats.range_counts)


# --- per-participant summary and targets ---------------------------------------

@dataclass(frozen=True)
class SummaryRow:
    id: int
    model: str
    mean_mgdl: float
    gmi: float
    cv: float
    tbr2: float
    tbr1: float
    tir: float
    tar1: float
    tar2: float
    tdd_basal: float
    tdd_bolus: float
    min_cgm: float

    @classmethod
    def from_stats(cls, stats: ParticipantStats, model: str) -> "SummaryRow":
        if stats.n_samples == 0:
            nan = float("nan")
            return cls(stats.participant_id, model, nan, nan, nan, 0.0, 0.0, 0.0, 0.0, 0.0,
                       nan, nan, nan)
        days = stats.days_counted
        return cls(stats.participant_id, model, mean_mgdl(stats), gmi(stats), cv(stats),
                   *time_fractions(stats),
                   stats.basal_insulin_total / days, stats.bolus_insulin_total / days,
                   stats.min_cgm)

    @property
    def fractions(self) -> tuple:
        return (self.tbr2, self.tbr1, self.tir, self.tar1, self.tar2)


SUMMARY_COLUMNS = tuple(f.name for f in fields(SummaryRow))

TARGETS = (
    ("mean_glucose", "Average glucose", "< 154 mg/dL"),
    ("gmi", "GMI", "< 7%"),
    ("cv", "GV", "<= 36%"),
    ("tar2", "TAR (level 2)", "< 5%"),
    ("tar12", "TAR (level 1 and 2)", "< 25%"),
    ("tir", "TIR (normoglycemia)", "> 70%"),
    ("tbr12", "TBR (level 1 and 2)", "< 4%"),
    ("tbr2", "TBR (level 2)", "< 1%"),
)


def evaluate_targets(row: SummaryRow) -> dict:
    """Consensus glycaemic targets, with the strict/non-strict comparisons as tabulated."""
    met = {
        "mean_glucose": row.mean_mgdl < 154.0,
        "gmi": row.gmi < 7.0,
        "cv": row.cv <= 36.0,
        "tar2": row.tar2 < 0.05,
        "tar12": row.tar1 + row.tar2 < 0.25,
        "tir": row.tir > 0.70,
        "tbr12": row.tbr1 + row.tbr2 < 0.04,
        "tbr2": row.tbr2 < 0.01,
    }
    met["all_targets"] = all(met.values())
    return met


# --- cohort ----------------------------------------------------------------

@dataclass
class CohortStats:
    model: str
    rows: list = field(default_factory=list)
    pooled: ParticipantStats = field(default_factory=ParticipantStats)

    def add(self, stats: ParticipantStats):
        self.rows.append(SummaryRow.from_stats(stats, self.model))
        self.pooled = merge(self.pooled, stats)
        return self

    @classmethod
    def from_participants(cls, stats: Iterable[ParticipantStats], model: str) -> "CohortStats":
        cohort = cls(model)
        for s in sorted(stats, key=lambda s: s.participant_id):
            cohort.add(s)
        return cohort

    @property
    def valid_rows(self) -> list:
        return [r for r in self.rows if not math.isnan(r.mean_mgdl)]

    def attainment(self) -> dict:
        rows = self.valid_rows
        keys = [k for k, _, _ in TARGETS] + ["all_targets"]
        if not rows:
            return {k: float("nan") for k in keys}
        hits = [evaluate_targets(r) for r in rows]
        return {k: sum(h[k] for h in hits) / len(rows) for k in keys}

    @property
    def worst_case_participant_id(self) -> Optional[int]:
        rows = self.valid_rows
        if not rows:
            return None
        return min(rows, key=lambda r: (r.min_cgm, r.id)).id


def merge_cohorts(a: CohortStats, b: CohortStats) -> CohortStats:
    out = CohortStats(a.model if a.model == b.model else f"{a.model}+{b.model}")
    out.rows = sorted(a.rows + b.rows, key=lambda r: r.id)
    out.pooled = merge(a.pooled, b.pooled)
    return out


def _box(values) -> dict:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return {}
    q1, med, q3 = (float(x) for x in np.percentile(v, [25, 50, 75]))
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    return {
        "q1": q1, "median": med, "q3": q3,
        "whisker_low": float(inside.min()), "whisker_high": float(inside.max()),
        "n_outliers": int(v.size - inside.size),
        "min": float(v.min()), "max": float(v.max()),
    }


def _tdd_hist(values) -> dict:
    v = np.asarray(values, dtype=float)
    top = max(TDD_BIN_WIDTH, math.ceil((v.max() if v.size else 0.0) / TDD_BIN_WIDTH + 1e-12)
              * TDD_BIN_WIDTH)
    edges = np.arange(0.0, top + TDD_BIN_WIDTH / 2, TDD_BIN_WIDTH)
    if len(edges) < 2:
        edges = np.array([0.0, TDD_BIN_WIDTH])
    counts, _ = np.histogram(v, bins=edges)
    return {"bin_width": TDD_BIN_WIDTH, "edges": edges.tolist(), "counts": counts.tolist()}


RANGE_KEYS = ("tbr2", "tbr1", "tir", "tar1", "tar2")


def cohort_report(cohort: CohortStats) -> dict:
    """Report data: mean and worst-case time in ranges, box plots, TDD histograms,
    the pooled CGM distribution and target attainment."""
    rows = cohort.valid_rows
    report = {"model": cohort.model, "n_participants": len(rows)}
    if rows:
        fr = np.array([r.fractions for r in rows])
        report["mean_time_in_ranges"] = dict(zip(RANGE_KEYS, fr.mean(axis=0).tolist()))
        worst_id = cohort.worst_case_participant_id
        worst = next(r for r in rows if r.id == worst_id)
        report["worst_case"] = {"id": worst.id, "min_cgm": worst.min_cgm,
                                "time_in_ranges": dict(zip(RANGE_KEYS, worst.fractions))}
        report["boxplots"] = {k: _box(fr[:, i]) for i, k in enumerate(RANGE_KEYS)}
        report["tdd_histograms"] = {"basal": _tdd_hist([r.tdd_basal for r in rows]),
                                    "bolus": _tdd_hist([r.tdd_bolus for r in rows])}
    else:
        report["mean_time_in_ranges"] = None
        report["worst_case"] = None
        report["boxplots"] = {}
        report["tdd_histograms"] = {}
    hist = cohort.pooled.histogram
    total = int(hist.sum())
    cdf = (np.cumsum(hist) / total).tolist() if total else []
    report["cgm_distribution"] = {
        "bin_width": HIST_BIN_WIDTH,
        "upper_edges": [round((i + 1) * HIST_BIN_WIDTH, 10) for i in range(N_HIST_BINS)]
        + [None],
        "counts": hist.tolist(),
        "cdf": cdf,
    }
    report["targets"] = cohort.attainment()
    pooled = cohort.pooled
    report["pooled"] = {
        "n_samples": pooled.n_samples,
        "mean_mgdl": mean_mgdl(pooled) if pooled.n_samples else None,
        "min_cgm": pooled.min_cgm if pooled.n_samples else None,
        "max_cgm": pooled.max_cgm if pooled.n_samples else None,
    }
    return report
