"""Year-long behavioural protocol: seasons, weeks, days and meals."""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from vctrial.models import ModelKind
from vctrial.simcore import NoiseStream, Purpose
from vctrial.units import MINUTES_PER_DAY, MINUTES_PER_WEEK, MMOL_PER_GRAM_GLUCOSE

MEAL_WINDOW = 15.0  # min, uniform delivery
WEEKS_PER_SEASON = 13


class EventKind(str, enum.Enum):
    MEAL = "MEAL"
    SNACK = "SNACK"
    EXERCISE = "EXERCISE"


class SizeClass(str, enum.Enum):
    LARGE = "LARGE"
    MEDIUM = "MEDIUM"
    SMALL = "SMALL"
    SNACK = "SNACK"
    NONE = "NONE"


class DayKind(str, enum.Enum):
    STANDARD = "STANDARD"
    ACTIVE = "ACTIVE"
    MOVIE_NIGHT = "MOVIE_NIGHT"
    LATE_NIGHT = "LATE_NIGHT"


class WeekKind(str, enum.Enum):
    STANDARD = "STANDARD"
    ACTIVE = "ACTIVE"
    VACATION = "VACATION"


class Season(str, enum.Enum):
    WINTER = "WINTER"
    SPRING = "SPRING"
    SUMMER = "SUMMER"
    AUTUMN = "AUTUMN"


GRAMS_PER_KG = {
    SizeClass.LARGE: 1.29,
    SizeClass.MEDIUM: 0.86,
    SizeClass.SMALL: 0.57,
    SizeClass.SNACK: 0.29,
    SizeClass.NONE: 0.0,
}

WEEK_COMPOSITION = {
    WeekKind.STANDARD: {DayKind.STANDARD: 4, DayKind.ACTIVE: 1, DayKind.MOVIE_NIGHT: 1,
                        DayKind.LATE_NIGHT: 1},
    WeekKind.ACTIVE: {DayKind.STANDARD: 3, DayKind.ACTIVE: 3, DayKind.MOVIE_NIGHT: 1,
                      DayKind.LATE_NIGHT: 0},
    WeekKind.VACATION: {DayKind.STANDARD: 5, DayKind.ACTIVE: 0, DayKind.MOVIE_NIGHT: 0,
                        DayKind.LATE_NIGHT: 2},
}

SEASON_COMPOSITION = {
    Season.WINTER: {WeekKind.STANDARD: 6, WeekKind.ACTIVE: 4, WeekKind.VACATION: 3},
    Season.SPRING: {WeekKind.STANDARD: 6, WeekKind.ACTIVE: 6, WeekKind.VACATION: 1},
    Season.SUMMER: {WeekKind.STANDARD: 7, WeekKind.ACTIVE: 3, WeekKind.VACATION: 3},
    Season.AUTUMN: {WeekKind.STANDARD: 9, WeekKind.ACTIVE: 3, WeekKind.VACATION: 1},
}

SEASON_ORDER = (Season.WINTER, Season.SPRING, Season.SUMMER, Season.AUTUMN)
WARM_SEASONS = (Season.SPRING, Season.SUMMER)


@dataclass(frozen=True)
class DaySchedule:
    """Clock times (minutes after midnight) of the day's activities.

    Times past 1440 fall on the next calendar day.
    """

    breakfast: float = 7 * 60
    lunch: float = 12 * 60
    dinner: float = 18 * 60
    evening_snack: float = 21 * 60
    morning_snack: float = 10 * 60
    movie_snack: float = 23 * 60
    late_snacks: tuple = (23 * 60, 25 * 60)
    exercise: tuple = (17 * 60, 17 * 60 + 45)


DEFAULT_SCHEDULE = DaySchedule()


@dataclass(frozen=True)
class ActivityEvent:
    event_id: int
    kind: EventKind
    start: float
    end: float
    true_grams: float
    announced_grams: float
    size_class: SizeClass

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError("event must have start < end")
        if self.true_grams < 0:
            raise ValueError("true_grams must be >= 0")
        if self.kind is EventKind.EXERCISE and self.true_grams != 0:
            raise ValueError("exercise carries no carbohydrate")


@dataclass(frozen=True)
class Protocol:
    protocol_id: str
    duration: float
    events: tuple
    seed: int = 0
    day_kinds: tuple = field(default=(), repr=False)
    week_kinds: tuple = field(default=(), repr=False)

    @property
    def meals(self):
        return tuple(e for e in self.events if e.kind is not EventKind.EXERCISE)

    def total_grams(self) -> float:
        return float(sum(e.true_grams for e in self.events))


def meal_grams(BW: float, size_class) -> float:
    """Carbohydrate content (g) of a meal for body weight ``BW`` (kg)."""
    return GRAMS_PER_KG[SizeClass(size_class)] * BW


def _shuffled(counts: dict, gen: np.random.Generator) -> list:
    items = [kind for kind, n in counts.items() for _ in range(n)]
    order = gen.permutation(len(items))
    return [items[i] for i in order]


def build_week(kind, season, rng) -> list:
    """The week's seven day kinds, ordering shuffled by ``rng``."""
    gen = rng.generator if isinstance(rng, NoiseStream) else rng
    return _shuffled(WEEK_COMPOSITION[WeekKind(kind)], gen)


def day_events(day_kind, season, BW: float, day_start: float,
               schedule: DaySchedule = DEFAULT_SCHEDULE):
    """``(kind, start, end, grams, size)`` tuples for one day."""
    day_kind, season = DayKind(day_kind), Season(season)
    warm = season in WARM_SEASONS
    dinner = SizeClass.MEDIUM if warm else SizeClass.LARGE
    snack_time = schedule.morning_snack if warm else schedule.evening_snack
    plan = [
        (EventKind.MEAL, schedule.breakfast, SizeClass.MEDIUM),
        (EventKind.MEAL, schedule.lunch, SizeClass.SMALL),
        (EventKind.MEAL, schedule.dinner, dinner),
        (EventKind.SNACK, snack_time, SizeClass.SNACK),
    ]
    if day_kind is DayKind.MOVIE_NIGHT:
        plan.append((EventKind.SNACK, schedule.movie_snack, SizeClass.SNACK))
    elif day_kind is DayKind.LATE_NIGHT:
        plan.extend((EventKind.SNACK, t, SizeClass.SNACK) for t in schedule.late_snacks)
    out = [(k, day_start + t, day_start + t + MEAL_WINDOW, meal_grams(BW, s), s)
           for k, t, s in plan]
    if day_kind is DayKind.ACTIVE:
        t0, t1 = schedule.exercise
        out.append((EventKind.EXERCISE, day_start + t0, day_start + t1, 0.0, SizeClass.NONE))
    return out


def build_year(BW: float, master_seed: int, weeks: int = 52,
               schedule: DaySchedule = DEFAULT_SCHEDULE) -> Protocol:
    """Four 13-week seasons starting in winter; calendar order drawn from ``master_seed``.

    The calendar depends on the seed only, so every participant sharing a
    seed follows the same days; meal sizes scale with ``BW``.
    """
    gen = NoiseStream(master_seed, 0, Purpose.PROTOCOL).generator
    week_kinds = []
    day_kinds = []
    for season in SEASON_ORDER:
        for wk in _shuffled(SEASON_COMPOSITION[season], gen):
            week_kinds.append((season, wk))
            day_kinds.extend((season, dk) for dk in build_week(wk, season, gen))
    week_kinds = week_kinds[:weeks]
    day_kinds = day_kinds[:7 * weeks]
    duration = float(weeks * MINUTES_PER_WEEK)

    raw = []
    for day, (season, dk) in enumerate(day_kinds):
        raw.extend(day_events(dk, season, BW, day * MINUTES_PER_DAY, schedule))
    raw = [r for r in raw if r[1] < duration]
    raw.sort(key=lambda r: r[1])
    events = tuple(ActivityEvent(i, k, s, e, g, g, c) for i, (k, s, e, g, c) in enumerate(raw))
    return Protocol(protocol_id=f"year-{master_seed}-{weeks}w", duration=duration,
                    events=events, seed=master_seed, day_kinds=tuple(day_kinds),
                    week_kinds=tuple(week_kinds))


# --- announcements -------------------------------------------------------------

@dataclass(frozen=True)
class AnnouncementPolicy:
    """``EXACT``, ``MULTIPLICATIVE`` (grams * max(0, N(mu, sigma))) or ``OMIT`` (probability)."""

    kind: str = "EXACT"
    mu: float = 1.0
    sigma: float = 0.0
    probability: float = 0.0

    def __post_init__(self):
        if self.kind not in ("EXACT", "MULTIPLICATIVE", "OMIT"):
            raise ValueError(f"unknown announcement policy {self.kind!r}")
        if self.sigma < 0 or not 0 <= self.probability <= 1:
            raise ValueError("invalid announcement policy parameters")

    @classmethod
    def parse(cls, text: str) -> "AnnouncementPolicy":
        """``EXACT``, ``MULTIPLICATIVE(1.0, 0.2)`` or ``OMIT(0.1)``."""
        text = text.strip()
        name, _, rest = text.partition("(")
        name = name.strip().upper()
        args = [float(a) for a in rest.rstrip(")").split(",") if a.strip()]
        if name == "EXACT":
            return cls()
        if name == "MULTIPLICATIVE":
            return cls("MULTIPLICATIVE", mu=args[0], sigma=args[1])
        if name == "OMIT":
            return cls("OMIT", probability=args[0])
        raise ValueError(f"unknown announcement policy {text!r}")

    def __str__(self):
        if self.kind == "MULTIPLICATIVE":
            return f"MULTIPLICATIVE({self.mu!r}, {self.sigma!r})"
        if self.kind == "OMIT":
            return f"OMIT({self.probability!r})"
        return "EXACT"


def announce(event: ActivityEvent, policy: AnnouncementPolicy, rng) -> float:
    gen = rng.generator if isinstance(rng, NoiseStream) else rng
    if event.kind is EventKind.EXERCISE:
        return 0.0
    if policy.kind == "MULTIPLICATIVE":
        return event.true_grams * max(0.0, float(gen.normal(policy.mu, policy.sigma)))
    if policy.kind == "OMIT":
        return 0.0 if gen.random() < policy.probability else event.true_grams
    return event.true_grams


def apply_announcements(protocol: Protocol, policy: AnnouncementPolicy, rng) -> Protocol:
    """Copy of ``protocol`` with each event's announced grams drawn once, in event order."""
    events = tuple(replace(e, announced_grams=announce(e, policy, rng)) for e in protocol.events)
    return replace(protocol, events=events)


def participant_protocol(BW: float, protocol_seed: int, master_seed: int, participant_id: int,
                         policy: Optional[AnnouncementPolicy] = None,
                         weeks: int = 52) -> Protocol:
    protocol = build_year(BW, protocol_seed, weeks)
    if policy is None or policy.kind == "EXACT":
        return protocol
    rng = NoiseStream(master_seed, participant_id, Purpose.ANNOUNCEMENT)
    return apply_announcements(protocol, policy, rng)


# --- disturbance -----------------------------------------------------------------

def grams_to_model_units(grams, model_kind):
    """g CHO to mmol (model A) or mg (model B)."""
    if ModelKind.parse(model_kind) is ModelKind.HOVORKA:
        return grams * MMOL_PER_GRAM_GLUCOSE
    return grams * 1000.0


def disturbance_for_interval(protocol: Protocol, t_k: float, t_k1: float, model_kind) -> float:
    """Mean meal rate over ``[t_k, t_k1)`` in mmol/min (model A) or mg/min (model B)."""
    mass = 0.0
    for e in protocol.events:
        if e.kind is EventKind.EXERCISE or e.true_grams == 0:
            continue
        w_end = e.start + MEAL_WINDOW
        overlap = min(t_k1, w_end) - max(t_k, e.start)
        if overlap > 0:
            mass += e.true_grams * overlap / MEAL_WINDOW
    return float(grams_to_model_units(mass, model_kind) / (t_k1 - t_k))


def tick_schedule(protocol: Protocol, n_ticks: int, cgm_period: float, model_kind):
    """Per-tick meal rate (model units) and announced grams for a whole run.

    Announced grams land on the tick containing the event start.
    """
    grams = np.zeros(n_ticks)
    announced = np.zeros(n_ticks)
    for e in protocol.events:
        if e.kind is EventKind.EXERCISE:
            continue
        k0 = int(e.start // cgm_period)
        if k0 < n_ticks:
            announced[k0] += e.announced_grams
        k = k0
        w_end = e.start + MEAL_WINDOW
        while k < n_ticks and k * cgm_period < w_end:
            t0, t1 = k * cgm_period, (k + 1) * cgm_period
            overlap = min(t1, w_end) - max(t0, e.start)
            if overlap > 0:
                grams[k] += e.true_grams * overlap / MEAL_WINDOW
            k += 1
    rate = grams_to_model_units(grams, model_kind) / cgm_period
    return rate, announced


# --- protocol file -------------------------------------------------------------

PROTOCOL_SCHEMA = "vct-protocol/1"


def dumps_protocol(protocol: Protocol) -> str:
    lines = [f"# schema\t{PROTOCOL_SCHEMA}",
             f"# protocol_id\t{protocol.protocol_id}",
             f"# duration\t{protocol.duration!r}",
             f"# seed\t{protocol.seed}",
             "id\tkind\tstart\tend\ttrue_grams\tannounced_grams\tsize_class"]
    for e in protocol.events:
        lines.append(f"{e.event_id}\t{e.kind.value}\t{e.start!r}\t{e.end!r}\t"
                     f"{e.true_grams!r}\t{e.announced_grams!r}\t{e.size_class.value}")
    return "\n".join(lines) + "\n"


def write_protocol(path, protocol: Protocol):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_protocol(protocol))
    os.replace(tmp, path)


def load_protocol(path) -> Protocol:
    header = {}
    events = []
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    body = [ln for ln in lines if not ln.startswith("#")]
    for ln in lines:
        if ln.startswith("#"):
            key, _, value = ln[1:].strip().partition("\t")
            header[key] = value
    if header.get("schema") != PROTOCOL_SCHEMA:
        raise ValueError(f"{path}: not a {PROTOCOL_SCHEMA} file")
    for ln in body[1:]:
        i, kind, start, end, tg, ag, size = ln.split("\t")
        events.append(ActivityEvent(int(i), EventKind(kind), float(start), float(end),
                                    float(tg), float(ag), SizeClass(size)))
    return Protocol(protocol_id=header["protocol_id"], duration=float(header["duration"]),
                    events=tuple(events), seed=int(header["seed"]))
