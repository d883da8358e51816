"""Virtual participants: demographics, parameter sampling and rejection rules.

Each participant's draws come from its own streams keyed by
``(master_seed, participant_id)``, so a participant's parameters do not
depend on which other participants are generated or in what order.
"""

from __future__ import annotations

import datetime as dt
import io
import math
import os
from dataclasses import dataclass, field, fields
from typing import Callable, Optional, Union

import numpy as np

from vctrial.errors import DerivationInfeasible, NoRootError, SamplingExhausted
from vctrial.models import ModelKind
from vctrial.models import hovorka, uvapadova
from vctrial.models.hovorka import HovorkaParams
from vctrial.models.uvapadova import UvaPadovaParams
from vctrial.simcore import NoiseStream, Purpose
from vctrial.units import MGDL_PER_MMOLL, mu_min_to_uh, pmol_min_to_uh

SCREENING_GLUCOSE_MMOL = 6.0
MIN_BASAL_UH = 0.4
MAX_CONSECUTIVE_REJECTIONS = 10**6
CANDIDATE_BATCH = 256

# Span of "within one order of magnitude": total 10x centred geometrically,
# or the wider [mean/10, 10*mean].
SPAN_GEOMETRIC = math.sqrt(10.0)
SPAN_WIDE = 10.0


@dataclass(frozen=True)
class DistributionSpec:
    """One appendix row.

    ``normal``/``lognormal``: ``location`` and ``scale`` are mean and SD (of the
    log for lognormal). ``uniform``: ``U(location, location + scale)``.
    ``transform="reciprocal"`` means the distribution describes ``1/value``.
    ``per_kg`` values are multiplied by body weight after drawing.
    """

    kind: str
    location: float
    scale: float = 0.0
    transform: str = "none"
    per_kg: bool = False

    def __post_init__(self):
        if self.kind not in ("normal", "lognormal", "uniform", "fixed"):
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        if self.transform not in ("none", "reciprocal"):
            raise ValueError(f"unknown transform {self.transform!r}")
        if self.scale < 0:
            raise ValueError("scale must be >= 0")

    def raw(self, gen: np.random.Generator, size=None):
        """Draw before the reciprocal transform (the quantity the table describes)."""
        if self.kind == "normal":
            return gen.normal(self.location, self.scale, size)
        if self.kind == "lognormal":
            return np.exp(gen.normal(self.location, self.scale, size))
        if self.kind == "uniform":
            return gen.uniform(self.location, self.location + self.scale, size)
        return np.full(size, self.location) if size is not None else self.location

    def z_score(self, raw):
        """Standardised deviation of a raw draw; 0 for entries exempt from the 1-SD rule."""
        if self.kind == "normal":
            return np.abs(raw - self.location) / self.scale
        if self.kind == "lognormal":
            with np.errstate(divide="ignore", invalid="ignore"):
                return np.abs(np.log(raw) - self.location) / self.scale
        return np.zeros_like(np.asarray(raw, dtype=float))

    @property
    def center(self) -> float:
        """Typical raw value (mean, or median for lognormal)."""
        if self.kind == "lognormal":
            return math.exp(self.location)
        if self.kind == "uniform":
            return self.location + self.scale / 2
        return self.location

    def finish(self, raw, bw):
        value = 1.0 / raw if self.transform == "reciprocal" else raw
        return value * bw if self.per_kg else value


N = DistributionSpec

HOVORKA_TABLE = {
    "BW": N("uniform", 65.0, 30.0),
    "EGP_0": N("normal", 0.0161, 0.0039, per_kg=True),
    "F_01": N("normal", 0.0097, 0.0022, per_kg=True),
    "A_G": N("uniform", 0.7, 0.5),
    "k_12": N("normal", 0.0649, 0.0282),
    "k_a1": N("normal", 0.0055, 0.0056),
    "k_a2": N("normal", 0.0683, 0.0507),
    "k_a3": N("normal", 0.0304, 0.0235),
    "SIT": N("normal", 51.2, 32.09),
    "SID": N("normal", 8.2, 7.84),
    "SIE": N("normal", 520.0, 306.2),
    "k_e": N("normal", 0.14, 0.035),
    "V_I": N("normal", 0.12, 0.012, per_kg=True),
    "V_G": N("lognormal", math.log(0.15), 0.23, per_kg=True),
    "tau_D": N("lognormal", -3.689, 0.25, transform="reciprocal"),
    "tau_S": N("normal", 0.018, 0.0045, transform="reciprocal"),
    "tau_IG": N("fixed", hovorka.TAU_IG),
}

# Rates and inverse time constants checked by the order-of-magnitude rule.
HOVORKA_TIME_CONSTANTS = ("k_12", "k_a1", "k_a2", "k_a3", "k_e", "tau_D", "tau_S")

UVA_PADOVA_TABLE = {
    "BW": N("normal", 70.492, 12.7502),
    "k_1": N("normal", 0.0810, 0.0230),
    "k_2": N("normal", 0.1370, 0.0530),
    "V_g": N("normal", 1.8700, 0.1020),
    "G_b": N("normal", 147.4100, 8.9390),
    "HE_b": N("fixed", 0.6),
    "CL": N("normal", 1.0210, 0.3080),
    "m_1": N("normal", 0.2109, 0.1362),
    "V_i": N("normal", 0.0646, 0.0175),
    "I_b": N("normal", 92.7470, 19.6618),
    "tau_D": N("lognormal", -3.689, 0.25, transform="reciprocal"),
    "A_G": N("uniform", 0.7, 0.5),
    "EGP_b": N("normal", 2.5040, 0.3910),
    "k_p2": N("normal", 0.0050, 0.0040),
    "k_p3": N("normal", 0.0106, 0.0068),
    "k_i": N("normal", 0.0069, 0.0027),
    "F_cns": N("fixed", 1.0),
    "V_mx": N("normal", 0.0810, 0.0330),
    "K_m0": N("normal", 224.2810, 12.2640),
    "p_2U": N("normal", 0.0246, 0.012),
    "k_e1": N("fixed", 0.0005),
    "k_e2": N("fixed", 339.0),
    "k_a1": N("normal", 0.0016, 0.0005),
    "k_a2": N("normal", 0.0149, 0.0052),
    "k_d": N("normal", 0.0161, 0.0017),
    "k_sc": N("normal", 0.1033, 0.0376),
}

del N

TABLES = {ModelKind.HOVORKA: HOVORKA_TABLE, ModelKind.UVA_PADOVA: UVA_PADOVA_TABLE}
PARAM_CLASSES = {ModelKind.HOVORKA: HovorkaParams, ModelKind.UVA_PADOVA: UvaPadovaParams}

PARAM_UNITS = {
    ModelKind.HOVORKA: {
        "tau_S": "min", "V_I": "L", "k_e": "1/min", "k_a1": "1/min", "k_a2": "1/min",
        "k_a3": "1/min", "SIT": "1e-4 L/mU", "SID": "1e-4 L/mU", "SIE": "1e-4 L/mU",
        "A_G": "-", "tau_D": "min", "k_12": "1/min", "EGP_0": "mmol/min",
        "F_01": "mmol/min", "V_G": "L", "tau_IG": "min", "BW": "kg",
        "basal_u_ss": "mU/min",
    },
    ModelKind.UVA_PADOVA: {
        "BW": "kg", "k_1": "1/min", "k_2": "1/min", "V_g": "dL/kg", "G_b": "mg/kg",
        "HE_b": "-", "CL": "L/min", "m_1": "1/min", "V_i": "L/kg", "I_b": "pmol/L",
        "tau_D": "min", "A_G": "-", "EGP_b": "mg/kg/min", "k_p2": "1/min",
        "k_p3": "mg L/(kg pmol min)", "k_i": "1/min", "F_cns": "mg/kg/min",
        "V_mx": "mg L/(kg pmol min)", "K_m0": "mg/kg", "p_2U": "1/min", "k_e1": "1/min",
        "k_e2": "mg/kg", "k_a1": "1/min", "k_a2": "1/min", "k_d": "1/min",
        "k_sc": "1/min", "basal_u_ss": "pmol/min",
    },
}


def sample_parameter(spec: DistributionSpec, rng) -> float:
    """One draw from ``spec``; reciprocal entries are redrawn until positive."""
    gen = rng.generator if isinstance(rng, NoiseStream) else rng
    while True:
        raw = float(spec.raw(gen))
        if spec.transform != "reciprocal" or raw > 0:
            return 1.0 / raw if spec.transform == "reciprocal" else raw


@dataclass
class RejectionCounts:
    one_sd: int = 0
    time_constant: int = 0
    basal: int = 0
    accepted: int = 0

    @property
    def attempts(self) -> int:
        return self.one_sd + self.time_constant + self.basal + self.accepted

    def __iadd__(self, other):
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)} | {"attempts": self.attempts}


@dataclass
class ParticipantRecord:
    id: int
    given_name: str
    family_name: str
    date_of_birth: dt.date
    place_of_birth: str
    sex: str
    height: float
    body_weight: float
    model_kind: ModelKind
    parameters: Union[HovorkaParams, UvaPadovaParams]
    basal_u_ss: float
    rejections: RejectionCounts = field(default_factory=RejectionCounts)

    @property
    def basal_uh(self) -> float:
        return basal_to_uh(self.model_kind, self.basal_u_ss)


def basal_to_uh(kind: ModelKind, u_ss: float) -> float:
    if kind is ModelKind.HOVORKA:
        return mu_min_to_uh(u_ss)
    return pmol_min_to_uh(u_ss)


def solve_screening_state(kind: ModelKind, params):
    """Steady state and infusion holding plasma glucose at 6 mmol/L (model units)."""
    if kind is ModelKind.HOVORKA:
        return hovorka.hovorka_steady_state(params, SCREENING_GLUCOSE_MMOL)
    return uvapadova.uvp_steady_state(params, SCREENING_GLUCOSE_MMOL * MGDL_PER_MMOLL)


# --- rejection predicates -------------------------------------------------

def one_sd_ok(kind: ModelKind, raw: dict) -> np.ndarray:
    """Rule (a): every normally distributed entry within 1 SD (log space for lognormal)."""
    table = TABLES[kind]
    ok = None
    for name, spec in table.items():
        if spec.kind not in ("normal", "lognormal"):
            continue
        good = spec.z_score(np.asarray(raw[name], dtype=float)) <= 1.0
        ok = good if ok is None else ok & good
    return ok


def time_constants_ok(kind: ModelKind, raw: dict, span: float = SPAN_GEOMETRIC) -> np.ndarray:
    """Rule (b), model A only: rates and inverse time constants within ``span`` of the centre.

    The bound is symmetric under inversion, so checking the rate also checks its
    time constant. Non-positive rates fail.
    """
    first = np.asarray(next(iter(raw.values())))
    if kind is not ModelKind.HOVORKA:
        return np.ones(first.shape, dtype=bool)
    table = TABLES[kind]
    ok = np.ones(first.shape, dtype=bool)
    for name in HOVORKA_TIME_CONSTANTS:
        spec = table[name]
        # tau_* rows describe the inverse already
        value = np.asarray(raw[name], dtype=float)
        ratio = value / spec.center
        ok &= (ratio >= 1.0 / span) & (ratio <= span)
    return ok


def build_params(kind: ModelKind, raw: dict):
    """Turn one raw draw into a parameter set (reciprocals, per-kg scaling)."""
    table = TABLES[kind]
    bw = float(raw["BW"])
    values = {name: float(spec.finish(float(raw[name]), bw)) for name, spec in table.items()}
    cls = PARAM_CLASSES[kind]
    return cls(**{f.name: values[f.name] for f in fields(cls)})


def raw_from_params(kind: ModelKind, params) -> dict:
    """Inverse of :func:`build_params`, used to re-check stored parameter sets."""
    table = TABLES[kind]
    bw = params.BW
    raw = {}
    for name, spec in table.items():
        v = getattr(params, name)
        if spec.per_kg:
            v = v / bw
        if spec.transform == "reciprocal":
            v = 1.0 / v
        raw[name] = v
    return raw


def basal_ok(kind: ModelKind, params, steady_state_solver=None):
    """Rule (c): screening steady state exists and needs at least 0.4 U/h.

    Returns ``(ok, u_ss)``; ``u_ss`` is ``nan`` when the solver fails.
    """
    solver = steady_state_solver or solve_screening_state
    try:
        params.validate()
        _, u_ss = solver(kind, params)
    except (NoRootError, DerivationInfeasible, ValueError, ZeroDivisionError):
        return False, float("nan")
    return basal_to_uh(kind, u_ss) >= MIN_BASAL_UH, u_ss


def passes_rules(kind: ModelKind, params, span: float = SPAN_GEOMETRIC) -> dict:
    """Re-evaluate all rejection rules on a stored parameter set."""
    raw = raw_from_params(kind, params)
    ok_c, _ = basal_ok(kind, params)
    return {
        "one_sd": bool(one_sd_ok(kind, raw)),
        "time_constant": bool(time_constants_ok(kind, raw, span)),
        "basal": bool(ok_c),
    }


# --- demographics ----------------------------------------------------------

GIVEN_NAMES = {
    "F": ("Anna", "Ida", "Sofie", "Emma", "Freja", "Laura", "Maria", "Karen", "Mette",
          "Hanne", "Ingrid", "Astrid", "Clara", "Nora", "Signe", "Julie"),
    "M": ("Peter", "Jens", "Lars", "Henrik", "Søren", "Niels", "Mads", "Anders",
          "Rasmus", "Jonas", "Emil", "Magnus", "Oskar", "Frederik", "Mikkel", "Tobias"),
}
FAMILY_NAMES = ("Nielsen", "Jensen", "Hansen", "Pedersen", "Andersen", "Christensen",
                "Larsen", "Sørensen", "Rasmussen", "Jørgensen", "Petersen", "Madsen",
                "Kristensen", "Olsen", "Thomsen", "Poulsen", "Johansen", "Karlsson",
                "Lindqvist", "Berg", "Holm", "Dahl", "Lund", "Eriksen")
PLACES = ("Copenhagen", "Aarhus", "Odense", "Aalborg", "Esbjerg", "Roskilde", "Kolding",
          "Vejle", "Stockholm", "Gothenburg", "Malmö", "Oslo", "Bergen", "Helsinki",
          "Hamburg", "Reykjavik")
REFERENCE_DATE = dt.date(2022, 1, 1)


def _demographics(gen: np.random.Generator):
    sex = "F" if gen.random() < 0.5 else "M"
    given = GIVEN_NAMES[sex][gen.integers(len(GIVEN_NAMES[sex]))]
    family = FAMILY_NAMES[gen.integers(len(FAMILY_NAMES))]
    place = PLACES[gen.integers(len(PLACES))]
    height = gen.normal(181.0, 7.0) if sex == "M" else gen.normal(168.0, 6.0)
    age_days = gen.integers(18 * 365, 70 * 365 + 1)
    dob = REFERENCE_DATE - dt.timedelta(days=int(age_days))
    return given, family, dob, place, sex, round(float(height), 1)


# --- sampling --------------------------------------------------------------

def _draw_batch(kind: ModelKind, gen: np.random.Generator, size: int) -> dict:
    return {name: np.asarray(spec.raw(gen, size), dtype=float)
            for name, spec in TABLES[kind].items()}


def sample_participant(model_kind, rng: NoiseStream, steady_state_solver=None,
                       participant_id: int = 0, demographics_rng: Optional[NoiseStream] = None,
                       span: float = SPAN_GEOMETRIC,
                       max_rejections: int = MAX_CONSECUTIVE_REJECTIONS) -> ParticipantRecord:
    """Draw parameter sets until one passes all rejection rules.

    Candidates are drawn in fixed-size batches from ``rng`` and screened in
    order; the first survivor is returned with its rejection counts.
    """
    kind = ModelKind.parse(model_kind)
    gen = rng.generator if isinstance(rng, NoiseStream) else rng
    counts = RejectionCounts()
    consecutive = 0
    while True:
        raw = _draw_batch(kind, gen, CANDIDATE_BATCH)
        a = one_sd_ok(kind, raw)
        b = time_constants_ok(kind, raw, span)
        for i in range(CANDIDATE_BATCH):
            if consecutive >= max_rejections:
                raise SamplingExhausted(
                    f"{consecutive} consecutive rejections sampling {kind.value} participant")
            consecutive += 1
            if not a[i]:
                counts.one_sd += 1
                continue
            if not b[i]:
                counts.time_constant += 1
                continue
            params = build_params(kind, {k: v[i] for k, v in raw.items()})
            ok, u_ss = basal_ok(kind, params, steady_state_solver)
            if not ok:
                counts.basal += 1
                continue
            counts.accepted += 1
            demo_rng = demographics_rng or NoiseStream(0, participant_id, Purpose.DEMOGRAPHICS)
            given, family, dob, place, sex, height = _demographics(demo_rng.generator)
            return ParticipantRecord(
                id=participant_id, given_name=given, family_name=family, date_of_birth=dob,
                place_of_birth=place, sex=sex, height=height, body_weight=params.BW,
                model_kind=kind, parameters=params, basal_u_ss=u_ss, rejections=counts)


def generate_participant(model_kind, master_seed: int, participant_id: int,
                         **kwargs) -> ParticipantRecord:
    return sample_participant(
        model_kind, NoiseStream(master_seed, participant_id, Purpose.SAMPLING),
        participant_id=participant_id,
        demographics_rng=NoiseStream(master_seed, participant_id, Purpose.DEMOGRAPHICS),
        **kwargs)


def generate_cohort(n: int, model_kind, master_seed: int, ids=None, **kwargs) -> list:
    """``n`` accepted participants with ids ``0..n-1`` (or the given ``ids``)."""
    ids = range(n) if ids is None else ids
    return [generate_participant(model_kind, master_seed, i, **kwargs) for i in ids]


def mean_parameters(model_kind, body_weight: Optional[float] = None):
    """Parameter set at every distribution's centre (mean, or median for lognormal)."""
    kind = ModelKind.parse(model_kind)
    raw = {name: spec.center for name, spec in TABLES[kind].items()}
    if body_weight is not None:
        raw["BW"] = body_weight
    return build_params(kind, raw)


# --- cohort file -------------------------------------------------------------

COHORT_SCHEMA = "vct-cohort/1"
DEMOGRAPHIC_COLUMNS = ("id", "given_name", "family_name", "date_of_birth", "place_of_birth",
                       "sex", "height_cm", "body_weight_kg")
TRAILER_COLUMNS = ("basal_u_ss", "rej_one_sd", "rej_time_constant", "rej_basal")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dumps_cohort(records, model_kind, master_seed) -> str:
    kind = ModelKind.parse(model_kind)
    names = PARAM_CLASSES[kind].names()
    units = PARAM_UNITS[kind]
    buf = io.StringIO()
    buf.write(f"# schema\t{COHORT_SCHEMA}\n")
    buf.write(f"# model\t{kind.value}\n")
    buf.write(f"# master_seed\t{master_seed}\n")
    buf.write("# units\t" + "\t".join(f"{n}={units[n]}" for n in names + ("basal_u_ss",)) + "\n")
    buf.write("\t".join(DEMOGRAPHIC_COLUMNS + names + TRAILER_COLUMNS) + "\n")
    for r in records:
        row = [r.id, r.given_name, r.family_name, r.date_of_birth.isoformat(), r.place_of_birth,
               r.sex, float(r.height), float(r.body_weight)]
        row += [float(getattr(r.parameters, n)) for n in names]
        row += [float(r.basal_u_ss), r.rejections.one_sd, r.rejections.time_constant,
                r.rejections.basal]
        buf.write("\t".join(_fmt(v) for v in row) + "\n")
    return buf.getvalue()


def write_cohort(path, records, model_kind, master_seed):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_cohort(records, model_kind, master_seed))
    os.replace(tmp, path)


def load_cohort(path):
    """Read a cohort file. Returns ``(records, header)``."""
    header = {}
    records = []
    columns = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("\t")
                header[key] = value
                continue
            cells = line.split("\t")
            if columns is None:
                columns = cells
                continue
            row = dict(zip(columns, cells))
            kind = ModelKind.parse(header["model"])
            cls = PARAM_CLASSES[kind]
            params = cls(**{n: float(row[n]) for n in cls.names()})
            records.append(ParticipantRecord(
                id=int(row["id"]), given_name=row["given_name"], family_name=row["family_name"],
                date_of_birth=dt.date.fromisoformat(row["date_of_birth"]),
                place_of_birth=row["place_of_birth"], sex=row["sex"],
                height=float(row["height_cm"]), body_weight=float(row["body_weight_kg"]),
                model_kind=kind, parameters=params, basal_u_ss=float(row["basal_u_ss"]),
                rejections=RejectionCounts(int(row["rej_one_sd"]), int(row["rej_time_constant"]),
                                           int(row["rej_basal"]), 1)))
    if header.get("schema") != COHORT_SCHEMA:
        raise ValueError(f"{path}: not a {COHORT_SCHEMA} file")
    return records, header
