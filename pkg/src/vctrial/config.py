"""Trial configuration: INI-style file, validation and a provenance hash.

Example::

    [trial]
    cohort = cohort.tsv
    master_seed = 2024
    protocol_seed = 7
    announcement = EXACT
    workers = 0
    max_failure_fraction = 0.0

    [simulation]
    trial_weeks = 52
    titration_weeks = 4
    deterministic = false

    [controller]
    Kp = 0.05

Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from vctrial.controller import ControllerHyperparams
from vctrial.errors import ConfigError
from vctrial.protocol import AnnouncementPolicy, Protocol, load_protocol
from vctrial.simcore import SimConfig
from vctrial.units import MINUTES_PER_WEEK

WORKERS_ENV = "VCT_WORKERS"


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "")
    if not raw.strip():
        return 0
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    if value < 0:
        raise ConfigError(f"{WORKERS_ENV} must be >= 0")
    return value


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class TrialConfig:
    cohort_path: str
    master_seed: int = 0
    protocol_seed: int = 0
    protocol_path: Optional[str] = None
    controller: ControllerHyperparams = field(default_factory=ControllerHyperparams)
    sim: SimConfig = field(default_factory=SimConfig)
    workers: int = 0
    out_dir: Optional[str] = None
    announcement: AnnouncementPolicy = field(default_factory=lambda: AnnouncementPolicy("EXACT"))
    max_failure_fraction: float = 0.0
    shared_protocol: Optional[Protocol] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.workers < 0:
            raise ConfigError("workers must be >= 0")
        if self.sim.trial_duration < self.sim.titration_duration + MINUTES_PER_WEEK:
            raise ConfigError("trial duration must be at least titration + 1 week")
        if not 0.0 <= self.max_failure_fraction <= 1.0:
            raise ConfigError("max_failure_fraction must lie in [0, 1]")
        if self.protocol_path is not None and self.shared_protocol is None:
            try:
                self.shared_protocol = load_protocol(self.protocol_path)
            except (OSError, ValueError, KeyError) as exc:
                raise ConfigError(f"cannot load protocol {self.protocol_path}: {exc}") from exc
        if self.shared_protocol is not None and \
                self.shared_protocol.duration < self.sim.trial_duration:
            raise ConfigError("protocol file is shorter than the trial")

    def hash_payload(self) -> dict:
        """Everything that can change the numbers; workers and output location excluded."""
        try:
            cohort = _file_digest(self.cohort_path)
        except OSError:
            cohort = None
        return {
            "cohort_sha256": cohort,
            "master_seed": self.master_seed,
            "protocol_seed": self.protocol_seed if self.protocol_path is None else None,
            "protocol_sha256": _file_digest(self.protocol_path) if self.protocol_path else None,
            "announcement": str(self.announcement),
            "controller": {k: repr(v) for k, v in self.controller.as_dict().items()},
            "sim": {f.name: repr(getattr(self.sim, f.name)) for f in fields(self.sim)},
            "max_failure_fraction": repr(self.max_failure_fraction),
        }

    def config_hash(self) -> str:
        text = json.dumps(self.hash_payload(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}


def _bool(value: str, key: str) -> bool:
    try:
        return _BOOL[value.strip().lower()]
    except KeyError:
        raise ConfigError(f"{key}: expected a boolean, got {value!r}") from None


def _number(kind, value: str, key: str):
    try:
        return kind(value)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}") from None


def _resolve(base: Path, value: str) -> str:
    p = Path(value).expanduser()
    return str(p if p.is_absolute() else base / p)


TRIAL_KEYS = {"cohort", "master_seed", "protocol_seed", "protocol", "announcement", "workers",
              "max_failure_fraction"}
SIM_KEYS = {"step_size", "cgm_period", "trial_weeks", "titration_weeks", "trial_duration",
            "titration_duration", "deterministic"}


def parse_config(text: str, base_dir=".") -> TrialConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    unknown = set(cp.sections()) - {"trial", "simulation", "controller"}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    if not cp.has_section("trial"):
        raise ConfigError("missing [trial] section")
    base = Path(base_dir)
    tr = cp["trial"]
    extra = set(tr) - TRIAL_KEYS
    if extra:
        raise ConfigError(f"unknown [trial] key(s): {', '.join(sorted(extra))}")
    if "cohort" not in tr:
        raise ConfigError("[trial] cohort is required")

    sim_kw = {}
    if cp.has_section("simulation"):
        sec = cp["simulation"]
        extra = set(sec) - SIM_KEYS
        if extra:
            raise ConfigError(f"unknown [simulation] key(s): {', '.join(sorted(extra))}")
        for key in ("step_size", "cgm_period", "trial_duration", "titration_duration"):
            if key in sec:
                sim_kw[key] = _number(float, sec[key], key)
        if "trial_weeks" in sec:
            sim_kw["trial_duration"] = _number(float, sec["trial_weeks"], "trial_weeks") \
                * MINUTES_PER_WEEK
        if "titration_weeks" in sec:
            sim_kw["titration_duration"] = _number(float, sec["titration_weeks"],
                                                   "titration_weeks") * MINUTES_PER_WEEK
        if "deterministic" in sec:
            sim_kw["deterministic"] = _bool(sec["deterministic"], "deterministic")

    hp_kw = {}
    if cp.has_section("controller"):
        types = {f.name: f.type for f in fields(ControllerHyperparams)}
        for key, value in cp["controller"].items():
            if key not in types:
                raise ConfigError(f"unknown controller hyperparameter {key!r}")
            hp_kw[key] = _number(int if types[key] in (int, "int") else float, value, key)

    try:
        sim = SimConfig(**sim_kw)
        hp = ControllerHyperparams(**hp_kw)
        announcement = AnnouncementPolicy.parse(tr.get("announcement", "EXACT"))
    except (ValueError, IndexError) as exc:
        raise ConfigError(str(exc)) from exc
    return TrialConfig(
        cohort_path=_resolve(base, tr["cohort"]),
        master_seed=_number(int, tr.get("master_seed", "0"), "master_seed"),
        protocol_seed=_number(int, tr.get("protocol_seed", "0"), "protocol_seed"),
        protocol_path=_resolve(base, tr["protocol"]) if "protocol" in tr else None,
        controller=hp,
        sim=sim,
        workers=_number(int, tr["workers"], "workers") if "workers" in tr else default_workers(),
        announcement=announcement,
        max_failure_fraction=_number(float, tr.get("max_failure_fraction", "0"),
                                     "max_failure_fraction"),
    )


def load_config(path) -> TrialConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, Path(path).resolve().parent)
