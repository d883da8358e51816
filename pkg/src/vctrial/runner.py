"""Closed-loop trial execution.

Per CGM tick: observe, controller update, controller output, dose conversion,
then ``steps_per_tick`` Euler-Maruyama steps with the meal rate held. Statistics
are streamed into :class:`~vctrial.metrics.ParticipantStats`; no trajectory is
kept.

Two engines produce the same numbers. The compiled engine fuses the loop for
the reference controller; the Python engine accepts any
:class:`~vctrial.controller.APController`. Both consume the same noise streams
in the same order.
"""

from __future__ import annotations

import concurrent.futures as cf
import functools
import math
import multiprocessing as mp
import os
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit

from vctrial import controller as ctl
from vctrial.errors import NumericalBlowup
from vctrial.metrics import CohortStats, ParticipantStats
from vctrial.models import ModelKind, hovorka, uvapadova
from vctrial.population import ParticipantRecord, mean_parameters, solve_screening_state
from vctrial.protocol import AnnouncementPolicy, Protocol, participant_protocol, tick_schedule
from vctrial.simcore import (NoiseStream, ObservationNoise, Purpose, SimConfig, observe,
                             simulate_control_interval)
from vctrial.units import MGDL_PER_MMOLL, MINUTES_PER_WEEK, MU_PER_U, PMOL_PER_U

CHUNK_TICKS = 2016  # one week of 5-min samples
CGM_NOISE_VARIANCE = {
    ModelKind.HOVORKA: 0.1,  # (mmol/L)^2
    ModelKind.UVA_PADOVA: 1.8,  # (mg/dL)^2
}


@dataclass(frozen=True)
class ModelBinding:
    kind: ModelKind
    system: object
    obs_to_mmol: float  # multiply an observation by this to get mmol/L
    insulin_per_unit: float  # model insulin amount per U


BINDINGS = {
    ModelKind.HOVORKA: ModelBinding(ModelKind.HOVORKA, hovorka.SYSTEM, 1.0, MU_PER_U),
    ModelKind.UVA_PADOVA: ModelBinding(ModelKind.UVA_PADOVA, uvapadova.SYSTEM,
                                       1.0 / MGDL_PER_MMOLL, PMOL_PER_U),
}


def dose_to_input(basal_uh: float, bolus_u: float, per_unit: float, period: float) -> float:
    """Pump command (U/h plus a bolus spread over the interval) in model units per minute."""
    return basal_uh * per_unit / 60.0 + bolus_u * per_unit / period


@functools.lru_cache(maxsize=None)
def closed_loop_kernel(drift, observation):
    """Compiled loop over a block of ticks for the reference controller.

    Returns ``(failed_tick, failed_step, failed_index, clamps)``; indices are
    ``-1`` on success. A failed observation reports ``failed_step = -1``.
    """

    @njit
    def kernel(x, p, h, cs, t_start, period, dt, steps, sigma, active, mask, per_unit,
               obs_to_mmol, obs_sd, rate, announced, vnoise, dw,
               y_out, basal_out, bolus_out):
        dim = x.shape[0]
        n_act = active.shape[0]
        u = np.empty(1)
        d = np.empty(1)
        clamps = 0
        for k in range(rate.shape[0]):
            t_k = t_start + k * period
            y = observation(t_k, x, p)
            if obs_sd > 0.0:
                y = y + obs_sd * vnoise[k]
            if not np.isfinite(y):
                return k, -1, 0, clamps
            y = max(y, 0.0)
            y_mmol = y * obs_to_mmol
            ctl.update_core(cs, y_mmol, announced[k], h)
            basal, bolus = ctl.output_core(cs, y_mmol, announced[k], h)
            u[0] = basal * per_unit / 60.0 + bolus * per_unit / period
            d[0] = rate[k]
            y_out[k] = y_mmol
            basal_out[k] = basal * period / 60.0
            bolus_out[k] = bolus
            base = k * steps
            for i in range(steps):
                f = drift(t_k + i * dt, x, u, d, p)
                for j in range(dim):
                    x[j] = x[j] + f[j] * dt
                for a in range(n_act):
                    j = active[a]
                    x[j] = x[j] + sigma[j] * dw[base + i, a]
                for j in range(dim):
                    v = x[j]
                    if not np.isfinite(v):
                        return k, i, j, clamps
                    if mask[j] and v < 0.0:
                        x[j] = 0.0
                        clamps += 1
        return -1, -1, -1, clamps

    return kernel


@dataclass
class ParticipantRun:
    """Outcome of one participant: statistics or a failure description."""

    participant_id: int
    stats: Optional[ParticipantStats] = None
    clamp_activations: int = 0
    failure: Optional[dict] = None


def _initial(record: ParticipantRecord):
    kind = record.model_kind
    state, u_ss = solve_screening_state(kind, record.parameters)
    p = record.parameters.to_array()
    return state.copy(), p, u_ss


def _hyperparams_for(record: ParticipantRecord, hp: ctl.ControllerHyperparams):
    return ctl.personalize(hp, record.basal_uh)


def _noise_variance(kind: ModelKind, config: SimConfig,
                    noise: Optional[ObservationNoise]) -> float:
    if config.deterministic:
        return 0.0
    return CGM_NOISE_VARIANCE[kind] if noise is None else noise.variance


def _blowup_info(record, exc: NumericalBlowup) -> dict:
    names = BINDINGS[record.model_kind].system.state_names
    idx = exc.index
    return {"id": record.id, "t": exc.t,
            "state": names[idx] if idx is not None and 0 <= idx < len(names) else "observation",
            "value": exc.value}


def run_participant(record: ParticipantRecord, protocol: Optional[Protocol],
                    controller_hp: ctl.ControllerHyperparams = ctl.ControllerHyperparams(),
                    config: SimConfig = SimConfig(), master_seed: int = 0,
                    controller: Optional[ctl.APController] = None,
                    noise: Optional[ObservationNoise] = None,
                    engine: str = "auto", chunk_ticks: int = CHUNK_TICKS,
                    run: Optional[ParticipantRun] = None) -> ParticipantStats:
    """Simulate one participant in closed loop and return its CGM statistics.

    The state starts at the screening steady state and the controller basal
    estimate at the corresponding infusion. Samples taken before
    ``config.titration_duration`` are not counted. ``controller`` defaults to
    the reference controller with ``controller_hp``; other controllers run
    as given on the Python engine. Raises :class:`NumericalBlowup` on divergence.
    """
    if engine not in ("auto", "compiled", "python"):
        raise ValueError(f"unknown engine {engine!r}")
    if type(controller) is ctl.ReferenceController:
        controller_hp = controller.hyperparams
        controller = None
    if controller is not None:
        if engine == "compiled":
            raise ValueError("the compiled engine only runs the reference controller")
        engine = "python"
    elif engine == "auto":
        engine = "compiled"

    if protocol is not None and protocol.duration < config.trial_duration:
        raise ValueError(f"protocol covers {protocol.duration:g} min but the trial runs "
                         f"{config.trial_duration:g} min")
    binding = BINDINGS[record.model_kind]
    hp = _hyperparams_for(record, controller_hp)
    if controller is None:
        controller = ctl.ReferenceController(hp)
    x, p, _ = _initial(record)
    n_ticks = config.n_ticks
    period = config.cgm_period
    stats = ParticipantStats(record.id, config.titration_duration)
    if protocol is None:
        rate = np.zeros(n_ticks)
        announced = np.zeros(n_ticks)
    else:
        rate, announced = tick_schedule(protocol, n_ticks, period, record.model_kind)
    obs_var = _noise_variance(record.model_kind, config, noise)
    proc = NoiseStream(master_seed, record.id, Purpose.PROCESS_NOISE)
    meas = NoiseStream(master_seed, record.id, Purpose.MEASUREMENT_NOISE)
    if run is None:
        run = ParticipantRun(record.id)

    if engine == "compiled":
        _run_compiled(binding, x, p, hp, config, obs_var, rate, announced, proc, meas, stats,
                      chunk_ticks, run)
    else:
        _run_python(binding, x, p, controller, config, obs_var, rate, announced, proc, meas,
                    stats, chunk_ticks, run)
    run.stats = stats
    return stats


def _run_compiled(binding, x, p, hp, config, obs_var, rate, announced, proc, meas, stats,
                  chunk_ticks, run):
    system = binding.system
    kernel = closed_loop_kernel(system.drift, system.observation)
    h = hp.to_array()
    cs = ctl.ControllerState.initial(hp).to_array(hp.derivative_filter_window)
    steps = config.steps_per_tick
    dt = config.step_size
    period = config.cgm_period
    if config.deterministic:
        sigma = np.zeros_like(x)
    else:
        sigma = np.asarray(system.diffusion(0.0, x, np.zeros(1), np.zeros(1), p), dtype=float)
    active = np.flatnonzero(sigma > 0.0)
    obs_sd = math.sqrt(obs_var)
    sqdt = math.sqrt(dt)
    n_ticks = rate.shape[0]
    for k0 in range(0, n_ticks, chunk_ticks):
        k1 = min(k0 + chunk_ticks, n_ticks)
        n = k1 - k0
        vnoise = meas.normal(n) if obs_sd > 0 else np.zeros(n)
        if len(active):
            dw = sqdt * proc.normal(n * steps * len(active))
            dw = dw.reshape(n * steps, len(active))
        else:
            dw = np.zeros((n * steps, 0))
        y = np.empty(n)
        basal = np.empty(n)
        bolus = np.empty(n)
        t_start = k0 * period
        ftick, fstep, fidx, clamps = kernel(
            x, p, h, cs, t_start, period, dt, steps, sigma, active, system.nonneg_mask,
            binding.insulin_per_unit, binding.obs_to_mmol, obs_sd, rate[k0:k1],
            announced[k0:k1], vnoise, dw, y, basal, bolus)
        run.clamp_activations += clamps
        if ftick >= 0:
            t_fail = t_start + ftick * period + (fstep + 1) * dt
            raise NumericalBlowup(t_fail, int(fidx) if fstep >= 0 else None)
        t = t_start + np.arange(n) * period
        stats.update_many(y, t, basal, bolus, period)


def _run_python(binding, x, p, controller, config, obs_var, rate, announced, proc, meas, stats,
                chunk_ticks, run):
    from vctrial.simcore import IntegrationDiagnostics

    system = binding.system
    period = config.cgm_period
    noise = ObservationNoise(obs_var)
    diag = IntegrationDiagnostics()
    state = controller.initial_state()
    n_ticks = rate.shape[0]
    # statistics are fed in the same blocks as the compiled engine
    for k0 in range(0, n_ticks, chunk_ticks):
        n = min(chunk_ticks, n_ticks - k0)
        y_blk, basal_blk, bolus_blk = np.empty(n), np.empty(n), np.empty(n)
        for i in range(n):
            k = k0 + i
            t_k = k * period
            y = observe(system, t_k, x, p, noise, meas, deterministic=obs_var == 0.0)
            y_mmol = y * binding.obs_to_mmol
            state = controller.update(state, y_mmol, announced[k])
            basal, bolus = controller.output(state, y_mmol, announced[k])
            u = dose_to_input(basal, bolus, binding.insulin_per_unit, period)
            y_blk[i] = y_mmol
            basal_blk[i] = basal * period / 60.0
            bolus_blk[i] = bolus
            try:
                x = simulate_control_interval(system, t_k, x, [u], [rate[k]], p, config, proc,
                                              diagnostics=diag)
            finally:
                run.clamp_activations = diag.clamp_activations
        stats.update_many(y_blk, k0 * period + np.arange(n) * period, basal_blk, bolus_blk,
                          period)


# --- cohort execution -------------------------------------------------------------

@dataclass
class TrialResult:
    cohort: CohortStats
    rows: list
    metadata: dict = field(default_factory=dict)
    participant_stats: list = field(default_factory=list)

    @property
    def failures(self) -> list:
        return self.metadata.get("failures", [])


def _weeks_needed(config: SimConfig) -> int:
    return max(1, math.ceil(config.trial_duration / MINUTES_PER_WEEK))


def simulate_record(record: ParticipantRecord, trial) -> ParticipantRun:
    """Run one cohort member under a :class:`~vctrial.config.TrialConfig`; never raises
    for numerical divergence."""
    run = ParticipantRun(record.id)
    if trial.shared_protocol is not None:
        protocol = trial.shared_protocol
    else:
        protocol = participant_protocol(record.body_weight, trial.protocol_seed,
                                        trial.master_seed, record.id, trial.announcement,
                                        weeks=_weeks_needed(trial.sim))
    try:
        run_participant(record, protocol, trial.controller, trial.sim, trial.master_seed,
                        run=run)
    except NumericalBlowup as exc:
        run.stats = None
        run.failure = _blowup_info(record, exc)
    return run


_WORKER_TRIAL = None


def _worker_init(trial):
    global _WORKER_TRIAL
    _WORKER_TRIAL = trial


def _worker_batch(records):
    return [simulate_record(r, _WORKER_TRIAL) for r in records]


def warm_up(kinds):
    """Compile the closed-loop kernels for ``kinds`` in this process."""
    for kind in kinds:
        b = BINDINGS[ModelKind.parse(kind)]
        closed_loop_kernel(b.system.drift, b.system.observation)
        params = mean_parameters(kind)
        _, u_ss = solve_screening_state(b.kind, params)
        rec = ParticipantRecord(0, "", "", None, "", "", 0.0, params.BW, b.kind, params, u_ss)
        run_participant(rec, None, config=SimConfig(titration_duration=0.0, trial_duration=5.0,
                                                    deterministic=True))


def resolve_workers(workers: int) -> int:
    if workers < 0:
        raise ValueError("workers must be >= 0")
    return workers or (os.cpu_count() or 1)


def run_cohort(records, trial, workers: int = 1, batch_size: Optional[int] = None) -> list:
    """Simulate ``records`` across ``workers`` processes; results ordered by participant id."""
    records = list(records)
    workers = min(resolve_workers(workers), max(1, len(records)))
    if workers == 1:
        runs = [simulate_record(r, trial) for r in records]
    else:
        warm_up({r.model_kind for r in records})
        if batch_size is None:
            batch_size = max(1, min(16, len(records) // (4 * workers) or 1))
        batches = [records[i:i + batch_size] for i in range(0, len(records), batch_size)]
        ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
        with cf.ProcessPoolExecutor(workers, mp_context=ctx, initializer=_worker_init,
                                    initargs=(trial,)) as pool:
            runs = [r for batch in pool.map(_worker_batch, batches) for r in batch]
    return sorted(runs, key=lambda r: r.participant_id)


def run_trial(trial, workers: Optional[int] = None, records=None, header=None) -> TrialResult:
    """Simulate every cohort member of ``trial`` and reduce to cohort statistics.

    Numeric outputs do not depend on ``workers``.
    """
    from vctrial.population import RejectionCounts, load_cohort

    if records is None:
        records, header = load_cohort(trial.cohort_path)
    header = header or {}
    kinds = {r.model_kind for r in records}
    if len(kinds) > 1:
        raise ValueError("cohort mixes model kinds")
    model = next(iter(kinds)).value if kinds else header.get("model", "")
    n_workers = resolve_workers(trial.workers if workers is None else workers)
    started = time.perf_counter()
    runs = run_cohort(records, trial, n_workers)
    wall = time.perf_counter() - started

    ok = [r for r in runs if r.failure is None]
    cohort = CohortStats.from_participants([r.stats for r in ok], model)
    rejections = RejectionCounts()
    for rec in records:
        rejections += rec.rejections
    metadata = {
        "model": model,
        "master_seed": trial.master_seed,
        "config_hash": trial.config_hash(),
        "n_participants": len(records),
        "n_simulated": len(ok),
        "n_blowups": len(runs) - len(ok),
        "failures": [r.failure for r in runs if r.failure is not None],
        "clamp_activations": sum(r.clamp_activations for r in runs),
        "rejections": rejections.as_dict(),
        "workers": n_workers,
        "wall_time_s": wall,
    }
    return TrialResult(cohort, cohort.rows, metadata, [r.stats for r in ok])
