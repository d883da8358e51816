"""Stochastic simulation machinery shared by both physiological models.

The state evolves as ``dx = f(t, x, u, d, p) dt + sigma(t, x, u, d, p) dw`` with a
diagonal, state-independent diffusion, integrated with fixed-step
Euler-Maruyama. Inputs and disturbances are held constant between CGM
samples, which arrive every ``cgm_period`` minutes.
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numba import njit
from numba.core.registry import CPUDispatcher

from vctrial.errors import NumericalBlowup


class Purpose(enum.IntEnum):
    """Tags separating the independent random streams of one participant."""

    PROCESS_NOISE = 0
    MEASUREMENT_NOISE = 1
    SAMPLING = 2
    DEMOGRAPHICS = 3
    ANNOUNCEMENT = 4
    PROTOCOL = 5


class NoiseStream:
    """Counter-based (Philox) stream keyed by ``(master_seed, participant_id, purpose)``.

    Standard normals are served from fixed-size blocks, so the sequence a
    consumer sees does not depend on how many values it asks for per call.
    """

    BLOCK = 4096

    def __init__(self, master_seed: int, participant_id: int = 0, purpose: int = 0):
        self.key = (int(master_seed), int(participant_id), int(purpose))
        seq = np.random.SeedSequence(list(self.key))
        self.generator = np.random.Generator(np.random.Philox(seq))
        self._buf = np.empty(0)
        self._pos = 0

    def normal(self, n: int) -> np.ndarray:
        """Next ``n`` standard normal draws."""
        if n <= len(self._buf) - self._pos:
            out = self._buf[self._pos:self._pos + n]
            self._pos += n
            return out
        parts = [self._buf[self._pos:]]
        need = n - len(parts[0])
        while need > 0:
            self._buf = self.generator.standard_normal(self.BLOCK)
            take = min(need, self.BLOCK)
            parts.append(self._buf[:take])
            self._pos = take
            need -= take
        return np.concatenate(parts)

    def __repr__(self):
        return f"NoiseStream(key={self.key})"


@dataclass(frozen=True)
class SimConfig:
    step_size: float = 0.5
    cgm_period: float = 5.0
    titration_duration: float = 4 * 7 * 1440.0
    trial_duration: float = 52 * 7 * 1440.0
    deterministic: bool = False

    def __post_init__(self):
        if self.step_size <= 0 or self.cgm_period <= 0:
            raise ValueError("step_size and cgm_period must be positive")
        ratio = self.cgm_period / self.step_size
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("cgm_period must be an integer multiple of step_size")
        if self.trial_duration > 0 and self.titration_duration >= self.trial_duration:
            raise ValueError("titration_duration must be shorter than trial_duration")

    @property
    def steps_per_tick(self) -> int:
        return int(round(self.cgm_period / self.step_size))

    @property
    def n_ticks(self) -> int:
        return int(round(self.trial_duration / self.cgm_period))


@dataclass(frozen=True)
class ObservationNoise:
    variance: float = 0.0

    def __post_init__(self):
        if not self.variance >= 0:
            raise ValueError("observation noise variance must be >= 0")


@dataclass
class IntegrationDiagnostics:
    clamp_activations: int = 0


@dataclass(frozen=True, eq=False)
class SdeSystem:
    """A concrete physiology bound to the generic SDE form.

    ``drift`` and ``diffusion`` take ``(t, x, u, d, p)``; ``output`` and
    ``observation`` take ``(t, x, p)``. ``u``, ``d`` and ``p`` are float
    vectors. When ``drift`` is a numba dispatcher the integrator runs compiled.
    """

    name: str
    state_names: tuple
    drift: Callable
    diffusion: Callable
    output: Callable
    observation: Callable
    nonneg_mask: np.ndarray = field(repr=False)

    @property
    def state_dimension(self) -> int:
        return len(self.state_names)

    def index(self, state_name: str) -> int:
        return self.state_names.index(state_name)


def wiener_increments(dim: int, dt: float, rng: NoiseStream) -> np.ndarray:
    """``dim`` independent N(0, dt) draws."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt!r}")
    if dim == 0:
        return np.empty(0)
    return math.sqrt(dt) * rng.normal(dim)


def _em_loop_py(drift, t0, x, u, d, p, dt, sigma, active, dw, mask, out):
    dim = x.shape[0]
    cur = x.copy()
    clamps = 0
    for i in range(out.shape[0]):
        f = drift(t0 + i * dt, cur, u, d, p)
        cur = cur + f * dt
        for a in range(active.shape[0]):
            j = active[a]
            cur[j] = cur[j] + sigma[j] * dw[i, a]
        for j in range(dim):
            v = cur[j]
            if not math.isfinite(v):
                return i, j, clamps
            if mask[j] and v < 0.0:
                cur[j] = 0.0
                clamps += 1
        out[i] = cur
    return -1, -1, clamps


@functools.lru_cache(maxsize=None)
def compiled_em_loop(drift):
    """Compiled Euler-Maruyama loop specialised to one drift function.

    Writes each post-step state to ``out`` and returns
    ``(failed_step, failed_index, clamp_count)`` with ``-1`` indices on success.
    """

    @njit
    def em_loop(t0, x, u, d, p, dt, sigma, active, dw, mask, out):
        dim = x.shape[0]
        cur = x.copy()
        clamps = 0
        for i in range(out.shape[0]):
            f = drift(t0 + i * dt, cur, u, d, p)
            for j in range(dim):
                cur[j] = cur[j] + f[j] * dt
            for a in range(active.shape[0]):
                j = active[a]
                cur[j] = cur[j] + sigma[j] * dw[i, a]
            for j in range(dim):
                v = cur[j]
                if not np.isfinite(v):
                    return i, j, clamps
                if mask[j] and v < 0.0:
                    cur[j] = 0.0
                    clamps += 1
            for j in range(dim):
                out[i, j] = cur[j]
        return -1, -1, clamps

    return em_loop


def _em_loop_for(system: SdeSystem):
    if isinstance(system.drift, CPUDispatcher):
        return compiled_em_loop(system.drift)
    return functools.partial(_em_loop_py, system.drift)


def _as_vec(v) -> np.ndarray:
    return np.atleast_1d(np.asarray(v, dtype=np.float64))


def _integrate(system, t0, x, u, d, p, dt, n_steps, rng, deterministic, diagnostics):
    x = _as_vec(x)
    u = _as_vec(u)
    d = _as_vec(d)
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt!r}")
    if not np.all(np.isfinite(x)):
        raise NumericalBlowup(t0, int(np.flatnonzero(~np.isfinite(x))[0]))
    if deterministic:
        sigma = np.zeros_like(x)
    else:
        sigma = _as_vec(system.diffusion(t0, x, u, d, p))
    active = np.flatnonzero(sigma > 0.0)
    # Zero-diffusion coordinates get no draws: their increments never enter the state.
    if len(active):
        dw = wiener_increments(n_steps * len(active), dt, rng).reshape(n_steps, len(active))
    else:
        dw = np.empty((n_steps, 0))
    out = np.empty((n_steps, x.shape[0]))
    step, idx, clamps = _em_loop_for(system)(
        float(t0), x, u, d, p, float(dt), sigma, active, dw, system.nonneg_mask, out)
    if diagnostics is not None:
        diagnostics.clamp_activations += clamps
    if step >= 0:
        raise NumericalBlowup(t0 + (step + 1) * dt, int(idx))
    return out


def em_step(system: SdeSystem, t, x, u, d, p, dt, rng: Optional[NoiseStream] = None,
            deterministic: bool = False,
            diagnostics: Optional[IntegrationDiagnostics] = None) -> np.ndarray:
    """One Euler-Maruyama step followed by the non-negativity clamp."""
    return _integrate(system, t, x, u, d, p, dt, 1, rng, deterministic, diagnostics)[0]


def simulate_control_interval(system: SdeSystem, t_k, x, u_k, d_k, p, config: SimConfig,
                              rng: Optional[NoiseStream] = None, sink=None,
                              diagnostics: Optional[IntegrationDiagnostics] = None) -> np.ndarray:
    """Integrate from ``t_k`` to ``t_k + cgm_period`` with ``u_k``, ``d_k`` held.

    ``sink(t, z)`` is called after every internal step with the model output.
    Equivalent to ``config.steps_per_tick`` successive :func:`em_step` calls.
    """
    n = config.steps_per_tick
    dt = config.step_size
    traj = _integrate(system, t_k, x, u_k, d_k, p, dt, n, rng, config.deterministic, diagnostics)
    if sink is not None:
        for i in range(n):
            t = t_k + (i + 1) * dt
            sink(t, system.output(t, traj[i], p))
    return traj[-1].copy()


def observe(system: SdeSystem, t_k, x, p, noise: ObservationNoise,
            rng: Optional[NoiseStream] = None, deterministic: bool = False) -> float:
    """Noisy CGM reading ``g(t_k, x, p) + v`` with ``v ~ N(0, R)``, floored at 0."""
    x = _as_vec(x)
    if not np.all(np.isfinite(x)):
        raise NumericalBlowup(t_k, int(np.flatnonzero(~np.isfinite(x))[0]))
    y = float(system.observation(t_k, x, p))
    if noise.variance > 0 and not deterministic:
        y = y + math.sqrt(noise.variance) * float(rng.normal(1)[0])
    return max(y, 0.0)
