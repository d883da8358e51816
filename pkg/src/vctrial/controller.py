"""AP algorithm interface and the reference dual-integrator controller.

A controller is an ``(update, output)`` pair over an opaque state. ``update``
runs exactly once per CGM sample, before ``output``. The trial runner only
relies on that contract.

The reference controller keeps two integrators (basal rate and carb ratio),
adds a PD correction with deadband, error truncation and a hypoglycaemia
gain, suspends delivery on low or falling glucose, and boluses announced
meals. Its logic lives in compiled kernels operating on flat float arrays so
that the compiled trial loop and the Python API share one implementation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from typing import Protocol as TypingProtocol

import numpy as np
from numba import njit

CARB_RATIO_MIN = 3.0
CARB_RATIO_MAX = 30.0


@dataclass(frozen=True)
class ControllerHyperparams:
    y_bar: float = 6.0  # mmol/L
    deadband_halfwidth: float = 0.3  # mmol/L
    Kp: float = 0.05  # (U/h)/(mmol/L)
    Kd: float = 6.0  # (U/h)/(mmol/L/min)
    Ki_basal: float = 5e-6  # (U/h)/(mmol/L min)
    Ki_bolus: float = 0.02  # (g/U)/(mmol/L)
    error_truncation: float = 3.0  # mmol/L
    hypo_gain: float = 3.0
    suspend_threshold: float = 3.9  # mmol/L
    resume_threshold: float = 5.0  # mmol/L
    predictive_suspend_horizon: float = 20.0  # min
    initial_basal: float = 1.0  # U/h
    initial_carb_ratio: float = 10.0  # g/U
    max_basal: float = 5.0  # U/h
    max_bolus: float = 15.0  # U
    derivative_filter_window: int = 4  # samples
    postprandial_window: float = 240.0  # min
    sample_period: float = 5.0  # min
    carb_ratio_rule: float = 500.0  # g; 0 keeps initial_carb_ratio when personalising

    def __post_init__(self):
        if not self.resume_threshold > self.suspend_threshold:
            raise ValueError("resume_threshold must exceed suspend_threshold")
        if self.hypo_gain < 1:
            raise ValueError("hypo_gain must be >= 1")
        for name in ("Kp", "Kd", "Ki_basal", "Ki_bolus", "deadband_halfwidth", "carb_ratio_rule",
                     "error_truncation", "max_basal", "max_bolus", "initial_basal",
                     "predictive_suspend_horizon", "postprandial_window"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.initial_carb_ratio <= 0 or self.sample_period <= 0:
            raise ValueError("initial_carb_ratio and sample_period must be positive")
        if self.derivative_filter_window < 1:
            raise ValueError("derivative_filter_window must be >= 1")

    def to_array(self) -> np.ndarray:
        return np.array([float(getattr(self, f.name)) for f in fields(self)])

    def with_(self, **changes) -> "ControllerHyperparams":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return asdict(self)


(H_YBAR, H_DEADBAND, H_KP, H_KD, H_KI_BASAL, H_KI_BOLUS, H_TRUNC, H_HYPO, H_SUSPEND,
 H_RESUME, H_HORIZON, H_INIT_BASAL, H_INIT_CR, H_MAX_BASAL, H_MAX_BOLUS, H_WINDOW,
 H_PP_WINDOW, H_DT, H_CR_RULE) = range(19)

# flat state layout; the CGM ring (oldest first) follows S_RING
(S_BASAL, S_CR, S_SUSPENDED, S_PP_TIMER, S_PP_SUM, S_PP_COUNT, S_N_RING, S_LAST_MEAL,
 S_LAST_MEAL_T, S_CLOCK, S_RING) = range(11)


@njit(cache=True)
def shaped_error(y, h):
    """Deadband, then truncation, then the hypoglycaemia gain on negative errors."""
    e = y - h[H_YBAR]
    db = h[H_DEADBAND]
    if e > db:
        e = e - db
    elif e < -db:
        e = e + db
    else:
        return 0.0
    trunc = h[H_TRUNC]
    if e > trunc:
        e = trunc
    elif e < -trunc:
        e = -trunc
    if e < 0.0:
        e = e * h[H_HYPO]
    return e


@njit(cache=True)
def ring_slope(s, h):
    """Least-squares slope (mmol/L/min) of the buffered CGM samples."""
    n = int(s[S_N_RING])
    if n < 2:
        return 0.0
    w = int(h[H_WINDOW])
    start = S_RING + w - n
    tbar = (n - 1) / 2.0
    ybar = 0.0
    for i in range(n):
        ybar += s[start + i]
    ybar /= n
    num = 0.0
    den = 0.0
    for i in range(n):
        dt = i - tbar
        num += dt * (s[start + i] - ybar)
        den += dt * dt
    return num / (den * h[H_DT])


@njit(cache=True)
def update_core(s, y, d_hat, h):
    dt = h[H_DT]
    w = int(h[H_WINDOW])
    for i in range(w - 1):
        s[S_RING + i] = s[S_RING + i + 1]
    s[S_RING + w - 1] = y
    if s[S_N_RING] < w:
        s[S_N_RING] += 1
    slope = ring_slope(s, h)
    e = shaped_error(y, h)

    # carb-ratio integrator: second half of the postprandial window
    if s[S_PP_TIMER] >= 0.0:
        s[S_PP_TIMER] += dt
        if s[S_PP_TIMER] > 0.5 * h[H_PP_WINDOW]:
            s[S_PP_SUM] += e
            s[S_PP_COUNT] += 1.0
        if s[S_PP_TIMER] >= h[H_PP_WINDOW]:
            if s[S_PP_COUNT] > 0:
                cr = s[S_CR] - h[H_KI_BOLUS] * s[S_PP_SUM] / s[S_PP_COUNT]
                s[S_CR] = min(max(cr, CARB_RATIO_MIN), CARB_RATIO_MAX)
            s[S_PP_TIMER] = -1.0
            s[S_PP_SUM] = 0.0
            s[S_PP_COUNT] = 0.0
    if d_hat > 0.0:
        s[S_PP_TIMER] = 0.0
        s[S_PP_SUM] = 0.0
        s[S_PP_COUNT] = 0.0
        s[S_LAST_MEAL] = d_hat
        s[S_LAST_MEAL_T] = s[S_CLOCK]

    # suspend switching with hysteresis and linear prediction
    if s[S_SUSPENDED] != 0.0:
        if y > h[H_RESUME]:
            s[S_SUSPENDED] = 0.0
    elif y < h[H_SUSPEND] or y + slope * h[H_HORIZON] < h[H_SUSPEND]:
        s[S_SUSPENDED] = 1.0

    # basal integrator, frozen after meals and while suspended
    if s[S_PP_TIMER] < 0.0 and s[S_SUSPENDED] == 0.0:
        b = s[S_BASAL] + h[H_KI_BASAL] * e * dt
        s[S_BASAL] = min(max(b, 0.0), h[H_MAX_BASAL])
    s[S_CLOCK] += dt


@njit(cache=True)
def output_core(s, y, d_hat, h):
    """``(basal U/h, bolus U)`` for the current sample."""
    if s[S_SUSPENDED] != 0.0:
        return 0.0, 0.0
    e = shaped_error(y, h)
    basal = s[S_BASAL] + h[H_KP] * e + h[H_KD] * ring_slope(s, h)
    basal = min(max(basal, 0.0), h[H_MAX_BASAL])
    bolus = 0.0
    if d_hat > 0.0 and y > h[H_SUSPEND]:
        bolus = min(d_hat / s[S_CR], h[H_MAX_BOLUS])
    return basal, bolus


BASAL_FRACTION_OF_TDD = 0.5


def personalize(p: ControllerHyperparams, basal_uh: float) -> ControllerHyperparams:
    """Start the basal integrator at ``basal_uh`` and, with a nonzero ``carb_ratio_rule``,
    the carb ratio at ``rule / TDD`` with TDD estimated as twice the daily basal."""
    changes = {"initial_basal": float(basal_uh)}
    if p.carb_ratio_rule > 0 and basal_uh > 0:
        tdd = 24.0 * basal_uh / BASAL_FRACTION_OF_TDD
        changes["initial_carb_ratio"] = min(max(p.carb_ratio_rule / tdd, CARB_RATIO_MIN),
                                            CARB_RATIO_MAX)
    return p.with_(**changes)


@dataclass(frozen=True)
class ControllerState:
    basal_estimate: float
    carb_ratio_estimate: float
    last_cgm_values: tuple = ()
    suspended: bool = False
    last_meal_grams: float = 0.0
    last_meal_time: float = -1.0
    postprandial_timer: float = -1.0
    postprandial_error_sum: float = 0.0
    postprandial_samples: int = 0
    clock: float = 0.0

    @classmethod
    def initial(cls, p: ControllerHyperparams) -> "ControllerState":
        return cls(basal_estimate=p.initial_basal, carb_ratio_estimate=p.initial_carb_ratio)

    def to_array(self, window: int) -> np.ndarray:
        s = np.zeros(S_RING + window)
        s[S_BASAL] = self.basal_estimate
        s[S_CR] = self.carb_ratio_estimate
        s[S_SUSPENDED] = 1.0 if self.suspended else 0.0
        s[S_PP_TIMER] = self.postprandial_timer
        s[S_PP_SUM] = self.postprandial_error_sum
        s[S_PP_COUNT] = self.postprandial_samples
        ring = self.last_cgm_values[-window:]
        s[S_N_RING] = len(ring)
        s[S_LAST_MEAL] = self.last_meal_grams
        s[S_LAST_MEAL_T] = self.last_meal_time
        s[S_CLOCK] = self.clock
        if ring:
            s[S_RING + window - len(ring):] = ring
        return s

    @classmethod
    def from_array(cls, s: np.ndarray) -> "ControllerState":
        n = int(s[S_N_RING])
        ring = tuple(float(v) for v in s[len(s) - n:]) if n else ()
        return cls(
            basal_estimate=float(s[S_BASAL]),
            carb_ratio_estimate=float(s[S_CR]),
            last_cgm_values=ring,
            suspended=bool(s[S_SUSPENDED]),
            last_meal_grams=float(s[S_LAST_MEAL]),
            last_meal_time=float(s[S_LAST_MEAL_T]),
            postprandial_timer=float(s[S_PP_TIMER]),
            postprandial_error_sum=float(s[S_PP_SUM]),
            postprandial_samples=int(s[S_PP_COUNT]),
            clock=float(s[S_CLOCK]),
        )


def controller_update(xc: ControllerState, y_k: float, d_hat_k: float,
                      p: ControllerHyperparams) -> ControllerState:
    """Advance the reference controller by one CGM sample (mmol/L, announced grams)."""
    s = xc.to_array(p.derivative_filter_window)
    update_core(s, float(y_k), float(d_hat_k), p.to_array())
    return ControllerState.from_array(s)


def controller_output(xc: ControllerState, y_k: float, d_hat_k: float,
                      p: ControllerHyperparams):
    """``(basal_rate U/h, bolus U)`` after :func:`controller_update` for this sample."""
    s = xc.to_array(p.derivative_filter_window)
    return output_core(s, float(y_k), float(d_hat_k), p.to_array())


class APController(TypingProtocol):
    def initial_state(self): ...

    def update(self, state, y_k: float, d_hat_k: float): ...

    def output(self, state, y_k: float, d_hat_k: float) -> tuple: ...


class ReferenceController:
    """Object form of :func:`controller_update` / :func:`controller_output`."""

    def __init__(self, hyperparams: ControllerHyperparams = ControllerHyperparams()):
        self.hyperparams = hyperparams

    def initial_state(self) -> ControllerState:
        return ControllerState.initial(self.hyperparams)

    def update(self, state, y_k, d_hat_k):
        return controller_update(state, y_k, d_hat_k, self.hyperparams)

    def output(self, state, y_k, d_hat_k):
        return controller_output(state, y_k, d_hat_k, self.hyperparams)


class ConstantBasalController:
    """Fixed basal rate, no boluses."""

    def __init__(self, rate_uh: float):
        self.rate_uh = float(rate_uh)

    def initial_state(self):
        return None

    def update(self, state, y_k, d_hat_k):
        return state

    def output(self, state, y_k, d_hat_k):
        return self.rate_uh, 0.0


def ZeroController():
    return ConstantBasalController(0.0)
