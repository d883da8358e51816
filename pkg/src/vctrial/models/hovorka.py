"""Hovorka glucose-insulin model with a first-order CGM lag ("model A").

Units: insulin masses in mU, insulin infusion ``u_I`` in mU/min, glucose
masses in mmol, meal rate ``D`` in mmol/min, concentrations in mmol/L.
Volumes and fluxes are whole-body values (see :mod:`vctrial.population`
for the per-kg to whole-body scaling at sampling time).
"""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass, fields

import numpy as np
from numba import njit
from scipy.optimize import brentq

from vctrial.errors import NoRootError
from vctrial.simcore import SdeSystem

# k_bi = S_i * k_ai * SENSITIVITY_SCALE, with S_i the tabulated SIT/SID/SIE.
SENSITIVITY_SCALE = 1e-4
Q1_DIFFUSION = 1.5  # mmol/min^(3/2)
TAU_IG = 15.0  # min
U_MAX = 100.0  # mU/min, steady-state search bracket

STATE_NAMES = ("S1", "S2", "I", "x1", "x2", "x3", "D1", "D2", "Q1", "Q2", "G_I")
S1, S2, I, X1, X2, X3, D1, D2, Q1, Q2, G_I = range(11)


@dataclass(frozen=True)
class HovorkaParams:
    tau_S: float
    V_I: float
    k_e: float
    k_a1: float
    k_a2: float
    k_a3: float
    SIT: float
    SID: float
    SIE: float
    A_G: float
    tau_D: float
    k_12: float
    EGP_0: float
    F_01: float
    V_G: float
    tau_IG: float = TAU_IG
    BW: float = 70.0

    def validate(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{f.name} must be positive, got {v!r}")
        if self.A_G > 1.2:
            raise ValueError("A_G must be <= 1.2")
        return self

    @classmethod
    def names(cls):
        return tuple(f.name for f in fields(cls))

    def to_array(self) -> np.ndarray:
        """Packed vector for the drift: the fields followed by k_b1..k_b3."""
        return np.array(astuple(self) + derive_kb(self), dtype=np.float64)


# indices into the packed vector
(P_TAU_S, P_V_I, P_K_E, P_KA1, P_KA2, P_KA3, P_SIT, P_SID, P_SIE, P_A_G, P_TAU_D,
 P_K12, P_EGP0, P_F01, P_V_G, P_TAU_IG, P_BW, P_KB1, P_KB2, P_KB3) = range(20)


def derive_kb(params: HovorkaParams, scale: float = SENSITIVITY_SCALE):
    """Activation rates ``(k_b1, k_b2, k_b3)`` from the insulin sensitivities."""
    return (params.SIT * params.k_a1 * scale,
            params.SID * params.k_a2 * scale,
            params.SIE * params.k_a3 * scale)


@njit(cache=True)
def hovorka_drift(t, x, u, d, p):
    tau_S = p[P_TAU_S]
    tau_D = p[P_TAU_D]
    V_G = p[P_V_G]
    F01 = p[P_F01]

    G = x[Q1] / V_G
    if G >= 4.5:
        F01c = F01
    else:
        F01c = F01 * G / 4.5
    if G >= 9.0:
        FR = 0.003 * (G - 9.0) * V_G
    else:
        FR = 0.0

    out = np.empty(11)
    out[S1] = u[0] - x[S1] / tau_S
    out[S2] = x[S1] / tau_S - x[S2] / tau_S
    out[I] = x[S2] / (p[P_V_I] * tau_S) - p[P_K_E] * x[I]
    out[X1] = p[P_KB1] * x[I] - p[P_KA1] * x[X1]
    out[X2] = p[P_KB2] * x[I] - p[P_KA2] * x[X2]
    out[X3] = p[P_KB3] * x[I] - p[P_KA3] * x[X3]
    out[D1] = p[P_A_G] * d[0] - x[D1] / tau_D
    out[D2] = x[D1] / tau_D - x[D2] / tau_D
    out[Q1] = (x[D2] / tau_D - F01c - FR - x[X1] * x[Q1] + p[P_K12] * x[Q2]
               + p[P_EGP0] * (1.0 - x[X3]))
    out[Q2] = x[X1] * x[Q1] - p[P_K12] * x[Q2] - x[X2] * x[Q2]
    out[G_I] = (G - x[G_I]) / p[P_TAU_IG]
    return out


def hovorka_diffusion(p, coefficient: float = Q1_DIFFUSION, deterministic: bool = False):
    sigma = np.zeros(11)
    if not deterministic:
        sigma[Q1] = coefficient
    return sigma


@njit(cache=True)
def hovorka_output(t, x, p):
    return x[Q1] / p[P_V_G]


@njit(cache=True)
def hovorka_observe(t, x, p):
    return x[G_I]


def make_system(q1_diffusion: float = Q1_DIFFUSION) -> SdeSystem:
    def diffusion(t, x, u, d, p):
        return hovorka_diffusion(p, q1_diffusion)

    return SdeSystem(
        name="hovorka",
        state_names=STATE_NAMES,
        drift=hovorka_drift,
        diffusion=diffusion,
        output=hovorka_output,
        observation=hovorka_observe,
        nonneg_mask=np.ones(11, dtype=np.bool_),
    )


SYSTEM = make_system()


def _basal_state(p: np.ndarray, u: float, G: float) -> np.ndarray:
    x = np.zeros(11)
    x[S1] = x[S2] = u * p[P_TAU_S]
    x[I] = u / (p[P_V_I] * p[P_K_E])
    x[X1] = p[P_KB1] / p[P_KA1] * x[I]
    x[X2] = p[P_KB2] / p[P_KA2] * x[I]
    x[X3] = p[P_KB3] / p[P_KA3] * x[I]
    x[Q1] = G * p[P_V_G]
    x[Q2] = x[X1] * x[Q1] / (p[P_K12] + x[X2])
    x[G_I] = G
    return x


def hovorka_steady_state(params, G_target: float = 6.0, u_max: float = U_MAX):
    """Meal-free steady state at plasma glucose ``G_target`` (mmol/L).

    Returns ``(state, u_ss)`` with ``u_ss`` the constant infusion in mU/min.
    Raises :class:`NoRootError` when no infusion in ``[0, u_max]`` holds the target.
    """
    if G_target <= 4.5:
        raise ValueError("G_target must exceed 4.5 mmol/L")
    p = params.to_array() if isinstance(params, HovorkaParams) else np.asarray(params, float)
    zero = np.zeros(1)

    def residual(u):
        return hovorka_drift(0.0, _basal_state(p, u, G_target), np.array([u]), zero, p)[Q1]

    r_lo, r_hi = residual(0.0), residual(u_max)
    if not (np.isfinite(r_lo) and np.isfinite(r_hi)) or r_lo * r_hi > 0:
        raise NoRootError(f"no steady-state infusion in [0, {u_max}] mU/min")
    if r_lo == 0.0:
        u_ss = 0.0
    else:
        u_ss = brentq(residual, 0.0, u_max, xtol=1e-15, rtol=1e-15, maxiter=200)
    return _basal_state(p, u_ss, G_target), u_ss
