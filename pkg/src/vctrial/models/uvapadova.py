"""Modified UVA/Padova model with Hovorka's meal absorption ("model B").

Units: glucose masses in mg/kg, concentrations in mg/dL, insulin masses in
pmol/kg, insulin concentrations in pmol/L, infusion ``u_I`` in pmol/min and
meal rate ``D`` in mg/min.
"""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass, fields

import numpy as np
from numba import njit
from scipy.optimize import brentq

from vctrial.errors import DerivationInfeasible, NoRootError
from vctrial.simcore import SdeSystem

GP_DIFFUSION_MG = 270.24  # mg/min^(3/2), divided by BW for the G_p state
U_MAX = 600.0  # pmol/min (6 U/h), steady-state search bracket

STATE_NAMES = ("G_p", "G_t", "I_l", "I_p", "X", "D1", "D2", "I_d", "I_1",
               "I_sc1", "I_sc2", "G_sc")
GP, GT, IL, IP, X, D1, D2, ID, I1, ISC1, ISC2, GSC = range(12)


@dataclass(frozen=True)
class UvaPadovaParams:
    BW: float
    k_1: float
    k_2: float
    V_g: float
    G_b: float
    HE_b: float
    CL: float
    m_1: float
    V_i: float
    I_b: float
    tau_D: float
    A_G: float
    EGP_b: float
    k_p2: float
    k_p3: float
    k_i: float
    F_cns: float
    V_mx: float
    K_m0: float
    p_2U: float
    k_e1: float
    k_e2: float
    k_a1: float
    k_a2: float
    k_d: float
    k_sc: float

    def validate(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{f.name} must be positive, got {v!r}")
        if self.HE_b >= 1:
            raise ValueError("HE_b must be < 1")
        return self

    @classmethod
    def names(cls):
        return tuple(f.name for f in fields(cls))

    def to_array(self, positive_ka1_term: bool = False) -> np.ndarray:
        """Packed drift vector: fields, derived values, then the I_sc1 sign switch."""
        dp = derive_uvp(self)
        return np.array(astuple(self) + astuple(dp) + (1.0 if positive_ka1_term else 0.0,),
                        dtype=np.float64)


@dataclass(frozen=True)
class DerivedUvpParams:
    m_2: float
    m_3: float
    m_4: float
    V_m0: float
    G_tb: float


(P_BW, P_K1, P_K2, P_VG, P_GB, P_HEB, P_CL, P_M1, P_VI, P_IB, P_TAU_D, P_A_G, P_EGPB,
 P_KP2, P_KP3, P_KI, P_FCNS, P_VMX, P_KM0, P_P2U, P_KE1, P_KE2, P_KA1, P_KA2, P_KD,
 P_KSC, P_M2, P_M3, P_M4, P_VM0, P_GTB, P_ISC_SIGN) = range(32)


def derive_uvp(p: UvaPadovaParams) -> DerivedUvpParams:
    """Insulin kinetic rates and basal glucose quantities.

    Raises :class:`DerivationInfeasible` unless ``G_tb > 0`` and ``V_m0 > 0``.
    """
    if not p.HE_b < 1:
        raise DerivationInfeasible("HE_b must be < 1")
    if not p.k_2 > 0:
        raise DerivationInfeasible("k_2 must be positive")
    m_2 = 3.0 * p.CL / (5.0 * p.HE_b * p.V_i * p.BW)
    m_3 = p.HE_b * p.m_1 / (1.0 - p.HE_b)
    m_4 = 2.0 * p.CL / (5.0 * p.V_i * p.BW)
    G_tb = (p.F_cns - p.EGP_b + p.k_1 * p.G_b) / p.k_2
    if not G_tb > 0:
        raise DerivationInfeasible(f"G_tb = {G_tb!r} <= 0")
    V_m0 = (p.EGP_b - p.F_cns) * (p.K_m0 + G_tb) / G_tb
    if not V_m0 > 0:
        raise DerivationInfeasible(f"V_m0 = {V_m0!r} <= 0")
    return DerivedUvpParams(m_2, m_3, m_4, V_m0, G_tb)


@njit(cache=True)
def uvp_drift(t, x, u, d, p):
    BW = p[P_BW]
    tau_D = p[P_TAU_D]
    I_b = p[P_IB]
    Gp = x[GP]
    Gt = x[GT]

    I = x[IP] / p[P_VI]
    EGP = max(0.0, p[P_EGPB] - p[P_KP2] * (Gp - p[P_GB]) - p[P_KP3] * (x[ID] - I_b))
    Ra_m = x[D2] / (BW * tau_D)
    U_id = (p[P_VM0] + p[P_VMX] * x[X]) * Gt / (p[P_KM0] + Gt)
    E = max(0.0, p[P_KE1] * (Gp - p[P_KE2]))
    Ra_Isc = p[P_KA1] * x[ISC1] + p[P_KA2] * x[ISC2]

    out = np.empty(12)
    out[GP] = EGP + Ra_m - p[P_FCNS] - E - p[P_K1] * Gp + p[P_K2] * Gt
    out[GT] = -U_id + p[P_K1] * Gp - p[P_K2] * Gt
    out[IL] = -(p[P_M1] + p[P_M3]) * x[IL] + p[P_M2] * x[IP]
    out[IP] = -(p[P_M2] + p[P_M4]) * x[IP] + p[P_M1] * x[IL] + Ra_Isc
    out[X] = -p[P_P2U] * x[X] + p[P_P2U] * (I - I_b)
    out[D1] = p[P_A_G] * d[0] - x[D1] / tau_D
    out[D2] = x[D1] / tau_D - x[D2] / tau_D
    out[ID] = -p[P_KI] * (x[ID] - x[I1])
    out[I1] = -p[P_KI] * (x[I1] - I)
    if p[P_ISC_SIGN] != 0.0:
        out[ISC1] = -p[P_KD] * x[ISC1] + p[P_KA1] * x[ISC1] + u[0] / BW
    else:
        out[ISC1] = -(p[P_KD] + p[P_KA1]) * x[ISC1] + u[0] / BW
    out[ISC2] = p[P_KD] * x[ISC1] - p[P_KA2] * x[ISC2]
    out[GSC] = -p[P_KSC] * x[GSC] + p[P_KSC] * Gp / p[P_VG]
    return out


def uvp_diffusion(p, coefficient: float = GP_DIFFUSION_MG, deterministic: bool = False):
    sigma = np.zeros(12)
    if not deterministic:
        sigma[GP] = coefficient / p[P_BW]
    return sigma


@njit(cache=True)
def uvp_output(t, x, p):
    return x[GP] / p[P_VG]


@njit(cache=True)
def uvp_observe(t, x, p):
    return x[GSC]


def make_system(gp_diffusion: float = GP_DIFFUSION_MG) -> SdeSystem:
    def diffusion(t, x, u, d, p):
        return uvp_diffusion(p, gp_diffusion)

    mask = np.ones(12, dtype=np.bool_)
    mask[X] = False  # X = I - I_b offset dynamics, may go negative
    return SdeSystem(
        name="uvapadova",
        state_names=STATE_NAMES,
        drift=uvp_drift,
        diffusion=diffusion,
        output=uvp_output,
        observation=uvp_observe,
        nonneg_mask=mask,
    )


SYSTEM = make_system()


def basal_state(p: np.ndarray, u: float, G: float) -> np.ndarray:
    """State with ``Gdot_p = 0`` at plasma glucose ``G`` under constant infusion ``u``.

    Only ``Gdot_t`` is left unbalanced; :func:`uvp_steady_state` zeroes it.
    """
    BW = p[P_BW]
    x = np.zeros(12)
    if p[P_ISC_SIGN] != 0.0:
        x[ISC1] = u / (BW * (p[P_KD] - p[P_KA1]))
    else:
        x[ISC1] = u / (BW * (p[P_KD] + p[P_KA1]))
    x[ISC2] = p[P_KD] * x[ISC1] / p[P_KA2]
    ra = p[P_KA1] * x[ISC1] + p[P_KA2] * x[ISC2]
    m1, m2, m3, m4 = p[P_M1], p[P_M2], p[P_M3], p[P_M4]
    x[IP] = ra / (m2 + m4 - m1 * m2 / (m1 + m3))
    x[IL] = m2 * x[IP] / (m1 + m3)
    I = x[IP] / p[P_VI]
    x[ID] = x[I1] = I
    x[X] = I - p[P_IB]
    x[GP] = G * p[P_VG]
    x[GSC] = G
    Gp = x[GP]
    EGP = max(0.0, p[P_EGPB] - p[P_KP2] * (Gp - p[P_GB]) - p[P_KP3] * (I - p[P_IB]))
    E = max(0.0, p[P_KE1] * (Gp - p[P_KE2]))
    x[GT] = (p[P_FCNS] + E + p[P_K1] * Gp - EGP) / p[P_K2]
    return x


def uvp_steady_state(params, G_target: float, u_max: float = U_MAX,
                     positive_ka1_term: bool = False):
    """Meal-free steady state at plasma glucose ``G_target`` (mg/dL).

    Returns ``(state, u_ss)`` with ``u_ss`` in pmol/min. Raises
    :class:`NoRootError` if no infusion in ``[0, u_max]`` balances glucose or
    the balancing state has negative masses.
    """
    if isinstance(params, UvaPadovaParams):
        p = params.to_array(positive_ka1_term)
    else:
        p = np.asarray(params, dtype=np.float64)
    if not G_target * p[P_VG] > 0:
        raise ValueError("G_target must be positive")
    zero = np.zeros(1)

    def residual(u):
        return uvp_drift(0.0, basal_state(p, u, G_target), np.array([u]), zero, p)[GT]

    r_lo, r_hi = residual(0.0), residual(u_max)
    if not (np.isfinite(r_lo) and np.isfinite(r_hi)) or r_lo * r_hi > 0:
        raise NoRootError(f"no steady-state infusion in [0, {u_max}] pmol/min")
    if r_lo == 0.0:
        u_ss = 0.0
    else:
        u_ss = brentq(residual, 0.0, u_max, xtol=1e-15, rtol=1e-15, maxiter=200)
    x = basal_state(p, u_ss, G_target)
    mask = SYSTEM.nonneg_mask
    if np.any(x[mask] < 0):
        raise NoRootError("steady state has negative masses")
    return x, u_ss
