"""Unit conversions shared by the models, protocol and controller."""

GLUCOSE_MOLAR_MASS = 180.16  # g/mol
MMOL_PER_GRAM_GLUCOSE = 1000.0 / GLUCOSE_MOLAR_MASS
MGDL_PER_MMOLL = 18.016

MU_PER_U = 1000.0
PMOL_PER_U = 6000.0

MINUTES_PER_DAY = 1440
MINUTES_PER_WEEK = 7 * MINUTES_PER_DAY


def mmol_to_mgdl(value):
    return value * MGDL_PER_MMOLL


def mgdl_to_mmol(value):
    return value / MGDL_PER_MMOLL


def uh_to_mu_min(rate_uh):
    """Pump rate in U/h to mU/min."""
    return rate_uh * MU_PER_U / 60.0


def mu_min_to_uh(rate):
    return rate * 60.0 / MU_PER_U


def uh_to_pmol_min(rate_uh):
    return rate_uh * PMOL_PER_U / 60.0


def pmol_min_to_uh(rate):
    return rate * 60.0 / PMOL_PER_U
