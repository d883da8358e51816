class NumericalBlowup(ArithmeticError):
    """Integration produced a non-finite state."""

    def __init__(self, t: float, index: int, value: float = float("nan")):
        super().__init__(f"non-finite state at t={t:g} min, index {index} ({value!r})")
        self.t = t
        self.index = index
        self.value = value


class NoRootError(ValueError):
    """Steady-state bracket holds no sign change."""


class DerivationInfeasible(ValueError):
    """Derived model parameters are non-physical."""


class SamplingExhausted(RuntimeError):
    """Too many consecutive rejections while sampling a participant."""


class ConfigError(ValueError):
    pass
