from abc import ABC, abstractmethod
import math


class RhoSchedule(ABC):
    """
    Abstract base class for mass-ratio schedules.

    A schedule maps the global training iteration to the fraction of mass rho that the transport
    layer routes to the real survival tokens. Implementations must provide 'rho' and
    'final_rho'.
    """

    @abstractmethod
    def rho(self, iteration: int) -> float:
        """
        Mass ratio at a given training iteration.

        Args:
            iteration (int): zero-based global iteration counter.

        Returns:
            float: rho in (0, 1].
        """
        pass

    @property
    @abstractmethod
    def final_rho(self) -> float:
        """Mass ratio once the schedule has settled; used at inference time."""
        pass


class SigmoidRamp(RhoSchedule):
    """
    sigmoid-shaped ramp from rho0 up to 1.

    rho(t) = rho0 + (1 - rho0) * exp(-5 * (1 - t / (T * I))^2) for t < T * I, then 1.

    Attributes:
        rho0 (float): mass ratio at the first iteration.
        ramp_epochs (int): number of epochs T spent ramping.
        iters_per_epoch (int): iterations I per epoch.
    """

    def __init__(self, rho0: float = 0.1, ramp_epochs: int = 10, iters_per_epoch: int = 1):
        _check_rho0(rho0)
        self.rho0 = rho0
        self.ramp_epochs = ramp_epochs
        self.iters_per_epoch = iters_per_epoch

    def rho(self, iteration: int) -> float:
        return rho_schedule(iteration, self.ramp_epochs, self.iters_per_epoch, self.rho0)

    @property
    def final_rho(self) -> float:
        return 1.0


class LinearRamp(RhoSchedule):
    """
    linear ramp from rho0 up to 1 over T * I iterations.

    Attributes:
        rho0 (float): mass ratio at the first iteration.
        ramp_epochs (int): number of epochs T spent ramping.
        iters_per_epoch (int): iterations I per epoch.
    """

    def __init__(self, rho0: float = 0.1, ramp_epochs: int = 10, iters_per_epoch: int = 1):
        _check_rho0(rho0)
        self.rho0 = rho0
        self.ramp_epochs = ramp_epochs
        self.iters_per_epoch = iters_per_epoch

    def rho(self, iteration: int) -> float:
        if iteration < 0:
            raise ValueError(f"iteration must be nonnegative, got {iteration}")
        ramp_length = self.ramp_epochs * self.iters_per_epoch
        if ramp_length <= 0 or iteration >= ramp_length:
            return 1.0
        return min(1.0, self.rho0 + (1.0 - self.rho0) * iteration / ramp_length)

    @property
    def final_rho(self) -> float:
        return 1.0


class FixedRho(RhoSchedule):
    """Constant mass ratio, no curriculum."""

    def __init__(self, value: float = 0.8):
        _check_rho0(value)
        self.value = value

    def rho(self, iteration: int) -> float:
        return self.value

    @property
    def final_rho(self) -> float:
        return self.value


def rho_schedule(t: int, ramp_epochs: int, iters_per_epoch: int, rho0: float) -> float:
    """
    Sigmoid ramp-up of the mass ratio.

    Args:
        t (int): current iteration, >= 0.
        ramp_epochs (int): ramp-up epochs T.
        iters_per_epoch (int): iterations per epoch I.
        rho0 (float): initial mass ratio.

    Returns:
        float: rho0 + (1 - rho0) * exp(-5 (1 - t/(T*I))^2) before T*I iterations, 1.0 afterwards.
    """
    if t < 0:
        raise ValueError(f"iteration must be nonnegative, got {t}")
    ramp_length = ramp_epochs * iters_per_epoch
    if ramp_length <= 0 or t >= ramp_length:
        return 1.0
    phase = 1.0 - t / ramp_length
    return min(1.0, rho0 + (1.0 - rho0) * math.exp(-5.0 * phase * phase))


def make_schedule(shape: str, rho0: float, ramp_epochs: int, iters_per_epoch: int,
                  fixed_rho: float = 0.8) -> RhoSchedule:
    """
    Build the schedule named by `shape` ('sigmoid', 'linear' or 'fixed').
    """
    if shape == "sigmoid":
        return SigmoidRamp(rho0, ramp_epochs, iters_per_epoch)
    if shape == "linear":
        return LinearRamp(rho0, ramp_epochs, iters_per_epoch)
    if shape == "fixed":
        return FixedRho(fixed_rho)
    raise ValueError(f"unknown ramp shape {shape!r}; expected sigmoid, linear or fixed")


def _check_rho0(value: float) -> None:
    if not 0.0 < value <= 1.0:
        raise ValueError(f"mass ratio must lie in (0, 1], got {value}")
