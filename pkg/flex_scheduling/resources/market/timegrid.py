"""Dual-resolution time structure for day-ahead and real-time markets.

The day-ahead market (DA) is cleared hourly, the real-time market (RT)
every 15 minutes. TimeGrid owns every conversion between the two so
that optimizers never do raw slot arithmetic.

Hours and slots are 0-based: hour 0 covers 00:00-01:00 and maps to
RT slots 0..3.
"""

# %%
from dataclasses import dataclass
import numpy as np

QUARTERS_PER_HOUR = 4
DT_DA = 1.0
DT_RT = 0.25


# %%
@dataclass(frozen=True)
class TimeGrid:
    """Hourly DA grid aligned with a quarter-hourly RT grid.

    Parameters
    ----------
    hours : int
        DA horizon T, in hours
    horizon_hours : int
        MPC lookahead T_H, in hours (1 <= T_H <= T)
    """

    hours: int = 24
    horizon_hours: int = 3

    def __post_init__(self):
        if self.hours < 1:
            raise ValueError(f"ERROR: hours must be >= 1, got {self.hours}")
        if not 1 <= self.horizon_hours <= self.hours:
            raise ValueError(
                f"ERROR: horizon_hours must lie in [1, {self.hours}], "
                f"got {self.horizon_hours}"
            )

    @property
    def dt_da(self):
        return DT_DA

    @property
    def dt_rt(self):
        return DT_RT

    @property
    def rt_len(self):
        return QUARTERS_PER_HOUR * self.hours

    @property
    def window_len(self):
        """Full (untruncated) MPC window length in RT slots."""
        return QUARTERS_PER_HOUR * self.horizon_hours

    def _check_hour(self, hour):
        if not 0 <= hour < self.hours:
            raise IndexError(
                f"ERROR: hour {hour} outside day of {self.hours} hours"
            )

    def hour_to_quarters(self, hour):
        """Return the RT slots covered by a DA hour.

        Parameters
        ----------
        hour : int
            0-based DA hour

        Returns
        -------
        range
            four consecutive RT slot indices
        """
        self._check_hour(hour)
        start = QUARTERS_PER_HOUR * hour
        return range(start, start + QUARTERS_PER_HOUR)

    def slot_to_hour(self, slot):
        """Return the DA hour containing an RT slot."""
        if not 0 <= slot < self.rt_len:
            raise IndexError(f"ERROR: slot {slot} outside day of {self.rt_len} slots")
        return slot // QUARTERS_PER_HOUR

    def upsample_hourly(self, values):
        """Hold each hourly power value constant over its four quarters.

        Parameters
        ----------
        values : array-like
            hourly power, length T

        Returns
        -------
        numpy.ndarray
            quarter-hourly power, length 4T
        """
        values = np.asarray(values, dtype=float)
        if values.shape != (self.hours,):
            raise ValueError(
                f"ERROR: expected hourly vector of length {self.hours}, "
                f"got shape {values.shape}"
            )
        return np.repeat(values, QUARTERS_PER_HOUR)

    def average_quarters(self, values):
        """Average a quarter-hourly vector to hourly resolution."""
        values = np.asarray(values, dtype=float)
        if values.shape != (self.rt_len,):
            raise ValueError(
                f"ERROR: expected RT vector of length {self.rt_len}, "
                f"got shape {values.shape}"
            )
        return values.reshape(self.hours, QUARTERS_PER_HOUR).mean(axis=1)

    def mpc_window(self, hour):
        """RT slots of the MPC lookahead starting at a DA hour.

        The window is 4*T_H slots long and shrinks at the end of the day
        instead of reaching into the next one.

        Parameters
        ----------
        hour : int
            0-based DA hour at which the window starts

        Returns
        -------
        range
            RT slot indices, length min(4*T_H, 4*(T - hour))
        """
        self._check_hour(hour)
        start = QUARTERS_PER_HOUR * hour
        stop = min(start + self.window_len, self.rt_len)
        return range(start, stop)
