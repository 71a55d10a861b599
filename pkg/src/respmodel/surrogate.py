"""Spirometry surrogate signals: containers, derivatives, averaging, simulation.

A signal is the breathing volume v(t) in ml plus its derivative v'(t); the
derivative is what lets a linear motion model capture inhale/exhale
hysteresis. Time is in seconds for simulated signals and in phase units
(dt = 1 phase) when a signal indexes the phases of a 4D data set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyList, InvalidConfig, TooShort, ValidationError

__all__ = [
    "SurrogateSignal",
    "SignalSimConfig",
    "derive",
    "average_signals",
    "simulate",
    "DEFAULT_V_RANGE",
]

# Observed relative breathing volumes span roughly 0..1200 ml.
DEFAULT_V_RANGE = (0.0, 1200.0)


@dataclass(frozen=True)
class SurrogateSignal:
    """Sampled surrogate: times t, volume v [ml], derivative v_prime [ml per time unit].

    v_range, when given, is a declared envelope that v must stay inside.
    """

    t: np.ndarray
    v: np.ndarray
    v_prime: np.ndarray
    v_range: tuple[float, float] | None = None

    def __post_init__(self):
        t = np.ascontiguousarray(self.t, dtype=np.float64)
        v = np.ascontiguousarray(self.v, dtype=np.float64)
        vp = np.ascontiguousarray(self.v_prime, dtype=np.float64)
        if not (t.ndim == v.ndim == vp.ndim == 1):
            raise ValidationError("signal arrays must be 1-D")
        if not (len(t) == len(v) == len(vp)):
            raise ValidationError("t, v, v_prime must have equal lengths")
        if len(t) < 2:
            raise TooShort("signals need at least 2 samples")
        if np.any(np.diff(t) <= 0):
            raise ValidationError("sample times must be strictly increasing")
        if not (np.isfinite(t).all() and np.isfinite(v).all() and np.isfinite(vp).all()):
            raise ValidationError("signal samples must be finite")
        if self.v_range is not None:
            lo, hi = self.v_range
            if v.min() < lo - 1e-9 or v.max() > hi + 1e-9:
                raise ValidationError(
                    f"v outside declared range [{lo}, {hi}]: "
                    f"min {v.min():.3f}, max {v.max():.3f}"
                )
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "v_prime", vp)

    def __len__(self) -> int:
        return len(self.t)

    def sample(self, index: int) -> tuple[float, float]:
        """(v, v') at one sample index."""
        return float(self.v[index]), float(self.v_prime[index])


def derive(t, v, v_range: tuple[float, float] | None = None) -> SurrogateSignal:
    """Signal from raw volume samples; v' by central differences (second-order
    one-sided at the endpoints), so derive is exactly linear in v."""
    t = np.asarray(t, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if t.ndim != 1 or v.shape != t.shape:
        raise ValidationError("t and v must be 1-D arrays of equal length")
    if len(t) < 2:
        raise TooShort("need at least 2 samples to differentiate")
    edge = 2 if len(t) >= 3 else 1
    vp = np.gradient(v, t, edge_order=edge)
    return SurrogateSignal(t, v, vp, v_range=v_range)


def average_signals(signals: list[SurrogateSignal]) -> SurrogateSignal:
    """Pointwise mean on the first signal's time base (linear interpolation),
    derivative recomputed from the averaged volumes."""
    if not signals:
        raise EmptyList("no signals to average")
    base = signals[0].t
    acc = np.zeros_like(base)
    for sig in signals:
        acc += np.interp(base, sig.t, sig.v)
    acc /= len(signals)
    return derive(base, acc)


@dataclass(frozen=True)
class SignalSimConfig:
    """Stochastic breathing-signal generator settings.

    Each breath cycle k gets its own amplitude A_k and period T_k, jittered
    around amp_range[1] and period_mean by the given relative standard
    deviations; within a cycle v(t) = A_k * sin^2(pi (t - t_k) / T_k),
    clamped to amp_range.
    """

    amp_range: tuple[float, float] = (0.0, 1000.0)
    period_mean: float = 4.0
    period_jitter: float = 0.05
    amp_jitter: float = 0.1
    seed: int = 0
    duration: float = 60.0
    dt: float = 0.1

    def __post_init__(self):
        lo, hi = self.amp_range
        if not (0.0 <= lo < hi):
            raise InvalidConfig(f"amp_range must satisfy 0 <= lo < hi, got {self.amp_range}")
        if hi > DEFAULT_V_RANGE[1]:
            raise InvalidConfig(
                f"amp_range exceeds the {DEFAULT_V_RANGE[1]:.0f} ml envelope: {self.amp_range}"
            )
        if self.period_mean <= 0 or self.dt <= 0 or self.duration <= 0:
            raise InvalidConfig("period_mean, dt, duration must be positive")
        if self.period_jitter < 0 or self.amp_jitter < 0:
            raise InvalidConfig("jitters must be >= 0")


def simulate(cfg: SignalSimConfig) -> SurrogateSignal:
    """Simulated spirometry with per-cycle stochastic irregularity.

    Deterministic for a fixed seed; samples at t = 0, dt, ..., duration and
    clamps every value into cfg.amp_range.
    """
    n = int(round(cfg.duration / cfg.dt)) + 1
    t = np.arange(n, dtype=np.float64) * cfg.dt
    rng = np.random.default_rng(cfg.seed)
    amp_lo, amp_hi = cfg.amp_range

    v = np.empty(n, dtype=np.float64)
    t_start = 0.0
    i = 0
    while i < n:
        period = cfg.period_mean * (1.0 + cfg.period_jitter * rng.standard_normal())
        period = max(period, 0.2 * cfg.period_mean)
        amp = amp_hi * (1.0 + cfg.amp_jitter * rng.standard_normal())
        t_end = t_start + period
        j = i
        while j < n and t[j] < t_end:
            s = np.sin(np.pi * (t[j] - t_start) / period)
            v[j] = amp * s * s
            j += 1
        if j == i:  # period shorter than one sample step
            j = i + 1
            v[i] = 0.0
        t_start = t_end
        i = j
    np.clip(v, amp_lo, amp_hi, out=v)
    return derive(t, v, v_range=cfg.amp_range)
