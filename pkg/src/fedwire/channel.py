"""Stochastic wireless uplink model.

The channel power gain is a compound of log-distance path loss, log-normal
shadowing and Nakagami-m power fading. One upload attempt takes the Shannon
latency for that gain; a geometric number of attempts is needed before a
packet gets through. The number of clients whose total upload time fits in
the server's time window follows a Poisson-binomial law.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from . import kernels

BOLTZMANN = 1.380649e-23  # J/K


class ChannelError(ValueError):
    pass


class DegenerateSNRError(ChannelError):
    """The Shannon rate rounds to zero, so latency would be infinite."""


class ProbabilityRangeError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelParams:
    """Static distribution parameters of one wireless link.

    Defaults are the experiment values: 10 MHz, 720 mW, 1 kbit packets and a
    unit, non-random channel gain (distance equal to the reference distance,
    shadowing and fading switched off).
    """

    bandwidth_hz: float = 10e6
    transmit_power_w: float = 0.72
    packet_bits: int = 1000
    per: float = 0.0
    path_loss_exponent: float = 2.0
    reference_distance_m: float = 1.0
    shadowing_sigma_db: float = 0.0
    fading_m: float = 1.0
    fading: bool = False
    antenna_gain: float = 1.0
    noise_temp_k: float = 290.0
    distance_m: float = 1.0

    def __post_init__(self):
        for name in ("bandwidth_hz", "transmit_power_w", "reference_distance_m",
                     "fading_m", "antenna_gain", "noise_temp_k", "distance_m"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ChannelError(f"{name} must be a positive finite number, got {value!r}")
        if isinstance(self.packet_bits, bool) or not isinstance(self.packet_bits, int) or self.packet_bits <= 0:
            raise ChannelError(f"packet_bits must be a positive integer, got {self.packet_bits!r}")
        if not 0.0 <= self.per < 1.0:
            raise ChannelError(f"per must lie in [0, 1), got {self.per!r}")
        if not self.path_loss_exponent >= 2.0:
            raise ChannelError(f"path_loss_exponent must be >= 2, got {self.path_loss_exponent!r}")
        if not self.shadowing_sigma_db >= 0.0:
            raise ChannelError(f"shadowing_sigma_db must be >= 0, got {self.shadowing_sigma_db!r}")

    @property
    def deterministic_gain(self) -> bool:
        return self.shadowing_sigma_db == 0.0 and not self.fading

    def path_gain(self) -> float:
        """Antenna gain times path loss, with distance clamped to d0."""
        d = max(self.distance_m, self.reference_distance_m)
        return self.antenna_gain * (self.reference_distance_m / d) ** self.path_loss_exponent

    def noise_power_w(self) -> float:
        return BOLTZMANN * self.noise_temp_k * self.bandwidth_hz

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "ChannelParams":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ChannelError(f"unknown channel attribute(s): {', '.join(sorted(unknown))}")
        kwargs = dict(data)
        if "packet_bits" in kwargs and isinstance(kwargs["packet_bits"], float) and kwargs["packet_bits"].is_integer():
            kwargs["packet_bits"] = int(kwargs["packet_bits"])
        return cls(**kwargs)


@dataclass(frozen=True)
class LinkSample:
    gain: float
    single_latency_s: float
    retransmissions: int
    total_time_s: float

    @classmethod
    def make(cls, gain: float, latency: float, retransmissions: int) -> "LinkSample":
        return cls(gain, latency, retransmissions, latency * retransmissions)


@dataclass(frozen=True)
class ResponsePmf:
    """PMF of the number of in-window responses, indexed by count 0..N."""

    probs: np.ndarray

    def __post_init__(self):
        p = self.probs
        if np.any(p < 0.0) or np.any(p > 1.0) or abs(math.fsum(p) - 1.0) > 1e-12:
            raise ProbabilityRangeError("not a probability mass function")

    @property
    def n(self) -> int:
        return len(self.probs) - 1

    def mean(self) -> float:
        return math.fsum(k * q for k, q in enumerate(self.probs))

    def __len__(self) -> int:
        return len(self.probs)

    def __getitem__(self, k):
        return self.probs[k]


def sample_gains(params: ChannelParams, rng: np.random.Generator, size: int) -> np.ndarray:
    """Vectorised gain draws. Shadowing is drawn before fading; disabled
    factors consume no random numbers."""
    g = np.full(size, params.path_gain())
    if params.shadowing_sigma_db > 0.0:
        x_db = rng.normal(0.0, params.shadowing_sigma_db, size)
        g = g * 10.0 ** (x_db / 10.0)
    if params.fading:
        g = g * rng.gamma(params.fading_m, 1.0 / params.fading_m, size)
    return g


def sample_gain(params: ChannelParams, rng: np.random.Generator) -> float:
    if params.deterministic_gain:
        return params.path_gain()
    return float(sample_gains(params, rng, 1)[0])


def shannon_latency(params: ChannelParams, gain: float) -> float:
    """Seconds to push one packet at the Shannon rate for ``gain``."""
    if not gain > 0.0:
        raise ChannelError(f"gain must be positive, got {gain!r}")
    snr = params.transmit_power_w * gain / params.noise_power_w()
    rate = params.bandwidth_hz * math.log2(1.0 + snr)
    if not rate > 0.0:
        raise DegenerateSNRError(f"SNR {snr:.3g} gives zero rate at bandwidth {params.bandwidth_hz:g} Hz")
    return params.packet_bits / rate


def shannon_latencies(params: ChannelParams, gains: np.ndarray) -> np.ndarray:
    snr = params.transmit_power_w * gains / params.noise_power_w()
    rate = params.bandwidth_hz * np.log2(1.0 + snr)
    if np.any(rate <= 0.0):
        raise DegenerateSNRError("SNR underflow in at least one draw")
    return params.packet_bits / rate


def power_for_latency(params: ChannelParams, latency_s: float, gain: float | None = None) -> float:
    """Transmit power that makes one attempt take exactly ``latency_s`` at ``gain``
    (the deterministic path gain by default)."""
    if gain is None:
        gain = params.path_gain()
    snr = 2.0 ** (params.packet_bits / (params.bandwidth_hz * latency_s)) - 1.0
    return snr * params.noise_power_w() / gain


def with_latency(params: ChannelParams, latency_s: float) -> ChannelParams:
    """Copy of a deterministic-gain channel recalibrated to a fixed per-attempt latency."""
    return replace(params, transmit_power_w=power_for_latency(params, latency_s))


def _retransmissions_from_uniform(per: float, u):
    # Inversion of P(S > k) = per**k; monotone in per for a fixed u.
    if per == 0.0:
        return np.ones_like(u, dtype=np.int64) if isinstance(u, np.ndarray) else 1
    k = np.floor(np.log1p(-u) / math.log(per))
    return 1 + k.astype(np.int64) if isinstance(k, np.ndarray) else 1 + int(k)


def sample_retransmissions(per: float, rng: np.random.Generator) -> int:
    """Number of attempts until first success, support {1, 2, ...}."""
    if not 0.0 <= per < 1.0:
        raise ChannelError(f"per must lie in [0, 1), got {per!r}")
    if per == 0.0:
        return 1
    return _retransmissions_from_uniform(per, rng.random())


def sample_retransmissions_many(per: float, rng: np.random.Generator, size: int) -> np.ndarray:
    if not 0.0 <= per < 1.0:
        raise ChannelError(f"per must lie in [0, 1), got {per!r}")
    if per == 0.0:
        return np.ones(size, dtype=np.int64)
    return _retransmissions_from_uniform(per, rng.random(size))


def sample_link(params: ChannelParams, rng: np.random.Generator) -> LinkSample:
    gain = sample_gain(params, rng)
    latency = shannon_latency(params, gain)
    return LinkSample.make(gain, latency, sample_retransmissions(params.per, rng))


def packet_loss_prob(params: ChannelParams, epsilon_s: float, n_samples: int,
                     rng: np.random.Generator) -> float:
    """Fraction of simulated uploads whose total time exceeds ``epsilon_s``."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if params.deterministic_gain and params.per == 0.0:
        return float(shannon_latency(params, params.path_gain()) > epsilon_s)
    gains = sample_gains(params, rng, n_samples)
    total = shannon_latencies(params, gains) * sample_retransmissions_many(params.per, rng, n_samples)
    return float(np.count_nonzero(total > epsilon_s)) / n_samples


def _check_probs(success_probs) -> np.ndarray:
    p = np.asarray(success_probs, dtype=np.float64).reshape(-1)
    if np.any(~np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
        raise ProbabilityRangeError("success probabilities must lie in [0, 1]")
    return p


def response_pmf_heterogeneous(success_probs) -> ResponsePmf:
    """Exact law of the number of successes among independent, non-identical
    Bernoulli trials (O(N^2) convolution)."""
    return ResponsePmf(kernels.poisson_binomial_pmf(_check_probs(success_probs)))


def response_pmf_homogeneous(n: int, r: float) -> ResponsePmf:
    """Binomial(n, r) law of the response count."""
    if n < 0:
        raise ValueError("n must be >= 0")
    r = float(_check_probs([r])[0])
    if r in (0.0, 1.0):
        probs = np.zeros(n + 1)
        probs[0 if r == 0.0 else n] = 1.0
        return ResponsePmf(probs)
    if n <= 1000:
        probs = [math.comb(n, k) * r ** k * (1.0 - r) ** (n - k) for k in range(n + 1)]
    else:
        lr, lq, lgn = math.log(r), math.log1p(-r), math.lgamma(n + 1)
        probs = [math.exp(lgn - math.lgamma(k + 1) - math.lgamma(n - k + 1) + k * lr + (n - k) * lq)
                 for k in range(n + 1)]
        total = math.fsum(probs)  # lgamma rounding leaves the sum a few ulps off
        probs = [q / total for q in probs]
    return ResponsePmf(np.array(probs))


def expected_responses(n: int, r: float) -> float:
    _check_probs([r])
    return n * r

