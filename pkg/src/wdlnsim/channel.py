"""Uplink channel: Rayleigh fading over log-distance pathloss, and packet success.

Gains are linear power gains. With unit-mean exponential fading the mean gain
of a device is fixed by its distance alone, which is all the channel statistics
a device carries here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from .errors import ConfigError

PATHLOSS_INTERCEPT_DB = 128.1
PATHLOSS_SLOPE_DB = 37.6
DEFAULT_TX_POWER_DBM = 23.0
DEFAULT_NOISE_POWER_DBM = -96.0
DEFAULT_PACKET_BITS = 4096


def pathloss_db(distance_km):
    """Large-scale loss ``128.1 + 37.6 log10(d)`` with ``d`` in km."""
    return PATHLOSS_INTERCEPT_DB + PATHLOSS_SLOPE_DB * np.log10(distance_km)


@dataclass(frozen=True)
class ChannelParams:
    distance_km: float
    tx_power_dbm: float = DEFAULT_TX_POWER_DBM
    noise_power_dbm: float = DEFAULT_NOISE_POWER_DBM
    packet_bits: int = DEFAULT_PACKET_BITS

    def __post_init__(self):
        if not self.distance_km > 0:
            raise ConfigError(f"channel.distance_km must be > 0, got {self.distance_km!r}")
        if int(self.packet_bits) != self.packet_bits or self.packet_bits < 1:
            raise ConfigError(f"channel.packet_bits must be a positive integer, got {self.packet_bits!r}")

    @property
    def mean_gain(self) -> float:
        return 10.0 ** (-pathloss_db(self.distance_km) / 10.0)

    @property
    def snr_scale(self) -> float:
        """Linear transmit-power-to-noise ratio; SNR = gain * snr_scale."""
        return 10.0 ** ((self.tx_power_dbm - self.noise_power_dbm) / 10.0)


def gain_from_fading(params: ChannelParams, fading):
    return fading * params.mean_gain


def sample_gain(params: ChannelParams, rng: np.random.Generator) -> float:
    """One fresh gain draw: unit-mean exponential fading times the pathloss gain."""
    return gain_from_fading(params, rng.exponential(1.0))


def snr_linear(gain, params: ChannelParams):
    return gain * params.snr_scale


def q_function(x):
    """Gaussian tail probability Q(x)."""
    return 0.5 * erfc(np.asarray(x, dtype=float) / math.sqrt(2.0))


class BpskUncoded:
    """Per-bit error ``Q(sqrt(2 snr))``; packet success ``(1 - b)^n``."""

    name = "bpsk_uncoded"

    def bit_error_rate(self, snr):
        return q_function(np.sqrt(2.0 * np.maximum(snr, 0.0)))

    def success_probability(self, snr, packet_bits):
        b = self.bit_error_rate(snr)
        # (1-b)^n via log1p keeps precision when b is tiny and n is large
        with np.errstate(divide="ignore"):
            out = np.exp(packet_bits * np.log1p(-b))
        return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class LogisticWaterfall:
    """Coded-link emulation: ``PER = 1 / (1 + exp(kappa (snr_dB - snr50_dB)))``.

    Packet length is ignored; the curve stands in for a fixed-length coded block.
    """

    kappa: float = 1.5
    snr50_db: float = 5.0
    name = "logistic"

    def success_probability(self, snr, packet_bits=None):
        snr = np.asarray(snr, dtype=float)
        with np.errstate(divide="ignore"):
            snr_db = 10.0 * np.log10(snr)
        z = np.clip(self.kappa * (snr_db - self.snr50_db), -700.0, 700.0)
        per = 1.0 / (1.0 + np.exp(z))
        return np.clip(1.0 - per, 0.0, 1.0)


def make_ber_model(name: str = "bpsk_uncoded", **options):
    if name == "bpsk_uncoded":
        return BpskUncoded()
    if name == "logistic":
        return LogisticWaterfall(**options)
    raise ConfigError(f"channel.ber_model must be 'bpsk_uncoded' or 'logistic', got {name!r}")


_DEFAULT_MODEL = BpskUncoded()


def success_probability(snr, packet_bits: int, model=None):
    """Probability that a packet of ``packet_bits`` bits arrives intact at ``snr``."""
    out = (model or _DEFAULT_MODEL).success_probability(snr, packet_bits)
    return float(out) if np.ndim(out) == 0 else out


def sample_transmission(success_prob: float, rng: np.random.Generator) -> bool:
    if not 0.0 <= success_prob <= 1.0:
        raise ValueError(f"success_prob must lie in [0, 1], got {success_prob!r}")
    return bool(rng.random() < success_prob)


class ChannelBank:
    """Vectorised channel for a population of devices sharing power and packet settings."""

    def __init__(self, distances_km, tx_power_dbm=DEFAULT_TX_POWER_DBM,
                 noise_power_dbm=DEFAULT_NOISE_POWER_DBM, packet_bits=DEFAULT_PACKET_BITS,
                 model=None):
        self.params = [ChannelParams(float(d), tx_power_dbm, noise_power_dbm, packet_bits)
                       for d in distances_km]
        self.mean_gains = np.array([p.mean_gain for p in self.params])
        self.snr_scale = self.params[0].snr_scale if self.params else 1.0
        self.packet_bits = int(packet_bits)
        self.model = model or _DEFAULT_MODEL

    def __len__(self):
        return len(self.params)

    def gains(self, fading):
        return np.asarray(fading) * self.mean_gains

    def success_probs(self, gains):
        return np.asarray(self.model.success_probability(np.asarray(gains) * self.snr_scale,
                                                         self.packet_bits), dtype=float)
