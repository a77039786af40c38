"""Free-space propagation and per-slot reception.

Powers are in dBm at the API surface; the vectorised helpers work in mW.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .protocol import OUTCOME_ENERGY, OUTCOME_NOTHING, SlotOutcome

SINR = "sinr"
PESSIMISTIC = "pessimistic"

DEFAULT_INTERFERENCE_MARGIN_DB = 6.0
ADAPT_HEADROOM_DB = 3.0
REFERENCE_DISTANCE_M = 1.0

# Slack for SINR comparisons landing exactly on the threshold.
_DB_EPS = 1e-9


@dataclass(frozen=True)
class ChannelParams:
    wavelength: float = 0.125
    path_loss_exponent: float = 2.0
    pl0: float = 40.0
    noise_power: float = -101.0
    sinr_threshold: float = 15.0
    energy_detect_margin: float = 3.0

    def __post_init__(self):
        if self.path_loss_exponent <= 0:
            raise ValueError("path_loss_exponent must be > 0")
        if self.sinr_threshold <= 0:
            raise ValueError("sinr_threshold must be > 0 dB")
        if self.energy_detect_margin < 0:
            raise ValueError("energy_detect_margin must be >= 0 dB")

    @property
    def noise_mw(self) -> float:
        return float(dbm_to_mw(self.noise_power))

    @property
    def energy_floor_mw(self) -> float:
        return float(dbm_to_mw(self.noise_power + self.energy_detect_margin))

    @property
    def sinr_threshold_linear(self) -> float:
        return 10.0 ** ((self.sinr_threshold - _DB_EPS) / 10.0)


def dbm_to_mw(dbm):
    return 10.0 ** (np.asarray(dbm, dtype=float) / 10.0)


def mw_to_dbm(mw):
    return 10.0 * np.log10(mw)


def path_loss_db(d, params: ChannelParams = ChannelParams()):
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("path loss is undefined for distances <= 0")
    out = params.pl0 + 10.0 * params.path_loss_exponent * np.log10(d / REFERENCE_DISTANCE_M)
    return float(out) if out.ndim == 0 else out


def received_power_dbm(tx_power_dbm, d, params: ChannelParams = ChannelParams()):
    return tx_power_dbm - path_loss_db(d, params)


def beacon_tx_power(safety_radius: float, params: ChannelParams = ChannelParams(),
                    margin: float = DEFAULT_INTERFERENCE_MARGIN_DB) -> float:
    """Power that lands ``margin`` dB above the SINR threshold at the safety radius."""
    if safety_radius <= 0:
        raise ValueError("safety_radius must be > 0")
    return params.noise_power + params.sinr_threshold + margin + path_loss_db(safety_radius, params)


def adapt_tx_power(max_diameter: float, params: ChannelParams = ChannelParams()) -> float:
    if max_diameter <= 0:
        raise ValueError("max_diameter must be > 0")
    return beacon_tx_power(max_diameter, params, ADAPT_HEADROOM_DB)


def slot_outcome(receiver, transmitters: Sequence, params: ChannelParams = ChannelParams(),
                 collision_model: str = SINR) -> SlotOutcome:
    """Classify what ``receiver`` hears in one slot.

    ``transmitters`` is a sequence of ``(position, power_dbm, beacon)``.
    The sender reported on a decode is ``beacon.uav_id`` when a beacon is
    given, else the transmitter's index in the list.
    """
    if not transmitters:
        return OUTCOME_NOTHING
    rx = np.empty(len(transmitters))
    receiver = np.asarray(receiver, dtype=float)
    for k, (pos, power, _) in enumerate(transmitters):
        d = float(np.linalg.norm(np.asarray(pos, dtype=float) - receiver))
        rx[k] = dbm_to_mw(received_power_dbm(power, d, params))
    total = rx.sum()
    if collision_model == PESSIMISTIC and len(transmitters) > 1:
        return OUTCOME_ENERGY if total >= params.energy_floor_mw else OUTCOME_NOTHING
    best = int(np.argmax(rx))
    sinr = rx[best] / (params.noise_mw + total - rx[best])
    if sinr >= params.sinr_threshold_linear:
        beacon = transmitters[best][2]
        sender = beacon.uav_id if beacon is not None else best
        return SlotOutcome.decoded(sender, beacon)
    return OUTCOME_ENERGY if total >= params.energy_floor_mw else OUTCOME_NOTHING


def resolve_reception(rx_mw: np.ndarray, params: ChannelParams,
                      collision_model: str = SINR):
    """Vectorised :func:`slot_outcome` over every receiver at once.

    ``rx_mw`` has shape ``(n_transmitters, n_receivers)``.  Returns
    ``(codes, best)``: per-receiver outcome codes (0 nothing, 1 decoded,
    2 energy) and the row index of the strongest transmitter.
    """
    n_tx, n_rx = rx_mw.shape
    if n_tx == 0:
        return np.zeros(n_rx, dtype=np.int8), np.full(n_rx, -1)
    total = rx_mw.sum(axis=0)
    energy = total >= params.energy_floor_mw
    if collision_model == PESSIMISTIC and n_tx > 1:
        return np.where(energy, 2, 0).astype(np.int8), np.full(n_rx, -1)
    if n_tx == 1:
        best = np.zeros(n_rx, dtype=np.intp)
        pbest = rx_mw[0]
    else:
        best = rx_mw.argmax(axis=0)
        pbest = rx_mw[best, np.arange(n_rx)]
    sinr = pbest / (params.noise_mw + (total - pbest))
    decoded = sinr >= params.sinr_threshold_linear
    codes = np.where(decoded, 1, np.where(energy, 2, 0)).astype(np.int8)
    return codes, np.where(decoded, best, -1)


class Propagation:
    """Link gains for a fixed set of positions.

    Small formations get a dense gain matrix; larger ones compute the rows
    they need on demand.
    """

    DENSE_LIMIT = 3000
    _CHUNK = 512

    def __init__(self, positions: np.ndarray, params: ChannelParams = ChannelParams()):
        self.positions = np.asarray(positions, dtype=float)
        self.params = params
        self.n = len(self.positions)
        self._gain: Optional[np.ndarray] = None
        if self.n <= self.DENSE_LIMIT:
            ids = np.arange(self.n)
            self._gain = np.vstack([
                self._gain_rows(ids[i:i + self._CHUNK]) for i in range(0, self.n, self._CHUNK)
            ]) if self.n else np.zeros((0, 0))

    def _gain_rows(self, ids) -> np.ndarray:
        diff = self.positions[ids][:, None, :] - self.positions[None, :, :]
        d = np.sqrt((diff ** 2).sum(axis=-1))
        with np.errstate(divide="ignore"):
            pl = self.params.pl0 + 10.0 * self.params.path_loss_exponent * np.log10(
                np.where(d > 0, d, 1.0) / REFERENCE_DISTANCE_M)
        gain = 10.0 ** (-pl / 10.0)
        gain[d == 0] = 0.0
        return gain

    def gains(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.intp)
        if self._gain is not None:
            return self._gain[ids]
        return self._gain_rows(ids)

    def rx_mw(self, ids, power_dbm: float) -> np.ndarray:
        return self.gains(ids) * float(dbm_to_mw(power_dbm))
