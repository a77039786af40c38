"""Centralized greedy first-fit slot allocation with a full SINR check.

This is a reference schedule, not a protocol: one omniscient allocator
places UAVs one at a time into the lowest slot that keeps every transmitter
in that slot decodable at all of its neighbors.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from . import channel as ch
from .topology import Formation

BY_ID = "by-id"
BY_DEGREE = "by-degree"
ORDERS = (BY_ID, BY_DEGREE)


@dataclass
class CentralSchedule:
    assignment: Dict[int, int]
    slot_count: int
    order: str = BY_ID

    def slots(self) -> Dict[int, List[int]]:
        out: Dict[int, List[int]] = {}
        for u, s in sorted(self.assignment.items()):
            out.setdefault(s, []).append(u)
        return out

    @property
    def reuse(self) -> float:
        return len(self.assignment) / self.slot_count if self.slot_count else 0.0

    def write_csv(self, path_or_file) -> None:
        own = isinstance(path_or_file, str)
        fh = open(path_or_file, "w", newline="") if own else path_or_file
        try:
            writer = csv.writer(fh)
            writer.writerow(["uav", "slot"])
            for u, s in sorted(self.assignment.items()):
                writer.writerow([u, s])
        finally:
            if own:
                fh.close()


@dataclass
class _Slot:
    index: int
    members: List[int]
    interference: np.ndarray  # total received mW at every UAV


def _visit_order(formation: Formation, order: str) -> np.ndarray:
    if order == BY_ID:
        return np.arange(formation.size)
    if order == BY_DEGREE:
        # most constrained first; ties by id
        return np.lexsort((np.arange(formation.size), -formation.degrees()))
    raise ValueError(f"unknown order {order!r}; expected one of {ORDERS}")


def greedy_allocate(formation: Formation, channel: ch.ChannelParams = ch.ChannelParams(),
                    beacon_power: Optional[float] = None, order: str = BY_ID,
                    propagation: Optional[ch.Propagation] = None) -> CentralSchedule:
    """First-fit allocation in ``order``.

    ``beacon_power`` defaults to the power derived from the safety radius,
    the same value the simulator uses for transmission slots.
    """
    if beacon_power is None:
        beacon_power = ch.beacon_tx_power(formation.safety_radius, channel)
    visit = _visit_order(formation, order)
    prop = propagation or ch.Propagation(formation.positions, channel)
    p_mw = float(ch.dbm_to_mw(beacon_power))
    noise = channel.noise_mw
    gamma = channel.sinr_threshold_linear
    neighbors = formation.neighbors

    slot_of = np.zeros(formation.size, dtype=np.int64)
    slots: List[_Slot] = []

    def fits(slot: _Slot, v: int, row: np.ndarray) -> bool:
        if np.any(slot_of[neighbors[v]] == slot.index):
            return False
        total = slot.interference + row
        for t in slot.members + [v]:
            nb = neighbors[t]
            if len(nb) == 0:
                continue
            sig = (row[nb] if t == v else prop.rx_mw([t], beacon_power)[0, nb])
            if np.any(sig < gamma * (noise + total[nb] - sig)):
                return False
        return True

    for v in visit:
        v = int(v)
        row = prop.gains([v])[0] * p_mw
        for slot in slots:
            if fits(slot, v, row):
                slot.members.append(v)
                slot.interference = slot.interference + row
                slot_of[v] = slot.index
                break
        else:
            slots.append(_Slot(len(slots) + 1, [v], row.copy()))
            slot_of[v] = len(slots)
    assignment = {u: int(slot_of[u]) for u in range(formation.size)}
    return CentralSchedule(assignment, len(slots), order)
