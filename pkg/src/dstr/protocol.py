"""Per-UAV D-STR state machine.

Everything here is a pure function of its arguments (plus an explicit
``numpy.random.Generator`` where randomness is involved).  States are
returned as new objects via :func:`dataclasses.replace`; callers never see
their inputs mutated.

Transmission slots are numbered from 1, matching the superframe layout
``G, GN, S, SO, SN, T1 .. Tn``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

# Record settings.  The values double as the wire encoding (2 bits each).
NOTHING = 0
RECEIVED = 1
FAILED = 2

MANAGEMENT_SLOTS = ("G", "GN", "S", "SO", "SN")

SlotId = Union[str, int]


class NoSlotAvailable(Exception):
    """Raised by :func:`select_allocation` when every slot is occupied."""


class SlotRemovalError(RuntimeError):
    """A removal referenced a slot outside the local superframe view.

    This can only happen if superframe-size consensus was lost, so it is
    always a hard error.
    """


class Lifecycle(enum.Enum):
    START = "start"
    ALLOCATION = "allocation"
    RESOLVED = "resolved"


class GrowIntent(enum.Enum):
    NONE = 0
    PLUS_ONE = 1
    PLUS_MARGIN = 2


class AttemptResult(enum.Enum):
    CLAIMED = "claimed"
    FAILED = "failed"
    UNKNOWN = "unknown"


class AttemptAction(enum.Enum):
    RETRY_SELECT = "retry_select"
    REQUEST_GROW_MARGIN = "request_grow_margin"


class FailureAction(enum.Enum):
    KEEP = "keep"
    RELEASE = "release"


class OutcomeKind(enum.IntEnum):
    # Values line up with the record settings on purpose.
    NOTHING = NOTHING
    DECODED = RECEIVED
    ENERGY = FAILED


@dataclass(frozen=True)
class SlotOutcome:
    """What one receiver experienced in one slot."""

    kind: OutcomeKind
    sender: Optional[int] = None
    beacon: Optional["Beacon"] = None

    @classmethod
    def decoded(cls, sender: int, beacon: Optional["Beacon"] = None) -> "SlotOutcome":
        return cls(OutcomeKind.DECODED, sender, beacon)

    @property
    def is_nothing(self) -> bool:
        return self.kind is OutcomeKind.NOTHING

    @property
    def is_decoded(self) -> bool:
        return self.kind is OutcomeKind.DECODED


OUTCOME_NOTHING = SlotOutcome(OutcomeKind.NOTHING)
OUTCOME_ENERGY = SlotOutcome(OutcomeKind.ENERGY)


@dataclass(frozen=True)
class ProtocolParams:
    """Pre-deployment protocol settings shared by every UAV."""

    ct: int = 7
    gm: int = 3
    st: int = 5
    dss: int = 10
    tsr: float = 0.95
    fst: int = 10
    # 5 livelocks the S slot once a few hundred UAVs contend; 8 keeps R=9 finite
    backoff_cap: int = 8
    beacon_tx_power: float = -20.0
    adapt_tx_power: float = -3.0

    def __post_init__(self):
        for name in ("ct", "gm", "st", "dss", "fst", "backoff_cap"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if not 0.0 <= self.tsr <= 1.0:
            raise ValueError(f"tsr must lie in [0, 1], got {self.tsr!r}")
        if self.adapt_tx_power < self.beacon_tx_power:
            raise ValueError("adapt_tx_power must be >= beacon_tx_power")


@dataclass(frozen=True)
class SafetyInfo:
    position: tuple = (0.0, 0.0, 0.0)
    heading: tuple = (1.0, 0.0, 0.0)
    speed: float = 0.0


@dataclass(frozen=True)
class Beacon:
    superframe_size: int
    current_slot: SlotId
    uav_id: int
    record: Sequence[int]
    grow_margin_flag: bool = False
    slot_to_remove: Optional[int] = None
    leaving_flag: bool = False
    safety_info: SafetyInfo = field(default_factory=SafetyInfo)

    def __post_init__(self):
        if self.superframe_size < 1:
            raise ValueError("superframe_size must be positive")
        if len(self.record) != self.superframe_size:
            raise ValueError(
                f"record length {len(self.record)} != superframe size {self.superframe_size}"
            )
        if self.slot_to_remove is not None and not 1 <= self.slot_to_remove <= self.superframe_size:
            raise ValueError(f"slot_to_remove {self.slot_to_remove} outside 1..{self.superframe_size}")


@dataclass(frozen=True)
class UavState:
    lifecycle: Lifecycle = Lifecycle.START
    claimed_slot: Optional[int] = None
    c: int = 0
    f: int = 0
    s: int = 0
    silence_counters: tuple = ()
    forbidden: Mapping[int, int] = field(default_factory=dict)
    pending_shrink_backoff: Optional[int] = None
    local_superframe_size: int = 1
    observation_buffer: Sequence[int] = ()
    grow_intent: GrowIntent = GrowIntent.NONE
    leaving_at: Optional[int] = None
    attempt_slot: Optional[int] = None


@dataclass(frozen=True)
class ShrinkDecision:
    kind: str  # "remove", "no_change", "backoff", "abort"
    slot: Optional[int] = None

    @classmethod
    def remove(cls, slot: int) -> "ShrinkDecision":
        return cls("remove", slot)

    @classmethod
    def abort(cls, slot: int) -> "ShrinkDecision":
        return cls("abort", slot)


NO_CHANGE = ShrinkDecision("no_change")
BACKOFF_AND_RETRY = ShrinkDecision("backoff")


# --------------------------------------------------------------------------
# records

_BITS = {NOTHING: "00", RECEIVED: "01", FAILED: "10"}
_SETTINGS = {bits: setting for setting, bits in _BITS.items()}


def encode_record(record: Sequence[int]) -> str:
    """Two bits per slot, first slot first."""
    try:
        return "".join(_BITS[int(setting)] for setting in record)
    except KeyError as exc:
        raise ValueError(f"invalid record setting {exc.args[0]!r}") from None


def decode_record(bits: str) -> list:
    if len(bits) % 2:
        raise ValueError("record bit-string must have even length")
    out = []
    for i in range(0, len(bits), 2):
        pair = bits[i:i + 2]
        if pair not in _SETTINGS:
            raise ValueError(f"invalid record bits {pair!r} at slot {i // 2 + 1}")
        out.append(_SETTINGS[pair])
    return out


def merge_records(records: Iterable[Sequence[int]], size: Optional[int] = None) -> np.ndarray:
    """Combine several records slot by slot.

    A slot is 1 if anyone decoded it, else 2 if anyone sensed energy, else 0.
    """
    arrays = [np.asarray(r, dtype=np.int8) for r in records]
    if not arrays:
        return np.zeros(size or 0, dtype=np.int8)
    stacked = np.vstack(arrays)
    received = (stacked == RECEIVED).any(axis=0)
    failed = (stacked == FAILED).any(axis=0)
    return np.where(received, RECEIVED, np.where(failed, FAILED, NOTHING)).astype(np.int8)


def available_slots(record: Sequence[int]) -> set:
    return {i + 1 for i, setting in enumerate(record) if setting != RECEIVED}


def select_allocation(record: Sequence[int], rng: np.random.Generator) -> int:
    candidates = sorted(available_slots(record))
    if not candidates:
        raise NoSlotAvailable()
    return int(candidates[rng.integers(len(candidates))])


# --------------------------------------------------------------------------
# reception success

def evaluate_attempt(own_slot: int, neighbor_beacons: Sequence[Beacon]) -> AttemptResult:
    """Judge a self-allocation attempt from the neighbors' records.

    An isolated UAV (no neighbor beacons at all) claims its slot.
    Beacons whose record does not cover ``own_slot`` carry no information.
    """
    informative = 0
    for beacon in neighbor_beacons:
        if own_slot > len(beacon.record):
            continue
        informative += 1
        if beacon.record[own_slot - 1] != RECEIVED:
            return AttemptResult.FAILED
    if neighbor_beacons and not informative:
        return AttemptResult.UNKNOWN
    return AttemptResult.CLAIMED


def on_attempt_failed(state: UavState, ct: int):
    c = state.c + 1
    if c >= ct:
        return AttemptAction.REQUEST_GROW_MARGIN, replace(state, c=0)
    return AttemptAction.RETRY_SELECT, replace(state, c=c)


def resolved_failure_check(state: UavState, neighbor_beacons: Sequence[Beacon],
                           rng: np.random.Generator, tsr: float):
    """Track consecutive failed superframes for a Resolved UAV.

    One bad superframe is tolerated.  From the second consecutive one on, the
    slot is released with probability ``1 - tsr``.
    """
    slot = state.claimed_slot
    ok = all(
        slot <= len(b.record) and b.record[slot - 1] == RECEIVED for b in neighbor_beacons
    )
    if ok:
        return FailureAction.KEEP, (replace(state, f=0) if state.f else state)
    f = state.f + 1
    if f >= 2 and rng.random() < 1.0 - tsr:
        released = replace(
            state,
            lifecycle=Lifecycle.ALLOCATION,
            claimed_slot=None,
            f=0,
            c=0,
            silence_counters=(),
            pending_shrink_backoff=None,
            s=0,
        )
        return FailureAction.RELEASE, released
    return FailureAction.KEEP, replace(state, f=f)


# --------------------------------------------------------------------------
# growing

def gn_decision(g_outcome: SlotOutcome) -> bool:
    return g_outcome.kind is OutcomeKind.ENERGY


def resolve_grow_phase(g_outcome: SlotOutcome, gn_outcome: SlotOutcome,
                       i_transmitted_g: bool, my_request: GrowIntent, gm: int) -> int:
    if gn_outcome.kind in (OutcomeKind.ENERGY, OutcomeKind.DECODED):
        return gm
    if g_outcome.is_decoded:
        return gm if g_outcome.beacon is not None and g_outcome.beacon.grow_margin_flag else 1
    if i_transmitted_g and gn_outcome.is_nothing:
        return gm if my_request is GrowIntent.PLUS_MARGIN else 1
    return 0


# --------------------------------------------------------------------------
# shrinking

def update_silence_counters(state: UavState, observations: Sequence[int],
                            st: int, growth_activity: bool = False):
    """Advance the per-slot silence counters at the end of a superframe.

    ``observations`` holds one setting per transmission slot for the
    superframe just finished; 0 means the slot looked silent.  Returns
    ``(proposal, new_state)`` where ``proposal`` is the lowest silent slot
    eligible for removal, or ``None``.
    """
    obs = np.asarray(observations)
    size = len(obs)
    if growth_activity:
        return None, replace(state, silence_counters=np.zeros(size, dtype=np.int64))
    old = np.zeros(size, dtype=np.int64)
    prev = np.asarray(state.silence_counters, dtype=np.int64)[:size]
    old[:len(prev)] = prev
    counters = np.where(obs == NOTHING, old + 1, 0)
    if state.claimed_slot is not None and state.claimed_slot <= size:
        counters[state.claimed_slot - 1] = 0
    proposal = eligible_proposal(counters, state.claimed_slot, state.forbidden, st)
    return proposal, replace(state, silence_counters=counters)


def eligible_proposal(counters: Sequence[int], claimed_slot: Optional[int],
                      forbidden: Mapping[int, int], st: int) -> Optional[int]:
    ok = np.asarray(counters) >= st
    if claimed_slot is not None and claimed_slot <= len(ok):
        ok[claimed_slot - 1] = False
    for slot in forbidden:
        if slot <= len(ok):
            ok[slot - 1] = False
    hits = np.flatnonzero(ok)
    return int(hits[0]) + 1 if len(hits) else None


def so_decision(s_outcome: SlotOutcome, state: UavState) -> bool:
    if state.lifecycle is Lifecycle.ALLOCATION:
        return s_outcome.kind in (OutcomeKind.ENERGY, OutcomeKind.DECODED)
    if state.lifecycle is Lifecycle.RESOLVED and s_outcome.is_decoded:
        beacon = s_outcome.beacon
        return beacon is not None and beacon.slot_to_remove == state.claimed_slot
    return False


def sn_decision(s_outcome: SlotOutcome) -> bool:
    return s_outcome.kind is OutcomeKind.ENERGY


def resolve_shrink_phase(s_outcome: SlotOutcome, so_outcome: SlotOutcome,
                         sn_outcome: SlotOutcome, i_proposed: bool,
                         my_proposal: Optional[int] = None) -> ShrinkDecision:
    if i_proposed:
        if not so_outcome.is_nothing:
            return ShrinkDecision.abort(my_proposal)
        if not sn_outcome.is_nothing:
            return BACKOFF_AND_RETRY
        return ShrinkDecision.remove(my_proposal)
    if s_outcome.is_decoded and so_outcome.is_nothing and sn_outcome.is_nothing:
        beacon = s_outcome.beacon
        if beacon is not None and beacon.slot_to_remove is not None:
            return ShrinkDecision.remove(beacon.slot_to_remove)
    return NO_CHANGE


def shrink_backoff(s: int, backoff_cap: int, own_slot: int, first_attempt: bool,
                   rng: np.random.Generator) -> int:
    """Superframes to wait before the next S-slot transmission."""
    if first_attempt:
        return int(own_slot)
    window = 2 ** min(s, backoff_cap)
    return int(rng.integers(window))


def shift_forbidden(forbidden: Mapping[int, int], removed: int) -> dict:
    return {
        (slot - 1 if slot > removed else slot): age
        for slot, age in forbidden.items()
        if slot != removed
    }


def forbidden_set_tick(fs: Mapping[int, int], fst: int) -> dict:
    return {slot: age + 1 for slot, age in fs.items() if age + 1 < fst}


def apply_slot_removal(state: UavState, removed: int) -> UavState:
    size = state.local_superframe_size
    if not 1 <= removed <= size:
        raise SlotRemovalError(f"cannot remove slot {removed} from a superframe of {size}")
    if size == 1:
        raise SlotRemovalError("cannot remove the last transmission slot")

    def shifted(slot):
        if slot is None or slot < removed:
            return slot
        if slot == removed:
            return None
        return slot - 1

    claimed = state.claimed_slot
    if claimed == removed:
        raise SlotRemovalError(f"slot {removed} is claimed by this UAV")

    def drop(seq):
        if len(seq) < removed:
            return seq
        out = list(seq[:removed - 1]) + list(seq[removed:])
        if isinstance(seq, np.ndarray):
            return np.asarray(out, dtype=seq.dtype)
        return type(seq)(out) if isinstance(seq, (list, tuple)) else out

    return replace(
        state,
        local_superframe_size=size - 1,
        claimed_slot=shifted(claimed),
        attempt_slot=shifted(state.attempt_slot),
        silence_counters=np.asarray(drop(list(state.silence_counters)), dtype=np.int64),
        observation_buffer=drop(state.observation_buffer),
        forbidden=shift_forbidden(state.forbidden, removed),
    )


# --------------------------------------------------------------------------
# beacons

def build_beacon(state: UavState, slot: SlotId, uav_id: int,
                 safety_info: Optional[SafetyInfo] = None,
                 slot_to_remove: Optional[int] = None,
                 leaving: bool = False,
                 observation_buffer: Optional[Sequence[int]] = None) -> Beacon:
    """Assemble the beacon a UAV sends in ``slot``.

    The record is a snapshot of the observation buffer.  Because the buffer
    is overwritten slot by slot as the superframe advances, entries before
    ``slot`` are from this superframe and the rest from the previous one.
    ``observation_buffer`` overrides ``state.observation_buffer``.
    """
    size = state.local_superframe_size
    record = np.zeros(size, dtype=np.int8)
    if observation_buffer is None:
        observation_buffer = state.observation_buffer
    buf = np.asarray(observation_buffer, dtype=np.int8)[:size]
    record[:len(buf)] = buf
    return Beacon(
        superframe_size=size,
        current_slot=slot,
        uav_id=uav_id,
        record=record,
        grow_margin_flag=state.grow_intent is GrowIntent.PLUS_MARGIN,
        slot_to_remove=slot_to_remove,
        leaving_flag=leaving,
        safety_info=safety_info or SafetyInfo(),
    )
