"""Slot-synchronous D-STR simulation.

One :class:`Simulation` owns the protocol state of every UAV in a scenario
and advances it slot by slot through ``G, GN, S, SO, SN, T1 .. Tn``.  The
per-UAV decisions are delegated to :mod:`dstr.protocol`; reception is
resolved for all listeners at once with :func:`dstr.channel.resolve_reception`.

The omniscient checks (:func:`validate_allocation`, resolution and
convergence detection) only observe; nothing they compute is fed back to
the UAVs.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import channel as ch
from . import protocol as pc
from .protocol import GrowIntent, Lifecycle
from .topology import Formation, max_diameter

log = logging.getLogger(__name__)

N_MANAGEMENT = len(pc.MANAGEMENT_SLOTS)
COLLISION = "collision"
MGMT_MODELS = {COLLISION: ch.PESSIMISTIC, "pessimistic": ch.PESSIMISTIC, ch.SINR: ch.SINR}

# When an Allocation UAV judges its attempt.  "rolling": at its own slot one
# superframe after transmitting, by which time every neighbor has reported
# on that transmission; a failed UAV re-selects at once.  "deferred": at the
# end of the superframe after the first transmission, re-selecting in the
# one after that.
ROLLING = "rolling"
DEFERRED = "deferred"
EVALUATION_MODES = (ROLLING, DEFERRED)


class SimulationError(RuntimeError):
    """An internal consistency fault; the run cannot continue."""


class ConsensusError(SimulationError):
    pass


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class StopCondition:
    kind: str = "convergence"  # "resolution", "convergence" or "slots"
    slots: Optional[int] = None

    @classmethod
    def parse(cls, text) -> "StopCondition":
        if isinstance(text, StopCondition):
            return text
        text = str(text).strip().lower()
        if text in ("resolution", "convergence"):
            return cls(text)
        if text.startswith("slots:"):
            try:
                n = int(text.split(":", 1)[1])
            except ValueError:
                raise ScenarioError(f"bad slot budget in {text!r}") from None
            if n < 1:
                raise ScenarioError("slots:N needs N >= 1")
            return cls("slots", n)
        raise ScenarioError(f"unknown stop condition {text!r}")

    def __str__(self):
        return f"slots:{self.slots}" if self.kind == "slots" else self.kind


def default_powers(formation: Formation, params: ch.ChannelParams = ch.ChannelParams(),
                   margin: float = ch.DEFAULT_INTERFERENCE_MARGIN_DB):
    """Beacon and adapt transmit powers for a formation."""
    beacon = ch.beacon_tx_power(formation.safety_radius, params, margin)
    diameter = max(max_diameter(formation), formation.safety_radius)
    adapt = max(ch.adapt_tx_power(diameter, params), beacon)
    return beacon, adapt


@dataclass
class Scenario:
    formation: Formation
    protocol: pc.ProtocolParams = field(default_factory=pc.ProtocolParams)
    channel: ch.ChannelParams = field(default_factory=ch.ChannelParams)
    seed: int = 0
    join_schedule: Optional[Dict[int, int]] = None
    leave_schedule: Dict[int, int] = field(default_factory=dict)
    stop: StopCondition = field(default_factory=StopCondition)
    max_slots: int = 10_000_000
    mgmt_model: str = COLLISION
    evaluation: str = ROLLING
    trace: bool = False

    @classmethod
    def build(cls, formation: Formation, channel: ch.ChannelParams = ch.ChannelParams(),
              margin: float = ch.DEFAULT_INTERFERENCE_MARGIN_DB, **kwargs) -> "Scenario":
        """Scenario with transmit powers derived from the formation geometry.

        Protocol settings not given in ``kwargs`` keep their defaults.
        """
        proto_fields = set(pc.ProtocolParams.__dataclass_fields__)
        proto_kwargs = {k: kwargs.pop(k) for k in list(kwargs) if k in proto_fields}
        beacon, adapt = default_powers(formation, channel, margin)
        proto_kwargs.setdefault("beacon_tx_power", beacon)
        proto_kwargs.setdefault("adapt_tx_power", adapt)
        if "stop" in kwargs:
            kwargs["stop"] = StopCondition.parse(kwargs["stop"])
        return cls(formation=formation, protocol=pc.ProtocolParams(**proto_kwargs),
                   channel=channel, **kwargs)

    def joins(self) -> Dict[int, int]:
        n = self.formation.size
        if self.join_schedule is None:
            return {u: (0 if u == 0 else 2) for u in range(n)}
        sched = {int(u): int(k) for u, k in self.join_schedule.items()}
        missing = set(range(n)) - set(sched)
        if missing:
            raise ScenarioError(f"join schedule lacks UAVs {sorted(missing)[:5]}")
        first = min(sched.values())
        if sum(1 for k in sched.values() if k == first) != 1:
            raise ScenarioError("exactly one UAV must join before all others")
        return sched


@dataclass
class RunResult:
    u: int
    seed: int
    resolution_slot: Optional[int]
    convergence_slot: Optional[int]
    resolution_rounds: Optional[float]
    convergence_rounds: Optional[float]
    resolution_superframe: Optional[int]
    final_superframe: int
    control_packets: int
    overhead_normalized: Optional[float]
    reuse: float
    removed_slots: int
    valid: bool
    converged: bool
    superframes: int
    slots: int
    assignment: Dict[int, int] = field(default_factory=dict)
    trace: Optional[List[dict]] = None
    # stopped early: the remaining Start UAVs can never decode a beacon
    stalled: bool = False

    def to_dict(self, include_trace: bool = False) -> dict:
        d = asdict(self)
        d["assignment"] = {str(k): v for k, v in self.assignment.items()}
        if not include_trace:
            d.pop("trace")
        return d


@dataclass(frozen=True)
class Violation:
    kind: str  # "shared_slot", "low_sinr", "empty_slot", "unassigned", "bad_slot"
    slot: Optional[int] = None
    uav: Optional[int] = None
    receiver: Optional[int] = None

    def __str__(self):
        return f"{self.kind}(slot={self.slot}, uav={self.uav}, receiver={self.receiver})"


def validate_allocation(assignment, n_slots: int, formation: Formation,
                        channel: ch.ChannelParams, beacon_power: float,
                        check_empty: bool = True,
                        propagation: Optional[ch.Propagation] = None) -> List[Violation]:
    """SINR check of a complete schedule.

    ``assignment`` maps UAV id to transmission slot (1-based).  Every
    transmitter must be decoded by every one of its neighbors; with
    ``check_empty`` no slot may be left without a transmitter.
    """
    prop = propagation or ch.Propagation(formation.positions, channel)
    slots = np.zeros(formation.size, dtype=np.int64)
    out: List[Violation] = []
    for u in range(formation.size):
        s = assignment.get(u) if isinstance(assignment, dict) else assignment[u]
        if s is None:
            out.append(Violation("unassigned", uav=u))
            continue
        if not 1 <= s <= n_slots:
            out.append(Violation("bad_slot", slot=int(s), uav=u))
            continue
        slots[u] = s
    gamma = channel.sinr_threshold_linear
    noise = channel.noise_mw
    for s in range(1, n_slots + 1):
        tx = np.flatnonzero(slots == s)
        if len(tx) == 0:
            if check_empty:
                out.append(Violation("empty_slot", slot=s))
            continue
        rx = prop.rx_mw(tx, beacon_power)
        total = rx.sum(axis=0)
        tx_set = set(tx.tolist())
        for k, t in enumerate(tx):
            nb = formation.neighbors[t]
            if len(nb) == 0:
                continue
            for r in nb:
                if int(r) in tx_set:
                    out.append(Violation("shared_slot", slot=s, uav=int(t), receiver=int(r)))
            listening = nb[~np.isin(nb, tx)]
            if len(listening) == 0:
                continue
            sig = rx[k, listening]
            sinr = sig / (noise + total[listening] - sig)
            for r in listening[sinr < gamma]:
                out.append(Violation("low_sinr", slot=s, uav=int(t), receiver=int(r)))
    return out


def detect_resolution(states: Sequence[pc.UavState], violations: Sequence[Violation]) -> bool:
    if not states or any(s.lifecycle is not Lifecycle.RESOLVED for s in states):
        return False
    return not any(v.kind != "empty_slot" for v in violations)


def detect_convergence(states: Sequence[pc.UavState], violations: Sequence[Violation]) -> bool:
    return detect_resolution(states, violations) and not violations


class Simulation:
    def __init__(self, scenario: Scenario):
        self.sc = scenario
        self.params = scenario.protocol
        self.cparams = scenario.channel
        self.formation = scenario.formation
        self.U = self.formation.size
        if self.U < 1:
            raise ScenarioError("formation is empty")
        self.stop = StopCondition.parse(scenario.stop)
        self.mgmt_model = MGMT_MODELS.get(scenario.mgmt_model)
        if self.mgmt_model is None:
            raise ScenarioError(f"unknown management model {scenario.mgmt_model!r}")
        if scenario.evaluation not in EVALUATION_MODES:
            raise ScenarioError(f"unknown evaluation mode {scenario.evaluation!r}")
        self.rolling = scenario.evaluation == ROLLING
        self.joins = scenario.joins()
        for u, k in scenario.leave_schedule.items():
            if not 0 <= int(u) < self.U:
                raise ScenarioError(f"leave schedule names unknown UAV {u}")
            if int(k) < self.joins[int(u)]:
                raise ScenarioError(f"UAV {u} cannot leave before it joins")
        self.rng = np.random.default_rng(scenario.seed)
        self.prop = ch.Propagation(self.formation.positions, self.cparams)
        self.neighbor_mask = np.zeros((self.U, self.U), dtype=bool)
        for u, nb in enumerate(self.formation.neighbors):
            self.neighbor_mask[u, nb] = True
        self.safety = [
            pc.SafetyInfo(position=tuple(map(float, p))) for p in self.formation.positions
        ]

        self.states: List[Optional[pc.UavState]] = [None] * self.U
        self.active = np.zeros(self.U, dtype=bool)
        self.left = np.zeros(self.U, dtype=bool)
        self.attempt_age = np.zeros(self.U, dtype=np.int64)
        self.selection: Dict[int, np.ndarray] = {}
        self.n = 0
        self.obs = np.zeros((self.U, 0), dtype=np.int8)
        # rolling mode: beacons decoded over roughly the last superframe, as
        # (time, record, receivers) triples
        self.recent: deque = deque()
        self._recent_cache = None
        self.att_sent = np.zeros(self.U, dtype=bool)
        self.att_bad = np.zeros(self.U, dtype=bool)
        self.tx_slot = np.zeros(self.U, dtype=np.int64)
        self.superframe = 0
        self.slots = 0
        self.control_packets = 0
        self.removals = 0
        self.resolution_slot = None
        self.resolution_superframe = None
        self.convergence_slot = None
        self.trace: Optional[List[dict]] = [] if scenario.trace else None
        self._events: Dict[int, List[str]] = {}
        # reception and validation are pure functions of who transmits where,
        # and a settled schedule repeats them every superframe
        self._rx_cache: Dict[bytes, tuple] = {}
        self._check_cache: Optional[tuple] = None
        self._tx_memo: Optional[tuple] = None
        self._last_join = max(self.joins.values())
        self._last_leave = max(map(int, scenario.leave_schedule.values()), default=-1)
        self._frozen: Optional[tuple] = None
        self.stalled = False

    # ------------------------------------------------------------------ utils

    def _event(self, u: int, name: str):
        if self.trace is not None:
            self._events.setdefault(u, []).append(name)

    def _participants(self) -> np.ndarray:
        """Active UAVs that know the superframe (everyone but Start)."""
        return np.array([
            u for u in np.flatnonzero(self.active)
            if self.states[u].lifecycle is not Lifecycle.START
        ], dtype=np.intp)

    def _mgmt_slot(self, tx_ids: Sequence[int], beacons: Dict[int, pc.Beacon]):
        """Resolve one management slot; returns a SlotOutcome per listener."""
        self.control_packets += len(tx_ids)
        if len(tx_ids) == 0:
            return {}, np.zeros(self.U, dtype=np.int8)
        tx = np.asarray(tx_ids, dtype=np.intp)
        rx = self.prop.rx_mw(tx, self.params.adapt_tx_power)
        codes, best = ch.resolve_reception(rx, self.cparams, self.mgmt_model)
        codes[tx] = 0
        outcomes = {}
        for u in np.flatnonzero(self.active):
            if codes[u] == 1:
                sender = int(tx[best[u]])
                outcomes[u] = pc.SlotOutcome.decoded(sender, beacons[sender])
            elif codes[u] == 2:
                outcomes[u] = pc.OUTCOME_ENERGY
        return outcomes, codes

    def _resize(self, growth: int):
        if growth <= 0:
            return
        self.obs = np.hstack([self.obs, np.zeros((self.U, growth), dtype=np.int8)])
        pad = np.zeros(growth, dtype=np.int8)
        self.recent = deque((t, np.concatenate([rec, pad]), rx) for t, rec, rx in self.recent)
        self._recent_cache = None
        for u, rec in self.selection.items():
            self.selection[u] = np.concatenate([rec, np.zeros(growth, dtype=np.int8)])
        self.n += growth

    def _beacon(self, u: int, slot, **kw) -> pc.Beacon:
        return pc.build_beacon(self.states[u], slot, u, self.safety[u],
                               observation_buffer=self.obs[u], **kw)

    # ------------------------------------------------------------------ phases

    def _joins(self):
        k = self.superframe
        for u in sorted(u for u, when in self.joins.items() if when == k):
            self.active[u] = True
            self.obs[u] = 0
            if self.n == 0:
                # first UAV: adopt the default superframe and take T1
                self.n = self.params.dss
                self.obs = np.zeros((self.U, self.n), dtype=np.int8)
                self.states[u] = pc.UavState(
                    lifecycle=Lifecycle.RESOLVED, claimed_slot=1,
                    local_superframe_size=self.n,
                    silence_counters=np.zeros(self.n, dtype=np.int64),
                    leaving_at=self.sc.leave_schedule.get(u))
                self._event(u, "first")
            else:
                self.states[u] = pc.UavState(leaving_at=self.sc.leave_schedule.get(u))
                self._event(u, "join")

    def _grow_phase(self, participants):
        gm = self.params.gm
        g_tx = [u for u in participants if self.states[u].lifecycle is Lifecycle.ALLOCATION
                and self.states[u].grow_intent is not GrowIntent.NONE]
        requests = {u: self.states[u].grow_intent for u in g_tx}
        g_beacons = {u: self._beacon(u, "G") for u in g_tx}
        for u in g_tx:
            self.states[u] = replace(self.states[u], grow_intent=GrowIntent.NONE, c=0)
            self._event(u, "grow_request")
        g_out, _ = self._mgmt_slot(g_tx, g_beacons)
        g_set = set(g_tx)
        gn_tx = [u for u in participants if u not in g_set
                 and pc.gn_decision(g_out.get(u, pc.OUTCOME_NOTHING))]
        gn_out, _ = self._mgmt_slot(gn_tx, {u: self._beacon(u, "GN") for u in gn_tx})
        gn_set = set(gn_tx)

        growth = {}
        activity = np.zeros(self.U, dtype=bool)
        for u in participants:
            go = g_out.get(u, pc.OUTCOME_NOTHING)
            gno = gn_out.get(u, pc.OUTCOME_NOTHING)
            if u in gn_set:
                gno = pc.OUTCOME_ENERGY  # a GN sender knows GN is occupied
            growth[u] = pc.resolve_grow_phase(go, gno, u in g_set,
                                              requests.get(u, GrowIntent.NONE), gm)
            activity[u] = (u in g_set or u in gn_set or not go.is_nothing
                           or not gno.is_nothing)
        values = set(growth.values())
        if len(values) > 1:
            raise ConsensusError(
                f"superframe {self.superframe}: growth disagreement {sorted(values)}")
        g = values.pop() if values else 0
        if g:
            for u in participants:
                st = self.states[u]
                counters = st.silence_counters
                if st.lifecycle is Lifecycle.RESOLVED:
                    counters = np.concatenate([counters, np.zeros(g, dtype=np.int64)])
                self.states[u] = replace(st, local_superframe_size=st.local_superframe_size + g,
                                         silence_counters=counters)
            self._resize(g)
            for u in participants:
                self._event(u, f"grow+{g}")
        return activity

    def _select(self, participants):
        for u in participants:
            st = self.states[u]
            if st.lifecycle is not Lifecycle.ALLOCATION or st.attempt_slot is not None:
                continue
            record = self.selection.get(u)
            if record is None:
                record = self.obs[u]
            try:
                slot = pc.select_allocation(record, self.rng)
            except pc.NoSlotAvailable:
                self.states[u] = replace(st, grow_intent=GrowIntent.PLUS_ONE)
                continue
            self.selection.pop(u, None)
            self.states[u] = replace(st, attempt_slot=slot)
            self.attempt_age[u] = 0
            self.att_sent[u] = False
            self.att_bad[u] = False
            self._event(u, f"select{slot}")

    def _shrink_phase(self, participants, growth_activity):
        params = self.params
        s_tx, proposals = [], {}
        for u in participants:
            st = self.states[u]
            if st.lifecycle is not Lifecycle.RESOLVED or st.pending_shrink_backoff is None:
                continue
            if growth_activity[u]:
                self.states[u] = replace(st, pending_shrink_backoff=None, s=0,
                                         silence_counters=np.zeros(len(st.silence_counters),
                                                                   dtype=np.int64))
                continue
            if st.pending_shrink_backoff > 0:
                self.states[u] = replace(st, pending_shrink_backoff=st.pending_shrink_backoff - 1)
                continue
            slot = pc.eligible_proposal(st.silence_counters, st.claimed_slot, st.forbidden,
                                        params.st)
            if slot is None:
                self.states[u] = replace(st, pending_shrink_backoff=None, s=0)
                continue
            s_tx.append(u)
            proposals[u] = slot
            self._event(u, f"propose{slot}")
        s_beacons = {u: self._beacon(u, "S", slot_to_remove=proposals[u]) for u in s_tx}
        s_out, _ = self._mgmt_slot(s_tx, s_beacons)
        s_set = set(s_tx)

        # Start UAVs take part only as silent observers.
        listeners = np.flatnonzero(self.active)
        so_tx = [u for u in participants if u not in s_set
                 and pc.so_decision(s_out.get(u, pc.OUTCOME_NOTHING), self.states[u])]
        so_out, _ = self._mgmt_slot(so_tx, {u: self._beacon(u, "SO") for u in so_tx})
        sn_tx = [u for u in participants if u not in s_set
                 and pc.sn_decision(s_out.get(u, pc.OUTCOME_NOTHING))]
        sn_out, _ = self._mgmt_slot(sn_tx, {u: self._beacon(u, "SN") for u in sn_tx})
        so_set, sn_set = set(so_tx), set(sn_tx)

        removal = {}
        for u in listeners:
            so = pc.OUTCOME_ENERGY if u in so_set else so_out.get(u, pc.OUTCOME_NOTHING)
            sn = pc.OUTCOME_ENERGY if u in sn_set else sn_out.get(u, pc.OUTCOME_NOTHING)
            decision = pc.resolve_shrink_phase(s_out.get(u, pc.OUTCOME_NOTHING), so, sn,
                                               u in s_set, proposals.get(u))
            removal[u] = decision.slot if decision.kind == "remove" else None
            if u not in s_set:
                continue
            st = self.states[u]
            if decision.kind == "abort":
                counters = np.array(st.silence_counters, dtype=np.int64)
                counters[decision.slot - 1] = 0
                forbidden = dict(st.forbidden)
                forbidden[decision.slot] = 0
                self.states[u] = replace(st, pending_shrink_backoff=None, s=0,
                                         silence_counters=counters, forbidden=forbidden)
                self._event(u, "objected")
            elif decision.kind == "backoff":
                s = st.s + 1
                wait = pc.shrink_backoff(s, params.backoff_cap, st.claimed_slot, False, self.rng)
                self.states[u] = replace(st, s=s, pending_shrink_backoff=wait)
                self._event(u, "s_collision")
            else:
                self.states[u] = replace(st, pending_shrink_backoff=None, s=0)

        decided = {removal[u] for u in participants}
        if len(decided) > 1:
            raise ConsensusError(
                f"superframe {self.superframe}: removal disagreement {decided}")
        return decided.pop() if decided else None, removal

    def _transmission_slots(self):
        n = self.n
        tx_slot = self.tx_slot
        tx_slot[:] = 0
        leaving = np.zeros(self.U, dtype=bool)
        for u in np.flatnonzero(self.active):
            st = self.states[u]
            if st.lifecycle is Lifecycle.RESOLVED:
                tx_slot[u] = st.claimed_slot
            elif st.lifecycle is Lifecycle.ALLOCATION and st.attempt_slot is not None:
                tx_slot[u] = st.attempt_slot
            leaving[u] = st.leaving_at == self.superframe
        if np.any(tx_slot > n):
            raise SimulationError(f"UAV scheduled beyond superframe of {n} slots")
        # Once everyone is Resolved and nothing moves, a superframe repeats
        # the previous one exactly: same transmitters, same buffers.
        lifecycles = {self.states[u].lifecycle for u in np.flatnonzero(self.active)}
        settled = lifecycles == {Lifecycle.RESOLVED} and not leaving.any()
        reports = self.rolling and Lifecycle.ALLOCATION in lifecycles
        if settled:
            key = (n, tx_slot.tobytes(), self.active.tobytes(), self.obs.tobytes())
            if self._tx_memo is not None and self._tx_memo[0] == key:
                beacons, senders, dec, obs = self._tx_memo[1]
                self.obs[:] = obs
                return beacons, senders, dec
        beacons: List[pc.Beacon] = []
        senders: List[int] = []
        dec = np.full((self.U, n), -1, dtype=np.int64)
        inactive = ~self.active
        power = self.params.beacon_tx_power
        for j in range(1, n + 1):
            now = self.slots + N_MANAGEMENT + j
            tx = np.flatnonzero(tx_slot == j)
            if reports and len(tx):
                self._claim_due(tx, j, now)
                tx = np.flatnonzero(tx_slot == j)
            if len(tx) == 0:
                self.obs[:, j - 1] = 0
                continue
            base = len(beacons)
            for u in tx:
                beacons.append(self._beacon(u, j, leaving=bool(leaving[u])))
                senders.append(int(u))
            codes, best = self._reception(tx, power)
            codes[inactive] = 0
            self.obs[:, j - 1] = codes
            hit = codes == 1
            dec[hit, j - 1] = base + best[hit]
            if reports:
                self.att_sent[tx] = [self.states[u].lifecycle is Lifecycle.ALLOCATION for u in tx]
                self._rolling_reports(j, now, tx, codes, best, beacons[base:])
        senders = np.asarray(senders, dtype=np.intp)
        self._tx_memo = (key, (beacons, senders, dec, self.obs.copy())) if settled else None
        return beacons, senders, dec

    def _reception(self, tx, power):
        key = tx.tobytes()
        hit = self._rx_cache.get(key)
        if hit is None:
            if len(self._rx_cache) >= 4096:
                self._rx_cache.clear()
            codes, best = ch.resolve_reception(self.prop.rx_mw(tx, power), self.cparams, ch.SINR)
            codes[tx] = 0
            hit = self._rx_cache[key] = (codes, best)
        return hit[0].copy(), hit[1]

    # ------------------------------------------------------------ rolling mode

    def _claim_due(self, tx, j, now):
        """Judge attempts whose neighbors have all reported since the last transmission."""
        n = self.n
        for u in tx:
            st = self.states[u]
            if st.lifecycle is not Lifecycle.ALLOCATION or not self.att_sent[u]:
                continue
            if self.att_bad[u]:
                self._attempt_failed_now(u, j, now)
                continue
            self.states[u] = replace(st, lifecycle=Lifecycle.RESOLVED, claimed_slot=j,
                                     attempt_slot=None, c=0, f=0, s=0,
                                     silence_counters=np.zeros(n, dtype=np.int64),
                                     pending_shrink_backoff=None)
            self.att_sent[u] = False
            self.att_bad[u] = False
            self._event(u, "claim")

    def _rolling_reports(self, j, now, tx, codes, best, beacons):
        window = now - (N_MANAGEMENT + self.n)
        while self.recent and self.recent[0][0] <= window:
            self.recent.popleft()
        attempting = self.att_sent & ~self.att_bad
        for k, sender in enumerate(tx):
            got = (codes == 1) & (best == k)
            if not got.any():
                continue
            rec = np.asarray(beacons[k].record)
            self.recent.append((now, rec, got))
            cand = np.flatnonzero(got & attempting & self.neighbor_mask[:, sender])
            if len(cand) == 0:
                continue
            # an attempter's tx_slot is its attempt slot; only a report that
            # does not confirm it matters (cf. pc.evaluate_attempt)
            self.att_bad[cand[rec[self.tx_slot[cand] - 1] != pc.RECEIVED]] = True

    def _rolling_view(self, u, now) -> np.ndarray:
        """Slot settings seen by ``u`` over the last superframe."""
        if self._recent_cache is None or self._recent_cache[0] != (now, len(self.recent)):
            times = np.array([t for t, _, _ in self.recent], dtype=np.int64)
            recs = np.array([r for _, r, _ in self.recent], dtype=np.int8).reshape(len(times), self.n)
            rx = np.array([m for _, _, m in self.recent], dtype=bool).reshape(len(times), self.U)
            self._recent_cache = ((now, len(self.recent)), times, recs, rx)
        _, times, recs, rx = self._recent_cache
        window = now - (N_MANAGEMENT + self.n)
        sel = rx[:, u] & (times > window)
        own = self.obs[u]
        busy = (own == pc.RECEIVED) | (recs[sel] == pc.RECEIVED).any(axis=0)
        energy = (own == pc.FAILED) | (recs[sel] == pc.FAILED).any(axis=0)
        return np.where(busy, 1, np.where(energy, 2, 0)).astype(np.int8)

    def _attempt_failed_now(self, u, j, now):
        action, st = pc.on_attempt_failed(self.states[u], self.params.ct)
        st = replace(st, attempt_slot=None)
        self.att_sent[u] = False
        self.att_bad[u] = False
        self.tx_slot[u] = 0
        self._event(u, "attempt_failed")
        view = self._rolling_view(u, now)
        if action is pc.AttemptAction.REQUEST_GROW_MARGIN:
            self.states[u] = replace(st, grow_intent=GrowIntent.PLUS_MARGIN)
            self.selection[u] = view
            return
        try:
            slot = pc.select_allocation(view, self.rng)
        except pc.NoSlotAvailable:
            self.states[u] = replace(st, grow_intent=GrowIntent.PLUS_ONE)
            self.selection[u] = view
            return
        self.states[u] = replace(st, attempt_slot=slot)
        # a slot later in this superframe is used straight away
        self.tx_slot[u] = slot if slot > j else 0
        self._event(u, f"select{slot}")

    def _end_of_superframe(self, beacons, senders, dec, growth_activity, removal_by_uav):
        params = self.params
        n = n_sent = self.n
        nb = len(beacons)
        if nb:
            records = np.vstack([b.record for b in beacons])
            heard = np.zeros((self.U, nb), dtype=bool)
            rows, cols = np.nonzero(dec >= 0)
            heard[rows, dec[rows, cols]] = True
            hf = heard.astype(np.float32)
            said1 = hf @ (records == pc.RECEIVED).astype(np.float32) > 0
            said2 = hf @ (records == pc.FAILED).astype(np.float32) > 0
            leaving = np.array([b.leaving_flag for b in beacons])
        else:
            heard = np.zeros((self.U, 0), dtype=bool)
            said1 = said2 = np.zeros((self.U, n), dtype=bool)
            leaving = np.zeros(0, dtype=bool)
        own = self.obs
        merged = np.where((own == 1) | said1, 1, np.where((own == 2) | said2, 2, 0)).astype(np.int8)
        if leaving.any():
            for b in np.flatnonzero(leaving):
                slot = beacons[b].current_slot
                merged[heard[:, b], slot - 1] = 0
        nb_heard = heard & self.neighbor_mask[:, senders] if nb else heard

        # The removal agreed in this superframe's S/SO/SN slots is applied
        # before the per-UAV updates so that every UAV re-arms its shrink
        # backoff from its new position in the superframe.
        removed = {removal_by_uav.get(u) for u in self._participants()}
        if len(removed) > 1:
            raise ConsensusError(f"superframe {self.superframe}: removal views {removed}")
        slot = removed.pop() if removed else None
        if slot is not None:
            keep = np.ones(n, dtype=bool)
            keep[slot - 1] = False
            merged = merged[:, keep]
            if nb:
                records = records[:, keep]
            self._apply_removal(slot)
            n = self.n

        # Only a beacon that does not confirm a UAV's slot can change its
        # verdict, so each UAV is handed the first such beacon (or none).
        own_slot = np.zeros(self.U, dtype=np.int64)
        for u in np.flatnonzero(self.active):
            st = self.states[u]
            own_slot[u] = st.claimed_slot or st.attempt_slot or 0
        first_bad = np.full(self.U, -1, dtype=np.int64)
        idx = np.flatnonzero(own_slot)
        if nb and len(idx):
            bad = nb_heard[idx] & (records[:, own_slot[idx] - 1].T != pc.RECEIVED)
            hit = bad.any(axis=1)
            first_bad[idx[hit]] = bad[hit].argmax(axis=1)

        for u in np.flatnonzero(self.active):
            st = self.states[u]
            if st.lifecycle is Lifecycle.START:
                got = np.flatnonzero(heard[u])
                if len(got) == 0:
                    continue
                size = beacons[got[-1]].superframe_size
                if size != n_sent:
                    raise ConsensusError(f"UAV {u} decoded a beacon with size {size} != {n}")
                self.states[u] = replace(st, lifecycle=Lifecycle.ALLOCATION,
                                         local_superframe_size=n)
                self._needs_selection(u, merged[u])
                self._event(u, "enter_allocation")
                continue

            nbs = []
            b = first_bad[u]
            if b >= 0:
                # records were re-indexed if a slot was just removed
                nbs = [replace(beacons[b], record=records[b], superframe_size=n)]
            if st.lifecycle is Lifecycle.ALLOCATION:
                if st.attempt_slot is None:
                    self._needs_selection(u, merged[u])
                    continue
                if self.rolling:
                    continue
                self.attempt_age[u] += 1
                if self.attempt_age[u] < 2:
                    continue
                result = pc.evaluate_attempt(st.attempt_slot, nbs)
                if result is pc.AttemptResult.CLAIMED:
                    self.states[u] = replace(st, lifecycle=Lifecycle.RESOLVED,
                                             claimed_slot=st.attempt_slot, attempt_slot=None,
                                             c=0, f=0, s=0,
                                             silence_counters=np.zeros(n, dtype=np.int64),
                                             pending_shrink_backoff=None)
                    self._event(u, "claim")
                elif result is pc.AttemptResult.FAILED:
                    action, st = pc.on_attempt_failed(st, params.ct)
                    st = replace(st, attempt_slot=None)
                    if action is pc.AttemptAction.REQUEST_GROW_MARGIN:
                        st = replace(st, grow_intent=GrowIntent.PLUS_MARGIN)
                    self.states[u] = st
                    self._needs_selection(u, merged[u])
                    self._event(u, "attempt_failed")
                continue

            # Resolved
            action, st = pc.resolved_failure_check(st, nbs, self.rng, params.tsr)
            if action is pc.FailureAction.RELEASE:
                self.states[u] = st
                self._needs_selection(u, merged[u])
                self._event(u, "release")
                continue
            proposal, st = pc.update_silence_counters(st, merged[u], params.st,
                                                      bool(growth_activity[u]))
            if proposal is not None and st.pending_shrink_backoff is None:
                wait = pc.shrink_backoff(0, params.backoff_cap, st.claimed_slot, True, self.rng)
                st = replace(st, pending_shrink_backoff=wait, s=0)
            if st.forbidden:
                st = replace(st, forbidden=pc.forbidden_set_tick(st.forbidden, params.fst))
            self.states[u] = st

    def _needs_selection(self, u: int, record: np.ndarray):
        st = self.states[u]
        self.selection[u] = record.copy()
        if st.grow_intent is GrowIntent.PLUS_MARGIN:
            return
        intent = GrowIntent.NONE if pc.available_slots(record) else GrowIntent.PLUS_ONE
        if intent is not st.grow_intent:
            self.states[u] = replace(st, grow_intent=intent)

    def _apply_removal(self, slot: int):
        for u in self._participants():
            st = pc.apply_slot_removal(self.states[u], slot)
            # everyone re-arms from its new slot index (see the shrink notes)
            self.states[u] = replace(st, pending_shrink_backoff=None, s=0)
        self.obs = np.delete(self.obs, slot - 1, axis=1)
        self.recent = deque((t, np.delete(rec, slot - 1), rx) for t, rec, rx in self.recent)
        self._recent_cache = None
        for u in self._participants():
            if self.states[u].attempt_slot is None:
                self.att_sent[u] = False
                self.att_bad[u] = False
        for u, rec in list(self.selection.items()):
            self.selection[u] = np.delete(rec, slot - 1)
        self.n -= 1
        self.removals += 1
        for u in self._participants():
            self._event(u, f"remove{slot}")

    def _leaves(self):
        for u in np.flatnonzero(self.active):
            st = self.states[u]
            if st.leaving_at is not None and st.leaving_at == self.superframe:
                if st.lifecycle is not Lifecycle.RESOLVED:
                    raise ScenarioError(f"UAV {u} must be Resolved to leave")
                self.active[u] = False
                self.left[u] = True
                self.selection.pop(u, None)
                self._event(u, "leave")

    def _check_consensus(self):
        sizes = {self.states[u].local_superframe_size for u in self._participants()}
        if sizes and sizes != {self.n}:
            raise ConsensusError(
                f"superframe {self.superframe}: local superframe sizes {sorted(sizes)}")

    # ------------------------------------------------------------------ driver

    def current_assignment(self) -> Dict[int, Optional[int]]:
        out = {}
        for u in np.flatnonzero(self.active):
            st = self.states[u]
            out[int(u)] = st.claimed_slot
        return out

    def _remaining(self):
        return [u for u in range(self.U) if not self.left[u]]

    def _check_state(self):
        if any(st is None for st in self.states):
            return False, False
        members = [int(u) for u in np.flatnonzero(self.active)]
        states = [self.states[u] for u in members]
        if any(s.lifecycle is not Lifecycle.RESOLVED for s in states):
            return False, False
        assignment = {i: self.states[u].claimed_slot for i, u in enumerate(members)}
        key = (self.n, tuple(members), tuple(assignment.values()))
        if self._check_cache is not None and self._check_cache[0] == key:
            violations = self._check_cache[1]
        else:
            sub = Formation(self.formation.positions[members], self.formation.safety_radius) \
                if len(members) != self.U else self.formation
            prop = self.prop if len(members) == self.U else None
            violations = validate_allocation(assignment, self.n, sub, self.cparams,
                                             self.params.beacon_tx_power, True, prop)
            self._check_cache = (key, violations)
        if len(members) > 1 and len(set(assignment.values())) == 1 and violations:
            raise SimulationError("all UAVs transmit in the same slot")
        return detect_resolution(states, violations), detect_convergence(states, violations)

    def _fingerprint(self):
        """Everything a superframe's outcome depends on, or None if it may still change.

        Only called for a formation of Resolved UAVs plus Start UAVs that
        decode nothing. A superframe that consumes no randomness and sends
        no control packet is then a function of this tuple alone.
        """
        if self.superframe <= max(self._last_join, self._last_leave):
            return None
        lifecycles = {self.states[u].lifecycle for u in np.flatnonzero(self.active)}
        if Lifecycle.START not in lifecycles or Lifecycle.ALLOCATION in lifecycles:
            return None
        per_uav = tuple(
            (st.lifecycle, st.claimed_slot, st.c, st.f, st.s,
             np.asarray(st.silence_counters).tobytes(), tuple(sorted(st.forbidden.items())),
             st.pending_shrink_backoff, st.local_superframe_size, st.grow_intent)
            for st in (self.states[u] for u in np.flatnonzero(self.active)))
        return (self.n, self.active.tobytes(), self.obs.tobytes(), per_uav)

    def step(self):
        """Run one superframe."""
        rng_before = self.rng.bit_generator.state
        packets_before = self.control_packets
        self._joins()
        participants = self._participants()
        activity = self._grow_phase(participants)
        self._select(participants)
        _, removal_by_uav = self._shrink_phase(participants, activity)
        n_used = self.n
        beacons, senders, dec = self._transmission_slots()
        self._end_of_superframe(beacons, senders, dec, activity, removal_by_uav)
        self._leaves()
        self._check_consensus()
        self.slots += N_MANAGEMENT + n_used
        if self.trace is not None:
            self._snapshot()
        self.superframe += 1
        quiet = (self.control_packets == packets_before
                 and self.rng.bit_generator.state == rng_before)
        frozen = self._fingerprint() if quiet else None
        if frozen is not None and frozen == self._frozen:
            self.stalled = True
        self._frozen = frozen

    def _snapshot(self):
        for u in range(self.U):
            st = self.states[u]
            if st is None:
                continue
            self.trace.append({
                "superframe": self.superframe,
                "uav": u,
                "state": "left" if self.left[u] else st.lifecycle.value,
                "claimed_slot": st.claimed_slot,
                "superframe_size": st.local_superframe_size,
                "event": ";".join(self._events.get(u, [])),
            })
        self._events.clear()

    def run(self) -> RunResult:
        stop = self.stop
        limit = stop.slots if stop.kind == "slots" else self.sc.max_slots
        while self.slots < limit:
            self.step()
            resolved, converged = self._check_state()
            if resolved and self.resolution_slot is None:
                self.resolution_slot = self.slots
                self.resolution_superframe = self.n
            if converged and self.convergence_slot is None:
                self.convergence_slot = self.slots
                if self.resolution_slot is None:
                    self.resolution_slot = self.slots
                    self.resolution_superframe = self.n
            if stop.kind == "resolution" and self.resolution_slot is not None:
                break
            if stop.kind == "convergence" and self.convergence_slot is not None:
                break
            if self.stalled:
                break
        return self._result()

    def _result(self) -> RunResult:
        U = self.U
        res, conv = self.resolution_slot, self.convergence_slot
        conv_rounds = conv / U if conv is not None else None
        assignment = {u: s for u, s in self.current_assignment().items() if s is not None}
        members = [int(u) for u in np.flatnonzero(self.active)]
        valid = False
        if members and len(assignment) == len(members):
            sub = Formation(self.formation.positions[members], self.formation.safety_radius) \
                if len(members) != U else self.formation
            idx = {u: i for i, u in enumerate(members)}
            valid = not validate_allocation({idx[u]: s for u, s in assignment.items()}, self.n,
                                            sub, self.cparams, self.params.beacon_tx_power,
                                            conv is not None,
                                            self.prop if len(members) == U else None)
        return RunResult(
            u=U,
            seed=self.sc.seed,
            resolution_slot=res,
            convergence_slot=conv,
            resolution_rounds=res / U if res is not None else None,
            convergence_rounds=conv_rounds,
            resolution_superframe=self.resolution_superframe,
            final_superframe=self.n,
            control_packets=self.control_packets,
            overhead_normalized=(self.control_packets / (U * conv_rounds)) if conv_rounds else None,
            reuse=len(members) / self.n if self.n else 0.0,
            removed_slots=self.removals,
            valid=valid,
            converged=conv is not None,
            superframes=self.superframe,
            slots=self.slots,
            assignment=assignment,
            trace=self.trace,
            stalled=self.stalled,
        )


def run(scenario: Scenario) -> RunResult:
    return Simulation(scenario).run()


def write_trace(trace: Sequence[dict], path_or_file) -> None:
    own = isinstance(path_or_file, str)
    fh = open(path_or_file, "w") if own else path_or_file
    try:
        for row in trace:
            fh.write(json.dumps(row) + "\n")
    finally:
        if own:
            fh.close()
