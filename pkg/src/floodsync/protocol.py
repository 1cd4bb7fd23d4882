"""Rapid-flooding multi-broadcast synchronization state machines.

One node class covers the reference (root) and non-root behavior: the root
periodically emits a burst of N timestamped packets and harvests reverse
observations from its neighbors' forwards; non-root nodes accept the first
copy of each new round, estimate skew from a sliding window of hardware
timestamp batches, estimate offset adaptively (two-way joint MLE when the
reverse-direction sample is available, min-based MLE against the running
delay average otherwise), correct their logical clock, and re-broadcast
within the rapid-forwarding latency budget.

Sign conventions follow the estimators module: every estimate describes the
receiver relative to the sender, so a node divides out the skew estimate and
subtracts the offset estimate when correcting. A simplified root election
rides on the normal packet format: after two silent periods a node
announces candidacy with its last known hop distance, the lowest
(hop, node id) pair wins, and the winner starts a fresh round epoch.
"""

import struct
from collections import deque
from dataclasses import dataclass, field

from floodsync.clocks import (
    EstimateOutOfBandError,
    NodeClock,
    round_half_away,
)
from floodsync.estimators import (
    BroadcastBatch,
    DelayEstimator,
    InsufficientDataError,
    InvalidIntervalError,
    joint_offset_mle,
    min_offset_mle,
    outlier_filter,
    skew_mle,
    skew_observations,
)

ROLE_ROOT = "root"
ROLE_NON_ROOT = "non_root"
ROLE_CANDIDATE = "candidate"


@dataclass
class SyncPacket:
    """Wire record of one synchronization broadcast.

    The neighbor buffer (reverse-direction minimum logical differences, one
    per recently heard neighbor) rides only on the first packet of a burst;
    an absent entry means no fresh sample, a stored 0 is a real observation.
    """

    sender_id: int
    seq_in_batch: int
    hw_ts: int
    logical_ts: int
    phi: float
    round_id: int
    theta_cum: float
    hop: int
    election: bool = False
    origin_id: int = 0
    neighbor_buf: dict | None = None

    def __post_init__(self):
        if (self.neighbor_buf is not None) != (self.seq_in_batch == 1):
            raise ValueError("neighbor_buf rides exactly on packet 1 of a burst")


_HEADER = struct.Struct("<IBQHBIqqdd")
_BUF_ENTRY = struct.Struct("<Iq")
_FLAG_ELECTION = 1


def packet_to_bytes(pkt: SyncPacket) -> bytes:
    """Canonical little-endian serialization, used for trace logs.

    Layout: sender u32, seq u8, round u64, hop u16, flags u8, hw i64,
    logical i64, phi f64, theta f64, then (when seq is 1) a u8 entry count
    followed by (id u32, value i64) pairs.
    """
    flags = _FLAG_ELECTION if pkt.election else 0
    out = [_HEADER.pack(pkt.sender_id, pkt.seq_in_batch, pkt.round_id,
                        pkt.hop, flags, pkt.origin_id, pkt.hw_ts,
                        pkt.logical_ts, pkt.phi, pkt.theta_cum)]
    if pkt.seq_in_batch == 1:
        buf = pkt.neighbor_buf
        out.append(struct.pack("<B", len(buf)))
        for nid in sorted(buf):
            out.append(_BUF_ENTRY.pack(nid, buf[nid]))
    return b"".join(out)


def packet_from_bytes(data: bytes) -> SyncPacket:
    (sender, seq, rnd, hop, flags, origin, hw, logical, phi,
     theta) = _HEADER.unpack_from(data, 0)
    buf = None
    if seq == 1:
        off = _HEADER.size
        (count,) = struct.unpack_from("<B", data, off)
        off += 1
        buf = {}
        for _ in range(count):
            nid, value = _BUF_ENTRY.unpack_from(data, off)
            off += _BUF_ENTRY.size
            buf[nid] = value
    return SyncPacket(sender_id=sender, seq_in_batch=seq, hw_ts=hw,
                      logical_ts=logical, phi=phi, round_id=rnd,
                      theta_cum=theta, hop=hop,
                      election=bool(flags & _FLAG_ELECTION),
                      origin_id=origin, neighbor_buf=buf)


@dataclass
class ProtocolParams:
    """Knobs shared by the protocol implementations."""

    n_packets: int = 5
    fifo_pages: int = 2            # W
    window: int = 2                # w <= W
    period_us: int = 30_000_000
    spacing_range_us: tuple = (1.0, 3.0)
    span_bound_us: int = 12
    rapid_wait_range_us: tuple = (10_000, 50_000)
    d_fixed_prior_us: float = 3.0
    ewma_alpha: float = 0.125
    d_ceiling_us: float = 30.0
    neighbor_capacity: int = 32
    silence_rounds: int = 2
    candidate_wait_periods: int = 2
    epoch_stride: int = 1_000_000
    lr_table_size: int = 8
    lr_reset_threshold_us: float = 2000.0
    outlier_sigma_factor: float = 3.0

    def __post_init__(self):
        if self.fifo_pages < 2:
            raise ValueError("timestamp FIFO needs at least 2 pages")
        if not 2 <= self.window <= self.fifo_pages:
            raise ValueError("sliding window must satisfy 2 <= w <= W")


@dataclass
class _NeighborEntry:
    last_seen_us: int
    last_round: int
    harvest_round: int = -1
    harvest_min: int = 0


class NeighborTable:
    """Bounded per-neighbor bookkeeping plus reverse-sample harvesting.

    The harvested value for a neighbor is the minimum logical difference
    (own receive stamp minus its send stamp) over that neighbor's most
    recent burst, tagged with the burst's round so it expires after one
    round and stale uplinks never pair with fresh downlinks.
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.entries = {}
        self._last_sweep_us = -1

    def observe(self, sender: int, now_us: int, round_id: int,
                period_us: int) -> bool:
        entry = self.entries.get(sender)
        if entry is not None:
            entry.last_seen_us = now_us
            entry.last_round = round_id
            return True
        if len(self.entries) >= self.capacity:
            # full tables sweep for inactive entries at most once a period;
            # packets from unknown senders are otherwise rejected cheaply
            if now_us - self._last_sweep_us >= period_us:
                self.evict_inactive(now_us, period_us)
        if len(self.entries) >= self.capacity:
            return False
        self.entries[sender] = _NeighborEntry(last_seen_us=now_us,
                                              last_round=round_id)
        return True

    def harvest(self, sender: int, diff: int, round_id: int) -> None:
        entry = self.entries.get(sender)
        if entry is None:
            return
        if entry.harvest_round != round_id:
            entry.harvest_round = round_id
            entry.harvest_min = diff
        else:
            entry.harvest_min = min(entry.harvest_min, diff)

    def buf_for_round(self, round_id) -> dict:
        if round_id is None:
            return {}
        return {nid: e.harvest_min for nid, e in sorted(self.entries.items())
                if e.harvest_round == round_id}

    def evict_inactive(self, now_us: int, period_us: int) -> None:
        self._last_sweep_us = now_us
        dead = [nid for nid, e in self.entries.items()
                if now_us - e.last_seen_us > period_us]
        for nid in dead:
            del self.entries[nid]


@dataclass
class _PendingRound:
    father: int
    round_id: int
    phi_j: float
    theta_j: float
    hop_j: int
    first_recv_us: int
    first_recv_hw: int
    uplink: int | None = None
    slots: dict = field(default_factory=dict)  # seq -> (s_hw, s_log, r_hw, r_log)


@dataclass
class _BurstPlan:
    round_id: int
    phi: float
    theta_cum: float
    hop: int
    buf: dict
    election: bool = False
    origin_id: int = 0


class RdcNode:
    """Root and non-root state machine for the rapid-flooding protocol.

    With adaptive=False the node runs the fixed-prior variant: offsets come
    from the min-based MLE against the configured delay prior and the
    reverse-direction buffer machinery is disabled.
    """

    def __init__(self, node_id: int, clock: NodeClock, params: ProtocolParams,
                 rng, role: str = ROLE_NON_ROOT, adaptive: bool = True):
        self.node_id = node_id
        self.clock = clock
        self.params = params
        self.rng = rng
        self.role = role
        self.adaptive = adaptive
        self.alive = True

        self.round_id = 0
        self.theta_cum = 0.0
        self.my_hop = 0 if role == ROLE_ROOT else None
        self.fifo = {}            # father -> deque of BroadcastBatch
        self.skew = {}            # father -> last accepted phi_hat
        self.d_est = {}           # father -> DelayEstimator
        self.nbrs = NeighborTable(params.neighbor_capacity)
        self.pending = None
        self.last_fwd_round = None
        self.last_fwd_hw = None

        self.heard_round_this_period = False
        self.silence = 0
        self.best_candidate = None        # (hop, node_id)
        self.best_candidate_seen_us = 0
        self.is_initial_root = role == ROLE_ROOT

        self.counters = {"corrections": 0, "phi_rejections": 0,
                         "joint_offsets": 0, "min_offsets": 0,
                         "rounds_accepted": 0, "elections_won": 0}

    # -- lifecycle ----------------------------------------------------------

    def start(self, sim) -> None:
        if self.role == ROLE_ROOT:
            self.round_id = 1
            sim.timer(0, self.node_id, "root_period")
        else:
            phase = int(self.rng.uniform(0, self.params.period_us))
            sim.timer(phase + self.params.period_us, self.node_id, "tick")

    def logical_at(self, now_us: int) -> int:
        return self.clock.logical_at(now_us)

    # -- timers --------------------------------------------------------------

    def on_timer(self, sim, now: int, tag: str, payload) -> None:
        if tag == "root_period":
            if self.role != ROLE_ROOT:
                return
            self.nbrs.evict_inactive(now, self.params.period_us)
            self._begin_burst(sim, now)
            sim.timer(now + self.params.period_us, self.node_id, "root_period")
        elif tag == "tick":
            self._period_tick(sim, now)
            sim.timer(now + self.params.period_us, self.node_id, "tick")
        elif tag == "tx":
            plan, idx = payload
            self._transmit_one(sim, now, plan, idx)
        elif tag == "compensate":
            self._compensation_task(sim, now, payload)
        elif tag == "forward":
            if self.role != ROLE_ROOT and payload == self.round_id:
                self._begin_burst(sim, now)
        elif tag == "candidacy_decision":
            self._candidacy_decision(sim, now)

    def _period_tick(self, sim, now: int) -> None:
        if self.role == ROLE_ROOT:
            return
        self.nbrs.evict_inactive(now, self.params.period_us)
        if self.heard_round_this_period:
            self.silence = 0
        else:
            self.silence += 1
        self.heard_round_this_period = False
        # Forget candidates that went quiet (their announcements recur).
        if (self.best_candidate is not None
                and now - self.best_candidate_seen_us > 2 * self.params.period_us):
            self.best_candidate = None
        if self.silence >= self.params.silence_rounds:
            self._consider_candidacy(sim, now)

    # -- election -------------------------------------------------------------

    def _election_key(self):
        hop = self.my_hop if self.my_hop is not None else 1 << 16
        return (hop, self.node_id)

    def _consider_candidacy(self, sim, now: int) -> None:
        key = self._election_key()
        if self.best_candidate is not None and self.best_candidate < key:
            return  # a better candidate is already in play; stay a follower
        if self.role != ROLE_CANDIDATE:
            self.role = ROLE_CANDIDATE
            sim.timer(now + self.params.candidate_wait_periods * self.params.period_us,
                      self.node_id, "candidacy_decision")
        self._announce_candidacy(sim, now)

    def _announce_candidacy(self, sim, now: int) -> None:
        hop, _ = self._election_key()
        self._send_candidacy(sim, now, hop, self.node_id)

    def _send_candidacy(self, sim, now: int, hop: int, origin: int) -> None:
        plan = _BurstPlan(round_id=self.round_id, phi=self.clock.logical.phi,
                          theta_cum=self.theta_cum, hop=hop, buf={},
                          election=True, origin_id=origin)
        self._transmit_one(sim, now, plan, 0)

    def _candidacy_decision(self, sim, now: int) -> None:
        if self.role != ROLE_CANDIDATE:
            return
        if self.best_candidate is not None and self.best_candidate < self._election_key():
            self.role = ROLE_NON_ROOT
            return
        # Won the local election: become the acting reference.
        self.role = ROLE_ROOT
        self.my_hop = 0
        self.theta_cum = 0.0
        self.silence = 0
        self.round_id += self.params.epoch_stride
        self.pending = None
        self.counters["elections_won"] += 1
        sim.note("elected_root", node=self.node_id, round=self.round_id)
        sim.timer(now, self.node_id, "root_period")

    # -- receive ---------------------------------------------------------------

    def on_receive(self, sim, now: int, pkt: SyncPacket) -> None:
        if pkt.election:
            self._on_candidacy(sim, now, pkt)
            return
        if not self.nbrs.observe(pkt.sender_id, now, pkt.round_id,
                                 self.params.period_us):
            sim.note("nbr_table_full", node=self.node_id, sender=pkt.sender_id)
            return
        self.heard_round_this_period = True
        self.silence = 0
        if self.role == ROLE_CANDIDATE:
            self.role = ROLE_NON_ROOT
        elif self.role == ROLE_ROOT and not self.is_initial_root \
                and pkt.round_id > self.round_id:
            # Another reference with a newer epoch is active: abdicate.
            self.role = ROLE_NON_ROOT
            self.my_hop = None
            sim.note("abdicate", node=self.node_id)

        hw_i = self.clock.hw(now)
        log_i = self.clock.logical_at(now)
        self.nbrs.harvest(pkt.sender_id, log_i - pkt.logical_ts, pkt.round_id)

        if self.role == ROLE_ROOT:
            return  # reference only harvests reverse observations

        if pkt.round_id > self.round_id:
            self.round_id = pkt.round_id
            uplink = None
            if self.adaptive and pkt.neighbor_buf is not None:
                uplink = pkt.neighbor_buf.get(self.node_id)
            self.pending = _PendingRound(
                father=pkt.sender_id, round_id=pkt.round_id, phi_j=pkt.phi,
                theta_j=pkt.theta_cum, hop_j=pkt.hop, first_recv_us=now,
                first_recv_hw=hw_i, uplink=uplink)
            self.pending.slots[pkt.seq_in_batch] = (pkt.hw_ts, pkt.logical_ts,
                                                    hw_i, log_i)
            sim.timer(now + self.params.span_bound_us + 3, self.node_id,
                      "compensate", pkt.round_id)
        elif (self.pending is not None
              and pkt.round_id == self.pending.round_id
              and pkt.sender_id == self.pending.father
              and now - self.pending.first_recv_us <= self.params.span_bound_us
              and pkt.seq_in_batch not in self.pending.slots):
            self.pending.slots[pkt.seq_in_batch] = (pkt.hw_ts, pkt.logical_ts,
                                                    hw_i, log_i)
            if (self.adaptive and self.pending.uplink is None
                    and pkt.neighbor_buf is not None):
                self.pending.uplink = pkt.neighbor_buf.get(self.node_id)

    def _on_candidacy(self, sim, now: int, pkt: SyncPacket) -> None:
        key = (pkt.hop, pkt.origin_id)
        improved = self.best_candidate is None or key < self.best_candidate
        if improved:
            self.best_candidate = key
        self.best_candidate_seen_us = now
        if self.role == ROLE_CANDIDATE and key < self._election_key():
            self.role = ROLE_NON_ROOT
        # Relay first-seen better candidacies so the lowest (hop, id) pair
        # wins network-wide, not just among its radio neighbors.
        if improved and key != self._election_key():
            self._send_candidacy(sim, now, pkt.hop, pkt.origin_id)

    # -- compensation -----------------------------------------------------------

    def _compensation_task(self, sim, now: int, round_id: int) -> None:
        pending = self.pending
        if pending is None or pending.round_id != round_id:
            return
        self.pending = None
        seqs = sorted(pending.slots)
        batch = BroadcastBatch(
            sender_hw=[pending.slots[s][0] for s in seqs],
            receiver_hw=[pending.slots[s][2] for s in seqs],
            sender_logical=[pending.slots[s][1] for s in seqs],
            receiver_logical=[pending.slots[s][3] for s in seqs],
            round_id=round_id,
            span_bound_us=self.params.span_bound_us,
        )
        father = pending.father
        fifo = self.fifo.setdefault(father, deque(maxlen=self.params.fifo_pages))

        # Skew over the sliding window: newest batch against the w-th page.
        depth = self.params.window - 1
        if len(fifo) >= depth:
            old = fifo[-depth]
            try:
                p = skew_observations(old, batch)
                # each p sample is a difference of two stamped differences,
                # so its quantization envelope is two ticks wide
                kept = outlier_filter(p, self.params.outlier_sigma_factor,
                                      granularity_us=2.0)
                tau = batch.receiver_hw[0] - old.receiver_hw[0]
                self.skew[father] = skew_mle(kept, tau).phi_hat
            except (InsufficientDataError, InvalidIntervalError):
                pass  # cold-start or degenerate round: keep the previous estimate
        phi_hat = self.skew.get(father, 1.0)

        est = self._estimate_offset(pending, batch, phi_hat, father)
        theta_local = est.theta_hat_us

        hw_now = self.clock.hw(now)
        step = -round_half_away(theta_local)
        phi_new = pending.phi_j / phi_hat
        try:
            self.clock.logical.apply_correction(phi_new, step, hw_now)
            self.counters["corrections"] += 1
        except EstimateOutOfBandError:
            self.counters["phi_rejections"] += 1
            sim.note("reject_phi", node=self.node_id, phi=phi_new)
            self.clock.logical.apply_correction(self.clock.logical.phi, step,
                                                hw_now)

        self.theta_cum = theta_local + pending.theta_j
        self.my_hop = pending.hop_j + 1
        self.counters["rounds_accepted"] += 1
        fifo.append(batch)
        sim.log_accept(self.node_id, round_id, father)

        lo, hi = self.params.rapid_wait_range_us
        sim.timer(now + int(self.rng.uniform(lo, hi)), self.node_id,
                  "forward", round_id)

    def _estimate_offset(self, pending, batch, phi_hat, father):
        downlink = batch.logical_diffs()
        d_est = self.d_est.get(father)
        if d_est is None:
            d_est = DelayEstimator(prior_us=self.params.d_fixed_prior_us,
                                   alpha=self.params.ewma_alpha,
                                   ceiling_us=self.params.d_ceiling_us)
            self.d_est[father] = d_est
        if not self.adaptive or pending.uplink is None:
            self.counters["min_offsets"] += 1
            return min_offset_mle(downlink, d_est.value)
        if self.last_fwd_hw is not None:
            separation = pending.first_recv_hw - self.last_fwd_hw
        else:
            separation = 0
        # Predicted growth of the receiver-sender offset between the uplink
        # and downlink epochs. The exchange samples live on logical clocks,
        # so the residual logical rate (own multiplier minus the father's
        # rate seen through the hardware skew) drives the drift; before any
        # multiplier correction this reduces to (phi_hat - 1) * separation.
        theta_delta = (self.clock.logical.phi - pending.phi_j / phi_hat) \
            * separation
        est = joint_offset_mle([pending.uplink], downlink, theta_delta)
        d_est.update(est.d_fixed_hat_us)
        self.counters["joint_offsets"] += 1
        return est

    # -- transmit -----------------------------------------------------------------

    def _begin_burst(self, sim, now: int) -> None:
        use_buf = self.adaptive
        plan = _BurstPlan(
            round_id=self.round_id,
            phi=self.clock.logical.phi,
            theta_cum=0.0 if self.role == ROLE_ROOT else self.theta_cum,
            hop=self.my_hop if self.my_hop is not None else 0,
            buf=self.nbrs.buf_for_round(self.last_fwd_round) if use_buf else {},
        )
        offset = 0.0
        lo, hi = self.params.spacing_range_us
        for idx in range(self.params.n_packets):
            sim.timer(now + round_half_away(offset), self.node_id, "tx",
                      (plan, idx))
            offset += self.rng.uniform(lo, hi)

    def _transmit_one(self, sim, now: int, plan: _BurstPlan, idx: int) -> None:
        if not plan.election and plan.round_id != self.round_id:
            return  # superseded mid-burst
        hw = self.clock.hw(now)
        logical = self.clock.logical_at(now)
        seq = idx + 1
        pkt = SyncPacket(
            sender_id=self.node_id, seq_in_batch=seq, hw_ts=hw,
            logical_ts=logical, phi=plan.phi, round_id=plan.round_id,
            theta_cum=plan.theta_cum, hop=plan.hop, election=plan.election,
            origin_id=plan.origin_id,
            neighbor_buf=dict(plan.buf) if seq == 1 else None)
        if seq == 1 and not plan.election:
            self.last_fwd_round = plan.round_id
            self.last_fwd_hw = hw
        sim.transmit(self.node_id, pkt,
                     burst_key=(self.node_id, plan.round_id))
        if (seq == self.params.n_packets and self.role == ROLE_ROOT
                and not plan.election):
            self.round_id += 1
