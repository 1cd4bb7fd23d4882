"""Protocol state machine tests: bursts, buffers, adaptive offset, election."""

import pytest

from floodsync.clocks import NodeClock, OscillatorModel
from floodsync.protocol import (
    ROLE_CANDIDATE,
    ROLE_NON_ROOT,
    ROLE_ROOT,
    NeighborTable,
    ProtocolParams,
    RdcNode,
    SyncPacket,
    packet_from_bytes,
    packet_to_bytes,
)


class StubSim:
    """Records scheduling and radio calls; timers are fired by the test."""

    def __init__(self):
        self.timers = []
        self.packets = []
        self.notes = []
        self.accepts = []

    def timer(self, at, node_id, tag, payload=None):
        self.timers.append((at, node_id, tag, payload))

    def schedule(self, at, kind, payload=None):
        self.timers.append((at, None, kind, payload))

    def transmit(self, sender_id, pkt, burst_key=None):
        self.packets.append(pkt)

    def note(self, kind, **fields):
        self.notes.append((kind, fields))

    def log_accept(self, node_id, round_id, father_id):
        self.accepts.append((node_id, round_id, father_id))


def make_node(node_id=5, role=ROLE_NON_ROOT, adaptive=True, **params):
    import numpy as np
    p = ProtocolParams(**params)
    clock = NodeClock(OscillatorModel(rate_ppm=0.0))
    return RdcNode(node_id, clock, p, np.random.default_rng(node_id), role=role,
                   adaptive=adaptive)


def father_packet(round_id, seq, t, sender=9, phi=1.0, theta=0.0, hop=0,
                  buf=None):
    return SyncPacket(sender_id=sender, seq_in_batch=seq, hw_ts=t,
                      logical_ts=t, phi=phi, round_id=round_id,
                      theta_cum=theta, hop=hop,
                      neighbor_buf=(buf if buf is not None else {}) if seq == 1 else None)


def run_burst(node, sim, now):
    """Fire the tx timers a _begin_burst call registered on the stub."""
    start = len(sim.timers)
    node._begin_burst(sim, now)
    for at, _, tag, payload in sim.timers[start:]:
        assert tag == "tx"
        node.on_timer(sim, at, tag, payload)


# ------------------------------------------------------------------- wire

def test_packet_buf_rides_on_first_packet_only():
    with pytest.raises(ValueError):
        SyncPacket(1, 2, 0, 0, 1.0, 1, 0.0, 0, neighbor_buf={})
    with pytest.raises(ValueError):
        SyncPacket(1, 1, 0, 0, 1.0, 1, 0.0, 0, neighbor_buf=None)


def test_wire_roundtrip():
    pkt = SyncPacket(sender_id=7, seq_in_batch=1, hw_ts=-12345,
                     logical_ts=987654321, phi=1.000042, round_id=17,
                     theta_cum=-2.5, hop=3, election=False,
                     neighbor_buf={3: -5, 11: 0, 250: 1 << 40})
    assert packet_from_bytes(packet_to_bytes(pkt)) == pkt
    pkt2 = SyncPacket(sender_id=2, seq_in_batch=4, hw_ts=1, logical_ts=2,
                      phi=0.99999, round_id=5, theta_cum=0.0, hop=1)
    assert packet_from_bytes(packet_to_bytes(pkt2)) == pkt2
    cand = SyncPacket(sender_id=2, seq_in_batch=1, hw_ts=1, logical_ts=2,
                      phi=1.0, round_id=5, theta_cum=0.0, hop=4,
                      election=True, origin_id=13, neighbor_buf={})
    back = packet_from_bytes(packet_to_bytes(cand))
    assert back.election and back.origin_id == 13


def test_zero_valued_buf_entry_is_a_real_observation():
    pkt = SyncPacket(1, 1, 0, 0, 1.0, 1, 0.0, 0, neighbor_buf={5: 0})
    assert packet_from_bytes(packet_to_bytes(pkt)).neighbor_buf == {5: 0}


# ------------------------------------------------------------- root bursts

def test_root_burst_structure():
    node = make_node(node_id=0, role=ROLE_ROOT)
    sim = StubSim()
    node.start(sim)
    assert node.round_id == 1
    run_burst(node, sim, now=0)
    pkts = sim.packets
    assert len(pkts) == 5
    assert all(p.round_id == 1 for p in pkts)
    assert node.round_id == 2  # increments after the burst
    assert pkts[0].neighbor_buf == {} and all(p.neighbor_buf is None
                                              for p in pkts[1:])
    assert all(p.phi == 1.0 and p.theta_cum == 0.0 and p.hop == 0
               for p in pkts)
    assert pkts[-1].hw_ts - pkts[0].hw_ts <= 12
    assert [p.seq_in_batch for p in pkts] == [1, 2, 3, 4, 5]


def test_root_harvests_reverse_observations():
    node = make_node(node_id=0, role=ROLE_ROOT)
    sim = StubSim()
    node.start(sim)
    node.round_id = 3
    for seq, (t, diff) in enumerate([(100, 13), (102, 14), (104, 12),
                                     (106, 15), (108, 13)], start=1):
        pkt = SyncPacket(sender_id=4, seq_in_batch=seq, hw_ts=t - diff,
                         logical_ts=t - diff, phi=1.0, round_id=2,
                         theta_cum=0.0, hop=1,
                         neighbor_buf={} if seq == 1 else None)
        node.on_receive(sim, t, pkt)
    entry = node.nbrs.entries[4]
    assert entry.harvest_min == 12
    assert entry.harvest_round == 2


def test_root_buf_keyed_per_neighbor():
    node = make_node(node_id=0, role=ROLE_ROOT)
    sim = StubSim()
    node.round_id = 3
    node.last_fwd_round = 2
    for sender, diff in ((4, 13), (6, 7)):
        pkt = SyncPacket(sender_id=sender, seq_in_batch=1, hw_ts=200 - diff,
                         logical_ts=200 - diff, phi=1.0, round_id=2,
                         theta_cum=0.0, hop=1, neighbor_buf={})
        node.on_receive(sim, 200, pkt)
    assert node.nbrs.buf_for_round(2) == {4: 13, 6: 7}


# --------------------------------------------------------- non-root receive

def test_fresh_round_triggers_one_compensation():
    node = make_node()
    sim = StubSim()
    for seq in range(1, 6):
        node.on_receive(sim, 1000 + 2 * seq, father_packet(1, seq, 1000 + 2 * seq))
    comp = [t for t in sim.timers if t[2] == "compensate"]
    assert len(comp) == 1
    assert node.round_id == 1
    assert len(node.pending.slots) == 5


def test_duplicate_round_from_second_neighbor_harvest_only():
    node = make_node()
    sim = StubSim()
    node.on_receive(sim, 1000, father_packet(1, 1, 1000, sender=9))
    node.on_receive(sim, 1001, father_packet(1, 1, 1001, sender=8))
    assert node.pending.father == 9
    assert len([t for t in sim.timers if t[2] == "compensate"]) == 1
    assert node.nbrs.entries[8].harvest_round == 1  # reverse sample kept


def test_stale_round_harvest_only():
    node = make_node()
    sim = StubSim()
    node.round_id = 5
    node.on_receive(sim, 1000, father_packet(3, 1, 1000, sender=8))
    assert node.pending is None
    assert node.round_id == 5
    assert node.nbrs.entries[8].harvest_round == 3


def test_batch_window_excludes_late_packets():
    node = make_node(span_bound_us=12)
    sim = StubSim()
    node.on_receive(sim, 1000, father_packet(1, 1, 1000))
    node.on_receive(sim, 1030, father_packet(1, 4, 1030))  # 30 us late
    assert list(node.pending.slots) == [1]


def test_missing_first_packet_leaves_uplink_absent_then_late_fill():
    node = make_node()
    sim = StubSim()
    node.on_receive(sim, 1002, father_packet(1, 2, 1002))
    assert node.pending.uplink is None
    node.on_receive(sim, 1004, father_packet(1, 1, 1004, buf={5: -7}))
    assert node.pending.uplink == -7


# ----------------------------------------------------------- compensation

def run_round(node, sim, round_id, t0, buf=None, phi=1.0, theta=0.0, hop=0):
    for seq in range(1, 6):
        node.on_receive(sim, t0 + 2 * (seq - 1),
                        father_packet(round_id, seq, t0 + 2 * (seq - 1),
                                      phi=phi, theta=theta, hop=hop, buf=buf))
    node.on_timer(sim, t0 + 15, "compensate", round_id)


def test_cold_start_forwards_with_unit_phi():
    node = make_node()
    sim = StubSim()
    run_round(node, sim, 1, 30_000_000)
    assert node.counters["min_offsets"] == 1  # no uplink on round 1
    fwd = [t for t in sim.timers if t[2] == "forward"]
    assert len(fwd) == 1 and fwd[0][3] == 1
    node.on_timer(sim, fwd[0][0], "forward", 1)
    start = len(sim.packets)
    for at, _, tag, payload in sim.timers:
        if tag == "tx":
            node.on_timer(sim, at, tag, payload)
    pkts = sim.packets[start:]
    assert len(pkts) == 5
    assert all(p.phi == 1.0 for p in pkts)
    assert all(p.round_id == 1 for p in pkts)
    assert node.my_hop == 1 and all(p.hop == 1 for p in pkts)


def test_forward_latency_within_rapid_bound():
    node = make_node()
    sim = StubSim()
    run_round(node, sim, 1, 30_000_000)
    at, _, tag, _ = [t for t in sim.timers if t[2] == "forward"][0]
    latency = at - (30_000_000 + 15)
    lo, hi = node.params.rapid_wait_range_us
    assert lo <= latency <= hi


def test_skew_available_from_second_round():
    node = make_node(node_id=5)
    node.clock = NodeClock(OscillatorModel(rate_ppm=50.0))
    sim = StubSim()
    run_round(node, sim, 1, 30_000_000)
    assert 9 not in node.skew or node.skew == {}
    run_round(node, sim, 2, 60_000_000)
    phi_hat = node.skew[9]
    assert abs(phi_hat - 1.00005) <= 2 / 30_000_000
    # applied multiplier is the father's rate seen through the skew estimate
    assert abs(node.clock.logical.phi - 1 / phi_hat) < 1e-9


def test_joint_path_updates_delay_store():
    node = make_node()
    sim = StubSim()
    run_round(node, sim, 1, 30_000_000)
    node.on_timer(sim, 30_100_000, "forward", 1)
    for at, _, tag, payload in list(sim.timers):
        if tag == "tx":
            node.on_timer(sim, at, tag, payload)
    # father's burst with an uplink sample for us: diffs here are ~3 (delay)
    run_round(node, sim, 2, 60_000_000, buf={5: 3})
    assert node.counters["joint_offsets"] == 1
    assert node.d_est[9].accepted == 1


def test_invalid_delay_sample_gated_but_offset_applied():
    node = make_node()
    sim = StubSim()
    run_round(node, sim, 1, 30_000_000)
    node.on_timer(sim, 30_100_000, "forward", 1)
    for at, _, tag, payload in list(sim.timers):
        if tag == "tx":
            node.on_timer(sim, at, tag, payload)
    corrections_before = node.counters["corrections"]
    # uplink -40 forces Eq-13 output negative: sample rejected, estimate kept
    run_round(node, sim, 2, 60_000_000, buf={5: -40})
    assert node.counters["joint_offsets"] == 1
    assert node.d_est[9].rejected == 1
    assert node.d_est[9].value == node.params.d_fixed_prior_us
    assert node.counters["corrections"] == corrections_before + 1


def test_theta_cum_chains_father_value():
    node = make_node()
    sim = StubSim()
    run_round(node, sim, 1, 30_000_000, theta=7.5)
    # crafted packets have zero wire delay, so the min-MLE local estimate is
    # 0 - prior; the transmitted cumulative chains the father's value on top
    assert node.counters["min_offsets"] == 1
    assert node.theta_cum == pytest.approx(-3.0 + 7.5)
    assert node.clock.logical.theta_total_us == 3  # -round(local estimate)


def test_phi_out_of_band_rejected_offset_still_applied():
    node = make_node()
    sim = StubSim()
    before = node.clock.logical.phi
    run_round(node, sim, 1, 30_000_000, phi=1.5)  # father multiplier absurd
    assert node.counters["phi_rejections"] == 1
    assert node.clock.logical.phi == before
    assert node.counters["corrections"] == 0
    assert node.clock.logical.corrections == 1  # offset-only correction


def test_round_id_monotone_and_no_reprocessing():
    node = make_node()
    sim = StubSim()
    run_round(node, sim, 3, 30_000_000)
    accepted = node.counters["rounds_accepted"]
    node.on_receive(sim, 60_000_000, father_packet(3, 1, 60_000_000))
    node.on_timer(sim, 60_000_015, "compensate", 3)
    assert node.counters["rounds_accepted"] == accepted
    assert node.round_id == 3


# ------------------------------------------------------------ buf freshness

def test_buf_freshness_one_round():
    node = make_node(node_id=0, role=ROLE_ROOT)
    sim = StubSim()
    node.last_fwd_round = 7
    node.nbrs.observe(4, 100, 7, 30_000_000)
    node.nbrs.harvest(4, 13, 7)
    node.nbrs.observe(6, 100, 6, 30_000_000)
    node.nbrs.harvest(6, 5, 6)  # stale: harvested from an older round
    assert node.nbrs.buf_for_round(7) == {4: 13}
    assert node.nbrs.buf_for_round(None) == {}


def test_neighbor_capacity_and_eviction():
    table = NeighborTable(capacity=2)
    period = 30_000_000
    assert table.observe(1, 0, 1, period)
    assert table.observe(2, 0, 1, period)
    assert not table.observe(3, 1000, 1, period)  # full, nothing stale yet
    # after a silent period the stale entries are evicted and 3 fits
    assert table.observe(3, period + 2000, 2, period)
    assert 3 in table.entries and len(table.entries) <= 2


# ---------------------------------------------------------------- election

def test_silence_counter_and_candidacy():
    node = make_node()
    node.my_hop = 4
    sim = StubSim()
    node._period_tick(sim, 30_000_000)
    node._period_tick(sim, 60_000_000)
    assert node.silence == 2
    assert node.role == ROLE_CANDIDATE
    cand = [p for p in sim.packets if p.election]
    assert cand and cand[0].hop == 4 and cand[0].origin_id == node.node_id


def test_sync_traffic_resets_silence():
    node = make_node()
    sim = StubSim()
    node._period_tick(sim, 30_000_000)
    assert node.silence == 1
    node.on_receive(sim, 31_000_000, father_packet(1, 1, 31_000_000))
    assert node.silence == 0


def test_lower_hop_candidate_wins():
    a = make_node(node_id=1)
    a.my_hop = 1
    b = make_node(node_id=2)
    b.my_hop = 2
    sim = StubSim()
    a.silence = b.silence = 2
    a._consider_candidacy(sim, 0)
    b._consider_candidacy(sim, 0)
    a_cand = [p for p in sim.packets if p.election and p.origin_id == 1][0]
    b_cand = [p for p in sim.packets if p.election and p.origin_id == 2][0]
    b.on_receive(sim, 10, a_cand)
    a.on_receive(sim, 10, b_cand)
    assert b.role == ROLE_NON_ROOT  # stood down
    assert a.role == ROLE_CANDIDATE
    a._candidacy_decision(sim, 20)
    assert a.role == ROLE_ROOT
    assert a.my_hop == 0 and a.theta_cum == 0.0
    assert a.round_id >= a.params.epoch_stride


def test_candidacy_relay_propagates_best_key():
    relay = make_node(node_id=7)
    relay.my_hop = 7
    sim = StubSim()
    cand = SyncPacket(sender_id=6, seq_in_batch=1, hw_ts=0, logical_ts=0,
                      phi=1.0, round_id=3, theta_cum=0.0, hop=1,
                      election=True, origin_id=1, neighbor_buf={})
    relay.on_receive(sim, 100, cand)
    relayed = [p for p in sim.packets if p.election]
    assert relayed and relayed[0].origin_id == 1 and relayed[0].hop == 1
    assert relay.best_candidate == (1, 1)
    # hearing the same candidacy again does not re-relay
    n = len(sim.packets)
    relay.on_receive(sim, 200, cand)
    assert len(sim.packets) == n
