"""Engine tests: topologies, delay model, determinism, flooding paths."""

import json

import numpy as np
import pytest

from floodsync.clocks import NodeClock, OscillatorModel
from floodsync.estimators import DelayDecomposition
from floodsync.netsim import (
    EV_KILL,
    LinkModel,
    RngHub,
    Simulation,
    Topology,
    TopologyError,
    TopologySpec,
    generate_topology,
    sample_delay,
    sample_flood_paths,
)


class DummyNode:
    """Minimal node: counts deliveries, never transmits."""

    def __init__(self, node_id, rate_ppm=0.0):
        self.node_id = node_id
        self.alive = True
        self.clock = NodeClock(OscillatorModel(rate_ppm=rate_ppm))
        self.received = []

    def start(self, sim):
        pass

    def logical_at(self, now):
        return self.clock.logical_at(now)

    def on_receive(self, sim, now, pkt):
        self.received.append((now, pkt))

    def on_timer(self, sim, now, tag, payload):
        pass


def build_sim(topology, plr=0.0, sigma=0.0, p_unc=0.0, seed=1, **kw):
    link = LinkModel(delay=DelayDecomposition(d_fixed_us=3.0, sigma_us=sigma,
                                              p_unc=p_unc), plr=plr)
    sim = Simulation(topology, link, RngHub(seed), **kw)
    for nid in range(topology.n):
        sim.add_node(DummyNode(nid))
    return sim


# ---------------------------------------------------------------- topology

def test_line_topology():
    topo = generate_topology(TopologySpec(kind="line", nodes=25), RngHub(0))
    assert topo.n == 25
    assert topo.diameter == 24
    assert len(topo.edges()) == 24
    assert topo.hop[24] == 24 and topo.hop[0] == 0


def test_grid_topology():
    topo = generate_topology(TopologySpec(kind="grid", rows=5, cols=5), RngHub(0))
    assert topo.n == 25
    assert topo.diameter == 8  # Manhattan distance to the far corner
    assert sorted(topo.neighbors[0]) == [1, 5]
    assert len(topo.neighbors[12]) == 4


def test_rgg_topology_connected_and_deterministic():
    spec = TopologySpec(kind="rgg", nodes=300, area_m=200.0, range_m=80.0)
    a = generate_topology(spec, RngHub(42))
    b = generate_topology(spec, RngHub(42))
    assert np.array_equal(a.positions, b.positions)
    assert all(h >= 0 for h in a.hop)
    assert a.diameter >= 3
    assert a.reference == int(np.argmin((a.positions ** 2).sum(axis=1)))


def test_rgg_density_too_low_errors():
    spec = TopologySpec(kind="rgg", nodes=6, area_m=1000.0, range_m=1.0)
    with pytest.raises(TopologyError):
        generate_topology(spec, RngHub(0))


def test_disconnected_topology_rejected():
    with pytest.raises(ValueError):
        Topology(kind="line", n=3, neighbors=[[1], [0], []])


# ------------------------------------------------------------------ delays

def test_sample_delay_deterministic_portion():
    dec = DelayDecomposition(d_fixed_us=3.0, sigma_us=0.0, p_unc=0.0)
    rng = np.random.default_rng(0)
    assert all(sample_delay(dec, rng) == 3.0 for _ in range(100))


def test_sample_delay_clt_mean():
    dec = DelayDecomposition(d_fixed_us=3.0, sigma_us=0.5, p_unc=0.0)
    rng = np.random.default_rng(1)
    draws = np.array([sample_delay(dec, rng) for _ in range(100_000)])
    assert abs(draws.mean() - 3.0) <= 3 * 0.5 / np.sqrt(100_000)
    assert draws.min() >= 0.0


def test_sample_delay_never_negative_with_fat_gaussian():
    dec = DelayDecomposition(d_fixed_us=1.0, sigma_us=5.0, p_unc=0.0)
    rng = np.random.default_rng(2)
    assert min(sample_delay(dec, rng) for _ in range(20_000)) >= 0.0


def test_sample_delay_uncertain_portion_rate():
    dec = DelayDecomposition(d_fixed_us=3.0, sigma_us=0.1, p_unc=0.01,
                             unc_range_us=(5.0, 50.0))
    rng = np.random.default_rng(3)
    n = 100_000
    big = sum(sample_delay(dec, rng) > 3.0 + 3 * 0.1 + 4.9 for _ in range(n))
    assert big / n == pytest.approx(0.01, abs=0.002)


# --------------------------------------------------------------- broadcast

def make_packet():
    from floodsync.protocol import SyncPacket
    return SyncPacket(sender_id=2, seq_in_batch=1, hw_ts=0, logical_ts=0,
                      phi=1.0, round_id=1, theta_cum=0.0, hop=0,
                      neighbor_buf={})


def test_broadcast_reaches_each_neighbor_once():
    topo = generate_topology(TopologySpec(kind="line", nodes=5), RngHub(0))
    sim = build_sim(topo, plr=0.0)
    sim.run(0)  # start nodes
    for _ in range(5):
        sim.transmit(2, make_packet())
    sim.run(1000)
    assert len(sim.nodes[1].received) == 5
    assert len(sim.nodes[3].received) == 5
    assert len(sim.nodes[0].received) == 0  # not adjacent to 2


def test_broadcast_full_loss():
    topo = generate_topology(TopologySpec(kind="line", nodes=3), RngHub(0))
    sim = build_sim(topo, plr=1.0)
    sim.run(0)
    sim.transmit(1, make_packet())
    sim.run(1000)
    assert sim.counters["delivered"] == 0
    assert sim.counters["lost"] == 2


def test_full_batch_loss_rate_matches_binomial():
    # P(all 5 packets of a burst lost at one receiver) = 0.1^5 = 1e-5;
    # over 1e4 bursts the expected count is 0.1, so a handful at most.
    topo = generate_topology(TopologySpec(kind="line", nodes=2), RngHub(0))
    sim = build_sim(topo, plr=0.1, seed=7)
    sim.run(0)
    node = sim.nodes[1]
    full_losses = 0
    for _ in range(10_000):
        before = len(node.received)
        for _ in range(5):
            sim.transmit(0, make_packet())
        sim._queue and sim.run(sim._queue[-1][0])
        if len(node.received) == before:
            full_losses += 1
    assert full_losses <= 4
    # per-packet loss close to 0.1
    assert sim.counters["lost"] / 50_000 == pytest.approx(0.1, abs=0.01)


def test_receiver_timestamps_reflect_receiver_clock_at_delivery():
    topo = generate_topology(TopologySpec(kind="line", nodes=2), RngHub(0))
    sim = build_sim(topo, plr=0.0)
    sim.nodes[1] = DummyNode(1, rate_ppm=100.0)
    sim.run(0)
    sim.now = 1_000_000
    sim.transmit(0, make_packet())
    sim.run(2_000_000)
    (at, _pkt), = sim.nodes[1].received
    assert at == 1_000_003  # fixed 3 us delay
    assert sim.nodes[1].clock.hw(at) == round(at * (1 + 100e-6))


def test_event_tiebreak_is_insertion_order():
    topo = generate_topology(TopologySpec(kind="line", nodes=2), RngHub(0))
    sim = build_sim(topo)
    calls = []
    sim.nodes[0].on_timer = lambda s, now, tag, p: calls.append(tag)
    sim.timer(50, 0, "first")
    sim.timer(50, 0, "second")
    sim.run(100)
    assert calls == ["first", "second"]


def test_kill_event_removes_node_from_probes():
    topo = generate_topology(TopologySpec(kind="line", nodes=3), RngHub(0))
    sim = build_sim(topo, probe_interval_us=1_000_000)
    sim.schedule(1_500_000, EV_KILL, 2)
    sim.run(3_000_000)
    assert set(sim.probes[0][1]) == {0, 1, 2}
    assert set(sim.probes[-1][1]) == {0, 1}


def test_empty_protocol_only_probes_fire():
    topo = generate_topology(TopologySpec(kind="line", nodes=3), RngHub(0))
    sim = build_sim(topo, probe_interval_us=1_000_000)
    sim.run(5_000_000)
    assert len(sim.probes) == 5
    assert sim.counters["delivered"] == 0


def test_probe_jitter_standard_deviation():
    topo = generate_topology(TopologySpec(kind="line", nodes=4), RngHub(0))
    sim = build_sim(topo, probe_interval_us=100_000, measurement_jitter=True,
                    seed=11)
    sim.run(100_000_000)  # 1000 probes of a frozen network
    per_node = {nid: [] for nid in range(4)}
    for at, snap in sim.probes:
        for nid, val in snap.items():
            per_node[nid].append(val - at)
    for vals in per_node.values():
        assert np.std(vals) == pytest.approx(0.0033, abs=0.0008)
        assert np.mean(vals) == pytest.approx(0.07, abs=0.001)


def test_run_is_deterministic_byte_for_byte():
    def trace_of(seed):
        topo = generate_topology(TopologySpec(kind="line", nodes=4), RngHub(seed))
        sim = build_sim(topo, plr=0.1, sigma=0.5, seed=seed,
                        probe_interval_us=500_000, trace_enabled=True)
        sim.run(0)
        for _ in range(20):
            sim.transmit(1, make_packet())
        sim.run(5_000_000)
        return json.dumps(sim.trace, sort_keys=True) + repr(sim.probes)

    assert trace_of(9) == trace_of(9)
    assert trace_of(9) != trace_of(10)


def test_collision_mode_drops_overlapping_bursts():
    topo = generate_topology(TopologySpec(kind="line", nodes=3), RngHub(0))
    sim = build_sim(topo, collision_mode=True)
    sim.run(0)
    # nodes 0 and 2 burst simultaneously into common receiver 1
    for _ in range(3):
        sim.transmit(0, make_packet(), burst_key=(0, 1))
        sim.transmit(2, make_packet(), burst_key=(2, 1))
    sim.run(1000)
    assert sim.counters["collided"] > 0
    assert len(sim.nodes[1].received) < 6


# ------------------------------------------------------------ flood sampler

def test_flood_paths_line_unique_path():
    topo = generate_topology(TopologySpec(kind="line", nodes=25), RngHub(0))
    stats = sample_flood_paths(topo, rounds=50, wait_lo_s=0.01, wait_hi_s=0.05,
                               plr=0.0, hub=RngHub(5))
    assert np.all(stats.lengths == 24)
    assert stats.pmf() == {24: 1.0}
    assert stats.modal_length() == 24


def test_flood_paths_depth_at_least_hop_distance():
    spec = TopologySpec(kind="rgg", nodes=60, area_m=200.0, range_m=60.0)
    topo = generate_topology(spec, RngHub(3))
    stats = sample_flood_paths(topo, rounds=200, wait_lo_s=0.01, wait_hi_s=0.05,
                               plr=0.0, hub=RngHub(6))
    assert stats.lengths.min() >= topo.diameter


def test_flood_paths_loss_shifts_right_on_paired_waits():
    spec = TopologySpec(kind="rgg", nodes=80, area_m=200.0, range_m=50.0)
    topo = generate_topology(spec, RngHub(4))
    base = sample_flood_paths(topo, 400, 0.01, 30.0, 0.0, RngHub(8), "slow")
    lossy = sample_flood_paths(topo, 400, 0.01, 30.0, 0.1, RngHub(8), "slow")
    assert lossy.lengths.mean() > base.lengths.mean()
    xs = range(int(base.lengths.min()), int(lossy.lengths.max()) + 1)
    assert all(lb <= b + 0.05 for b, lb in zip(base.ecdf(xs), lossy.ecdf(xs)))


def test_flood_paths_deterministic():
    topo = generate_topology(TopologySpec(kind="line", nodes=10), RngHub(0))
    a = sample_flood_paths(topo, 100, 0.01, 30.0, 0.1, RngHub(12))
    b = sample_flood_paths(topo, 100, 0.01, 30.0, 0.1, RngHub(12))
    assert np.array_equal(a.lengths, b.lengths)
