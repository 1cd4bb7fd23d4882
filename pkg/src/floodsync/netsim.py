"""Deterministic discrete-event network simulation.

Everything here is reproducible from (config, seed): random draws come from
named substreams of one seed, the event queue breaks timestamp ties by
insertion order, and event times are integer microseconds. Nodes are duck
typed: the engine calls ``start(sim)``, ``on_receive(sim, now, pkt)``,
``on_timer(sim, now, tag, payload)`` and reads ``node_id``, ``alive`` and
``logical_at(now)``.

Besides the full event-driven simulation this module provides a vectorized
per-round flooding-path sampler for path-distance statistics over thousands
of rounds, where only the per-hop forwarding latency model matters and
running the whole protocol stack would be waste.
"""

import heapq
import json
import zlib
from dataclasses import dataclass, field

import numpy as np

from floodsync.clocks import round_half_away
from floodsync.estimators import DelayDecomposition

EV_DELIVER = "packet_delivery"
EV_TIMER = "period_timer"
EV_PROBE = "probe"
EV_DRIFT = "drift_step"
EV_KILL = "kill"


def _key_int(part) -> int:
    if isinstance(part, int):
        return part & 0xFFFFFFFF
    return zlib.crc32(str(part).encode()) & 0xFFFFFFFF


class RngHub:
    """Named, independent random substreams derived from one 64-bit seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, *key) -> np.random.Generator:
        spawn = tuple(_key_int(p) for p in key)
        return np.random.default_rng(
            np.random.SeedSequence(entropy=self.seed, spawn_key=spawn))


# ------------------------------------------------------------------ topology

@dataclass(frozen=True)
class TopologySpec:
    kind: str = "line"          # line | grid | rgg
    nodes: int = 25
    rows: int = 5
    cols: int = 5
    area_m: float = 200.0
    range_m: float = 80.0


@dataclass
class Topology:
    """Undirected connectivity graph with hop distances from the reference.

    ``diameter`` follows the flooding convention: the largest hop distance
    between the reference node and any other node.
    """

    kind: str
    n: int
    neighbors: list
    reference: int = 0
    positions: np.ndarray | None = None
    hop: list = field(default_factory=list)
    diameter: int = 0

    def __post_init__(self):
        if not self.hop:
            self.hop = self._bfs_hops()
            if any(h < 0 for h in self.hop):
                raise ValueError("topology is not connected")
            self.diameter = max(self.hop)

    def _bfs_hops(self):
        hop = [-1] * self.n
        hop[self.reference] = 0
        frontier = [self.reference]
        while frontier:
            nxt = []
            for u in frontier:
                for v in self.neighbors[u]:
                    if hop[v] < 0:
                        hop[v] = hop[u] + 1
                        nxt.append(v)
            frontier = nxt
        return hop

    def edges(self):
        return [(u, v) for u in range(self.n) for v in self.neighbors[u] if u < v]


class TopologyError(ValueError):
    pass


def generate_topology(spec: TopologySpec, hub: RngHub) -> Topology:
    if spec.kind == "line":
        nbrs = [[] for _ in range(spec.nodes)]
        for i in range(spec.nodes - 1):
            nbrs[i].append(i + 1)
            nbrs[i + 1].append(i)
        return Topology(kind="line", n=spec.nodes, neighbors=nbrs)
    if spec.kind == "grid":
        n = spec.rows * spec.cols
        nbrs = [[] for _ in range(n)]
        for r in range(spec.rows):
            for c in range(spec.cols):
                i = r * spec.cols + c
                if c + 1 < spec.cols:
                    nbrs[i].append(i + 1)
                    nbrs[i + 1].append(i)
                if r + 1 < spec.rows:
                    j = i + spec.cols
                    nbrs[i].append(j)
                    nbrs[j].append(i)
        return Topology(kind="grid", n=n, neighbors=nbrs)
    if spec.kind == "rgg":
        return _generate_rgg(spec, hub)
    raise TopologyError(f"unknown topology kind {spec.kind!r}")


def _generate_rgg(spec: TopologySpec, hub: RngHub, max_attempts: int = 1000):
    # Fresh substream per attempt keeps regenerate-until-connected
    # deterministic as a whole. The reference is the corner-most node (sink
    # placement at the deployment edge), which maximizes usable hop depth.
    for attempt in range(max_attempts):
        rng = hub.stream("rgg", attempt)
        pos = rng.uniform(0.0, spec.area_m, size=(spec.nodes, 2))
        d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(axis=2)
        within = d2 <= spec.range_m ** 2
        np.fill_diagonal(within, False)
        nbrs = [np.flatnonzero(within[i]).tolist() for i in range(spec.nodes)]
        reference = int(np.argmin((pos ** 2).sum(axis=1)))
        try:
            return Topology(kind="rgg", n=spec.nodes, neighbors=nbrs,
                            positions=pos, reference=reference)
        except ValueError:
            continue
    raise TopologyError(
        f"no connected geometric graph in {max_attempts} attempts; "
        "node density too low for the communication range")


# ------------------------------------------------------------------- delays

def sample_delay(decomp: DelayDecomposition, rng: np.random.Generator) -> float:
    """One delay draw in microseconds, never negative."""
    if decomp.sigma_us > 0:
        d = rng.normal(0.0, decomp.sigma_us)
        while d < -decomp.d_fixed_us:
            d = rng.normal(0.0, decomp.sigma_us)
    else:
        d = 0.0
    delay = decomp.d_fixed_us + d
    if decomp.p_unc > 0 and rng.random() < decomp.p_unc:
        lo, hi = decomp.unc_range_us
        delay += rng.uniform(lo, hi)
    return delay


@dataclass(frozen=True)
class LinkModel:
    delay: DelayDecomposition = DelayDecomposition()
    plr: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.plr <= 1.0:
            raise ValueError("plr must be a probability")


# -------------------------------------------------------------- event engine

class Simulation:
    """Single-threaded deterministic event loop over one topology.

    Event ordering is (fire_at, insertion_seq); all times are integer
    microseconds of true simulation time.
    """

    def __init__(self, topology: Topology, link: LinkModel, hub: RngHub,
                 probe_interval_us: int = 10_000_000,
                 measurement_jitter: bool = False,
                 drift_period_us: int = 0,
                 collision_mode: bool = False,
                 trace_enabled: bool = False):
        self.topology = topology
        self.link = link
        self.hub = hub
        self.probe_interval_us = probe_interval_us
        self.measurement_jitter = measurement_jitter
        self.drift_period_us = drift_period_us
        self.collision_mode = collision_mode
        self.trace_enabled = trace_enabled

        self.nodes = {}
        self.now = 0
        self._queue = []
        self._seq = 0
        self.probes = []          # (true_time_us, {node_id: logical})
        self.accept_log = []      # (round_id, node_id, father_id, true_time_us)
        self.trace = []
        self.counters = {"delivered": 0, "lost": 0, "collided": 0, "sent": 0}
        self._chan_rng = hub.stream("channel")
        self._probe_rng = hub.stream("probe_jitter")
        # collision bookkeeping: receiver -> (burst_key, window_end)
        self._rx_windows = {}
        self._dead_bursts = set()

    # -- setup -------------------------------------------------------------

    def add_node(self, node) -> None:
        self.nodes[node.node_id] = node

    def schedule(self, at_us: int, kind: str, payload=None) -> None:
        if at_us < self.now:
            raise ValueError("cannot schedule into the past")
        heapq.heappush(self._queue, (at_us, self._seq, kind, payload))
        self._seq += 1

    def timer(self, at_us: int, node_id: int, tag: str, payload=None) -> None:
        self.schedule(at_us, EV_TIMER, (node_id, tag, payload))

    # -- radio -------------------------------------------------------------

    def transmit(self, sender_id: int, packet, burst_key=None) -> None:
        """Broadcast one packet: per neighbor, independent loss and delay.

        Loss, jitter, and spike draws are vectorized over the neighbor list
        (one substream, fixed order: loss, jitter, spikes) so dense graphs
        stay cheap without changing the per-link model.
        """
        self.counters["sent"] += 1
        nbrs = self.topology.neighbors[sender_id]
        n = len(nbrs)
        if n == 0:
            return
        rng = self._chan_rng
        dec = self.link.delay
        if self.link.plr > 0:
            delivered = rng.random(n) >= self.link.plr
        else:
            delivered = np.ones(n, dtype=bool)
        if dec.sigma_us > 0:
            jitter = rng.normal(0.0, dec.sigma_us, n)
            for i in range(n):
                while jitter[i] < -dec.d_fixed_us:
                    jitter[i] = rng.normal(0.0, dec.sigma_us)
            delays = dec.d_fixed_us + jitter
        else:
            delays = np.full(n, dec.d_fixed_us)
        if dec.p_unc > 0:
            spikes = rng.random(n) < dec.p_unc
            if spikes.any():
                lo, hi = dec.unc_range_us
                delays = delays + spikes * rng.uniform(lo, hi, n)
        for i, nbr in enumerate(nbrs):
            node = self.nodes[nbr]
            if not node.alive:
                continue
            if not delivered[i]:
                self.counters["lost"] += 1
                self.note("drop_loss", node=nbr, sender=sender_id)
                continue
            at = self.now + round_half_away(float(delays[i]))
            if self.collision_mode and burst_key is not None:
                self._collision_check(nbr, burst_key, at)
            self.schedule(at, EV_DELIVER, (nbr, packet, burst_key))

    def _collision_check(self, receiver: int, burst_key, at: int) -> None:
        window = self._rx_windows.get(receiver)
        guard = 20  # us: burst span plus delay spread
        if window is not None and window[0] != burst_key and at <= window[1]:
            self._dead_bursts.add((receiver, burst_key))
            self._dead_bursts.add((receiver, window[0]))
        if window is None or window[0] != burst_key or at + guard > window[1]:
            self._rx_windows[receiver] = (burst_key, at + guard)

    # -- logging -----------------------------------------------------------

    def note(self, kind: str, **fields) -> None:
        if self.trace_enabled:
            rec = {"t": self.now, "ev": kind}
            rec.update(fields)
            self.trace.append(rec)

    def log_accept(self, node_id: int, round_id: int, father_id: int) -> None:
        self.accept_log.append((round_id, node_id, father_id, self.now))
        self.note("accept", node=node_id, round=round_id, father=father_id)

    # -- run ---------------------------------------------------------------

    def run(self, horizon_us: int) -> None:
        """Process events up to and including horizon_us.

        May be called again with a later horizon to resume the same run.
        """
        if not getattr(self, "_started", False):
            self._started = True
            for node in self.nodes.values():
                node.start(self)
            if self.probe_interval_us > 0:
                self.schedule(self.probe_interval_us, EV_PROBE)
            if self.drift_period_us > 0:
                self.schedule(self.drift_period_us, EV_DRIFT)
        queue = self._queue
        while queue:
            at, _, kind, payload = queue[0]
            if at > horizon_us:
                break
            heapq.heappop(queue)
            self.now = at
            if kind == EV_DELIVER:
                receiver, packet, burst_key = payload
                node = self.nodes[receiver]
                if not node.alive:
                    continue
                if burst_key is not None and (receiver, burst_key) in self._dead_bursts:
                    self.counters["collided"] += 1
                    self.note("drop_collision", node=receiver)
                    continue
                self.counters["delivered"] += 1
                node.on_receive(self, at, packet)
            elif kind == EV_TIMER:
                node_id, tag, tp = payload
                node = self.nodes[node_id]
                if node.alive:
                    node.on_timer(self, at, tag, tp)
            elif kind == EV_PROBE:
                self._do_probe(at)
                self.schedule(at + self.probe_interval_us, EV_PROBE)
            elif kind == EV_DRIFT:
                for nid in sorted(self.nodes):
                    node = self.nodes[nid]
                    if node.alive:
                        node.clock.hardware.step_rate(
                            at, self.hub.stream("walk", nid, at))
                self.schedule(at + self.drift_period_us, EV_DRIFT)
            elif kind == EV_KILL:
                self.nodes[payload].alive = False
                self.note("kill", node=payload)
            else:
                raise RuntimeError(f"unknown event kind {kind!r}")
        self.now = horizon_us

    def _do_probe(self, at: int) -> None:
        snapshot = {}
        for nid in sorted(self.nodes):
            node = self.nodes[nid]
            if not node.alive:
                continue
            value = node.logical_at(at)
            if self.measurement_jitter:
                value = value + self._probe_rng.normal(0.07, 0.0033)
            snapshot[nid] = value
        self.probes.append((at, snapshot))
        self.note("probe", n=len(snapshot))


def write_trace_ndjson(trace: list, path) -> None:
    """One JSON record per line, keys sorted for byte stability."""
    with open(path, "w") as fh:
        for rec in trace:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")


def write_snapshots_csv(probes: list, path) -> None:
    with open(path, "w") as fh:
        fh.write("true_time_us,node_id,logical_us\n")
        for at, snapshot in probes:
            for nid in sorted(snapshot):
                fh.write(f"{at},{nid},{snapshot[nid]}\n")


# ------------------------------------------------- flooding-path statistics

@dataclass
class FloodPathStats:
    """Per-round longest accepted-path lengths over many flooding rounds."""

    rounds: int
    lengths: np.ndarray            # longest path per round (reached nodes)
    unreached: np.ndarray          # nodes left out per round
    diameter: int

    def pmf(self) -> dict:
        values, counts = np.unique(self.lengths, return_counts=True)
        return {int(v): float(c) / self.rounds for v, c in zip(values, counts)}

    def modal_length(self) -> int:
        values, counts = np.unique(self.lengths, return_counts=True)
        return int(values[np.argmax(counts)])

    def prob_at(self, length: int) -> float:
        return float(np.count_nonzero(self.lengths == length)) / self.rounds

    def ecdf(self, xs) -> np.ndarray:
        return np.array([np.mean(self.lengths <= x) for x in xs])


def sample_flood_paths(topology: Topology, rounds: int, wait_lo_s: float,
                       wait_hi_s: float, plr: float, hub: RngHub,
                       latency_tag: str = "flood") -> FloodPathStats:
    """Per-round first-arrival flooding trees under a per-hop latency model.

    Every node forwards a round exactly once, a random wait after it first
    accepted the round; each transmission reaches each neighbor
    independently with probability 1 - plr. The recorded statistic is the
    hop length of the longest first-arrival path per round. Wait draws and
    loss draws come from separate substreams so runs with different plr are
    paired on the same waits.
    """
    n = topology.n
    ref = topology.reference
    adj = np.zeros((n, n), dtype=bool)
    for u in range(n):
        adj[u, topology.neighbors[u]] = True   # adj[u, v]: u hears v? see below
    # adj[i, j] True when i and j are neighbors; delivery direction handled
    # by the loss mask.
    rng_waits = hub.stream("flood_waits", latency_tag)
    rng_loss = hub.stream("flood_loss", latency_tag)
    inf = np.inf
    longest = np.empty(rounds, dtype=np.int64)
    unreached = np.empty(rounds, dtype=np.int64)
    order_buf = np.empty(n, dtype=np.int64)
    for r in range(rounds):
        waits = rng_waits.uniform(wait_lo_s, wait_hi_s, size=n)
        if plr > 0:
            heard = adj & (rng_loss.random((n, n)) >= plr)
        else:
            heard = adj
        t = np.full(n, inf)
        t[ref] = 0.0
        # Bellman-Ford style relaxation: t[i] = min over heard senders j of
        # t[j] + waits[j]; converges in at most n sweeps, usually ~diameter.
        for _ in range(n):
            m = np.where(heard, (t + waits)[None, :], inf)
            cand = m.min(axis=1)
            cand[ref] = 0.0
            t_new = np.minimum(t, cand)
            if np.array_equal(t_new, t):
                break
            t = t_new
        m = np.where(heard, (t + waits)[None, :], inf)
        father = m.argmin(axis=1)
        reached = np.isfinite(t)
        depth = np.full(n, -1, dtype=np.int64)
        depth[ref] = 0
        order_buf[:] = np.argsort(t, kind="stable")
        for i in order_buf:
            if i != ref and reached[i]:
                depth[i] = depth[father[i]] + 1
        longest[r] = depth[reached].max()
        unreached[r] = int(n - reached.sum())
    return FloodPathStats(rounds=rounds, lengths=longest, unreached=unreached,
                          diameter=topology.diameter)
