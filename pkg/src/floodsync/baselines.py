"""Comparison flooding protocols sharing the simulator and clock models.

The protocols are characterized by their flooding mode, offset rule, and
skew rule:

==============  =========  ============  ======
protocol        flooding   offset rule   skew
==============  =========  ============  ======
ftsp            slow       theta1        LR
fcsa_lite       slow       theta2        LR
pulsesync       rapid      theta2        LR
rmts            rapid      theta3        MLE
rdc_rmts        rapid      adaptive      MLE
==============  =========  ============  ======

theta1 is the raw receive-minus-send logical difference (biased by one
packet delay), theta2 subtracts a fixed delay prior, theta3 takes the
minimum over a burst before subtracting the prior. fcsa_lite carries only
the row above, not the full clock-rate agreement gossip of the original;
outputs are labelled accordingly.

The linear-regression protocols keep a FIFO table of (own hardware time,
father logical minus own hardware time) pairs. Regressing on raw hardware
time keeps table entries comparable across the node's own corrections; the
slope is the father-relative logical rate and the intercept evaluated at
"now" is the offset estimate, so the logical clock is a regression-predicted
view of the father's clock rather than a chain of raw single-sample steps.
"""

from collections import deque
from dataclasses import dataclass

from floodsync.clocks import EstimateOutOfBandError, NodeClock, round_half_away
from floodsync.estimators import DegenerateRegressionError, lr_skew
from floodsync.protocol import (
    ROLE_NON_ROOT,
    ROLE_ROOT,
    ProtocolParams,
    RdcNode,
    SyncPacket,
)

FLOOD_SLOW = "slow"
FLOOD_RAPID = "rapid"

OFFSET_THETA1 = "theta1"
OFFSET_THETA2 = "theta2"
OFFSET_THETA3 = "theta3"
OFFSET_ADAPTIVE = "adaptive"

SKEW_LR = "lr"
SKEW_MLE = "mle"


@dataclass(frozen=True)
class BaselineConfig:
    flooding: str
    offset_rule: str
    skew_rule: str
    d_fixed_prior_us: float = 3.0


PROTOCOL_TABLE = {
    "ftsp": BaselineConfig(FLOOD_SLOW, OFFSET_THETA1, SKEW_LR),
    "fcsa_lite": BaselineConfig(FLOOD_SLOW, OFFSET_THETA2, SKEW_LR),
    "pulsesync": BaselineConfig(FLOOD_RAPID, OFFSET_THETA2, SKEW_LR),
    "rmts": BaselineConfig(FLOOD_RAPID, OFFSET_THETA3, SKEW_MLE),
    "rdc_rmts": BaselineConfig(FLOOD_RAPID, OFFSET_ADAPTIVE, SKEW_MLE),
}

PROTOCOL_IDS = tuple(PROTOCOL_TABLE)


def offset_theta1(recv_ts, send_ts):
    """Single-sample pairwise offset observation; biased by one delay."""
    return recv_ts - send_ts


def offset_theta2(recv_ts, send_ts, d_fixed_prior):
    """theta1 compensated by a fixed delay prior."""
    return offset_theta1(recv_ts, send_ts) - d_fixed_prior


def offset_theta3(theta1_samples, d_fixed_prior):
    """Burst minimum of theta1 observations, compensated by the prior."""
    if not theta1_samples:
        raise ValueError("theta3 needs at least one observation")
    return min(theta1_samples) - d_fixed_prior


def slow_flood_phase(rng, period_us: int) -> int:
    """Independent per-node broadcast phase within one period."""
    return int(rng.uniform(0, period_us))


class LrFloodNode:
    """FTSP / FCSA-lite / PulseSync node: LR skew, single-packet rounds."""

    def __init__(self, node_id: int, clock: NodeClock, params: ProtocolParams,
                 rng, role: str = ROLE_NON_ROOT,
                 flooding: str = FLOOD_SLOW,
                 offset_rule: str = OFFSET_THETA1):
        self.node_id = node_id
        self.clock = clock
        self.params = params
        self.rng = rng
        self.role = role
        self.flooding = flooding
        self.offset_rule = offset_rule
        self.alive = True

        self.round_id = 0
        self.my_hop = 0 if role == ROLE_ROOT else None
        self.table = deque(maxlen=params.lr_table_size)  # (hw_i, y) pairs
        self.counters = {"corrections": 0, "phi_rejections": 0,
                         "rounds_accepted": 0, "table_resets": 0}

    def start(self, sim) -> None:
        if self.role == ROLE_ROOT:
            self.round_id = 1
            sim.timer(0, self.node_id, "root_period")
        elif self.flooding == FLOOD_SLOW:
            phase = slow_flood_phase(self.rng, self.params.period_us)
            sim.timer(phase, self.node_id, "slow_tick")

    def logical_at(self, now_us: int) -> int:
        return self.clock.logical_at(now_us)

    # -- timers ------------------------------------------------------------

    def on_timer(self, sim, now: int, tag: str, payload) -> None:
        if tag == "root_period":
            self._transmit(sim, now)
            self.round_id += 1
            sim.timer(now + self.params.period_us, self.node_id, "root_period")
        elif tag == "slow_tick":
            if self.round_id > 0:  # broadcast newest state once synchronized
                self._transmit(sim, now)
            sim.timer(now + self.params.period_us, self.node_id, "slow_tick")
        elif tag == "forward":
            if payload == self.round_id:
                self._transmit(sim, now)

    def _transmit(self, sim, now: int) -> None:
        hw = self.clock.hw(now)
        pkt = SyncPacket(
            sender_id=self.node_id, seq_in_batch=1, hw_ts=hw,
            logical_ts=self.clock.logical.read(hw),
            phi=self.clock.logical.phi, round_id=self.round_id,
            theta_cum=0.0,
            hop=self.my_hop if self.my_hop is not None else 0,
            neighbor_buf={})
        sim.transmit(self.node_id, pkt, burst_key=(self.node_id, self.round_id))

    # -- receive ------------------------------------------------------------

    def on_receive(self, sim, now: int, pkt: SyncPacket) -> None:
        if self.role == ROLE_ROOT or pkt.election:
            return
        if pkt.round_id <= self.round_id:
            return
        self.round_id = pkt.round_id
        self.my_hop = pkt.hop + 1
        hw_i = self.clock.hw(now)
        # Raw father-logical minus own-hardware observation; immune to this
        # node's own corrections, so old table entries stay comparable. The
        # table feeds the rate estimate only; the offset correction is the
        # single-sample pairwise difference, optionally compensated by the
        # fixed delay prior.
        y = pkt.logical_ts - hw_i

        # Entry consistency guard: when the upstream estimate jumps (cold
        # start, a father re-stepping by a lot), stale table entries would
        # poison the regression for a full table length. Discard them and
        # restart from the new observation, as the classic implementations do.
        if len(self.table) >= 2:
            xs = [x for x, _ in self.table]
            ys = [v for _, v in self.table]
            x_mean = sum(xs) / len(xs)
            y_mean = sum(ys) / len(ys)
            try:
                slope_pred = lr_skew(list(self.table))
            except DegenerateRegressionError:
                slope_pred = 0.0
            predicted = y_mean + slope_pred * (hw_i - x_mean)
            if abs(y - predicted) > self.params.lr_reset_threshold_us:
                self.table.clear()
                self.counters["table_resets"] += 1
        self.table.append((hw_i, float(y)))

        slope = 0.0
        if len(self.table) >= 2:
            try:
                slope = lr_skew(list(self.table))
            except DegenerateRegressionError:
                slope = 0.0
        observed = offset_theta1(self.clock.logical.read(hw_i), pkt.logical_ts)
        if self.offset_rule in (OFFSET_THETA2, OFFSET_THETA3):
            observed = observed - self.params.d_fixed_prior_us

        step = -round_half_away(observed)
        phi_new = 1.0 + slope
        try:
            self.clock.logical.apply_correction(phi_new, step, hw_i)
            self.counters["corrections"] += 1
        except EstimateOutOfBandError:
            self.counters["phi_rejections"] += 1
            sim.note("reject_phi", node=self.node_id, phi=phi_new)
            self.clock.logical.apply_correction(self.clock.logical.phi, step,
                                                hw_i)
        self.counters["rounds_accepted"] += 1
        sim.log_accept(self.node_id, pkt.round_id, pkt.sender_id)

        if self.flooding == FLOOD_RAPID:
            lo, hi = self.params.rapid_wait_range_us
            sim.timer(now + int(self.rng.uniform(lo, hi)), self.node_id,
                      "forward", pkt.round_id)


def build_node(protocol: str, node_id: int, clock: NodeClock,
               params: ProtocolParams, rng, role: str = ROLE_NON_ROOT):
    """Instantiate the node implementation for one protocol id."""
    try:
        cfg = PROTOCOL_TABLE[protocol]
    except KeyError:
        raise ValueError(f"unknown protocol {protocol!r}; "
                         f"choose from {', '.join(PROTOCOL_IDS)}") from None
    if cfg.skew_rule == SKEW_MLE:
        return RdcNode(node_id, clock, params, rng, role=role,
                       adaptive=cfg.offset_rule == OFFSET_ADAPTIVE)
    node = LrFloodNode(node_id, clock, params, rng, role=role,
                       flooding=cfg.flooding, offset_rule=cfg.offset_rule)
    return node
