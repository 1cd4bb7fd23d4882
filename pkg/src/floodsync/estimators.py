"""Clock parameter estimation for flooding time synchronization.

Pure functions over timestamp observations. Conventions used throughout the
package (and pinned by the tests):

* every observation is receiver timestamp minus sender timestamp, so a
  one-way sample looks like ``delay + (receiver clock - sender clock)``;
* the skew estimate is a multiplicative rate, ``1 + mean(p)/tau``, and
  describes the *receiver's* rate relative to the sender's;
* offset estimates describe how far the receiver is ahead of the sender, so
  a node that wants to match its father subtracts the estimate.

Estimator math stays real-valued; rounding to integer microseconds happens
only where a correction is applied to a clock.
"""

import math
import statistics
from dataclasses import dataclass

METHOD_JOINT = "joint_mle"
METHOD_MIN = "min_mle"


class InsufficientDataError(ValueError):
    """Too few observations to run the estimator."""


class InvalidIntervalError(ValueError):
    """Observation interval tau must be positive."""


class UplinkMissingError(ValueError):
    """Joint estimation was requested without an uplink sample."""


class DegenerateRegressionError(ValueError):
    """All regression abscissae coincide; the slope is undefined."""


@dataclass(frozen=True)
class DelayDecomposition:
    """One-way packet delay model: fixed part, Gaussian jitter, rare spikes.

    A delay draw is d_fixed_us + N(0, sigma_us^2) plus, with probability
    p_unc, a uniform draw from unc_range_us. The Gaussian tail below
    -d_fixed_us is resampled so delays are never negative.
    """

    d_fixed_us: float = 3.0
    sigma_us: float = 0.5
    p_unc: float = 0.0
    unc_range_us: tuple = (5.0, 50.0)

    def __post_init__(self):
        if self.d_fixed_us < 0 or self.sigma_us < 0:
            raise ValueError("d_fixed_us and sigma_us must be >= 0")
        if not 0.0 <= self.p_unc <= 1.0:
            raise ValueError("p_unc must be a probability")
        lo, hi = self.unc_range_us
        if lo > hi:
            raise ValueError("unc_range_us must be (lo, hi) with lo <= hi")


@dataclass
class BroadcastBatch:
    """Timestamp pairs harvested from one multi-broadcast round.

    Lists are ordered by packet sequence number; sender timestamps are
    therefore non-decreasing and their span is bounded by the configured
    multi-broadcast span. Receiver timestamps may be reordered by delivery
    jitter and are stored as received.
    """

    sender_hw: list
    receiver_hw: list
    sender_logical: list
    receiver_logical: list
    round_id: int
    span_bound_us: int = 12

    def __post_init__(self):
        n = len(self.sender_hw)
        if not (len(self.receiver_hw) == len(self.sender_logical)
                == len(self.receiver_logical) == n):
            raise ValueError("batch timestamp lists must share one length")
        if n == 0:
            raise InsufficientDataError("empty broadcast batch")
        if any(b < a for a, b in zip(self.sender_hw, self.sender_hw[1:])):
            raise ValueError("sender timestamps must be non-decreasing")
        if self.sender_hw[-1] - self.sender_hw[0] > self.span_bound_us:
            raise ValueError("batch exceeds the multi-broadcast span bound")

    @property
    def n_received(self) -> int:
        return len(self.sender_hw)

    def hw_diffs(self) -> list:
        """Receiver-minus-sender hardware differences, one per packet."""
        return [r - s for r, s in zip(self.receiver_hw, self.sender_hw)]

    def logical_diffs(self) -> list:
        """Receiver-minus-sender logical differences, one per packet."""
        return [r - s for r, s in zip(self.receiver_logical, self.sender_logical)]


@dataclass(frozen=True)
class SkewEstimate:
    """Relative clock rate of the receiver against one sender."""

    phi_hat: float
    tau_us: float
    n_used: int

    def __post_init__(self):
        if self.phi_hat <= 0:
            raise ValueError("phi_hat must be positive")
        if self.tau_us <= 0:
            raise ValueError("tau_us must be positive")
        if self.n_used < 1:
            raise ValueError("n_used must be >= 1")


@dataclass(frozen=True)
class OffsetEstimate:
    """Receiver-ahead-of-sender offset, with the joint method's delay output."""

    theta_hat_us: float
    method: str
    d_fixed_hat_us: float | None = None

    def __post_init__(self):
        if (self.method == METHOD_JOINT) != (self.d_fixed_hat_us is not None):
            raise ValueError("d_fixed_hat_us present iff method is joint_mle")
        if self.method not in (METHOD_JOINT, METHOD_MIN):
            raise ValueError(f"unknown offset method {self.method!r}")


def skew_observations(batch_old: BroadcastBatch,
                      batch_new: BroadcastBatch) -> list:
    """Per-packet growth of the receiver-sender hardware difference.

    Pairs the two batches by packet index and returns v[n] - u[n]; trailing
    samples without a partner are dropped.
    """
    if batch_new.round_id <= batch_old.round_id:
        raise ValueError("batch_new must come from a later round")
    u = batch_old.hw_diffs()
    v = batch_new.hw_diffs()
    n = min(len(u), len(v))
    if n < 2:
        raise InsufficientDataError(
            f"need at least 2 matched timestamp pairs, have {n}")
    return [v[i] - u[i] for i in range(n)]


def outlier_filter(p: list, sigma_factor: float = 3.0,
                   granularity_us: float = 1.0) -> list:
    """Drop heavy-tail delay spikes from the upper half of sorted samples.

    Samples are sorted ascending; each candidate in the upper half is removed
    when it sits more than sigma_factor sample standard deviations above the
    mean of the samples kept before it. Spikes are strictly positive, so only
    the tail is ever removed; the lower half always survives. Prefixes of
    fewer than two samples have no defined deviation and are never a basis
    for removal, so inputs shorter than three come back unchanged.

    A prefix of tied samples has zero deviation and cannot distinguish
    quantization dither from genuine spikes; for those degenerate prefixes
    the threshold falls back to the observable's quantization envelope
    (granularity_us) instead of zero. Without that, integer observations
    lose their upper dither tick half the time and the surviving mean
    acquires a systematic negative bias that accumulates hop by hop.
    """
    if not p:
        raise InsufficientDataError("outlier filter needs at least one sample")
    data = sorted(p)
    n = len(data)
    kept = data[: n // 2]
    for k in range(n // 2, n):
        x = data[k]
        if len(kept) >= 2:
            mu = statistics.fmean(kept)
            sd = statistics.stdev(kept)
            threshold = sigma_factor * sd if sd > 0 else granularity_us
            if x - mu > threshold:
                continue
        kept.append(x)
    return kept


def skew_mle(p_kept: list, tau_us: float) -> SkewEstimate:
    """Relative rate from filtered observations over interval tau_us."""
    if not p_kept:
        raise InsufficientDataError("skew MLE needs at least one observation")
    if tau_us <= 0:
        raise InvalidIntervalError(f"tau_us must be positive, got {tau_us}")
    phi_hat = 1.0 + statistics.fmean(p_kept) / tau_us
    return SkewEstimate(phi_hat=phi_hat, tau_us=tau_us, n_used=len(p_kept))


def two_way_samples(uplink_pairs: list, downlink_pairs: list) -> tuple:
    """Receiver-minus-sender differences for each exchange direction.

    Each argument is a list of (sender_ts, receiver_ts) pairs taken on
    logical clocks. Either direction may be empty; the caller decides how to
    fall back.
    """
    p_u = [r - s for s, r in uplink_pairs]
    p_d = [r - s for s, r in downlink_pairs]
    return p_u, p_d


def joint_offset_mle(p_u: list, p_d: list,
                     theta_delta_hat: float) -> OffsetEstimate:
    """Two-way offset and fixed-delay estimate from order statistics.

    theta_delta_hat is the predicted growth of the receiver-sender offset
    between the uplink and downlink epochs, (phi_hat - 1) times their
    separation.
    """
    if not p_d:
        raise InsufficientDataError("joint offset MLE needs downlink samples")
    if not p_u:
        raise UplinkMissingError("no uplink samples; fall back to min MLE")
    mn_d = min(p_d)
    mn_u = min(p_u)
    theta = (mn_d - mn_u + theta_delta_hat) / 2.0
    d_fixed = (mn_d + mn_u - theta_delta_hat) / 2.0
    return OffsetEstimate(theta_hat_us=theta, method=METHOD_JOINT,
                          d_fixed_hat_us=d_fixed)


def min_offset_mle(u: list, d_fixed_hat: float) -> OffsetEstimate:
    """One-way offset estimate: smallest observation minus the delay prior."""
    if not u:
        raise InsufficientDataError("min offset MLE needs observations")
    return OffsetEstimate(theta_hat_us=min(u) - d_fixed_hat, method=METHOD_MIN)


def lr_skew(table: list) -> float:
    """Ordinary least-squares slope of offset against local hardware time.

    The regression table holds (hw_local, offset) pairs; the slope is the
    residual logical drift per hardware tick, used by the linear-regression
    baselines as their rate correction.
    """
    if len(table) < 2:
        raise InsufficientDataError("regression needs at least two points")
    xs = [float(x) for x, _ in table]
    ys = [float(y) for _, y in table]
    x_mean = statistics.fmean(xs)
    y_mean = statistics.fmean(ys)
    sxx = sum((x - x_mean) ** 2 for x in xs)
    if sxx == 0.0:
        raise DegenerateRegressionError("all abscissae identical")
    sxy = sum((x - x_mean) * (y - y_mean) for x, y in zip(xs, ys))
    return sxy / sxx


def error_model_predict(delays: list, rel_rates_ppm: list,
                        waits_us: list) -> float:
    """By-hop error accumulation: summed delays plus drift over the waits.

    Each list has one entry per hop between the reference and the node of
    interest; the result is in microseconds.
    """
    if not (len(delays) == len(rel_rates_ppm) == len(waits_us)):
        raise ValueError("per-hop lists must have equal length")
    drift = sum(r * w for r, w in zip(rel_rates_ppm, waits_us)) / 1e6
    return sum(delays) + drift


class DelayEstimator:
    """Validity-gated running average of joint-MLE fixed-delay outputs.

    Samples outside [0, ceiling_us] are discarded. Accepted samples feed an
    exponentially weighted average (bounded memory, adapts when the link
    changes); the average starts from the configured prior so the min-MLE
    fallback has a delay compensation before any valid sample arrives.
    """

    def __init__(self, prior_us: float = 3.0, alpha: float = 0.125,
                 ceiling_us: float = 30.0):
        self.value = float(prior_us)
        self.alpha = alpha
        self.ceiling_us = ceiling_us
        self.accepted = 0
        self.rejected = 0

    def update(self, sample_us: float) -> bool:
        """Feed one sample; returns True when it passed the validity gate."""
        if not (0.0 <= sample_us <= self.ceiling_us) or math.isnan(sample_us):
            self.rejected += 1
            return False
        self.value += self.alpha * (sample_us - self.value)
        self.accepted += 1
        return True
