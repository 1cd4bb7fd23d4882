"""Post-processing: synchronization error measures, convergence, path stats.

Operates on immutable probe snapshots (one logical reading per alive node at
a common true instant) and accept logs from the simulator. Error values use
absolute differences throughout. The steady-state window is the final third
of the run; the standard 45-minute presets make that "everything after the
first 30 simulated minutes".
"""

import json
import math
from dataclasses import dataclass, field


def local_error(snapshot: dict, topology) -> tuple:
    """(max, mean) absolute logical difference over adjacent pairs."""
    diffs = []
    for u, v in topology.edges():
        if u in snapshot and v in snapshot:
            diffs.append(abs(snapshot[u] - snapshot[v]))
    if not diffs:
        return 0.0, 0.0
    return float(max(diffs)), float(sum(diffs)) / len(diffs)


def global_error(snapshot: dict) -> tuple:
    """(max, mean) absolute logical difference over all unordered pairs.

    The maximum is exactly the range of logical values; the mean uses the
    sorted-prefix identity instead of enumerating the n^2/2 pairs.
    """
    values = sorted(snapshot.values())
    n = len(values)
    if n < 2:
        return 0.0, 0.0
    total = sum(v * (2 * i - n + 1) for i, v in enumerate(values))
    return float(values[-1] - values[0]), 2.0 * total / (n * (n - 1))


@dataclass
class ErrorSeries:
    """Per-probe error measures for one run."""

    times_us: list = field(default_factory=list)
    max_local: list = field(default_factory=list)
    mean_local: list = field(default_factory=list)
    max_global: list = field(default_factory=list)
    mean_global: list = field(default_factory=list)
    period_us: int = 30_000_000

    def __len__(self):
        return len(self.times_us)

    def period_index(self, i: int) -> int:
        return self.times_us[i] // self.period_us + 1


def build_series(probes: list, topology, period_us: int) -> ErrorSeries:
    series = ErrorSeries(period_us=period_us)
    for at, snapshot in probes:
        mx_l, mn_l = local_error(snapshot, topology)
        mx_g, mn_g = global_error(snapshot)
        series.times_us.append(at)
        series.max_local.append(mx_l)
        series.mean_local.append(mn_l)
        series.max_global.append(mx_g)
        series.mean_global.append(mn_g)
    return series


def steady_start_us(horizon_us: int) -> int:
    """Start of the steady-state window: the final third of the run."""
    return horizon_us - horizon_us // 3


def steady_indices(series: ErrorSeries, horizon_us: int) -> list:
    start = steady_start_us(horizon_us)
    return [i for i, t in enumerate(series.times_us) if t >= start]


def steady_stats(series: ErrorSeries, horizon_us: int) -> dict:
    idx = steady_indices(series, horizon_us)
    if not idx:
        return {}

    def agg(vals):
        sel = [vals[i] for i in idx]
        mean = sum(sel) / len(sel)
        var = sum((v - mean) ** 2 for v in sel) / len(sel)
        return mean, math.sqrt(var)

    out = {}
    for name, vals in (("max_local", series.max_local),
                       ("mean_local", series.mean_local),
                       ("max_global", series.max_global),
                       ("mean_global", series.mean_global)):
        mean, std = agg(vals)
        out[f"mean_{name}_us"] = mean
        out[f"std_{name}_us"] = std
    return out


def convergence_threshold(series: ErrorSeries, horizon_us: int,
                          factor: float = 2.5) -> float:
    """factor times the run's own steady-state mean of max_global."""
    stats = steady_stats(series, horizon_us)
    return factor * stats.get("mean_max_global_us", 0.0)


def convergence_periods(series: ErrorSeries, threshold_us: float):
    """First sync-period index after which max_global stays below threshold.

    Returns None when the series never settles below the threshold (report
    as "> horizon periods"). An instantly perfect run converges at period 1.
    """
    if not series.times_us:
        return None
    last_violation = None
    for i, v in enumerate(series.max_global):
        if v >= threshold_us:
            last_violation = i
    if last_violation is None:
        return series.period_index(0)
    if last_violation == len(series.times_us) - 1:
        return None
    return series.period_index(last_violation + 1)


def error_vs_hop(probes: list, topology, steady_from_us: int) -> dict:
    """Per-hop time-mean and std of max |L_node - L_reference|.

    Probes where the reference is absent (killed) are skipped.
    """
    ref = topology.reference
    by_hop = {}
    for at, snapshot in probes:
        if at < steady_from_us or ref not in snapshot:
            continue
        l_ref = snapshot[ref]
        worst = {}
        for nid, val in snapshot.items():
            h = topology.hop[nid]
            err = abs(val - l_ref)
            if err > worst.get(h, -1):
                worst[h] = err
        for h, err in worst.items():
            by_hop.setdefault(h, []).append(err)
    out = {}
    for h in sorted(by_hop):
        vals = by_hop[h]
        mean = sum(vals) / len(vals)
        var = sum((v - mean) ** 2 for v in vals) / len(vals)
        out[h] = (mean, math.sqrt(var))
    return out


def aic_for_fit(xs, ys, shape) -> float:
    """AIC of a one-parameter least-squares fit y = a * shape(x)."""
    gx = [shape(x) for x in xs]
    denom = sum(g * g for g in gx)
    if denom == 0:
        raise ValueError("degenerate design")
    a = sum(g * y for g, y in zip(gx, ys)) / denom
    n = len(xs)
    rss = sum((y - a * g) ** 2 for g, y in zip(gx, ys))
    rss = max(rss, 1e-300)
    return n * math.log(rss / n) + 2.0


def sqrt_vs_linear_aic(hop_profile: dict) -> tuple:
    """(aic_sqrt, aic_linear) for the per-hop mean error curve, hop >= 1."""
    xs = [h for h in sorted(hop_profile) if h >= 1]
    ys = [hop_profile[h][0] for h in xs]
    return (aic_for_fit(xs, ys, math.sqrt), aic_for_fit(xs, ys, lambda x: x))


# ---------------------------------------------------------- flooding paths

def accepts_by_round(accept_log: list) -> dict:
    rounds = {}
    for round_id, node, father, at in accept_log:
        rounds.setdefault(round_id, {})[node] = father
    return rounds


def path_lengths_per_round(accept_log: list, reference: int) -> dict:
    """round_id -> longest accepted-father path length back to the reference."""
    out = {}
    for round_id, fathers in accepts_by_round(accept_log).items():
        depth = {reference: 0}

        def depth_of(node, guard=0):
            if node in depth:
                return depth[node]
            if guard > len(fathers) + 1 or node not in fathers:
                return None
            d = depth_of(fathers[node], guard + 1)
            if d is None:
                return None
            depth[node] = d + 1
            return d + 1

        lengths = [depth_of(n) for n in fathers]
        lengths = [d for d in lengths if d is not None]
        if lengths:
            out[round_id] = max(lengths)
    return out


def is_spanning_tree(fathers: dict, topology) -> bool:
    """True when the accepted-father relation of one round forms a tree
    rooted at the reference covering every non-reference node."""
    ref = topology.reference
    nodes = set(range(topology.n)) - {ref}
    if set(fathers) != nodes:
        return False
    for node, father in fathers.items():
        if father not in topology.neighbors[node]:
            return False
    seen = {}

    def reaches_ref(node):
        chain = []
        while node != ref:
            if node in seen:
                ok = seen[node]
                break
            if node in chain or node not in fathers:
                ok = False
                break
            chain.append(node)
            node = fathers[node]
        else:
            ok = True
        for c in chain:
            seen[c] = ok
        return ok

    return all(reaches_ref(n) for n in nodes)


def pmf_from_lengths(lengths) -> dict:
    counts = {}
    for v in lengths:
        counts[int(v)] = counts.get(int(v), 0) + 1
    total = sum(counts.values())
    return {k: counts[k] / total for k in sorted(counts)}


# ----------------------------------------------------------------- writers

def write_series_csv(series: ErrorSeries, path) -> None:
    with open(path, "w") as fh:
        fh.write("period_index,max_local,mean_local,max_global,mean_global\n")
        for i in range(len(series)):
            fh.write("{},{!r},{!r},{!r},{!r}\n".format(
                series.period_index(i), float(series.max_local[i]),
                float(series.mean_local[i]), float(series.max_global[i]),
                float(series.mean_global[i])))


def write_pathdist_csv(pmf: dict, path) -> None:
    with open(path, "w") as fh:
        fh.write("length,probability\n")
        for length in sorted(pmf):
            fh.write("{},{!r}\n".format(int(length), float(pmf[length])))


def write_summary_json(summary: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
