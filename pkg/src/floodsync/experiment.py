"""Config-driven experiment execution and artifact writing.

One trial is one seeded simulation. A run executes ``trials`` trials at
seeds seed, seed+1, ... and writes per-trial artifacts plus an aggregate
summary under ``out/<name>/<seed>/``. A sweep runs one experiment per
(protocol, sync period) cell and emits a tidy comparison CSV. Trials can run
in a process pool (FLOODSYNC_WORKERS); results are assembled in trial order
so parallelism never changes the output bytes.
"""

import dataclasses
import json
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from floodsync import metrics
from floodsync.baselines import PROTOCOL_TABLE, build_node
from floodsync.clocks import DRIFT_RANDOM_WALK, NodeClock, OscillatorModel
from floodsync.config import (
    MODE_FLOOD_PATHS,
    ExperimentConfig,
    config_digest,
    config_to_dict,
)
from floodsync.estimators import DelayDecomposition
from floodsync.netsim import (
    EV_KILL,
    FloodPathStats,
    LinkModel,
    RngHub,
    Simulation,
    TopologySpec,
    generate_topology,
    sample_flood_paths,
    write_snapshots_csv,
    write_trace_ndjson,
)
from floodsync.protocol import ROLE_NON_ROOT, ROLE_ROOT, ProtocolParams


def topology_spec(cfg: ExperimentConfig) -> TopologySpec:
    t = cfg.topology
    return TopologySpec(kind=t.kind, nodes=t.nodes, rows=t.rows, cols=t.cols,
                        area_m=t.area_m, range_m=t.range_m)


def protocol_params(cfg: ExperimentConfig) -> ProtocolParams:
    rapid_lo, rapid_hi = cfg.rapid_wait_s
    return ProtocolParams(
        n_packets=cfg.n_packets,
        fifo_pages=cfg.fifo_pages,
        window=cfg.window,
        period_us=cfg.period_us,
        spacing_range_us=cfg.spacing_range_us,
        span_bound_us=cfg.span_bound_us,
        rapid_wait_range_us=(int(rapid_lo * 1e6), int(rapid_hi * 1e6)),
        d_fixed_prior_us=cfg.d_fixed_prior_us,
        ewma_alpha=cfg.ewma_alpha,
        d_ceiling_us=cfg.d_ceiling_us,
        neighbor_capacity=cfg.neighbor_capacity,
        silence_rounds=cfg.silence_rounds,
        candidate_wait_periods=cfg.candidate_wait_periods,
        lr_table_size=cfg.lr_table_size,
        lr_reset_threshold_us=cfg.lr_reset_threshold_us,
        outlier_sigma_factor=cfg.outlier_sigma_factor,
    )


def delay_decomposition(cfg: ExperimentConfig) -> DelayDecomposition:
    d = cfg.delay
    return DelayDecomposition(d_fixed_us=d.d_fixed_us, sigma_us=d.sigma_us,
                              p_unc=d.p_unc,
                              unc_range_us=(d.unc_lo_us, d.unc_hi_us))


def build_simulation(cfg: ExperimentConfig, seed: int,
                     trace: bool = False) -> Simulation:
    """Wire topology, clocks, and protocol nodes for one seeded trial."""
    hub = RngHub(seed)
    topo = generate_topology(topology_spec(cfg), hub)
    link = LinkModel(delay=delay_decomposition(cfg), plr=cfg.plr)
    drift_period = (cfg.period_us
                    if cfg.clock.drift_mode == DRIFT_RANDOM_WALK else 0)
    sim = Simulation(topo, link, hub,
                     probe_interval_us=cfg.probe_interval_us,
                     measurement_jitter=cfg.measurement_jitter,
                     drift_period_us=drift_period,
                     collision_mode=cfg.collision_mode,
                     trace_enabled=trace)
    params = protocol_params(cfg)
    n_baseline = 1 if PROTOCOL_TABLE[cfg.protocol].skew_rule == "lr" else cfg.n_packets
    params = dataclasses.replace(params, n_packets=n_baseline)
    for nid in range(topo.n):
        osc_rng = hub.stream("osc", nid)
        osc = OscillatorModel(
            rate_ppm=float(osc_rng.uniform(-cfg.clock.rate_bound_ppm,
                                           cfg.clock.rate_bound_ppm)),
            initial_offset_us=int(osc_rng.uniform(0, cfg.clock.power_on_spread_us)),
            drift_mode=cfg.clock.drift_mode,
            walk_step_ppm_per_period=cfg.clock.walk_step_ppm_per_period,
            rate_bound_ppm=cfg.clock.rate_bound_ppm,
        )
        clock = NodeClock(osc, phi_band_ppm=cfg.phi_band_ppm)
        role = ROLE_ROOT if nid == topo.reference else ROLE_NON_ROOT
        node = build_node(cfg.protocol, nid, clock, params,
                          hub.stream("node", nid), role=role)
        sim.add_node(node)
    if cfg.kill_node is not None:
        sim.schedule(int(cfg.kill_at_s * 1e6), EV_KILL, cfg.kill_node)
    return sim


def run_protocol_trial(cfg: ExperimentConfig, seed: int,
                       trace: bool = False) -> dict:
    sim = build_simulation(cfg, seed, trace=trace)
    sim.run(cfg.horizon_us)
    topo = sim.topology
    series = metrics.build_series(sim.probes, topo, cfg.period_us)
    steady = metrics.steady_stats(series, cfg.horizon_us)
    threshold = metrics.convergence_threshold(series, cfg.horizon_us,
                                              cfg.convergence_factor)
    periods = metrics.convergence_periods(series, threshold)
    hop_profile = metrics.error_vs_hop(
        sim.probes, topo, metrics.steady_start_us(cfg.horizon_us))
    lengths = metrics.path_lengths_per_round(sim.accept_log, topo.reference)
    path_pmf = metrics.pmf_from_lengths(lengths.values()) if lengths else {}
    node_counters = {
        str(nid): dict(sim.nodes[nid].counters) for nid in sorted(sim.nodes)}
    roots = [nid for nid, node in sim.nodes.items()
             if node.alive and node.role == ROLE_ROOT]
    summary = {
        "seed": seed,
        "protocol": cfg.protocol,
        "topology": {"kind": topo.kind, "nodes": topo.n,
                     "diameter": topo.diameter},
        "steady": steady,
        "convergence": {
            "threshold_us": threshold,
            "periods": periods,
            "converged": periods is not None,
            "horizon_periods": cfg.horizon_us // cfg.period_us,
        },
        "hop_profile": {str(h): [m, s] for h, (m, s) in hop_profile.items()},
        "engine": dict(sim.counters),
        "acting_roots": sorted(roots),
        "path_lengths": {str(k): v for k, v in path_pmf.items()},
    }
    return {
        "summary": summary,
        "series": series,
        "probes": sim.probes,
        "accept_log": sim.accept_log,
        "trace": sim.trace,
        "hop_profile": hop_profile,
        "path_pmf": path_pmf,
        "node_counters": node_counters,
    }


def run_flood_paths_trial(cfg: ExperimentConfig, seed: int,
                          trace: bool = False) -> dict:
    hub = RngHub(seed)
    topo = generate_topology(topology_spec(cfg), hub)
    cells = {}
    for latency_tag, (lo, hi) in (("rapid", cfg.rapid_wait_s),
                                  ("slow", cfg.slow_wait_s)):
        for plr in cfg.flood_plr_values:
            stats = sample_flood_paths(topo, cfg.flood_rounds, lo, hi, plr,
                                       hub, latency_tag=latency_tag)
            cells[f"{latency_tag}_plr{plr:g}"] = stats
    summary = {
        "seed": seed,
        "mode": MODE_FLOOD_PATHS,
        "topology": {"kind": topo.kind, "nodes": topo.n,
                     "diameter": topo.diameter},
        "rounds": cfg.flood_rounds,
        "cells": {
            name: {
                "modal_length": stats.modal_length(),
                "prob_at_diameter": stats.prob_at(topo.diameter),
                "mean_length": float(stats.lengths.mean()),
                "max_length": int(stats.lengths.max()),
                "mean_unreached": float(stats.unreached.mean()),
            }
            for name, stats in cells.items()
        },
    }
    return {"summary": summary, "cells": cells, "topology": topo}


def run_trial(cfg: ExperimentConfig, seed: int, trace: bool = False) -> dict:
    if cfg.mode == MODE_FLOOD_PATHS:
        return run_flood_paths_trial(cfg, seed, trace=trace)
    return run_protocol_trial(cfg, seed, trace=trace)


def _trial_worker(args):
    cfg_dict, seed, trace = args
    from floodsync.config import config_from_dict
    cfg = config_from_dict(cfg_dict)
    try:
        return True, run_trial(cfg, seed, trace=trace)
    except Exception as exc:  # trial failure, distinct from config errors
        return False, f"{type(exc).__name__}: {exc}"


def _write_trial_artifacts(result: dict, out: Path, trace: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_summary_json(result["summary"], out / "summary.json")
    if "series" in result:
        metrics.write_series_csv(result["series"], out / "series.csv")
        if result.get("path_pmf"):
            metrics.write_pathdist_csv(result["path_pmf"], out / "pathdist.csv")
        if trace:
            write_trace_ndjson(result["trace"], out / "trace.ndjson")
            write_snapshots_csv(result["probes"], out / "snapshots.csv")
    elif "cells" in result:
        for name, stats in result["cells"].items():
            metrics.write_pathdist_csv(stats.pmf(),
                                       out / f"pathdist_{name}.csv")


def run_experiment(cfg: ExperimentConfig, out_dir, name: str = "run",
                   trace: bool = False) -> dict:
    """Execute cfg.trials seeded trials and write artifacts under out_dir.

    Returns the aggregate summary (also written as summary.json). Trial
    failures are recorded per trial and reported in the aggregate.
    """
    if cfg.seed is None:
        raise ValueError("config has no seed; pass --seed")
    base = Path(out_dir) / name / str(cfg.seed)
    base.mkdir(parents=True, exist_ok=True)
    jobs = [(config_to_dict(cfg), cfg.seed + k, trace)
            for k in range(cfg.trials)]
    workers = int(os.environ.get("FLOODSYNC_WORKERS", "1"))
    results = []
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(enumerate(pool.map(_trial_worker, jobs)))
    else:
        results = [(k, _trial_worker(job)) for k, job in enumerate(jobs)]

    trial_summaries = []
    failed = []
    for k, (ok, res) in results:
        if not ok:
            failed.append({"trial": k, "seed": cfg.seed + k, "error": res})
            continue
        _write_trial_artifacts(res, base / f"trial_{k:03d}", trace)
        trial_summaries.append(res["summary"])
        if k == 0 and "series" in res:
            metrics.write_series_csv(res["series"], base / "series.csv")

    aggregate = {
        "name": name,
        "config": config_to_dict(cfg),
        "config_digest": config_digest(cfg),
        "trials": cfg.trials,
        "trials_failed": failed,
        "trial_summaries": trial_summaries,
    }
    if trial_summaries and "steady" in trial_summaries[0]:
        vals = [t["steady"].get("mean_max_global_us") for t in trial_summaries
                if t.get("steady")]
        vals = [v for v in vals if v is not None]
        if vals:
            mean = sum(vals) / len(vals)
            var = sum((v - mean) ** 2 for v in vals) / len(vals)
            aggregate["mean_max_global_us"] = mean
            aggregate["std_max_global_us"] = var ** 0.5
    metrics.write_summary_json(aggregate, base / "summary.json")
    return aggregate


def sweep(cfg: ExperimentConfig, periods_s, protocols=None, out_dir=None,
          name: str = "sweep") -> list:
    """One run per (protocol, sync period) cell; returns tidy rows.

    Each row is (protocol, period_s, mean_max_global, std_max_global),
    aggregated over the config's trial count.
    """
    if not periods_s:
        raise ValueError("sweep needs a non-empty period list")
    protocols = list(protocols) if protocols else [cfg.protocol]
    rows = []
    for proto in protocols:
        for period in periods_s:
            cell = dataclasses.replace(cfg, protocol=proto,
                                       sync_period_s=float(period))
            cell.validate()
            agg = run_experiment(
                cell, out_dir or "out", name=f"{name}_{proto}_{period:g}s")
            rows.append((proto, float(period),
                         agg.get("mean_max_global_us"),
                         agg.get("std_max_global_us")))
    return rows


def write_sweep_csv(rows, path) -> None:
    with open(path, "w") as fh:
        fh.write("protocol,period_s,mean_max_global,std_max_global\n")
        for proto, period, mean, std in rows:
            fh.write("{},{!r},{!r},{!r}\n".format(
                proto, float(period),
                float(mean) if mean is not None else float("nan"),
                float(std) if std is not None else float("nan")))
