"""Command-line entry point: ``tramsched <subcommand> ...``.

Every subcommand prints a one-line human summary and can write a JSON report
(``--report``). Exit status is 0 when all requested artifacts were written,
1 when a stage failed, 2 for unusable input or configuration.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .cluster import (DEFAULT_DT_GRID, DEFAULT_EPS_GRID, DEFAULT_MINPTS_GRID, sweep_parameters)
from .config import ConfigError, PipelineConfig
from .geo import GeoCoord
from .network import Direction, NetworkError, TransitNetwork
from .pipeline import run_pipeline, score_stations
from .preprocess import preprocess_all
from .sim import NoiseProfile, SimConfig, SimConfigError, default_config, simulate
from .stations import StationsDbError, detect_stop_places, load_db, save_db, stationary_fixes
from .timing import (DistributionStore, EtaError, UnresolvedElementError, distribution_grid,
                     eta_station_view, eta_vehicle_view, extract_delay_samples)
from .trace import TraceFormatError, TraceStore, parse_trace_file, write_traces

log = logging.getLogger("tramsched")


class CliError(Exception):
    """Failure with a message meant for the user; ``code`` is the exit status."""

    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


# ----------------------------------------------------------------- helpers
def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.set:
        cfg = cfg.with_overrides(args.set)
    if args.verbose:
        cfg.verbosity = args.verbose
    return cfg


def _need(path, what: str) -> Path:
    if path is None:
        raise CliError(f"missing {what}: pass it as a flag or under 'paths' in the config", 2)
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}", 2)
    return p


def _load_traces(path):
    p = _need(path, "trace file")
    try:
        traces, rep = parse_trace_file(p)
    except TraceFormatError as exc:
        raise CliError(f"{p}: {exc}", 2) from None
    if rep.bad_lines:
        log.warning("%s: skipped %d malformed line(s)", p, len(rep.bad_lines))
    # Sorts, splits per device-day and drops repeated (device, t) rows.
    store = TraceStore()
    store.ingest(traces)
    return store.traces()


def _network(path) -> TransitNetwork:
    p = _need(path, "network file")
    try:
        return TransitNetwork.load(p)
    except (NetworkError, KeyError, ValueError) as exc:
        raise CliError(f"{p}: invalid network: {exc}", 2) from None


def _db(path):
    p = _need(path, "stations database")
    try:
        return load_db(p)
    except StationsDbError as exc:
        raise CliError(str(exc), 2) from None


def _store(path) -> DistributionStore:
    p = _need(path, "distribution store")
    try:
        return DistributionStore.load(p)
    except (ValueError, KeyError) as exc:
        raise CliError(f"{p}: unreadable distribution store: {exc}", 2) from None


def _truth_places(path):
    p = _need(path, "truth file")
    return json.loads(p.read_text())["places"]


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, default=str))


def _finish(args, report: dict, line: str) -> int:
    print(line)
    if getattr(args, "report", None):
        _write_json(args.report, report)
    return 0


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.split(","))


# ------------------------------------------------------------- subcommands
def cmd_simulate(args) -> int:
    if args.sim_config:
        try:
            sim_cfg = SimConfig.from_dict(json.loads(_need(args.sim_config, "simulator config").read_text()))
        except (SimConfigError, TypeError, ValueError) as exc:
            raise CliError(f"invalid simulator config: {exc}", 2) from None
    else:
        sim_cfg = default_config()
    for key in ("seed", "riders", "runs"):
        if getattr(args, key) is not None:
            setattr(sim_cfg, key, getattr(args, key))
    if args.noise_free:
        sim_cfg.noise = NoiseProfile.none()
    try:
        res = simulate(sim_cfg)
    except SimConfigError as exc:
        raise CliError(f"invalid simulator config: {exc}", 2) from None
    paths = res.write(args.out)
    report = {"artifacts": paths, "counters": res.truth.counters, "config": sim_cfg.to_dict()}
    return _finish(args, report, f"simulated {len(res.traces)} traces, {res.truth.counters['points']} fixes -> {args.out}")


def cmd_preprocess(args) -> int:
    cfg = _config(args)
    traces = _load_traces(args.traces or cfg.paths.traces)
    cleaned, rep = preprocess_all(traces, cfg.preprocess)
    write_traces(cleaned, args.out, with_weight=True)
    d = rep.to_dict()
    if rep.retention_ratio is None:
        d["warnings"].append("retention undefined: input is empty")
        ratio = "undefined (empty input)"
    else:
        ratio = f"{rep.retention_ratio:.4f}"
    return _finish(args, d, f"kept {rep.output_points}/{rep.input_points} rows, retention {ratio} -> {args.out}")


def cmd_sweep(args) -> int:
    cfg = _config(args)
    traces = _load_traces(args.traces or cfg.paths.traces)
    if not args.cleaned:
        traces, _ = preprocess_all(traces, cfg.preprocess)
    places = _truth_places(args.truth or cfg.paths.truth)
    pts, w = stationary_fixes(traces, cfg.stations.v_thresh_mps, cfg.stations.min_dwell_s)
    truth = np.array([[p["lat"], p["lon"]] for p in places if p["kind"] == "station"])
    neg = np.array([[p["lat"], p["lon"]] for p in places if p["kind"] == "light"]).reshape(-1, 2)
    out = sweep_parameters(pts, truth,
                           tuple(int(x) for x in _floats(args.minpts)) if args.minpts else DEFAULT_MINPTS_GRID,
                           _floats(args.eps) if args.eps else DEFAULT_EPS_GRID,
                           _floats(args.dt) if args.dt else DEFAULT_DT_GRID, negatives=neg, weights=w)
    _write_json(args.out, out.to_dict())
    if args.roc:
        with open(args.roc, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["minpts", "dt_deg", "eps_deg", "fpr", "tpr"])
            for (mp, dt), rows in sorted(out.roc_curves().items()):
                for eps, fpr, tpr in rows:
                    wr.writerow([mp, dt, eps, fpr, tpr])
    c = out.chosen_point
    return _finish(args, out.to_dict(), f"chosen minpts={c.minpts} eps={c.eps_deg} dt={c.dt_deg} "
                                        f"TPR={c.tpr:.3f} FPR={c.fpr:.3f} -> {args.out}")


def cmd_detect_stations(args) -> int:
    cfg = _config(args)
    traces = _load_traces(args.traces or cfg.paths.traces)
    if not args.cleaned:
        traces, _ = preprocess_all(traces, cfg.preprocess)
    db = _db(args.update) if args.update else None
    run = detect_stop_places(traces, cfg.cluster, cfg.stations, db)
    save_db(run.db, args.db)
    report = {"stations": len(run.db.stations()), "lights": len(run.db.places("traffic_light")),
              "db": str(args.db), "config": cfg.to_dict()}
    if args.truth:
        report["score"] = score_stations(run.db, _truth_places(args.truth), cfg.cluster.dt_deg).to_dict()
    return _finish(args, report, f"{report['stations']} stations, {report['lights']} traffic lights -> {args.db}")


def cmd_fit_delays(args) -> int:
    cfg = _config(args)
    raw = _load_traces(args.traces or cfg.paths.traces)
    db = _db(args.db or cfg.paths.stations_db)
    net = _network(args.network or cfg.paths.network)
    cleaned, _ = preprocess_all(raw, cfg.preprocess)
    samples, ext = extract_delay_samples(cleaned, db, net, None, cfg.extract,
                                         raw={t.device_id: t for t in raw})
    store_path = Path(args.store)
    store = DistributionStore.bootstrap(store_path)
    store.ingest(samples, cfg.fit.lam, cfg.fit.alpha, cfg.fit.n_min, cfg.fit.ks_method)
    store.save(store_path)
    eligible = sum(d.eligible for d in store.values())
    report = {"extract": vars(ext), "distributions": [d.to_dict() for d in store.values()]}
    return _finish(args, report, f"{len(store)} elements ({eligible} eligible) from {ext.samples} samples -> {store_path}")


def cmd_eta(args) -> int:
    cfg = _config(args)
    store_path = args.store or cfg.paths.distributions
    if store_path is None or not Path(store_path).exists():
        raise CliError(f"distribution store not found: {store_path}; run 'fit-delays' first", 2)
    store = _store(store_path)
    net = _network(args.network or cfg.paths.network)
    db = _db(args.db) if args.db else None
    try:
        if args.station:
            trams = json.loads(_need(args.trams, "live tram positions file").read_text())
            live = [(t["tram"], GeoCoord(t["lat"], t["lon"]), Direction(t["direction"])) for t in trams]
            res = eta_station_view(args.station, live, net, store, db, cfg.fit.z)
            if res.estimate is None:
                report = {"station": args.station, "estimate": None, "reason": res.reason}
                print(f"no arrival estimate for {args.station}: {res.reason}")
                if args.report:
                    _write_json(args.report, report)
                return 1
            report = {"station": args.station, "tram": res.tram_ref} | res.estimate.to_dict()
            est = res.estimate
            who = f"tram {res.tram_ref} reaches {args.station}"
        else:
            if args.lat is None or args.lon is None or not args.dest:
                raise CliError("vehicle view needs --lat, --lon and --dest (or use --station)", 2)
            direction = Direction(args.direction) if args.direction else None
            est = eta_vehicle_view(GeoCoord(args.lat, args.lon), args.dest, net, store, direction, db, z=cfg.fit.z)
            report = {"destination": args.dest} | est.to_dict()
            who = f"arrival at {args.dest}"
    except (EtaError, UnresolvedElementError) as exc:
        raise CliError(f"cannot estimate: {exc}") from None
    return _finish(args, report, f"{who} in {est.expected_s:.0f} s (95% interval {est.lo:.0f}..{est.hi:.0f} s)")


def cmd_distributions(args) -> int:
    cfg = _config(args)
    store = _store(args.store or cfg.paths.distributions)
    rows = 0
    with open(args.out, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["kind", "element_ref", "x_s", "pdf", "cdf"])
        for d in store.values():
            if d.n == 0:
                continue
            for x, p, c in distribution_grid(d, args.points):
                wr.writerow([d.kind.value, d.element_ref, f"{x:.4f}", f"{p:.8g}", f"{c:.8g}"])
                rows += 1
    return _finish(args, {"rows": rows, "out": str(args.out)}, f"wrote {rows} grid rows -> {args.out}")


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts: dict[str, str] = {}
    report: dict = {"status": "partial", "artifacts": artifacts}
    stage = "ingest"
    try:
        truth_places = None
        if args.traces or cfg.paths.traces:
            traces = _load_traces(args.traces or cfg.paths.traces)
            net = _network(args.network or cfg.paths.network)
            if args.truth or cfg.paths.truth:
                truth_places = _truth_places(args.truth or cfg.paths.truth)
        else:
            stage = "simulate"
            sim_cfg = default_config(seed=args.seed, **({"riders": args.riders} if args.riders else {}))
            res = simulate(sim_cfg)
            artifacts.update(res.write(out / "sim"))
            traces, net, truth_places = res.traces, res.network, res.truth.places
        stage = "preprocess/detect-stations/fit-delays"
        store = DistributionStore.bootstrap(args.store) if args.store else None
        result = run_pipeline(traces, net, cfg, truth_places, store)
        write_traces(result.cleaned, out / "cleaned.csv", with_weight=True)
        artifacts["cleaned"] = str(out / "cleaned.csv")
        save_db(result.detection.db, out / "stations.json")
        artifacts["stations_db"] = str(out / "stations.json")
        result.store.save(out / "distributions.json")
        artifacts["distributions"] = str(out / "distributions.json")
        report.update(result.summary(cfg))
        report["status"] = "complete"
    except CliError as exc:
        report.update({"failed_stage": stage, "error": str(exc)})
        _write_json(out / "report.json", report)
        raise
    except Exception as exc:
        report.update({"failed_stage": stage, "error": repr(exc)})
        _write_json(out / "report.json", report)
        raise CliError(f"pipeline failed during {stage}: {exc}; partial outputs in {out}") from exc
    _write_json(out / "report.json", report)
    artifacts["report"] = str(out / "report.json")
    text = _summary_text(result)
    (out / "report.txt").write_text(text + "\n")
    return _finish(args, report, text)


def _summary_text(result) -> str:
    r = result.preprocess.retention_ratio
    lines = [f"retention: {'undefined' if r is None else f'{r:.4f}'}",
             f"stations: {len(result.detection.db.stations())}, "
             f"traffic lights: {len(result.detection.db.places('traffic_light'))}"]
    s = result.station_score
    if s is not None:
        mpe = s.mean_platform_error
        lines.append(f"station precision {s.precision:.3f} recall {s.recall:.3f}"
                     + ("" if mpe is None else f", mean platform error {100 * mpe:.1f}%"))
    lines.append(f"{'kind':16} {'element':10} {'n':>4} {'mu_s':>7} {'sigma_s':>7} {'rate':>5} ks")
    for d in result.store.values():
        if d.n == 0:
            continue
        ks = "-" if d.ks is None else ("pass" if d.ks.passed else "fail")
        lines.append(f"{d.kind.value:16} {d.element_ref:10} {d.n:4d} {d.mu:7.1f} {d.sigma:7.1f} {d.rate:5.2f} {ks}"
                     + ("" if d.eligible else " (ineligible)"))
    return "\n".join(lines)


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable; wins over --config)")
    common.add_argument("--report", help="write the JSON report here")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="tramsched", description="Tram stop detection, delay fitting and ETA from rider GPS traces.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic network, traces and ground truth")
    s.add_argument("--sim-config", help="simulator config JSON")
    s.add_argument("--seed", type=int)
    s.add_argument("--riders", type=int)
    s.add_argument("--runs", type=int)
    s.add_argument("--noise-free", action="store_true")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("preprocess", parents=[common], help="clean a trace file")
    s.add_argument("--traces")
    s.add_argument("--out", required=True, help="cleaned trace CSV")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("sweep", parents=[common], help="DBSCAN parameter sweep against ground truth")
    s.add_argument("--traces")
    s.add_argument("--truth", help="truth JSON from 'simulate'")
    s.add_argument("--cleaned", action="store_true", help="input is already preprocessed")
    s.add_argument("--minpts", help="comma-separated grid")
    s.add_argument("--eps", help="comma-separated grid, degrees")
    s.add_argument("--dt", help="comma-separated grid, degrees")
    s.add_argument("--out", required=True, help="sweep outcome JSON")
    s.add_argument("--roc", help="ROC points CSV")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("detect-stations", parents=[common], help="find stations and traffic lights")
    s.add_argument("--traces")
    s.add_argument("--cleaned", action="store_true", help="input is already preprocessed")
    s.add_argument("--update", help="existing stations DB to update")
    s.add_argument("--truth", help="score against this truth JSON")
    s.add_argument("--db", required=True, help="stations DB JSON to write")
    s.set_defaults(func=cmd_detect_stations)

    s = sub.add_parser("fit-delays", parents=[common], help="fit delay distributions into a store")
    s.add_argument("--traces", help="raw trace CSV")
    s.add_argument("--db")
    s.add_argument("--network")
    s.add_argument("--store", required=True, help="distribution store JSON (updated when it exists)")
    s.set_defaults(func=cmd_fit_delays)

    s = sub.add_parser("eta", parents=[common], help="vehicle-view or station-view arrival estimate")
    s.add_argument("--store")
    s.add_argument("--network")
    s.add_argument("--db", help="stations DB for platform extents")
    s.add_argument("--lat", type=float)
    s.add_argument("--lon", type=float)
    s.add_argument("--dest")
    s.add_argument("--direction", choices=[d.value for d in Direction])
    s.add_argument("--station", help="station view: waiting station id")
    s.add_argument("--trams", help="station view: JSON list of {tram, lat, lon, direction}")
    s.set_defaults(func=cmd_eta)

    s = sub.add_parser("distributions", parents=[common], help="PDF/CDF grids of fitted elements as CSV")
    s.add_argument("--store")
    s.add_argument("--points", type=int, default=201)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_distributions)

    s = sub.add_parser("pipeline", parents=[common], help="simulate or ingest, then preprocess, detect, fit")
    s.add_argument("--traces", help="raw traces; omit to simulate")
    s.add_argument("--network")
    s.add_argument("--truth")
    s.add_argument("--store", help="existing distribution store to update")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--riders", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
