"""End-to-end acceptance checks, one test per criterion.

Run with ``pytest tests/test_acceptance.py -v -s`` to see a PASS/FAIL line
for each criterion with the measured numbers.
"""
import math
import time

import numpy as np
import pytest

from evalkit import interval_coverage, random_trips
from oracles import brute_dbscan, ks_brute, same_partition
from tramsched.cluster import dbscan
from tramsched.config import PipelineConfig
from tramsched.network import identify_line
from tramsched.pipeline import run_pipeline
from tramsched.preprocess import phase1_coarse
from tramsched.sim import NoiseProfile, default_config, simulate
from tramsched.timing import (DelayKind, DelayDistribution, DelaySamples, PlanTerm, TripPlan,
                              extract_delay_samples, fit_delay, trip_time, update_history)
from tramsched.trace import Trace

SEEDS = range(5)


def report(n, ok, detail):
    print(f"\ncriterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def default_runs():
    t0 = time.perf_counter()
    runs = {}
    for seed in SEEDS:
        sim = simulate(default_config(seed=seed))
        runs[seed] = (sim, run_pipeline(sim.traces, sim.network, PipelineConfig(), sim.truth.places))
    return runs, time.perf_counter() - t0


def test_c1_station_discrimination(default_runs):
    runs, elapsed = default_runs
    trips = min(len(sim.truth.riders) for sim, _ in runs.values())
    prec = [res.station_score.precision for _, res in runs.values()]
    rec = [res.station_score.recall for _, res in runs.values()]
    counts = {(len(sim.network.stations()), len(sim.network.lights())) for sim, _ in runs.values()}
    ok = min(rec) >= 0.95 and min(prec) >= 0.90 and elapsed < 120 and trips >= 50 and counts == {(12, 5)}
    report(1, ok, f"recall min {min(rec):.3f}, precision min {min(prec):.3f} over seeds {list(SEEDS)}, "
                  f"{trips} trips/seed, {elapsed:.1f} s")


def test_c2_platform_length(default_runs):
    runs, _ = default_runs
    s4 = [res.station_score.platform_errors.get("S4", math.inf) for _, res in runs.values()]
    mean_err = [res.station_score.mean_platform_error for _, res in runs.values()]
    assert {sim.network.places["S4"].platform_length_m for sim, _ in runs.values()} == {70}
    ok = max(s4) <= 0.05 and max(mean_err) <= 0.05
    report(2, ok, f"70 m platform error max {100 * max(s4):.2f}%, mean error max {100 * max(mean_err):.2f}%")


def test_c3_trip_time_arithmetic():
    S, SG = DelayKind.STATION, DelayKind.SEGMENT
    terms = [(S, "S7", 44, 20), (SG, "S7->S8", 29, 12), (S, "S8", 76, 34), (SG, "S8->S9", 28, 14)]
    store = {(k, r): DelayDistribution(k, r, mu, sd * sd, 50) for k, r, mu, sd in terms}
    est = trip_time(TripPlan([PlanTerm(k, r) for k, r, _, _ in terms], 2, 0), store)
    ok = est.expected_s == 177 and abs(est.sigma_s - math.sqrt(1896)) <= 1e-6
    report(3, ok, f"expected {est.expected_s} s, sigma {est.sigma_s:.6f} s (sqrt(1896) = {math.sqrt(1896):.6f})")


def test_c4_eta_coverage():
    t0 = time.perf_counter()
    train = simulate(default_config(seed=101, riders=1500, runs=200))
    res = run_pipeline(train.traces, train.network, PipelineConfig())
    evaluation = simulate(default_config(seed=202, riders=10, runs=80))
    # Line terminals are always boarding or alighting stops, so their dwell is
    # never observed; trips start at an intermediate station.
    trips = random_trips(evaluation, 2500, seed=7, skip_terminal_source=True)
    cov, answered = interval_coverage(evaluation, res.store, trips)
    elapsed = time.perf_counter() - t0
    ok = answered >= 2000 and cov >= 0.91 and elapsed < 180
    report(4, ok, f"coverage {cov:.4f} over {answered} trips (of {len(trips)} drawn), {elapsed:.1f} s")


def test_c5_retention(default_runs):
    runs, _ = default_runs
    ret = [res.preprocess.retention_ratio for _, res in runs.values()]
    clean = simulate(default_config(seed=0, noise=NoiseProfile.none()))
    res0 = run_pipeline(clean.traces, clean.network, PipelineConfig())
    ok = all(0.97 <= r <= 0.995 for r in ret) and res0.preprocess.retention_ratio == 1.0
    report(5, ok, f"default retention {min(ret):.4f}..{max(ret):.4f}, noise-free {res0.preprocess.retention_ratio}")


def test_c6_three_sigma():
    rng = np.random.default_rng(20240301)
    lat = rng.normal(31.2, 0.001, 10_000)
    lon = rng.normal(29.9, 0.001, 10_000)
    t = 1_700_000_000_000 + 1000 * np.arange(10_000)
    kept_lat = len(phase1_coarse(Trace("d", t, lat, np.full(10_000, 29.9)))) / 100
    kept_lon = len(phase1_coarse(Trace("d", t, np.full(10_000, 31.2), lon))) / 100
    ok = abs(kept_lat - 99.7) <= 0.3 and abs(kept_lon - 99.7) <= 0.3
    report(6, ok, f"kept {kept_lat:.2f}% lat, {kept_lon:.2f}% lon")


def test_c7_dbscan_oracle():
    t0 = time.perf_counter()
    mismatches = []
    for seed in range(50):
        rng = np.random.default_rng(7000 + seed)
        n = int(rng.integers(20, 301))
        k = int(rng.integers(1, 6))
        centres = rng.uniform(0, 0.01, (k, 2))
        pts = centres[rng.integers(0, k, n)] + rng.normal(0, 0.0006, (n, 2))
        minpts, eps = int(rng.integers(2, 12)), float(rng.uniform(0.0002, 0.0008))
        ref, _ = brute_dbscan(pts, minpts, eps)
        if not same_partition(dbscan(pts, minpts, eps).labels.tolist(), ref):
            mismatches.append(seed)
    elapsed = time.perf_counter() - t0
    ok = not mismatches and elapsed < 30
    report(7, ok, f"{50 - len(mismatches)}/50 identical partitions, {elapsed:.1f} s")


def test_c8_ks(default_runs):
    runs, _ = default_runs
    sim, res = runs[0]
    cfg = PipelineConfig()
    samples, _ = extract_delay_samples(res.cleaned, res.detection.db, sim.network, res.detection.intervals,
                                       cfg.extract, raw={t.device_id: t for t in sim.traces})
    checked = exact = 0
    for s in samples.values():
        d = fit_delay(s, cfg.fit.alpha, cfg.fit.n_min, cfg.fit.ks_method)
        if d.ks is None:
            continue
        stored = res.store.get(d.kind, d.element_ref)
        checked += 1
        exact += d.ks.d_star == ks_brute(s.samples, d.mu, d.sigma) == stored.ks.d_star
    normal = fit_delay(_samples(np.random.default_rng(20240302).normal(60, 15, 500)))
    uniform = fit_delay(_samples(np.random.default_rng(20240303).uniform(30, 400, 500)))
    ok = checked > 0 and exact == checked and normal.ks.passed and not uniform.ks.passed
    report(8, ok, f"d* exact on {exact}/{checked} fitted elements; Normal(60,15^2) d*={normal.ks.d_star:.4f} "
                  f"<= {normal.ks.critical:.4f}, Uniform(30,400) d*={uniform.ks.d_star:.4f} "
                  f"> {uniform.ks.critical:.4f}")


def _samples(values):
    s = DelaySamples(DelayKind.STATION, "X")
    for i, v in enumerate(values):
        s.add(float(v), i)
    return s


def test_c9_line_id():
    sim = simulate(default_config(seed=11, riders=600))
    trunk = set(sim.network.lines["1"].places) & set(sim.network.lines["2"].places)
    crossing, trunk_only = [], []
    for tr, trip in zip(sim.traces, sim.truth.riders):
        ends = {trip["source"] in trunk, trip["dest"] in trunk}
        if ends == {True, False}:
            crossing.append((tr, trip["line"]))
        elif ends == {True}:
            trunk_only.append(tr)
    crossing = crossing[:200]
    correct = sum(identify_line(tr.lat, tr.lon, sim.network) == line for tr, line in crossing)
    ambiguous = sum(identify_line(tr.lat, tr.lon, sim.network) is None for tr in trunk_only)
    ok = len(crossing) == 200 and correct / 200 >= 0.95 and ambiguous == len(trunk_only)
    report(9, ok, f"{correct}/{len(crossing)} branch-crossing traces correct, "
                  f"{ambiguous}/{len(trunk_only)} trunk-only ambiguous")


def test_c10_pooling_identity():
    rng = np.random.default_rng(424242)
    worst_mu = worst_var = 0.0
    for _ in range(20):
        a = rng.normal(45, 12, int(rng.integers(8, 200)))
        b = rng.normal(50, 9, int(rng.integers(1, 200)))
        upd = update_history(fit_delay(_samples(a)), _samples(b), lam=1.0)
        ref = fit_delay(_samples(np.r_[a, b]))
        worst_mu = max(worst_mu, abs(upd.mu - ref.mu) / abs(ref.mu))
        worst_var = max(worst_var, abs(upd.sigma2 - ref.sigma2) / ref.sigma2)
    ok = worst_mu <= 1e-9 and worst_var <= 1e-9
    report(10, ok, f"max relative error mean {worst_mu:.2e}, variance {worst_var:.2e}")
