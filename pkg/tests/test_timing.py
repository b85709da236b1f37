import json
import math
import threading
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evalkit import interval_coverage, random_trips, true_store
from oracles import ks_brute
from tramsched.geo import GeoCoord
from tramsched.network import Direction, TransitNetwork
from tramsched.pipeline import run_pipeline
from tramsched.sim import NoiseProfile, default_config, default_network_dict, simulate
from tramsched.timing import (DelayDistribution, DelayKind, DelaySamples, DistributionStore, ExtractConfig,
                              PlanTerm, TripPlan, UnresolvedElementError, build_plan, collapse_observations,
                              distribution_grid, eta_station_view, eta_vehicle_view, fit_delay, ks_critical,
                              ks_normal_test, ks_statistic, trip_time, update_history,
                              vehicle_view_plan)

S, SG, LG, TF, BF = DelayKind.STATION, DelayKind.SEGMENT, DelayKind.LEG, DelayKind.TRAFFIC, DelayKind.BUFFERING
W2E, E2W = Direction.WEST_TO_EAST, Direction.EAST_TO_WEST


def dist(kind, ref, mu, sd, n=50, **kw):
    return DelayDistribution(kind, ref, mu, sd * sd, n, **kw)


def samples(values, kind=S, ref="A"):
    s = DelaySamples(kind, ref)
    for i, v in enumerate(values):
        s.add(v, 1000 * i)
    return s


@pytest.fixture(scope="module")
def net():
    return TransitNetwork.from_dict(default_network_dict())


@pytest.fixture(scope="module")
def truth_sim():
    return simulate(default_config(seed=31, riders=0, runs=120))


# ------------------------------------------------------------- arithmetic
def worked_example():
    plan = TripPlan([PlanTerm(S, "S7"), PlanTerm(SG, "S7->S8"), PlanTerm(S, "S8"), PlanTerm(SG, "S8->S9")], 2, 0)
    store = {(S, "S7"): dist(S, "S7", 44, 20), (SG, "S7->S8"): dist(SG, "S7->S8", 29, 12),
             (S, "S8"): dist(S, "S8", 76, 34), (SG, "S8->S9"): dist(SG, "S8->S9", 28, 14)}
    return plan, store


def test_four_term_sum_exact():
    plan, store = worked_example()
    est = trip_time(plan, store)
    assert est.expected_s == 177.0
    assert abs(est.sigma_s - math.sqrt(1896)) <= 1e-6
    assert est.lo == pytest.approx(177 - 1.96 * math.sqrt(1896))
    assert est.lo <= est.expected_s <= est.hi


def test_single_element():
    est = trip_time(TripPlan([PlanTerm(SG, "a->b")]), {(SG, "a->b"): dist(SG, "a->b", 31.5, 4.0)})
    assert (est.expected_s, est.sigma_s) == (31.5, 4.0)


def test_missing_element_named():
    plan, store = worked_example()
    del store[(S, "S8")]
    with pytest.raises(UnresolvedElementError) as exc:
        trip_time(plan, store)
    assert exc.value.elements == [(S, "S8")]
    assert "S8" in str(exc.value)


def test_ineligible_element_unresolved():
    plan, store = worked_example()
    store[(S, "S7")] = dist(S, "S7", 44, 20, n=3, eligible=False)
    with pytest.raises(UnresolvedElementError):
        trip_time(plan, store)


def test_occasional_term_moments():
    d = dist(TF, "L1", 30.0, 5.0, n=20, weight=20.0, opportunities=80.0)
    m, v = d.term_moments()
    assert d.rate == 0.25
    assert m == pytest.approx(7.5)
    assert v == pytest.approx(0.25 * (25 + 900) - 7.5 ** 2)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(1, 300), st.floats(0, 50)), min_size=1, max_size=12),
       st.integers(1, 11))
def test_linearity(params, cut):
    cut = min(cut, len(params))
    store = {(SG, f"e{i}"): dist(SG, f"e{i}", mu, sd) for i, (mu, sd) in enumerate(params)}
    terms = [PlanTerm(SG, f"e{i}") for i in range(len(params))]
    whole = trip_time(TripPlan(terms), store)
    a = trip_time(TripPlan(terms[:cut]), store)
    parts_var = a.sigma_s ** 2
    parts_mean = a.expected_s
    if cut < len(terms):
        b = trip_time(TripPlan(terms[cut:]), store)
        parts_var += b.sigma_s ** 2
        parts_mean += b.expected_s
    assert whole.expected_s == pytest.approx(parts_mean, rel=1e-12)
    assert whole.sigma_s ** 2 == pytest.approx(parts_var, rel=1e-9, abs=1e-9)


# ------------------------------------------------------------------ plans
def test_destination_dwell_excluded(net):
    seq = net.ordered_places("1", W2E)
    src = seq[0]
    for dst in seq[1:]:
        if net.places[dst].kind != "station":
            continue
        plan = build_plan(net, src, dst, W2E, "1")
        assert PlanTerm(S, dst) not in plan.terms
        assert plan.terms[0] == PlanTerm(S, src)


def test_plan_alternates_with_topology(net):
    plan = build_plan(net, "S8", "S5", E2W)
    refs = [(t.kind, t.ref) for t in plan.terms]
    assert refs == [(S, "S8"), (SG, "S8->S7"), (S, "S7"), (LG, "S7->L3"), (TF, "L3"), (LG, "L3->S6"),
                    (S, "S6"), (SG, "S6->S5")]
    assert (plan.n_stations, plan.n_lights) == (3, 1)


def test_buffering_term_only_when_eligible(net):
    seq = net.ordered_places("1", W2E)
    i = seq.index("S3")
    src = seq[i - 1]
    store = DistributionStore([dist(BF, "S3", 30, 8, weight=5.0, opportunities=25.0)])
    assert PlanTerm(BF, "S3") in build_plan(net, src, "S3", W2E, "1", store).terms
    store = DistributionStore([dist(BF, "S3", 30, 8, n=2, eligible=False)])
    assert PlanTerm(BF, "S3") not in build_plan(net, src, "S3", W2E, "1", store).terms


# ------------------------------------------------------------------- ETA
def full_store(net):
    cfg = default_config()
    gens = {"station_delay": cfg.station_delay, "light_delay": cfg.light_delay,
            "buffering": cfg.buffering, "travel": cfg.travel}
    return true_store(gens, net)


def between(net, line_id, a, b, frac):
    line = net.lines[line_id]
    arc = line.place_arc[a] + frac * (line.place_arc[b] - line.place_arc[a])
    lat, lon = line.polyline.point_at([arc])
    return GeoCoord(float(lat[0]), float(lon[0]))


def test_halfway_prorates_first_term(net):
    store = full_store(net)
    pos = between(net, "1", "S1", "S2", 0.5)
    plan = vehicle_view_plan(pos, "S4", net, W2E, store)
    assert plan.terms[0].ref == "S1->S2" and plan.terms[0].c == pytest.approx(0.5)
    assert PlanTerm(S, "S1") not in plan.terms


def test_departure_edge_equals_full_plan(net):
    store = full_store(net)
    line = net.lines["1"]
    pl = net.places["S2"].platform_length_m
    arc = line.place_arc["S2"] + pl / 2
    lat, lon = line.polyline.point_at([arc])
    est = eta_vehicle_view(GeoCoord(float(lat[0]), float(lon[0])), "S5", net, store, W2E)
    full = trip_time(build_plan(net, "S2", "S5", W2E, "1", store), store)
    assert est.expected_s == full.expected_s and est.sigma_s == full.sigma_s


def test_far_position_rejected(net):
    from tramsched.timing import EtaError
    with pytest.raises(EtaError):
        eta_vehicle_view(GeoCoord(31.0, 29.0), "S5", net, full_store(net), W2E)


def test_station_view_min_rule(net):
    store = full_store(net)
    near = between(net, "1", "S3", "S4", 0.5)
    far = between(net, "1", "S1", "S2", 0.5)
    wrong_way = between(net, "1", "S5", "S6", 0.5)
    res = eta_station_view("S5", [("far", far, W2E), ("near", near, W2E), ("back", wrong_way, W2E)],
                           net, store)
    assert res.tram_ref == "near"
    single = eta_station_view("S5", [("far", far, W2E)], net, store)
    assert single.estimate == eta_vehicle_view(far, "S5", net, store, W2E)
    assert res.estimate.expected_s < single.estimate.expected_s


def test_station_view_no_trams(net):
    res = eta_station_view("S5", [], net, full_store(net))
    assert res.tram_ref is None and res.estimate is None and res.reason


def test_true_generators_interval_coverage(truth_sim):
    store = true_store(truth_sim.truth.generators, truth_sim.network)
    cov, n = interval_coverage(truth_sim, store, random_trips(truth_sim, 2500, seed=1))
    assert n >= 2000
    assert abs(cov - 0.95) <= 0.03


# -------------------------------------------------------------------- fit
def test_fit_matches_direct_moments():
    x = np.random.default_rng(3).normal(40, 9, 200)
    d = fit_delay(samples(x))
    mu = math.fsum(x) / len(x)
    var = math.fsum((v - mu) ** 2 for v in x) / (len(x) - 1)
    assert d.mu == pytest.approx(mu, rel=1e-9)
    assert d.sigma2 == pytest.approx(var, rel=1e-9)


def test_constant_samples_degenerate():
    d = fit_delay(samples([12.0] * 10))
    assert (d.mu, d.sigma2, d.degenerate, d.ks, d.eligible) == (12.0, 0.0, True, None, True)


def test_too_few_samples_ineligible():
    d = fit_delay(samples([10, 11, 12]), n_min=8)
    assert not d.eligible and d.ks is None and d.n == 3


def test_no_samples():
    d = fit_delay(DelaySamples(TF, "L9", opportunities=4))
    assert not d.eligible and d.n == 0 and d.rate == 0.0


def test_samples_must_be_positive():
    s = DelaySamples(S, "A")
    for bad in (0.0, -3.0, float("nan"), float("inf")):
        with pytest.raises(ValueError):
            s.add(bad, 0)


def test_normal_500_passes():
    x = np.random.default_rng(20240302).normal(60, 15, 500)
    d = fit_delay(samples(x))
    assert abs(d.mu - 60) <= 1.5
    assert d.ks.passed


def test_uniform_500_fails():
    x = np.random.default_rng(20240303).uniform(30, 400, 500)
    d = fit_delay(samples(x))
    assert not d.ks.passed
    assert d.ks.d_star > d.ks.critical


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(1, 1000, allow_nan=False), min_size=8, max_size=60))
def test_d_star_equals_brute_force(xs):
    mu = float(np.mean(xs))
    sd = float(np.std(xs, ddof=1))
    if sd == 0:
        return
    d = ks_statistic(xs, mu, sd)
    assert d == ks_brute(xs, mu, sd)
    assert 0.0 <= d <= 1.0


def test_critical_values():
    assert ks_critical(100, 0.05, "kolmogorov") == pytest.approx(0.1358)
    assert ks_critical(100, 0.05) == pytest.approx(0.895 / (10 - 0.01 + 0.085))
    assert ks_critical(400) < ks_critical(100)
    with pytest.raises(ValueError):
        ks_critical(100, 0.05, "anderson")


def test_ks_result_fields():
    x = np.random.default_rng(5).normal(0, 1, 50)
    r = ks_normal_test(x, float(x.mean()), float(x.var(ddof=1)))
    assert r.alpha == 0.05 and r.passed == (r.d_star <= r.critical)


def test_grid_is_monotone_cdf():
    rows = distribution_grid(dist(S, "A", 50, 10), points=41)
    cdf = [r[2] for r in rows]
    assert len(rows) == 41 and all(b >= a for a, b in zip(cdf, cdf[1:]))
    assert rows[0][0] >= 0


# ---------------------------------------------------------------- history
def test_pooling_identity():
    rng = np.random.default_rng(11)
    a, b = rng.normal(50, 10, 37), rng.normal(58, 14, 23)
    upd = update_history(fit_delay(samples(a)), samples(b), lam=1.0)
    ref = fit_delay(samples(np.r_[a, b]))
    assert abs(upd.mu - ref.mu) <= 1e-9 * abs(ref.mu)
    assert abs(upd.sigma2 - ref.sigma2) <= 1e-9 * ref.sigma2
    assert upd.n == 60 and upd.version == 2


def test_empty_update_unchanged():
    d = fit_delay(samples(np.random.default_rng(1).normal(20, 3, 30)))
    assert update_history(d, [], lam=0.7) == d


def test_decay_half():
    first = samples([9.0, 11.0] * 5)
    second = samples([19.0, 21.0] * 5)
    d = update_history(fit_delay(first), second, lam=0.5)
    # old weight 0.5 * 10 = 5 at mean 10, new weight 10 at mean 20
    assert d.mu == pytest.approx(50 / 3, rel=1e-12)
    assert d.weight == 15.0
    assert 10 < d.mu < 20 and d.mu - 10 > 20 - d.mu


def test_lambda_bounds():
    d = fit_delay(samples([1.0, 2.0] * 5))
    for lam in (0.0, 1.5):
        with pytest.raises(ValueError):
            update_history(d, [3.0], lam=lam)


def test_opportunity_only_update_lowers_rate():
    s = samples([30.0, 31.0, 29.0] * 4, kind=TF, ref="L1")
    s.opportunities = 24
    d = fit_delay(s)
    assert d.rate == 0.5
    more = DelaySamples(TF, "L1", opportunities=24)
    assert update_history(d, more).rate == 0.25


# ------------------------------------------------------------------ store
def test_store_roundtrip(tmp_path):
    x = np.random.default_rng(2).normal(40, 5, 30)
    store = DistributionStore([fit_delay(samples(x)), fit_delay(samples([5, 6], kind=SG, ref="A->B"))])
    path = tmp_path / "d.json"
    store.save(path)
    back = DistributionStore.load(path)
    assert [d.to_dict() for d in back.values()] == [d.to_dict() for d in store.values()]
    row = json.loads(path.read_text())[0]
    assert {"kind", "element_ref", "mu_s", "sigma2_s2", "n", "ks", "version"} <= set(row)


def test_bootstrap_missing_is_empty(tmp_path):
    assert len(DistributionStore.bootstrap(tmp_path / "none.json")) == 0


def test_ingest_updates_existing():
    store = DistributionStore()
    rng = np.random.default_rng(4)
    a, b = rng.normal(30, 4, 20), rng.normal(30, 4, 20)
    store.ingest({(S, "A"): samples(a)})
    store.ingest({(S, "A"): samples(b)})
    d = store.get(S, "A")
    assert d.n == 40 and d.version == 2
    assert d.mu == pytest.approx(np.mean(np.r_[a, b]), rel=1e-12)


def test_readers_see_whole_batches():
    store = DistributionStore()
    seen = []
    stop = threading.Event()

    def reader():
        while not stop.is_set():
            snap = store.snapshot()
            vs = {d.version for d in snap.values()}
            seen.append(len(vs) <= 1)

    th = threading.Thread(target=reader)
    th.start()
    for _ in range(200):
        store.ingest({(S, f"X{i}"): samples([1.0, 2.0, 3.0]) for i in range(20)})
    stop.set()
    th.join()
    assert all(seen)


# ------------------------------------------------------------- extraction
def test_collapse_merges_riders_on_one_tram():
    recs = [(1000, W2E, 44.0), (3000, W2E, 46.0), (60_000, W2E, 30.0), (2000, E2W, None)]
    s = collapse_observations(S, "A", recs, 10_000)
    assert sorted(s.samples) == [30.0, 45.0]
    assert s.opportunities == 3


def test_single_dwell_single_sample():
    s = collapse_observations(S, "A", [(0, W2E, 44.0)], 10_000)
    assert (s.samples, s.opportunities) == ([44.0], 1)


def resolvable(events, window_s):
    """Count event-log passages, merging same-direction passages closer than
    the window (they cannot be told apart without tram identity)."""
    out = Counter()
    by = {}
    for key, t in events:
        by.setdefault(key, []).append(t)
    for (place, _), ts in by.items():
        ts.sort()
        last = None
        for t in ts:
            if last is None or t - last > window_s:
                out[place] += 1
                last = t
    return out


def test_extracted_counts_match_event_log():
    cfg = default_config(seed=0, noise=NoiseProfile.none())
    sim = simulate(cfg)
    res = run_pipeline(sim.traces, sim.network, truth_places=sim.truth.places)
    runs = {r.run_id: r for r in sim.runs}
    seen = {}
    for trip in sim.truth.riders:
        run = runs[trip["run_id"]]
        for k, e in enumerate(run.events):
            if trip["board_ms"] < cfg.start_ms + 1000 * e.arrive and cfg.start_ms + 1000 * e.depart < trip["alight_ms"]:
                seen[(run.run_id, k)] = ((e.place, run.direction), e)
    window = ExtractConfig().same_event_ms / 1000

    def bounds(pred):
        # Passages of two trams near the merge window may or may not be merged:
        # a rider's offset along the tram (up to half a platform, about 6 s at
        # line speed) shifts the observed time either way.
        ev = [(key, e.arrive) for key, e in seen.values() if pred(e)]
        return resolvable(ev, window + 12.0), resolvable(ev, 0.0)

    dwell = bounds(lambda e: e.kind == "station")
    stops = bounds(lambda e: e.kind == "light" and e.stopped)
    passes = bounds(lambda e: e.kind == "light")
    exact = checked = 0
    for d in res.store.values():
        for kind, value, (lo, hi) in ((S, d.n, dwell), (TF, d.n, stops), (TF, d.opportunities, passes)):
            if d.kind == kind:
                checked += 1
                assert lo[d.element_ref] <= value <= hi[d.element_ref], d.element_ref
                if lo[d.element_ref] == hi[d.element_ref]:
                    assert value == hi[d.element_ref], d.element_ref
                    exact += 1
    assert exact >= checked / 2
    assert {d.element_ref for d in res.store.values() if d.kind == S} == set(dwell[1])
