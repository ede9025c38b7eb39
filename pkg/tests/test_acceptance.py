"""Acceptance criteria, one test each, with one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines as they are
produced; they are also repeated in the terminal summary.
"""

import itertools
import json
import time

import numpy as np
import pytest
from scipy.linalg import expm
from scipy.optimize import brentq

from soltype import qi_maps
from soltype.boxpath import half_spaces, is_hsv
from soltype.cli import main
from soltype.distortion import block_threshold, factor_certificate, uniform_certificate
from soltype.harness import (compare_metrics, delta_vs_empirical, estimate_distance,
                             rho_vs_distance, sample_pairs)
from soltype.hsv_pipeline import (CertificationFailure, compute_constants, make_hsv,
                                  replays_identically)
from soltype.splitting_metric import block_metric, delta_distance, path_length
from soltype.surgery import (PathSurgery, PiecewiseCurve, SelectionImpossible, SurgeryFamily,
                             apply_surgeries, build_surgery_family, loop_surgery,
                             select_simultaneous)

import conftest
from conftest import DATA, bundled

pytestmark = pytest.mark.acceptance


def record(number, ok, detail, started):
    line = "criterion %d: %s  %s  (%.1f s)" % (number, "PASS" if ok else "FAIL", detail,
                                               time.perf_counter() - started)
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


# -- 1: surgery families ----------------------------------------------------------------


def random_host(rng, dim, v, perp_needed, floor):
    """Polyline whose height along ``v`` stays above ``floor`` and whose perpendicular
    arclength exceeds ``perp_needed``."""
    basis = np.linalg.qr(np.column_stack([v, rng.normal(size=(dim, dim - 1))]))[0][:, 1:]
    pts = [floor + rng.uniform(0.0, 3.0)]
    perp = [np.zeros(dim - 1)]
    total = 0.0
    while total <= perp_needed * 1.05:
        step = rng.normal(size=dim - 1) * rng.uniform(0.1, 4.0)
        perp.append(perp[-1] + step)
        total += float(np.linalg.norm(step))
        pts.append(max(floor, pts[-1] + rng.normal(scale=2.0)))
    values = np.array(pts)[:, None] * v + np.array(perp) @ basis.T
    return PiecewiseCurve(np.cumsum(rng.uniform(0.5, 2.0, size=len(values))), values)


def test_criterion_1_surgery_lemma():
    started = time.perf_counter()
    rng = np.random.default_rng(101)
    worst_extra, worst_peak, worst_outside, options = -np.inf, np.inf, 0.0, 0
    for _ in range(1000):
        dim = int(rng.integers(2, 5))
        n = int(rng.integers(1, 4))
        v = rng.normal(size=dim)
        v /= np.linalg.norm(v)
        L = float(rng.uniform(0.5, 20.0))
        d = float(rng.normal(scale=5.0))
        host = random_host(rng, dim, v, n * n * L, d)
        fam = build_surgery_family(host, v, (host.start, host.end), L, d, n)
        peak = d + np.sqrt(L / 2.0)
        for opt in fam.options:
            out = apply_surgeries(host, picks=[opt])
            worst_extra = max(worst_extra, out.length() - host.length())
            worst_peak = min(worst_peak, float(np.max(opt.replacement.values @ v)) - peak)
            outside = (host.params <= opt.start) | (host.params >= opt.end)
            worst_outside = max(worst_outside, float(np.max(np.abs(
                out(host.params[outside]) - host.values[outside]))))
            options += 1
    ok = worst_extra <= 1 + 1e-9 and worst_peak >= -1e-9 and worst_outside == 0.0
    ok &= time.perf_counter() - started < 60
    record(1, ok, "%d options on 1000 hosts, max lengthening %.6f, min peak margin %.3g, "
           "max change outside %.3g" % (options, worst_extra, worst_peak, worst_outside), started)
    assert ok


# -- 2: simultaneous selection ------------------------------------------------------------


LINE = PiecewiseCurve([0.0, 100.0], [[0.0, 0.0], [100.0, 0.0]])


def random_family(rng, n):
    if rng.uniform() < 0.5:
        pts = np.sort(rng.uniform(0.0, 100.0, size=2 * n * n))
        spans = [(pts[2 * k], pts[2 * k + 1]) for k in range(n * n)]
    else:
        # interleaved grid: equal windows with a random phase
        width = 100.0 / (n * n + 1)
        phase = rng.uniform(0.0, width)
        spans = [(phase + k * width, phase + (k + 1) * width) for k in range(n * n)]
    return SurgeryFamily([PathSurgery(a, b, LINE.restrict(a, b)) for a, b in spans])


def exhaustive(families, locations):
    for combo in itertools.product(*[f.options for f in families]):
        if any(a.meets(b) for a, b in itertools.combinations(combo, 2)):
            continue
        if any(o.contains(t) for o in combo for t in locations):
            continue
        return True
    return False


def test_criterion_2_simultaneous_selection():
    started = time.perf_counter()
    rng = np.random.default_rng(202)
    failures, count_violations, disagreements, checked = 0, 0, 0, 0
    for _ in range(500):
        n = int(rng.integers(2, 5))
        m2 = int(rng.integers(1, n + 1))
        m1 = int(rng.integers(0, n - m2 + 1))
        families = [random_family(rng, n) for _ in range(m2)]
        locations = [float(t) for t in rng.uniform(0.0, 100.0, size=m1)]
        loops = [loop_surgery(LINE, t, [[t, 1.0]]) for t in locations]
        try:
            sel = select_simultaneous(LINE, loops, families, n)
            success = True
            picks = sel.picks
            valid = (not any(a.meets(b) for a, b in itertools.combinations(picks, 2))
                     and not any(p.contains(t) for p in picks for t in locations))
            count_violations += not valid
            count_violations += sum(c < 2 * (n - i)
                                    for i, c in enumerate(sel.survivor_counts, start=1))
        except SelectionImpossible:
            success = False
            failures += 1
        if (n * n) ** m2 <= 9 ** 3:
            checked += 1
            disagreements += success != exhaustive(families, locations)
    ok = failures == 0 and count_violations == 0 and disagreements == 0
    ok &= time.perf_counter() - started < 60
    record(2, ok, "500 instances, %d failed, %d count violations, %d of %d brute-force "
           "disagreements" % (failures, count_violations, disagreements, checked), started)
    assert ok


# -- 3: distortion certificates ---------------------------------------------------------


def certificate_margin(group, metric, rng, samples):
    """Smallest ``|exp(t D) h| / (C a^s |h|)`` over samples with ``s >= T``."""
    cert = uniform_certificate(metric)
    worst, seen = np.inf, 0
    while seen < samples:
        i = int(rng.integers(group.n))
        v = rng.normal(scale=6.0, size=group.rank)
        t = float(group.roots[i] @ v)
        s = t / float(metric.rates[i])
        if s < cert.T:
            continue
        f = group.factors[i]
        h = rng.normal(size=f.dim)
        img = expm(t * f.derivation) @ h
        lhs = cert.C * cert.a ** s * metric.factor_norm(i, h)
        worst = min(worst, metric.factor_norm(i, img) / lhs)
        seen += 1
    return worst


def test_criterion_3_distortion_certificates():
    started = time.perf_counter()
    rng = np.random.default_rng(303)
    margins = {}
    for name in ("example", "jordan"):
        group, metric = bundled(name + "_group", name + "_metric")
        margins[name] = certificate_margin(group, metric, rng, 10_000)
    jg, jm = bundled("jordan_group", "jordan_metric")
    T = factor_certificate(jm, 0).T
    root = brentq(lambda t: np.exp(t / 2.0) - 1.0 - t, 0.5, 10.0, xtol=1e-14)
    ok = all(m >= 1 - 1e-9 for m in margins.values()) and abs(T - root) <= 1e-8
    ok &= abs(block_threshold(1.0, 1.0, 2) - root) <= 1e-8
    ok &= time.perf_counter() - started < 60
    record(3, ok, "min ratio example %.6f, jordan %.6f; T %.12f vs root %.12f"
           % (margins["example"], margins["jordan"], T, root), started)
    assert ok


# -- 4: bounded additive error between metrics ------------------------------------------


def test_criterion_4_metric_comparison():
    started = time.perf_counter()
    group, m1 = bundled("rank2_group", "rank2_identity")
    m2 = block_metric(group, base_gram=np.diag([4.0, 1.0]))
    seps = [5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0, 50.0]
    rep = compare_metrics(group, m1, m2, seps, 20, seed=404, budget=3)
    up, low = rep.slopes["upper_residual"], rep.slopes["lower_residual"]
    ok = len(rep.rows) == 200 and abs(up) <= 0.02 and abs(low) <= 0.02
    ok &= time.perf_counter() - started < 600
    record(4, ok, "200 pairs, stretch %s, residual slopes upper %.4g lower %.4g, "
           "max residuals %.4g / %.4g" % (tuple(round(s, 6) for s in rep.stretch), up, low,
                                          rep.constants["stretch_upper"],
                                          rep.constants["stretch_lower"]), started)
    assert ok


# -- 5: box paths are rough geodesics -----------------------------------------------------


def test_criterion_5_rho_against_distance():
    started = time.perf_counter()
    group, metric = bundled("rank2_group", "rank2_identity")
    seps = [5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0, 50.0]
    rep = rho_vs_distance(group, metric, seps, 5, seed=505, budget=3)
    exact_lower = all(r["rho"] >= r["d_lower"] for r in rep.rows)
    ok = exact_lower and abs(rep.gap_slope) <= 0.02
    ok &= time.perf_counter() - started < 600
    gaps = [r["gap_upper"] for r in rep.rows]
    record(5, ok, "%d pairs, rho >= lower bound on all: %s, gap slope %.4g, gap range "
           "[%.3f, %.3f]" % (len(rep.rows), exact_lower, rep.gap_slope, min(gaps), max(gaps)),
           started)
    assert ok


# -- 6: distance between metrics ----------------------------------------------------------


def test_criterion_6_delta():
    started = time.perf_counter()
    group, m1 = bundled("rank2_group", "rank2_identity")
    m2 = block_metric(group, base_gram=np.diag([4.0, 1.0]))
    closed = delta_distance(m1, m2)
    rep = delta_vs_empirical(group, m1, m2, separation=30.0, directions=16, budget=3)
    rng = np.random.default_rng(606)

    def spd():
        A = rng.normal(size=(2, 2))
        return A @ A.T + 0.1 * np.eye(2)

    worst = -np.inf
    for _ in range(100):
        a, b, c = (block_metric(group, base_gram=spd()) for _ in range(3))
        worst = max(worst, delta_distance(a, c) - delta_distance(a, b) - delta_distance(b, c))
    ok = abs(closed - np.log(2.0)) <= 1e-9 and rep.discrepancy <= 0.10 and worst <= 1e-9
    ok &= time.perf_counter() - started < 300
    record(6, ok, "closed form %.12f (log 2 = %.12f), empirical %.6f (%.2f%% off), "
           "max triangle excess %.3g" % (closed, np.log(2.0), rep.empirical,
                                         100 * rep.discrepancy, worst), started)
    assert ok


# -- 7: the two symmetries ---------------------------------------------------------------


def test_criterion_7_symmetries():
    started = time.perf_counter()
    group, metric = bundled("example_group", "example_metric")
    sigma2 = qi_maps.load_qi(DATA / "sigma2.json", group)
    sigma1 = qi_maps.load_qi(DATA / "sigma1.json", group)
    rep2 = qi_maps.test_rough_isometry(sigma2, group, metric, [5.0, 10.0, 15.0, 20.0, 25.0],
                                       20, seed=707, budget=3)
    random_rows = [r for r in rep2.rows if r["series"] == "random"]
    worst2 = max(r["relative"] for r in random_rows)
    rep1 = qi_maps.test_rough_isometry(sigma1, group, metric, [5.0, 10.0, 20.0, 30.0, 40.0],
                                       0, seed=707, budget=3)
    e1 = rep1.slopes.get("e1", float("nan"))
    ok2 = rep2.verdict == "ROUGH_ISOMETRY" and len(random_rows) == 100 and worst2 <= 0.02
    # e1 lengths halve under this base matrix, so the difference is exactly s / 2
    ok1 = rep1.verdict == "NOT_ROUGH_ISOMETRY" and "e1" in rep1.witness and e1 >= 0.5 - 1e-9
    ok = ok1 and ok2 and time.perf_counter() - started < 600
    record(7, ok, "sigma2 %s on %d pairs, max relative difference %.3g; sigma1 %s, "
           "witness %s, e1 slope %.9f" % (rep2.verdict, len(random_rows), worst2,
                                          rep1.verdict, ",".join(rep1.witness), e1), started)
    assert ok


# -- 8: the pipeline ------------------------------------------------------------------


def test_criterion_8_pipeline():
    started = time.perf_counter()
    group, metric = bundled("rank2_group", "rank2_identity")
    constants = compute_constants(group, metric)
    pairs = sample_pairs(group, metric, [5.0, 10.0, 15.0, 20.0, 25.0], 10, seed=808)
    converged = certified_converged = certified = 0
    unnamed, bound_violations, replay_failures, hsv_failures = 0, 0, 0, 0
    reasons = {}
    for _, p, q in pairs:
        est = estimate_distance(p, q, group, metric, budget=4)
        converged += est.converged
        try:
            box, trail = make_hsv(est.path, p, q, group, metric, constants, split=True)
        except CertificationFailure as exc:
            unnamed += not exc.inequality
            reasons[exc.inequality] = reasons.get(exc.inequality, 0) + 1
            continue
        certified += 1
        certified_converged += est.converged
        bound = path_length(est.path, metric, rtol=1e-6, split=True) + constants.K + 1e-6
        bound_violations += box.length > bound
        hsv_failures += not is_hsv(box, half_spaces(p, q, group, metric))
        replay_failures += not replays_identically(json.loads(json.dumps(trail)))
    rate = certified_converged / converged if converged else 0.0
    ok = (rate >= 0.8 and unnamed == 0 and bound_violations == 0 and replay_failures == 0
          and hsv_failures == 0 and time.perf_counter() - started < 900)
    record(8, ok, "50 inputs, %d converged, %d certified (%.0f%% of converged), failures %s, "
           "bound violations %d, non-HSV %d, replay mismatches %d"
           % (converged, certified, 100 * rate, reasons or "none", bound_violations,
              hsv_failures, replay_failures), started)
    assert ok


# -- 9: determinism ------------------------------------------------------------------


def cli_runs(tmp_path):
    rank2 = ["--group", "rank2_group", "--metric", "rank2_identity"]
    common = ["--pairs", "2", "--separations", "4,8", "--budget", "2", "--seed", "9"]
    return {
        "validate": ["validate"] + common,
        "halfspaces": ["halfspaces"] + common,
        "rho": ["rho"] + common,
        "geodesic": ["geodesic"] + rank2 + common,
        "compare-metrics": ["compare-metrics"] + rank2 + ["--metric2", "rank2_diag41"] + common,
        "rho-vs-d": ["rho-vs-d"] + rank2 + common,
        "delta": ["delta"] + rank2 + ["--metric2", "rank2_diag41"] + common,
        "qi-test": ["qi-test", "--qi", "sigma2", "--metric", "example_metric", "--pairs", "1",
                    "--separations", "3,5", "--budget", "2", "--seed", "9"],
        "surgery-demo": ["surgery-demo"] + rank2 + common,
    }


def test_criterion_9_determinism(tmp_path):
    started = time.perf_counter()
    mismatched, failed = [], []
    runs = cli_runs(tmp_path)
    trails = None
    for command, argv in list(runs.items()) + [("replay", None)]:
        outputs = []
        for j, threads in enumerate(("1", "1", "4")):
            out = tmp_path / command / str(j)
            out.mkdir(parents=True)
            args = argv if argv is not None else ["replay", "--trail", str(trails), "--seed", "9"]
            code = main(args + ["--threads", threads, "--out", str(out)])
            if code != 0:
                failed.append("%s/%s" % (command, threads))
                continue
            (csv,) = out.glob("*.csv")
            outputs.append((csv.name, csv.read_bytes()))
            if command == "surgery-demo" and j == 0:
                (trails,) = out.glob("*.json")
        if len(set(outputs)) != 1:
            mismatched.append(command)
    ok = not mismatched and not failed
    record(9, ok, "10 commands x (1, 1, 4 threads); mismatched %s, failed %s"
           % (mismatched or "none", failed or "none"), started)
    assert ok
