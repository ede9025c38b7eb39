"""Command-line entry point: ``soltype <command> [options]``."""

import argparse
import json
import os
import sys
from importlib.resources import files

import numpy as np

from . import harness, qi_maps, report
from .boxpath import rho
from .distortion import uniform_certificate
from .group_model import GroupElement, GroupError, load_group, validate
from .hsv_pipeline import CertificationFailure, NoValidConstants, compute_constants, \
    make_hsv, replay
from .splitting_metric import block_metric, load_metric

EXIT_USAGE, EXIT_CONFIG, EXIT_GROUP, EXIT_CERT, EXIT_SYMMETRY, EXIT_REPLAY = 2, 3, 4, 5, 6, 7

COMMANDS = ("validate", "halfspaces", "rho", "geodesic", "compare-metrics", "rho-vs-d",
            "delta", "qi-test", "surgery-demo", "replay")


class ConfigError(ValueError):
    pass


def _resolve(path):
    """A file path, or the name of a bundled data file (with or without ``.json``)."""
    if path is None or os.path.exists(path):
        return path
    name = path if path.endswith(".json") else path + ".json"
    bundled = files("soltype") / "data" / name
    if bundled.is_file():
        return str(bundled)
    raise ConfigError("file not found: %s" % path)


def _element(data):
    return GroupElement(data["nil"], data["base"])


def build_parser():
    ap = argparse.ArgumentParser(prog="soltype", description=__doc__)
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--group", default="example_group",
                    help="group file or bundled name (default: example_group)")
    ap.add_argument("--metric", default=None,
                    help="metric file or bundled name (default: identity Gram)")
    ap.add_argument("--metric2", default=None, help="second metric for compare-metrics and delta")
    ap.add_argument("--qi", default=None, help="quasi-isometry file for qi-test")
    ap.add_argument("--pair", default=None,
                    help='JSON file {"p": {"nil", "base"}, "q": {...}}; default: sampled')
    ap.add_argument("--trail", default=None, help="surgery-demo summary JSON for replay")
    ap.add_argument("--pairs", type=int, default=2, help="pairs per separation (default: 2)")
    ap.add_argument("--separations", default="5,10,20",
                    help="comma-separated separations (default: 5,10,20)")
    ap.add_argument("--seed", type=int, default=0, help="sampling seed (default: 0)")
    ap.add_argument("--out", default="out", help="output directory (default: out)")
    ap.add_argument("--budget", type=int, default=3,
                    help="estimator refinement stages (default: 3)")
    ap.add_argument("--threads", type=int, default=1, help="worker processes (default: 1)")
    return ap


class Context:
    def __init__(self, args):
        self.args = args
        self.group = load_group(_resolve(args.group))
        self.metric = self._metric(args.metric)
        self.separations = [float(s) for s in args.separations.split(",") if s.strip()]
        if not self.separations:
            raise ConfigError("no separations given")

    def _metric(self, path):
        if path is None:
            return block_metric(self.group)
        return load_metric(_resolve(path), self.group)

    def second_metric(self):
        if self.args.metric2 is None:
            raise ConfigError("--metric2 is required for %s" % self.args.command)
        return self._metric(self.args.metric2)

    def pair(self):
        if self.args.pair:
            with open(_resolve(self.args.pair)) as fh:
                data = json.load(fh)
            return _element(data["p"]), _element(data["q"])
        _, p, q = harness.sample_pairs(self.group, self.metric, self.separations[:1], 1,
                                       self.args.seed)[0]
        return p, q

    def emit(self, rows, plot, summary, columns=None):
        summary = dict(summary, group=self.args.group, metric=self.args.metric,
                       separations=self.separations, pairs=self.args.pairs,
                       budget=self.args.budget)
        return report.emit(self.args.out, self.args.command.replace("-", "_"), self.args.seed,
                           rows, plot, summary, columns)


def _pair_summary(p, q):
    return {"p": {"nil": p.nil, "base": p.base}, "q": {"nil": q.nil, "base": q.base}}


def cmd_validate(ctx):
    rep = validate(ctx.group)
    cert = uniform_certificate(ctx.metric)
    rows = [{"factor": i, "dim": f.dim, "step": rep.steps[i], "scale": rep.scales[i],
             "root": rep.group.roots[i], "rate": float(ctx.metric.rates[i]),
             "C": c.C, "T": c.T, "a": c.a, "method": c.method}
            for i, (f, c) in enumerate(zip(ctx.group.factors, cert.factors))]
    summary = {"status": "OK", "split_flag": bool(ctx.metric.split_flag),
               "normalized_roots": rep.group.roots, "certificate": cert.as_dict()}
    try:
        summary["pipeline"] = compute_constants(ctx.group, ctx.metric, cert).__dict__
    except NoValidConstants as exc:
        summary["pipeline"] = str(exc)
    roots = rep.group.roots
    plot = report.Plot("normalized roots", "first coordinate", "second coordinate", equal=True)
    plot.scatter(roots[:, 0], roots[:, 1 % roots.shape[1]], "roots")
    ctx.emit(rows, plot, summary)
    print("OK: %d factors, rank %d, C=%.6g T=%.6g a=%.6g"
          % (ctx.group.n, ctx.group.rank, cert.C, cert.T, cert.a))


def cmd_halfspaces(ctx):
    p, q = ctx.pair()
    rows = harness.half_space_summary(p, q, ctx.group, ctx.metric)
    for r, root in zip(rows, ctx.group.roots):
        r["root"] = root
    plot = report.Plot("half-space thresholds", "factor", "threshold")
    plot.scatter([r["factor"] for r in rows],
                 [r["threshold"] if np.isfinite(r["threshold"]) else np.nan for r in rows],
                 "threshold")
    ctx.emit(rows, plot, _pair_summary(p, q))
    for r in rows:
        print("factor %d: alpha >= %.12g" % (r["factor"], r["threshold"]))


def _polyline_plot(title, base):
    plot = report.Plot(title, "base 1", "base 2", equal=True)
    plot.line(base[:, 0], base[:, 1 % base.shape[1]], "base projection")
    return plot


def cmd_rho(ctx):
    p, q = ctx.pair()
    length, box = rho(p, q, ctx.group, ctx.metric)
    rows = [dict(rec, segment=j) for j, rec in enumerate(box.records())]
    summary = dict(_pair_summary(p, q), rho=length, order=list(box.order),
                   tour_length=box.tour_length, jump_costs=list(box.jump_costs),
                   upper_bound=box.upper_bound)
    ctx.emit(rows, _polyline_plot("box geodesic", box.path.base), summary,
             ["segment", "type", "factor", "start", "end"])
    print("rho = %.12g" % length)


def cmd_geodesic(ctx):
    p, q = ctx.pair()
    est = harness.estimate_distance(p, q, ctx.group, ctx.metric, ctx.args.budget)
    rows = [{"node": j, "point": x} for j, x in enumerate(est.path.points)]
    summary = dict(_pair_summary(p, q), upper=est.upper, lower=est.lower, method=est.method,
                   nodes=est.nodes, stages=est.stages, converged=est.converged,
                   history=list(est.history))
    ctx.emit(rows, _polyline_plot("optimized path", est.path.base), summary)
    print("distance in [%.12g, %.12g]" % (est.lower, est.upper))


def cmd_compare_metrics(ctx):
    m2 = ctx.second_metric()
    rep = harness.compare_metrics(ctx.group, ctx.metric, m2, ctx.separations, ctx.args.pairs,
                                  ctx.args.seed, ctx.args.budget, ctx.args.threads)
    sep = [r["separation"] for r in rep.rows]
    plot = report.Plot("additive residuals", "separation", "residual")
    plot.scatter(sep, [r["upper_residual"] for r in rep.rows], "upper", fit=True)
    plot.scatter(sep, [r["lower_residual"] for r in rep.rows], "lower", fit=True)
    ctx.emit(rep.rows, plot, {"stretch": rep.stretch, "eigenvalues": rep.eigenvalues,
                              "constants": rep.constants, "slopes": rep.slopes})
    print("residual slopes: " + ", ".join("%s=%.4g" % kv for kv in sorted(rep.slopes.items())))


def cmd_rho_vs_d(ctx):
    rep = harness.rho_vs_distance(ctx.group, ctx.metric, ctx.separations, ctx.args.pairs,
                                  ctx.args.seed, ctx.args.budget, ctx.args.threads)
    plot = report.Plot("rho minus distance estimate", "separation", "gap")
    plot.scatter([r["separation"] for r in rep.rows], [r["gap_upper"] for r in rep.rows],
                 "rho - d", fit=True)
    ctx.emit(rep.rows, plot, {"gap_slope": rep.gap_slope, "lower_ok": rep.lower_ok})
    print("gap slope %.4g, rho above lower bound: %s" % (rep.gap_slope, rep.lower_ok))


def cmd_delta(ctx):
    m2 = ctx.second_metric()
    sep = ctx.separations[-1]
    rep = harness.delta_vs_empirical(ctx.group, ctx.metric, m2, sep, 4 * ctx.args.pairs,
                                     ctx.args.budget, ctx.args.threads)
    plot = report.Plot("distance ratios", "sample", "d2 / d1")
    plot.scatter(list(range(len(rep.rows))), [r["ratio"] for r in rep.rows], "ratio")
    ctx.emit(rep.rows, plot, {"closed_form": rep.closed_form, "empirical": rep.empirical,
                              "relative_discrepancy": rep.discrepancy, "separation": sep})
    print("closed form %.12g, empirical %.6g" % (rep.closed_form, rep.empirical))


def cmd_qi_test(ctx):
    if ctx.args.qi is None:
        raise ConfigError("--qi is required for qi-test")
    qi = qi_maps.load_qi(_resolve(ctx.args.qi), ctx.group)
    rep = qi_maps.test_rough_isometry(qi, ctx.group, ctx.metric, ctx.separations,
                                      ctx.args.pairs, ctx.args.seed, ctx.args.budget,
                                      ctx.args.threads)
    plot = report.Plot("distance change under the map", "separation", "|d(f p, f q) - d(p, q)|")
    for series in rep.slopes:
        sub = [r for r in rep.rows if r["series"] == series]
        plot.scatter([r["separation"] for r in sub], [r["difference"] for r in sub], series,
                     fit=True)
    ctx.emit(rep.rows, plot, {"verdict": rep.verdict, "slopes": rep.slopes,
                              "witness": list(rep.witness),
                              "max_relative_difference": rep.max_relative_difference})
    print("%s%s" % (rep.verdict, " (witness %s)" % ",".join(rep.witness) if rep.witness else ""))


def _surgery_task(args):
    group, metric, constants, p, q, budget = args
    est = harness.estimate_distance(p, q, group, metric, budget)
    try:
        box, trail = make_hsv(est.path, p, q, group, metric, constants, split=True)
        return {"certified": True, "input": est.upper, "output": box.length,
                "failure": ""}, trail
    except CertificationFailure as exc:
        return {"certified": False, "input": est.upper, "output": float("nan"),
                "failure": exc.inequality}, None


def cmd_surgery_demo(ctx):
    constants = compute_constants(ctx.group, ctx.metric)
    pairs = harness.sample_pairs(ctx.group, ctx.metric, ctx.separations, ctx.args.pairs,
                                 ctx.args.seed)
    tasks = [(ctx.group, ctx.metric, constants, p, q, ctx.args.budget) for _, p, q in pairs]
    results = harness.parallel_map(_surgery_task, tasks, ctx.args.threads)
    rows, trails = [], []
    for j, ((s, _, _), (row, trail)) in enumerate(zip(pairs, results)):
        rows.append(dict(row, pair=j, separation=s, bound=row["input"] + constants.K))
        trails.append(trail)
    plot = report.Plot("surgery output against input", "input length", "output length")
    ok = [r for r in rows if r["certified"]]
    plot.scatter([r["input"] for r in ok], [r["output"] for r in ok], "certified", fit=True)
    ctx.emit(rows, plot, {"constants": constants.__dict__, "trails": trails},
             ["pair", "separation", "certified", "input", "output", "bound", "failure"])
    print("certified %d of %d (K = %.6g)" % (len(ok), len(rows), constants.K))


def cmd_replay(ctx):
    if ctx.args.trail is None:
        raise ConfigError("--trail is required for replay")
    with open(_resolve(ctx.args.trail)) as fh:
        data = json.load(fh)
    trails = data["trails"] if "trails" in data else [data]
    rows = []
    for j, trail in enumerate(trails):
        if trail is None:
            rows.append({"pair": j, "replayed": False, "identical": False, "length": ""})
            continue
        box, same = replay(trail)
        rows.append({"pair": j, "replayed": True, "identical": same, "length": box.length})
    plot = report.Plot("replayed lengths", "pair", "length")
    done = [r for r in rows if r["replayed"]]
    plot.scatter([r["pair"] for r in done], [r["length"] for r in done], "replayed")
    ctx.emit(rows, plot, {"identical": all(r["identical"] for r in done)})
    bad = [r["pair"] for r in done if not r["identical"]]
    if bad:
        print("replay mismatch on pairs %s" % bad)
        return EXIT_REPLAY
    print("replayed %d trails identically" % len(done))


HANDLERS = {name: globals()["cmd_" + name.replace("-", "_")] for name in COMMANDS}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        ctx = Context(args)
        return HANDLERS[args.command](ctx) or 0
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    except qi_maps.InvalidSymmetry as exc:
        print("invalid symmetry: %s" % exc, file=sys.stderr)
        return EXIT_SYMMETRY
    except GroupError as exc:
        print("invalid group: %s" % exc, file=sys.stderr)
        return EXIT_GROUP
    except CertificationFailure as exc:
        print("certification failure: %s" % exc, file=sys.stderr)
        return EXIT_CERT
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
