"""Config-driven experiment runner.

Subcommands:

* ``estimate``  -- run estimator variants over seeded noise/attack scenarios;
  writes per-run and aggregate CSVs (RMSE, precision, recall, F1, runtime).
* ``vulnmap``   -- per-line-direction vulnerability indices; CSV always, a
  GeoJSON map when the case carries coordinates, and an SVG summary chart.
* ``boundary``  -- zonal-attack containment demo: per-bus errors of the
  proposed pipeline vs the Newton baseline, with boundary certificates.
* ``bagvi``     -- tree-decomposition bag vulnerability indices.

Every run writes a manifest listing the produced artifacts with SHA-256
hashes.  Identical configs and seeds produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import hashlib
import json
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from .attacks import (AttackSpec, NoiseModel, attacked_region_rows, f1,
                      generate, rmse)
from .estimation import Step1Config, run_pipeline
from .grid import load_case, parse_case
from .newton import NlsConfig, newton_se
from .sensing import (Measurement, MeasurementProfile, build_sensing_model,
                      lift_state, make_profile)
from .vuln import (bag_vi, build_partition, classify, line_vi,
                   local_incoherence, lower_eigenvalue, report_csv_rows,
                   report_geojson, tree_decompose, validate_decomposition,
                   vi_model)

_BUNDLED = {"case14", "case30", "case118", "case14.json", "case30.json",
            "case118.json"}


class ConfigError(ValueError):
    pass


def _check_keys(section, allowed, where):
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown config keys in {where}: {sorted(unknown)}")


def _load_config(path):
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc


def _resolve_case(name):
    if name in _BUNDLED or (name + ".m") in {b + ".m" for b in _BUNDLED}:
        fname = name if name.endswith(".json") else name + ".m"
        text = resources.files("gridshield.cases").joinpath(fname).read_text()
        fmt = "json_grid" if fname.endswith(".json") else "matpower_subset"
        return parse_case(text, fmt)
    return load_case(name)


def _resolve_profile(grid, spec):
    if spec is None or isinstance(spec, str):
        return make_profile(grid, spec or "full")
    if isinstance(spec, dict) and "preset" in spec:
        _check_keys(spec, {"preset"}, "profile")
        return make_profile(grid, spec["preset"])
    if isinstance(spec, dict) and "measurements" in spec:
        _check_keys(spec, {"measurements"}, "profile")
        rows = [Measurement(kind, int(obj), direction)
                for kind, obj, direction in spec["measurements"]]
        return MeasurementProfile(rows)
    raise ConfigError("profile must be a preset name or a measurement list")


def _seed_list(cfg, override):
    if override is not None:
        return [int(override)]
    seeds = cfg.get("seeds", {"base": 0, "count": 1})
    if isinstance(seeds, list):
        return [int(s) for s in seeds]
    _check_keys(seeds, {"base", "count"}, "seeds")
    base, count = int(seeds.get("base", 0)), int(seeds.get("count", 1))
    return list(range(base, base + count))


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        if np.isnan(x):
            return "nan"
        if np.isinf(x):
            return "inf"
        return f"{float(x):.12g}"
    return str(x)


def _write_csv(path, rows):
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _manifest(out_dir, artifacts, ok):
    entries = []
    for p in sorted(artifacts):
        digest = hashlib.sha256(Path(p).read_bytes()).hexdigest()
        entries.append({"path": str(Path(p).name), "sha256": digest})
    doc = {"status": "ok" if ok else "failed", "artifacts": entries}
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def _attack_from_config(section, model, seed):
    if section is None or section.get("kind", "none") == "none":
        return AttackSpec(kind="none", seed=seed)
    _check_keys(section, {"kind", "n_lines", "pct_measurements", "zone",
                          "secure_rows", "strict", "magnitude_range"},
                "attack")
    kind = section["kind"]
    lo, hi = section.get("magnitude_range", (3.75, 4.25))
    if kind == "scattered":
        if "pct_measurements" in section:
            per_line = max(1, sum(1 for m in model.rows
                                  if m.kind in ("pflow", "qflow")
                                  and m.obj == 0))
            n_lines = max(1, round(section["pct_measurements"] / 100.0
                                   * model.n_m / per_line))
        else:
            n_lines = int(section.get("n_lines", 1))
        return AttackSpec(kind="scattered", n_lines=n_lines,
                          magnitude_range=(lo, hi), seed=seed)
    if kind == "zonal":
        return AttackSpec(kind="zonal",
                          zone=frozenset(int(k) for k in section["zone"]),
                          secure_rows=frozenset(section.get("secure_rows", ())),
                          strict=bool(section.get("strict", False)),
                          magnitude_range=(lo, hi), seed=seed)
    raise ConfigError(f"unknown attack kind {kind!r}")


ESTIMATE_KEYS = {"case", "profile", "seeds", "estimators", "noise", "attack",
                 "bdd_threshold", "lambda", "step2", "lambda2",
                 "include_newton", "newton", "repeat"}


def run_estimation(cfg, out_dir, seed_override=None, threads=1):
    _check_keys(cfg, ESTIMATE_KEYS, "estimate config")
    grid, state = _resolve_case(cfg["case"])
    profile = _resolve_profile(grid, cfg.get("profile"))
    model = build_sensing_model(grid, profile)
    v_true = np.asarray(state.vm) * np.exp(1j * np.asarray(state.va))

    noise_cfg = cfg.get("noise", {})
    _check_keys(noise_cfg, {"sigma_vmag", "sigma_other"}, "noise")
    variants = cfg.get("estimators", ["l2l1_soc"])
    seeds = _seed_list(cfg, seed_override)
    include_newton = bool(cfg.get("include_newton", False))
    newton_cfg = cfg.get("newton", {})
    _check_keys(newton_cfg, {"max_bdd_rounds", "residual_bdd_threshold"},
                "newton")

    def one(seed):
        noise = NoiseModel(sigma_vmag=noise_cfg.get("sigma_vmag", 1e-5),
                           sigma_other=noise_cfg.get("sigma_other", 0.005),
                           seed=seed)
        attack = _attack_from_config(cfg.get("attack"), model,
                                     seed ^ 0x9E3779B9)
        scenario = generate(model, state, noise, attack)
        rows = []
        for variant in variants:
            t0 = time.perf_counter()
            s1 = Step1Config(variant=variant,
                             lambda_=cfg.get("lambda"),
                             bdd_threshold=cfg.get("bdd_threshold", 0.01))
            try:
                res = run_pipeline(model, scenario.y, s1,
                                   step2_variant=cfg.get("step2", "ls_closed_form"),
                                   lambda2=cfg.get("lambda2", 0.1))
                err = rmse(v_true, res.v_hat)
                prec, rec, f1s = f1(scenario.j_true, res.detected_support)
                status = res.solver_status
            except Exception as exc:  # scenario failure: log, keep going
                err = prec = rec = f1s = float("nan")
                status = f"error:{type(exc).__name__}"
            rows.append([seed, variant, err, prec, rec, f1s,
                         time.perf_counter() - t0, status])
        if include_newton:
            t0 = time.perf_counter()
            ncfg = NlsConfig(
                max_bdd_rounds=int(newton_cfg.get("max_bdd_rounds", 1)),
                residual_bdd_threshold=newton_cfg.get("residual_bdd_threshold"))
            vm_h, va_h, conv, removed = newton_se(model, scenario.y, ncfg)
            err = rmse(v_true, vm_h * np.exp(1j * va_h))
            det = set(int(i) for i in removed)
            prec, rec, f1s = f1(scenario.j_true, det)
            rows.append([seed, "newton_nls", err, prec, rec, f1s,
                         time.perf_counter() - t0,
                         "converged" if conv else "not_converged"])
        return rows

    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as ex:
            per_seed = list(ex.map(one, seeds))
    else:
        per_seed = [one(s) for s in seeds]

    header = ["seed", "estimator", "rmse", "precision", "recall", "f1",
              "runtime_s", "status"]
    rows = [header] + [r for batch in per_seed for r in batch]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = out / "estimation_runs.csv"
    _write_csv(runs, rows)

    agg_rows = [["estimator", "n_runs", "mean_rmse", "mean_precision",
                 "mean_recall", "mean_f1", "mean_runtime_s", "n_failed"]]
    names = list(dict.fromkeys(r[1] for r in rows[1:]))
    ok = True
    for name in names:
        sel = [r for r in rows[1:] if r[1] == name]
        vals = np.array([[r[2], r[3], r[4], r[5], r[6]] for r in sel],
                        dtype=float)
        failed = int(np.sum(~np.isfinite(vals[:, 0])))
        ok &= failed == 0
        with np.errstate(invalid="ignore"):
            means = np.nanmean(vals, axis=0)
        agg_rows.append([name, len(sel), *means, failed])
    agg = out / "estimation_aggregate.csv"
    _write_csv(agg, agg_rows)
    manifest = _manifest(out, [runs, agg], ok)
    return [runs, agg, manifest], ok


VULNMAP_KEYS = {"case", "profile", "vi", "seeds"}


def run_vulnerability(cfg, out_dir, threads=1):
    _check_keys(cfg, VULNMAP_KEYS, "vulnmap config")
    grid, state = _resolve_case(cfg["case"])
    profile = _resolve_profile(grid, cfg.get("profile"))
    model = vi_model(grid, profile)
    vi_cfg = cfg.get("vi", {})
    _check_keys(vi_cfg, {"variant", "method", "enum_cap"}, "vi")
    variant = vi_cfg.get("variant", "lp")
    method = vi_cfg.get("method", "auto")
    enum_cap = int(vi_cfg.get("enum_cap", 12))
    x_lifted = lift_state(model, state) if variant in ("socp", "both") else None

    jobs = [(l, d) for l in range(grid.n_branches) for d in ("fwd", "rev")]

    def one(job):
        l, d = job
        if variant == "both":
            r = line_vi(model, l, d, "lp", method=method, enum_cap=enum_cap)
            rs = line_vi(model, l, d, "socp", x_lifted=x_lifted,
                         method=method, enum_cap=enum_cap)
            r.alpha_socp = rs.alpha_socp
            return (job, r)
        if variant == "socp":
            return (job, line_vi(model, l, d, "socp", x_lifted=x_lifted,
                                 method=method, enum_cap=enum_cap))
        return (job, line_vi(model, l, d, "lp", method=method,
                             enum_cap=enum_cap))

    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as ex:
            results = dict(ex.map(one, jobs))
    else:
        results = dict(one(j) for j in jobs)

    report = classify(grid, results)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    csv_path = out / "vulnerability.csv"
    _write_csv(csv_path, report_csv_rows(report))
    artifacts.append(csv_path)

    summary = out / "summary.csv"
    _write_csv(summary, [["v_line_fraction", "c_line_fraction",
                          "c_bus_fraction", "mean_critical_index"],
                         [report.fractions["v_line"],
                          report.fractions["c_line"],
                          report.fractions["c_bus"],
                          report.fractions["mean_critical_index"]]])
    artifacts.append(summary)

    geo = report_geojson(report)
    if geo is not None:
        geo_path = out / "vulnerability.geojson"
        geo_path.write_text(json.dumps(geo, indent=1, sort_keys=True) + "\n")
        artifacts.append(geo_path)
    else:
        print("note: case has no coordinates; GeoJSON skipped", file=sys.stderr)

    svg_path = out / "summary.svg"
    svg_path.write_text(_fractions_svg(report.fractions))
    artifacts.append(svg_path)
    manifest = _manifest(out, artifacts, True)
    return artifacts + [manifest], True


def _fractions_svg(fractions):
    labels = ["V-lines", "C-lines", "C-buses"]
    vals = [fractions["v_line"], fractions["c_line"], fractions["c_bus"]]
    width, height, pad = 360, 220, 36
    bar_w = (width - 2 * pad) / len(vals)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}">',
             f'<text x="{width/2:.0f}" y="18" text-anchor="middle" '
             'font-size="13">fraction vulnerable / critical</text>']
    for k, (lab, v) in enumerate(zip(labels, vals)):
        h = (height - 2 * pad) * v
        x = pad + k * bar_w + 6
        y = height - pad - h
        parts.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w - 12:.1f}" '
                     f'height="{h:.1f}" fill="#d62728"/>')
        parts.append(f'<text x="{x + (bar_w - 12) / 2:.1f}" '
                     f'y="{height - pad + 16}" text-anchor="middle" '
                     f'font-size="12">{lab}</text>')
        parts.append(f'<text x="{x + (bar_w - 12) / 2:.1f}" y="{y - 4:.1f}" '
                     f'text-anchor="middle" font-size="11">{v:.3f}</text>')
    parts.append(f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" '
                 f'y2="{height - pad}" stroke="black"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


BOUNDARY_KEYS = {"case", "profile", "zone", "noise", "seeds", "estimator",
                 "flag_threshold", "strict"}


def run_boundary_demo(cfg, out_dir, seed_override=None):
    _check_keys(cfg, BOUNDARY_KEYS, "boundary config")
    grid, state = _resolve_case(cfg["case"])
    profile = _resolve_profile(grid, cfg.get("profile"))
    model = build_sensing_model(grid, profile)
    vmodel = vi_model(grid, profile)
    v_true = np.asarray(state.vm) * np.exp(1j * np.asarray(state.va))
    zone = frozenset(int(k) for k in cfg["zone"])
    seeds = _seed_list(cfg, seed_override)
    noise_cfg = cfg.get("noise", {})
    _check_keys(noise_cfg, {"sigma_vmag", "sigma_other"}, "noise")
    thr = float(cfg.get("flag_threshold", 0.002))

    partition = build_partition(model, zone)
    attacked = partition.attacked_buses
    alphas = {}
    for l in sorted(partition.lines_at_bi):
        br = grid.branches[l]
        d = "fwd" if br.from_bus in attacked else "rev"
        alphas[l] = line_vi(vmodel, l, d, "lp").alpha
    certified = bool(alphas) and all(a < 1.0 for a in alphas.values())
    c_min = lower_eigenvalue(model, partition)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [["seed", "bus", "region", "err_proposed", "err_newton",
             "flag_proposed", "flag_newton"]]
    region = {}
    for k in range(grid.n_buses):
        if k in partition.attacked_buses:
            region[k] = "attacked"
        elif k in partition.inner_boundary:
            region[k] = "inner"
        elif k in partition.outer_boundary:
            region[k] = "outer"
        else:
            region[k] = "safe"

    for seed in seeds:
        noise = NoiseModel(sigma_vmag=noise_cfg.get("sigma_vmag", 0.0),
                           sigma_other=noise_cfg.get("sigma_other", 0.0),
                           seed=seed)
        attack = AttackSpec(kind="zonal", zone=zone,
                            strict=bool(cfg.get("strict", False)),
                            seed=seed ^ 0x9E3779B9)
        scenario = generate(model, state, noise, attack)
        res = run_pipeline(model, scenario.y,
                           Step1Config(variant=cfg.get("estimator", "l1")))
        vm_h, va_h, _, _ = newton_se(model, scenario.y, NlsConfig())
        v_newton = vm_h * np.exp(1j * va_h)
        for k in range(grid.n_buses):
            ep = abs(v_true[k] - res.v_hat[k])
            en = abs(v_true[k] - v_newton[k])
            rows.append([seed, k, region[k], ep, en,
                         int(ep > thr), int(en > thr)])

    per_bus = out / "boundary_errors.csv"
    _write_csv(per_bus, rows)
    cert = out / "certificates.csv"
    _write_csv(cert, [["certified", "c_min", "n_boundary_lines",
                       "max_outward_alpha"],
                      [int(certified), c_min, len(alphas),
                       max(alphas.values()) if alphas else 0.0]])
    manifest = _manifest(out, [per_bus, cert], True)
    return [per_bus, cert, manifest], True


BAGVI_KEYS = {"case", "profile", "attacked_buses", "heuristic", "vi", "seeds"}


def run_bagvi(cfg, out_dir):
    _check_keys(cfg, BAGVI_KEYS, "bagvi config")
    grid, state = _resolve_case(cfg["case"])
    profile = _resolve_profile(grid, cfg.get("profile"))
    model = vi_model(grid, profile)
    td = tree_decompose(grid, cfg.get("heuristic", "min_degree"))
    validate_decomposition(grid, td)
    vi_cfg = cfg.get("vi", {})
    _check_keys(vi_cfg, {"variant", "method", "enum_cap"}, "vi")
    variant = vi_cfg.get("variant", "lp")
    x_lifted = lift_state(model, state) if variant == "socp" else None
    results = bag_vi(model, td, set(cfg["attacked_buses"]), variant=variant,
                     x_lifted=x_lifted, method=vi_cfg.get("method", "auto"),
                     enum_cap=int(vi_cfg.get("enum_cap", 12)))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [["link_bag", "infected_bag", "alpha", "variant", "method",
             "n_adhesion", "n_outer_link", "bag_width"]]
    for r in results:
        rows.append([r.link_bag, r.infected_bag, r.alpha, r.variant, r.method,
                     len(r.m_adhesion), len(r.m_outer_link),
                     len(td.bags[r.link_bag]) - 1])
    path = out / "bag_vi.csv"
    _write_csv(path, rows)
    manifest = _manifest(out, [path], True)
    return [path, manifest], True


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="gridshield",
        description="robust grid state estimation and vulnerability analysis")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("estimate", "vulnmap", "boundary", "bagvi"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--seed", type=int, default=None)
    args = parser.parse_args(argv)

    cfg = _load_config(args.config)
    out_dir = args.out or cfg.get("output", "gridshield_out")
    if "output" in cfg:
        cfg = {k: v for k, v in cfg.items() if k != "output"}
    try:
        if args.command == "estimate":
            _, ok = run_estimation(cfg, out_dir, seed_override=args.seed,
                                   threads=args.threads)
        elif args.command == "vulnmap":
            _, ok = run_vulnerability(cfg, out_dir, threads=args.threads)
        elif args.command == "boundary":
            _, ok = run_boundary_demo(cfg, out_dir, seed_override=args.seed)
        else:
            _, ok = run_bagvi(cfg, out_dir)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
