"""nrsim: command-line driver for catalogs, labels, training, simulation and bounds."""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import sndnn
from .bounds import BoundInputs, bound_report, format_report
from .dynamics import DynamicsParams
from .loop import (LINMPC, PD, ROBUST, SNDNN, LoopConfig, baseline_linear_mpc, baseline_pd,
                   baseline_robust, pd_gains, run, run_sndnn_only, sweep_control_interval)
from .mpc import HARD
from .scenario import (CatalogRanges, UncertaintyProfile, estimate, generate_catalog,
                       load_catalog, save_catalog)
from .tracking import ControllerGains, build_desired
from .training import (DataConfig, LossWeights, TrainConfig, generate_dataset, load_dataset,
                       save_dataset, train)

VERSION = 1
OUT_ENV = "NRSIM_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
NR = "NR"
CONTROLLERS = (NR, SNDNN, PD, ROBUST, LINMPC)

DEFAULTS = {
    "global": {"seed": "0", "jobs": "1"},
    "catalog": {"n": "20", "train_fraction": "0.8", "t_f": "86400", "rho_radius": "100"},
    "profile": {"kind": "nominal", "sigma0": "1e4,1e2,1e-2,1e-2", "sigmaf": "1e1,1e0,1e-4,1e-4",
                "floor_ratio": "0.1"},
    "data": {"n_samples": "500", "dt_grid": "60", "dt_bar": "10", "rollout_steps": "1",
             "state_fraction": "0.5", "terminal_mode": HARD, "c0": "1e4", "c1": "1"},
    "train": {"epochs": "2000", "batch_size": "32", "lr": "3e-3", "c_nn": "3", "n_hidden": "6",
              "width": "64", "c_u": "1", "c_x": "100", "holdout_fraction": "0.1",
              "cosine": "false"},
    "gains": {"lambda": "1.3e-3", "alpha": "8.9e-7"},
    "sim": {"dt_ctrl": "60", "threshold": "1.0", "t_s_override": "26400",
            "step_integrate": "300", "steps_per_interval": "20", "sim_step": "10",
            "L_k": "1.0", "reps": "10", "controllers": ",".join(CONTROLLERS),
            "pd_omega": "1.3e-3", "mpc_grid": "600", "delta_v_budget": "0.6"},
    "sweep": {"dts": "60,300,600", "reps": "1", "ratios": "1e-2,1,1e2,1e4"},
    "bounds": {"alpha": "8.9e-7", "lambda_min": "1.3e-3", "lambda_max": "1.3e-3",
               "L_k": "1e-3", "m_f": "150", "t_s": "26400", "t_f": "86400", "p_err_s": "0",
               "x_err_s": "0", "c_e": "0", "beta": "1e-4", "c": "1", "k_e": "10",
               "eps_train": "0", "r": "0", "L_ell": "0", "L_mpc": "0"},
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


def load_config(path=None, overrides=()) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_dict(DEFAULTS)
    if path:
        if not Path(path).is_file():
            raise ConfigError(f"config file not found: {path}")
        cp.read(path)
    for item in overrides:
        key, sep, val = item.partition("=")
        sec, dot, opt = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        if not cp.has_section(sec):
            raise ConfigError(f"unknown section {sec!r}")
        cp.set(sec, opt, val)
    for sec in cp.sections():
        unknown = set(cp[sec]) - set(DEFAULTS.get(sec, {}))
        if unknown:
            raise ConfigError(f"unknown keys in [{sec}]: {sorted(unknown)}")
    if cp["profile"]["kind"] not in ("nominal", "zero"):
        raise ConfigError(f"profile kind must be nominal or zero, got {cp['profile']['kind']!r}")
    return cp


def config_text(cp) -> str:
    lines = []
    for sec in cp.sections():
        lines.append(f"[{sec}]")
        lines.extend(f"{k} = {v}" for k, v in cp[sec].items())
        lines.append("")
    return "\n".join(lines)


def _floats(s) -> list:
    try:
        return [float(v) for v in s.split(",") if v.strip()]
    except ValueError as ex:
        raise ConfigError(str(ex)) from None


def _get(cp, sec, key, conv=float):
    raw = cp[sec][key]
    try:
        if conv is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return conv(raw)
    except ValueError:
        raise ConfigError(f"[{sec}] {key}: cannot parse {raw!r}") from None


def profile_from(cp) -> UncertaintyProfile:
    kind = cp["profile"]["kind"]
    t_f = _get(cp, "catalog", "t_f")
    if kind == "zero":
        return UncertaintyProfile.zero(t_f)
    if kind != "nominal":
        raise ConfigError(f"profile kind must be nominal or zero, got {kind!r}")
    return UncertaintyProfile(tuple(_floats(cp["profile"]["sigma0"])),
                              tuple(_floats(cp["profile"]["sigmaf"])), t_f,
                              _get(cp, "profile", "floor_ratio"))


def gains_from(cp) -> ControllerGains:
    return ControllerGains(_get(cp, "gains", "lambda") * np.eye(3), _get(cp, "gains", "alpha"))


def data_cfg_from(cp) -> DataConfig:
    d = cp["data"]
    return DataConfig(n_samples=int(d["n_samples"]), dt_grid=float(d["dt_grid"]),
                      dt_bar=float(d["dt_bar"]), rollout_steps=int(d["rollout_steps"]),
                      state_fraction=float(d["state_fraction"]), terminal_mode=d["terminal_mode"],
                      c0=float(d["c0"]), c1=float(d["c1"]))


def train_cfg_from(cp) -> TrainConfig:
    t = cp["train"]
    return TrainConfig(epochs=int(t["epochs"]), batch_size=int(t["batch_size"]),
                       lr=float(t["lr"]), seed=_get(cp, "global", "seed", int),
                       weights=LossWeights(float(t["c_u"]), float(t["c_x"])),
                       holdout_fraction=float(t["holdout_fraction"]),
                       cosine=_get(cp, "train", "cosine", bool), n_hidden=int(t["n_hidden"]),
                       width=int(t["width"]), c_nn=float(t["c_nn"]))


def loop_cfg_from(cp) -> LoopConfig:
    s = cp["sim"]
    ts = s["t_s_override"].strip()
    return LoopConfig(dt_ctrl=float(s["dt_ctrl"]), threshold=float(s["threshold"]),
                      t_s_override=float(ts) if ts and ts.lower() != "none" else None,
                      step_integrate=float(s["step_integrate"]),
                      steps_per_interval=int(s["steps_per_interval"]),
                      sim_step=float(s["sim_step"]), L_k=float(s["L_k"]),
                      mpc_grid=float(s["mpc_grid"]), delta_v_budget=float(s["delta_v_budget"]))


# ---------------------------------------------------------------------------
# outputs


def out_root(arg=None) -> Path:
    p = Path(arg or os.environ.get(OUT_ENV, "nrsim_out"))
    p.mkdir(parents=True, exist_ok=True)
    return p


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_meta(out: Path, command: str, cp, inputs: dict, outputs: list, extra=None) -> Path:
    meta = {"version": VERSION, "command": command, "config": {s: dict(cp[s]) for s in
                                                                cp.sections()},
            "inputs": {k: {"path": str(v), "sha256": sha256(v)} for k, v in inputs.items()},
            "outputs": {Path(p).name: sha256(p) for p in outputs}}
    if extra:
        meta.update(extra)
    path = out / f"{command}.meta.json"
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def _header(kind: str, cp) -> list:
    cfg = json.dumps({s: dict(cp[s]) for s in cp.sections()}, sort_keys=True)
    return [f"# neural_rendezvous {kind} v{VERSION}", f"# config {cfg}"]


def write_table(path, kind, cp, columns, rows) -> None:
    lines = _header(kind, cp) + [",".join(columns)]
    for r in rows:
        lines.append(",".join(_fmt(r[c]) for c in columns))
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_table(path) -> tuple[list, list, dict]:
    lines = Path(path).read_text().splitlines()
    if len(lines) < 3 or not lines[0].startswith("# neural_rendezvous"):
        raise ValueError(f"{path}: missing versioned header")
    cfg = json.loads(lines[1][len("# config "):])
    cols = lines[2].split(",")
    rows = [dict(zip(cols, ln.split(","))) for ln in lines[3:] if ln]
    return cols, rows, cfg


# ---------------------------------------------------------------------------
# commands


def cmd_gen_catalog(cp, args, out: Path) -> int:
    g = cp["catalog"]
    ranges = CatalogRanges(t_f=float(g["t_f"]), rho_radius=float(g["rho_radius"]))
    cat = generate_catalog(int(g["n"]), _get(cp, "global", "seed", int), ranges,
                           float(g["train_fraction"]))
    path = out / "catalog.csv"
    save_catalog(cat, path)
    write_meta(out, "gen-catalog", cp, {}, [path])
    print(f"catalog: {len(cat)} scenarios -> {path}")
    return EXIT_OK


def cmd_gen_data(cp, args, out: Path) -> int:
    cat_path = Path(args.catalog or out / "catalog.csv")
    cat = load_catalog(cat_path)
    cfg = data_cfg_from(cp)
    t0 = time.perf_counter()
    ds = generate_dataset(cat, profile_from(cp), cfg, _get(cp, "global", "seed", int))
    wall = time.perf_counter() - t0
    path = out / "dataset.bin"
    save_dataset(ds, path)
    report = {"requested": cfg.n_samples, "dropped": ds.meta["dropped"], "rows": len(ds),
              "seconds": round(wall, 3)}
    (out / "gen-data.report.json").write_text(json.dumps(report, indent=2) + "\n")
    write_meta(out, "gen-data", cp, {"catalog": cat_path}, [path])
    print(json.dumps(report))
    return EXIT_OK


def cmd_train(cp, args, out: Path) -> int:
    data_path = Path(args.data or out / "dataset.bin")
    ds = load_dataset(data_path)
    model, hist = train(ds, train_cfg_from(cp))
    mpath, hpath = out / "model.bin", out / "history.csv"
    sndnn.save(model, mpath)
    write_table(hpath, "history", cp, ["epoch", "lr", "train_loss", "test_loss", "eps_train"],
                hist)
    write_meta(out, "train", cp, {"dataset": data_path}, [mpath, hpath])
    last = hist[-1]
    print(f"trained: epoch {last['epoch']} train {last['train_loss']:.4g} "
          f"test {last['test_loss']:.4g} eps_train {last['eps_train']:.4g}")
    return EXIT_OK


# Monte-Carlo workers read shared read-only state installed once per process.
_CTX: dict = {}


def _init_worker(ctx):
    _CTX.clear()
    _CTX.update(ctx)


def run_seed(seed: int, scenario_id: int, rep: int) -> int:
    return int(np.random.SeedSequence([seed, scenario_id, rep]).generate_state(1)[0])


def simulate_one(scenario, controller: str, rep: int, ctx=None) -> dict:
    """One encounter for one controller; failures become flagged rows."""
    ctx = ctx or _CTX
    model, gains, profile, lcfg, seed = (ctx["model"], ctx["gains"], ctx["profile"],
                                         ctx["loop"], ctx["seed"])
    s = run_seed(seed, scenario.id, rep)
    try:
        if controller == NR:
            log = run(scenario, model, gains, profile, lcfg, s)
        elif controller == SNDNN:
            log = run_sndnn_only(scenario, model, profile, lcfg, s)
        elif controller == LINMPC:
            log = baseline_linear_mpc(scenario, profile, lcfg, s)
        else:
            # fixed trajectory built once at t = 0 from an independent estimate draw
            rng = np.random.default_rng([s, 1])
            x_hat, oe_hat = estimate(scenario.x0.x, scenario.iso, 0.0, profile, rng)
            dyn = DynamicsParams(scenario.iso, lcfg.mass, lcfg.u_max)
            traj = build_desired(model, x_hat, oe_hat, 0.0, scenario.t_f, scenario.rho, dyn,
                                 lcfg.step_integrate, lcfg.mass.wet_mass)
            if controller == PD:
                kp, kd = pd_gains(lcfg.mass.wet_mass, ctx.get("pd_omega", 1.3e-3))
                log = baseline_pd(scenario, traj, kp, kd, profile, lcfg, s)
            elif controller == ROBUST:
                log = baseline_robust(scenario, traj, gains, profile, lcfg, s)
            else:
                raise ValueError(f"unknown controller {controller!r}")
        summ = log.summary()
    except Exception as ex:  # per-run failure is recorded, not fatal
        summ = {"delivery_error": math.nan, "delta_v": math.nan, "switch_time": math.nan,
                "n_clipped": 0, "wall_median": math.nan, "failed": f"{type(ex).__name__}: {ex}"}
    failed = str(summ["failed"]).replace(",", ";")
    return {"scenario": scenario.id, "rep": rep, "controller": controller, "seed": s,
            "delivery_error": float(summ["delivery_error"]), "delta_v": float(summ["delta_v"]),
            "dv_flag": int(over_budget(summ["delta_v"], lcfg.delta_v_budget)),
            "switch_time": float(summ["switch_time"]), "n_clipped": int(summ["n_clipped"]),
            "wall_median": float(summ["wall_median"]), "failed": failed}


def over_budget(delta_v: float, budget: float) -> bool:
    """Runs above the delta-V budget (or with no finite delta-V) are flagged, not dropped."""
    return not delta_v <= budget


def _task(args):
    return simulate_one(*args)


# wall-clock lives in its own file so the results table hashes reproducibly
RESULT_COLUMNS = ["scenario", "rep", "controller", "seed", "delivery_error", "delta_v",
                  "dv_flag", "switch_time", "n_clipped", "failed"]
TIMING_COLUMNS = ["scenario", "rep", "controller", "wall_median"]


def montecarlo(scenarios, controllers, reps: int, ctx: dict, jobs: int = 1) -> list:
    """Rows ordered by (scenario id, rep, controller order) regardless of ``jobs``."""
    tasks = [(sc, c, r) for sc in sorted(scenarios, key=lambda s: s.id) for r in range(reps)
             for c in controllers]
    if jobs <= 1:
        _init_worker(ctx)
        return [simulate_one(*t) for t in tasks]
    with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(ctx,)) as ex:
        return list(ex.map(_task, tasks, chunksize=1))


def summarize(rows) -> list:
    out = []
    for c in dict.fromkeys(r["controller"] for r in rows):
        err = np.array([r["delivery_error"] for r in rows if r["controller"] == c])
        dv = np.array([r["delta_v"] for r in rows if r["controller"] == c])
        ok = err[np.isfinite(err)]
        p50, p90, p99 = (np.percentile(ok, [50, 90, 99]) if ok.size else (math.nan,) * 3)
        out.append({"controller": c, "n": int(err.size), "failed": int(err.size - ok.size),
                    "err_mean": float(np.mean(ok)) if ok.size else math.nan,
                    "err_std": float(np.std(ok)) if ok.size else math.nan,
                    "err_p50": float(p50), "err_p90": float(p90), "err_p99": float(p99),
                    "dv_mean": float(np.nanmean(dv)) if ok.size else math.nan,
                    "dv_flagged": int(sum(r["dv_flag"] for r in rows if r["controller"] == c))})
    return out


SUMMARY_COLUMNS = ["controller", "n", "failed", "err_mean", "err_std", "err_p50", "err_p90",
                   "err_p99", "dv_mean", "dv_flagged"]


def _sim_context(cp, model_path) -> dict:
    return {"model": sndnn.load(model_path), "gains": gains_from(cp), "profile": profile_from(cp),
            "loop": loop_cfg_from(cp), "seed": _get(cp, "global", "seed", int),
            "pd_omega": _get(cp, "sim", "pd_omega")}


def _catalog_and_model(args, out):
    cat_path = Path(args.catalog or out / "catalog.csv")
    model_path = Path(args.model or out / "model.bin")
    return cat_path, load_catalog(cat_path), model_path


def cmd_simulate(cp, args, out: Path) -> int:
    cat_path, cat, model_path = _catalog_and_model(args, out)
    ctx = _sim_context(cp, model_path)
    sc = next((s for s in cat if s.id == args.scenario), None)
    if sc is None:
        raise ConfigError(f"scenario {args.scenario} not in catalog")
    s = run_seed(ctx["seed"], sc.id, 0)
    if args.controller == NR:
        log = run(sc, ctx["model"], ctx["gains"], ctx["profile"], ctx["loop"], s)
    elif args.controller == SNDNN:
        log = run_sndnn_only(sc, ctx["model"], ctx["profile"], ctx["loop"], s)
    else:
        raise ConfigError("simulate supports NR and SNDNN; use montecarlo for baselines")
    path = out / f"run_{sc.id}_{args.controller}.csv"
    log.to_csv(path, json.dumps({s: dict(cp[s]) for s in cp.sections()}, sort_keys=True))
    write_meta(out, "simulate", cp, {"catalog": cat_path, "model": model_path}, [path])
    print(json.dumps(log.summary()))
    return EXIT_OK


def cmd_montecarlo(cp, args, out: Path) -> int:
    cat_path, cat, model_path = _catalog_and_model(args, out)
    ctx = _sim_context(cp, model_path)
    controllers = [c.strip() for c in cp["sim"]["controllers"].split(",") if c.strip()]
    bad = set(controllers) - set(CONTROLLERS)
    if bad:
        raise ConfigError(f"unknown controllers {sorted(bad)}")
    scen = cat.test if not args.all else list(cat)
    rows = montecarlo(scen, controllers, int(cp["sim"]["reps"]), ctx,
                      _get(cp, "global", "jobs", int))
    rpath, spath = out / "results.csv", out / "summary.csv"
    write_table(rpath, "results", cp, RESULT_COLUMNS, rows)
    write_table(spath, "summary", cp, SUMMARY_COLUMNS, summarize(rows))
    write_table(out / "timing.csv", "timing", cp, TIMING_COLUMNS, rows)
    write_meta(out, "montecarlo", cp, {"catalog": cat_path, "model": model_path},
               [rpath, spath])
    print(spath.read_text())
    return EXIT_OK


def cmd_sweep_interval(cp, args, out: Path) -> int:
    cat_path, cat, model_path = _catalog_and_model(args, out)
    ctx = _sim_context(cp, model_path)
    dts = _floats(cp["sweep"]["dts"])
    rows, _ = sweep_control_interval(cat.test if not args.all else list(cat), ctx["model"],
                                     ctx["gains"], ctx["profile"], dts, ctx["loop"],
                                     int(cp["sweep"]["reps"]), ctx["seed"])
    path = out / "sweep_interval.csv"
    write_table(path, "sweep", cp, list(rows[0]), rows)
    write_meta(out, "sweep-interval", cp, {"catalog": cat_path, "model": model_path}, [path])
    print(path.read_text())
    return EXIT_OK


def cmd_bounds(cp, args, out: Path) -> int:
    b = {k: float(v) for k, v in cp["bounds"].items()}
    extra = {k: b.pop(k) for k in ("eps_train", "r", "L_ell", "L_mpc")}
    inp = BoundInputs(**b)
    text = format_report(bound_report(inp, **extra))
    path = out / "bounds.txt"
    path.write_text(text)
    write_meta(out, "bounds", cp, {}, [path])
    print(text, end="")
    return EXIT_OK


def cmd_plotdata(cp, args, out: Path) -> int:
    written = []
    if args.results:
        _, rows, _ = read_table(args.results)
        for c in ("scenario", "controller", "delivery_error", "delta_v"):
            if rows and c not in rows[0]:
                raise ConfigError(f"results missing column {c}")
        agg = {}
        for r in rows:
            agg.setdefault((int(r["scenario"]), r["controller"]), []).append(
                (float(r["delivery_error"]), float(r["delta_v"])))
        fig = [{"scenario": s, "controller": c, "n": len(v),
                "err_mean": float(np.mean([e for e, _ in v])),
                "dv_mean": float(np.mean([d for _, d in v]))} for (s, c), v in sorted(agg.items())]
        p = out / "fig_error_vs_iso.csv"
        write_table(p, "plotdata", cp, ["scenario", "controller", "n", "err_mean", "dv_mean"],
                    fig)
        written.append(p)
    if args.sweep:
        cols, rows, _ = read_table(args.sweep)
        for c in ("dt", "controller", "err_mean", "err_std"):
            if c not in cols:
                raise ConfigError(f"sweep missing column {c}")
        p = out / "fig_error_vs_interval.csv"
        write_table(p, "plotdata", cp, cols, rows)
        written.append(p)
    if args.weight_results:
        by_ratio = {}
        for path in args.weight_results:
            _, rows, cfg = read_table(path)
            ratio = float(cfg["train"]["c_x"]) / float(cfg["train"]["c_u"])
            by_ratio.setdefault(ratio, []).extend(rows)
        fig = []
        for ratio in _floats(cp["sweep"]["ratios"]):
            rows = [r for r in by_ratio.get(ratio, []) if r["controller"] == NR]
            err = [float(r["delivery_error"]) for r in rows]
            dv = [float(r["delta_v"]) for r in rows]
            fig.append({"ratio": ratio, "n": len(rows),
                        "err_median": float(np.median(err)) if err else math.nan,
                        "dv_median": float(np.median(dv)) if dv else math.nan})
        p = out / "fig_error_vs_weight_ratio.csv"
        write_table(p, "plotdata", cp, ["ratio", "n", "err_median", "dv_median"], fig)
        written.append(p)
    if not written:
        raise ConfigError("plotdata needs --results, --sweep or --weight-results")
    for p in written:
        print(p)
    return EXIT_OK


def cmd_print_config(cp, args, out) -> int:
    print(config_text(cp), end="")
    return EXIT_OK


COMMANDS = {"gen-catalog": cmd_gen_catalog, "gen-data": cmd_gen_data, "train": cmd_train,
            "simulate": cmd_simulate, "montecarlo": cmd_montecarlo,
            "sweep-interval": cmd_sweep_interval, "bounds": cmd_bounds,
            "plotdata": cmd_plotdata, "print-config": cmd_print_config}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nrsim", description=__doc__)
    ap.add_argument("--config", help="INI-style config file")
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    ap.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./nrsim_out)")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name in ("gen-data", "simulate", "montecarlo", "sweep-interval"):
            p.add_argument("--catalog")
        if name in ("simulate", "montecarlo", "sweep-interval"):
            p.add_argument("--model")
        if name in ("montecarlo", "sweep-interval"):
            p.add_argument("--all", action="store_true", help="use every scenario, not the test split")
        if name == "train":
            p.add_argument("--data")
        if name == "simulate":
            p.add_argument("--scenario", type=int, default=0)
            p.add_argument("--controller", default=NR, choices=[NR, SNDNN])
        if name == "plotdata":
            p.add_argument("--results")
            p.add_argument("--sweep")
            p.add_argument("--weight-results", nargs="*")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        cp = load_config(args.config, args.set)
        out = None if args.command == "print-config" else out_root(args.out)
        return COMMANDS[args.command](cp, args, out)
    except (ConfigError, ValueError) as ex:
        print(f"nrsim: error: {ex}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as ex:
        print(f"nrsim: failed: {type(ex).__name__}: {ex}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
