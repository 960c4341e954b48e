"""``ibkit`` command line: file-based, seeded pipeline runs.

Every subcommand writes its outputs plus one ``manifest.json`` into an output
directory under ``$IBKIT_OUTPUT_ROOT`` (default ``./ibkit-runs``). Options can
come from a ``key = value`` config file (``--config``; ``--config demo`` loads
the shipped demo config, a previous ``manifest.json`` is also accepted) and are
overridden by explicit flags.

Exit codes: 0 success, 2 bad usage, 3 missing input artifact, 4 invalid value.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import shutil
import sys
import time
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_BAD_VALUE = 4
OUTPUT_ROOT_ENV = "IBKIT_OUTPUT_ROOT"
DEFAULT_ROOT = "ibkit-runs"
SCHEMA_VERSION = 1
DATA_DIR = Path(__file__).parent / "data"


class MissingInputError(Exception):
    pass


class ConfigError(Exception):
    pass


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _floats(v) -> list[float]:
    return [float(s) for s in str(v).split(",") if s.strip()] if not isinstance(v, list) else [float(x) for x in v]


def _ints(v) -> list[int]:
    return [int(s) for s in str(v).split(",") if s.strip()] if not isinstance(v, list) else [int(x) for x in v]


def _strs(v) -> list[str]:
    return [s.strip() for s in str(v).split(",") if s.strip()] if not isinstance(v, list) else [str(x) for x in v]


@dataclass(frozen=True)
class Opt:
    name: str
    kind: Callable[[Any], Any]
    default: Any
    help: str


# ---------------------------------------------------------------------------
# config handling and manifests
# ---------------------------------------------------------------------------

def read_config(path: str | os.PathLike, command: str) -> dict[str, str]:
    """key = value lines (# comments); a manifest.json contributes its config."""
    if str(path) == "demo":
        path = DATA_DIR / "configs" / f"{command}.cfg"
    p = Path(path)
    if not p.is_file():
        raise MissingInputError(f"config file not found: {p}")
    if p.suffix == ".json":
        with open(p) as fh:
            man = json.load(fh)
        if man.get("subcommand") not in (None, command):
            raise ConfigError(f"manifest is for '{man.get('subcommand')}', not '{command}'")
        return {k: v for k, v in man.get("config", {}).items()}
    out = {}
    for n, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p}:{n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def resolve_config(opts: list[Opt], file_cfg: dict, flags: dict) -> dict:
    known = {o.name: o for o in opts}
    unknown = set(file_cfg) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = {}
    for o in opts:
        raw = flags.get(o.name)
        if raw is None:
            raw = file_cfg.get(o.name, o.default)
        try:
            cfg[o.name] = None if raw is None or raw == "" else o.kind(raw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad value for {o.name}: {raw!r} ({e})") from None
    return cfg


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_ROOT))


def output_dir(out: str | None, command: str) -> Path:
    p = Path(out) if out else Path(command)
    return p if p.is_absolute() else output_root() / p


def find_input(path: str | None, what: str, must_contain: str | None = None) -> Path:
    """Resolve an input artifact, relative to cwd first, then to the output root."""
    if not path:
        raise MissingInputError(f"no {what} given")
    cands = [Path(path)]
    if not Path(path).is_absolute():
        cands.append(output_root() / path)
    for c in cands:
        if must_contain:
            for base in (c, c / "run"):
                if (base / must_contain).exists():
                    return base
        elif c.exists():
            return c
    raise MissingInputError(f"{what} not found: {path}")


def _versions() -> dict[str, str]:
    import numba
    import numpy
    import scipy
    from . import __version__
    return {"ibkit": __version__, "python": platform.python_version(), "numpy": numpy.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def write_manifest(out: Path, command: str, cfg: dict, outputs: list[str], seeds: dict,
                   wall: float, summary: dict | None = None) -> Path:
    man = {"schema_version": SCHEMA_VERSION, "subcommand": command, "config": cfg, "seeds": seeds,
           "versions": _versions(), "outputs": sorted(outputs), "wall_clock_s": round(wall, 3),
           "summary": summary or {}}
    path = out / "manifest.json"
    with open(path, "w") as fh:
        json.dump(_jsonable(man), fh, indent=2, sort_keys=True)
    return path


def _jsonable(v):
    import numpy as np
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return f if f == f and abs(f) != float("inf") else str(f)
    if isinstance(v, Path):
        return str(v)
    return v


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# shared loaders
# ---------------------------------------------------------------------------

def _load_run(path: str):
    from .netlab import TrainRun
    d = find_input(path, "training run", must_contain="snapshots")
    return d, TrainRun.load(d)


def _run_dataset(run_dir: Path, run):
    """Rebuild the symmetric-task dataset a run was trained on."""
    import numpy as np
    from .datagen import PatternSet, RuleDistribution, load_rule_csv
    from .netlab import symmetric_dataset
    rule_path = run_dir / "rule.csv"
    if not rule_path.is_file():
        raise MissingInputError(f"{rule_path} missing (runs made by 'train' carry their rule)")
    pats, orbit, p1 = load_rule_csv(rule_path)
    meta = json.loads((run_dir / "dataset.json").read_text())
    ds = symmetric_dataset(PatternSet(pats, orbit), RuleDistribution(p1, float("nan"), float("nan")),
                           meta["train_fraction"], meta["seed"])
    if run.train_idx is not None and not np.array_equal(ds.train_idx, run.train_idx):
        raise ConfigError("rebuilt dataset split does not match the run")
    return ds


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(cfg, out, threads):
    from .datagen import (analytic_mi_gaussian, discretized_joint, generate_joint_gaussian,
                          generate_symmetric_rule, save_rule_csv)
    from .prob import mutual_information, save_joint_csv
    files, summary = [], {}
    if cfg["task"] == "symmetric":
        pset, rule = generate_symmetric_rule(cfg["seed"], cfg["group"], cfg["mi_target"])
        save_rule_csv(pset, rule, out / "rule.csv")
        save_joint_csv(rule.joint(), out / "joint.csv")
        files += ["rule.csv", "joint.csv"]
        summary = {"n_orbits": int(pset.orbit_id.max()) + 1, "p_y1": rule.p_y1,
                   "i_xy_bits": mutual_information(rule.joint()), "gain": rule.gain,
                   "threshold": rule.threshold}
    elif cfg["task"] == "gaussian":
        task = generate_joint_gaussian(cfg["dim_x"], cfg["dim_y"], cfg["seed"])
        task.to_json(out / "task.json")
        files.append("task.json")
        summary = {"i_xy_bits": analytic_mi_gaussian(task)}
        if cfg["dim_y"] == 1:
            save_joint_csv(discretized_joint(task, cfg["bins"]), out / "joint.csv")
            files.append("joint.csv")
    else:
        raise ConfigError(f"unknown task {cfg['task']!r}")
    return files, summary, {"seed": cfg["seed"]}


def cmd_train(cfg, out, threads):
    from .datagen import PatternSet, RuleDistribution, generate_symmetric_rule, load_rule_csv, save_rule_csv
    from .netlab import NetworkSpec, TrainConfig, symmetric_dataset, train
    if cfg["rule"]:
        rule_path = find_input(cfg["rule"], "rule CSV")
        if rule_path.is_dir():
            rule_path = rule_path / "rule.csv"
        if not rule_path.is_file():
            raise MissingInputError(f"rule CSV not found: {rule_path}")
        pats, orbit, p1 = load_rule_csv(rule_path)
        pset, rule = PatternSet(pats, orbit), RuleDistribution(p1, float("nan"), float("nan"))
    else:
        pset, rule = generate_symmetric_rule(cfg["rule_seed"])
    ds = symmetric_dataset(pset, rule, cfg["train_fraction"], cfg["seed"])
    spec = NetworkSpec(tuple(cfg["widths"]), cfg["activation"], cfg["init_weight_std"], 0.0, cfg["seed"])
    tc = TrainConfig(cfg["learning_rate"], cfg["batch_size"], cfg["epochs"], cfg["train_fraction"],
                     n_snapshots=cfg["n_snapshots"])
    run = train(spec, tc, ds)
    run_dir = out / "run"
    if run_dir.exists():
        shutil.rmtree(run_dir)
    run.save(run_dir)
    save_rule_csv(pset, rule, run_dir / "rule.csv")
    _write_json(run_dir / "dataset.json", {"train_fraction": cfg["train_fraction"], "seed": cfg["seed"]})
    summary = {"final_train_error": float(run.train_error[-1]), "final_test_error": float(run.test_error[-1]),
               "iterations": int(run.grad_stats.iterations[-1]), "n_snapshots": len(run.snapshots),
               "n_train": int(len(ds.train_idx))}
    files = ["run/" + str(p.relative_to(run_dir)) for p in sorted(run_dir.rglob("*"))
             if p.is_file() and "snapshots" not in p.parts]
    return files, summary, {"seed": cfg["seed"], "rule_seed": cfg["rule_seed"], "sampler": [cfg["seed"], 7]}


def cmd_infoplane(cfg, out, threads):
    from .infoplane import (BinningConfig, detect_compression_onset, detect_snr_transition,
                            dpi_check, estimate_layer_mi, run_snr_transition, save_phase_report)
    from .netlab import gradient_snr_series
    run_dir, run = _load_run(cfg["run"])
    ds = _run_dataset(run_dir, run)
    binning = BinningConfig(cfg["n_bins"], markov=cfg["markov"], adaptive=cfg["adaptive"],
                            lo=0.0 if cfg["adaptive"] else -1.0)
    traj = estimate_layer_mi(run, ds, binning)
    traj.to_csv(out / "trajectory.csv")
    dpi = dpi_check(traj)
    k = run.spec.n_layers
    notes = []
    per_layer_snr, rows = [], []
    for j in range(k):
        its, snr = gradient_snr_series(run, j)
        if len(snr) >= 20:
            per_layer_snr.append(detect_snr_transition(snr, its, log_bins=cfg["snr_log_bins"]))
        else:
            per_layer_snr.append(None)
        rows += [(int(i), j + 1, repr(float(s))) for i, s in zip(its, snr)]
    with open(out / "snr.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "layer", "snr"])
        w.writerows(rows)
    if len(traj.iterations) >= 20:
        onsets = [detect_compression_onset(traj, j) for j in range(k)]
    else:
        onsets = [None] * k
        notes.append("fewer than 20 snapshots: compression onset not evaluated")
    if len(run.epoch_iterations) >= 20:
        snr_transition = run_snr_transition(run, cfg["snr_log_bins"])
    else:
        snr_transition = None
        notes.append("fewer than 20 epochs: SNR transition not evaluated")
    report = {"snr_transition": snr_transition,
              "snr_transition_per_layer": per_layer_snr, "compression_onset_per_layer": onsets,
              "i_xt_drop_from_peak": traj.i_xt.max(axis=0) - traj.i_xt[-1],
              "final_i_ty_output": float(traj.i_ty[-1, -1]), "i_xy": traj.i_xy,
              "dpi_max_violation": dpi.max_violation, "dpi_ok": dpi.ok(),
              "clipped_entries": int(traj.n_clipped.sum()), "notes": notes}
    save_phase_report(out / "phase_report.json", **report)
    return (["trajectory.csv", "snr.csv", "phase_report.json"],
            {"dpi_max_violation": dpi.max_violation, "snr_transition": report["snr_transition"]}, {})


def cmd_ib_curve(cfg, out, threads):
    from .ib import IBProblem, curve_concavity_violation, geometric_betas, sweep_info_curve
    from .prob import load_joint_csv
    path = find_input(cfg["joint"], "joint CSV") if cfg["joint"] else DATA_DIR / "demo_joint_8x4.csv"
    problem = IBProblem(load_joint_csv(path), cfg["cardinality_t"])
    betas = geometric_betas(cfg["beta_min"], cfg["beta_max"], cfg["beta_ratio"])
    curve = sweep_info_curve(problem, betas, restarts=cfg["restarts"], seed=cfg["seed"])
    curve.to_csv(out / "curve.csv")
    summary = {"joint": str(path), "n_betas": len(betas), "i_xy_bits": problem.i_xy,
               "concavity_violation_bits": curve_concavity_violation(curve.i_x, curve.i_y)}
    return ["curve.csv"], summary, {"seed": cfg["seed"]}


def cmd_beta_star(cfg, out, threads):
    from .ib import fit_beta_star, geometric_betas
    from .infoplane import BinningConfig, layer_channel
    run_dir, run = _load_run(cfg["run"])
    ds = _run_dataset(run_dir, run)
    its = run.snapshot_iterations
    it = its[-1] if cfg["iteration"] < 0 else cfg["iteration"]
    if it not in run.snapshots:
        raise ConfigError(f"iteration {it} is not a snapshot")
    layers = cfg["layers"] or list(range(1, run.spec.n_layers + 1))
    grid = geometric_betas(cfg["beta_min"], cfg["beta_max"], cfg["beta_ratio"])
    rows = []
    for layer in layers:
        enc, dec, prob = layer_channel(run.snapshots[it], ds, run.spec.activation, layer - 1,
                                       BinningConfig(cfg["n_bins"]))
        b, kl = fit_beta_star(enc, dec, prob, grid)
        rows.append((it, layer, enc.shape[1], repr(b), repr(kl)))
    with open(out / "beta_star.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "layer", "n_clusters", "beta_star", "kl_bits"])
        w.writerows(rows)
    return ["beta_star.csv"], {"beta_star": [float(r[3]) for r in rows]}, {}


def _convergence_iteration(run, accuracy: float):
    import numpy as np
    hit = np.flatnonzero(1.0 - run.train_error >= accuracy)
    return None if hit.size == 0 else int(run.grad_stats.iterations[hit[0]])


def cmd_diffusion(cfg, out, threads):
    import numpy as np
    from .diffusion import (bound_report, clt_diagnostics, decompose_weights, layer_boost_fit,
                            nearest_snapshot)
    from .infoplane import run_snr_transition
    from .netlab import fit_diffusion_exponent, forward
    run_dir, run = _load_run(cfg["run"])
    ds = _run_dataset(run_dir, run)
    t = cfg["transition"] if cfg["transition"] is not None else run_snr_transition(run)
    if t is None:
        raise ConfigError("no SNR transition detected; pass --transition")
    t_snap = nearest_snapshot(run, t)
    dec = decompose_weights(run, t_snap, ds, cfg["noise_ratio"])
    rep = bound_report(dec, growth_threshold=cfg["growth_threshold"])
    rep.to_csv(out / "bound.csv")
    files = ["bound.csv"]
    # sensitivity of the final bound to the measurement-noise ratio
    with open(out / "noise_sensitivity.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["noise_ratio", "layer", "final_bound_bits"])
        for f in (1e-2, 1.0, 1e2):
            r = bound_report(decompose_weights(run, t_snap, ds, cfg["noise_ratio"] * f),
                             taus=[rep.taus[-1]], growth_threshold=cfg["growth_threshold"])
            for k in range(dec.n_layers):
                w.writerow([repr(cfg["noise_ratio"] * f), k + 1, repr(float(r.bound_bits[-1, k]))])
    files.append("noise_sensitivity.csv")
    acts = [ds.x] + forward(run.snapshots[t_snap], ds.x, run.spec.activation)[:-1]
    clt = {}
    last = rep.taus[-1]
    for k in range(dec.n_layers):
        if acts[k].shape[1] < 64:
            clt[f"layer{k + 1}"] = {"skipped": f"input width {acts[k].shape[1]} < 64"}
            continue
        unit = []
        for i in range(dec.w_star[k].shape[0]):
            c = clt_diagnostics(dec.w_star[k][i], dec.delta_w[last][k][i], acts[k])
            unit.append({"ks": c.ks_statistic, "p": c.ks_pvalue, "flagged": c.flagged, "reasons": c.reasons})
        clt[f"layer{k + 1}"] = unit
    _write_json(out / "clt.json", clt)
    files.append("clt.json")
    its = run.grad_stats.iterations
    fit = fit_diffusion_exponent(its[its >= t_snap], run.msd[its >= t_snap]) if np.sum(its >= t_snap) >= 10 else None
    summary = {"transition": t, "transition_snapshot": t_snap,
               "nonincreasing_fraction": [rep.nonincreasing_fraction(k) for k in range(dec.n_layers)],
               "n_informative": rep.n_informative, "r_constant": rep.r_constant,
               "msd_alpha": None if fit is None else fit.alpha}
    if cfg["boost_runs"]:
        conv = {}
        for p in cfg["boost_runs"]:
            _, r = _load_run(p)
            ci = _convergence_iteration(r, cfg["accuracy"])
            if ci is not None:
                conv[r.spec.n_layers - 1] = ci
        summary["convergence_iterations"] = conv
        if len(conv) >= 3:
            bf = layer_boost_fit(conv)
            summary["boost"] = {"alpha_hat": bf.alpha_hat, "r2": bf.r2, "monotone": bf.monotone,
                                "reference_alpha": 0.55}
    _write_json(out / "diffusion.json", summary)
    files.append("diffusion.json")
    return files, summary, {}


def _ntk_one(job):
    from .ntk import ntk_trajectory
    arch, data, taus, cfg, h_y = job
    xt, yt, xe, ye = data
    return ntk_trajectory(arch, xt, yt, xe, ye, taus, cfg["batch"], cfg["samples"], h_y, cfg["seed"])


def cmd_ntk(cfg, out, threads):
    import math
    from concurrent.futures import ThreadPoolExecutor
    import numpy as np
    from .datagen import JointGaussianTask, discretized_joint, generate_joint_gaussian
    from .ib import IBProblem, geometric_betas, sweep_info_curve
    from .ntk import ArchSpec, default_taus
    if cfg["dataset"] != "gaussian":
        raise ConfigError("only the 'gaussian' dataset is available")
    if cfg["task"]:
        task = JointGaussianTask.from_json(find_input(cfg["task"], "task JSON"))
    else:
        task = generate_joint_gaussian(30, 1, cfg["seed"])
    ss = np.random.SeedSequence(cfg["seed"]).spawn(2)
    xt, yt = task.sample(cfg["n_train"], np.random.default_rng(ss[0]))
    xe, ye = task.sample(cfg["n_eval"], np.random.default_rng(ss[1]))
    h_y = 0.5 * float(np.linalg.slogdet(2 * math.pi * math.e * task.cov_y)[1]) / math.log(2)
    taus = default_taus(cfg["tau_min"], cfg["tau_max"], cfg["n_taus"])
    jobs = [(ArchSpec(cfg["depth"], act, sw, cfg["sigma_b2"]), (xt, yt, xe, ye), taus, cfg, h_y)
            for act in cfg["activation"] for sw in cfg["sigma_w2"]]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as ex:
        trajs = list(ex.map(_ntk_one, jobs))
    tmp = [out / f".part{i}.csv" for i in range(len(trajs))]
    with open(out / "ntk.csv", "w", newline="") as fh:
        for i, (tr, p) in enumerate(zip(trajs, tmp)):
            tr.to_csv(p)
            lines = p.read_text().splitlines(keepends=True)
            fh.writelines(lines if i == 0 else lines[1:])
            p.unlink()
    files = ["ntk.csv"]
    summary = {"log2_batch": math.log2(min(cfg["batch"], cfg["n_eval"])),
               "max_izx_lower_bits": max(float(t.columns["izx_lower"].max()) for t in trajs),
               "h_y_bits": h_y, "ridge": [t.ridge for t in trajs]}
    if cfg["reference"]:
        prob = IBProblem(discretized_joint(task, cfg["ref_bins"]))
        curve = sweep_info_curve(prob, geometric_betas(0.5, 300.0, 1.25), restarts=1, seed=cfg["seed"])
        curve.to_csv(out / "ib_reference.csv")
        files.append("ib_reference.csv")
        excess = max(float(np.max(t.columns["izy"] - np.interp(t.columns["izx_lower"], curve.i_x, curve.i_y)))
                     for t in trajs)
        summary["max_excess_over_reference_bits"] = excess
    return files, summary, {"seed": cfg["seed"]}


def cmd_genbound(cfg, out, threads):
    import numpy as np
    from .bounds import CompressionBoundInput, input_compression_bound, sample_equivalence_check
    if cfg["trajectory"]:
        from .infoplane import InfoPlaneTrajectory
        p = find_input(cfg["trajectory"], "trajectory CSV")
        if p.is_dir():
            p = p / "trajectory.csv"
        if not p.is_file():
            raise MissingInputError(f"trajectory CSV not found: {p}")
        traj = InfoPlaneTrajectory.from_csv(p)
        ixt = [float(v) for v in traj.i_xt[-1]]
    elif cfg["i_xt"] is not None:
        ixt = [cfg["i_xt"]]
    else:
        raise MissingInputError("give --trajectory or --i-xt")
    rows = []
    for k, i in enumerate(ixt, 1):
        e2 = input_compression_bound(CompressionBoundInput(i, cfg["m"], cfg["delta"]))
        rows.append((k, repr(i), repr(e2), repr(float(np.sqrt(e2)))))
    with open(out / "genbound.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "i_xt_bits", "eps_sq", "eps"])
        w.writerows(rows)
    files = ["genbound.csv"]
    summary = {"eps": [float(r[3]) for r in rows]}
    if cfg["extra_bits"] is not None:
        eq = sample_equivalence_check(max(ixt), cfg["m"], cfg["extra_bits"], cfg["delta"])
        summary["sample_equivalence"] = {"ratio": eq.ratio, "dominant": eq.dominant, "dominance": eq.dominance}
    return files, summary, {}


def cmd_report(cfg, out, threads):
    inputs = cfg["inputs"] or sorted(str(p.parent) for p in output_root().glob("*/manifest.json")
                                     if p.parent.resolve() != out.resolve())
    if not inputs:
        raise MissingInputError("no experiment directories to aggregate")
    dirs = [find_input(d, "experiment directory", must_contain="manifest.json") for d in inputs]
    merged: dict[str, tuple[list[str], list[list[str]]]] = {}
    index = []
    for d in dirs:
        man = json.loads((d / "manifest.json").read_text())
        index.append({"dir": str(d), "subcommand": man.get("subcommand"), "summary": man.get("summary", {})})
        for f in sorted(d.glob("*.csv")):
            with open(f, newline="") as fh:
                rows = list(csv.reader(fh))
            if not rows:
                continue
            head, body = merged.setdefault(f.name, (["source"] + rows[0], []))
            if head[1:] != rows[0]:
                raise ConfigError(f"{f}: header differs from other {f.name} files")
            body.extend([[d.name] + r for r in rows[1:]])
    files = []
    for name, (head, body) in sorted(merged.items()):
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(head)
            w.writerows(body)
        files.append(name)
    _write_json(out / "index.json", index)
    return files + ["index.json"], {"n_inputs": len(dirs)}, {}


COMMON = [
    Opt("seed", int, 0, "master seed"),
]

COMMANDS: dict[str, tuple[str, list[Opt], Callable]] = {
    "synth": ("generate a task (symmetric rule or jointly Gaussian)", [
        Opt("task", str, "symmetric", "symmetric | gaussian"),
        Opt("group", str, "half_axes", "symmetry group for the rule"),
        Opt("mi_target", float, 0.99, "target I(X;Y) in bits"),
        Opt("dim_x", int, 30, "Gaussian input dimension"),
        Opt("dim_y", int, 1, "Gaussian target dimension"),
        Opt("bins", int, 60, "bins per axis of the discretized Gaussian joint"),
    ], cmd_synth),
    "train": ("train a network on the symmetric task, recording snapshots", [
        Opt("rule", str, None, "rule CSV or synth output dir (default: generate)"),
        Opt("rule_seed", int, 0, "seed of the generated rule when --rule is absent"),
        Opt("widths", _ints, "12,10,7,5,4,3,2", "layer widths, input first"),
        Opt("activation", str, "tanh", "tanh | relu | erf | sigmoid"),
        Opt("init_weight_std", float, 0.2, "initial weight scale"),
        Opt("learning_rate", float, 0.1, "SGD step size"),
        Opt("batch_size", int, 32, "minibatch size"),
        Opt("epochs", int, 8000, "training epochs"),
        Opt("train_fraction", float, 0.85, "fraction of patterns used for training"),
        Opt("n_snapshots", int, 120, "number of log-spaced weight snapshots"),
    ], cmd_train),
    "infoplane": ("binned information-plane trajectory, DPI audit and phase report", [
        Opt("run", str, "train/run", "training run directory"),
        Opt("n_bins", int, 30, "bins per unit"),
        Opt("markov", _bool, True, "feed each layer the binned previous layer"),
        Opt("adaptive", _bool, False, "per-layer range [0, max] instead of [-1, 1]"),
        Opt("snr_log_bins", int, 60, "log-iteration bins for SNR smoothing"),
    ], cmd_infoplane),
    "ib-curve": ("sweep beta to trace the information curve of a joint", [
        Opt("joint", str, None, "joint CSV (default: shipped 8x4 demo joint)"),
        Opt("cardinality_t", int, None, "|T| (default |X|)"),
        Opt("beta_min", float, 0.5, "smallest beta"),
        Opt("beta_max", float, 200.0, "largest beta"),
        Opt("beta_ratio", float, 1.07, "geometric grid ratio"),
        Opt("restarts", int, 3, "random restarts per beta"),
    ], cmd_ib_curve),
    "beta-star": ("fit the IB trade-off parameter of each trained layer", [
        Opt("run", str, "train/run", "training run directory"),
        Opt("iteration", int, -1, "snapshot iteration (-1: last)"),
        Opt("layers", _ints, None, "1-based weight layers (default all)"),
        Opt("n_bins", int, 30, "bins per unit"),
        Opt("beta_min", float, 0.1, "smallest beta"),
        Opt("beta_max", float, 1000.0, "largest beta"),
        Opt("beta_ratio", float, 1.2, "geometric grid ratio"),
    ], cmd_beta_star),
    "diffusion": ("Gaussian-channel bound over the diffusion phase, CLT checks, layer boost", [
        Opt("run", str, "train/run", "training run directory"),
        Opt("transition", float, None, "transition iteration (default: detected)"),
        Opt("noise_ratio", float, 1e-4, "sigma_z^2 / sigma_T^2"),
        Opt("growth_threshold", float, 2.0, "lambda growth marking non-informative directions"),
        Opt("boost_runs", _strs, None, "training runs of different depths for the boost fit"),
        Opt("accuracy", float, 0.98, "train accuracy defining convergence"),
    ], cmd_diffusion),
    "ntk": ("infinite-width ensemble information quantities over tau and sigma_w^2", [
        Opt("dataset", str, "gaussian", "only 'gaussian'"),
        Opt("task", str, None, "task JSON from synth (default: generate from seed)"),
        Opt("activation", _strs, "relu,erf", "activations"),
        Opt("sigma_w2", _floats, "0.5,1,2,4", "weight variance grid"),
        Opt("sigma_b2", float, 0.01, "bias variance"),
        Opt("depth", int, 3, "hidden layers"),
        Opt("n_train", int, 500, "training points"),
        Opt("n_eval", int, 1000, "evaluation points"),
        Opt("batch", int, 1000, "minibatch for the I(Z;X) bounds"),
        Opt("samples", int, 1, "posterior draws per point"),
        Opt("tau_min", float, 1e-2, "first tau"),
        Opt("tau_max", float, 1e10, "last tau"),
        Opt("n_taus", int, 49, "tau grid size"),
        Opt("reference", _bool, True, "also compute the discretized IB reference curve"),
        Opt("ref_bins", int, 40, "bins per axis for the reference joint"),
    ], cmd_ntk),
    "genbound": ("input-compression generalization bound", [
        Opt("trajectory", str, None, "information-plane CSV (uses the last snapshot)"),
        Opt("i_xt", float, None, "I(X;T) in bits when no trajectory is given"),
        Opt("m", int, 3482, "training-set size"),
        Opt("delta", float, 0.05, "confidence"),
        Opt("extra_bits", float, None, "bits of extra compression for the sample-equivalence check"),
    ], cmd_genbound),
    "report": ("aggregate CSVs from experiment directories for plotting", [
        Opt("inputs", _strs, None, "experiment directories (default: all under the output root)"),
    ], cmd_report),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ibkit", description=__doc__.split("\n\n")[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter,
                                     epilog=f"Output root: ${OUTPUT_ROOT_ENV} (default ./{DEFAULT_ROOT}).")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name, (help_, opts, _) in COMMANDS.items():
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="key = value file, previous manifest.json, or 'demo'")
        p.add_argument("--out", help="output directory (relative to the output root)")
        p.add_argument("--threads", type=int, default=1, help="worker threads (1 is deterministic)")
        for o in COMMON + opts:
            p.add_argument("--" + o.name.replace("_", "-"), dest=o.name, default=None,
                           help=f"{o.help} (default: {o.default})")
    return parser


def _limit_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = str(n)
    if "numba" in sys.modules:
        import numba
        with warnings.catch_warnings():
            # an old system TBB only disables that threading layer
            warnings.filterwarnings("ignore", message=".*TBB.*")
            numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    name = args.command
    help_, opts, fn = COMMANDS[name]
    opts = COMMON + opts
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        _limit_threads(args.threads)
        file_cfg = read_config(args.config, name) if args.config else {}
        flags = {o.name: getattr(args, o.name) for o in opts}
        cfg = resolve_config(opts, file_cfg, flags)
        out = output_dir(args.out, name)
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        files, summary, seeds = fn(cfg, out, args.threads)
        write_manifest(out, name, cfg, files, seeds, time.perf_counter() - t0, summary)
    except MissingInputError as e:
        print(f"ibkit {name}: missing input: {e}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except (ConfigError, ValueError) as e:
        print(f"ibkit {name}: invalid value: {e}", file=sys.stderr)
        return EXIT_BAD_VALUE
    print(out)
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
