"""Command-line driver: ``histlab run | preset | emit-plotdata``.

Exit codes: 0 ok, 2 configuration error, 3 numerical guard, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import scipy
import scipy.fft as sfft

from . import __version__, qstate
from .bohm import (
    advance_ensemble,
    ensemble_summary,
    sample_initial,
    sign_crossings,
    transport_check,
    write_trajectories_csv,
)
from .bohmhist import bm_probabilities, compare, high_probability_sequences, write_bm_csv, write_comparison
from .config import ConfigError, ExperimentConfig, load_config
from .histories import (
    BranchExplosionError,
    decoherence_matrix,
    dh_probabilities,
    label_str,
    write_decoherence_csv,
    write_probability_csv,
)
from .qstate import SuperpositionError, evolve, evolve_stream, expectation_position, position_density
from .presets import PRESETS, write_preset
from .records import ModelError, exclusivity_check, load_model, verify_record_correlation

log = logging.getLogger("histlab")

EXIT_OK, EXIT_CONFIG, EXIT_GUARD, EXIT_IO = 0, 2, 3, 4


class MissingInputsError(OSError):
    pass


def _fmt(x: float) -> str:
    return f"{x:.12g}"


def _atomic_dir(final: Path):
    final.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=f".{final.name}-", dir=final.parent))


def _commit(tmp: Path, final: Path) -> None:
    if final.exists():
        old = final.with_name(f".{final.name}-old-{os.getpid()}")
        os.replace(final, old)
        os.replace(tmp, final)
        shutil.rmtree(old, ignore_errors=True)
    else:
        os.replace(tmp, final)


def run_experiment(cfg: ExperimentConfig, out: Path | None = None, traj_dump: bool | None = None) -> dict:
    """Compute both probability tables for ``cfg`` and write every output file."""
    t_start = time.perf_counter()
    out = Path(out or cfg.output_dir)
    tmp = _atomic_dir(out)
    try:
        summary = _run_into(cfg, tmp, traj_dump)
        manifest = {
            "package": "histlab",
            "version": __version__,
            "config": cfg.raw,
            "seeds": {"ensemble": cfg.seed},
            "tolerances": {
                **cfg.tolerances,
                "prune": cfg.prune,
                "max_branches": cfg.max_branches,
                "ensemble_dt": cfg.dt,
                "decoherence_dt": cfg.decoherence_dt,
            },
            "versions": {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__},
            "fft_workers": qstate.FFT_WORKERS,
            "wall_time_s": round(time.perf_counter() - t_start, 3),
            "timings": summary.get("timings", {}),
        }
        with open(tmp / "run_manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")
        _commit(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    summary["output_dir"] = str(out)
    return summary


def _run_into(cfg: ExperimentConfig, out: Path, traj_dump: bool | None) -> dict:
    sys_cfg, hist, tol = cfg.system, cfg.hist, cfg.tolerances
    psi0 = cfg.initial_state()

    log.info("decoherence functional: %d times, prune %g", hist.n, cfg.prune)
    t0 = time.perf_counter()
    D = decoherence_matrix(psi0, sys_cfg, hist, cfg.prune, cfg.max_branches, cfg.decoherence_dt)
    p_dh, consistency = dh_probabilities(D, tol["eps_consistency"], tol["consistency_min_weight"])
    write_decoherence_csv(out / "decoherence_matrix.csv", D)
    write_probability_csv(out / "dh_probabilities.csv", p_dh, consistency.consistent, hist)

    t1 = time.perf_counter()
    log.info("Bohmian ensemble: N=%d, seed=%d, dt=%g", cfg.n, cfg.seed, cfg.dt)
    steps = int(round(hist.times[-1] / cfg.dt))
    snapshots = {}

    def stream():
        for psi in evolve_stream(psi0, sys_cfg, cfg.dt, steps):
            for k, t in enumerate(hist.times):
                if abs(psi.t - t) <= 1e-9 * max(1.0, t):
                    snapshots[k] = psi
            yield psi

    ens = advance_ensemble(sample_initial(psi0, cfg.n, cfg.seed), stream(), sys_cfg, cfg.dt, hist.times, tol["eps_node"])
    bm = bm_probabilities(ens, hist)
    timings = {"decoherence_s": round(t1 - t0, 3), "ensemble_s": round(time.perf_counter() - t1, 3)}
    write_bm_csv(out / "bm_probabilities.csv", bm)

    report = compare(p_dh, consistency.consistent, bm, hist.label_shape, tol["disagree_sigmas"], tol["disagree_abs"])
    tv = {_fmt(t): transport_check(ens, snapshots[k], t, tol["transport_bins"]) for k, t in enumerate(hist.times)}
    off = {}
    names = sorted(cfg.named_histories)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            la, lb = cfg.named_histories[a], cfg.named_histories[b]
            if la in D.index and lb in D.index:
                pa, pb = D[la, la].real, D[lb, lb].real
                off[f"{a}|{b}"] = abs(D[la, lb]) / np.sqrt(pa * pb) if pa > 0 and pb > 0 else 0.0
    crossings = sign_crossings(ens) if cfg.grid.dims == 2 else None
    ens_sum = ensemble_summary(ens, crossings)
    extra = {
        "consistency": {
            "consistent": consistency.consistent,
            "eps": consistency.eps,
            "min_weight": consistency.min_weight,
            "max_normalized_offdiagonal": consistency.max_normalized_offdiagonal,
            "worst_pair": [list(x) for x in consistency.worst_pair] if consistency.worst_pair else None,
        },
        "named_offdiagonal": off,
        "pruned_mass": D.pruned_mass,
        "pruned_amplitude": D.pruned_amplitude,
        "decoherence_total": D.total().real,
        "n_branches": len(D.labels),
        "dh_total_other": 1.0 - sum(p_dh.get(cfg.named_histories[k], 0.0) for k in ("alpha_plus", "alpha_minus") if k in cfg.named_histories),
        "transport_tv": tv,
        "ensemble": ens_sum,
    }
    write_comparison(out / "comparison.json", out / "comparison.csv", report, hist, cfg.named_histories, extra)
    with open(out / "ensemble_summary.json", "w") as fh:
        json.dump({**ens_sum, "transport_tv": tv}, fh, indent=2, sort_keys=True)
        fh.write("\n")

    for k, psi in sorted(snapshots.items()):
        np.save(out / f"density_t{k + 1}.npy", position_density(psi))
    write_trajectories_csv(out / "trajectories_sample.csv", ens, cfg.trajectory_sample)
    if cfg.trajectories if traj_dump is None else traj_dump:
        write_trajectories_csv(out / "trajectories.csv", ens)
    _write_tracks(out / "packet_tracks.csv", cfg)
    return {"verdict": report.verdict, "consistent": consistency.consistent, "ensemble": ens_sum, "timings": timings}


def _write_tracks(path: Path, cfg: ExperimentConfig) -> None:
    coords = ["x", "y"][: cfg.grid.dims]
    times = (0.0,) + cfg.hist.times
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["term", "t", *coords])
        for i, term in enumerate(cfg.terms):
            psi = term["state"]
            for t in times:
                if t == 0:
                    cur = psi
                elif cfg.system.is_free:
                    cur = evolve(psi, cfg.system, t, 1)
                else:
                    cur = evolve(psi, cfg.system, cfg.dt, int(round(t / cfg.dt)))
                w.writerow([i, _fmt(t), *(_fmt(c) for c in expectation_position(cur))])


def run_model(path: Path, out: Path | None) -> dict:
    """Record-identity checks for a finite-model file."""
    model = load_model(path)
    result = {"model": model.meta, "C": verify_record_correlation(model, "C").to_dict()}
    if model.bohm is not None:
        result["B"] = verify_record_correlation(model, "B").to_dict()
        result["exclusivity"] = exclusivity_check(model).to_dict()
    result["record_probabilities"] = {label_str(k): v for k, v in sorted(model.record_probabilities().items())}
    result["dh_probabilities"] = {label_str(k): v for k, v in sorted(model.dh_probabilities().items())}
    out = Path(out or Path("runs") / Path(path).stem)
    tmp = _atomic_dir(out)
    try:
        with open(tmp / "records_report.json", "w") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
            fh.write("\n")
        _commit(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return result


PLOT_INPUTS = ("run_manifest.json", "dh_probabilities.csv", "bm_probabilities.csv", "packet_tracks.csv")


def _read_probs(path: Path) -> tuple[dict, dict]:
    probs, regions = {}, {}
    with open(path) as fh:
        for row in csv.DictReader(fh):
            a = tuple(int(v) for v in row["alpha"].split())
            probs[a] = float(row["p"])
            regions[a] = row["regions"].split(";")
    return probs, regions


def emit_plotdata(run_dir) -> list[Path]:
    """Figure-ready CSVs from a finished run directory."""
    run_dir = Path(run_dir)
    missing = [f for f in PLOT_INPUTS if not (run_dir / f).is_file()]
    traj = run_dir / "trajectories.csv"
    if not traj.is_file():
        traj = run_dir / "trajectories_sample.csv"
        if not traj.is_file():
            missing.append("trajectories.csv|trajectories_sample.csv")
    if missing:
        raise MissingInputsError(f"{run_dir}: missing {', '.join(missing)}")
    manifest = json.loads((run_dir / "run_manifest.json").read_text())
    times = manifest["config"]["history"]["times"]
    threshold = manifest["tolerances"].get("plot_threshold", 0.05)

    written = []
    fig1 = run_dir / "fig1_packets.csv"
    shutil.copyfile(run_dir / "packet_tracks.csv", fig1)
    written.append(fig1)
    for src, name in (("dh_probabilities.csv", "fig2_dh_squares.csv"), ("bm_probabilities.csv", "fig3_bm_squares.csv")):
        probs, regions = _read_probs(run_dir / src)
        dest = run_dir / name
        with open(dest, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "alpha", "p", "k", "t", "region"])
            for rank, (a, p) in enumerate(high_probability_sequences(probs, threshold)):
                for k, (t, r) in enumerate(zip(times, regions[a])):
                    w.writerow([rank, label_str(a), _fmt(p), k + 1, _fmt(t), r])
        written.append(dest)
    sample = run_dir / "traj_sample.csv"
    shutil.copyfile(traj, sample)
    written.append(sample)
    return written


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="histlab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"histlab {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config or a finite-model file")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (overrides the config)")
    r.add_argument("--seed", type=int, help="override the ensemble seed")
    r.add_argument("--threads", type=int, default=1, help="FFT worker threads")
    r.add_argument("--traj-dump", action="store_true", default=None, help="write every trajectory to trajectories.csv")

    p = sub.add_parser("preset", help="write a pinned preset file")
    p.add_argument("name", choices=sorted(PRESETS))
    p.add_argument("--out", help="destination (default: presets/<name>.json)")

    e = sub.add_parser("emit-plotdata", help="figure CSVs from a finished run")
    e.add_argument("run_dir")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if args.command == "preset":
            path = write_preset(args.name, args.out or f"presets/{args.name}.json")
            print(path)
        elif args.command == "emit-plotdata":
            for path in emit_plotdata(args.run_dir):
                print(path)
        else:
            qstate.FFT_WORKERS = max(1, args.threads)
            with open(args.config) as fh:
                head = json.load(fh) if args.config.endswith(".json") else None
            if isinstance(head, dict) and head.get("kind") == "finite_model":
                result = run_model(Path(args.config), args.out)
                print(json.dumps({k: result[k] for k in result if k in ("C", "B", "exclusivity")}, indent=2))
            else:
                cfg = load_config(args.config)
                if args.seed is not None:
                    cfg.seed = args.seed
                    cfg.raw.setdefault("ensemble", {})["seed"] = args.seed
                summary = run_experiment(cfg, Path(args.out) if args.out else None, args.traj_dump)
                print(json.dumps(summary, indent=2))
    except (ConfigError, ModelError, KeyError) as exc:
        print(f"histlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except json.JSONDecodeError as exc:
        print(f"histlab: config error: {args.config}:{exc.lineno}: malformed JSON: {exc.msg}", file=sys.stderr)
        return EXIT_CONFIG
    except (BranchExplosionError, SuperpositionError, FloatingPointError) as exc:
        print(f"histlab: numerical guard {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_GUARD
    except OSError as exc:
        print(f"histlab: io error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
