"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (the summary lines are
printed at the end of the session) or directly as a script.  The mirror-packet
run is shared by criteria 1, 2 and 4 and takes several minutes.
"""
import itertools
import json
import time
from contextlib import contextmanager

import numpy as np
import pytest

from histlab.bohm import advance_ensemble, continuity_residual, sample_initial
from histlab.cli import main, run_experiment
from histlab.config import parse_config
from histlab.histories import (
    HistorySpec,
    chain_apply,
    decoherence_matrix,
    dh_probabilities,
    make_partition,
)
from histlab.presets import preset
from histlab.qstate import (
    GridSpec,
    SystemConfig,
    evolve,
    evolve_stream,
    gaussian_width,
    init_gaussian,
)
from histlab.records import (
    build_bessw_analog,
    build_copy_model,
    exclusivity_check,
    verify_record_correlation,
)

#: criterion number -> summary line, printed by the terminal-summary hook in conftest
ACCEPTANCE_RESULTS: dict[int, str] = {}
RESULTS = ACCEPTANCE_RESULTS


@contextmanager
def criterion(num: int, title: str):
    """Record a PASS/FAIL line for ``num``; a later failure overrides an earlier pass."""
    details: list[str] = []
    try:
        yield details
    except BaseException as exc:
        RESULTS[num] = f"FAIL criterion {num}: {title} ({'; '.join(details)}) -- {exc}".replace("\n", " ")
        print(RESULTS[num])
        raise
    if not RESULTS.get(num, "").startswith("FAIL"):
        RESULTS[num] = f"PASS criterion {num}: {title} ({'; '.join(details)})"
    print(RESULTS[num])


@pytest.fixture(scope="module")
def bessw(tmp_path_factory):
    raw = preset("bessw")
    cfg = parse_config(raw)
    out = tmp_path_factory.mktemp("accept") / "bessw"
    summary = run_experiment(cfg, out)
    comparison = json.loads((out / "comparison.json").read_text())
    manifest = json.loads((out / "run_manifest.json").read_text())
    return {"cfg": cfg, "out": out, "summary": summary, "comparison": comparison, "manifest": manifest}


# --- 1 -------------------------------------------------------------------

def test_criterion_1_bessw_decoherent_histories(bessw):
    c = bessw["comparison"]
    with criterion(1, "mirror-packet decoherent-histories probabilities") as d:
        h = c["headline"]
        p_plus, p_minus = h["alpha_plus"]["p_dh"], h["alpha_minus"]["p_dh"]
        other = c["dh_total_other"]
        off = c["named_offdiagonal"]["alpha_minus|alpha_plus"]
        secs = bessw["manifest"]["timings"]["decoherence_s"]
        d += [f"p+={p_plus:.4f}", f"p-={p_minus:.4f}", f"other={other:.2e}", f"offdiag={off:.2e}", f"{secs:.0f}s"]
        assert 0.48 <= p_plus <= 0.52
        assert 0.48 <= p_minus <= 0.52
        assert other < 0.02
        assert off < 0.05
        assert secs < 300


# --- 2 -------------------------------------------------------------------

def test_criterion_2_bessw_bohmian(bessw):
    c = bessw["comparison"]
    with criterion(2, "mirror-packet Bohmian probabilities") as d:
        h = c["headline"]
        crossing = h["alpha_plus"]["p_bm"] + h["alpha_minus"]["p_bm"]
        up, low = h["reflected_upper"]["p_bm"], h["reflected_lower"]["p_bm"]
        ens = c["ensemble"]
        rescued = ens["node_rescued"] / ens["N"]
        secs = bessw["manifest"]["timings"]["ensemble_s"]
        d += [
            f"p(a+)+p(a-)={crossing:.2e}",
            f"reflected={up:.4f},{low:.4f}",
            f"crossings={ens['crossings']}",
            f"rescued={rescued:.1e}",
            f"{secs:.0f}s",
        ]
        assert ens["N"] == 100_000
        assert crossing < 0.02
        assert 0.48 <= up <= 0.52
        assert 0.48 <= low <= 0.52
        assert ens["crossings"] == 0
        assert rescued < 1e-3
        assert secs < 600
        assert c["verdict"] == "disagree"


# --- 3 -------------------------------------------------------------------

def test_criterion_3_single_time_agreement():
    raw = preset("single-time")
    cfg = parse_config(raw)
    sys_cfg, grid, dt = cfg.system, cfg.grid, cfg.dt
    psi0 = cfg.initial_state()
    times = (10.0, 20.0, 30.0)
    partitions = [
        make_partition(grid, raw["history"]["partition"]),
        make_partition(grid, {"kind": "tiling", "side": 7.0, "origin": 0.0}),
    ]
    frames = list(evolve_stream(psi0, sys_cfg, dt, int(round(times[-1] / dt))))
    # single-time probabilities straight from the projected states
    dh = {}
    for t in times:
        for j, part in enumerate(partitions):
            D = decoherence_matrix(psi0, sys_cfg, HistorySpec((t,), (part,)), prune=0.0)
            dh[t, j] = dh_probabilities(D)[0]
    n = cfg.n
    within = total = 0
    worst = 0.0
    for seed in range(10):
        ens = advance_ensemble(sample_initial(psi0, n, 1000 + seed), iter(frames), sys_cfg, dt, times, cfg.tolerances["eps_node"])
        keep = ~ens.rescued
        m = int(keep.sum())
        for t in times:
            pos = ens.at(t)[keep]
            for j, part in enumerate(partitions):
                counts = np.bincount(part.label_of(pos), minlength=part.n_regions)
                for k in range(part.n_regions):
                    p = dh[t, j].get((k,), 0.0)
                    sigma = np.sqrt(max(p * (1 - p), 0.0) / m)
                    diff = abs(counts[k] / m - p)
                    ok = diff <= 3 * sigma if sigma > 0 else diff == 0
                    within += ok
                    total += 1
                    if sigma > 0:
                        worst = max(worst, diff / sigma)
    frac = within / total
    with criterion(3, "single-time agreement") as d:
        d += [f"{within}/{total} within 3 sigma ({frac:.3f})", f"worst {worst:.2f} sigma", "3 times x 2 partitions x 10 seeds"]
        assert frac >= 0.95


# --- 4 -------------------------------------------------------------------

def _bessw_frames(raw, points, dt, t):
    cfg = parse_config({**raw, "grid": {"extent": raw["grid"]["extent"], "points": [points, points]}})
    psi = evolve(cfg.initial_state(), cfg.system, t - dt, 1)
    return cfg.system, [psi, evolve(psi, cfg.system, dt, 1), evolve(psi, cfg.system, 2 * dt, 1)]


def test_criterion_4_equivariance_and_continuity(bessw):
    tv = bessw["comparison"]["transport_tv"]
    raw = preset("bessw")
    mid = 0.5 * raw["history"]["times"][-1]
    dt = raw["ensemble"]["dt"]
    sys_cfg, frames = _bessw_frames(raw, 1024, dt, mid)
    r = continuity_residual(frames, sys_cfg, mid)
    _, frames_dt = _bessw_frames(raw, 1024, dt / 2, mid)
    r_dt = continuity_residual(frames_dt, sys_cfg, mid)
    _, frames_coarse = _bessw_frames(raw, 512, dt, mid)
    r_coarse = continuity_residual(frames_coarse, sys_cfg, mid)
    with criterion(4, "equivariance and continuity") as d:
        d += [
            f"max TV={max(tv.values()):.4f}",
            f"residual(t={mid:g})={r:.2e}",
            f"dt/2 -> {r_dt:.2e}",
            f"512^2 grid -> {r_coarse:.2e}",
        ]
        assert len(tv) == 7
        assert all(v < 0.02 for v in tv.values())
        assert r < 1e-2
        assert r_dt < r
        assert r < r_coarse


# --- 5 -------------------------------------------------------------------

def test_criterion_5_analytic_free_trajectory():
    sys_cfg = SystemConfig()
    grid = GridSpec((200.0,), (1024,))
    sigma = 4.0
    t_double = 2 * np.sqrt(3) * sys_cfg.mass * sigma**2 / sys_cfg.hbar
    dt = 0.05
    steps = int(np.ceil(t_double / dt))
    psi = init_gaussian(grid, sys_cfg, (0.0,), (0.0,), sigma)
    x0 = np.array([-6.0, -4.0, -2.0, -1.0, -0.5, 0.5, 1.0, 2.0, 4.0, 6.0])
    ens = sample_initial(psi, 0, 0)
    ens.initial = x0.reshape(-1, 1)
    ens.status = np.zeros(len(x0), dtype=np.int8)
    ens = advance_ensemble(ens, evolve_stream(psi, sys_cfg, dt, steps), sys_cfg, dt, (steps * dt,), keep_paths=True)
    t = ens.path_times
    exact = x0[None, :] * (gaussian_width(sigma, sys_cfg, t) / sigma)[:, None]
    rel = np.abs(ens.paths[..., 0] - exact) / np.abs(exact)
    with criterion(5, "analytic free-packet trajectory") as d:
        d += [f"max relative error {rel.max():.2e} over t in [0, {t[-1]:.2f}]", f"width ratio {gaussian_width(sigma, sys_cfg, t[-1]) / sigma:.3f}"]
        assert t[-1] >= t_double
        assert rel.max() < 1e-3


# --- 6 -------------------------------------------------------------------

def test_criterion_6_record_identities():
    start = time.perf_counter()
    worst = 0.0
    cases = 0
    for K, n in itertools.product((1, 2, 3), (1, 2, 3)):
        model = build_copy_model(K, n)
        rep = verify_record_correlation(model, "C")
        worst = max(worst, rep.max_off_correlation, rep.summed_identity_residual, rep.probability_residual)
        rec = model.record_probabilities()
        dh = model.dh_probabilities()
        worst = max(worst, max(abs(rec.get(a, 0.0) - p) for a, p in dh.items()))
        cases += 1
    secs = time.perf_counter() - start
    with criterion(6, "record identities in the copy model") as d:
        d += [f"{cases} models K,n<=3", f"max residual {worst:.1e}", f"{secs:.2f}s"]
        assert worst < 1e-12
        assert secs < 1.0


# --- 7 -------------------------------------------------------------------

def test_criterion_7_exclusivity():
    outcomes = {}
    for records in ("C", "B"):
        rep = exclusivity_check(build_bessw_analog(records))
        outcomes[records] = rep
    with criterion(7, "exclusivity of record families") as d:
        for name, rep in outcomes.items():
            d.append(f"{name}-records: C={rep.c_condition} B={rep.b_condition} gap={rep.max_probability_gap:.2f}")
        for name, rep in outcomes.items():
            assert rep.probabilities_differ
            assert rep.c_condition != rep.b_condition
            assert rep.theorem_holds
        assert outcomes["C"].c_condition and outcomes["B"].b_condition


# --- 8 -------------------------------------------------------------------

SMALL = {
    "kind": "experiment",
    "grid": {"extent": [64.0, 64.0], "points": [64, 64]},
    "initial_state": {
        "terms": [
            {"coefficient": [0.7071067811865476, 0.0], "center": [-12.0, 10.0], "momentum": [0.8, -0.8], "sigma": 3.0},
            {"coefficient": [0.7071067811865476, 0.0], "center": [-12.0, -10.0], "momentum": [0.8, 0.8], "sigma": 3.0},
        ]
    },
    "history": {"times": [5.0, 12.0], "partition": {"kind": "tiling", "side": 8.0, "origin": 4.0}},
    "ensemble": {"n": 3000, "seed": 5, "dt": 0.25},
    "decoherence": {"prune": 0.0, "max_branches": 20000},
}


def test_criterion_8_properties(tmp_path):
    sys_cfg = SystemConfig()
    cfg = parse_config(SMALL)
    grid = cfg.grid
    psi0 = cfg.initial_state()

    part = cfg.hist.partitions[0]
    rng = np.random.default_rng(8)
    field = rng.normal(size=grid.shape) + 1j * rng.normal(size=grid.shape)
    masks = [part.labels == k for k in range(part.n_regions)]
    total = sum(masks)
    algebra = max(
        int(np.any(total != 1)),
        max(float(np.max(np.abs(m * (m * field) - m * field))) for m in masks),
        max(float(np.max(np.abs(a * (b * field)))) for a, b in itertools.permutations(masks[:6], 2)),
    )

    unitarity = 0.0
    psi = psi0
    V = 0.01 * sum(x**2 for x in np.meshgrid(*grid.axes(), indexing="ij"))
    harmonic = SystemConfig(potential=V)
    for _ in range(20):
        nxt = evolve(psi, harmonic, 0.1, 1)
        unitarity = max(unitarity, abs(nxt.norm2() - psi.norm2()))
        psi = nxt

    D = decoherence_matrix(psi0, sys_cfg, cfg.hist, prune=0.0)
    herm = D.hermiticity_error()
    sum_rule = abs(D.total() - 1)
    final = evolve(psi0, sys_cfg, cfg.hist.times[-1], 1)
    branches = sum(chain_apply(psi0, sys_cfg, cfg.hist, a).amplitudes for a in D.labels)
    resolution = float(np.max(np.abs(branches - final.amplitudes)))

    cfg_path = tmp_path / "small.json"
    cfg_path.write_text(json.dumps(SMALL))
    codes = [main(["run", str(cfg_path), "--out", str(tmp_path / name)]) for name in ("a", "b")]
    names = ["dh_probabilities.csv", "bm_probabilities.csv", "comparison.csv", "decoherence_matrix.csv", "trajectories_sample.csv"]
    identical = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in names)

    with criterion(8, "property suites") as d:
        d += [
            f"projector algebra {algebra:.1e}",
            f"unitarity {unitarity:.1e}/step",
            f"hermiticity {herm:.1e}",
            f"sum rule {sum_rule:.1e}",
            f"branch resolution {resolution:.1e}",
            f"reruns identical={identical}",
        ]
        assert algebra == 0
        assert unitarity < 1e-10
        assert herm < 1e-12
        assert sum_rule < 1e-9
        assert resolution < 1e-9
        assert codes == [0, 0] and identical


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v", "-s"]))
