import csv
import json

import numpy as np
import pytest

from histlab.bohm import NODE_RESCUED, TrajectoryEnsemble, advance_ensemble, sample_initial
from histlab.bohmhist import (
    BohmHistogram,
    LabelSpaceError,
    bm_probabilities,
    classify_ensemble,
    classify_trajectory,
    compare,
    high_probability_sequences,
    initial_cell,
    write_bm_csv,
    write_comparison,
)
from histlab.histories import HistorySpec, decoherence_matrix, dh_probabilities, make_partition
from histlab.qstate import GridSpec, evolve_stream, init_gaussian, superpose


@pytest.fixture
def g():
    return GridSpec((32.0, 32.0), (32, 32))


@pytest.fixture
def tiles(g):
    return make_partition(g, {"kind": "tiling", "side": 8.0, "origin": 0.0})


def ensemble(g, tracks, status=None):
    tracks = np.asarray(tracks, dtype=float)  # (N, n_times + 1, dims)
    n_times = tracks.shape[1] - 1
    return TrajectoryEnsemble(
        g, 0, tracks[:, 0], tuple(float(k + 1) for k in range(n_times)), np.swapaxes(tracks[:, 1:], 0, 1), status
    )


def test_stationary_trajectory_has_constant_label(g, tiles):
    hist = HistorySpec((1.0, 2.0, 3.0), tiles)
    lab = classify_trajectory([[3.0, 3.0]] * 3, hist)
    assert len(set(lab)) == 1


def test_edge_points_go_to_lower_inclusive_region(g, tiles):
    hist = HistorySpec((1.0,), tiles)
    assert hist.names(classify_trajectory([[8.0, 0.0]], hist)) == ("1:0",)
    # regions are unions of cells: a point takes the region of its cell
    assert hist.names(classify_trajectory([[7.4, -0.6]], hist)) == ("0:-1",)
    assert hist.names(classify_trajectory([[7.6, -0.4]], hist)) == ("1:0",)


def test_classify_ensemble_checks_times(g, tiles):
    ens = ensemble(g, [[[0, 0], [1, 1], [2, 2]]])
    assert classify_ensemble(ens, HistorySpec((1.0, 2.0), tiles)).shape == (1, 2)
    with pytest.raises(ValueError):
        classify_ensemble(ens, HistorySpec((1.0, 3.0), tiles))
    with pytest.raises(ValueError):
        classify_ensemble(ens, HistorySpec((1.0,), tiles))


def test_histogram_partitions_ensemble(g, tiles):
    rng = np.random.default_rng(3)
    tracks = rng.uniform(-15, 15, size=(500, 3, 2))
    status = np.zeros(500, dtype=np.int8)
    status[:7] = NODE_RESCUED
    hist = HistorySpec((1.0, 2.0), tiles)
    bm = bm_probabilities(ensemble(g, tracks, status), hist)
    assert bm.n == 493 and bm.excluded == 7
    assert sum(bm.counts.values()) == bm.n
    assert sum(bm.probabilities.values()) == pytest.approx(1.0, abs=1e-15)
    a = next(iter(bm.counts))
    assert bm.stderr(a) == pytest.approx(np.sqrt(bm.p(a) * (1 - bm.p(a)) / bm.n))
    assert bm.p((99, 99)) == 0.0


def test_merge_is_additive(g, tiles):
    rng = np.random.default_rng(4)
    hist = HistorySpec((1.0, 2.0), tiles)
    bm = bm_probabilities(ensemble(g, rng.uniform(-15, 15, size=(800, 3, 2))), hist)
    groups = {k: k % 2 for k in range(tiles.n_regions)}
    merged = bm.merge(1, groups)
    assert sum(merged.counts.values()) == sum(bm.counts.values())
    for (a0, a1), c in merged.counts.items():
        assert c == sum(v for (b0, b1), v in bm.counts.items() if b0 == a0 and b1 % 2 == a1)
    assert merged.label_shape == (tiles.n_regions, tiles.n_regions)
    assert bm.merge(0, {0: 20}).label_shape == (21, tiles.n_regions)


def test_empty_and_all_rescued(g, tiles):
    hist = HistorySpec((1.0,), tiles)
    with pytest.raises(ValueError, match="empty"):
        bm_probabilities(ensemble(g, np.zeros((0, 2, 2))), hist)
    with pytest.raises(ValueError, match="rescued"):
        bm_probabilities(ensemble(g, np.zeros((3, 2, 2)), np.ones(3, dtype=np.int8)), hist)


def test_initial_cell(g, tiles):
    rng = np.random.default_rng(5)
    tracks = rng.uniform(-15, 15, size=(300, 2, 2))
    ens = ensemble(g, tracks)
    single = HistorySpec((1.0,), make_partition(g, {"kind": "single"}))
    assert np.array_equal(initial_cell(ens, single, (0,)), ens.initial)
    hist = HistorySpec((1.0,), tiles)
    bm = bm_probabilities(ens, hist)
    for a in bm.counts:
        assert len(initial_cell(ens, hist, a)) / ens.n == bm.p(a)


def test_compare_identity_and_verdicts(g, tiles):
    hist = HistorySpec((1.0,), make_partition(g, {"kind": "halfplane", "axis": 1}))
    tracks = np.zeros((1000, 2, 2))
    tracks[:600, :, 1] = -5.0
    tracks[600:, :, 1] = 5.0
    bm = bm_probabilities(ensemble(g, tracks), hist)
    same = compare({(0,): 0.6, (1,): 0.4}, True, bm)
    assert same.verdict == "agree" and all(r.diff == 0 for r in same.rows)
    # far in sigmas but under the absolute floor: still agree
    close = compare({(0,): 0.64, (1,): 0.36}, True, bm)
    assert close.verdict == "agree" and close.row((0,)).sigmas > 2
    far = compare({(0,): 0.2, (1,): 0.8}, True, bm)
    assert far.verdict == "disagree"
    with pytest.raises(LabelSpaceError):
        compare({(5,): 1.0}, True, bm)
    with pytest.raises(LabelSpaceError):
        compare({(0,): 1.0}, True, bm, label_shape=(3,))


def test_significance_undefined_without_mc_error(g):
    hist = HistorySpec((1.0,), make_partition(g, {"kind": "halfplane", "axis": 1}))
    tracks = np.zeros((10, 2, 2))
    tracks[:, :, 1] = 5.0
    bm = bm_probabilities(ensemble(g, tracks), hist)
    rep = compare({(0,): 0.5, (1,): 0.5}, True, bm)
    assert rep.row((1,)).mc_err == 0 and rep.row((1,)).sigmas is None
    assert rep.verdict == "agree"


def test_single_time_agreement_small(free):
    grid = GridSpec((128.0,), (512,))
    a = init_gaussian(grid, free, (-20.0,), (1.0,), 4.0)
    b = init_gaussian(grid, free, (20.0,), (-1.0,), 4.0)
    psi = superpose([(0.6, a), (0.8, b)])[0]
    part = make_partition(grid, {"kind": "intervals", "axis": 0, "edges": [-20.0, -5.0, 5.0, 20.0]})
    hist = HistorySpec((14.0,), part)
    p_dh, rep = dh_probabilities(decoherence_matrix(psi, free, hist))
    ens = advance_ensemble(sample_initial(psi, 20_000, 21), evolve_stream(psi, free, 0.1, 140), free, 0.1, hist.times)
    cmp = compare(p_dh, rep.consistent, bm_probabilities(ens, hist), hist.label_shape)
    assert rep.consistent and cmp.verdict == "agree"
    assert max(r.sigmas for r in cmp.rows if r.sigmas is not None) < 4.5


def test_writers(tmp_path, g, tiles):
    rng = np.random.default_rng(6)
    hist = HistorySpec((1.0,), tiles)
    bm = bm_probabilities(ensemble(g, rng.uniform(-15, 15, size=(200, 2, 2))), hist)
    rep = compare({a: 1 / 16 for a in hist.labels()}, True, bm)
    write_bm_csv(tmp_path / "bm.csv", bm)
    write_comparison(tmp_path / "c.json", tmp_path / "c.csv", rep, hist, {"first": (0,)}, {"extra": 1.23456789012345678})
    rows = list(csv.DictReader(open(tmp_path / "bm.csv")))
    assert sum(int(r["count"]) for r in rows) == 200
    data = json.loads((tmp_path / "c.json").read_text())
    assert data["verdict"] == rep.verdict and data["extra"] == 1.23456789012
    assert data["headline"]["first"]["alpha"] == [0]
    crow = list(csv.DictReader(open(tmp_path / "c.csv")))
    assert list(crow[0]) == ["alpha", "p_dh", "p_bm", "mc_err", "sigmas", "verdict"]
    assert len(crow) == 16


def test_high_probability_sequences():
    probs = {(0, 1): 0.49, (1, 0): 0.49, (0, 0): 0.01, (2, 2): 0.01}
    assert high_probability_sequences(probs) == [((0, 1), 0.49), ((1, 0), 0.49)]
    assert high_probability_sequences(probs, 0.5) == []
