import json
import math

import numpy as np
import pytest

from surfchart import metrics
from surfchart.metrics import (BIN_EDGES, MetricUndefined, consistency_error, corr_error,
                               discontinuity_histogram, discontinuity_score, recon_error)
from surfchart.synthcam.render import NocsMap

import oracles

N_INSTANCES = 60


def _instances(seed):
    rng = np.random.default_rng(seed)
    for _ in range(N_INSTANCES):
        h, w = rng.integers(4, 16, size=2)  # at most 225 pixels
        yield rng, int(h), int(w)


def test_recon_error_matches_pairwise_chamfer():
    worst = 0.0
    for rng, h, w in _instances(1):
        p = rng.random((rng.integers(1, 300), 3))
        g = rng.random((rng.integers(1, 300), 3))
        worst = max(worst, abs(recon_error(p, g) - oracles.chamfer(p, g)))
    assert worst < 1e-12


def test_recon_error_is_zero_on_identical_sets_and_symmetric():
    rng = np.random.default_rng(0)
    p, g = rng.random((50, 3)), rng.random((70, 3))
    assert recon_error(p, p) == 0.0
    assert recon_error(p, g) == pytest.approx(recon_error(g, p), abs=1e-15)


def test_recon_error_empty_inputs_are_undefined():
    with pytest.raises(MetricUndefined) as exc:
        recon_error(np.zeros((0, 3)), np.ones((4, 3)))
    assert exc.value.reason == "empty_prediction"
    with pytest.raises(MetricUndefined) as exc:
        recon_error(np.ones((4, 3)), np.zeros((0, 3)))
    assert exc.value.reason == "empty_ground_truth"


def test_corr_error_matches_pixel_loop():
    worst = 0.0
    for rng, h, w in _instances(2):
        a, b = oracles.random_map(rng, h, w, 0.8), oracles.random_map(rng, h, w, 0.8)
        if not (a.valid & b.valid).any():
            continue
        worst = max(worst, abs(corr_error(a, b) - oracles.corr(a, b)))
    assert worst < 1e-12


def test_corr_error_disjoint_masks_are_undefined():
    valid = np.zeros((4, 4), bool)
    valid[0] = True
    a = NocsMap(np.zeros((4, 4, 3)), valid)
    b = NocsMap(np.zeros((4, 4, 3)), ~valid)
    with pytest.raises(MetricUndefined):
        corr_error(a, b)


def test_consistency_error_matches_all_pairs_loop():
    worst, checked = 0.0, 0
    for rng, h, w in _instances(3):
        n_views = int(rng.integers(2, 4))
        # coarse gt values so that many cross-view pairs fall within eps
        gts = []
        for _ in range(n_views):
            m = oracles.random_map(rng, h, w, 0.7)
            gts.append(NocsMap(np.round(m.coords * 4) / 4, m.valid))
        preds = [oracles.random_map(rng, h, w, 0.9) for _ in range(n_views)]
        eps = 0.3
        try:
            got = consistency_error(preds, gts, eps)
        except MetricUndefined:
            continue
        worst = max(worst, abs(got - oracles.consistency(preds, gts, eps)))
        view = int(rng.integers(0, n_views))
        try:
            got_v = consistency_error(preds, gts, eps, view=view)
        except MetricUndefined:
            continue
        worst = max(worst, abs(got_v - oracles.consistency(preds, gts, eps, view)))
        checked += 1
    assert checked >= 50
    assert worst < 1e-12


def test_consistency_error_needs_two_views():
    m = NocsMap(np.zeros((2, 2, 3)), np.ones((2, 2), bool))
    with pytest.raises(MetricUndefined):
        consistency_error([m], [m])


def test_discontinuity_histogram_matches_neighbour_loop():
    for rng, h, w in _instances(4):
        m = oracles.random_map(rng, h, w, 0.8, jumpy=True)
        got = discontinuity_histogram(m)
        np.testing.assert_array_equal(got.counts, oracles.histogram(m))
        np.testing.assert_allclose(got.bin_edges[[0, -1]], [0.05, math.sqrt(3)])
        assert len(got.counts) == 20


def test_discontinuity_score_matches_formula():
    worst = 0.0
    for rng, h, w in _instances(5):
        a = oracles.random_map(rng, h, w, 0.8, jumpy=True)
        b = oracles.random_map(rng, h, w, 0.8, jumpy=True)
        ha, hb = oracles.histogram(a), oracles.histogram(b)
        got = discontinuity_score(discontinuity_histogram(a), discontinuity_histogram(b))
        worst = max(worst, abs(got - oracles.score(ha, hb)))
    assert worst < 1e-12


def test_discontinuity_score_edge_cases():
    z = np.zeros(20)
    one = np.eye(20)[3]
    assert discontinuity_score(z, z) == 1.0
    assert discontinuity_score(z, one) == 0.0
    assert discontinuity_score(one, z) == 0.0
    # identical histograms score sum of squared bin shares, 1 only for a single spike
    assert discontinuity_score(one, one) == 1.0
    two = np.eye(20)[3] + np.eye(20)[5]
    assert discontinuity_score(two, two) == pytest.approx(0.5)


def test_smooth_map_has_empty_histogram():
    r, c = np.mgrid[0:8, 0:8]
    coords = np.stack([r / 400, c / 400, np.zeros_like(r, float)], -1)
    m = NocsMap(coords, np.ones((8, 8), bool))
    assert discontinuity_histogram(m).total == 0


def test_bin_edges_layout():
    assert len(BIN_EDGES) == 21
    assert np.all(np.diff(BIN_EDGES) > 0)


def test_evaluate_ground_truth_as_prediction(tiny_dataset, tmp_path):
    preds = {(v.shape_id, v.view_id): v.nocs_visible for v in tiny_dataset.views()}
    report = metrics.evaluate(preds, tiny_dataset)
    assert report.mean("E_rec") == 0.0
    assert report.mean("E_corr") == 0.0
    assert report.mean("E_cons") < 1e-6  # matched pixels differ by less than eps
    report.write(tmp_path)
    data = json.loads((tmp_path / "report.json").read_text())
    assert set(data["aggregates"]["overall"]) >= {"E_rec", "E_corr", "E_cons", "S_cont"}
    assert (tmp_path / "report.csv").read_text().startswith("shape_id,view_id,family")


def test_evaluate_records_missing_views(tiny_dataset):
    views = tiny_dataset.views()
    preds = {(v.shape_id, v.view_id): v.nocs_visible for v in views[1:]}
    report = metrics.evaluate(preds, tiny_dataset)
    assert report.missing == [{"shape_id": views[0].shape_id, "view_id": views[0].view_id}]
    first = report.records[0]
    assert first["E_rec"] is None and first["missing"]["E_rec"] == "missing_prediction"
    assert report.aggregates["overall"]["E_rec"]["missing"] == 1


def test_evaluate_scores_hidden_layer(tiny_dataset):
    preds = {(v.shape_id, v.view_id): {"visible": v.nocs_visible, "hidden": v.nocs_hidden}
             for v in tiny_dataset.views()}
    report = metrics.evaluate(preds, tiny_dataset)
    assert report.mean("E_rec_hidden") == 0.0


def test_evaluate_centroid_baseline_is_large(tiny_dataset):
    preds = {}
    for v in tiny_dataset.views():
        gt = v.nocs_visible
        centroid = gt.points.mean(axis=0)
        preds[(v.shape_id, v.view_id)] = NocsMap(
            np.where(gt.valid[..., None], centroid, 0.0), gt.valid.copy())
    assert metrics.evaluate(preds, tiny_dataset).mean("E_rec") > 1e-2
