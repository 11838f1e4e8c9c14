import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from depthfuse.evaluation import (PSNR_CAP, ConsistencyReport, EstimatorParams, circular_differences,
                                  color_variance, consistency_variance, estimate_azimuths,
                                  foreground_color, psnr, report_from_azimuths)
from depthfuse.numerics import SeededRng
from depthfuse.renderer import RenderedImage
from depthfuse.shapes import symmetric_field

TAU = 2 * math.pi


def _bank(n, shape=(4, 4, 3), seed=0):
    imgs = SeededRng(seed).uniform((n, *shape))
    return [(TAU * j / n, imgs[j]) for j in range(n)]


def test_self_match_returns_template_azimuths():
    bank = _bank(12)
    est = estimate_azimuths([img for _, img in bank], bank, tie_tolerance=0.0)
    assert est == [a for a, _ in bank]


def test_bank_order_does_not_matter():
    bank = _bank(8)
    shuffled = [bank[i] for i in (3, 0, 7, 1, 5, 2, 6, 4)]
    frames = [bank[i][1] for i in (2, 5)]
    assert estimate_azimuths(frames, shuffled, 0.0) == estimate_azimuths(frames, bank, 0.0)


def test_periodic_appearance_folds_onto_first_period():
    # two-fold appearance: template j and j + n/2 are identical
    n = 8
    half = SeededRng(1).uniform((n // 2, 4, 4, 3))
    bank = [(TAU * j / n, half[j % (n // 2)]) for j in range(n)]
    est = estimate_azimuths([bank[j][1] for j in range(n)], bank)
    assert est == [TAU * (j % (n // 2)) / n for j in range(n)]
    report = report_from_azimuths(est)
    # three steps of 1/8 and one jump of -3/8 per period
    assert np.allclose(report.differences, [0.125, 0.125, 0.125, -0.375] * 2)
    assert report.variance == pytest.approx(np.var([0.125, 0.125, 0.125, -0.375]))


def test_near_tie_within_tolerance_folds_but_beyond_does_not():
    n = 4
    base = SeededRng(2).uniform((2, 4, 4, 3))
    bump = 0.5 / 255.0
    bank = [(0.0, base[0]), (TAU / 4, base[1]), (TAU / 2, base[0] + bump), (3 * TAU / 4, base[1])]
    frame = base[0] + bump
    assert estimate_azimuths([frame], bank, tie_tolerance=1.0 / 255.0) == [0.0]
    assert estimate_azimuths([frame], bank, tie_tolerance=0.0) == [TAU / 2]


def test_tied_arc_is_represented_by_its_best_entry():
    # templates 1..3 form one tied arc; the arc's best entry is template 2
    n = 8
    imgs = [np.full((2, 2, 3), v) for v in (0.9, 0.51, 0.5, 0.505, 0.9, 0.9, 0.9, 0.9)]
    bank = [(TAU * j / n, imgs[j]) for j in range(n)]
    est = estimate_azimuths([np.full((2, 2, 3), 0.5)], bank, tie_tolerance=0.02)
    assert est == [TAU * 2 / n]


def test_estimator_rejects_bad_banks_and_shapes():
    with pytest.raises(ValueError):
        estimate_azimuths([np.zeros((4, 4, 3))], [])
    with pytest.raises(ValueError):
        estimate_azimuths([np.zeros((4, 4, 3))] * 8, _bank(4))
    with pytest.raises(ValueError):
        estimate_azimuths([np.zeros((5, 4, 3))], _bank(4))


def test_circular_differences_by_hand():
    assert np.allclose(circular_differences([0.9, 0.1, 0.3]), [0.2, 0.2, -0.4])
    assert np.allclose(circular_differences([0.0, 0.5]), [-0.5, -0.5])


def test_ideal_estimates_have_zero_variance():
    n = 100
    report = report_from_azimuths([TAU * k / n for k in range(n)])
    assert report.frame_count == n
    assert np.allclose(report.differences, 0.01)
    assert report.variance < 1e-28


@given(st.lists(st.floats(0, TAU), min_size=2, max_size=40), st.floats(-20.0, 20.0))
@settings(max_examples=50, deadline=None)
def test_variance_invariant_to_azimuth_offset(azimuths, offset):
    a = report_from_azimuths(azimuths)
    b = report_from_azimuths([x + offset for x in azimuths])
    assert b.variance == pytest.approx(a.variance, abs=1e-12)
    assert all(-0.5 <= d < 0.5 for d in b.differences)
    assert all(0.0 <= t < 1.0 for t in b.azimuths)


def test_report_json_and_csv():
    report = report_from_azimuths([0.0, TAU / 3, 2 * TAU / 3], {"bank_factor": 2})
    data = json.loads(report.to_json())
    assert data["frame_count"] == 3
    assert data["estimator"] == {"bank_factor": 2}
    assert ConsistencyReport(**data) == report
    rows = list(csv.reader(io.StringIO(report.to_csv())))
    assert rows[0] == ["frame", "est_azimuth", "adj_diff"]
    assert len(rows) == 4
    assert [float(r[1]) for r in rows[1:]] == report.azimuths


def test_report_validation():
    with pytest.raises(ValueError):
        ConsistencyReport([0.0, 0.5], [0.5], 0.0, 2)
    with pytest.raises(ValueError):
        ConsistencyReport([0.0], [0.0], -1.0, 1)


def test_estimator_params_validation():
    with pytest.raises(ValueError):
        EstimatorParams(tie_tolerance=-1.0)
    with pytest.raises(ValueError):
        EstimatorParams(bank_factor=0)


def test_four_fold_field_folds_onto_quarter_turn():
    params = EstimatorParams(image_size=16, steps_per_ray=16)
    report = consistency_variance(symmetric_field(12, folds=4), 16, math.radians(30.0), params)
    assert max(report.azimuths) < 0.25 + 1e-9
    assert report.variance > 1e-3


def test_psnr_values():
    a = np.full((4, 4, 3), 0.3)
    assert psnr(a, a) == PSNR_CAP
    assert psnr(np.zeros((4, 4, 3)), np.ones((4, 4, 3))) == pytest.approx(0.0)
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    with pytest.raises(ValueError):
        psnr(a, np.zeros((3, 4, 3)))


def test_foreground_color_and_variance():
    red = RenderedImage(np.tile([1.0, 0.0, 0.0], (4, 4, 1)), np.ones((4, 4)))
    empty = RenderedImage(np.ones((4, 4, 3)), np.zeros((4, 4)))
    # half-transparent blue over the white background
    alpha = np.full((4, 4), 0.5)
    blue = RenderedImage(0.5 * np.tile([0.0, 0.0, 1.0], (4, 4, 1)) + 0.5, alpha)
    assert np.allclose(foreground_color(red), [1.0, 0.0, 0.0])
    assert np.array_equal(foreground_color(empty), np.zeros(3))
    assert np.allclose(foreground_color(blue), [0.0, 0.0, 1.0])
    assert color_variance([red, red, red]) == 0.0
    # two-frame population variance per channel is (difference / 2)^2
    assert color_variance([red, blue]) == pytest.approx(0.25 + 0.0 + 0.25, abs=1e-12)
