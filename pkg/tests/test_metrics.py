import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vlcfusion import metrics as M
from vlcfusion.metrics import DetectionResult

import oracles

THREE_IMAGE_DETS = [
    [
        {"class_id": 0, "box": (0, 0, 10, 10), "score": 0.9},
        {"class_id": 0, "box": (1, 1, 11, 11), "score": 0.8},
        {"class_id": 1, "box": (20, 20, 30, 28), "score": 0.7},
        {"class_id": 2, "box": (40, 40, 45, 45), "score": 0.2},
    ],
    [
        {"class_id": 0, "box": (5, 5, 14, 16), "score": 0.6},
        {"class_id": 1, "box": (0, 0, 4, 4), "score": 0.95},
        {"class_id": 1, "box": (30, 30, 38, 39), "score": 0.5},
    ],
    [
        {"class_id": 0, "box": (2, 3, 9, 12), "score": 0.4},
    ],
]
THREE_IMAGE_GTS = [
    [{"class_id": 0, "box": (0, 0, 10, 10)}, {"class_id": 1, "box": (21, 19, 30, 29)}],
    [{"class_id": 0, "box": (4, 6, 14, 15)}, {"class_id": 1, "box": (31, 30, 38, 40)},
     {"class_id": 1, "box": (50, 50, 55, 58)}],
    [{"class_id": 0, "box": (2, 2, 10, 12)}, {"class_id": 0, "box": (60, 60, 70, 70)}],
]


def _results(items, gt=False):
    return [DetectionResult.from_list(({**d, "score": 1.0} if gt else d) for d in img) for img in items]


def test_iou_one_seventh_exact():
    assert M.iou((0, 0, 2, 2), (1, 1, 3, 3)) == 1 / 7
    assert M.iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert M.iou((0, 0, 1, 1), (0, 0, 1, 1)) == 1.0
    with pytest.raises(M.DegenerateBoxError):
        M.iou((0, 0, 0, 1), (0, 0, 1, 1))


def test_three_image_fixture_matches_brute_force():
    rep = M.mean_ap(_results(THREE_IMAGE_DETS), _results(THREE_IMAGE_GTS, gt=True))
    ref = oracles.brute_force_eval(THREE_IMAGE_DETS, [[{**g, "score": 1.0} for g in img] for img in THREE_IMAGE_GTS],
                                   M.COCO_THRESHOLDS, max_dets=100)
    assert abs(rep.map - ref["map"]) < 1e-12
    assert abs(rep.map50 - ref["map50"]) < 1e-12
    assert abs(rep.mar100 - ref["mar"]) < 1e-12
    for c, v in ref["ap"].items():
        np.testing.assert_allclose(rep.ap[c], v, atol=1e-12)
    assert 0 < rep.map < rep.map50 < 1


def test_perfect_and_empty_detectors():
    gts = _results(THREE_IMAGE_GTS, gt=True)
    perfect = _results([[{**g, "score": 1.0} for g in img] for img in THREE_IMAGE_GTS])
    rep = M.mean_ap(perfect, gts)
    assert rep.map == 1.0 and rep.map50 == 1.0 and rep.mar100 == 1.0
    empty = [DetectionResult.empty() for _ in gts]
    rep = M.mean_ap(empty, gts)
    assert rep.map == 0.0 and rep.map50 == 0.0 and rep.mar100 == 0.0


def test_average_precision_edge_cases():
    assert M.average_precision([], [], 0) is None
    assert M.average_precision([False], [0.3], 0) == 0.0
    assert M.average_precision([], [], 3) == 0.0
    # TP then FP at recall 1/2: precision 1 up to r=0.5 -> 51/101
    assert M.average_precision([True, False], [0.9, 0.1], 2) == pytest.approx(51 / 101)


def test_hallucinated_class_counts_as_zero():
    gts = _results([[{"class_id": 0, "box": (0, 0, 4, 4)}]], gt=True)
    dets = _results([[{"class_id": 0, "box": (0, 0, 4, 4), "score": 0.9},
                      {"class_id": 5, "box": (0, 0, 4, 4), "score": 0.9}]])
    rep = M.mean_ap(dets, gts)
    assert rep.class_ids == [0, 5] and rep.map50 == 0.5
    assert M.mean_ap(dets, gts, classes=[0]).map50 == 1.0


def test_max_dets_caps_recall():
    gts = _results([[{"class_id": 0, "box": (i * 10, 0, i * 10 + 5, 5)} for i in range(3)]], gt=True)
    dets = [DetectionResult(np.array([g for g in gts[0].boxes]), [0, 0, 0], [0.9, 0.8, 0.7])]
    assert M.mean_ar_100(dets, gts, max_dets=2) == pytest.approx(2 / 3)
    assert M.mean_ar_100(dets, gts) == 1.0


def test_match_ties_prefer_higher_iou_then_first_gt():
    m = M.match_detections([(0, 0, 10, 10)], [0.5], [(0, 0, 10, 9), (0, 0, 10, 10)], 0.5)
    assert m.pairs == [(0, 1)]
    m = M.match_detections([(0, 0, 10, 10), (0, 0, 10, 10)], [0.5, 0.5], [(0, 0, 10, 10)], 0.5)
    assert m.pairs == [(0, 0)] and m.tp.tolist() == [True, False]


def test_report_serialisation():
    rep = M.mean_ap(_results(THREE_IMAGE_DETS), _results(THREE_IMAGE_GTS, gt=True), class_names={0: "car"})
    d = rep.to_dict()
    assert d["classes"][0]["name"] == "car" and len(d["thresholds"]) == 10
    lines = rep.to_csv().strip().splitlines()
    assert lines[0] == "class,mAP,mAP50,mAR100" and lines[-1].startswith("overall,")


def test_input_validation():
    with pytest.raises(ValueError):
        M.mean_ap([DetectionResult.empty()], [])
    with pytest.raises(ValueError):
        M.mean_ap([DetectionResult.empty()], [DetectionResult.empty()])
    with pytest.raises(M.DegenerateBoxError):
        DetectionResult([(1, 1, 0, 2)], [0], [1.0])


box = st.tuples(st.integers(0, 12), st.integers(0, 12), st.integers(2, 8), st.integers(2, 8)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3])
)
det = st.fixed_dictionaries({"class_id": st.integers(0, 2), "box": box,
                             "score": st.integers(1, 20).map(lambda s: s / 20)})
gt = st.fixed_dictionaries({"class_id": st.integers(0, 2), "box": box})


@given(st.lists(st.tuples(st.lists(det, max_size=5), st.lists(gt, max_size=4)), min_size=1, max_size=3))
def test_random_fixtures_match_brute_force(images):
    dets = [d for d, _ in images]
    gts = [g for _, g in images]
    if not any(gts):
        return
    rep = M.mean_ap(_results(dets), _results(gts, gt=True))
    ref = oracles.brute_force_eval(dets, [[{**g, "score": 1.0} for g in img] for img in gts],
                                   M.COCO_THRESHOLDS, max_dets=100)
    assert abs(rep.map - ref["map"]) < 1e-12
    assert abs(rep.map50 - ref["map50"]) < 1e-12
    assert abs(rep.mar100 - ref["mar"]) < 1e-12
