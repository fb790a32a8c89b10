import itertools
import json
from math import comb

import numpy as np
import pytest

from vlcfusion import conditions as cp
from vlcfusion import io as aio
from vlcfusion.experiments import MOCK_EXTRACTED, scene_vlm
from vlcfusion.vlm import MockVLM, VlmNetworkError, VlmRequest


def _flags(n=50, seed=0):
    rng = np.random.default_rng(seed)
    names = ("dark", "rain", "blur", "urban", "weekend")
    return {f"img{i:03d}": {k: bool(rng.random() < 0.4) for k in names} for i in range(n)}


def _manifest(flags):
    return [cp.ImageRecord(i) for i in flags]


NO_WAIT = cp.RetryPolicy(attempts=3, backoff=0.0)


def binomial_consistency(p, runs=5):
    """Exact E[max(B, R - B) / R] for B ~ Binomial(R, p)."""
    return sum(comb(runs, b) * p**b * (1 - p) ** (runs - b) * max(b, runs - b) / runs for b in range(runs + 1))


def test_binomial_oracle_by_enumeration():
    # cross-check the closed form against enumerating all 2^5 outcomes
    for p in (0.0, 0.1, 0.5):
        total = 0.0
        for outcome in itertools.product((0, 1), repeat=5):
            b = sum(outcome)
            total += p**b * (1 - p) ** (5 - b) * max(b, 5 - b) / 5
        assert abs(total - binomial_consistency(p)) < 1e-15
    assert binomial_consistency(0.5) == pytest.approx(0.6875)


def test_normalization_and_dedup_fixture():
    raw = cp.ConditionSet.from_questions(MOCK_EXTRACTED)
    out = cp.dedup_conditions(raw)
    assert (len(raw), len(out)) == (12, 9)
    assert [c.index for c in out] == list(range(1, 10))
    assert out.questions[0] == MOCK_EXTRACTED[0]  # first occurrence wins
    assert cp.normalize_question("  Is IT   raining ?! ") == "is it raining"


def test_prompt_templates_substitute_n():
    system, user = cp.generation_template().render(7)
    assert "{N}" not in system + user and "7" in system + user
    s2, u2 = cp.captioning_template().render()
    assert s2 and u2
    assert cp.format_questions(["a?", "b?"]) == "1. a?\n2. b?"


def test_captioning_subset_is_seeded_and_distinct():
    man = _manifest(_flags())
    a = cp.sample_captioning_subset(man, 10, 3)
    assert a == cp.sample_captioning_subset(man, 10, 3)
    assert len({r.id for r in a}) == 10
    assert [r.id for r in a] == sorted(r.id for r in a)
    with pytest.raises(ValueError):
        cp.sample_captioning_subset(man, 51, 0)


def test_caption_and_extract_with_failures():
    flags = _flags(6)

    def responder(req, i):
        if req.schema == "caption":
            return "garbage" if req.images[0].ref == "img002" else json.dumps({"Conditions": "ok"})
        return json.dumps({"Conditions": ["Is it dark?", "is it dark"]})

    vlm = MockVLM(responder=responder)
    caps, fails = cp.caption_images(_manifest(flags), vlm, retry=NO_WAIT)
    assert len(caps) == 5 and fails[0]["image_id"] == "img002" and fails[0]["attempts"] == 3
    raw = cp.extract_conditions([(cp.ImageRecord(c.image_id), c) for c in caps], vlm, retry=NO_WAIT)
    assert len(raw) == 2 and len(cp.dedup_conditions(raw)) == 1
    with pytest.raises(cp.ExtractionError):
        cp.extract_conditions([(cp.ImageRecord("x"), caps[0])], MockVLM(responder=lambda r, i: "{}"), retry=NO_WAIT)


def test_retry_backoff_schedule():
    waits = []
    calls = []

    def responder(req, i):
        calls.append(i)
        return "bad" if i < 2 else '{"1": true}'

    retry = cp.RetryPolicy(attempts=3, backoff=0.5, factor=2.0, sleep=waits.append)
    m = cp.generate_responses([cp.ImageRecord("a")], cp.ConditionSet.from_questions(["q?"]),
                              MockVLM(responder=responder), retry=retry)
    assert m.rows == {"a": [True]} and waits == [0.5, 1.0]


def test_responses_batched_equals_per_question():
    flags = _flags(20)
    conds = cp.dedup_conditions(cp.ConditionSet.from_questions(MOCK_EXTRACTED))
    vlm = scene_vlm(flags, flip=0.0)
    a = cp.generate_responses(_manifest(flags), conds, vlm, batch=True)
    b = cp.generate_responses(_manifest(flags), conds, vlm, batch=False, workers=3)
    assert a.rows == b.rows
    assert a.rows["img000"][0] == flags["img000"]["dark"]
    assert a.vectors().shape == (20, 9)


def test_unparseable_answers_become_unknown():
    conds = cp.ConditionSet.from_questions(["a?", "b?"])
    m = cp.generate_responses([cp.ImageRecord("x")], conds, MockVLM(responder=lambda r, i: '{"1": true}'),
                              retry=NO_WAIT)
    assert m.rows["x"] == [None, None] and m.n_unknown() == 2
    np.testing.assert_array_equal(m.vectors(), [[0, 0]])


def test_interrupt_and_resume(tmp_path):
    flags = _flags(30)
    conds = cp.ConditionSet.from_questions(["Is it raining?"])
    good = scene_vlm(flags, flip=0.0)
    state = {"n": 0}

    class Flaky:
        name = "flaky"

        def complete(self, req: VlmRequest):
            state["n"] += 1
            if state["n"] > 12:
                raise VlmNetworkError("connection refused")
            return good.complete(req)

    ck = tmp_path / "partial.json"
    with pytest.raises(cp.PipelineInterrupted) as info:
        cp.generate_responses(_manifest(flags), conds, Flaky(), retry=NO_WAIT, checkpoint=ck, checkpoint_every=10)
    assert info.value.done == 10 and len(aio.read_json(ck)["rows"]) == 10
    full = cp.generate_responses(_manifest(flags), conds, good, checkpoint=ck, checkpoint_every=10)
    ref = cp.generate_responses(_manifest(flags), conds, good)
    assert full.rows == ref.rows and list(full.rows) == list(flags)


@pytest.mark.parametrize("p", [0.0, 0.1, 0.5])
def test_consistency_matches_binomial(p):
    flags = _flags(200, seed=1)
    conds = cp.ConditionSet.from_questions(["Is it raining?"])
    rep = cp.score_consistency(_manifest(flags), conds, scene_vlm(flags, flip=p, seed=5), runs=5)
    assert abs(rep.scores[1] - binomial_consistency(p)) < 0.05


def test_ranking_ties_and_top_k():
    conds = cp.ConditionSet.from_questions(["a?", "b?", "c?"])
    rep = cp.ConsistencyReport(conds, 5, 10, {1: 0.8, 2: 1.0, 3: 0.8})
    assert [c.index for c, _ in rep.ranked()] == [2, 1, 3]
    top = cp.select_top_k(rep, 2)
    assert top.questions == ["b?", "a?"] and [c.index for c in top] == [1, 2]
    with pytest.raises(ValueError):
        cp.select_top_k(rep, 4)
    with pytest.raises(ValueError):
        cp.score_consistency([cp.ImageRecord("a")], conds, MockVLM(), runs=1)


def test_persistence_round_trips(tmp_path):
    conds = cp.dedup_conditions(cp.ConditionSet.from_questions(MOCK_EXTRACTED))
    cp.save_conditions(conds, tmp_path / "c.json")
    back = cp.load_conditions(tmp_path / "c.json")
    assert back == conds and back.hash() == conds.hash()
    m = cp.ResponseMatrix(conds.hash(), {"a": [True] * 9, "b": [None] * 9})
    cp.save_responses(m, tmp_path / "r.json")
    assert cp.load_responses(tmp_path / "r.json") == m
    rep = cp.ConsistencyReport(conds, 5, 2, {c.index: 1.0 - c.index / 100 for c in conds})
    cp.save_consistency(rep, tmp_path / "k.json")
    assert cp.load_consistency(tmp_path / "k.json", conds).scores == rep.scores
    cp.save_captions([cp.Caption("a", "t")], [], tmp_path / "cap.json")
    assert cp.load_captions(tmp_path / "cap.json") == [cp.Caption("a", "t")]


def test_condition_file_validation(tmp_path):
    bad = {"provenance": "extracted", "conditions": [{"index": 1, "question": "Is it dark?"},
                                                    {"index": 2, "question": "is it DARK"}]}
    with pytest.raises(aio.ArtifactSchemaError, match="conditions/1/question.*dedup"):
        cp.conditions_from_dict(bad, "c.json")
    gap = {"provenance": "extracted", "conditions": [{"index": 2, "question": "x?"}]}
    with pytest.raises(aio.ArtifactSchemaError, match="conditions/index"):
        cp.conditions_from_dict(gap)
    with pytest.raises(aio.ArtifactSchemaError):
        cp.conditions_from_dict({"provenance": "bogus", "conditions": []})


@pytest.mark.parametrize("name,n", [("waymo_extracted_40", 40), ("atr_extracted_19", 19),
                                    ("waymo_human_example_3", 3), ("atr_human_example_14", 14)])
def test_bundled_condition_lists(name, n):
    cs = cp.bundled_conditions(name)
    assert len(cs) == n and all(q.strip() for q in cs.questions)


def test_activation_fraction():
    m = cp.ResponseMatrix("h", {"a": [False, True], "b": [False, None], "c": [None, None]})
    assert m.activation_fraction() == pytest.approx(1 / 3)
