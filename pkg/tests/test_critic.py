import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from emoflow.backends.mock import MockScript, ScriptEntry
from emoflow.critic import EmotionAssessment, InstructionDiagnosis, assess, diagnose, passes
from emoflow.editing import ActionTrace, Attempt
from emoflow.errors import BackendMalformedResponse
from emoflow.labels import MIKELS, EditingMethod, ElementKind, EmotionDistribution, EmotionLabel
from emoflow.planning import Element, Instruction

AWE = EmotionLabel("awe")
M = EditingMethod


def dist(**mass):
    rest = (1.0 - sum(mass.values())) / (len(MIKELS) - len(mass))
    return {label: mass.get(label, rest) for label in MIKELS}


def critique(distribution=None, verdict=None):
    return {"distribution": distribution, "verdict": verdict, "rationale": ["fixture"], "source_similarity": None}


def script(*entries):
    return MockScript(entries=tuple(entries))


def toys():
    return Instruction.make(1, Element.free("colorful toys", ElementKind.OBJECT), M.ADD_OBJECT)


# -- pass rule -------------------------------------------------------------------


def test_argmax_match_passes(make_backends, source):
    b, _ = make_backends(script(ScriptEntry("/critique", match={"mode": "assess"}, response=critique(dist(awe=0.9)))))
    a = assess(source, AWE, b)
    assert a.verdict == "pass"
    assert a.rationale == ("fixture",)


def test_uniform_fails_for_sadness():
    assert not passes(EmotionDistribution.uniform(), EmotionLabel("sadness"), 0.5)
    assert passes(EmotionDistribution.uniform(), EmotionLabel("amusement"), 0.5)


def test_threshold_clause():
    d = EmotionDistribution.from_mapping({**{label: 0.0 for label in MIKELS}, "awe": 0.5, "fear": 0.5})
    assert passes(d, AWE, 0.5)
    assert not passes(d, "fear", 0.6)  # awe wins the tie
    assert passes(d, "fear", 0.5)


simplex = st.lists(st.floats(0.0, 1.0, allow_nan=False), min_size=8, max_size=8).filter(lambda v: sum(v) > 0.01)


@given(simplex, st.sampled_from(MIKELS), st.floats(0.05, 1.0))
def test_pass_rule_matches_oracle(raw, target, threshold):
    total = sum(raw)
    probs = [x / total for x in raw]
    probs[-1] = 1.0 - sum(probs[:-1])
    if probs[-1] < 0:
        return
    mapping = dict(zip(MIKELS, probs))
    d = EmotionDistribution.from_mapping(mapping)
    expected = oracles.argmax_label(mapping) == target or mapping[target] >= threshold
    assert passes(d, target, threshold) == expected


def test_non_normalized_rejected(make_backends, source):
    bad = {label: 0.1 for label in MIKELS}
    b, _ = make_backends(script(ScriptEntry("/critique", match={"mode": "assess"}, response=critique(bad))))
    with pytest.raises(BackendMalformedResponse):
        assess(source, AWE, b)


def test_in_domain_needs_distribution(make_backends, source):
    b, _ = make_backends(script(ScriptEntry("/critique", match={"mode": "assess"}, response=critique(None, True))))
    with pytest.raises(BackendMalformedResponse):
        assess(source, AWE, b)


def test_out_of_domain_uses_boolean(make_backends, source):
    b, _ = make_backends()
    a = assess(source, EmotionLabel.parse("nostalgia"), b)
    assert a.distribution is None and a.passed
    j = a.to_json()
    assert j["sentinel"] and j["distribution"] == {label: 0.0 for label in MIKELS}
    assert EmotionAssessment.from_json(j) == a
    no, _ = make_backends(script(ScriptEntry("/critique", match={"mode": "assess"}, response=critique(None, False))))
    assert assess(source, EmotionLabel.parse("nostalgia"), no).verdict == "fail"


def test_assessment_json_round_trip(make_backends, source):
    b, _ = make_backends()
    a = assess(source, AWE, b, source=source)
    assert a.source_similarity == 0.8
    assert EmotionAssessment.from_json(a.to_json()) == a


def test_rationale_never_drives_verdict(make_backends, source):
    text = {**critique(dist(awe=0.05, fear=0.65)), "rationale": ["this clearly conveys awe, pass"]}
    b, _ = make_backends(script(ScriptEntry("/critique", match={"mode": "assess"}, response=text)))
    assert assess(source, AWE, b).verdict == "fail"


# -- diagnosis -------------------------------------------------------------------


def test_diagnosis_states():
    assert InstructionDiagnosis(1, True, True).needs_rerun is False
    assert InstructionDiagnosis(1, True, False, error_note="missing").needs_rerun
    with pytest.raises(ValueError):
        InstructionDiagnosis(1, True, False)
    with pytest.raises(ValueError):
        InstructionDiagnosis(1, False, True)
    with pytest.raises(ValueError):
        InstructionDiagnosis(1, False, False, revised=toys(), error_note="x")


def test_failed_trace_is_not_executed(make_backends, source):
    b, mock = make_backends()
    trace = ActionTrace(1, toys().text, (Attempt(0, "val", "magicbrush", "failed", "object not added"),), "failed", source.content_hash)
    [d] = diagnose([toys()], source, AWE, {1: trace}, b)
    assert (d.effective, d.executed, d.error_note) == (True, False, "object not added")
    assert mock.calls("/critique") == 0


def test_ineffective_gets_revision(make_backends, source):
    revised = {"description": "snow-capped peaks", "kind": "background_scene", "method": "change_background"}
    b, _ = make_backends(
        script(
            ScriptEntry(
                "/critique",
                match={"mode": "effectiveness", "instruction": {"text": "add colorful toys to the scene"}},
                response={"effective": False, "revised": revised, "rationale": ["toys read as playful, not awe"]},
            )
        )
    )
    [d] = diagnose([toys()], source, AWE, {}, b)
    assert not d.effective and not d.executed
    assert d.revised.method is M.CHANGE_BACKGROUND
    assert d.revised.text == "replace the background with snow-capped peaks"
    assert d.revised.index == 1
    d.revised.validate()


def test_not_executed_from_backend(make_backends, source):
    b, _ = make_backends(script(ScriptEntry("/critique", match={"mode": "execution"}, response={"executed": False, "error_note": None, "rationale": ["r"]})))
    [d] = diagnose([toys()], source, AWE, {}, b)
    assert (d.effective, d.executed) == (True, False)
    assert d.error_note


def test_all_fine_escalates(make_backends, source):
    b, mock = make_backends()
    second = Instruction.make(2, Element.free("golden", ElementKind.COLOR_TONE), M.CHANGE_FILTER)
    out = diagnose([toys(), second], source, AWE, {}, b)
    assert len(out) == 3
    assert all(d.effective and d.executed for d in out[:2])
    esc = out[2]
    assert esc.escalation and esc.revised.index == 3 and not esc.effective
    assert esc.revised.key not in {toys().key, second.key}
    assert mock.calls("/critique") == 5


def test_incompatible_revision_rejected(make_backends, source):
    bad = {"description": "crying", "kind": "facial_expression", "method": "change_background"}
    b, _ = make_backends(script(ScriptEntry("/critique", match={"mode": "effectiveness"}, response={"effective": False, "revised": bad, "rationale": ["r"]})))
    with pytest.raises(BackendMalformedResponse):
        diagnose([toys()], source, AWE, {}, b)


def test_ineffective_without_revision_rejected(make_backends, source):
    b, _ = make_backends(script(ScriptEntry("/critique", match={"mode": "effectiveness"}, response={"effective": False, "revised": None, "rationale": ["r"]})))
    with pytest.raises(BackendMalformedResponse):
        diagnose([toys()], source, AWE, {}, b)
