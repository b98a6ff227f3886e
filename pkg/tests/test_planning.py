import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from emoflow.backends.mock import MockScript, ScriptEntry
from emoflow.errors import BackendMalformedResponse, ImageUnreadable, IncompatiblePair, PlanningFailed
from emoflow.images import ImageArtifact
from emoflow.knowledge import EmotionFactorTree, FactorNode, retrieve
from emoflow.labels import MIKELS, EditingMethod, ElementKind, EmotionLabel
from emoflow.planning import (
    EditPlan,
    Element,
    Entity,
    Instruction,
    PlanSet,
    SemanticCues,
    analyze,
    compatible_methods,
    format_instruction,
    generate_plans,
    prioritize,
)

M = EditingMethod
K = ElementKind
AWE = EmotionLabel("awe")


def cues(entities=("dog",)):
    return SemanticCues(
        "a dog on a sandy beach",
        tuple(Entity(n, 0.9 - 0.1 * i) for i, n in enumerate(entities)),
        EmotionLabel("contentment"),
        0.7,
        (0.0,) * 8,
    )


def nodes(n, emotion="awe", kinds=None):
    kinds = kinds or [K.OBJECT, K.BACKGROUND_SCENE, K.COLOR_TONE, K.FACIAL_EXPRESSION, K.ATTRIBUTE, K.ACTION]
    return [
        FactorNode(f"{emotion}-{i:04d}", EmotionLabel(emotion), kinds[i % len(kinds)], f"element {i}", (float(i),) + (0.0,) * 7, i, 5)
        for i in range(n)
    ]


# -- analysis ------------------------------------------------------------------


def test_analyze_passes_fixture_values(make_backends, source):
    script = MockScript(
        entries=(
            ScriptEntry(
                "/analyze",
                response={
                    "scene_summary": "a quiet beach at dusk",
                    "entities": [{"name": "sea", "salience": 0.8}],
                    "source_emotion": "contentment",
                    "source_confidence": 0.66,
                },
            ),
            ScriptEntry("/embed", match={"text": "a quiet beach at dusk"}, response={"vector": [0.125] * 8}),
        )
    )
    b, mock = make_backends(script)
    c = analyze(source, mock.store, b)
    assert c.scene_summary == "a quiet beach at dusk"
    assert c.source_emotion == EmotionLabel("contentment")
    assert c.entities == (Entity("sea", 0.8),)
    assert c.cue_embedding == (0.125,) * 8


def test_analyze_embedding_is_the_embedder_output(make_backends, source, store):
    b, _ = make_backends()
    c = analyze(source, store, b)
    assert list(c.cue_embedding) == b.embed_text(c.scene_summary)


def test_analyze_unreadable_image_makes_no_call(make_backends, store):
    b, mock = make_backends()
    ghost = ImageArtifact("cas://" + "0" * 64, "0" * 64, 512, 512)
    with pytest.raises(ImageUnreadable):
        analyze(ghost, store, b)
    assert mock.request_log == []


def test_analyze_bad_label(make_backends, source, store):
    b, _ = make_backends(MockScript(entries=(ScriptEntry("/analyze", patch={"scene_summary": "   "}),)))
    with pytest.raises(BackendMalformedResponse):
        analyze(source, store, b)


# -- compatibility and formatting ----------------------------------------------


def test_compatibility_rows():
    assert compatible_methods(K.COLOR_TONE) == {M.CHANGE_FILTER}
    assert compatible_methods(K.OBJECT) == {M.REPLACE_OBJECT, M.ADD_OBJECT, M.REMOVE_OBJECT, M.CHANGE_ATTRIBUTE}
    assert compatible_methods(K.BACKGROUND_SCENE) == {M.CHANGE_BACKGROUND}
    assert compatible_methods(K.FACIAL_EXPRESSION) == {M.CHANGE_EXPRESSION}
    assert compatible_methods(K.ATTRIBUTE) == {M.CHANGE_ATTRIBUTE}
    assert compatible_methods(K.ACTION) == {M.ADD_OBJECT, M.CHANGE_ATTRIBUTE}
    assert set().union(*(compatible_methods(k) for k in K)) == set(M)


def test_templates():
    bg = Element.free("a sunset", K.BACKGROUND_SCENE)
    assert format_instruction(bg, M.CHANGE_BACKGROUND) == "replace the background with a sunset"
    assert format_instruction(Element.free("greenish", K.COLOR_TONE), M.CHANGE_FILTER) == "apply a greenish color tone"
    obj = Element.free("a red balloon", K.OBJECT)
    assert format_instruction(obj, M.ADD_OBJECT) == "add a red balloon to the scene"
    assert format_instruction(obj, M.REMOVE_OBJECT) == "remove a red balloon"
    assert format_instruction(obj, M.REPLACE_OBJECT, "the car") == "replace the car with a red balloon"
    assert format_instruction(obj, M.REPLACE_OBJECT) == "replace the object with a red balloon"
    assert format_instruction(Element.free("rusty", K.ATTRIBUTE), M.CHANGE_ATTRIBUTE, "the gate") == "change the gate to be rusty"
    assert format_instruction(Element.free("a smile", K.FACIAL_EXPRESSION), M.CHANGE_EXPRESSION) == "change the facial expression to a smile"


def test_incompatible_pair():
    with pytest.raises(IncompatiblePair):
        format_instruction(Element.free("crying", K.FACIAL_EXPRESSION), M.CHANGE_BACKGROUND)


descriptions = st.text(alphabet="abcdefgh ", min_size=1, max_size=12).filter(lambda s: s.strip())


@given(descriptions, descriptions, st.sampled_from(list(K)))
def test_format_injective_in_description(d1, d2, kind):
    if d1.strip() == d2.strip():
        return
    for method in compatible_methods(kind):
        a = format_instruction(Element.free(d1, kind), method)
        b = format_instruction(Element.free(d2, kind), method)
        assert a != b


def test_plan_invariants():
    e = Element.free("x", K.OBJECT)
    with pytest.raises(ValueError):
        EditPlan(1, (Instruction.make(2, e, M.ADD_OBJECT),))
    with pytest.raises(ValueError):
        EditPlan(1, (Instruction.make(1, e, M.ADD_OBJECT), Instruction.make(2, e, M.ADD_OBJECT)))
    with pytest.raises(IncompatiblePair):
        EditPlan(1, (Instruction(1, e, M.CHANGE_FILTER, "apply"),))
    p = EditPlan(1, (Instruction.make(1, e, M.ADD_OBJECT),))
    with pytest.raises(ValueError):
        PlanSet((p, EditPlan(2, p.instructions)), AWE)
    assert EditPlan.from_json(p.to_json()) == p


# -- prioritization and plan generation -----------------------------------------


def test_prioritize_boosts_entity_mentions():
    pool = nodes(4)
    pool[2] = FactorNode("awe-0002", AWE, K.COLOR_TONE, "a dog in golden light", pool[2].embedding, 2, 5)
    assert [n.id for n in prioritize(pool, cues())] == ["awe-0000", "awe-0002", "awe-0001", "awe-0003"]


def test_pool_of_five_single_instruction_plans(backends):
    plans = generate_plans(cues(()), AWE, nodes(5), backends, k=5, n_max=1)
    assert [len(p.instructions) for p in plans.plans] == [1] * 5
    assert sorted(p.instructions[0].element.id for p in plans.plans) == [f"awe-{i:04d}" for i in range(5)]


def test_single_plan(backends):
    plans = generate_plans(cues(), AWE, nodes(3), backends, k=1, n_max=4)
    assert len(plans.plans) == 1
    assert len(plans.plans[0].instructions) == 3


def test_out_of_domain_uses_proposer_only(make_backends):
    offered = [
        {"description": "a night scene", "kind": "background_scene", "method": "change_background"},
        {"description": "dark clouds", "kind": "object", "method": "add_object"},
        {"description": "fallen leaves", "kind": "object", "method": "add_object"},
        {"description": "an umbrella", "kind": "object", "method": "add_object"},
    ]
    b, mock = make_backends(MockScript(entries=(ScriptEntry("/plan-propose", match={"mode": "propose"}, response={"suggestions": offered}),)))
    target = EmotionLabel.parse("depression")
    for k in (3, 5):
        plans = generate_plans(cues(), target, nodes(5), b, k=k, n_max=4)
        used = {ins.element.id for p in plans.plans for ins in p.instructions}
        assert used <= {f"free:{o['kind']}:{o['description']}" for o in offered}
        assert len(plans.plans) == k
    assert mock.calls("/plan-propose") >= 2


def test_small_pool_supplemented_by_proposer(make_backends):
    b, mock = make_backends()
    plans = generate_plans(cues(), AWE, nodes(2), b, k=5, n_max=4)
    ids = {ins.element.id for p in plans.plans for ins in p.instructions}
    assert {"awe-0000", "awe-0001"} <= ids
    assert any(i.startswith("free:") for i in ids)
    assert mock.calls("/plan-propose") >= 1


def test_exhausted_proposer_fails(make_backends):
    one = [{"description": "a lantern", "kind": "object", "method": "add_object"}]
    b, _ = make_backends(MockScript(entries=(ScriptEntry("/plan-propose", response={"suggestions": one}),)))
    with pytest.raises(PlanningFailed):
        generate_plans(cues(), EmotionLabel.parse("nostalgia"), [], b, k=6, n_max=1)


def test_empty_proposer_fails(make_backends):
    b, _ = make_backends(MockScript(entries=(ScriptEntry("/plan-propose", response={"suggestions": []}),)))
    with pytest.raises(PlanningFailed):
        generate_plans(cues(), EmotionLabel.parse("nostalgia"), [], b, k=2)


def test_node_elements_match_target(backends):
    pool = nodes(4) + nodes(3, "fear")
    plans = generate_plans(cues(), AWE, pool, backends, k=3)
    for p in plans.plans:
        for ins in p.instructions:
            if not ins.element.id.startswith("free:"):
                assert ins.element.id.startswith("awe-")


def _random_tree(rng):
    out = []
    for e in MIKELS:
        for i in range(int(rng.integers(0, 6))):
            kind = list(K)[int(rng.integers(len(K)))]
            out.append(FactorNode(f"{e}-{i:04d}", EmotionLabel(e), kind, f"{e} factor {i}", tuple(rng.normal(size=8)), i, 5))
    return EmotionFactorTree(tuple(out), 8)


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.integers(0, 2**16), st.sampled_from(MIKELS), st.integers(1, 6), st.integers(1, 4))
def test_generated_plans_are_valid_and_deterministic(make_backends, seed, emotion, k, n_max):
    rng = np.random.default_rng(seed)
    tree = _random_tree(rng)
    b, _ = make_backends(MockScript(seed=seed))
    target = EmotionLabel(emotion)
    c = cues()
    pool = retrieve(tree, c.cue_embedding, target) if tree.nodes_for(target) else []
    plans = generate_plans(c, target, pool, b, k=k, n_max=n_max, seed=seed)
    assert len(plans.plans) == k
    sigs = [p.signature for p in plans.plans]
    assert all(sigs[i] != sigs[j] for i in range(k) for j in range(i + 1, k))
    for p in plans.plans:
        assert 1 <= len(p.instructions) <= n_max
        for ins in p.instructions:
            assert ins.method in compatible_methods(ins.element.kind)
    again = generate_plans(c, target, pool, make_backends(MockScript(seed=seed))[0], k=k, n_max=n_max, seed=seed)
    assert again == plans
