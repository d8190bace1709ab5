"""Domain-type invariants and serialization roundtrips."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sceneqa.core import (
    CharacterRecord,
    CharacterRegistry,
    FinalAnswer,
    FrameRef,
    GlobalAnalysis,
    GoalProposal,
    PerceptionResult,
    Question,
    Scene,
    SegmentAnalysis,
    TimeInterval,
    format_seconds,
    merge_intervals,
)
from sceneqa.errors import InvalidInputError

text = st.text(
    alphabet=st.characters(blacklist_categories=("Cs",), blacklist_characters="\x00"),
    max_size=60,
)
seconds = st.floats(min_value=0.0, max_value=7200.0, allow_nan=False).map(
    lambda x: round(x, 3)
)
names = st.from_regex(r"[a-z][a-z0-9_]{0,10}", fullmatch=True)


@st.composite
def intervals(draw):
    a = draw(seconds)
    b = draw(st.floats(min_value=0.001, max_value=500.0).map(lambda x: round(x, 3)))
    return TimeInterval(a, a + b)


@st.composite
def frame_refs(draw):
    return FrameRef(
        draw(names), draw(seconds),
        path=draw(st.none() | st.just("frames/x.png")),
        data=draw(st.none() | st.binary(max_size=16)),
    )


@st.composite
def scenes(draw):
    return Scene(
        scene_id=draw(st.integers(0, 5000)),
        interval=draw(intervals()),
        brief=draw(text),
        detailed=draw(text),
        appeared_characters=tuple(draw(st.lists(names, max_size=4))),
    )


@st.composite
def registries(draw):
    record_names = draw(st.lists(names, max_size=5, unique=True))
    records = tuple(
        CharacterRecord(n, draw(text), draw(frame_refs())) for n in record_names
    )
    rename = {}
    for old in draw(st.lists(names, max_size=5, unique=True)):
        if record_names and old not in record_names:
            rename[old] = draw(st.sampled_from(record_names))
    return CharacterRegistry(records, rename)


@st.composite
def segment_analyses(draw):
    return SegmentAnalysis(
        chunk_id=draw(st.integers(0, 100)),
        reasoning=draw(text),
        relevant=tuple(draw(st.lists(intervals(), max_size=4))),
        confidence=draw(st.integers(1, 5)),
        key_characters=tuple(draw(st.lists(st.tuples(text, text), max_size=3))),
    )


class TestRoundtrips:
    @given(scenes())
    @settings(max_examples=200)
    def test_scene(self, scene):
        assert Scene.from_dict(scene.to_dict()) == scene

    @given(frame_refs())
    @settings(max_examples=200)
    def test_frame_ref(self, ref):
        assert FrameRef.from_dict(ref.to_dict()) == ref

    @given(registries())
    @settings(max_examples=200)
    def test_registry(self, registry):
        assert CharacterRegistry.from_dict(registry.to_dict()) == registry

    @given(segment_analyses())
    @settings(max_examples=200)
    def test_segment_analysis(self, analysis):
        assert SegmentAnalysis.from_dict(analysis.to_dict()) == analysis

    @given(st.lists(intervals(), min_size=1, max_size=5), text,
           st.sampled_from(["local", "global"]))
    @settings(max_examples=100)
    def test_global_analysis(self, ivs, reasoning, flag):
        ga = GlobalAnalysis(reasoning, tuple(ivs), (), flag)
        assert GlobalAnalysis.from_dict(ga.to_dict()) == ga

    @given(text, text, text)
    def test_goal_proposal(self, a, b, c):
        gp = GoalProposal(a, b, c)
        assert GoalProposal.from_dict(gp.to_dict()) == gp

    @given(text, st.sampled_from("ABCDE"))
    def test_final_answer(self, reasoning, letter):
        fa = FinalAnswer(reasoning, letter)
        assert FinalAnswer.from_dict(fa.to_dict()) == fa

    @given(intervals(), text, text)
    def test_perception(self, iv, q, a):
        p = PerceptionResult("local", iv, q, a, ())
        assert PerceptionResult.from_dict(p.to_dict()) == p

    def test_question(self):
        q = Question("q1", "v", "what?", ("a", "b", "c"), "ER", "B", TimeInterval(1, 2))
        assert Question.from_dict(q.to_dict()) == q


class TestInvariants:
    def test_interval_validation(self):
        with pytest.raises(InvalidInputError):
            TimeInterval(5, 5)
        with pytest.raises(InvalidInputError):
            TimeInterval(-1, 5)
        with pytest.raises(InvalidInputError):
            TimeInterval(7, 3)

    def test_confidence_range(self):
        with pytest.raises(InvalidInputError):
            SegmentAnalysis(0, "", (), 0, ())
        with pytest.raises(InvalidInputError):
            SegmentAnalysis(0, "", (), 6, ())

    def test_global_analysis_needs_interval(self):
        with pytest.raises(InvalidInputError):
            GlobalAnalysis("", (), (), "local")

    def test_final_answer_letter(self):
        with pytest.raises(InvalidInputError):
            FinalAnswer("", "F")

    def test_registry_unique_names(self):
        rec = CharacterRecord("a", "", FrameRef("v", 0.0))
        with pytest.raises(InvalidInputError):
            CharacterRegistry((rec, rec), {})

    def test_question_labels(self):
        q = Question("q", "v", "t", ("a", "b", "c", "d", "e"))
        assert q.labels() == "ABCDE"
        with pytest.raises(InvalidInputError):
            Question("q", "v", "t", ("only",))
        with pytest.raises(InvalidInputError):
            Question("q", "v", "t", ("a", "b"), gt_answer="C")

    @given(registries())
    @settings(max_examples=300)
    def test_rename_map_idempotent_by_construction(self, registry):
        for old in registry.rename_map:
            once = registry.rename(old)
            assert registry.rename(once) == once


class TestMergeIntervals:
    def test_overlap_and_adjacency(self):
        merged = merge_intervals(
            [TimeInterval(0, 10), TimeInterval(5, 12), TimeInterval(12, 20), TimeInterval(30, 40)]
        )
        assert [iv.to_pair() for iv in merged] == [[0, 20], [30, 40]]

    @given(st.lists(intervals(), max_size=10))
    @settings(max_examples=200)
    def test_result_sorted_disjoint(self, ivs):
        merged = merge_intervals(ivs)
        for a, b in zip(merged, merged[1:]):
            assert a.t_end < b.t_start


def test_format_seconds():
    assert format_seconds(2.5) == "2.5"
    assert format_seconds(120) == "120.0"
    assert format_seconds(10.04) == "10.0"
